//! Build a tensor, crop it, and round-trip it through the FVNT format.

use fvnet::tensor::{read_tensor, write_tensor, DType, Tensor4};

fn main() -> fvnet::Result<()> {
    let t = Tensor4::from_fn([2, 4, 5, 3], |[n, h, w, c]| (1000 * n + 100 * h + 10 * w + c) as f64);
    let crop = t.crop([1, 1, 2, 0], [1, 2, 2, 3])?;
    println!("crop dims {:?}", crop.dims());
    println!("crop fiber (0,0,0) = {:?}", crop.fiber(0, 0, 0));

    let dir = std::env::temp_dir().join("fvnet_tensor_io");
    std::fs::create_dir_all(&dir).map_err(|e| fvnet::Error::Io { path: dir.clone(), source: e })?;
    for dtype in [DType::F64, DType::F32] {
        let path = dir.join(format!("t_{dtype:?}.fvnt"));
        let stored = t.clone().with_dtype(dtype);
        write_tensor(&path, &stored)?;
        let back = read_tensor(&path)?;
        println!("{dtype:?}: {} bytes, identical after reload: {}", stored.encode().len(), back == stored);
    }
    Ok(())
}
