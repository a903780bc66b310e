//! Write a small synthetic motion-direction dataset and describe it.
//!
//! cargo run --release --example gen_data -- [out_dir]

use fvnet::data::{generate_synthetic, load_manifest, Split, SyntheticConfig};

fn main() -> fvnet::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("fvnet_synthetic"));
    let mut cfg = SyntheticConfig::new(1, 4, 3, 20, 32, 32);
    cfg.noise_std = 0.5;
    let manifest = generate_synthetic(&cfg, Split::Train, &out)?;
    println!("{} videos under {}", manifest.len(), out.display());

    let reloaded = load_manifest(out.join("train.csv"))?;
    print!("{}", reloaded.to_csv());
    let first = reloaded.load_video(&reloaded.entries[0])?;
    let mean = first.data().iter().sum::<f64>() / first.len() as f64;
    println!("first video dims {:?}, dtype {:?}, mean {mean:.4}", first.dims(), first.dtype());
    Ok(())
}
