//! Fisher-vector encoding: accumulate statistics in two halves, merge, and
//! check the result against a single pass.

use fvnet::fisher::{fv_from_stats, normalize, FvAccumulator};
use fvnet::gmm::GmmParams;
use rand::{Rng, SeedableRng};

fn main() -> fvnet::Result<()> {
    let gmm = GmmParams::from_moments(&[0.5, 0.3, 0.2], vec![0.0, 0.0, 1.0, 1.0, -1.0, 2.0], &[1.0, 1.0, 0.5, 0.5, 2.0, 1.0])?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let descriptors: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-1.0..3.0)]).collect();

    let mut whole = FvAccumulator::new(3, 2);
    let mut first = FvAccumulator::new(3, 2);
    let mut second = FvAccumulator::new(3, 2);
    for (i, x) in descriptors.iter().enumerate() {
        let gamma = gmm.posteriors_vector(x)?;
        whole.push(x, &gamma);
        if i < 30 { &mut first } else { &mut second }.push(x, &gamma);
    }
    first.merge(&second)?;

    let a = fv_from_stats(&whole, &gmm)?;
    let b = fv_from_stats(&first, &gmm)?;
    let gap = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("Fisher vector length {} from {} descriptors", a.values.len(), whole.count);
    println!("max |single pass - merged halves| = {gap:.2e}");

    let (fv, _) = normalize(&a, true);
    let norm = fv.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("normalized: first entries {:.4?}, L2 norm {norm:.12}", &fv.values[..4]);
    Ok(())
}
