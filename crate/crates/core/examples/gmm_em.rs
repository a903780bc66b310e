//! Fit a diagonal Gaussian mixture by EM and inspect posteriors.

use fvnet::gmm::{em_fit, EmConfig};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn main() -> fvnet::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let centres = [[-4.0, 0.0], [4.0, 1.0], [0.0, 6.0]];
    let noise = Normal::new(0.0, 0.7).unwrap();
    let samples: Vec<Vec<f64>> = (0..900)
        .map(|i| {
            let c = centres[i % 3];
            vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]
        })
        .collect();

    let fit = em_fit(
        &samples,
        &EmConfig {
            components: 3,
            max_iters: 100,
            tol: 1e-9,
            seed: 1,
        },
    )?;
    println!("converged: {}, iterations: {}", fit.converged, fit.log_likelihoods.len());
    println!(
        "mean log-likelihood {:.4} -> {:.4}",
        fit.log_likelihoods[0],
        fit.log_likelihoods.last().unwrap()
    );
    let w = fit.params.weights();
    for k in 0..3 {
        println!("component {k}: weight {:.3}, mean {:.3?}", w[k], fit.params.mean(k));
    }
    let gamma = fit.params.posteriors_vector(&[0.0, 3.0])?;
    println!("posteriors at (0, 3): {gamma:.3?}");
    Ok(())
}
