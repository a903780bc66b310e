//! Finite-difference verification of every backward pass on a random probe
//! network.

use fvnet::train::gradcheck::{run, Layer, Probe, DEFAULT_STEP};

fn main() -> fvnet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let probe = Probe::random(seed)?;
    let mut failures = 0;
    for rep in run(&probe, &Layer::ALL, DEFAULT_STEP)? {
        failures += usize::from(!rep.passed());
        println!(
            "{:<12} {:<18} {:.2e}  (tolerance {:.0e})",
            rep.layer.as_str(),
            rep.target,
            rep.max_rel_error,
            rep.layer.tolerance()
        );
    }
    println!("{failures} failures");
    Ok(())
}
