//! Trainable parameter counts for a large reference network and for a small bundle.

use fvnet::bundle::count_parameters_symbolic;

fn main() {
    let c = count_parameters_symbolic(6144, 100, 256, 101);
    println!("D=6144 n_c=100 K=256 m=101");
    println!("  projection  {:>9}", c.projection);
    println!("  gmm         {:>9}", c.gmm);
    println!("  classifier  {:>9}", c.classifier);
    println!("  total       {:>9}", c.total);

    for (d, n_c, k, m) in [(96, 8, 4, 4), (96, 16, 8, 4), (1, 1, 1, 2)] {
        let c = count_parameters_symbolic(d, n_c, k, m);
        println!("D={d} n_c={n_c} K={k} m={m}: total {}", c.total);
    }
}
