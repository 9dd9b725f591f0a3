//! Central-difference checks of the tape gradients for the segmentation loss,
//! policy log-probabilities, the GRTO tool term and the BTO objective.
//!
//! `cargo run --release --example gradcheck -- [instances]`

use std::collections::BTreeMap;

use bgrto::oracle::gradient_checks;

fn main() -> bgrto::Result<()> {
    let instances: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let mut worst: BTreeMap<&str, (f64, f64, bool)> = BTreeMap::new();
    for seed in 0..instances {
        for (name, rep) in gradient_checks(seed, 1e-5, 1e-5)? {
            let e = worst.entry(name).or_insert((0.0, 0.0, true));
            e.0 = e.0.max(rep.max_rel_err);
            e.1 = e.1.max(rep.max_abs_err_small);
            e.2 &= rep.pass;
        }
    }
    println!("{instances} micro instances, step 1e-5, tolerance 1e-5");
    for (name, (rel, abs, pass)) in worst {
        println!("  {name:<16} max rel err {rel:.2e}  max abs err (tiny grads) {abs:.2e}  {}", if pass { "ok" } else { "FAIL" });
    }
    Ok(())
}
