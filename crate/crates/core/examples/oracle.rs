//! Exact enumeration on a micro instance: partition function, tilted
//! posterior, the KL-regularized objective, and how well the group-wise BTO
//! estimator tracks the exact posterior-weighted tool gradient.
//!
//! `cargo run --release --example oracle -- [seed]`

use bgrto::oracle::{
    exact_bto_gradient, exact_klrl, exact_posterior, flatten_params, log_partition, loss_gradients, mc_bto_gradient,
    posterior_optimality_check, MicroInstance,
};

fn main() -> bgrto::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let inst = MicroInstance::random(seed)?;
    let space = inst.space()?;
    println!("{} sequences, reference mass {:.15}", space.len(), space.probs.iter().sum::<f64>());

    let beta = 0.1;
    let post = exact_posterior(&space, beta)?;
    let mut order: Vec<usize> = (0..space.len()).collect();
    order.sort_by(|&a, &b| post[b].total_cmp(&post[a]));
    println!("\nbeta = {beta}: top sequences by posterior mass");
    println!("{:>8} {:>8} {:>10} {:>10}", "tokens", "reward", "p_ref", "p_post");
    for &i in order.iter().take(6) {
        println!("{:>8} {:>8.4} {:>10.5} {:>10.5}", format!("{:?}", space.sequences[i]), space.rewards[i], space.probs[i], post[i]);
    }
    let j_post = exact_klrl(&space, &post, beta)?;
    let j_ref = exact_klrl(&space, &space.probs, beta)?;
    println!("J(posterior) = {j_post:.12}, beta ln Z = {:.12}, J(reference) = {j_ref:.6}", beta * log_partition(&space, beta)?);
    let rep = posterior_optimality_check(&space, beta, 100, seed)?;
    println!("Dirichlet-perturbed alternatives beaten: {}/{} (worst excess {:.2e})", rep.trials - rep.passes, rep.trials, rep.worst_excess);

    let grads = loss_gradients(&space, &inst.tool, &inst.omega, &inst.scene)?;
    println!("\nBTO estimator vs exact gradient, 10000 groups of 8");
    println!("{:>8} {:>9} {:>9} {:>12} {:>9} {:>10}", "beta", "max |z|", "|z|>3", "max rel err", ">2%", "of >1e-4");
    for beta in [0.01, 0.1, 1.0, 10.0] {
        let exact = flatten_params(&exact_bto_gradient(&space, &inst.tool, &inst.omega, &inst.scene, beta)?);
        let mc = mc_bto_gradient(&space, &grads, beta, 8, 10_000, seed)?;
        let mut max_z: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        let (mut big, mut over_z, mut over_rel) = (0, 0, 0);
        for ((e, m), se) in exact.iter().zip(&mc.mean).zip(&mc.std_err) {
            if *se > 0.0 {
                max_z = max_z.max((m - e).abs() / se);
                over_z += usize::from((m - e).abs() > 3.0 * se);
            }
            if e.abs() > 1e-4 {
                big += 1;
                max_rel = max_rel.max((m - e).abs() / e.abs());
                over_rel += usize::from((m - e).abs() > 0.02 * e.abs());
            }
        }
        println!("{beta:>8} {max_z:>9.2} {over_z:>9} {max_rel:>12.4} {over_rel:>9} {big:>10}");
    }

    // the self-normalized weights are biased at small G; the bias shrinks as G grows
    let beta = 0.1;
    let exact = flatten_params(&exact_bto_gradient(&space, &inst.tool, &inst.omega, &inst.scene, beta)?);
    let norm = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("\nbeta = {beta}, 2000 groups: relative error of the whole gradient vs group size");
    for g in [2, 8, 32, 128, 512] {
        let mc = mc_bto_gradient(&space, &grads, beta, g, 2000, seed)?;
        let err = exact.iter().zip(&mc.mean).map(|(e, m)| (m - e).powi(2)).sum::<f64>().sqrt();
        println!("  G = {g:>4}  {:.4}", err / norm);
    }
    Ok(())
}
