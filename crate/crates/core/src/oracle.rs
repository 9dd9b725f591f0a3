//! Exact enumeration over small action spaces: partition function, tilted
//! posterior, the KL-regularized objective and the posterior-weighted tool
//! gradient, plus the Monte Carlo estimators they are compared against.

use rand::Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::env::{generate_scene, Domain, EnvConfig, GridScene, ToolPrompt};
use crate::error::{Error, Result};
use crate::grad::{finite_diff_check, FiniteDiffReport, NamedParams, Tape};
use crate::models::{PolicyConfig, PolicyNet, ToolConfig, ToolNet};
use crate::objectives::{
    bto_objective, bto_weights, compute_reward, detached_sequence_ratios, grto_tool_term, seg_loss, GroupLogprobs,
};
use crate::pretrain::{pretrain_tool, tool_dataset, PretrainConfig};
use crate::rng;

/// Refuse to enumerate spaces larger than this.
pub const ENUMERATION_LIMIT: u128 = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumeratedSpace {
    pub sequences: Vec<Vec<usize>>,
    pub prompts: Vec<Option<ToolPrompt>>,
    /// Reference probabilities p₀(o).
    pub probs: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl EnumeratedSpace {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Same sequences and prompts with replaced rewards.
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() != self.len() {
            return Err(Error::usage("reward vector length differs from the space"));
        }
        Ok(Self { rewards, ..self.clone() })
    }

    /// Uniform reference distribution over the same sequences.
    pub fn with_uniform_reference(&self) -> Self {
        let n = self.len() as f64;
        Self { probs: vec![1.0 / n; self.len()], ..self.clone() }
    }
}

/// All grammar sequences in lexicographic order.
pub fn all_sequences(step_vocab: &[usize]) -> Result<Vec<Vec<usize>>> {
    let count: u128 = step_vocab.iter().map(|&v| v as u128).product();
    if count > ENUMERATION_LIMIT {
        return Err(Error::usage(format!("refusing to enumerate {count} sequences (limit {ENUMERATION_LIMIT})")));
    }
    let mut out = vec![Vec::new()];
    for &v in step_vocab {
        out = out.into_iter().flat_map(|p| (0..v).map(move |t| [p.clone(), vec![t]].concat())).collect();
    }
    Ok(out)
}

/// Exact probabilities (products of per-step softmax masses) and rewards of every sequence.
pub fn enumerate_space(
    policy: &PolicyNet,
    theta: &NamedParams,
    tool: &ToolNet,
    omega: &NamedParams,
    scene: &GridScene,
    filter_enabled: bool,
) -> Result<EnumeratedSpace> {
    let sequences = all_sequences(&policy.grammar.step_vocab)?;
    let lps = policy.group_logprobs(theta, scene, &sequences)?;
    let probs: Vec<f64> = lps.iter().map(|lp| lp.iter().sum::<f64>().exp()).collect();
    let prompts: Vec<Option<ToolPrompt>> = sequences.iter().map(|s| policy.grammar.parse(s)).collect::<Result<_>>()?;
    let rewards = prompts
        .iter()
        .map(|p| Ok(compute_reward(scene, p.as_ref(), tool, omega, filter_enabled, 0.5)?.total))
        .collect::<Result<Vec<f64>>>()?;
    Ok(EnumeratedSpace { sequences, prompts, probs, rewards })
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) {
        return Err(Error::usage(format!("beta must be > 0, got {beta}")));
    }
    Ok(())
}

fn max_reward(space: &EnumeratedSpace) -> f64 {
    space.rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// `ln Z = ln Σ p₀ exp(R/β)`, max-shifted.
pub fn log_partition(space: &EnumeratedSpace, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let m = max_reward(space);
    let s: f64 = space.probs.iter().zip(&space.rewards).map(|(p, r)| p * ((r - m) / beta).exp()).sum();
    Ok(m / beta + s.ln())
}

/// `Z_ω = Σ_o p₀(o) exp(R(o)/β)`.
pub fn exact_partition(space: &EnumeratedSpace, beta: f64) -> Result<f64> {
    Ok(log_partition(space, beta)?.exp())
}

/// `p*(o) = p₀(o) exp(R(o)/β) / Z`.
pub fn exact_posterior(space: &EnumeratedSpace, beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    let m = max_reward(space);
    let tilted: Vec<f64> = space.probs.iter().zip(&space.rewards).map(|(p, r)| p * ((r - m) / beta).exp()).collect();
    let z: f64 = tilted.iter().sum();
    Ok(tilted.into_iter().map(|t| t / z).collect())
}

/// `Σ q R - β Σ q ln(q/p₀)` with `0 ln 0 = 0`.
pub fn exact_klrl(space: &EnumeratedSpace, q: &[f64], beta: f64) -> Result<f64> {
    if q.len() != space.len() {
        return Err(Error::usage("distribution length differs from the space"));
    }
    if q.iter().any(|&v| !(v >= 0.0)) || (q.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::usage("q is not a distribution"));
    }
    let mut reward = 0.0;
    let mut kl = 0.0;
    for ((&qi, &pi), &ri) in q.iter().zip(&space.probs).zip(&space.rewards) {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Err(Error::Domain { op: "exact_klrl", detail: "q puts mass where the reference has none (infinite KL)".into() });
        }
        reward += qi * ri;
        kl += qi * (qi / pi).ln();
    }
    Ok(reward - beta * kl)
}

/// Per-sequence seg-loss gradients w.r.t. ω (`None` for invalid sequences).
pub fn loss_gradients(
    space: &EnumeratedSpace,
    tool: &ToolNet,
    omega: &NamedParams,
    scene: &GridScene,
) -> Result<Vec<Option<NamedParams>>> {
    space
        .prompts
        .iter()
        .map(|p| match p {
            None => Ok(None),
            Some(p) => {
                let mut tape = Tape::new();
                let vars = tool.bind(&mut tape, omega)?;
                let lg = tool.forward(&mut tape, &vars, scene, p)?;
                let l = seg_loss(&mut tape, lg, scene.official_gt())?;
                Ok(Some(tape.backward(l)?.for_params(omega)))
            }
        })
        .collect()
}

fn weighted_gradient(grads: &[Option<NamedParams>], weights: &[f64], template: &NamedParams) -> Result<NamedParams> {
    let mut out = template.zeros_like();
    for (g, &w) in grads.iter().zip(weights) {
        if let Some(g) = g {
            let mut s = g.clone();
            s.scale(-w);
            out.add_assign(&s)?;
        }
    }
    Ok(out)
}

/// `-Σ_o p*(o) ∇_ω L(o)`, invalid sequences contributing no loss.
pub fn exact_bto_gradient(
    space: &EnumeratedSpace,
    tool: &ToolNet,
    omega: &NamedParams,
    scene: &GridScene,
    beta: f64,
) -> Result<NamedParams> {
    let post = exact_posterior(space, beta)?;
    weighted_gradient(&loss_gradients(space, tool, omega, scene)?, &post, omega)
}

/// Coordinate-wise mean and standard error of the per-group estimate `-Σ_i w_i ∇L_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct McGradient {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub groups: usize,
}

fn flatten(p: &NamedParams) -> Vec<f64> {
    p.iter().flat_map(|(_, t)| t.values().iter().copied()).collect()
}

pub fn flatten_params(p: &NamedParams) -> Vec<f64> {
    flatten(p)
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Monte Carlo BTO gradient: `groups` groups of `g` draws from p₀, each
/// weighted by the in-group self-normalized `exp(R/β)`.
///
/// This is `G·∇J_BTO` per group; the `1/G` in the objective is a constant
/// rescaling and is undone so the estimate targets `-E_{p*}[∇L]`.
pub fn mc_bto_gradient(
    space: &EnumeratedSpace,
    grads: &[Option<NamedParams>],
    beta: f64,
    g: usize,
    groups: usize,
    seed: u64,
) -> Result<McGradient> {
    let flat: Vec<Option<Vec<f64>>> = grads.iter().map(|o| o.as_ref().map(flatten)).collect();
    let dim = flat.iter().flatten().next().map_or(0, Vec::len);
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    let mut est = vec![0.0; dim];
    let mut r = rng::stream(seed, "mc-bto", &[]);
    for _ in 0..groups {
        let draws: Vec<usize> = (0..g).map(|_| sample_index(&space.probs, &mut r)).collect();
        let rewards: Vec<f64> = draws.iter().map(|&i| space.rewards[i]).collect();
        let w = bto_weights(&rewards, beta)?.weights;
        est.iter_mut().for_each(|e| *e = 0.0);
        for (&i, wi) in draws.iter().zip(&w) {
            if let Some(gr) = &flat[i] {
                for (e, v) in est.iter_mut().zip(gr) {
                    *e -= wi * v;
                }
            }
        }
        for ((s, q), e) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(&est) {
            *s += e;
            *q += e * e;
        }
    }
    let n = groups as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_err = sum_sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / n - m * m).max(0.0) * n / (n - 1.0)).sqrt() / n.sqrt())
        .collect();
    Ok(McGradient { mean, std_err, groups })
}

/// Self-normalized weighted mean reward of one large group drawn from p₀.
pub fn mc_weighted_reward(space: &EnumeratedSpace, beta: f64, g: usize, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "mc-weighted-reward", &[]);
    let rewards: Vec<f64> = (0..g).map(|_| space.rewards[sample_index(&space.probs, &mut r)]).collect();
    let w = bto_weights(&rewards, beta)?.weights;
    Ok(w.iter().zip(&rewards).map(|(w, r)| w * r).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub trials: usize,
    pub passes: usize,
    pub posterior_value: f64,
    /// Largest `J(q) - J(posterior)` over the trials (≤ 1e-12 on success).
    pub worst_excess: f64,
}

/// Compares the posterior's exact objective with `trials` Dirichlet-jittered alternatives.
pub fn posterior_optimality_check(space: &EnumeratedSpace, beta: f64, trials: usize, seed: u64) -> Result<OptimalityReport> {
    if trials == 0 {
        return Err(Error::usage("trials must be >= 1"));
    }
    let post = exact_posterior(space, beta)?;
    let j_post = exact_klrl(space, &post, beta)?;
    let dir = Dirichlet::new(&vec![1.0; space.len()]).map_err(|e| Error::usage(e.to_string()))?;
    let mut r = rng::stream(seed, "optimality", &[]);
    let mut passes = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let lambda: f64 = r.gen();
        let noise: Vec<f64> = dir.sample(&mut r);
        let q: Vec<f64> = post.iter().zip(&noise).map(|(p, d)| (1.0 - lambda) * p + lambda * d).collect();
        let z: f64 = q.iter().sum();
        let q: Vec<f64> = q.into_iter().map(|v| v / z).collect();
        let excess = exact_klrl(space, &q, beta)? - j_post;
        worst = worst.max(excess);
        if excess <= 1e-12 {
            passes += 1;
        }
    }
    Ok(OptimalityReport { trials, passes, posterior_value: j_post, worst_excess: worst })
}

/// A randomly initialized micro instance: scene, policy θ, tool ω.
#[derive(Clone, Debug)]
pub struct MicroInstance {
    pub env: EnvConfig,
    pub scene: GridScene,
    pub policy: PolicyNet,
    pub theta: NamedParams,
    pub tool: ToolNet,
    pub omega: NamedParams,
}

impl MicroInstance {
    pub fn random(seed: u64) -> Result<Self> {
        let env = EnvConfig::micro();
        let policy = PolicyNet::new(&env, &PolicyConfig { hidden: [16, 16] });
        let tool = ToolNet::new(&env, &ToolConfig { hidden: [8, 8], embed_dim: 4 });
        let scene = generate_scene(rng::derive_key(seed, "micro-scene", &[]), Domain::Target, &env)?;
        let mut theta = policy.init(rng::derive_key(seed, "micro-theta", &[]));
        // sharpen the reference so it is far from uniform
        for (name, t) in theta.iter_mut() {
            if name.contains("head") {
                t.values_mut().iter_mut().for_each(|v| *v *= 4.0);
            }
        }
        // a briefly pretrained tool, so rewards spread beyond the format bonus
        let pcfg = PretrainConfig { scenes: 32, epochs: 3, lr: 1e-2, batch: 4, box_jitter: 1, seed };
        let data = tool_dataset(&env, &pcfg)?;
        let (omega, _) = pretrain_tool(&tool, &tool.init(rng::derive_key(seed, "micro-omega", &[])), &data, &pcfg, 1.0)?;
        Ok(Self { env, scene, policy, theta, tool, omega })
    }

    pub fn space(&self) -> Result<EnumeratedSpace> {
        enumerate_space(&self.policy, &self.theta, &self.tool, &self.omega, &self.scene, true)
    }
}

/// Finite-difference checks of the four differentiable objectives on one micro instance.
pub fn gradient_checks(seed: u64, step: f64, tolerance: f64) -> Result<Vec<(&'static str, FiniteDiffReport)>> {
    let inst = MicroInstance::random(seed)?;
    let mut r = rng::stream(seed, "gradcheck", &[]);
    let sequences: Vec<Vec<usize>> = (0..4).map(|_| vec![r.gen_range(0..inst.env.colors), r.gen_range(0..9)]).collect();
    let prompts: Vec<ToolPrompt> = sequences
        .iter()
        .map(|s| inst.policy.grammar.parse(s).map(|p| p.expect("micro sequences are valid")))
        .collect::<Result<_>>()?;
    let gt = inst.scene.official_gt();
    let mut out = Vec::new();

    let mut tape = Tape::new();
    let tv = inst.tool.bind(&mut tape, &inst.omega)?;
    let lg = inst.tool.forward(&mut tape, &tv, &inst.scene, &prompts[0])?;
    let l = seg_loss(&mut tape, lg, gt)?;
    out.push(("seg_loss", finite_diff_check(&tape, l, &inst.omega, step, tolerance)?));

    let mut tape = Tape::new();
    let pv = inst.policy.bind(&mut tape, &inst.theta)?;
    let lps = inst.policy.sequence_logprobs(&mut tape, &pv, &inst.scene, &sequences)?;
    let mut total = tape.sum(lps[0])?;
    for &v in &lps[1..] {
        let s = tape.sum(v)?;
        total = tape.add(total, s)?;
    }
    out.push(("policy_logprob", finite_diff_check(&tape, total, &inst.theta, step, tolerance)?));

    // off-policy old log-probs so the detached ratios differ from 1
    let current = inst.policy.group_logprobs(&inst.theta, &inst.scene, &sequences)?;
    let old: Vec<Vec<f64>> = current.iter().map(|lp| lp.iter().map(|v| v + r.gen_range(-0.3..0.3)).collect()).collect();
    let mut tape = Tape::new();
    let pv = inst.policy.bind(&mut tape, &inst.theta)?;
    let cur = inst.policy.sequence_logprobs(&mut tape, &pv, &inst.scene, &sequences)?;
    let tv = inst.tool.bind(&mut tape, &inst.omega)?;
    let mut losses = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        // the last rollout stands in for an invalid one
        if i + 1 == prompts.len() {
            losses.push(None);
            continue;
        }
        let lg = inst.tool.forward(&mut tape, &tv, &inst.scene, p)?;
        losses.push(Some(seg_loss(&mut tape, lg, gt)?));
    }
    let lp = GroupLogprobs { current: &cur, old: &old, reference: &old };
    let ratios = detached_sequence_ratios(&mut tape, &lp)?;
    let term = grto_tool_term(&mut tape, ratios, &losses)?;
    out.push(("grto_tool_term", finite_diff_check(&tape, term, &inst.omega, step, tolerance)?));

    let rewards: Vec<f64> = (0..prompts.len()).map(|_| r.gen_range(0.0..1.0)).collect();
    let w = bto_weights(&rewards, 0.1)?;
    let j = bto_objective(&mut tape, &w, &losses)?;
    out.push(("bto_objective", finite_diff_check(&tape, j, &inst.omega, step, tolerance)?));
    Ok(out)
}

/// One line of the `oracle-check` report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub check_name: String,
    pub pass: bool,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    fn abs(name: &str, value: f64, reference: f64, tolerance: f64) -> Self {
        Self { check_name: name.into(), pass: (value - reference).abs() <= tolerance, value, reference, tolerance }
    }
}

/// The exact-oracle suite run by `oracle-check`.
pub fn oracle_suite(seed: u64, instances: usize) -> Result<Vec<OracleCheck>> {
    let mut out = Vec::new();
    let inst = MicroInstance::random(seed)?;
    let space = inst.space()?;
    out.push(OracleCheck::abs("space_size", space.len() as f64, 36.0, 0.0));
    out.push(OracleCheck::abs("probabilities_sum_to_one", space.probs.iter().sum(), 1.0, 1e-12));

    let uniform = space.with_uniform_reference();
    let mut one_hot = vec![0.0; space.len()];
    one_hot[0] = 1.0;
    let closed = uniform.with_rewards(one_hot)?;
    out.push(OracleCheck::abs("partition_closed_form", exact_partition(&closed, 1.0)?, (35.0 + std::f64::consts::E) / 36.0, 1e-12));
    out.push(OracleCheck::abs("partition_large_beta", exact_partition(&space, 1e9)?, 1.0, 1e-6));

    let mut worst_identity: f64 = 0.0;
    let mut worst_excess = f64::NEG_INFINITY;
    for k in 0..instances {
        let inst = MicroInstance::random(rng::derive_key(seed, "oracle-instance", &[k as u64]))?;
        let space = inst.space()?;
        for beta in [0.01, 0.1, 1.0] {
            let post = exact_posterior(&space, beta)?;
            let lhs = exact_klrl(&space, &post, beta)?;
            worst_identity = worst_identity.max((lhs - beta * log_partition(&space, beta)?).abs());
        }
        let rep = posterior_optimality_check(&space, 0.1, 100, k as u64)?;
        worst_excess = worst_excess.max(rep.worst_excess);
    }
    out.push(OracleCheck::abs("klrl_posterior_equals_beta_log_z", worst_identity, 0.0, 1e-10));
    out.push(OracleCheck {
        check_name: "posterior_optimality".into(),
        pass: worst_excess <= 1e-12,
        value: worst_excess,
        reference: 0.0,
        tolerance: 1e-12,
    });

    // 1% of the unit reward range; at small beta a few rare high-reward
    // sequences carry most of the weight and 4096 draws get noisy
    let beta = 1.0;
    let truth: f64 = exact_posterior(&space, beta)?.iter().zip(&space.rewards).map(|(p, r)| p * r).sum();
    let mc = mc_weighted_reward(&space, beta, 4096, seed)?;
    out.push(OracleCheck::abs("weighted_reward_large_group", mc, truth, 0.01));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(probs: Vec<f64>, rewards: Vec<f64>) -> EnumeratedSpace {
        let n = probs.len();
        EnumeratedSpace { sequences: (0..n).map(|i| vec![i]).collect(), prompts: vec![None; n], probs, rewards }
    }

    #[test]
    fn micro_space_is_complete_and_normalized() {
        let inst = MicroInstance::random(3).unwrap();
        let space = inst.space().unwrap();
        assert_eq!(space.len(), 36);
        assert!((space.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(space.prompts.iter().all(Option::is_some));
    }

    #[test]
    fn uniform_policy_gives_uniform_probabilities() {
        let inst = MicroInstance::random(1).unwrap();
        let mut theta = inst.theta.clone();
        theta.iter_mut().for_each(|(_, t)| t.values_mut().iter_mut().for_each(|v| *v = 0.0));
        let space = enumerate_space(&inst.policy, &theta, &inst.tool, &inst.omega, &inst.scene, true).unwrap();
        assert!(space.probs.iter().all(|p| (p - 1.0 / 36.0).abs() < 1e-15));
    }

    #[test]
    fn enumeration_guard() {
        assert!(all_sequences(&[4, 3, 16, 16, 16, 16, 1]).is_err());
        assert_eq!(all_sequences(&[2, 3]).unwrap().len(), 6);
    }

    #[test]
    fn partition_cases() {
        let zero = toy(vec![0.25; 4], vec![0.0; 4]);
        assert!((exact_partition(&zero, 0.3).unwrap() - 1.0).abs() < 1e-15);
        let mut r = vec![0.0; 36];
        r[7] = 1.0;
        let z = exact_partition(&toy(vec![1.0 / 36.0; 36], r), 1.0).unwrap();
        assert!((z - (35.0 + std::f64::consts::E) / 36.0).abs() < 1e-14);
        assert!((z - 1.04773).abs() < 1e-5);
        let s = toy(vec![0.5, 0.5], vec![0.3, 0.9]);
        assert!((exact_partition(&s, 1e9).unwrap() - 1.0).abs() < 1e-6);
        assert!(exact_partition(&s, 0.0).is_err());
    }

    #[test]
    fn partition_is_monotone_in_each_reward() {
        let base = toy(vec![0.1, 0.2, 0.3, 0.4], vec![0.2, 0.5, 0.1, 0.7]);
        let z0 = exact_partition(&base, 0.5).unwrap();
        for i in 0..4 {
            let mut r = base.rewards.clone();
            r[i] += 0.05;
            assert!(exact_partition(&base.with_rewards(r).unwrap(), 0.5).unwrap() >= z0);
        }
    }

    #[test]
    fn posterior_cases() {
        let eq = toy(vec![0.1, 0.6, 0.3], vec![0.4; 3]);
        let p = exact_posterior(&eq, 0.01).unwrap();
        assert!(p.iter().zip(&eq.probs).all(|(a, b)| (a - b).abs() < 1e-15));
        let two = exact_posterior(&toy(vec![0.5, 0.5], vec![1.0, 0.0]), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((two[0] - e / (1.0 + e)).abs() < 1e-15 && (two[1] - 1.0 / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn klrl_cases() {
        let s = toy(vec![0.2, 0.5, 0.3], vec![0.9, 0.1, 0.4]);
        let j_ref = exact_klrl(&s, &s.probs, 0.1).unwrap();
        assert!((j_ref - (0.18 + 0.05 + 0.12)).abs() < 1e-15);
        let post = exact_posterior(&s, 0.1).unwrap();
        let j_post = exact_klrl(&s, &post, 0.1).unwrap();
        assert!((j_post - 0.1 * log_partition(&s, 0.1).unwrap()).abs() < 1e-12);
        assert!(j_post >= j_ref);
        // point mass on the best sequence at large β pays a large KL
        let point = vec![1.0, 0.0, 0.0];
        let beta = 5.0;
        let post = exact_posterior(&s, beta).unwrap();
        assert!(exact_klrl(&s, &point, beta).unwrap() < exact_klrl(&s, &post, beta).unwrap());
        let unsupported = toy(vec![1.0, 0.0], vec![0.0, 1.0]);
        assert!(matches!(exact_klrl(&unsupported, &[0.5, 0.5], 1.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn optimality_on_a_micro_instance() {
        let space = MicroInstance::random(8).unwrap().space().unwrap();
        let rep = posterior_optimality_check(&space, 0.05, 100, 1).unwrap();
        assert_eq!(rep.passes, 100);
    }

    #[test]
    fn gradient_checks_pass() {
        for (name, rep) in gradient_checks(5, 1e-5, 1e-5).unwrap() {
            assert!(rep.pass, "{name}: {rep:?}");
        }
    }

    #[test]
    fn equal_rewards_give_reference_weighted_gradient() {
        let inst = MicroInstance::random(2).unwrap();
        let space = inst.space().unwrap().with_rewards(vec![0.5; 36]).unwrap();
        let exact = exact_bto_gradient(&space, &inst.tool, &inst.omega, &inst.scene, 0.01).unwrap();
        let grads = loss_gradients(&space, &inst.tool, &inst.omega, &inst.scene).unwrap();
        let reference = weighted_gradient(&grads, &space.probs, &inst.omega).unwrap();
        for (a, b) in flatten(&exact).iter().zip(flatten(&reference)) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
