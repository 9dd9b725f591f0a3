//! Rewards, the segmentation surrogate loss, group-relative advantages, the
//! KL estimate, and the GRPO / GRTO / BTO objectives.
//!
//! Objectives are returned as values to maximize; training code descends on
//! their negation.

use serde::{Deserialize, Serialize};

use crate::env::{GridScene, Mask, Rect, ToolPrompt};
use crate::error::{Error, Result};
use crate::grad::{NamedParams, Tape, Tensor, Var};
use crate::models::ToolNet;

pub const IOU_WEIGHT: f64 = 0.9;
pub const FORMAT_WEIGHT: f64 = 0.1;
/// Groups whose reward standard deviation falls below this get zero advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

/// `|a ∩ b| / |a ∪ b|`; 1 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (i, u) = intersection_union(a, b)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

pub fn intersection_union(a: &Mask, b: &Mask) -> Result<(usize, usize)> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::usage(format!("mask dims {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    let mut i = 0;
    let mut u = 0;
    for (&x, &y) in a.cells.iter().zip(&b.cells) {
        i += (x && y) as usize;
        u += (x || y) as usize;
    }
    Ok((i, u))
}

/// Clears every cell outside the union of `boxes`.
pub fn spatial_filter(mask: &Mask, boxes: &[Rect]) -> Mask {
    let mut out = mask.clone();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !boxes.iter().any(|b| b.contains(x, y)) {
                out.cells[y * mask.width + x] = false;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_iou: f64,
    pub r_format: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub const INVALID: RewardBreakdown = RewardBreakdown { r_iou: 0.0, r_format: 0.0, total: 0.0 };

    pub fn valid(r_iou: f64) -> Self {
        Self { r_iou, r_format: 1.0, total: IOU_WEIGHT * r_iou + FORMAT_WEIGHT }
    }
}

/// Binarized (and optionally box-filtered) prediction from mask logits.
pub fn predicted_mask(logits: &Tensor, prompt: &ToolPrompt, filter_enabled: bool, threshold: f64) -> Mask {
    let (h, w) = (logits.dims()[0], logits.dims()[1]);
    // σ(x) > t  ⇔  x > logit(t)
    let cut = (threshold / (1.0 - threshold)).ln();
    let mask = Mask { width: w, height: h, cells: logits.values().iter().map(|&x| x > cut).collect() };
    if filter_enabled {
        spatial_filter(&mask, &prompt.boxes)
    } else {
        mask
    }
}

/// Reward from already computed mask logits.
pub fn reward_from_logits(
    scene: &GridScene,
    prompt: &ToolPrompt,
    logits: &Tensor,
    filter_enabled: bool,
    threshold: f64,
) -> Result<RewardBreakdown> {
    let mask = predicted_mask(logits, prompt, filter_enabled, threshold);
    Ok(RewardBreakdown::valid(mask_iou(&mask, scene.official_gt())?))
}

/// `0.9·IoU + 0.1·format`; an unparseable rollout (`prompt == None`) scores 0.
pub fn compute_reward(
    scene: &GridScene,
    prompt: Option<&ToolPrompt>,
    tool: &ToolNet,
    tool_params: &NamedParams,
    filter_enabled: bool,
    threshold: f64,
) -> Result<RewardBreakdown> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::usage(format!("threshold {threshold} outside (0, 1)")));
    }
    match prompt {
        None => Ok(RewardBreakdown::INVALID),
        Some(p) => reward_from_logits(scene, p, &tool.logits(tool_params, scene, p)?, filter_enabled, threshold),
    }
}

/// BCE + soft-IoU on mask logits, returned as a scalar on `tape`.
pub fn seg_loss(tape: &mut Tape, logits: Var, gt: &Mask) -> Result<Var> {
    let m = gt.as_tensor();
    if tape.try_value(logits)?.dims() != m.dims() {
        return Err(Error::shape("seg_loss", format!("logits {:?} vs mask {:?}", tape.value(logits).dims(), m.dims())));
    }
    let not_m = tape.constant(m.map(|v| 1.0 - v));
    let m = tape.constant(m);

    // BCE from logits: -mean[m·ln σ(x) + (1-m)·ln σ(-x)]
    let log_p = tape.log_sigmoid(logits)?;
    let neg = tape.neg(logits)?;
    let log_q = tape.log_sigmoid(neg)?;
    let a = tape.mul(m, log_p)?;
    let b = tape.mul(not_m, log_q)?;
    let ll = tape.add(a, b)?;
    let ll = tape.mean(ll)?;
    let bce = tape.neg(ll)?;

    // 1 - ΣSM / Σ(S + M - SM)
    let s = tape.sigmoid(logits)?;
    let sm = tape.mul(s, m)?;
    let inter = tape.sum(sm)?;
    let s_sum = tape.sum(s)?;
    let m_sum = tape.sum(m)?;
    let union = tape.add(s_sum, m_sum)?;
    let union = tape.sub(union, inter)?;
    let ratio = tape.div(inter, union)?;
    let one_minus = tape.neg(ratio)?;
    let siou = tape.add_scalar(one_minus, 1.0)?;
    tape.add(bce, siou)
}

/// Scalar seg-loss value for a fixed logit map.
pub fn seg_loss_value(logits: &Tensor, gt: &Mask) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = seg_loss(&mut tape, l, gt)?;
    Ok(tape.scalar(v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub rewards: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

/// `(R_i - μ) / σ` with population σ; all zeros when σ < 1e-8.
pub fn compute_advantages(rewards: &[f64]) -> Result<AdvantageSet> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::usage(format!("advantages need a group of at least 2, got {g}")));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
    let degenerate = std < DEGENERATE_STD;
    let advantages = if degenerate { vec![0.0; g] } else { rewards.iter().map(|r| (r - mean) / std).collect() };
    Ok(AdvantageSet { rewards: rewards.to_vec(), mean, std, advantages, degenerate })
}

/// Non-negative per-token KL estimate `exp(ref-cur) - (ref-cur) - 1`, summed and divided by `l_max`.
pub fn kl_estimate(logprobs_current: &[f64], logprobs_ref: &[f64], l_max: usize) -> Result<f64> {
    if logprobs_current.len() != logprobs_ref.len() {
        return Err(Error::usage("kl_estimate: length mismatch"));
    }
    let s: f64 = logprobs_current
        .iter()
        .zip(logprobs_ref)
        .map(|(c, r)| {
            let d = r - c;
            d.exp() - d - 1.0
        })
        .sum();
    Ok(s / l_max as f64)
}

/// Per-step log-probabilities of a whole group: `per_step[t]` is a `[G]` value.
pub struct GroupLogprobs<'a> {
    pub current: &'a [Var],
    /// `old[i][t]`, recorded at sampling time.
    pub old: &'a [Vec<f64>],
    /// `reference[i][t]`, under θ₀.
    pub reference: &'a [Vec<f64>],
}

fn step_column(rows: &[Vec<f64>], t: usize) -> Tensor {
    Tensor::vector(rows.iter().map(|r| r[t]).collect())
}

/// Group KL estimate on the tape: mean over rollouts of [`kl_estimate`].
pub fn kl_term(tape: &mut Tape, lp: &GroupLogprobs<'_>, l_max: usize) -> Result<Var> {
    let g = lp.old.len();
    let mut total: Option<Var> = None;
    for (t, &cur) in lp.current.iter().enumerate() {
        let reference = tape.constant(step_column(lp.reference, t));
        let d = tape.sub(reference, cur)?;
        let e = tape.exp(d)?;
        let k = tape.sub(e, d)?;
        let k = tape.add_scalar(k, -1.0)?;
        let s = tape.sum(k)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::usage("empty sequence"))?;
    tape.scale(total, 1.0 / (g as f64 * l_max as f64))
}

/// Clipped group-relative surrogate minus `beta`·KL, summands divided by `l_max`.
pub fn grpo_objective(
    tape: &mut Tape,
    lp: &GroupLogprobs<'_>,
    advantages: &[f64],
    beta: f64,
    eps_clip: f64,
    l_max: usize,
) -> Result<Var> {
    let g = advantages.len();
    if lp.old.len() != g || lp.reference.len() != g {
        return Err(Error::usage("grpo_objective: group size mismatch"));
    }
    let adv = tape.constant(Tensor::vector(advantages.to_vec()));
    let mut surrogate: Option<Var> = None;
    for (t, &cur) in lp.current.iter().enumerate() {
        let old = tape.constant(step_column(lp.old, t));
        let d = tape.sub(cur, old)?;
        let ratio = tape.exp(d)?;
        let unclipped = tape.mul(ratio, adv)?;
        let clipped = tape.clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip)?;
        let clipped = tape.mul(clipped, adv)?;
        let m = tape.minimum(unclipped, clipped)?;
        let s = tape.sum(m)?;
        surrogate = Some(match surrogate {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let surrogate = surrogate.ok_or_else(|| Error::usage("empty sequence"))?;
    let surrogate = tape.scale(surrogate, 1.0 / (g as f64 * l_max as f64))?;
    if beta == 0.0 {
        return Ok(surrogate);
    }
    let kl = kl_term(tape, lp, l_max)?;
    let kl = tape.scale(kl, beta)?;
    tape.sub(surrogate, kl)
}

/// Detached per-rollout sequence ratios `∏_t π_θ/π_old`, shape `[G]`.
pub fn detached_sequence_ratios(tape: &mut Tape, lp: &GroupLogprobs<'_>) -> Result<Var> {
    let mut log_ratio: Option<Var> = None;
    for (t, &cur) in lp.current.iter().enumerate() {
        let old = tape.constant(step_column(lp.old, t));
        let d = tape.sub(cur, old)?;
        log_ratio = Some(match log_ratio {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    let log_ratio = log_ratio.ok_or_else(|| Error::usage("empty sequence"))?;
    let ratio = tape.exp(log_ratio)?;
    tape.stop_gradient(ratio)
}

/// Sum of `weight_i · loss_i` over the rollouts that have a loss.
fn weighted_sum(tape: &mut Tape, weights: Var, losses: &[Option<Var>]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (i, loss) in losses.iter().enumerate() {
        let Some(loss) = loss else { continue };
        let w = tape.gather(weights, vec![i])?;
        let term = tape.mul(w, *loss)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc)
}

/// Importance-weighted tool loss averaged over valid rollouts.
///
/// `ratios` is passed through `stop_gradient` here, so the term only carries
/// gradient to the tool. `losses[i]` is `None` for invalid rollouts. Returns
/// a constant 0 when no rollout is valid.
pub fn grto_tool_term(tape: &mut Tape, ratios: Var, losses: &[Option<Var>]) -> Result<Var> {
    let ratios = tape.stop_gradient(ratios)?;
    let valid = losses.iter().filter(|l| l.is_some()).count();
    match weighted_sum(tape, ratios, losses)? {
        Some(sum) => tape.scale(sum, 1.0 / valid as f64),
        None => Ok(tape.scalar_const(0.0)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtoWeights {
    pub weights: Vec<f64>,
    pub beta: f64,
}

/// Self-normalized `exp(R_i/β) / Σ_j exp(R_j/β)`.
pub fn bto_weights(rewards: &[f64], beta: f64) -> Result<BtoWeights> {
    if !(beta > 0.0) {
        return Err(Error::usage(format!("BTO beta must be > 0, got {beta}")));
    }
    if rewards.is_empty() {
        return Err(Error::usage("BTO weights of an empty group"));
    }
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = rewards.iter().map(|r| ((r - max) / beta).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(BtoWeights { weights: e.iter().map(|v| v / z).collect(), beta })
}

/// `-(1/G) Σ_i w_i · loss_i`; invalid rollouts keep their weight but contribute no loss.
pub fn bto_objective(tape: &mut Tape, weights: &BtoWeights, losses: &[Option<Var>]) -> Result<Var> {
    let g = weights.weights.len();
    if losses.len() != g {
        return Err(Error::usage("bto_objective: group size mismatch"));
    }
    let w = tape.constant(Tensor::vector(weights.weights.clone()));
    let w = tape.stop_gradient(w)?;
    match weighted_sum(tape, w, losses)? {
        Some(sum) => tape.scale(sum, -1.0 / g as f64),
        None => Ok(tape.scalar_const(0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_scene, Domain, EnvConfig};

    fn mask(w: usize, h: usize, cells: &[(usize, usize)]) -> Mask {
        let mut m = Mask::empty(w, h);
        for &(x, y) in cells {
            m.cells[y * w + x] = true;
        }
        m
    }

    #[test]
    fn iou_cases() {
        let a = mask(4, 4, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        let b = mask(4, 4, &[(1, 0), (1, 1), (2, 0), (2, 1)]);
        let c = mask(4, 4, &[(3, 3)]);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        assert!((mask_iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(mask_iou(&Mask::empty(4, 4), &Mask::empty(4, 4)).unwrap(), 1.0);
        assert_eq!(mask_iou(&Mask::empty(4, 4), &a).unwrap(), 0.0);
        assert!(matches!(mask_iou(&a, &Mask::empty(3, 4)), Err(Error::Usage(_))));
    }

    #[test]
    fn filter_cases() {
        let m = mask(4, 4, &[(0, 0), (3, 3), (2, 1)]);
        let full = Rect::new(0, 0, 3, 3);
        assert_eq!(spatial_filter(&m, &[full]), m);
        let corner = Rect::new(1, 2, 2, 3);
        assert!(spatial_filter(&m, &[corner]).is_empty());
        let part = Rect::new(2, 0, 3, 3);
        let once = spatial_filter(&m, &[part]);
        assert_eq!(once.count(), 2);
        assert_eq!(spatial_filter(&once, &[part]), once);
    }

    #[test]
    fn seg_loss_closed_forms() {
        // saturated perfect prediction
        let gt = mask(4, 4, &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        let logits = Tensor::new(vec![4, 4], gt.cells.iter().map(|&c| if c { 50.0 } else { -50.0 }).collect()).unwrap();
        assert!(seg_loss_value(&logits, &gt).unwrap() <= 1e-8);

        // S ≡ 0.5, half foreground: ln 2 + 1 - (HW/4)/(3HW/4)
        let half = Mask { width: 4, height: 4, cells: (0..16).map(|i| i < 8).collect() };
        let v = seg_loss_value(&Tensor::zeros(&[4, 4]), &half).unwrap();
        assert!((v - (2f64.ln() + 2.0 / 3.0)).abs() < 1e-12);
        assert!((v - 1.3598).abs() < 1e-4);

        let full = Mask { width: 4, height: 4, cells: vec![true; 16] };
        let v = seg_loss_value(&Tensor::zeros(&[4, 4]), &full).unwrap();
        assert!((v - (2f64.ln() + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn advantage_cases() {
        let a = compute_advantages(&[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(a.advantages, vec![1.0, 1.0, -1.0, -1.0]);
        let d = compute_advantages(&[0.5, 0.5, 0.5]).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.advantages, vec![0.0; 3]);
        let r = compute_advantages(&[0.9, 0.1, 0.2, 0.0]).unwrap();
        assert!((r.mean - 0.3).abs() < 1e-15);
        assert!((r.std - 0.125f64.sqrt()).abs() < 1e-15);
        for (x, e) in r.advantages.iter().zip([1.6971, -0.5657, -0.2828, -0.8485]) {
            assert!((x - e).abs() < 1e-4);
        }
        assert!(matches!(compute_advantages(&[1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_estimate(&[-1.0, -2.0], &[-1.0, -2.0], 7).unwrap(), 0.0);
        let two = kl_estimate(&[0.5f64.ln()], &[0.0], 7).unwrap();
        assert!((two - (2.0 - 2f64.ln() - 1.0) / 7.0).abs() < 1e-15);
        let half = kl_estimate(&[0.0], &[0.5f64.ln()], 7).unwrap();
        assert!((half - (0.5 + 2f64.ln() - 1.0) / 7.0).abs() < 1e-15);
        assert!((two * 7.0 - 0.3069).abs() < 1e-4 && (half * 7.0 - 0.1931).abs() < 1e-4);
    }

    #[test]
    fn bto_weight_cases() {
        let u = bto_weights(&[0.3, 0.3, 0.3, 0.3], 0.01).unwrap();
        assert!(u.weights.iter().all(|&w| (w - 0.25).abs() < 1e-15));
        let e = std::f64::consts::E;
        let w = bto_weights(&[1.0, 0.0], 1.0).unwrap();
        assert!((w.weights[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((w.weights[0] - 0.7311).abs() < 1e-4);
        let s = bto_weights(&[0.9, 0.8], 0.01).unwrap();
        assert!((s.weights[1] - 1.0 / (1.0 + 10f64.exp())).abs() < 1e-15);
        assert!((s.weights[0] - 0.9999546).abs() < 1e-7);
        assert!(matches!(bto_weights(&[1.0], 0.0), Err(Error::Usage(_))));
    }

    #[test]
    fn bto_objective_cases() {
        let mut t = Tape::new();
        let l1 = t.scalar_const(0.8);
        let l2 = t.scalar_const(0.4);
        let eq = bto_weights(&[0.5, 0.5], 1.0).unwrap();
        let j = bto_objective(&mut t, &eq, &[Some(l1), Some(l1)]).unwrap();
        assert!((t.scalar(j) + 0.4).abs() < 1e-15);
        let w = bto_weights(&[1.0, 0.0], 1.0).unwrap();
        let j = bto_objective(&mut t, &w, &[Some(l1), Some(l2)]).unwrap();
        let e = std::f64::consts::E;
        assert!((t.scalar(j) + (e / (1.0 + e) * 0.8 + 1.0 / (1.0 + e) * 0.4) / 2.0).abs() < 1e-15);
        let j = bto_objective(&mut t, &w, &[None, None]).unwrap();
        assert_eq!(t.scalar(j), 0.0);
    }

    #[test]
    fn reward_cases() {
        let c = EnvConfig::default();
        let scene = (0..200)
            .map(|s| generate_scene(s, Domain::Target, &c).unwrap())
            .find(|s| s.target().rect.width() == 6 && s.target().rect.height() == 6)
            .expect("a 6x6 target");
        let rect = scene.target().rect;
        let prompt = ToolPrompt { color: scene.target().color, size: None, boxes: vec![rect] };
        let full = Mask::from_rects(16, 16, &[rect]);
        let logits = full.as_tensor().map(|v| if v > 0.5 { 20.0 } else { -20.0 });
        let r = reward_from_logits(&scene, &prompt, &logits, true, 0.5).unwrap();
        assert!((r.r_iou - 16.0 / 36.0).abs() < 1e-15);
        assert!((r.total - 0.5).abs() < 1e-12);

        let eroded = scene.gt_mask_target.as_tensor().map(|v| if v > 0.5 { 20.0 } else { -20.0 });
        assert_eq!(reward_from_logits(&scene, &prompt, &eroded, true, 0.5).unwrap().total, 1.0);

        let empty = Tensor::filled(&[16, 16], -20.0);
        assert!((reward_from_logits(&scene, &prompt, &empty, true, 0.5).unwrap().total - 0.1).abs() < 1e-15);

        let tool = ToolNet::new(&c, &Default::default());
        assert_eq!(compute_reward(&scene, None, &tool, &tool.init(0), true, 0.5).unwrap(), RewardBreakdown::INVALID);
    }

    #[test]
    fn grpo_on_policy_reduces_to_minus_beta_kl() {
        // with cur == old the clipped surrogate is mean(A) = 0
        let mut t = Tape::new();
        let old = vec![vec![-1.0, -0.5], vec![-0.2, -2.0], vec![-0.7, -0.1]];
        let reference = vec![vec![-1.1, -0.4], vec![-0.3, -2.2], vec![-0.6, -0.3]];
        let cur: Vec<Var> = (0..2).map(|s| t.param(&format!("c{s}"), &step_column(&old, s))).collect();
        let adv = compute_advantages(&[0.2, 0.9, 0.4]).unwrap().advantages;
        let lp = GroupLogprobs { current: &cur, old: &old, reference: &reference };
        let j = grpo_objective(&mut t, &lp, &adv, 0.01, 0.2, 2).unwrap();
        let kl: f64 = old.iter().zip(&reference).map(|(c, r)| kl_estimate(c, r, 2).unwrap()).sum::<f64>() / 3.0;
        assert!((t.scalar(j) + 0.01 * kl).abs() < 1e-15);

        let zero = grpo_objective(&mut t, &lp, &[0.0; 3], 0.0, 0.2, 2).unwrap();
        assert_eq!(t.scalar(zero), 0.0);
    }

    #[test]
    fn clipped_token_has_zero_gradient() {
        let eps = 0.2;
        let old = vec![vec![-1.0], vec![-1.0]];
        let mut t = Tape::new();
        // first rollout ratio 1 + 2ε, second on-policy
        let cur = t.param("cur", &Tensor::vector(vec![-1.0 + (1.0f64 + 2.0 * eps).ln(), -1.0]));
        let lp = GroupLogprobs { current: &[cur], old: &old, reference: &old };
        let j = grpo_objective(&mut t, &lp, &[1.0, -1.0], 0.0, eps, 1).unwrap();
        let g = t.backward(j).unwrap().params();
        let g = g.get("cur").unwrap().values().to_vec();
        assert_eq!(g[0], 0.0);
        assert!(g[1] != 0.0);
    }

    #[test]
    fn grto_term_rules() {
        let mut t = Tape::new();
        let r = t.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let a = t.scalar_const(0.6);
        let b = t.scalar_const(0.2);
        let term = grto_tool_term(&mut t, r, &[Some(a), None, Some(b)]).unwrap();
        assert!((t.scalar(term) - 0.4).abs() < 1e-15);
        let none = grto_tool_term(&mut t, r, &[None, None, None]).unwrap();
        assert_eq!(t.scalar(none), 0.0);
    }
}
