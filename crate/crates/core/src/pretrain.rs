//! Supervised starting points: the source-convention tool ω₀ and the
//! demonstration-warmed reference policy θ₀.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{generate_scene, scripted_demonstration, Domain, EnvConfig, GridScene, Rect, SizeClass, ToolPrompt};
use crate::error::{Error, Result};
use crate::grad::{NamedParams, Tape, Var};
use crate::models::{PolicyNet, ToolNet};
use crate::objectives::{mask_iou, predicted_mask, seg_loss};
use crate::optim::{adamw_step, clip_global_norm, AdamConfig, OptimizerState};
use crate::rng;
use crate::schedules::{Models, StartPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub scenes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Each prompt box side is pushed outwards by up to this many cells.
    pub box_jitter: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { scenes: 384, epochs: 12, lr: 3e-3, batch: 8, box_jitter: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub demos: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub noise: f64,
    /// Scenes used for the post-warmup validity measurement.
    pub validity_scenes: usize,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { demos: 768, epochs: 25, lr: 1e-3, batch: 16, noise: 0.3, validity_scenes: 128, seed: 0 }
    }
}

/// Per-epoch mean training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub losses: Vec<f64>,
}

impl TrainingCurve {
    /// Mean of the last `k` epoch losses (all of them if fewer).
    pub fn trailing_mean(&self, k: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(k)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Ground-truth prompt for the scene's target: true concept (size or wildcard) and the true box.
pub fn oracle_prompt(scene: &GridScene) -> ToolPrompt {
    let t = scene.target();
    ToolPrompt { color: t.color, size: Some(t.size_class), boxes: vec![t.rect] }
}

fn jittered_prompt(scene: &GridScene, jitter: usize, rng: &mut impl Rng) -> ToolPrompt {
    let t = scene.target();
    let r = t.rect;
    let mut grow = || rng.gen_range(0..=jitter);
    let rect = Rect::new(
        r.x1.saturating_sub(grow()),
        r.y1.saturating_sub(grow()),
        (r.x2 + grow()).min(scene.width - 1),
        (r.y2 + grow()).min(scene.height - 1),
    );
    let size: Option<SizeClass> = if rng.gen_bool(0.5) { Some(t.size_class) } else { None };
    ToolPrompt { color: t.color, size, boxes: vec![rect] }
}

/// Source-domain scenes paired with (jittered) ground-truth prompts.
pub fn tool_dataset(env: &EnvConfig, cfg: &PretrainConfig) -> Result<Vec<(GridScene, ToolPrompt)>> {
    (0..cfg.scenes)
        .map(|i| {
            let scene = generate_scene(rng::derive_key(cfg.seed, "pretrain-scene", &[i as u64]), Domain::Source, env)?;
            let mut r = rng::stream(cfg.seed, "pretrain-prompt", &[i as u64]);
            let prompt = jittered_prompt(&scene, cfg.box_jitter, &mut r);
            Ok((scene, prompt))
        })
        .collect()
}

fn epoch_order(n: usize, seed: u64, tag: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, tag, &[epoch as u64]));
    order
}

/// Minimizes the seg loss against `gt_mask_source`; returns ω₀ and the loss curve.
pub fn pretrain_tool(
    tool: &ToolNet,
    omega: &NamedParams,
    dataset: &[(GridScene, ToolPrompt)],
    cfg: &PretrainConfig,
    clip_norm: f64,
) -> Result<(NamedParams, TrainingCurve)> {
    let mut omega = omega.clone();
    let mut curve = TrainingCurve::default();
    if cfg.epochs == 0 || dataset.is_empty() {
        return Ok((omega, curve));
    }
    let mut opt = OptimizerState::new(&omega, AdamConfig::default());
    for epoch in 0..cfg.epochs {
        let order = epoch_order(dataset.len(), cfg.seed, "pretrain-order", epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch.max(1)) {
            let mut tape = Tape::new();
            let vars = tool.bind(&mut tape, &omega)?;
            let mut acc: Option<Var> = None;
            for &i in batch {
                let (scene, prompt) = &dataset[i];
                let logits = tool.forward(&mut tape, &vars, scene, prompt)?;
                let l = seg_loss(&mut tape, logits, &scene.gt_mask_source)?;
                total += tape.scalar(l);
                acc = Some(match acc {
                    Some(a) => tape.add(a, l)?,
                    None => l,
                });
            }
            let loss = tape.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            let mut grads = tape.backward(loss)?.for_params(&omega);
            clip_global_norm(&mut grads, clip_norm)?;
            adamw_step(&mut omega, &grads, &mut opt, cfg.lr)?;
        }
        curve.losses.push(total / dataset.len() as f64);
    }
    Ok((omega, curve))
}

/// Mean IoU of thresholded, box-filtered tool masks with the given prompts against `gt`.
pub fn mean_tool_iou<'a>(
    tool: &ToolNet,
    omega: &NamedParams,
    items: impl IntoIterator<Item = (&'a GridScene, &'a ToolPrompt)>,
    use_target: bool,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for (scene, prompt) in items {
        let mask = predicted_mask(&tool.logits(omega, scene, prompt)?, prompt, true, 0.5);
        let gt = if use_target { &scene.gt_mask_target } else { &scene.gt_mask_source };
        sum += mask_iou(&mask, gt)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::usage("mean IoU over no scenes"));
    }
    Ok(sum / n as f64)
}

/// Noisy scripted demonstrations on source-domain scenes.
pub fn demo_dataset(env: &EnvConfig, cfg: &WarmupConfig) -> Result<Vec<(GridScene, Vec<usize>)>> {
    let grammar = env.grammar();
    (0..cfg.demos)
        .map(|i| {
            let scene = generate_scene(rng::derive_key(cfg.seed, "demo-scene", &[i as u64]), Domain::Source, env)?;
            let mut r = rng::stream(cfg.seed, "demo-noise", &[i as u64]);
            let tokens = scripted_demonstration(&scene, &grammar, cfg.noise, &mut r);
            Ok((scene, tokens))
        })
        .collect()
}

/// Maximizes the mean per-token log-likelihood of the demonstrations.
pub fn warmup_policy(
    policy: &PolicyNet,
    theta: &NamedParams,
    demos: &[(GridScene, Vec<usize>)],
    cfg: &WarmupConfig,
    clip_norm: f64,
) -> Result<(NamedParams, TrainingCurve)> {
    let mut theta = theta.clone();
    let mut curve = TrainingCurve::default();
    if cfg.epochs == 0 || demos.is_empty() {
        return Ok((theta, curve));
    }
    let len = policy.grammar.max_len() as f64;
    let mut opt = OptimizerState::new(&theta, AdamConfig::default());
    for epoch in 0..cfg.epochs {
        let order = epoch_order(demos.len(), cfg.seed, "warmup-order", epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch.max(1)) {
            let mut tape = Tape::new();
            let vars = policy.bind(&mut tape, &theta)?;
            let mut acc: Option<Var> = None;
            for &i in batch {
                let (scene, tokens) = &demos[i];
                for lp in policy.sequence_logprobs(&mut tape, &vars, scene, std::slice::from_ref(tokens))? {
                    let s = tape.sum(lp)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, s)?,
                        None => s,
                    });
                }
            }
            let nll = tape.scale(acc.expect("non-empty batch"), -1.0 / (len * batch.len() as f64))?;
            total += tape.scalar(nll) * batch.len() as f64;
            let mut grads = tape.backward(nll)?.for_params(&theta);
            clip_global_norm(&mut grads, clip_norm)?;
            adamw_step(&mut theta, &grads, &mut opt, cfg.lr)?;
        }
        curve.losses.push(total / demos.len() as f64);
    }
    Ok((theta, curve))
}

/// Fraction of temperature-1 samples that parse, over `scenes` × `per_scene` draws.
pub fn validity_rate(policy: &PolicyNet, theta: &NamedParams, scenes: &[GridScene], per_scene: usize, seed: u64) -> Result<f64> {
    let mut valid = 0usize;
    for (i, scene) in scenes.iter().enumerate() {
        let mut r = rng::stream(seed, "validity", &[i as u64]);
        for s in policy.sample(theta, scene, per_scene, 1.0, &mut r)? {
            valid += policy.grammar.parse(&s.tokens)?.is_some() as usize;
        }
    }
    Ok(valid as f64 / (scenes.len() * per_scene) as f64)
}

/// Held-out scenes for the warm-up validity gate.
pub fn validity_scenes(env: &EnvConfig, cfg: &WarmupConfig) -> Result<Vec<GridScene>> {
    (0..cfg.validity_scenes)
        .map(|i| generate_scene(rng::derive_key(cfg.seed, "validity-scene", &[i as u64]), Domain::Target, env))
        .collect()
}

/// [`warmup_policy`] followed by the validity gate (≥ 0.5 at temperature 1).
pub fn warmup_policy_checked(
    policy: &PolicyNet,
    theta: &NamedParams,
    env: &EnvConfig,
    cfg: &WarmupConfig,
    clip_norm: f64,
) -> Result<(NamedParams, TrainingCurve, f64)> {
    let demos = demo_dataset(env, cfg)?;
    let (theta, curve) = warmup_policy(policy, theta, &demos, cfg, clip_norm)?;
    let rate = validity_rate(policy, &theta, &validity_scenes(env, cfg)?, 8, cfg.seed)?;
    if rate < 0.5 {
        return Err(Error::WarmupFailed { rate });
    }
    Ok((theta, curve, rate))
}

/// ω₀ from source-convention pretraining and θ₀ from gated warm-up.
pub fn reference_start(models: &Models, pcfg: &PretrainConfig, wcfg: &WarmupConfig, clip_norm: f64) -> Result<StartPoint> {
    let data = tool_dataset(&models.env, pcfg)?;
    let (omega0, _) = pretrain_tool(&models.tool, &models.tool.init(pcfg.seed), &data, pcfg, clip_norm)?;
    let (theta0, _, _) = warmup_policy_checked(&models.policy, &models.policy.init(wcfg.seed), &models.env, wcfg, clip_norm)?;
    Ok(StartPoint { theta0, omega0 })
}
