//! Training steps and the six regimes: GRPO, GRTO, B-GRTO, B-GRPO,
//! Reverse-Sequential and GRTO-No-Filter, with validation-based checkpoint
//! selection.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::env::{generate_scene, Domain, EnvConfig, GridScene, ToolPrompt};
use crate::error::{Error, Result};
use crate::grad::{NamedParams, Tape, Var};
use crate::metrics::{evaluate, evaluate_prompts, greedy_prompts, EvalReport, MetricsRow, MetricsSink};
use crate::models::{PolicyNet, ToolNet};
use crate::objectives::{
    bto_objective, bto_weights, detached_sequence_ratios, grpo_objective, grto_tool_term, kl_estimate, predicted_mask,
    reward_from_logits, seg_loss, GroupLogprobs, RewardBreakdown,
};
use crate::optim::{adamw_step, clip_global_norm, AdamConfig, OptimizerState};
use crate::rng;
use crate::rollout::{sample_group, test_scene_seed, train_scene_seed, validation_scene_seed, Group, ReplayBuffer, Sampler};

/// Token ratios at update time must equal 1 within this bound.
pub const ON_POLICY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Grpo,
    Grto,
    BGrto,
    BGrpo,
    ReverseSeq,
    GrtoNoFilter,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Grpo, Mode::Grto, Mode::BGrto, Mode::BGrpo, Mode::ReverseSeq, Mode::GrtoNoFilter];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Grpo => "grpo",
            Mode::Grto => "grto",
            Mode::BGrto => "b_grto",
            Mode::BGrpo => "b_grpo",
            Mode::ReverseSeq => "reverse_seq",
            Mode::GrtoNoFilter => "grto_no_filter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::usage(format!("unknown mode `{s}` (expected one of grpo, grto, b_grto, b_grpo, reverse_seq, grto_no_filter)")))
    }

    pub fn bootstrapped(self) -> bool {
        matches!(self, Mode::BGrto | Mode::BGrpo)
    }

    pub fn trains_tool_jointly(self) -> bool {
        matches!(self, Mode::Grto | Mode::BGrto | Mode::GrtoNoFilter)
    }

    pub fn filter_enabled(self) -> bool {
        self != Mode::GrtoNoFilter
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BtoConfig {
    /// Buffer location; relative paths resolve against the workdir.
    pub buffer_path: String,
    pub beta: f64,
    pub epochs: usize,
    pub frozen_rewards: bool,
    /// Tool learning rate while bootstrapping.
    pub lr_tool: f64,
    /// Scene-stream passes used to fill the buffer.
    pub passes: usize,
    /// Rollouts per stored group; `None` uses the training group size.
    pub group_size: Option<usize>,
}

impl Default for BtoConfig {
    fn default() -> Self {
        Self {
            buffer_path: "buffer.jsonl".into(),
            beta: 0.01,
            epochs: 3,
            frozen_rewards: false,
            lr_tool: 3e-3,
            passes: 1,
            group_size: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    MeanGiouCiou,
    Giou,
    Ciou,
}

impl ValidationMetric {
    pub fn of(self, r: &EvalReport) -> f64 {
        match self {
            ValidationMetric::MeanGiouCiou => r.selection_metric(),
            ValidationMetric::Giou => r.giou,
            ValidationMetric::Ciou => r.ciou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub scenes: usize,
    pub metric: ValidationMetric,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { scenes: 128, metric: ValidationMetric::MeanGiouCiou }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReverseSeqConfig {
    pub epochs: usize,
}

impl Default for ReverseSeqConfig {
    fn default() -> Self {
        Self { epochs: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr_policy: f64,
    pub lr_tool: f64,
    /// Multiplier on `lr_tool` for the joint stage that follows bootstrapping.
    pub second_stage_tool_lr_factor: f64,
    pub beta_kl: f64,
    pub eps_clip: f64,
    pub group_size: usize,
    pub scenes_per_epoch: usize,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Objective normalizer; `None` uses the grammar length.
    pub l_max: Option<usize>,
    pub threshold: f64,
    pub bto: BtoConfig,
    pub validation: ValidationConfig,
    pub reverse_seq: ReverseSeqConfig,
    /// Re-run backward per term each step and assert no gradient crosses between policy and tool.
    pub debug_checks: bool,
    /// Write measured step times to the `wall_ms` column (0 otherwise, for byte-reproducible logs).
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Grpo,
            lr_policy: 3e-4,
            lr_tool: 1e-3,
            second_stage_tool_lr_factor: 1.0,
            beta_kl: 0.01,
            eps_clip: 0.2,
            group_size: 8,
            scenes_per_epoch: 48,
            epochs: 30,
            grad_clip_norm: 1.0,
            seed: 0,
            l_max: None,
            threshold: 0.5,
            bto: BtoConfig::default(),
            validation: ValidationConfig::default(),
            reverse_seq: ReverseSeqConfig::default(),
            debug_checks: false,
            wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be > 0, got {v}"));
            }
        };
        positive("lr_policy", self.lr_policy);
        positive("lr_tool", self.lr_tool);
        positive("second_stage_tool_lr_factor", self.second_stage_tool_lr_factor);
        positive("eps_clip", self.eps_clip);
        positive("grad_clip_norm", self.grad_clip_norm);
        positive("bto.beta", self.bto.beta);
        positive("bto.lr_tool", self.bto.lr_tool);
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            errs.push(format!("beta_kl must be >= 0, got {}", self.beta_kl));
        }
        if self.group_size < 2 {
            errs.push(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.bto.group_size.is_some_and(|g| g < 2) {
            errs.push("bto.group_size must be >= 2".into());
        }
        if self.scenes_per_epoch == 0 {
            errs.push("scenes_per_epoch must be >= 1".into());
        }
        if self.validation.scenes == 0 {
            errs.push("validation.scenes must be >= 1".into());
        }
        if self.l_max == Some(0) {
            errs.push("l_max must be >= 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            errs.push(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if self.mode.bootstrapped() && self.bto.buffer_path.is_empty() {
            errs.push(format!("mode {} needs bto.buffer_path", self.mode.as_str()));
        }
        if self.bto.passes == 0 {
            errs.push("bto.passes must be >= 1".into());
        }
        errs
    }

    pub fn buffer_group_size(&self) -> usize {
        self.bto.group_size.unwrap_or(self.group_size)
    }
}

/// Environment plus both networks.
#[derive(Clone, Debug)]
pub struct Models {
    pub env: EnvConfig,
    pub policy: PolicyNet,
    pub tool: ToolNet,
}

impl Models {
    pub fn new(env: &EnvConfig, policy: &crate::models::PolicyConfig, tool: &crate::models::ToolConfig) -> Self {
        Self { env: env.clone(), policy: PolicyNet::new(env, policy), tool: ToolNet::new(env, tool) }
    }

    fn l_max(&self, cfg: &TrainConfig) -> usize {
        cfg.l_max.unwrap_or_else(|| self.policy.grammar.max_len())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub policy_obj: f64,
    pub tool_loss: f64,
    pub kl: f64,
    pub grad_norm_policy: f64,
    pub grad_norm_tool: f64,
    pub mean_reward: f64,
    pub validity_rate: f64,
    /// Largest `|r_{i,t} - 1|` seen at update time.
    pub max_ratio_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub metric: f64,
    pub path: Option<PathBuf>,
}

/// Maximum metric; ties go to the earliest epoch.
pub fn select_best_checkpoint(records: &[CheckpointRecord]) -> Result<CheckpointRecord> {
    let mut best: Option<&CheckpointRecord> = None;
    for r in records {
        match best {
            Some(b) if !(r.metric > b.metric || (r.metric == b.metric && r.epoch < b.epoch)) => {}
            _ => best = Some(r),
        }
    }
    best.cloned().ok_or_else(|| Error::usage("checkpoint selection over no records"))
}

struct GroupTensors {
    tokens: Vec<Vec<usize>>,
    old: Vec<Vec<f64>>,
    reference: Vec<Vec<f64>>,
    advantages: Vec<f64>,
}

impl GroupTensors {
    fn of(group: &Group) -> Result<Self> {
        let adv = group.advantages.as_ref().ok_or_else(|| Error::usage("group has no advantages"))?;
        Ok(Self {
            tokens: group.rollouts.iter().map(|r| r.tokens.clone()).collect(),
            old: group.rollouts.iter().map(|r| r.logprobs_old.clone()).collect(),
            reference: group.rollouts.iter().map(|r| r.logprobs_ref.clone()).collect(),
            advantages: adv.advantages.clone(),
        })
    }

    fn logprobs<'a>(&'a self, current: &'a [Var]) -> GroupLogprobs<'a> {
        GroupLogprobs { current, old: &self.old, reference: &self.reference }
    }

    fn mean_kl(&self, l_max: usize) -> Result<f64> {
        let mut s = 0.0;
        for (c, r) in self.old.iter().zip(&self.reference) {
            s += kl_estimate(c, r, l_max)?;
        }
        Ok(s / self.old.len() as f64)
    }
}

fn ratio_deviation(tape: &Tape, current: &[Var], old: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (t, &v) in current.iter().enumerate() {
        for (i, &c) in tape.value(v).values().iter().enumerate() {
            worst = worst.max(((c - old[i][t]).exp() - 1.0).abs());
        }
    }
    worst
}

fn assert_on_policy(dev: f64) -> Result<()> {
    if dev > ON_POLICY_TOLERANCE {
        return Err(Error::State(format!("update is off-policy: token ratio deviates from 1 by {dev:e}")));
    }
    Ok(())
}

fn assert_zero(grads: &NamedParams, what: &str) -> Result<()> {
    if grads.global_norm() != 0.0 {
        return Err(Error::State(format!("gradient leaked across the stop-gradient boundary: {what}")));
    }
    Ok(())
}

fn group_summary(group: &Group) -> (f64, f64) {
    let r = group.rewards();
    (r.iter().sum::<f64>() / r.len() as f64, group.validity_rate())
}

/// One clipped-surrogate ascent step on θ; the tool is not touched.
pub fn train_step_grpo(
    models: &Models,
    cfg: &TrainConfig,
    group: &Group,
    scene: &GridScene,
    theta: &mut NamedParams,
    opt: &mut OptimizerState,
) -> Result<StepStats> {
    let l_max = models.l_max(cfg);
    let g = GroupTensors::of(group)?;
    let mut tape = Tape::new();
    let vars = models.policy.bind(&mut tape, theta)?;
    let cur = models.policy.sequence_logprobs(&mut tape, &vars, scene, &g.tokens)?;
    let dev = ratio_deviation(&tape, &cur, &g.old);
    assert_on_policy(dev)?;
    let j = grpo_objective(&mut tape, &g.logprobs(&cur), &g.advantages, cfg.beta_kl, cfg.eps_clip, l_max)?;
    let loss = tape.neg(j)?;
    let mut grads = tape.backward(loss)?.for_params(theta);
    let norm = clip_global_norm(&mut grads, cfg.grad_clip_norm)?;
    adamw_step(theta, &grads, opt, cfg.lr_policy)?;
    let (mean_reward, validity_rate) = group_summary(group);
    Ok(StepStats {
        policy_obj: tape.scalar(j),
        kl: g.mean_kl(l_max)?,
        grad_norm_policy: norm,
        mean_reward,
        validity_rate,
        max_ratio_deviation: dev,
        ..StepStats::default()
    })
}

/// Seg-loss vars for each rollout's prompt (shared between identical prompts).
fn rollout_losses(
    tape: &mut Tape,
    tool: &ToolNet,
    vars: &crate::models::ToolVars,
    scene: &GridScene,
    prompts: &[Option<&ToolPrompt>],
) -> Result<(Vec<Option<Var>>, Vec<Option<Var>>)> {
    let mut cache: HashMap<&ToolPrompt, (Var, Var)> = HashMap::new();
    let mut losses = Vec::with_capacity(prompts.len());
    let mut logits = Vec::with_capacity(prompts.len());
    for p in prompts {
        match p {
            None => {
                losses.push(None);
                logits.push(None);
            }
            Some(p) => {
                let (lg, l) = match cache.get(p) {
                    Some(&pair) => pair,
                    None => {
                        let lg = tool.forward(tape, vars, scene, p)?;
                        let l = seg_loss(tape, lg, scene.official_gt())?;
                        cache.insert(p, (lg, l));
                        (lg, l)
                    }
                };
                losses.push(Some(l));
                logits.push(Some(lg));
            }
        }
    }
    Ok((losses, logits))
}

/// Simultaneous update of θ (clipped surrogate) and ω (ratio-weighted seg loss),
/// each with its own optimizer state and gradient clipping.
pub fn train_step_grto(
    models: &Models,
    cfg: &TrainConfig,
    group: &Group,
    scene: &GridScene,
    theta: &mut NamedParams,
    omega: &mut NamedParams,
    opt_policy: &mut OptimizerState,
    opt_tool: &mut OptimizerState,
    lr_tool: f64,
) -> Result<StepStats> {
    let l_max = models.l_max(cfg);
    let g = GroupTensors::of(group)?;
    let mut tape = Tape::new();
    let pv = models.policy.bind(&mut tape, theta)?;
    let tv = models.tool.bind(&mut tape, omega)?;
    let cur = models.policy.sequence_logprobs(&mut tape, &pv, scene, &g.tokens)?;
    let dev = ratio_deviation(&tape, &cur, &g.old);
    assert_on_policy(dev)?;
    let lp = g.logprobs(&cur);
    let j = grpo_objective(&mut tape, &lp, &g.advantages, cfg.beta_kl, cfg.eps_clip, l_max)?;
    let ratios = detached_sequence_ratios(&mut tape, &lp)?;
    let prompts: Vec<Option<&ToolPrompt>> = group.rollouts.iter().map(|r| r.prompt.as_ref()).collect();
    let (losses, _) = rollout_losses(&mut tape, &models.tool, &tv, scene, &prompts)?;
    let tool_term = grto_tool_term(&mut tape, ratios, &losses)?;
    let neg_j = tape.neg(j)?;
    let total = tape.add(neg_j, tool_term)?;

    let grads = tape.backward(total)?;
    let mut gp = grads.for_params(theta);
    let mut gt = grads.for_params(omega);
    if cfg.debug_checks {
        assert_zero(&tape.backward(tool_term)?.for_params(theta), "tool term → θ")?;
        assert_zero(&tape.backward(neg_j)?.for_params(omega), "policy term → ω")?;
    }
    let norm_p = clip_global_norm(&mut gp, cfg.grad_clip_norm)?;
    let norm_t = clip_global_norm(&mut gt, cfg.grad_clip_norm)?;
    adamw_step(theta, &gp, opt_policy, cfg.lr_policy)?;
    adamw_step(omega, &gt, opt_tool, lr_tool)?;
    let (mean_reward, validity_rate) = group_summary(group);
    Ok(StepStats {
        policy_obj: tape.scalar(j),
        tool_loss: tape.scalar(tool_term),
        kl: g.mean_kl(l_max)?,
        grad_norm_policy: norm_p,
        grad_norm_tool: norm_t,
        mean_reward,
        validity_rate,
        max_ratio_deviation: dev,
    })
}

/// Per-epoch log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub report: EvalReport,
    pub metric: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtoOutcome {
    pub omega: NamedParams,
    pub records: Vec<CheckpointRecord>,
    pub selected: CheckpointRecord,
    /// Mean BTO loss per epoch.
    pub losses: Vec<f64>,
    /// Wall time of the whole stage, validation included.
    pub wall_ms: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Held-out target-domain test scenes, never used for selection.
pub fn test_scenes(env: &EnvConfig, seed: u64, count: usize) -> Result<Vec<GridScene>> {
    (0..count).map(|i| generate_scene(test_scene_seed(seed, i), Domain::Target, env)).collect()
}

/// Held-out target-domain validation scenes for a run.
pub fn validation_scenes(env: &EnvConfig, cfg: &TrainConfig) -> Result<Vec<GridScene>> {
    (0..cfg.validation.scenes).map(|i| generate_scene(validation_scene_seed(cfg.seed, i), Domain::Target, env)).collect()
}

/// Epochs over the static buffer minimizing `-J_BTO`; returns the ω with the best
/// validation mean reward of greedy reference-policy decoding (epoch 0 = ω₀ included).
pub fn run_bto_stage(
    models: &Models,
    cfg: &TrainConfig,
    buffer: &ReplayBuffer,
    omega0: &NamedParams,
    theta_ref: &NamedParams,
    val_scenes: &[GridScene],
) -> Result<BtoOutcome> {
    let start = Instant::now();
    let env_hash = models.env.hash_hex();
    if buffer.header.env_hash != env_hash {
        return Err(Error::format(
            &cfg.bto.buffer_path,
            format!("env hash {} in buffer but config hashes to {env_hash}", buffer.header.env_hash),
        ));
    }
    let filter = cfg.mode.filter_enabled();
    // the reference policy is fixed, so its greedy prompts are decoded once
    let val_prompts = greedy_prompts(&models.policy, theta_ref, val_scenes)?;
    let validate = |omega: &NamedParams| -> Result<f64> {
        Ok(evaluate_prompts(&models.tool, omega, val_scenes, &val_prompts, filter)?.mean_reward)
    };
    let mut omega = omega0.clone();
    let mut records = vec![CheckpointRecord { epoch: 0, metric: validate(&omega)?, path: None }];
    let mut best = (records[0].clone(), omega.clone());
    let mut losses = Vec::new();
    if cfg.bto.epochs == 0 {
        return Ok(BtoOutcome { omega, selected: records[0].clone(), records, losses, wall_ms: ms_since(start) });
    }

    let scenes: Vec<GridScene> = buffer.groups.iter().map(|g| g.scene(&models.env)).collect::<Result<_>>()?;
    let prompts: Vec<Vec<Option<ToolPrompt>>> = buffer
        .groups
        .iter()
        .map(|g| g.rollouts.iter().map(|r| models.policy.grammar.parse(&r.tokens)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let frozen: Option<Vec<Vec<f64>>> = if cfg.bto.frozen_rewards {
        Some(
            scenes
                .iter()
                .zip(&prompts)
                .map(|(scene, ps)| {
                    ps.iter()
                        .map(|p| match p {
                            None => Ok(0.0),
                            Some(p) => Ok(reward_from_logits(scene, p, &models.tool.logits(omega0, scene, p)?, filter, cfg.threshold)?.total),
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let mut opt = OptimizerState::new(&omega, AdamConfig::default());
    for epoch in 1..=cfg.bto.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "bto-order", &[epoch as u64]));
        let mut total = 0.0;
        for &gi in &order {
            let scene = &scenes[gi];
            let mut tape = Tape::new();
            let tv = models.tool.bind(&mut tape, &omega)?;
            let ps: Vec<Option<&ToolPrompt>> = prompts[gi].iter().map(Option::as_ref).collect();
            let (losses_i, logits) = rollout_losses(&mut tape, &models.tool, &tv, scene, &ps)?;
            let rewards: Vec<f64> = match &frozen {
                Some(f) => f[gi].clone(),
                None => ps
                    .iter()
                    .zip(&logits)
                    .map(|(p, lg)| match (p, lg) {
                        (Some(p), Some(lg)) => {
                            let mask = predicted_mask(tape.value(*lg), p, filter, cfg.threshold);
                            Ok(RewardBreakdown::valid(crate::objectives::mask_iou(&mask, scene.official_gt())?).total)
                        }
                        _ => Ok(0.0),
                    })
                    .collect::<Result<_>>()?,
            };
            let w = bto_weights(&rewards, cfg.bto.beta)?;
            let j = bto_objective(&mut tape, &w, &losses_i)?;
            let loss = tape.neg(j)?;
            total += tape.scalar(loss);
            let mut grads = tape.backward(loss)?.for_params(&omega);
            clip_global_norm(&mut grads, cfg.grad_clip_norm)?;
            adamw_step(&mut omega, &grads, &mut opt, cfg.bto.lr_tool)?;
        }
        losses.push(total / scenes.len() as f64);
        let rec = CheckpointRecord { epoch, metric: validate(&omega)?, path: None };
        if rec.metric > best.0.metric {
            best = (rec.clone(), omega.clone());
        }
        records.push(rec);
    }
    let selected = select_best_checkpoint(&records)?;
    debug_assert_eq!(selected.epoch, best.0.epoch);
    Ok(BtoOutcome { omega: best.1, records, selected, losses, wall_ms: ms_since(start) })
}

/// Frozen reference parameters and starting points.
#[derive(Clone, Debug)]
pub struct StartPoint {
    pub theta0: NamedParams,
    pub omega0: NamedParams,
}

/// Where a run writes its artifacts, if anywhere.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub mode: Mode,
    pub seed: u64,
    /// Validation of every epoch of the RL phase (epoch 0 = starting point).
    pub epochs: Vec<EpochLog>,
    pub records: Vec<CheckpointRecord>,
    pub selected: CheckpointRecord,
    pub selected_report: EvalReport,
    pub theta: NamedParams,
    pub omega: NamedParams,
    pub bto: Option<BtoOutcome>,
    /// Reverse-Sequential tool phase.
    pub tool_phase: Option<Vec<EpochLog>>,
    pub rows: Vec<MetricsRow>,
    /// Mean wall time of one training epoch of the RL phase (validation included).
    pub mean_epoch_ms: f64,
}

enum Phase {
    PolicyOnly,
    Joint { lr_tool: f64 },
}

struct Logger<'a> {
    sink: Option<MetricsSink>,
    rows: Vec<MetricsRow>,
    step: u64,
    mode: &'a str,
    seed: u64,
    wall_clock: bool,
}

impl Logger<'_> {
    fn push(&mut self, epoch: usize, s: &StepStats, wall_ms: f64) {
        self.step += 1;
        self.rows.push(MetricsRow {
            step: self.step,
            epoch,
            mode: self.mode.to_string(),
            mean_reward: s.mean_reward,
            validity_rate: s.validity_rate,
            giou: 0.0,
            ciou: 0.0,
            policy_obj: s.policy_obj,
            tool_loss: s.tool_loss,
            kl: s.kl,
            grad_norm_policy: s.grad_norm_policy,
            grad_norm_tool: s.grad_norm_tool,
            wall_ms: if self.wall_clock { wall_ms } else { 0.0 },
            seed: self.seed,
        });
    }

    /// Stamps the epoch's validation onto its rows and flushes them.
    fn end_epoch(&mut self, epoch: usize, report: &EvalReport) -> Result<()> {
        for r in self.rows.iter_mut().rev().take_while(|r| r.epoch == epoch) {
            r.giou = report.giou;
            r.ciou = report.ciou;
        }
        if let Some(sink) = &mut self.sink {
            for r in self.rows.iter().filter(|r| r.epoch == epoch) {
                sink.emit(r);
            }
            sink.flush()?;
        }
        Ok(())
    }
}

struct PhaseResult {
    epochs: Vec<EpochLog>,
    records: Vec<CheckpointRecord>,
    best: (CheckpointRecord, NamedParams, NamedParams, EvalReport),
    mean_epoch_ms: f64,
}

fn save_epoch(out: Option<&RunOutput>, mode: Mode, cfg: &TrainConfig, epoch: usize, metric: f64, theta: &NamedParams, omega: &NamedParams) -> Result<Option<PathBuf>> {
    let Some(out) = out else { return Ok(None) };
    let path = out.dir.join(format!("epoch{epoch}.ckpt"));
    Checkpoint {
        meta: CheckpointMeta {
            mode: mode.as_str().into(),
            epoch,
            seed: cfg.seed,
            config_hash: out.config_hash.clone(),
            metric: Some(metric),
            tensors: 0,
        },
        params: theta.merged(omega)?,
    }
    .save(&path)?;
    Ok(Some(path))
}

#[allow(clippy::too_many_arguments)]
fn rl_phase(
    models: &Models,
    cfg: &TrainConfig,
    phase: Phase,
    theta0: &NamedParams,
    mut theta: NamedParams,
    mut omega: NamedParams,
    val: &[GridScene],
    log: &mut Logger<'_>,
    out: Option<&RunOutput>,
) -> Result<PhaseResult> {
    let filter = cfg.mode.filter_enabled();
    let validate = |theta: &NamedParams, omega: &NamedParams| evaluate(&models.policy, theta, &models.tool, omega, val, filter);
    let report0 = validate(&theta, &omega)?;
    let metric0 = cfg.validation.metric.of(&report0);
    let path0 = save_epoch(out, cfg.mode, cfg, 0, metric0, &theta, &omega)?;
    let mut records = vec![CheckpointRecord { epoch: 0, metric: metric0, path: path0 }];
    let mut epochs = vec![EpochLog { epoch: 0, report: report0.clone(), metric: metric0, wall_ms: 0.0 }];
    let mut best = (records[0].clone(), theta.clone(), omega.clone(), report0);

    let mut opt_p = OptimizerState::new(&theta, AdamConfig::default());
    let mut opt_t = OptimizerState::new(&omega, AdamConfig::default());
    let mut total_ms = 0.0;
    for epoch in 1..=cfg.epochs {
        let t_epoch = Instant::now();
        for i in 0..cfg.scenes_per_epoch {
            let t_step = Instant::now();
            let scene = generate_scene(train_scene_seed(cfg.seed, epoch - 1, i), Domain::Target, &models.env)?;
            let sampler = Sampler {
                policy: &models.policy,
                theta: &theta,
                theta_ref: theta0,
                tool: &models.tool,
                omega: &omega,
                filter_enabled: filter,
                threshold: cfg.threshold,
            };
            let index = ((epoch as u64 - 1) << 32) | i as u64;
            let group = sample_group(&sampler, &scene, cfg.group_size, cfg.seed, index)?;
            let stats = match phase {
                Phase::PolicyOnly => {
                    let s = train_step_grpo(models, cfg, &group, &scene, &mut theta, &mut opt_p)?;
                    if cfg.debug_checks {
                        assert_eq!(opt_t.step, 0);
                    }
                    s
                }
                Phase::Joint { lr_tool } => {
                    train_step_grto(models, cfg, &group, &scene, &mut theta, &mut omega, &mut opt_p, &mut opt_t, lr_tool)?
                }
            };
            log.push(epoch, &stats, ms_since(t_step));
        }
        let report = validate(&theta, &omega)?;
        let metric = cfg.validation.metric.of(&report);
        let path = save_epoch(out, cfg.mode, cfg, epoch, metric, &theta, &omega)?;
        log.end_epoch(epoch, &report)?;
        let wall = ms_since(t_epoch);
        total_ms += wall;
        let rec = CheckpointRecord { epoch, metric, path };
        if rec.metric > best.0.metric {
            best = (rec.clone(), theta.clone(), omega.clone(), report.clone());
        }
        records.push(rec);
        epochs.push(EpochLog { epoch, report, metric, wall_ms: wall });
    }
    Ok(PhaseResult { epochs, records, best, mean_epoch_ms: total_ms / cfg.epochs.max(1) as f64 })
}

/// Greedy prompts of `theta` on training scenes, unweighted seg loss on ω, best-validation ω.
#[allow(clippy::too_many_arguments)]
fn reverse_tool_phase(
    models: &Models,
    cfg: &TrainConfig,
    theta: &NamedParams,
    mut omega: NamedParams,
    val: &[GridScene],
    log: &mut Logger<'_>,
    out: Option<&RunOutput>,
    epoch_offset: usize,
) -> Result<(Vec<EpochLog>, Vec<CheckpointRecord>, (CheckpointRecord, NamedParams, EvalReport))> {
    let val_prompts = greedy_prompts(&models.policy, theta, val)?;
    let validate = |omega: &NamedParams| evaluate_prompts(&models.tool, omega, val, &val_prompts, true);
    let report0 = validate(&omega)?;
    let metric0 = cfg.validation.metric.of(&report0);
    let mut records = vec![CheckpointRecord { epoch: epoch_offset, metric: metric0, path: None }];
    let mut epochs = vec![EpochLog { epoch: epoch_offset, report: report0.clone(), metric: metric0, wall_ms: 0.0 }];
    let mut best = (records[0].clone(), omega.clone(), report0);
    let mut opt = OptimizerState::new(&omega, AdamConfig::default());
    for e in 1..=cfg.reverse_seq.epochs {
        let epoch = epoch_offset + e;
        let t_epoch = Instant::now();
        for i in 0..cfg.scenes_per_epoch {
            let t_step = Instant::now();
            let scene = generate_scene(train_scene_seed(cfg.seed, e - 1, i), Domain::Target, &models.env)?;
            let greedy = models.policy.greedy(theta, &scene)?;
            let mut stats = StepStats::default();
            if let Some(prompt) = models.policy.grammar.parse(&greedy.tokens)? {
                let mut tape = Tape::new();
                let tv = models.tool.bind(&mut tape, &omega)?;
                let lg = models.tool.forward(&mut tape, &tv, &scene, &prompt)?;
                let r = reward_from_logits(&scene, &prompt, tape.value(lg), true, cfg.threshold)?;
                let loss = seg_loss(&mut tape, lg, scene.official_gt())?;
                let mut grads = tape.backward(loss)?.for_params(&omega);
                stats.grad_norm_tool = clip_global_norm(&mut grads, cfg.grad_clip_norm)?;
                adamw_step(&mut omega, &grads, &mut opt, cfg.lr_tool)?;
                stats.tool_loss = tape.scalar(loss);
                stats.mean_reward = r.total;
                stats.validity_rate = 1.0;
            }
            log.push(epoch, &stats, ms_since(t_step));
        }
        let report = validate(&omega)?;
        let metric = cfg.validation.metric.of(&report);
        let path = save_epoch(out, cfg.mode, cfg, epoch, metric, theta, &omega)?;
        log.end_epoch(epoch, &report)?;
        let rec = CheckpointRecord { epoch, metric, path };
        if rec.metric > best.0.metric {
            best = (rec.clone(), omega.clone(), report.clone());
        }
        records.push(rec);
        epochs.push(EpochLog { epoch, report, metric, wall_ms: ms_since(t_epoch) });
    }
    Ok((epochs, records, best))
}

/// Runs one regime end to end. Bootstrapped modes need `buffer`.
///
/// With `out`, per-epoch checkpoints, `metrics.csv` and `selected.ckpt` are
/// written under `out.dir`.
pub fn run_mode(
    models: &Models,
    cfg: &TrainConfig,
    start: &StartPoint,
    buffer: Option<&ReplayBuffer>,
    out: Option<&RunOutput>,
) -> Result<RunOutcome> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let val = validation_scenes(&models.env, cfg)?;
    let sink = match out {
        Some(o) => Some(MetricsSink::create(&o.dir.join("metrics.csv"))?),
        None => None,
    };
    let mut log = Logger { sink, rows: Vec::new(), step: 0, mode: cfg.mode.as_str(), seed: cfg.seed, wall_clock: cfg.wall_clock };

    let bto = if cfg.mode.bootstrapped() {
        let buffer = buffer.ok_or_else(|| Error::MissingPrerequisite {
            artifact: PathBuf::from(&cfg.bto.buffer_path),
            command: "build-buffer",
        })?;
        Some(run_bto_stage(models, cfg, buffer, &start.omega0, &start.theta0, &val)?)
    } else {
        None
    };
    let omega_start = bto.as_ref().map_or_else(|| start.omega0.clone(), |b| b.omega.clone());
    let phase = match cfg.mode {
        Mode::Grpo | Mode::BGrpo | Mode::ReverseSeq => Phase::PolicyOnly,
        Mode::Grto | Mode::GrtoNoFilter => Phase::Joint { lr_tool: cfg.lr_tool },
        Mode::BGrto => Phase::Joint { lr_tool: cfg.lr_tool * cfg.second_stage_tool_lr_factor },
    };
    let rl = rl_phase(models, cfg, phase, &start.theta0, start.theta0.clone(), omega_start, &val, &mut log, out)?;

    let (selected, theta, omega, report, tool_phase, records) = if cfg.mode == Mode::ReverseSeq {
        let (_, theta_best, omega_best, _) = rl.best.clone();
        let (tool_epochs, tool_records, (rec, omega, report)) =
            reverse_tool_phase(models, cfg, &theta_best, omega_best, &val, &mut log, out, cfg.epochs)?;
        let mut records = rl.records.clone();
        records.extend(tool_records.iter().skip(1).cloned());
        (rec, theta_best, omega, report, Some(tool_epochs), records)
    } else {
        let (rec, theta, omega, report) = rl.best.clone();
        (rec, theta, omega, report, None, rl.records.clone())
    };

    if let Some(o) = out {
        Checkpoint {
            meta: CheckpointMeta {
                mode: cfg.mode.as_str().into(),
                epoch: selected.epoch,
                seed: cfg.seed,
                config_hash: o.config_hash.clone(),
                metric: Some(selected.metric),
                tensors: 0,
            },
            params: theta.merged(&omega)?,
        }
        .save(&o.dir.join("selected.ckpt"))?;
    }

    Ok(RunOutcome {
        mode: cfg.mode,
        seed: cfg.seed,
        epochs: rl.epochs,
        records,
        selected,
        selected_report: report,
        theta,
        omega,
        bto,
        tool_phase,
        rows: log.rows,
        mean_epoch_ms: rl.mean_epoch_ms,
    })
}

/// Path of a run's artifacts under a workdir.
pub fn run_dir(workdir: &Path, mode: Mode, seed: u64) -> PathBuf {
    workdir.join(mode.as_str()).join(seed.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_rules() {
        let recs = |ms: &[f64]| -> Vec<CheckpointRecord> {
            ms.iter().enumerate().map(|(e, &m)| CheckpointRecord { epoch: e, metric: m, path: None }).collect()
        };
        assert_eq!(select_best_checkpoint(&recs(&[0.3, 0.5, 0.4])).unwrap().epoch, 1);
        assert_eq!(select_best_checkpoint(&recs(&[0.5, 0.5])).unwrap().epoch, 0);
        assert_eq!(select_best_checkpoint(&recs(&[0.7])).unwrap().epoch, 0);
        assert!(select_best_checkpoint(&[]).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.as_str()).unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert!(Mode::parse("ppo").is_err());
    }

    #[test]
    fn config_validation_collects_every_violation() {
        let c = TrainConfig { beta_kl: -1.0, lr_policy: 0.0, group_size: 1, ..TrainConfig::default() };
        assert_eq!(c.validate().len(), 3);
        assert!(TrainConfig::default().validate().is_empty());
    }
}
