//! Run configuration and the pipeline commands behind the `bgrto` binary.
//!
//! A workdir holds every artifact:
//!
//! ```text
//! omega0.ckpt            pretrain-tool
//! theta0.ckpt            warmup-policy
//! buffer.jsonl           build-buffer
//! {mode}/{seed}/         train: epoch{N}.ckpt, metrics.csv, selected.ckpt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::env::{Domain, EnvConfig};
use crate::error::{Error, Result};
use crate::grad::NamedParams;
use crate::metrics::{evaluate, EvalReport};
use crate::models::{PolicyConfig, ToolConfig};
use crate::oracle::{oracle_suite, OracleCheck};
use crate::pretrain::{self, PretrainConfig, WarmupConfig};
use crate::rollout::{atomic_write, build_replay_buffer, ReplayBuffer, Sampler};
use crate::schedules::{run_dir, run_mode, test_scenes, validation_scenes, Mode, Models, RunOutput, StartPoint, TrainConfig};

pub const WORKDIR_ENV: &str = "GRTO_WORKDIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Falls back to `$GRTO_WORKDIR`, then `runs`.
    pub workdir: Option<String>,
    pub omega0: String,
    pub theta0: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { workdir: None, omega0: "omega0.ckpt".into(), theta0: "theta0.ckpt".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub tool: ToolConfig,
    pub pretrain: PretrainConfig,
    pub warmup: WarmupConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Every constraint violation, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.env.validate();
        for (name, hidden) in [("policy.hidden", &self.policy.hidden[..]), ("tool.hidden", &self.tool.hidden[..])] {
            if hidden.contains(&0) {
                errs.push(format!("{name} entries must be ≥ 1"));
            }
        }
        if self.tool.embed_dim == 0 {
            errs.push("tool.embed_dim must be ≥ 1".into());
        }
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be > 0, got {v}"));
            }
        };
        positive("pretrain.lr", self.pretrain.lr);
        positive("warmup.lr", self.warmup.lr);
        if self.pretrain.batch == 0 || self.warmup.batch == 0 {
            errs.push("pretrain.batch and warmup.batch must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup.noise) {
            errs.push(format!("warmup.noise must lie in [0, 1], got {}", self.warmup.noise));
        }
        if self.warmup.validity_scenes == 0 {
            errs.push("warmup.validity_scenes must be ≥ 1".into());
        }
        errs.extend(self.train.validate().into_iter().map(|e| format!("train.{e}")));
        errs
    }

    pub fn models(&self) -> Models {
        Models::new(&self.env, &self.policy, &self.tool)
    }

    /// Hash of the sections that shape parameters and scenes.
    pub fn model_hash(&self) -> String {
        hash_json(&json!({ "env": self.env, "policy": self.policy, "tool": self.tool }))
    }

    /// Hash stamped into ω₀.
    pub fn pretrain_hash(&self) -> String {
        hash_json(&json!({ "model": self.model_hash(), "pretrain": self.pretrain }))
    }

    /// Hash stamped into θ₀.
    pub fn warmup_hash(&self) -> String {
        hash_json(&json!({ "model": self.model_hash(), "warmup": self.warmup }))
    }

    /// Hash stamped into training checkpoints (covers mode and seed).
    pub fn train_hash(&self) -> String {
        hash_json(&json!({
            "model": self.model_hash(),
            "pretrain": self.pretrain,
            "warmup": self.warmup,
            "train": self.train,
        }))
    }

    pub fn workdir(&self) -> PathBuf {
        match &self.paths.workdir {
            Some(w) => PathBuf::from(w),
            None => std::env::var_os(WORKDIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
        }
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            self.workdir().join(p)
        }
    }

    pub fn omega0_path(&self) -> PathBuf {
        self.resolve(&self.paths.omega0)
    }

    pub fn theta0_path(&self) -> PathBuf {
        self.resolve(&self.paths.theta0)
    }

    pub fn buffer_path(&self) -> PathBuf {
        self.resolve(&self.train.bto.buffer_path)
    }

    pub fn run_dir(&self) -> PathBuf {
        run_dir(&self.workdir(), self.train.mode, self.train.seed)
    }
}

fn hash_json(v: &Value) -> String {
    let digest = Sha256::digest(v.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Parses a config document with `--set key.path=value` overrides applied.
///
/// Unknown keys, type mismatches and constraint violations are all collected
/// into one [`Error::Config`].
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: Value = if text.trim().is_empty() {
        Value::Object(Map::new())
    } else {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?
    };
    let mut errs = Vec::new();
    for o in overrides {
        if let Err(e) = apply_override(&mut doc, o) {
            errs.push(e);
        }
    }
    let template = serde_json::to_value(RunConfig::default())?;
    check_shape("", &doc, &template, &mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    Ok(cfg)
}

/// Reads and parses a config file; `None` gives the defaults plus overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

fn apply_override(doc: &mut Value, spec: &str) -> std::result::Result<(), String> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| format!("override `{spec}` is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| format!("override `{key}`: `{}` is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Err(format!("override `{spec}` has an empty key"))
}

fn check_shape(path: &str, given: &Value, template: &Value, errs: &mut Vec<String>) {
    let here = if path.is_empty() { "<root>" } else { path };
    match template {
        Value::Object(t) => {
            let Some(g) = given.as_object() else {
                errs.push(format!("{here}: expected an object"));
                return;
            };
            for (k, v) in g {
                let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match t.get(k) {
                    Some(tv) => check_shape(&child, v, tv, errs),
                    None => errs.push(format!("unknown key `{child}`")),
                }
            }
        }
        // optional field: checked by deserialization
        Value::Null => {}
        Value::Bool(_) if !given.is_boolean() => errs.push(format!("{here}: expected a boolean")),
        Value::String(_) if !given.is_string() => errs.push(format!("{here}: expected a string")),
        Value::Number(n) => {
            if n.is_u64() && !given.is_u64() {
                errs.push(format!("{here}: expected a non-negative integer"));
            } else if !given.is_number() {
                errs.push(format!("{here}: expected a number"));
            }
        }
        Value::Array(t) => match given.as_array() {
            Some(g) if g.len() == t.len() => {
                for (i, (gv, tv)) in g.iter().zip(t).enumerate() {
                    check_shape(&format!("{path}[{i}]"), gv, tv, errs);
                }
            }
            _ => errs.push(format!("{here}: expected an array of {} entries", t.len())),
        },
        _ => {}
    }
}

/// Exclusive writer lock on a workdir, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                Err(Error::State(format!(
                    "workdir {} is locked by process {}; remove {} if that process is gone",
                    workdir.display(),
                    holder.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn require(path: &Path, command: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite { artifact: path.to_path_buf(), command })
    }
}

fn start_checkpoint(mode: &str, seed: u64, hash: String, params: NamedParams) -> Checkpoint {
    Checkpoint { meta: CheckpointMeta { mode: mode.into(), epoch: 0, seed, config_hash: hash, metric: None, tensors: 0 }, params }
}

/// Loads θ₀ and ω₀, naming the producing command when one is missing.
pub fn load_start(cfg: &RunConfig) -> Result<StartPoint> {
    let (o, t) = (cfg.omega0_path(), cfg.theta0_path());
    require(&o, "pretrain-tool")?;
    require(&t, "warmup-policy")?;
    let omega0 = Checkpoint::load(&o, Some(&cfg.pretrain_hash()))?.tool_params();
    let theta0 = Checkpoint::load(&t, Some(&cfg.warmup_hash()))?.policy_params();
    Ok(StartPoint { theta0, omega0 })
}

/// `pretrain-tool`: ω₀ on source-convention scenes.
pub fn cmd_pretrain_tool(cfg: &RunConfig) -> Result<Value> {
    let _lock = WorkdirLock::acquire(&cfg.workdir())?;
    let models = cfg.models();
    let data = pretrain::tool_dataset(&cfg.env, &cfg.pretrain)?;
    let init = models.tool.init(cfg.pretrain.seed);
    let (omega0, curve) = pretrain::pretrain_tool(&models.tool, &init, &data, &cfg.pretrain, cfg.train.grad_clip_norm)?;
    let held_out = pretrain::tool_dataset(&cfg.env, &PretrainConfig { seed: cfg.pretrain.seed ^ 0x5eed, scenes: 128, ..cfg.pretrain.clone() })?;
    let source_iou = pretrain::mean_tool_iou(&models.tool, &omega0, held_out.iter().map(|(s, p)| (s, p)), false)?;
    let path = cfg.omega0_path();
    start_checkpoint("pretrain_tool", cfg.pretrain.seed, cfg.pretrain_hash(), omega0).save(&path)?;
    Ok(json!({
        "command": "pretrain-tool",
        "artifact": path,
        "final_loss": curve.losses.last(),
        "held_out_source_iou": source_iou,
    }))
}

/// `warmup-policy`: θ₀ by imitation, gated on validity.
pub fn cmd_warmup_policy(cfg: &RunConfig) -> Result<Value> {
    let _lock = WorkdirLock::acquire(&cfg.workdir())?;
    let models = cfg.models();
    let init = models.policy.init(cfg.warmup.seed);
    let (theta0, curve, rate) =
        pretrain::warmup_policy_checked(&models.policy, &init, &cfg.env, &cfg.warmup, cfg.train.grad_clip_norm)?;
    let path = cfg.theta0_path();
    start_checkpoint("warmup_policy", cfg.warmup.seed, cfg.warmup_hash(), theta0).save(&path)?;
    Ok(json!({
        "command": "warmup-policy",
        "artifact": path,
        "final_loss": curve.losses.last(),
        "validity_rate": rate,
    }))
}

/// `build-buffer`: reference-policy rollout groups for the bootstrapping stage.
pub fn cmd_build_buffer(cfg: &RunConfig) -> Result<Value> {
    let _lock = WorkdirLock::acquire(&cfg.workdir())?;
    let start = load_start(cfg)?;
    let models = cfg.models();
    let sampler = Sampler {
        policy: &models.policy,
        theta: &start.theta0,
        theta_ref: &start.theta0,
        tool: &models.tool,
        omega: &start.omega0,
        filter_enabled: true,
        threshold: cfg.train.threshold,
    };
    let buffer = build_replay_buffer(
        &sampler,
        &cfg.env,
        Domain::Target,
        cfg.train.scenes_per_epoch,
        cfg.train.bto.passes,
        cfg.train.buffer_group_size(),
        cfg.train.seed,
        &cfg.paths.theta0,
    )?;
    let path = cfg.buffer_path();
    buffer.save(&path)?;
    Ok(json!({
        "command": "build-buffer",
        "artifact": path,
        "groups": buffer.groups.len(),
        "group_size": buffer.header.group_size,
    }))
}

/// `train`: one regime end to end under `{mode}/{seed}/`.
pub fn cmd_train(cfg: &RunConfig) -> Result<Value> {
    let _lock = WorkdirLock::acquire(&cfg.workdir())?;
    let start = load_start(cfg)?;
    let buffer = if cfg.train.mode.bootstrapped() {
        let p = cfg.buffer_path();
        require(&p, "build-buffer")?;
        Some(ReplayBuffer::load(&p, &cfg.env.hash_hex())?)
    } else {
        None
    };
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    atomic_write(&dir.join("config.json"), (serde_json::to_string_pretty(cfg)? + "\n").as_bytes())?;
    let out = RunOutput { dir: dir.clone(), config_hash: cfg.train_hash() };
    let run = run_mode(&cfg.models(), &cfg.train, &start, buffer.as_ref(), Some(&out))?;
    Ok(json!({
        "command": "train",
        "mode": run.mode,
        "seed": run.seed,
        "run_dir": dir,
        "selected_epoch": run.selected.epoch,
        "selected_metric": run.selected.metric,
        "giou": run.selected_report.giou,
        "ciou": run.selected_report.ciou,
        "bto_wall_ms": run.bto.as_ref().map(|b| b.wall_ms),
    }))
}

/// Scene split scored by `eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

/// `eval`: greedy evaluation of a training checkpoint.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split, scenes: usize) -> Result<EvalReport> {
    let bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes, checkpoint)?;
    // the checkpoint's own mode and seed take part in the hash
    let mut cfg = cfg.clone();
    cfg.train.mode = Mode::parse(&ckpt.meta.mode)?;
    cfg.train.seed = ckpt.meta.seed;
    let expected = cfg.train_hash();
    if ckpt.meta.config_hash != expected {
        return Err(Error::format(
            checkpoint,
            format!("config hash {} in checkpoint but run config hashes to {expected}", ckpt.meta.config_hash),
        ));
    }
    let models = cfg.models();
    let scene_list = match split {
        Split::Validation => validation_scenes(&cfg.env, &cfg.train)?,
        Split::Test => test_scenes(&cfg.env, cfg.train.seed, scenes)?,
    };
    evaluate(
        &models.policy,
        &ckpt.policy_params(),
        &models.tool,
        &ckpt.tool_params(),
        &scene_list,
        cfg.train.mode.filter_enabled(),
    )
}

/// `oracle-check`: the exact-enumeration suite.
pub fn cmd_oracle_check(seed: u64, instances: usize) -> Result<Vec<OracleCheck>> {
    oracle_suite(seed, instances)
}

/// Single-line machine-readable error for stderr.
pub fn error_json(e: &Error) -> String {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    match e {
        Error::MissingPrerequisite { artifact, command } => {
            v["artifact"] = json!(artifact);
            v["command"] = json!(command);
        }
        Error::Config(list) => v["violations"] = json!(list),
        Error::Format { path, .. } | Error::Io { path, .. } => v["path"] = json!(path),
        _ => {}
    }
    v.to_string()
}
