//! Group sampling and the persisted replay buffer of reference-policy groups.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{generate_scene, Domain, EnvConfig, GridScene, ToolPrompt};
use crate::error::{Error, Result};
use crate::grad::NamedParams;
use crate::models::{PolicyNet, ToolNet};
use crate::objectives::{bto_weights, compute_advantages, compute_reward, AdvantageSet, BtoWeights, RewardBreakdown};
use crate::rng;

pub const BUFFER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    pub logprobs_old: Vec<f64>,
    pub logprobs_ref: Vec<f64>,
    pub valid: bool,
    pub prompt: Option<ToolPrompt>,
    pub reward: RewardBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub scene_seed: u64,
    pub domain: Domain,
    pub rollouts: Vec<Rollout>,
    pub advantages: Option<AdvantageSet>,
    pub bto: Option<BtoWeights>,
}

impl Group {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward.total).collect()
    }

    pub fn validity_rate(&self) -> f64 {
        self.rollouts.iter().filter(|r| r.valid).count() as f64 / self.rollouts.len() as f64
    }
}

/// Everything needed to sample and score rollouts.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    pub policy: &'a PolicyNet,
    /// Sampling parameters (π_old).
    pub theta: &'a NamedParams,
    /// Reference parameters θ₀.
    pub theta_ref: &'a NamedParams,
    pub tool: &'a ToolNet,
    /// Tool parameters used for rewards (ω_old).
    pub omega: &'a NamedParams,
    pub filter_enabled: bool,
    pub threshold: f64,
}

/// Seed of scene `index` in the per-epoch training stream.
pub fn train_scene_seed(run_seed: u64, epoch: usize, index: usize) -> u64 {
    rng::derive_key(run_seed, "train-scene", &[epoch as u64, index as u64])
}

/// Seed of held-out validation scene `index` (shared by all epochs).
pub fn validation_scene_seed(run_seed: u64, index: usize) -> u64 {
    rng::derive_key(run_seed, "validation-scene", &[index as u64])
}

/// Seed of held-out test scene `index`, disjoint from the validation stream.
pub fn test_scene_seed(run_seed: u64, index: usize) -> u64 {
    rng::derive_key(run_seed, "test-scene", &[index as u64])
}

/// Score already sampled token sequences into rollouts.
pub fn score_rollouts(
    s: &Sampler<'_>,
    scene: &GridScene,
    tokens: Vec<Vec<usize>>,
    logprobs_old: Vec<Vec<f64>>,
) -> Result<Vec<Rollout>> {
    let logprobs_ref = s.policy.group_logprobs(s.theta_ref, scene, &tokens)?;
    let grammar = &s.policy.grammar;
    tokens
        .into_iter()
        .zip(logprobs_old)
        .zip(logprobs_ref)
        .map(|((tokens, logprobs_old), logprobs_ref)| {
            let prompt = grammar.parse(&tokens)?;
            let reward = compute_reward(scene, prompt.as_ref(), s.tool, s.omega, s.filter_enabled, s.threshold)?;
            Ok(Rollout { valid: prompt.is_some(), tokens, logprobs_old, logprobs_ref, prompt, reward })
        })
        .collect()
}

/// Samples `g` rollouts on `scene`, scores them and fills advantages.
///
/// Rollout `i` draws from the stream keyed by `(run_seed, "rollout", scene_index, i)`.
pub fn sample_group(s: &Sampler<'_>, scene: &GridScene, g: usize, run_seed: u64, scene_index: u64) -> Result<Group> {
    if g < 2 {
        return Err(Error::usage(format!("group size must be at least 2, got {g}")));
    }
    let mut streams: Vec<_> = (0..g).map(|i| rng::stream(run_seed, "rollout", &[scene_index, i as u64])).collect();
    let samples = s.policy.sample_streams(s.theta, scene, 1.0, &mut streams)?;
    let (tokens, lps) = samples.into_iter().map(|q| (q.tokens, q.logprobs)).unzip();
    let rollouts = score_rollouts(s, scene, tokens, lps)?;
    let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward.total).collect();
    Ok(Group {
        scene_seed: scene.seed,
        domain: scene.domain,
        advantages: Some(compute_advantages(&rewards)?),
        bto: None,
        rollouts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferHeader {
    pub version: u32,
    pub policy_ckpt: String,
    pub env_hash: String,
    pub group_size: usize,
    pub seed: u64,
    /// Number of group lines that follow; lets truncation at a line boundary be detected.
    pub group_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferRollout {
    pub tokens: Vec<usize>,
    pub lp_old: Vec<f64>,
    pub lp_ref: Vec<f64>,
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferGroup {
    pub scene_seed: u64,
    pub domain: Domain,
    pub rollouts: Vec<BufferRollout>,
}

impl BufferGroup {
    pub fn scene(&self, env: &EnvConfig) -> Result<GridScene> {
        generate_scene(self.scene_seed, self.domain, env)
    }
}

impl From<&Group> for BufferGroup {
    fn from(g: &Group) -> Self {
        Self {
            scene_seed: g.scene_seed,
            domain: g.domain,
            rollouts: g
                .rollouts
                .iter()
                .map(|r| BufferRollout {
                    tokens: r.tokens.clone(),
                    lp_old: r.logprobs_old.clone(),
                    lp_ref: r.logprobs_ref.clone(),
                    valid: r.valid,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    pub header: BufferHeader,
    pub groups: Vec<BufferGroup>,
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

impl ReplayBuffer {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for g in &self.groups {
            out.push_str(&serde_json::to_string(g)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_jsonl()?.as_bytes())
    }

    /// Loads and validates a buffer; `env_hash` is the hash of the config in use.
    pub fn load(path: &Path, env_hash: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, env_hash)
    }

    pub fn parse(text: &str, path: &Path, env_hash: &str) -> Result<Self> {
        let bad = |detail: String| Error::format(path, detail);
        if !text.ends_with('\n') {
            return Err(bad("file does not end with a newline (truncated?)".into()));
        }
        let mut lines = text.lines();
        let header: BufferHeader = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| bad(format!("header: {e}")))?;
        if header.version != BUFFER_VERSION {
            return Err(bad(format!("buffer version {} but this build reads {BUFFER_VERSION}", header.version)));
        }
        if header.env_hash != env_hash {
            return Err(bad(format!("env hash {} in buffer but config hashes to {env_hash}", header.env_hash)));
        }
        let mut groups = Vec::with_capacity(header.group_count);
        for (i, line) in lines.enumerate() {
            let g: BufferGroup = serde_json::from_str(line).map_err(|e| bad(format!("group line {}: {e}", i + 1)))?;
            if g.rollouts.len() != header.group_size {
                return Err(bad(format!("group {} has {} rollouts, header says {}", i, g.rollouts.len(), header.group_size)));
            }
            if g.rollouts.iter().any(|r| r.lp_old.len() != r.tokens.len() || r.lp_ref.len() != r.tokens.len()) {
                return Err(bad(format!("group {i} has logprob lists of the wrong length")));
            }
            groups.push(g);
        }
        if groups.len() != header.group_count {
            return Err(bad(format!("{} groups present, header says {}", groups.len(), header.group_count)));
        }
        Ok(Self { header, groups })
    }

    pub fn rollout_count(&self) -> usize {
        self.groups.iter().map(|g| g.rollouts.len()).sum()
    }
}

/// Samples reference-policy groups over `passes` epochs of the training scene stream.
///
/// `s.theta` must be the reference parameters; they are only read.
pub fn build_replay_buffer(
    s: &Sampler<'_>,
    env: &EnvConfig,
    domain: Domain,
    scenes_per_pass: usize,
    passes: usize,
    g_buffer: usize,
    run_seed: u64,
    policy_ckpt: &str,
) -> Result<ReplayBuffer> {
    let mut groups = Vec::with_capacity(scenes_per_pass * passes);
    for pass in 0..passes {
        for i in 0..scenes_per_pass {
            let scene = generate_scene(train_scene_seed(run_seed, pass, i), domain, env)?;
            let index = (pass * scenes_per_pass + i) as u64;
            groups.push(BufferGroup::from(&sample_group(s, &scene, g_buffer, run_seed, index)?));
        }
    }
    Ok(ReplayBuffer {
        header: BufferHeader {
            version: BUFFER_VERSION,
            policy_ckpt: policy_ckpt.to_string(),
            env_hash: env.hash_hex(),
            group_size: g_buffer,
            seed: run_seed,
            group_count: groups.len(),
        },
        groups,
    })
}

/// Re-scores a stored group under the tool parameters `omega` and attaches BTO weights.
pub fn rescore_buffer_group(
    group: &BufferGroup,
    scene: &GridScene,
    policy: &PolicyNet,
    tool: &ToolNet,
    omega: &NamedParams,
    filter_enabled: bool,
    threshold: f64,
    bto_beta: f64,
) -> Result<Group> {
    let rollouts = group
        .rollouts
        .iter()
        .map(|r| {
            let prompt = policy.grammar.parse(&r.tokens)?;
            let reward = compute_reward(scene, prompt.as_ref(), tool, omega, filter_enabled, threshold)?;
            Ok(Rollout {
                tokens: r.tokens.clone(),
                logprobs_old: r.lp_old.clone(),
                logprobs_ref: r.lp_ref.clone(),
                valid: prompt.is_some(),
                prompt,
                reward,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward.total).collect();
    Ok(Group {
        scene_seed: group.scene_seed,
        domain: group.domain,
        advantages: None,
        bto: Some(bto_weights(&rewards, bto_beta)?),
        rollouts,
    })
}
