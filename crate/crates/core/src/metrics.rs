//! gIoU / cIoU evaluation and the metrics CSV.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{GridScene, ToolPrompt};
use crate::error::{Error, Result};
use crate::grad::NamedParams;
use crate::models::{PolicyNet, ToolNet};
use crate::objectives::{intersection_union, predicted_mask, RewardBreakdown};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample_iou: Vec<f64>,
    pub giou: f64,
    pub ciou: f64,
    pub mean_reward: f64,
    pub validity_rate: f64,
}

impl EvalReport {
    /// Mean of gIoU and cIoU, the checkpoint-selection metric.
    pub fn selection_metric(&self) -> f64 {
        0.5 * (self.giou + self.ciou)
    }
}

/// Per-sample statistics feeding [`EvalReport`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOutcome {
    pub intersection: usize,
    pub union: usize,
    pub valid: bool,
    pub reward: f64,
}

impl SampleOutcome {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Aggregates outcomes; invalid samples must already carry I = 0 against a non-empty union.
pub fn aggregate(outcomes: &[SampleOutcome]) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(Error::usage("evaluation over an empty scene list"));
    }
    let n = outcomes.len() as f64;
    let per_sample_iou: Vec<f64> = outcomes.iter().map(SampleOutcome::iou).collect();
    let (i, u) = outcomes.iter().fold((0usize, 0usize), |(i, u), o| (i + o.intersection, u + o.union));
    Ok(EvalReport {
        giou: per_sample_iou.iter().sum::<f64>() / n,
        ciou: if u == 0 { 1.0 } else { i as f64 / u as f64 },
        mean_reward: outcomes.iter().map(|o| o.reward).sum::<f64>() / n,
        validity_rate: outcomes.iter().filter(|o| o.valid).count() as f64 / n,
        per_sample_iou,
    })
}

/// Greedy-decodes each scene, runs the tool and scores against the scene's official mask.
pub fn evaluate(
    policy: &PolicyNet,
    theta: &NamedParams,
    tool: &ToolNet,
    omega: &NamedParams,
    scenes: &[GridScene],
    filter_enabled: bool,
) -> Result<EvalReport> {
    let prompts = greedy_prompts(policy, theta, scenes)?;
    evaluate_prompts(tool, omega, scenes, &prompts, filter_enabled)
}

/// Greedy prompts of a fixed policy, reusable across tool evaluations.
pub fn greedy_prompts(policy: &PolicyNet, theta: &NamedParams, scenes: &[GridScene]) -> Result<Vec<Option<ToolPrompt>>> {
    scenes.iter().map(|scene| policy.grammar.parse(&policy.greedy(theta, scene)?.tokens)).collect()
}

/// Scores given prompts (`None` = invalid output) with the tool.
pub fn evaluate_prompts(
    tool: &ToolNet,
    omega: &NamedParams,
    scenes: &[GridScene],
    prompts: &[Option<ToolPrompt>],
    filter_enabled: bool,
) -> Result<EvalReport> {
    if prompts.len() != scenes.len() {
        return Err(Error::usage("one prompt slot per scene expected"));
    }
    let outcomes = scenes
        .iter()
        .zip(prompts)
        .map(|(scene, prompt)| {
            let gt = scene.official_gt();
            match prompt {
                None => Ok(SampleOutcome { intersection: 0, union: gt.count(), valid: false, reward: 0.0 }),
                Some(prompt) => {
                    let mask = predicted_mask(&tool.logits(omega, scene, prompt)?, prompt, filter_enabled, 0.5);
                    let (intersection, union) = intersection_union(&mask, gt)?;
                    let o = SampleOutcome { intersection, union, valid: true, reward: 0.0 };
                    Ok(SampleOutcome { reward: RewardBreakdown::valid(o.iou()).total, ..o })
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&outcomes)
}

pub const CSV_COLUMNS: [&str; 14] = [
    "step",
    "epoch",
    "mode",
    "mean_reward",
    "validity_rate",
    "giou",
    "ciou",
    "policy_obj",
    "tool_loss",
    "kl",
    "grad_norm_policy",
    "grad_norm_tool",
    "wall_ms",
    "seed",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub mode: String,
    pub mean_reward: f64,
    pub validity_rate: f64,
    pub giou: f64,
    pub ciou: f64,
    pub policy_obj: f64,
    pub tool_loss: f64,
    pub kl: f64,
    pub grad_norm_policy: f64,
    pub grad_norm_tool: f64,
    pub wall_ms: f64,
    pub seed: u64,
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_float(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let s = format!("{:.16e}", v);
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        let plain = format!("{:.*}", decimals, v);
        if plain.contains('.') {
            plain.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            plain
        }
    } else {
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{mantissa}e{exp}")
    }
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let f = fmt_float;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.step,
            self.epoch,
            self.mode,
            f(self.mean_reward),
            f(self.validity_rate),
            f(self.giou),
            f(self.ciou),
            f(self.policy_obj),
            f(self.tool_loss),
            f(self.kl),
            f(self.grad_norm_policy),
            f(self.grad_norm_tool),
            f(self.wall_ms),
            self.seed
        )
    }
}

/// Append-only CSV sink; rows are buffered and flushed per epoch.
pub struct MetricsSink {
    path: PathBuf,
    pending: String,
}

impl MetricsSink {
    /// Creates (or truncates) the file and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, CSV_COLUMNS.join(",") + "\n").map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), pending: String::new() })
    }

    pub fn emit(&mut self, row: &MetricsRow) {
        self.pending.push_str(&row.to_csv());
    }

    /// Appends buffered rows; on failure the file is cut back to its previous length.
    pub fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let io = |e| Error::io(&self.path, e);
        let mut f = fs::OpenOptions::new().append(true).open(&self.path).map_err(io)?;
        let before = f.metadata().map_err(io)?.len();
        if let Err(e) = f.write_all(self.pending.as_bytes()).and_then(|_| f.flush()) {
            let _ = f.set_len(before);
            return Err(io(e));
        }
        self.pending.clear();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn o(i: usize, u: usize) -> SampleOutcome {
        SampleOutcome { intersection: i, union: u, valid: true, reward: 0.0 }
    }

    #[test]
    fn metric_cases() {
        let r = aggregate(&[o(2, 4), o(4, 4)]).unwrap();
        assert_eq!(r.giou, 0.75);
        assert_eq!(r.ciou, 0.75);
        let r = aggregate(&[o(1, 2), o(10, 10)]).unwrap();
        assert_eq!(r.giou, 0.75);
        assert_eq!(r.ciou, 11.0 / 12.0);
        let single = aggregate(&[o(3, 7)]).unwrap();
        assert_eq!(single.giou, single.ciou);
        // both-empty sample: IoU 1 for gIoU, nothing added to cIoU sums
        let r = aggregate(&[o(0, 0), o(1, 2)]).unwrap();
        assert_eq!(r.giou, 0.75);
        assert_eq!(r.ciou, 0.5);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 123456.789, 1e-9, -2.5e20, 0.75, 1.0, 42.0] {
            let s = fmt_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt_float(0.75), "0.75");
        assert_eq!(fmt_float(3.0), "3");
    }

    #[test]
    fn sink_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut sink = MetricsSink::create(&path).unwrap();
        let row = MetricsRow {
            step: 1,
            epoch: 1,
            mode: "grpo".into(),
            mean_reward: 0.5,
            validity_rate: 1.0,
            giou: 0.25,
            ciou: 0.5,
            policy_obj: -0.1,
            tool_loss: 0.0,
            kl: 0.0,
            grad_norm_policy: 1.5,
            grad_norm_tool: 0.0,
            wall_ms: 3.0,
            seed: 7,
        };
        for e in 0..3 {
            for _ in 0..4 {
                sink.emit(&MetricsRow { epoch: e, ..row.clone() });
            }
            sink.flush().unwrap();
        }
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert_eq!(text.matches("step,").count(), 1);
        assert!(text.ends_with('\n') && !text.contains('\r'));
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_order_invariant(pairs in prop::collection::vec((0usize..50, 1usize..50), 1..20)) {
            let outcomes: Vec<SampleOutcome> = pairs.iter().map(|&(i, u)| o(i.min(u), u)).collect();
            let r = aggregate(&outcomes).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.giou) && (0.0..=1.0).contains(&r.ciou));
            let mut rev = outcomes.clone();
            rev.reverse();
            let r2 = aggregate(&rev).unwrap();
            prop_assert!((r.giou - r2.giou).abs() < 1e-12);
            prop_assert_eq!(r.ciou, r2.ciou);
        }

        #[test]
        fn equal_unions_make_metrics_agree(is in prop::collection::vec(0usize..=9, 1..20)) {
            let outcomes: Vec<SampleOutcome> = is.iter().map(|&i| o(i, 9)).collect();
            let r = aggregate(&outcomes).unwrap();
            prop_assert!((r.giou - r.ciou).abs() < 1e-12);
        }
    }
}
