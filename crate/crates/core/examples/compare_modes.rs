//! Trains GRPO, GRTO, B-GRTO and B-GRPO from one shared starting point and
//! prints their validation curves.
//!
//! `cargo run --release --example compare_modes -- [seed] [epochs]`

use std::time::Instant;

use bgrto::env::{Domain, EnvConfig};
use bgrto::models::{PolicyConfig, ToolConfig};
use bgrto::pretrain::{self, PretrainConfig, WarmupConfig};
use bgrto::rollout::{build_replay_buffer, Sampler};
use bgrto::schedules::{run_mode, Mode, Models, TrainConfig};

fn main() -> bgrto::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seed = args.first().copied().unwrap_or(0);
    let env = EnvConfig::default();
    let models = Models::new(&env, &PolicyConfig::default(), &ToolConfig::default());
    let t = Instant::now();
    let start = pretrain::reference_start(
        &models,
        &PretrainConfig { seed, ..Default::default() },
        &WarmupConfig { seed, ..Default::default() },
        1.0,
    )?;
    println!("reference start ready in {:.1}s", t.elapsed().as_secs_f64());

    let mut base = TrainConfig { seed, ..TrainConfig::default() };
    if let Some(&e) = args.get(1) {
        base.epochs = e as usize;
    }
    let t = Instant::now();
    let sampler = Sampler {
        policy: &models.policy,
        theta: &start.theta0,
        theta_ref: &start.theta0,
        tool: &models.tool,
        omega: &start.omega0,
        filter_enabled: true,
        threshold: base.threshold,
    };
    let buffer = build_replay_buffer(&sampler, &env, Domain::Target, base.scenes_per_epoch, base.bto.passes, base.buffer_group_size(), seed, "memory")?;
    println!("buffer: {} groups in {:.1}s", buffer.groups.len(), t.elapsed().as_secs_f64());

    for mode in [Mode::Grpo, Mode::Grto, Mode::BGrto, Mode::BGrpo] {
        let cfg = TrainConfig { mode, ..base.clone() };
        let t = Instant::now();
        let run = run_mode(&models, &cfg, &start, Some(&buffer), None)?;
        let curve: Vec<String> = run.epochs.iter().map(|e| format!("{:.3}", e.report.giou)).collect();
        println!(
            "{:>7}: selected epoch {:>2} gIoU {:.4} cIoU {:.4} | {:.1}s, {:.0} ms/epoch",
            mode.as_str(),
            run.selected.epoch,
            run.selected_report.giou,
            run.selected_report.ciou,
            t.elapsed().as_secs_f64(),
            run.mean_epoch_ms
        );
        if let Some(b) = &run.bto {
            let m: Vec<String> = b.records.iter().map(|r| format!("{:.3}", r.metric)).collect();
            println!("         bto {:.0} ms, val reward {}", b.wall_ms, m.join(" "));
        }
        println!("         gIoU by epoch {}", curve.join(" "));
    }
    Ok(())
}
