//! The bootstrapping stage on its own: roll the reference policy out once
//! into a replay buffer, then fit the tool to the buffer with softmax(R/β)
//! weights and keep the epoch with the best validation reward.
//!
//! `cargo run --release --example bootstrap -- [seed]`

use std::time::Instant;

use bgrto::env::{Domain, EnvConfig};
use bgrto::models::{PolicyConfig, ToolConfig};
use bgrto::objectives::bto_weights;
use bgrto::pretrain::{self, PretrainConfig, WarmupConfig};
use bgrto::rollout::{build_replay_buffer, ReplayBuffer, Sampler};
use bgrto::schedules::{run_bto_stage, validation_scenes, Mode, Models, TrainConfig};

fn main() -> bgrto::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let env = EnvConfig::default();
    let models = Models::new(&env, &PolicyConfig::default(), &ToolConfig::default());
    let start = pretrain::reference_start(
        &models,
        &PretrainConfig { seed, ..Default::default() },
        &WarmupConfig { seed, ..Default::default() },
        1.0,
    )?;
    let cfg = TrainConfig { mode: Mode::BGrto, seed, ..TrainConfig::default() };

    let t = Instant::now();
    let sampler = Sampler {
        policy: &models.policy,
        theta: &start.theta0,
        theta_ref: &start.theta0,
        tool: &models.tool,
        omega: &start.omega0,
        filter_enabled: true,
        threshold: cfg.threshold,
    };
    let buffer = build_replay_buffer(&sampler, &env, Domain::Target, cfg.scenes_per_epoch, cfg.bto.passes, cfg.buffer_group_size(), seed, "theta0")?;
    println!("buffer: {} groups of {} in {} ms", buffer.groups.len(), buffer.header.group_size, t.elapsed().as_millis());

    // the buffer is plain JSONL and survives a round trip bit for bit
    let dir = tempfile::tempdir().map_err(|e| bgrto::Error::Io { path: "tempdir".into(), source: e })?;
    let path = dir.path().join("buffer.jsonl");
    buffer.save(&path)?;
    assert_eq!(ReplayBuffer::load(&path, &env.hash_hex())?, buffer);

    // how concentrated the weights are at the configured temperature
    let mut top = 0.0;
    for g in &buffer.groups {
        let scene = g.scene(&env)?;
        let rewards: Vec<f64> = g
            .rollouts
            .iter()
            .map(|r| {
                let prompt = models.policy.grammar.parse(&r.tokens)?;
                Ok(bgrto::objectives::compute_reward(&scene, prompt.as_ref(), &models.tool, &start.omega0, true, cfg.threshold)?.total)
            })
            .collect::<bgrto::Result<_>>()?;
        top += bto_weights(&rewards, cfg.bto.beta)?.weights.iter().cloned().fold(0.0, f64::max);
    }
    println!("mean largest weight per group at beta {}: {:.3}", cfg.bto.beta, top / buffer.groups.len() as f64);

    let val = validation_scenes(&env, &cfg)?;
    let out = run_bto_stage(&models, &cfg, &buffer, &start.omega0, &start.theta0, &val)?;
    println!("stage: {:.0} ms", out.wall_ms);
    for (rec, loss) in out.records.iter().zip(std::iter::once(None).chain(out.losses.iter().map(Some))) {
        let loss = loss.map_or("-".to_string(), |l| format!("{l:.4}"));
        println!("  epoch {:>2}  BTO loss {:>8}  validation reward {:.4}", rec.epoch, loss, rec.metric);
    }
    println!("selected epoch {}", out.selected.epoch);
    Ok(())
}
