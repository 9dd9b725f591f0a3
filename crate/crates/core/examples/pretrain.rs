//! Pretrains the tool on the source convention and warms up the policy on
//! noisy demonstrations, then reports how both starting points behave.

use std::time::Instant;

use bgrto::env::EnvConfig;
use bgrto::models::{PolicyConfig, PolicyNet, ToolConfig, ToolNet};
use bgrto::pretrain::{self, PretrainConfig, WarmupConfig};

fn main() -> bgrto::Result<()> {
    let env = EnvConfig::default();
    let tool = ToolNet::new(&env, &ToolConfig::default());
    let cfg = PretrainConfig::default();
    let t = Instant::now();
    let data = pretrain::tool_dataset(&env, &cfg)?;
    let (omega0, curve) = pretrain::pretrain_tool(&tool, &tool.init(cfg.seed), &data, &cfg, 1.0)?;
    println!("tool pretraining: {:.1}s, loss {:.4} -> {:.4}", t.elapsed().as_secs_f64(), curve.losses[0], curve.trailing_mean(1));

    let held_out = pretrain::tool_dataset(&env, &PretrainConfig { seed: 99, box_jitter: 0, ..cfg.clone() })?;
    let items = held_out.iter().map(|(s, p)| (s, p));
    println!("held-out source IoU: {:.4}", pretrain::mean_tool_iou(&tool, &omega0, items, false)?);

    let policy = PolicyNet::new(&env, &PolicyConfig::default());
    let wcfg = WarmupConfig::default();
    let t = Instant::now();
    let (_theta0, curve, rate) = pretrain::warmup_policy_checked(&policy, &policy.init(wcfg.seed), &env, &wcfg, 1.0)?;
    println!(
        "policy warm-up: {:.1}s, nll {:.4} -> {:.4}, validity {:.3}",
        t.elapsed().as_secs_f64(),
        curve.losses[0],
        curve.trailing_mean(1),
        rate
    );
    Ok(())
}
