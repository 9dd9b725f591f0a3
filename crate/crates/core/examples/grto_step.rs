//! One group through the joint update: sample G prompts, score them with the
//! tool, standardize rewards and take a single GRPO step on the policy and a
//! ratio-weighted loss step on the tool.
//!
//! `cargo run --release --example grto_step`

use bgrto::env::{generate_scene, Domain, EnvConfig};
use bgrto::models::{PolicyConfig, ToolConfig};
use bgrto::objectives::seg_loss_value;
use bgrto::optim::{AdamConfig, OptimizerState};
use bgrto::rollout::{sample_group, Sampler};
use bgrto::schedules::{train_step_grto, Models, TrainConfig};

fn main() -> bgrto::Result<()> {
    let env = EnvConfig::default();
    let models = Models::new(&env, &PolicyConfig::default(), &ToolConfig::default());
    let cfg = TrainConfig::default();
    let mut theta = models.policy.init(1);
    let mut omega = models.tool.init(2);
    let theta_ref = theta.clone();
    let scene = generate_scene(7, Domain::Target, &env)?;

    let group = {
        let s = Sampler {
            policy: &models.policy,
            theta: &theta,
            theta_ref: &theta_ref,
            tool: &models.tool,
            omega: &omega,
            filter_enabled: true,
            threshold: cfg.threshold,
        };
        sample_group(&s, &scene, cfg.group_size, cfg.seed, 0)?
    };
    let adv = group.advantages.as_ref().expect("fresh groups carry advantages");
    println!("{:>4} {:>6} {:>8} {:>8}  tokens", "i", "valid", "reward", "adv");
    for (i, (r, a)) in group.rollouts.iter().zip(&adv.advantages).enumerate() {
        println!("{i:>4} {:>6} {:>8.4} {:>8.4}  {:?}", r.valid, r.reward.total, a, r.tokens);
    }

    let losses_before: Vec<Option<f64>> = group
        .rollouts
        .iter()
        .map(|r| match &r.prompt {
            Some(p) => models.tool.logits(&omega, &scene, p).and_then(|lg| seg_loss_value(&lg, scene.official_gt())).map(Some),
            None => Ok(None),
        })
        .collect::<bgrto::Result<_>>()?;

    let mut opt_p = OptimizerState::new(&theta, AdamConfig::default());
    let mut opt_t = OptimizerState::new(&omega, AdamConfig::default());
    let stats = train_step_grto(&models, &cfg, &group, &scene, &mut theta, &mut omega, &mut opt_p, &mut opt_t, cfg.lr_tool)?;
    println!("\npolicy objective {:.6}  kl {:.3e}  tool loss {:.4}", stats.policy_obj, stats.kl, stats.tool_loss);
    println!("grad norms: policy {:.4}, tool {:.4}; max |ratio - 1| = {:.1e}", stats.grad_norm_policy, stats.grad_norm_tool, stats.max_ratio_deviation);

    for (r, before) in group.rollouts.iter().zip(losses_before) {
        if let (Some(p), Some(b)) = (&r.prompt, before) {
            let after = seg_loss_value(&models.tool.logits(&omega, &scene, p)?, scene.official_gt())?;
            println!("seg loss {b:.5} -> {after:.5}");
        }
    }
    Ok(())
}
