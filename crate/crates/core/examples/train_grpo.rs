//! Two-stage training in miniature: a quick imitation bootstrap, then GRPO
//! fine-tuning with dynamic sampling and dynamic early stopping, printing
//! the per-step reward and success series.

use std::collections::HashMap;
use std::sync::Arc;

use gridnav::optim::AdamWConfig;
use gridnav::policy::{Mode, OptimizerState, PolicyDims, PolicyParams};
use gridnav::sim_client::LocalSimClient;
use gridnav::taskgen::{generate_episode, generate_scene, EpisodeGenConfig, SceneGenConfig};
use gridnav::train_il::{greedy_success_rate, train_il, ILConfig};
use gridnav::train_rl::{train_rl, RLConfig, RewardKind};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("gridnav-example-grpo");
    std::fs::create_dir_all(&dir)?;

    let mut scenes = HashMap::new();
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    let gen = EpisodeGenConfig::default();
    for seed in 0..6u64 {
        let scene = generate_scene(seed, &SceneGenConfig::default())?;
        scene.save(&dir.join(format!("{}.scene", scene.scene_id)))?;
        for e in 0..40u64 {
            train.push(generate_episode(&scene, seed * 1000 + e, &gen)?);
        }
        for e in 0..8u64 {
            heldout.push(generate_episode(&scene, 700_000 + seed * 1000 + e, &gen)?);
        }
        scenes.insert(scene.scene_id.clone(), Arc::new(scene));
    }

    let dims = PolicyDims {
        enc_hidden: 64,
        hidden: 64,
        ..Default::default()
    };
    let mut params = PolicyParams::init(dims, 0);
    let mut opt = OptimizerState::fresh(params.data.len());
    let il = ILConfig {
        steps: 300,
        val_every: 0,
        ..Default::default()
    };
    println!("imitation bootstrap ({} steps)...", il.steps);
    train_il(&mut params, &mut opt, &scenes, &train, None, &il, |_| {})?;

    let client = LocalSimClient::new(dir, 8);
    let before = greedy_success_rate(&client, &params, &heldout, Mode::MultiTurn, "pre")?;
    println!("held-out SR after IL: {before:.3}\n");

    let rl = RLConfig {
        steps: 60,
        optimizer: AdamWConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            ..Default::default()
        },
        reward: RewardKind::Soft,
        ..Default::default()
    };
    let mut opt = OptimizerState::fresh(params.data.len());
    train_rl(&mut params, &mut opt, &client, &train, &rl, |line| {
        if line.step % 5 == 0 {
            println!(
                "step {:>3}  reward {:.3}  train_sr {:.3}  len {:5.1}  early_stop {:.2}  degenerate {}  resampled {}",
                line.step,
                line.reward_mean,
                line.sr_train,
                line.episode_len_mean,
                line.early_stop_rate,
                line.degenerate_groups,
                line.resampled_groups
            );
        }
    })?;

    let after = greedy_success_rate(&client, &params, &heldout, Mode::MultiTurn, "post")?;
    println!("\nheld-out SR after GRPO: {after:.3} (delta {:+.3})", after - before);
    Ok(())
}
