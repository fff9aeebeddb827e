//! Behavior-clone the shortest-path expert on a handful of scenes and watch
//! the greedy validation success rate climb.

use std::collections::HashMap;
use std::sync::Arc;

use gridnav::optim::AdamWConfig;
use gridnav::policy::{save_checkpoint, Mode, OptimizerState, PolicyDims, PolicyParams};
use gridnav::sim_client::LocalSimClient;
use gridnav::taskgen::{generate_episode, generate_scene, EpisodeGenConfig, SceneGenConfig};
use gridnav::train_il::{train_il, ILConfig};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("gridnav-example-il");
    std::fs::create_dir_all(&dir)?;

    let mut scenes = HashMap::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let gen = EpisodeGenConfig::default();
    for seed in 0..6u64 {
        let scene = generate_scene(seed, &SceneGenConfig::default())?;
        scene.save(&dir.join(format!("{}.scene", scene.scene_id)))?;
        for e in 0..40u64 {
            train.push(generate_episode(&scene, seed * 1000 + e, &gen)?);
        }
        for e in 0..5u64 {
            val.push(generate_episode(&scene, 900_000 + seed * 1000 + e, &gen)?);
        }
        scenes.insert(scene.scene_id.clone(), Arc::new(scene));
    }
    println!("{} train episodes, {} validation episodes", train.len(), val.len());

    let dims = PolicyDims {
        enc_hidden: 64,
        hidden: 64,
        ..Default::default()
    };
    let mut params = PolicyParams::init(dims, 0);
    let mut opt = OptimizerState::fresh(params.data.len());
    let cfg = ILConfig {
        mode: Mode::MultiTurn,
        steps: 300,
        batch_size: 16,
        optimizer: AdamWConfig {
            lr: 3e-3,
            weight_decay: 1e-4,
            ..Default::default()
        },
        seed: 0,
        val_every: 75,
        val_episodes: val.len(),
    };

    let client = LocalSimClient::new(dir.clone(), 8);
    train_il(
        &mut params,
        &mut opt,
        &scenes,
        &train,
        Some((&client, &val)),
        &cfg,
        |line| {
            if line.step % 25 == 0 || line.val_sr.is_some() {
                println!(
                    "step {:>4}  nll {:.3}{}",
                    line.step,
                    line.loss,
                    line.val_sr
                        .map(|s| format!("  val_sr {s:.2}"))
                        .unwrap_or_default()
                );
            }
        },
    )?;

    let ckpt = dir.join("il.ckpt");
    save_checkpoint(&params, &opt, cfg.mode, &ckpt)?;
    println!("checkpoint saved to {}", ckpt.display());
    Ok(())
}
