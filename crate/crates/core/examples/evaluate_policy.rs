//! Evaluate a policy with greedy decoding (no early stopping) and print the
//! standard navigation metrics: NE, SR, OSR, SPL, nDTW.

use std::collections::HashMap;
use std::sync::Arc;

use gridnav::metrics::{aggregate, evaluate_episode, report_csv};
use gridnav::orchestrator::{rollout_episode, RolloutConfig};
use gridnav::policy::{Mode, OptimizerState, PolicyDims, PolicyParams};
use gridnav::sim_client::LocalSimClient;
use gridnav::taskgen::{generate_episode, generate_scene, EpisodeGenConfig, SceneGenConfig};
use gridnav::train_il::{train_il, ILConfig};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("gridnav-example-eval");
    std::fs::create_dir_all(&dir)?;

    let mut scenes = HashMap::new();
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    let gen = EpisodeGenConfig::default();
    for seed in 0..4u64 {
        let scene = generate_scene(seed, &SceneGenConfig::default())?;
        scene.save(&dir.join(format!("{}.scene", scene.scene_id)))?;
        for e in 0..40u64 {
            train.push(generate_episode(&scene, seed * 1000 + e, &gen)?);
        }
        for e in 0..10u64 {
            heldout.push(generate_episode(&scene, 500_000 + seed * 1000 + e, &gen)?);
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
        steps: 250,
        val_every: 0,
        ..Default::default()
    };
    train_il(&mut params, &mut opt, &scenes, &train, None, &il, |_| {})?;

    let client = LocalSimClient::new(dir, 8);
    let cfg = RolloutConfig::greedy_eval(Mode::MultiTurn);
    let mut per_episode = Vec::new();
    for (i, ep) in heldout.iter().enumerate() {
        let t = rollout_episode(&client, &params, ep, &cfg, 0, &format!("eval{i}"))?;
        let m = evaluate_episode(&t.record(), ep, &scenes[&ep.scene_id])?;
        println!(
            "{:<30} NE {:6.2}  SR {}  OSR {}  SPL {:.2}  nDTW {:.2}  ({} steps, {:?})",
            m.episode_id,
            m.ne,
            m.success as u8,
            m.oracle_success as u8,
            m.spl,
            m.ndtw,
            t.primitive_steps,
            t.status
        );
        per_episode.push(m);
    }
    let report = aggregate(per_episode);
    println!(
        "\naggregate over {} episodes:\n  NE {:.3}  SR {:.3}  OSR {:.3}  SPL {:.3}  nDTW {:.3}",
        heldout.len(),
        report.ne_mean,
        report.sr,
        report.osr,
        report.spl_mean,
        report.ndtw_mean
    );
    print!("\nCSV:\n{}", report_csv(&report));
    Ok(())
}
