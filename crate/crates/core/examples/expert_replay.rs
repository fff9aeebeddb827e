//! Replay every generated expert through the simulator protocol and verify
//! it reaches the goal: the dataset contract that makes imitation learning
//! trustworthy.

use gridnav::sim_client::{create_request, LocalSimClient, SimClient};
use gridnav::taskgen::{generate_episode, generate_scene, EpisodeGenConfig, SceneGenConfig};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("gridnav-example-replay");
    std::fs::create_dir_all(&dir)?;

    let mut episodes = Vec::new();
    for seed in 0..5u64 {
        let scene = generate_scene(seed, &SceneGenConfig::default())?;
        scene.save(&dir.join(format!("{}.scene", scene.scene_id)))?;
        for e in 0..20u64 {
            episodes.push(generate_episode(&scene, seed * 100 + e, &EpisodeGenConfig::default())?);
        }
    }

    let client = LocalSimClient::new(dir, 8);
    let mut successes = 0usize;
    for (i, ep) in episodes.iter().enumerate() {
        let sid = format!("replay{i}");
        let mut resp = client.create_episode(&create_request(ep, &sid))?;
        for action in &ep.expert_actions {
            resp = client.step(&sid, *action)?;
        }
        client.close_episode(&sid)?;
        assert!(resp.done, "expert must terminate with STOP");
        assert_eq!(resp.steps_taken, ep.expert_primitive_len);
        successes += resp.success as usize;
    }
    println!(
        "expert replay: {successes}/{} episodes reached the goal",
        episodes.len()
    );
    assert_eq!(successes, episodes.len());
    Ok(())
}
