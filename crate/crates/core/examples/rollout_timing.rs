//! Measure the two rollout-speed mechanisms in isolation: scene caching
//! with preloading (against a cache-disabled simulator) and dynamic early
//! stopping (against uncapped rollouts).

use gridnav::orchestrator::{announce_next_batch, collect_batch, RolloutConfig};
use gridnav::policy::{Mode, PolicyDims, PolicyParams, TOKEN_EOT, TOKEN_STOP};
use gridnav::sim_client::{LocalSimClient, SimClient};
use gridnav::taskgen::{generate_episode, generate_scene, EpisodeGenConfig, SceneGenConfig};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("gridnav-example-timing");
    std::fs::create_dir_all(&dir)?;

    // big scenes make the disk load + distance-field cost visible
    let scene_cfg = SceneGenConfig {
        width: 160,
        height: 160,
        room_count: 10,
        ..Default::default()
    };
    let mut episodes = Vec::new();
    for seed in 0..6u64 {
        let scene = generate_scene(seed, &scene_cfg)?;
        scene.save(&dir.join(format!("{}.scene", scene.scene_id)))?;
        for e in 0..2u64 {
            episodes.push(generate_episode(&scene, seed * 10 + e, &EpisodeGenConfig::default())?);
        }
    }
    let refs: Vec<&_> = episodes.iter().collect();
    let params = PolicyParams::init(PolicyDims::default(), 7);

    let time_rollouts = |client: &dyn SimClient, cfg: &RolloutConfig, preload: bool| {
        if preload {
            announce_next_batch(client, &refs);
            std::thread::sleep(std::time::Duration::from_millis(200));
        }
        let start = std::time::Instant::now();
        let groups = collect_batch(client, &params, &refs, cfg, 2, 0, "timing", 4).unwrap();
        let steps: u32 = groups
            .iter()
            .flatten()
            .map(|t| t.primitive_steps)
            .sum();
        (start.elapsed().as_secs_f64(), steps)
    };

    let sampling = RolloutConfig::sampling(Mode::MultiTurn, None);
    let early = RolloutConfig::sampling(Mode::MultiTurn, Some(2.0));

    let cold = LocalSimClient::new(dir.clone(), 0); // caching disabled
    let warm = LocalSimClient::new(dir.clone(), 16);
    let (t_cold, _) = time_rollouts(&cold, &sampling, false);
    let (t_warm, _) = time_rollouts(&warm, &sampling, true);
    println!("scene caching + preload:");
    println!("  cache off : {t_cold:.3} s");
    println!("  cache on  : {t_warm:.3} s   ({:+.1}%)", (t_warm / t_cold - 1.0) * 100.0);
    println!("  stats     : {:?}", warm.cache_stats()?);

    // a policy that hates stopping wanders until a cap fires — the case
    // early stopping exists for
    let mut wander = params.clone();
    let bo = wander.tensor_range("bo");
    wander.data[bo.start + TOKEN_STOP as usize] -= 6.0;
    wander.data[bo.start + TOKEN_EOT as usize] -= 2.0;
    let time_wander = |client: &dyn SimClient, cfg: &RolloutConfig| {
        announce_next_batch(client, &refs);
        std::thread::sleep(std::time::Duration::from_millis(200));
        let start = std::time::Instant::now();
        let groups = collect_batch(client, &wander, &refs, cfg, 2, 0, "wander", 4).unwrap();
        let steps: u32 = groups.iter().flatten().map(|t| t.primitive_steps).sum();
        (start.elapsed().as_secs_f64(), steps)
    };
    let plain = LocalSimClient::new(dir.clone(), 16);
    let capped = LocalSimClient::new(dir, 16);
    let (t_plain, s_plain) = time_wander(&plain, &sampling);
    let (t_capped, s_capped) = time_wander(&capped, &early);
    println!("\ndynamic early stopping (alpha = 2):");
    println!("  uncapped  : {t_plain:.3} s, {s_plain} primitive steps");
    println!(
        "  capped    : {t_capped:.3} s, {s_capped} primitive steps   ({:+.1}% time)",
        (t_capped / t_plain - 1.0) * 100.0
    );
    Ok(())
}
