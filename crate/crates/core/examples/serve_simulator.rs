//! Start the HTTP simulator on a free port, preload a scene, and drive one
//! episode over the wire, printing each step response and the cache stats.

use gridnav::sim_client::{create_request, HttpSimClient, SimClient};
use gridnav::taskgen::{generate_episode, generate_scene, EpisodeGenConfig, SceneGenConfig};
use gridnav::world::MergedAction;

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("gridnav-example-sim");
    std::fs::create_dir_all(&dir)?;
    let scene = generate_scene(3, &SceneGenConfig::default())?;
    scene.save(&dir.join(format!("{}.scene", scene.scene_id)))?;
    let episode = generate_episode(&scene, 1, &EpisodeGenConfig::default())?;

    let server = gridnav::server::serve("127.0.0.1:0", dir, 8, 2)?;
    let client = HttpSimClient::new(&format!("http://127.0.0.1:{}", server.port));
    client.healthz()?;
    println!("simulator up on port {}", server.port);

    // warm the cache before the episode starts
    client.preload(&[scene.scene_id.clone()])?;
    std::thread::sleep(std::time::Duration::from_millis(100));

    let mut resp = client.create_episode(&create_request(&episode, "demo"))?;
    println!(
        "created episode: d_goal {:.2} m, bearing {:.0} deg",
        resp.d_goal, resp.observation.goal_bearing
    );

    // replay the expert's merged actions through the wire protocol
    for action in &episode.expert_actions {
        resp = client.step("demo", *action)?;
        println!(
            "  {:<3} -> pose ({:.2}, {:.2}) h {:>5.0}  d_goal {:.2}{}",
            action.token_name(),
            resp.pose.x,
            resp.pose.y,
            resp.pose.heading,
            resp.d_goal,
            if resp.collision { "  [collision]" } else { "" }
        );
        if resp.done {
            break;
        }
    }
    println!(
        "done: success = {}, {} primitive steps",
        resp.success, resp.steps_taken
    );
    client.close_episode("demo")?;
    println!("cache stats: {:?}", client.cache_stats()?);

    // a second episode on the same scene must hit the cache
    let _ = client.create_episode(&create_request(&episode, "demo2"))?;
    let stats = client.cache_stats()?;
    assert!(stats.hits >= 2);
    println!("after reuse:  {stats:?}");

    // unknown actions and sessions come back as HTTP status errors
    let err = client
        .step("ghost", MergedAction::from_token_name("F1").unwrap())
        .unwrap_err();
    println!("stepping a missing session: {err}");
    server.stop();
    Ok(())
}
