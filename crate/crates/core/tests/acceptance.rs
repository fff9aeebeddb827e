//! End-to-end acceptance checks. Each test prints a single
//! `acceptance <name>: PASS|FAIL` line; the heavy training benchmark runs
//! once and is shared by the improvement, paradigm-gap, reward-trend, and
//! early-stopping checks.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gridnav::metrics::{dtw, dtw_brute_force};
use gridnav::orchestrator::{announce_next_batch, collect_batch, RolloutConfig};
use gridnav::policy::{
    Mode, OptimizerState, Policy, PolicyDims, PolicyParams, TOKEN_EOT, TOKEN_STOP,
};
use gridnav::scene::{Cell, Scene};
use gridnav::server::serve;
use gridnav::sim_client::{create_request, HttpSimClient, LocalSimClient, SimClient};
use gridnav::taskgen::{
    compress_expert, expand_merged, generate_episode, generate_scene, Episode, EpisodeGenConfig,
    SceneGenConfig,
};
use gridnav::train_il::{greedy_success_rate, train_il, ILConfig};
use gridnav::train_rl::{
    group_advantages, grpo_surrogate, grpo_token_objective, train_rl, RLConfig,
};
use gridnav::optim::AdamWConfig;

fn check(name: &str, f: impl FnOnce() + std::panic::UnwindSafe) {
    match std::panic::catch_unwind(f) {
        Ok(()) => println!("acceptance {name}: PASS"),
        Err(e) => {
            println!("acceptance {name}: FAIL");
            std::panic::resume_unwind(e);
        }
    }
}

// ---- oracle checks ---------------------------------------------------------------

#[test]
fn dtw_matches_brute_force_enumeration() {
    check("dtw-oracle", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let rand_path = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64)> {
            let len = rng.gen_range(1..=6);
            (0..len)
                .map(|_| (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)))
                .collect()
        };
        for _ in 0..1000 {
            let a = rand_path(&mut rng);
            let b = rand_path(&mut rng);
            let fast = dtw(&a, &b).unwrap();
            let slow = dtw_brute_force(&a, &b).unwrap();
            assert!(
                (fast - slow).abs() < 1e-9,
                "dtw {fast} vs brute force {slow} for {a:?} / {b:?}"
            );
        }
        assert!(start.elapsed().as_secs_f64() < 10.0, "oracle sweep too slow");
    });
}

/// Independent geodesic oracle: Bellman-Ford-style relaxation over the
/// 8-connected free-cell graph, no priority queue, iterated to fixpoint.
fn relaxation_distances(scene: &Scene, goal: Cell) -> Vec<f64> {
    let n = scene.width * scene.height;
    let idx = |c: Cell| c.row * scene.width + c.col;
    let mut dist = vec![f64::INFINITY; n];
    dist[idx(goal)] = 0.0;
    let straight = scene.resolution;
    let diag = scene.resolution * std::f64::consts::SQRT_2;
    loop {
        let mut changed = false;
        for row in 0..scene.height {
            for col in 0..scene.width {
                let c = Cell::new(col, row);
                if scene.blocked(c) || dist[idx(c)].is_infinite() {
                    continue;
                }
                for dc in -1i64..=1 {
                    for dr in -1i64..=1 {
                        if dc == 0 && dr == 0 {
                            continue;
                        }
                        let (ncol, nrow) = (col as i64 + dc, row as i64 + dr);
                        if !scene.in_bounds(ncol, nrow) {
                            continue;
                        }
                        let nc = Cell::new(ncol as usize, nrow as usize);
                        if scene.blocked(nc) {
                            continue;
                        }
                        let step = if dc != 0 && dr != 0 { diag } else { straight };
                        let nd = dist[idx(c)] + step;
                        if nd < dist[idx(nc)] - 1e-12 {
                            dist[idx(nc)] = nd;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return dist;
        }
    }
}

#[test]
fn geodesic_matches_relaxation_oracle() {
    check("geodesic-oracle", || {
        let start = Instant::now();
        let cfg = SceneGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for seed in 0..50u64 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let free = scene.free_cells();
            let goal = free[rng.gen_range(0..free.len())];
            let oracle = relaxation_distances(&scene, goal);
            let (gx, gy) = goal.center(scene.resolution);
            for _ in 0..20 {
                let from = free[rng.gen_range(0..free.len())];
                let (fx, fy) = from.center(scene.resolution);
                let got = scene.geodesic((fx, fy), (gx, gy)).unwrap();
                let want = oracle[from.row * scene.width + from.col];
                assert!(
                    (got - want).abs() < 1e-9,
                    "scene {seed} {from:?}->{goal:?}: dijkstra {got} vs relaxation {want}"
                );
            }
        }
        assert!(start.elapsed().as_secs_f64() < 30.0, "oracle sweep too slow");
    });
}

#[test]
fn analytic_gradients_match_finite_differences() {
    check("gradient-oracle", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for config in 0..100u64 {
            let dims = PolicyDims {
                obs_dim: rng.gen_range(6..=12),
                enc_hidden: rng.gen_range(4..=8),
                embed: rng.gen_range(3..=6),
                hidden: rng.gen_range(5..=9),
            };
            let mode = if config % 2 == 0 {
                Mode::MultiTurn
            } else {
                Mode::SingleTurn
            };
            let params = PolicyParams::init(dims, 9000 + config);
            let n_turns = rng.gen_range(1..=3);
            let mut turns = Vec::new();
            for t in 0..n_turns {
                let obs: Vec<f64> =
                    (0..dims.obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n_act = rng.gen_range(0..=3usize);
                let mut tokens: Vec<u8> =
                    (0..n_act).map(|_| rng.gen_range(0..9u8)).collect();
                let last_turn = t + 1 == n_turns;
                if n_act < 3 && last_turn && rng.gen_bool(0.5) {
                    tokens.push(TOKEN_STOP);
                } else {
                    tokens.push(TOKEN_EOT);
                }
                turns.push((obs, tokens));
            }
            let n_tokens: usize = turns.iter().map(|(_, t)| t.len()).sum();
            let weights: Vec<f64> =
                (0..n_tokens).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |p: &PolicyParams| -> f64 {
                let (_, tr) = Policy::score_trajectory(p, &turns, mode, 1.0).unwrap();
                tr.logps.iter().zip(&weights).map(|(l, w)| l * w).sum()
            };
            let (tape, _) = Policy::score_trajectory(&params, &turns, mode, 1.0).unwrap();
            let mut grad = vec![0.0; params.data.len()];
            Policy::backward(&params, &tape, &weights, &mut grad);
            for _ in 0..10 {
                let idx = rng.gen_range(0..params.data.len());
                let h = 1e-4;
                let mut plus = params.clone();
                plus.data[idx] += h;
                let mut minus = params.clone();
                minus.data[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let denom = fd.abs().max(grad[idx].abs()).max(1e-6);
                assert!(
                    (fd - grad[idx]).abs() / denom < 1e-4,
                    "config {config} idx {idx}: fd {fd} vs analytic {}",
                    grad[idx]
                );
            }
        }
        assert!(start.elapsed().as_secs_f64() < 120.0, "gradient sweep too slow");
    });
}

#[test]
fn grpo_surrogate_invariants_and_hand_cases() {
    check("grpo-invariants", || {
        // hand-checked clip cases at eps = 0.28
        assert!((grpo_token_objective(2.0, 1.0, 0.28) - 1.28).abs() < 1e-12);
        assert!((grpo_token_objective(0.5, -1.0, 0.28) - (-0.72)).abs() < 1e-12);
        // inside the trust region the term is exactly r * A
        assert!((grpo_token_objective(1.1, 0.7, 0.28) - 0.77).abs() < 1e-12);

        // group advantages: zero mean, unit scale, degenerate flag
        let (adv, degenerate) = group_advantages(&[15.0, 0.0, 0.0, 10.0]);
        assert!(!degenerate);
        let mean: f64 = adv.iter().sum::<f64>() / adv.len() as f64;
        assert!(mean.abs() < 1e-9);
        let var: f64 = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv.len() as f64;
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
        let (_, degenerate) = group_advantages(&[0.0, 0.0, 0.0, 0.0]);
        assert!(degenerate, "zero-variance group must be flagged");
        let (_, degenerate) = group_advantages(&[15.0; 4]);
        assert!(degenerate, "all-success group must be flagged");

        // gradient coefficients: -A * r / |o| on the unclipped branch,
        // exactly zero where clipping is active
        let old = [-1.0, -2.0, -0.5];
        let new = [-1.0 + 2.0f64.ln(), -2.0 + 0.5f64.ln(), -0.5];
        let (obj, coeffs) = grpo_surrogate(&new, &old, 1.0, 0.28);
        assert!((obj - (1.28 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
        assert_eq!(coeffs[0], 0.0, "clipped token must carry no gradient");
        assert!((coeffs[1] - (-0.5 / 3.0)).abs() < 1e-12);
        assert!((coeffs[2] - (-1.0 / 3.0)).abs() < 1e-12);

        // negative advantage clips on the other side
        let (obj, coeffs) = grpo_surrogate(&[-1.0 + 0.5f64.ln()], &[-1.0], -1.0, 0.28);
        assert!((obj - (-0.72)).abs() < 1e-12);
        assert_eq!(coeffs[0], 0.0);

        // shifting every reward by a constant leaves advantages untouched
        let rewards = [15.0, 0.0, 7.5, 3.0];
        let shifted: Vec<f64> = rewards.iter().map(|r| r + 4.25).collect();
        let (a, _) = group_advantages(&rewards);
        let (b, _) = group_advantages(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }

        // the grammar forces EOT after three action tokens: a forced EOT has
        // log-probability exactly zero, and a fourth action token is rejected
        let params = PolicyParams::init(
            PolicyDims {
                obs_dim: 8,
                enc_hidden: 6,
                embed: 5,
                hidden: 7,
            },
            3,
        );
        let obs = vec![0.25; 8];
        let turns = vec![(obs.clone(), vec![0u8, 1, 2, TOKEN_EOT])];
        let (_, trace) = Policy::score_trajectory(&params, &turns, Mode::MultiTurn, 1.0).unwrap();
        assert_eq!(*trace.logps.last().unwrap(), 0.0);
        let bad = vec![(obs, vec![0u8, 1, 2, 3, TOKEN_EOT])];
        assert!(Policy::score_trajectory(&params, &bad, Mode::MultiTurn, 1.0).is_err());
    });
}

// ---- simulator contract ------------------------------------------------------------

fn build_dataset(
    dir: &std::path::Path,
    n_scenes: u64,
    scene_seed0: u64,
    per_scene: u64,
    episode_seed0: u64,
    cfg: &SceneGenConfig,
) -> (HashMap<String, Arc<Scene>>, Vec<Episode>) {
    let gen = EpisodeGenConfig::default();
    let mut scenes = HashMap::new();
    let mut episodes = Vec::new();
    for i in 0..n_scenes {
        let scene = generate_scene(scene_seed0 + i, cfg).unwrap();
        scene
            .save(&dir.join(format!("{}.scene", scene.scene_id)))
            .unwrap();
        for e in 0..per_scene {
            episodes.push(
                generate_episode(&scene, episode_seed0 + i * per_scene + e, &gen).unwrap(),
            );
        }
        scenes.insert(scene.scene_id.clone(), Arc::new(scene));
    }
    (scenes, episodes)
}

#[test]
fn expert_replay_always_succeeds() {
    check("expert-replay", || {
        let dir = tempfile::tempdir().unwrap();
        let (_, episodes) =
            build_dataset(dir.path(), 5, 300, 40, 61_000, &SceneGenConfig::default());
        assert_eq!(episodes.len(), 200);
        let client = LocalSimClient::new(dir.path().to_path_buf(), 8);
        for (i, ep) in episodes.iter().enumerate() {
            let primitives = expand_merged(&ep.expert_actions);
            assert_eq!(primitives.len() as u32, ep.expert_primitive_len);
            assert_eq!(
                compress_expert(&primitives).unwrap(),
                ep.expert_actions,
                "{}: merge/expand round trip not lossless",
                ep.episode_id
            );
            let sid = format!("replay{i}");
            let mut resp = client.create_episode(&create_request(ep, &sid)).unwrap();
            for action in &ep.expert_actions {
                resp = client.step(&sid, *action).unwrap();
            }
            client.close_episode(&sid).unwrap();
            assert!(resp.done, "{}: expert did not terminate", ep.episode_id);
            assert!(resp.success, "{}: expert missed the goal", ep.episode_id);
            assert_eq!(resp.steps_taken, ep.expert_primitive_len);
        }
    });
}

#[test]
fn protocol_is_deterministic_and_survives_concurrency() {
    check("protocol-determinism", || {
        let dir = tempfile::tempdir().unwrap();
        let (_, episodes) =
            build_dataset(dir.path(), 4, 500, 16, 71_000, &SceneGenConfig::default());
        let local = LocalSimClient::new(dir.path().to_path_buf(), 8);
        let handle = serve("127.0.0.1:0", dir.path().to_path_buf(), 8, 4).unwrap();
        let http = HttpSimClient::new(&format!("http://127.0.0.1:{}", handle.port));
        http.healthz().unwrap();

        // byte-identical transcripts across transports
        for (i, ep) in episodes.iter().enumerate() {
            let sid = format!("det{i}");
            let a = local.create_episode(&create_request(ep, &sid)).unwrap();
            let b = http.create_episode(&create_request(ep, &sid)).unwrap();
            assert_eq!(
                serde_json::to_string(&a).unwrap(),
                serde_json::to_string(&b).unwrap()
            );
            for action in &ep.expert_actions {
                let a = local.step(&sid, *action).unwrap();
                let b = http.step(&sid, *action).unwrap();
                assert_eq!(
                    serde_json::to_string(&a).unwrap(),
                    serde_json::to_string(&b).unwrap(),
                    "{}: transcript diverged", ep.episode_id
                );
            }
            local.close_episode(&sid).unwrap();
            http.close_episode(&sid).unwrap();
        }

        // 64 concurrent sessions against one server
        let http = Arc::new(http);
        std::thread::scope(|scope| {
            for lane in 0..64usize {
                let http = Arc::clone(&http);
                let ep = &episodes[lane % episodes.len()];
                scope.spawn(move || {
                    let sid = format!("soak{lane}");
                    let mut resp = http.create_episode(&create_request(ep, &sid)).unwrap();
                    for action in &ep.expert_actions {
                        resp = http.step(&sid, *action).unwrap();
                    }
                    assert!(resp.success, "lane {lane} expert replay failed over http");
                    http.close_episode(&sid).unwrap();
                });
            }
        });
        assert_eq!(http.session_count().unwrap(), 0, "sessions leaked");
        handle.stop();
    });
}

#[test]
fn scene_caching_and_preload_speed_up_rollouts() {
    check("cache-speedup", || {
        let dir = tempfile::tempdir().unwrap();
        // big scenes make disk loads and distance-field builds expensive; a
        // disabled cache pays them once per session, a warm cache once per
        // scene
        let cfg = SceneGenConfig {
            width: 256,
            height: 256,
            room_count: 12,
            ..Default::default()
        };
        let (_, episodes) = build_dataset(dir.path(), 6, 900, 3, 91_000, &cfg);
        let refs: Vec<&Episode> = episodes.iter().collect();
        let params = PolicyParams::init(PolicyDims::default(), 7);
        let roll = RolloutConfig::sampling(Mode::MultiTurn, Some(2.0));

        let time_batch = |client: &dyn SimClient| {
            let start = Instant::now();
            collect_batch(client, &params, &refs, &roll, 4, 0, "cache", 4).unwrap();
            start.elapsed().as_secs_f64()
        };

        let cold = LocalSimClient::new(dir.path().to_path_buf(), 0); // cache disabled
        let t_cold = time_batch(&cold);

        let warm = LocalSimClient::new(dir.path().to_path_buf(), 16);
        announce_next_batch(&warm, &refs);
        std::thread::sleep(std::time::Duration::from_millis(300));
        let t_warm = time_batch(&warm);

        let stats = warm.cache_stats().unwrap();
        assert!(stats.preloads > 0, "preload request was ignored");
        assert!(stats.hits > 0, "cache never hit");
        assert!(
            t_warm < t_cold,
            "caching + preload gave no speedup: cold {t_cold:.3}s warm {t_warm:.3}s"
        );
    });
}

// ---- training benchmark (shared by the last four checks) ----------------------------

struct Bench {
    _dir: tempfile::TempDir,
    sr_il_multi: f64,
    sr_rl_multi: f64,
    sr_il_single: f64,
    sr_rl_single: f64,
    reward_by_step: Vec<f64>,
    es_on: (f64, f64),
    es_off: (f64, f64),
    elapsed_s: f64,
}

fn dims() -> PolicyDims {
    PolicyDims {
        enc_hidden: 64,
        hidden: 64,
        ..Default::default()
    }
}

fn run_paradigm(
    scenes: &HashMap<String, Arc<Scene>>,
    scene_dir: &std::path::Path,
    train: &[Episode],
    heldout: &[Episode],
    mode: Mode,
) -> (PolicyParams, f64, f64, Vec<f64>) {
    let mut params = PolicyParams::init(dims(), 5);
    let mut opt = OptimizerState::fresh(params.data.len());
    let il_cfg = ILConfig {
        mode,
        steps: 200,
        val_every: 0,
        ..Default::default()
    };
    train_il(&mut params, &mut opt, scenes, train, None, &il_cfg, |_| {}).unwrap();
    let client = LocalSimClient::new(scene_dir.to_path_buf(), 8);
    let tag = format!("il-{}", mode.name());
    let sr_il = greedy_success_rate(&client, &params, heldout, mode, &tag).unwrap();

    let il_params = params.clone();
    let rl_cfg = RLConfig {
        mode,
        steps: 300,
        optimizer: AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        },
        temperature: 0.7,
        seed: 11,
        ..Default::default()
    };
    let mut opt = OptimizerState::fresh(params.data.len());
    let mut rewards = Vec::with_capacity(rl_cfg.steps);
    train_rl(&mut params, &mut opt, &client, train, &rl_cfg, |line| {
        rewards.push(line.reward_mean);
    })
    .unwrap();
    let tag = format!("rl-{}", mode.name());
    let sr_rl = greedy_success_rate(&client, &params, heldout, mode, &tag).unwrap();
    (il_params, sr_il, sr_rl, rewards)
}

/// RL from a fixed IL init at the default (reference-scale) optimizer
/// settings, with or without early stopping. Returns mean rollout wall time
/// per step and final greedy held-out SR.
fn train_from(
    init: &PolicyParams,
    scene_dir: &std::path::Path,
    train: &[Episode],
    heldout: &[Episode],
    alpha_roll: Option<f64>,
) -> (f64, f64) {
    let mut params = init.clone();
    let mut opt = OptimizerState::fresh(params.data.len());
    let client = LocalSimClient::new(scene_dir.to_path_buf(), 8);
    let cfg = RLConfig {
        steps: 300,
        alpha_roll,
        seed: 23,
        ..Default::default()
    };
    let mut rollout_s = 0.0;
    train_rl(&mut params, &mut opt, &client, train, &cfg, |line| {
        rollout_s += line.wall_time_rollout_s;
    })
    .unwrap();
    let tag = format!("es{}", alpha_roll.is_some() as u8);
    let sr = greedy_success_rate(&client, &params, heldout, Mode::MultiTurn, &tag).unwrap();
    (rollout_s / cfg.steps as f64, sr)
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneGenConfig::default();
        let (scenes, train) = build_dataset(dir.path(), 20, 100, 100, 1_000, &cfg);
        let gen = EpisodeGenConfig::default();
        let mut heldout = Vec::new();
        for i in 0..20u64 {
            let scene = &scenes[&format!("scene-{:08x}", 100 + i)];
            for e in 0..10u64 {
                heldout.push(generate_episode(scene, 777_000 + i * 10 + e, &gen).unwrap());
            }
        }

        let (il_multi, sr_il_multi, sr_rl_multi, reward_by_step) =
            run_paradigm(&scenes, dir.path(), &train, &heldout, Mode::MultiTurn);
        let (_, sr_il_single, sr_rl_single, _) =
            run_paradigm(&scenes, dir.path(), &train, &heldout, Mode::SingleTurn);
        let es_on = train_from(&il_multi, dir.path(), &train, &heldout, Some(2.0));
        let es_off = train_from(&il_multi, dir.path(), &train, &heldout, None);

        let elapsed_s = start.elapsed().as_secs_f64();
        eprintln!(
            "benchmark: multi {sr_il_multi:.3} -> {sr_rl_multi:.3}, \
             single {sr_il_single:.3} -> {sr_rl_single:.3} ({elapsed_s:.0}s)"
        );
        Bench {
            _dir: dir,
            sr_il_multi,
            sr_rl_multi,
            sr_il_single,
            sr_rl_single,
            reward_by_step,
            es_on,
            es_off,
            elapsed_s,
        }
    })
}

#[test]
fn rl_improves_success_rate_over_il_within_budget() {
    check("rl-improvement", || {
        let b = bench();
        let delta = b.sr_rl_multi - b.sr_il_multi;
        assert!(
            delta >= 0.05,
            "SR gain {delta:.3} below +5 points (IL {:.3}, RL {:.3})",
            b.sr_il_multi,
            b.sr_rl_multi
        );
        assert!(
            b.elapsed_s < 45.0 * 60.0,
            "benchmark took {:.0}s, budget is 45 minutes",
            b.elapsed_s
        );
    });
}

#[test]
fn multi_turn_gains_more_than_single_turn() {
    check("paradigm-gap", || {
        let b = bench();
        let multi = b.sr_rl_multi - b.sr_il_multi;
        let single = b.sr_rl_single - b.sr_il_single;
        assert!(
            multi > single,
            "multi-turn gain {multi:.3} not above single-turn gain {single:.3}"
        );
    });
}

#[test]
fn training_reward_trends_upward() {
    check("reward-trend", || {
        let b = bench();
        assert!(b.reward_by_step.len() >= 300);
        let head: f64 = b.reward_by_step[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = b.reward_by_step[250..300].iter().sum::<f64>() / 50.0;
        assert!(
            tail > head,
            "mean reward fell: steps 1-50 {head:.3}, steps 250-300 {tail:.3}"
        );
    });
}

#[test]
fn early_stopping_cuts_rollout_time_without_hurting_success() {
    check("early-stop", || {
        let b = bench();
        let (t_on, sr_on) = b.es_on;
        let (t_off, sr_off) = b.es_off;
        let saving = 1.0 - t_on / t_off;
        eprintln!(
            "early stopping: {:.1} ms/step, SR {sr_on:.3} on vs \
             {:.1} ms/step, SR {sr_off:.3} off ({:.1}% saved)",
            t_on * 1e3,
            t_off * 1e3,
            saving * 100.0
        );
        assert!(
            saving >= 0.05,
            "early stopping saved only {:.1}% rollout time",
            saving * 100.0
        );
        assert!(
            (sr_on - sr_off).abs() <= 0.02,
            "early stopping moved held-out SR by more than 2 points: \
             {sr_on:.3} on vs {sr_off:.3} off"
        );
    });
}
