//! Navigation evaluation metrics over completed trajectories: NE, SR, OSR,
//! SPL, DTW, nDTW.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Scene, SceneError};
use crate::taskgen::Episode;
use crate::world::{Pose, SUCCESS_RADIUS_M};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty path")]
    EmptyPath,
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// The evaluated record of one rollout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode_id: String,
    /// Positions visited: start plus one point per primitive action.
    pub path: Vec<(f64, f64)>,
    pub final_pose: Pose,
    /// True iff the agent issued STOP (as opposed to hitting a step cap).
    pub stopped: bool,
    pub min_goal_distance_seen: f64,
}

impl TrajectoryRecord {
    /// Sum of consecutive Euclidean segment lengths.
    pub fn path_length(&self) -> f64 {
        self.path
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_id: String,
    pub ne: f64,
    pub success: bool,
    pub oracle_success: bool,
    pub spl: f64,
    pub ndtw: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_episode: Vec<EpisodeMetrics>,
    pub ne_mean: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl_mean: f64,
    pub ndtw_mean: f64,
}

/// Geodesic distance from the stopping point to the goal.
pub fn navigation_error(
    traj: &TrajectoryRecord,
    episode: &Episode,
    scene: &Scene,
) -> Result<f64, MetricError> {
    Ok(scene.geodesic(traj.final_pose.position(), episode.goal.position())?)
}

/// Success requires an explicit STOP within the success radius.
pub fn success(traj: &TrajectoryRecord, episode: &Episode, scene: &Scene) -> Result<bool, MetricError> {
    Ok(traj.stopped && navigation_error(traj, episode, scene)? <= SUCCESS_RADIUS_M)
}

pub fn oracle_success(traj: &TrajectoryRecord) -> bool {
    traj.min_goal_distance_seen <= SUCCESS_RADIUS_M
}

/// Success weighted by path length. The optimal length is the geodesic
/// start-to-goal distance.
pub fn spl(traj: &TrajectoryRecord, episode: &Episode, scene: &Scene) -> Result<f64, MetricError> {
    if !success(traj, episode, scene)? {
        return Ok(0.0);
    }
    let optimal = scene.geodesic(episode.start.position(), episode.goal.position())?;
    let actual = traj.path_length();
    if optimal <= 0.0 {
        return Ok(1.0);
    }
    Ok(optimal / actual.max(optimal))
}

/// Min-cost monotone alignment under Euclidean point distance, boundary
/// matched (both first points aligned, both last points aligned).
pub fn dtw(path_a: &[(f64, f64)], path_b: &[(f64, f64)]) -> Result<f64, MetricError> {
    if path_a.is_empty() || path_b.is_empty() {
        return Err(MetricError::EmptyPath);
    }
    let n = path_a.len();
    let m = path_b.len();
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let mut cost = vec![f64::INFINITY; (n + 1) * (m + 1)];
    cost[0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let d = dist(path_a[i - 1], path_b[j - 1]);
            let best = cost[(i - 1) * (m + 1) + j]
                .min(cost[i * (m + 1) + j - 1])
                .min(cost[(i - 1) * (m + 1) + j - 1]);
            cost[i * (m + 1) + j] = d + best;
        }
    }
    Ok(cost[n * (m + 1) + m])
}

/// nDTW = exp(-DTW / (|reference| * success_radius)), reference = expert path.
pub fn ndtw(traj: &TrajectoryRecord, episode: &Episode) -> Result<f64, MetricError> {
    let reference: Vec<(f64, f64)> = episode.expert_path.iter().map(|p| (p.x, p.y)).collect();
    let d = dtw(&traj.path, &reference)?;
    Ok((-d / (reference.len() as f64 * SUCCESS_RADIUS_M)).exp())
}

pub fn evaluate_episode(
    traj: &TrajectoryRecord,
    episode: &Episode,
    scene: &Scene,
) -> Result<EpisodeMetrics, MetricError> {
    Ok(EpisodeMetrics {
        episode_id: traj.episode_id.clone(),
        ne: navigation_error(traj, episode, scene)?,
        success: success(traj, episode, scene)?,
        oracle_success: oracle_success(traj),
        spl: spl(traj, episode, scene)?,
        ndtw: ndtw(traj, episode)?,
    })
}

pub fn aggregate(per_episode: Vec<EpisodeMetrics>) -> MetricReport {
    let n = per_episode.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| per_episode.iter().map(f).sum::<f64>() / n;
    MetricReport {
        ne_mean: mean(&|m| m.ne),
        sr: mean(&|m| m.success as u8 as f64),
        osr: mean(&|m| m.oracle_success as u8 as f64),
        spl_mean: mean(&|m| m.spl),
        ndtw_mean: mean(&|m| m.ndtw),
        per_episode,
    }
}

/// Render a metric report as comma-separated values with an aggregate row.
pub fn report_csv(report: &MetricReport) -> String {
    let mut out = String::from("episode_id,NE,SR,OSR,SPL,nDTW\n");
    for m in &report.per_episode {
        out.push_str(&format!(
            "{},{:.6},{},{},{:.6},{:.6}\n",
            m.episode_id,
            m.ne,
            m.success as u8,
            m.oracle_success as u8,
            m.spl,
            m.ndtw
        ));
    }
    out.push_str(&format!(
        "aggregate,{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        report.ne_mean, report.sr, report.osr, report.spl_mean, report.ndtw_mean
    ));
    out
}

/// Exhaustive enumeration of all boundary-matched monotone alignments.
/// Exponential; intended for oracle checks on short paths only.
pub fn dtw_brute_force(path_a: &[(f64, f64)], path_b: &[(f64, f64)]) -> Result<f64, MetricError> {
    if path_a.is_empty() || path_b.is_empty() {
        return Err(MetricError::EmptyPath);
    }
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    fn go(
        i: usize,
        j: usize,
        a: &[(f64, f64)],
        b: &[(f64, f64)],
        dist: &dyn Fn((f64, f64), (f64, f64)) -> f64,
    ) -> f64 {
        let here = dist(a[i], b[j]);
        if i == 0 && j == 0 {
            return here;
        }
        let mut best = f64::INFINITY;
        if i > 0 {
            best = best.min(go(i - 1, j, a, b, dist));
        }
        if j > 0 {
            best = best.min(go(i, j - 1, a, b, dist));
        }
        if i > 0 && j > 0 {
            best = best.min(go(i - 1, j - 1, a, b, dist));
        }
        here + best
    }
    Ok(go(path_a.len() - 1, path_b.len() - 1, path_a, path_b, &dist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Cell, Landmark};
    use crate::taskgen::{generate_episode, generate_scene, EpisodeGenConfig, SceneGenConfig};
    use crate::world::{Instruction, InstructionToken, Relation};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn open_scene() -> Scene {
        let w = 80;
        Scene::new(
            "open".into(),
            0.25,
            w,
            w,
            vec![false; w * w],
            vec![Landmark {
                id: 0,
                cell: Cell::new(40, 40),
            }],
        )
        .unwrap()
    }

    fn dummy_episode(scene: &Scene, start: Pose, goal: Pose) -> Episode {
        Episode {
            episode_id: "ep".into(),
            scene_id: scene.scene_id.clone(),
            start,
            goal,
            instruction: Instruction {
                tokens: vec![InstructionToken {
                    landmark_id: 0,
                    relation: Relation::StopAt,
                }],
            },
            expert_actions: vec![crate::world::MergedAction::stop()],
            expert_path: vec![start, goal],
            expert_primitive_len: 1,
        }
    }

    fn traj(path: Vec<(f64, f64)>, stopped: bool, min_seen: f64) -> TrajectoryRecord {
        let last = *path.last().unwrap();
        TrajectoryRecord {
            episode_id: "ep".into(),
            final_pose: Pose::new(last.0, last.1, 0.0),
            path,
            stopped,
            min_goal_distance_seen: min_seen,
        }
    }

    #[test]
    fn ne_zero_at_goal_and_corridor_distance() {
        let scene = open_scene();
        let goal = Pose::new(10.125, 10.125, 0.0);
        let ep = dummy_episode(&scene, Pose::new(2.125, 10.125, 0.0), goal);
        let at_goal = traj(vec![(10.125, 10.125)], true, 0.0);
        assert_eq!(navigation_error(&at_goal, &ep, &scene).unwrap(), 0.0);
        let away = traj(vec![(8.125, 10.125)], true, 2.0);
        assert!((navigation_error(&away, &ep, &scene).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn success_threshold_and_stop_requirement() {
        let scene = open_scene();
        let goal = Pose::new(10.125, 10.125, 0.0);
        let ep = dummy_episode(&scene, Pose::new(2.125, 10.125, 0.0), goal);
        // stopped at NE 2.875 -> success
        let near = traj(vec![(7.125, 10.125)], true, 2.875);
        assert!(success(&near, &ep, &scene).unwrap());
        // stopped at NE 3.25 -> failure
        let far = traj(vec![(6.875, 10.125)], true, 3.25);
        assert!(!success(&far, &ep, &scene).unwrap());
        // close but no STOP -> failure, oracle success still true
        let capped = traj(vec![(9.875, 10.125)], false, 0.5);
        assert!(!success(&capped, &ep, &scene).unwrap());
        assert!(oracle_success(&capped));
    }

    #[test]
    fn spl_formula() {
        let scene = open_scene();
        let goal = Pose::new(7.125, 2.125, 0.0);
        let start = Pose::new(2.125, 2.125, 0.0);
        let ep = dummy_episode(&scene, start, goal);
        // optimal geodesic = 5.0 m; agent walked 10 m to the goal
        let mut path = vec![(2.125, 2.125)];
        // detour: up 2.5, right 5.0 down 2.5 = 10m
        path.push((2.125, 4.625));
        path.push((7.125, 4.625));
        path.push((7.125, 2.125));
        let t = traj(path, true, 0.0);
        let v = spl(&t, &ep, &scene).unwrap();
        assert!((v - 0.5).abs() < 1e-9, "spl = {v}");
        // failure is exactly zero
        let f = traj(vec![(2.125, 2.125)], false, 5.0);
        assert_eq!(spl(&f, &ep, &scene).unwrap(), 0.0);
    }

    #[test]
    fn dtw_identity_and_single_pairing() {
        let a = vec![(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)];
        assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        let d = dtw(&[(0.0, 0.0)], &[(0.0, 4.0)]).unwrap();
        assert!((d - 4.0).abs() < 1e-12);
        assert!(dtw(&[], &a).is_err());
    }

    #[test]
    fn dtw_matches_brute_force_on_random_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let la = rng.gen_range(1..=6);
            let lb = rng.gen_range(1..=6);
            let mk = |rng: &mut ChaCha8Rng, l: usize| {
                (0..l)
                    .map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
                    .collect::<Vec<_>>()
            };
            let a = mk(&mut rng, la);
            let b = mk(&mut rng, lb);
            let fast = dtw(&a, &b).unwrap();
            let slow = dtw_brute_force(&a, &b).unwrap();
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
            // symmetry
            assert!((dtw(&b, &a).unwrap() - fast).abs() < 1e-9);
        }
    }

    #[test]
    fn dtw_translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<(f64, f64)> = (0..5).map(|_| (rng.gen(), rng.gen())).collect();
        let b: Vec<(f64, f64)> = (0..4).map(|_| (rng.gen(), rng.gen())).collect();
        let shift = (3.7, -1.2);
        let at: Vec<_> = a.iter().map(|p| (p.0 + shift.0, p.1 + shift.1)).collect();
        let bt: Vec<_> = b.iter().map(|p| (p.0 + shift.0, p.1 + shift.1)).collect();
        assert!((dtw(&a, &b).unwrap() - dtw(&at, &bt).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ndtw_bounds_and_identity() {
        let scene = open_scene();
        let start = Pose::new(2.125, 2.125, 0.0);
        let goal = Pose::new(7.125, 2.125, 0.0);
        let ep = dummy_episode(&scene, start, goal);
        let exact = traj(vec![(start.x, start.y), (goal.x, goal.y)], true, 0.0);
        assert!((ndtw(&exact, &ep).unwrap() - 1.0).abs() < 1e-12);
        let off = traj(vec![(start.x, start.y + 2.0), (goal.x, goal.y + 2.0)], true, 2.0);
        let v = ndtw(&off, &ep).unwrap();
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn metric_ordering_invariant_on_generated_episodes() {
        // 0 <= SPL <= success <= oracle_success, pointwise
        let scene = generate_scene(11, &SceneGenConfig::default()).unwrap();
        let gen_cfg = EpisodeGenConfig::default();
        for seed in 0..5 {
            let ep = generate_episode(&scene, seed, &gen_cfg).unwrap();
            let path: Vec<(f64, f64)> = ep.expert_path.iter().map(|p| (p.x, p.y)).collect();
            let t = TrajectoryRecord {
                episode_id: ep.episode_id.clone(),
                final_pose: *ep.expert_path.last().unwrap(),
                path,
                stopped: true,
                min_goal_distance_seen: 0.0,
            };
            let m = evaluate_episode(&t, &ep, &scene).unwrap();
            let s = m.success as u8 as f64;
            let o = m.oracle_success as u8 as f64;
            assert!(m.spl >= 0.0 && m.spl <= s && s <= o);
            assert!(m.ndtw > 0.0 && m.ndtw <= 1.0);
        }
    }
}
