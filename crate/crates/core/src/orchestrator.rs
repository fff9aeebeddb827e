//! Rollout orchestration: drives the policy against a simulator client,
//! turn by turn, with per-trajectory seeding, parallel worker lanes, and
//! scene preload announcements for the next batch.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::TrajectoryRecord;
use crate::policy::{
    encode_observation, token_to_action, LogProbTrace, Mode, Policy, PolicyError, PolicyParams,
    TurnContext, TOKEN_EOT,
};
use crate::protocol::StepResponse;
use crate::sim_client::{create_request, ClientError, SimClient};
use crate::taskgen::Episode;
use crate::world::Pose;

/// Absolute primitive-step cap regardless of early-stopping configuration.
pub const MAX_PRIMITIVE_STEPS: u32 = 150;
/// Guard against degenerate policies that emit empty turns forever.
pub const MAX_TURNS: usize = 80;
/// Parallel rollout lanes.
pub const DEFAULT_WORKERS: usize = 8;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig {
    pub mode: Mode,
    pub temperature: f64,
    /// Early-stop multiplier on the expert primitive length; `None` disables
    /// early stopping (evaluation always disables it).
    pub alpha_roll: Option<f64>,
    pub max_primitive_steps: u32,
    pub max_turns: usize,
}

impl RolloutConfig {
    pub fn sampling(mode: Mode, alpha_roll: Option<f64>) -> Self {
        RolloutConfig {
            mode,
            temperature: 1.0,
            alpha_roll,
            max_primitive_steps: MAX_PRIMITIVE_STEPS,
            max_turns: MAX_TURNS,
        }
    }

    pub fn greedy_eval(mode: Mode) -> Self {
        RolloutConfig {
            mode,
            temperature: 0.0,
            alpha_roll: None,
            max_primitive_steps: MAX_PRIMITIVE_STEPS,
            max_turns: MAX_TURNS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutStatus {
    /// The policy issued STOP.
    Stopped,
    /// Cut at ceil(alpha_roll * expert length).
    EarlyStopped,
    /// Hit the absolute primitive-step cap.
    StepCapped,
    /// Hit the turn-count guard.
    TurnCapped,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub episode_id: String,
    pub session_id: String,
    /// Per-turn observation features and emitted tokens, replayable through
    /// `Policy::score_trajectory`.
    pub turns: Vec<(Vec<f64>, Vec<u8>)>,
    pub trace: LogProbTrace,
    /// Start position plus one point per executed primitive.
    pub path: Vec<(f64, f64)>,
    pub final_pose: Pose,
    pub stopped: bool,
    pub success: bool,
    pub d_goal: f64,
    pub min_goal_distance: f64,
    pub primitive_steps: u32,
    pub status: RolloutStatus,
}

impl Trajectory {
    pub fn record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            episode_id: self.episode_id.clone(),
            path: self.path.clone(),
            final_pose: self.final_pose,
            stopped: self.stopped,
            min_goal_distance_seen: self.min_goal_distance,
        }
    }

    pub fn token_count(&self) -> usize {
        self.trace.logps.len()
    }
}

/// Deterministic per-trajectory seed.
pub fn trajectory_seed(episode_id: &str, member: usize, attempt: usize, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(episode_id.as_bytes());
    hasher.update([0]);
    hasher.update(member.to_le_bytes());
    hasher.update(attempt.to_le_bytes());
    hasher.update(tag.as_bytes());
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Early-stop budget in primitive steps for one episode.
pub fn early_stop_budget(alpha_roll: f64, expert_primitive_len: u32) -> u32 {
    (alpha_roll * expert_primitive_len as f64).ceil() as u32
}

/// Roll one trajectory. The session is always closed, including on error.
pub fn rollout_episode(
    client: &dyn SimClient,
    params: &PolicyParams,
    episode: &Episode,
    cfg: &RolloutConfig,
    seed: u64,
    session_id: &str,
) -> Result<Trajectory, RolloutError> {
    let first = client.create_episode(&create_request(episode, session_id))?;
    let result = rollout_loop(client, params, episode, cfg, seed, session_id, first);
    let _ = client.close_episode(session_id);
    result
}

fn rollout_loop(
    client: &dyn SimClient,
    params: &PolicyParams,
    episode: &Episode,
    cfg: &RolloutConfig,
    seed: u64,
    session_id: &str,
    first: StepResponse,
) -> Result<Trajectory, RolloutError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = TurnContext::fresh(&params.dims);
    let budget = cfg
        .alpha_roll
        .map(|a| early_stop_budget(a, episode.expert_primitive_len))
        .unwrap_or(u32::MAX)
        .min(cfg.max_primitive_steps);
    let mut resp = first;
    let mut turns: Vec<(Vec<f64>, Vec<u8>)> = Vec::new();
    let mut logps: Vec<f64> = Vec::new();
    let mut path = vec![(resp.pose.x, resp.pose.y)];
    let mut status = RolloutStatus::TurnCapped;
    'episode: for _ in 0..cfg.max_turns {
        let feats = encode_observation(&resp.observation);
        let (tokens, trace) = Policy::step_turn(
            params,
            &mut ctx,
            &feats,
            cfg.mode,
            cfg.temperature,
            &mut rng,
        )?;
        logps.extend(trace.logps.iter());
        turns.push((feats, tokens.clone()));
        for &tok in &tokens {
            if tok == TOKEN_EOT {
                break;
            }
            let action = token_to_action(tok).expect("vocabulary token");
            resp = client.step(session_id, action)?;
            for sp in &resp.sub_poses {
                path.push((sp.x, sp.y));
            }
            if resp.done {
                status = RolloutStatus::Stopped;
                break 'episode;
            }
            if resp.steps_taken >= budget {
                status = if budget < cfg.max_primitive_steps {
                    RolloutStatus::EarlyStopped
                } else {
                    RolloutStatus::StepCapped
                };
                break 'episode;
            }
        }
    }
    Ok(Trajectory {
        episode_id: episode.episode_id.clone(),
        session_id: session_id.to_string(),
        turns,
        trace: LogProbTrace { logps },
        path,
        final_pose: resp.pose.into(),
        stopped: resp.stopped,
        success: resp.success,
        d_goal: resp.d_goal,
        min_goal_distance: resp.min_goal_distance,
        primitive_steps: resp.steps_taken,
        status,
    })
}

/// Roll a group of trajectories for one episode (one GRPO prompt).
pub fn collect_group(
    client: &dyn SimClient,
    params: &PolicyParams,
    episode: &Episode,
    cfg: &RolloutConfig,
    group_size: usize,
    attempt: usize,
    tag: &str,
) -> Result<Vec<Trajectory>, RolloutError> {
    let mut group = Vec::with_capacity(group_size);
    for member in 0..group_size {
        let seed = trajectory_seed(&episode.episode_id, member, attempt, tag);
        let session_id = format!("{}--{tag}-m{member}-a{attempt}", episode.episode_id);
        let traj = match rollout_episode(client, params, episode, cfg, seed, &session_id) {
            Ok(t) => t,
            Err(RolloutError::Client(_)) => {
                // one re-roll with a distinct seed before giving up
                let seed = trajectory_seed(&episode.episode_id, member, attempt + 100, tag);
                let session_id =
                    format!("{}--{tag}-m{member}-a{attempt}r", episode.episode_id);
                rollout_episode(client, params, episode, cfg, seed, &session_id)?
            }
            Err(e) => return Err(e),
        };
        group.push(traj);
    }
    Ok(group)
}

/// Roll groups for a batch of episodes across parallel worker lanes. Results
/// align with the input episode order.
#[allow(clippy::too_many_arguments)]
pub fn collect_batch(
    client: &dyn SimClient,
    params: &PolicyParams,
    episodes: &[&Episode],
    cfg: &RolloutConfig,
    group_size: usize,
    attempt: usize,
    tag: &str,
    workers: usize,
) -> Result<Vec<Vec<Trajectory>>, RolloutError> {
    let workers = workers.max(1).min(episodes.len().max(1));
    let mut results: Vec<Option<Result<Vec<Trajectory>, RolloutError>>> =
        (0..episodes.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut slots: Vec<&mut [Option<Result<Vec<Trajectory>, RolloutError>>]> = Vec::new();
        let mut rest = results.as_mut_slice();
        let per = episodes.len().div_ceil(workers);
        while !rest.is_empty() {
            let take = per.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            slots.push(head);
            rest = tail;
        }
        for (lane, slot) in slots.into_iter().enumerate() {
            let offset = lane * per;
            scope.spawn(move || {
                for (i, out) in slot.iter_mut().enumerate() {
                    let episode = episodes[offset + i];
                    *out = Some(collect_group(
                        client, params, episode, cfg, group_size, attempt, tag,
                    ));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Tell the simulator which scenes the next batch needs. Best-effort: a
/// failed or ignored announcement must never fail training.
pub fn announce_next_batch(client: &dyn SimClient, episodes: &[&Episode]) {
    let mut ids: Vec<String> = episodes.iter().map(|e| e.scene_id.clone()).collect();
    ids.sort();
    ids.dedup();
    let _ = client.preload(&ids);
}

/// One line per trajectory in the on-disk rollout dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryLine {
    pub episode_id: String,
    pub path: Vec<(f64, f64)>,
    pub final_pose: Pose,
    pub stopped: bool,
    pub success: bool,
    pub min_goal_distance_seen: f64,
    pub primitive_steps: u32,
    pub status: RolloutStatus,
}

impl From<&Trajectory> for TrajectoryLine {
    fn from(t: &Trajectory) -> Self {
        TrajectoryLine {
            episode_id: t.episode_id.clone(),
            path: t.path.clone(),
            final_pose: t.final_pose,
            stopped: t.stopped,
            success: t.success,
            min_goal_distance_seen: t.min_goal_distance,
            primitive_steps: t.primitive_steps,
            status: t.status,
        }
    }
}

impl TrajectoryLine {
    pub fn record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            episode_id: self.episode_id.clone(),
            path: self.path.clone(),
            final_pose: self.final_pose,
            stopped: self.stopped,
            min_goal_distance_seen: self.min_goal_distance_seen,
        }
    }
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    for t in trajectories {
        let line = TrajectoryLine::from(t);
        writeln!(f, "{}", serde_json::to_string(&line).expect("serializable"))?;
    }
    Ok(())
}

pub fn read_trajectories(path: &Path) -> std::io::Result<Vec<TrajectoryLine>> {
    let body = std::fs::read_to_string(path)?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
        .collect()
}
