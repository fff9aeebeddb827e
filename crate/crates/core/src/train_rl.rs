//! Multi-turn GRPO fine-tuning: group-relative advantages, a clipped
//! surrogate with per-token length normalization, dynamic resampling of
//! all-failure groups, dynamic early stopping of rollouts, and scene
//! preload announcements one batch ahead.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;
use crate::optim::{adamw_step, AdamWConfig};
use crate::orchestrator::{
    announce_next_batch, collect_group, RolloutConfig, RolloutError, RolloutStatus, Trajectory,
};
use crate::policy::{Mode, OptimizerState, Policy, PolicyError, PolicyParams};
use crate::sim_client::SimClient;
use crate::taskgen::Episode;
use crate::world::SUCCESS_RADIUS_M;

pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;
/// Total reward scale; the success and path-alignment weights split it.
pub const REWARD_SCALE: f64 = 15.0;

#[derive(Debug, Error)]
pub enum RLError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RewardKind {
    /// 15 * success * (3 - d_goal) / 3: graded by how close the stop was.
    Soft,
    /// 15 * success.
    Hard,
    /// w_success * success * (3 - d_goal) / 3 + w_ndtw * nDTW.
    PathAlign { w_success: f64, w_ndtw: f64 },
}

#[derive(Debug, Clone)]
pub struct RLConfig {
    pub mode: Mode,
    pub steps: usize,
    /// Episodes (prompts) per batch.
    pub prompts_per_batch: usize,
    /// Trajectories per prompt.
    pub group_size: usize,
    pub clip_epsilon: f64,
    /// Reference-policy KL penalty weight. Only 0.0 is supported; the
    /// surrogate carries no reference model.
    pub kl_coefficient: f64,
    pub optimizer: AdamWConfig,
    pub reward: RewardKind,
    /// Score the soft reward literally as d_goal / 3 instead of
    /// (3 - d_goal) / 3, which rewards stopping *far* from the goal inside
    /// the success radius. Off by default.
    pub literal_soft_reward: bool,
    /// Early-stop multiplier; `None` disables rollout truncation.
    pub alpha_roll: Option<f64>,
    /// Total sampling attempts per group (1 = no dynamic resampling).
    pub max_resample_attempts: usize,
    pub temperature: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            mode: Mode::MultiTurn,
            steps: 300,
            prompts_per_batch: 8,
            group_size: 4,
            clip_epsilon: 0.28,
            kl_coefficient: 0.0,
            optimizer: AdamWConfig {
                lr: 1e-5,
                weight_decay: 0.0,
                ..Default::default()
            },
            reward: RewardKind::Soft,
            literal_soft_reward: false,
            alpha_roll: Some(2.0),
            max_resample_attempts: 2,
            temperature: 1.0,
            seed: 0,
            workers: 8,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<(), RLError> {
        if self.kl_coefficient != 0.0 {
            return Err(RLError::Config(
                "kl_coefficient must be 0.0: no reference policy is kept".into(),
            ));
        }
        if self.group_size < 2 {
            return Err(RLError::Config("group_size must be >= 2".into()));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(RLError::Config("clip_epsilon must be in (0, 1)".into()));
        }
        if self.temperature <= 0.0 {
            return Err(RLError::Config("temperature must be positive".into()));
        }
        if self.max_resample_attempts == 0 {
            return Err(RLError::Config("max_resample_attempts must be >= 1".into()));
        }
        if let RewardKind::PathAlign { w_success, w_ndtw } = self.reward {
            if w_success < 0.0 || w_ndtw < 0.0 || (w_success + w_ndtw - REWARD_SCALE).abs() > 1e-9
            {
                return Err(RLError::Config(format!(
                    "path_align weights must be non-negative and sum to {REWARD_SCALE}"
                )));
            }
        }
        Ok(())
    }
}

fn closeness(d_goal: f64) -> f64 {
    ((SUCCESS_RADIUS_M - d_goal) / SUCCESS_RADIUS_M).clamp(0.0, 1.0)
}

pub fn compute_reward(
    reward: &RewardKind,
    literal_soft: bool,
    traj: &Trajectory,
    episode: &Episode,
) -> Result<f64, RLError> {
    let success = traj.success as u8 as f64;
    let shape = if literal_soft {
        (traj.d_goal / SUCCESS_RADIUS_M).clamp(0.0, 1.0)
    } else {
        closeness(traj.d_goal)
    };
    Ok(match reward {
        RewardKind::Soft => REWARD_SCALE * success * shape,
        RewardKind::Hard => REWARD_SCALE * success,
        RewardKind::PathAlign { w_success, w_ndtw } => {
            let ndtw = metrics::ndtw(&traj.record(), episode)?;
            w_success * success * shape + w_ndtw * ndtw
        }
    })
}

/// Group-relative advantages: (r - mean) / (population std + 1e-8). A group
/// with zero reward variance is degenerate and contributes no gradient.
pub fn group_advantages(rewards: &[f64]) -> (Vec<f64>, bool) {
    let n = rewards.len().max(1) as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let advantages = rewards
        .iter()
        .map(|r| (r - mean) / (std + ADVANTAGE_STD_FLOOR))
        .collect();
    (advantages, std == 0.0)
}

/// The per-token clipped surrogate term: min(r*A, clip(r, 1-eps, 1+eps)*A).
pub fn grpo_token_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Surrogate objective for one trajectory and the loss gradient w.r.t. each
/// new log-probability. The loss is the negative mean over tokens of the
/// clipped term, so `coeffs[t] = dL/dlogp_new_t` is `-A * r_t / |o|` where
/// the term is unclipped and exactly zero where clipping is active.
pub fn grpo_surrogate(
    new_logps: &[f64],
    old_logps: &[f64],
    advantage: f64,
    eps: f64,
) -> (f64, Vec<f64>) {
    assert_eq!(new_logps.len(), old_logps.len());
    let len = new_logps.len().max(1) as f64;
    let mut objective = 0.0;
    let mut coeffs = Vec::with_capacity(new_logps.len());
    for (new, old) in new_logps.iter().zip(old_logps) {
        let ratio = (new - old).exp();
        objective += grpo_token_objective(ratio, advantage, eps) / len;
        let unclipped = ratio * advantage;
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
        // gradient flows only through the unclipped branch of the min
        let active = unclipped <= clipped;
        coeffs.push(if active { -advantage * ratio / len } else { 0.0 });
    }
    (objective, coeffs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RLLogLine {
    pub step: usize,
    pub reward_mean: f64,
    pub sr_train: f64,
    pub episode_len_mean: f64,
    pub early_stop_rate: f64,
    pub degenerate_groups: usize,
    pub resampled_groups: usize,
    pub wall_time_rollout_s: f64,
    pub wall_time_update_s: f64,
    pub grad_norm: f64,
    pub tokens: usize,
}

fn batch_indices(seed: u64, step: usize, n: usize, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(k.min(n));
    idx
}

/// Sample a group, resampling the whole group while it has no success and
/// attempts remain. Returns the kept group and how many extra attempts ran.
fn sample_group(
    client: &dyn SimClient,
    params: &PolicyParams,
    episode: &Episode,
    roll: &RolloutConfig,
    cfg: &RLConfig,
    tag: &str,
) -> Result<(Vec<Trajectory>, usize), RolloutError> {
    let mut extra = 0;
    let mut group = collect_group(client, params, episode, roll, cfg.group_size, 0, tag)?;
    for attempt in 1..cfg.max_resample_attempts {
        if group.iter().any(|t| t.success) {
            break;
        }
        extra += 1;
        group = collect_group(client, params, episode, roll, cfg.group_size, attempt, tag)?;
    }
    Ok((group, extra))
}

/// One GRPO fine-tuning run. `log` receives one line per optimization step.
pub fn train_rl(
    params: &mut PolicyParams,
    opt: &mut OptimizerState,
    client: &dyn SimClient,
    train: &[Episode],
    cfg: &RLConfig,
    mut log: impl FnMut(&RLLogLine),
) -> Result<(), RLError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(RLError::Config("no training episodes".into()));
    }
    let roll = RolloutConfig {
        temperature: cfg.temperature,
        ..RolloutConfig::sampling(cfg.mode, cfg.alpha_roll)
    };
    for step in 1..=cfg.steps {
        let picked = batch_indices(cfg.seed, step, train.len(), cfg.prompts_per_batch);
        let episodes: Vec<&Episode> = picked.iter().map(|&i| &train[i]).collect();
        // hint the simulator about the following batch while this one rolls
        let next: Vec<&Episode> = batch_indices(cfg.seed, step + 1, train.len(), cfg.prompts_per_batch)
            .iter()
            .map(|&i| &train[i])
            .collect();
        announce_next_batch(client, &next);

        let t_roll = std::time::Instant::now();
        let groups = parallel_groups(client, params, &episodes, &roll, cfg, step)?;
        let wall_time_rollout_s = t_roll.elapsed().as_secs_f64();

        let t_update = std::time::Instant::now();
        let mut grad = vec![0.0; params.data.len()];
        let mut reward_sum = 0.0;
        let mut successes = 0usize;
        let mut len_sum = 0.0;
        let mut early_stops = 0usize;
        let mut degenerate_groups = 0usize;
        let mut resampled_groups = 0usize;
        let mut trajectories = 0usize;
        let mut contributing = Vec::new();
        let mut tokens = 0usize;
        for (episode, (group, extra)) in episodes.iter().zip(&groups) {
            resampled_groups += (*extra > 0) as usize;
            let rewards = group
                .iter()
                .map(|t| compute_reward(&cfg.reward, cfg.literal_soft_reward, t, episode))
                .collect::<Result<Vec<_>, _>>()?;
            let (advantages, degenerate) = group_advantages(&rewards);
            degenerate_groups += degenerate as usize;
            for (t, (r, a)) in group.iter().zip(rewards.iter().zip(&advantages)) {
                reward_sum += r;
                successes += t.success as usize;
                len_sum += t.primitive_steps as f64;
                early_stops += (t.status == RolloutStatus::EarlyStopped) as usize;
                trajectories += 1;
                tokens += t.token_count();
                if !degenerate {
                    contributing.push((t, *a));
                }
            }
        }
        // average the surrogate over contributing trajectories
        let denom = contributing.len().max(1) as f64;
        for (t, advantage) in contributing {
            let (tape, trace) =
                Policy::score_trajectory(params, &t.turns, cfg.mode, cfg.temperature)?;
            let (_, mut coeffs) =
                grpo_surrogate(&trace.logps, &t.trace.logps, advantage, cfg.clip_epsilon);
            for c in &mut coeffs {
                *c /= denom;
            }
            Policy::backward(params, &tape, &coeffs, &mut grad);
        }
        let grad_norm = adamw_step(&cfg.optimizer, params, opt, &mut grad);
        let wall_time_update_s = t_update.elapsed().as_secs_f64();
        let n = trajectories.max(1) as f64;
        log(&RLLogLine {
            step,
            reward_mean: reward_sum / n,
            sr_train: successes as f64 / n,
            episode_len_mean: len_sum / n,
            early_stop_rate: early_stops as f64 / n,
            degenerate_groups,
            resampled_groups,
            wall_time_rollout_s,
            wall_time_update_s,
            grad_norm,
            tokens,
        });
    }
    Ok(())
}

/// Roll all groups of a batch across worker lanes, preserving order.
fn parallel_groups(
    client: &dyn SimClient,
    params: &PolicyParams,
    episodes: &[&Episode],
    roll: &RolloutConfig,
    cfg: &RLConfig,
    step: usize,
) -> Result<Vec<(Vec<Trajectory>, usize)>, RolloutError> {
    let workers = cfg.workers.max(1).min(episodes.len().max(1));
    let mut results: Vec<Option<Result<(Vec<Trajectory>, usize), RolloutError>>> =
        (0..episodes.len()).map(|_| None).collect();
    let per = episodes.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let mut rest = results.as_mut_slice();
        let mut lane = 0usize;
        while !rest.is_empty() {
            let take = per.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            let offset = lane * per;
            scope.spawn(move || {
                for (i, out) in head.iter_mut().enumerate() {
                    let episode = episodes[offset + i];
                    let tag = format!("rl{step}p{}", offset + i);
                    *out = Some(sample_group(client, params, episode, roll, cfg, &tag));
                }
            });
            rest = tail;
            lane += 1;
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
