//! Imitation-learning bootstrap: behavior cloning of the shortest-path
//! expert under the token grammar, with greedy validation rollouts.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{adamw_step, AdamWConfig};
use crate::orchestrator::{rollout_episode, RolloutConfig, RolloutError};
use crate::policy::{
    action_to_token, encode_observation, Mode, OptimizerState, Policy, PolicyError, PolicyParams,
    TOKEN_EOT, TOKEN_STOP,
};
use crate::scene::{Scene, SceneError};
use crate::sim_client::SimClient;
use crate::taskgen::Episode;
use crate::world::{apply_merged, observe, EpisodeState, WorldError};

#[derive(Debug, Error)]
pub enum ILError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("episode {0} references unknown scene {1}")]
    MissingScene(String, String),
}

#[derive(Debug, Clone)]
pub struct ILConfig {
    pub mode: Mode,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Validate every N steps (0 disables validation rollouts).
    pub val_every: usize,
    pub val_episodes: usize,
}

impl Default for ILConfig {
    fn default() -> Self {
        ILConfig {
            mode: Mode::MultiTurn,
            steps: 400,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 1e-4,
                ..Default::default()
            },
            seed: 0,
            val_every: 100,
            val_episodes: 40,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ILLogLine {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_sr: Option<f64>,
}

/// Split the expert's merged actions into turn token sequences: at most
/// three action tokens per turn followed by EOT, except that STOP ends its
/// turn (and the episode) by itself.
pub fn expert_token_turns(episode: &Episode) -> Vec<Vec<u8>> {
    let mut turns = Vec::new();
    let mut current: Vec<u8> = Vec::new();
    for action in &episode.expert_actions {
        let tok = action_to_token(*action);
        current.push(tok);
        if tok == TOKEN_STOP {
            turns.push(std::mem::take(&mut current));
        } else if current.len() == 3 {
            current.push(TOKEN_EOT);
            turns.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        current.push(TOKEN_EOT);
        turns.push(current);
    }
    turns
}

/// Replay the expert through the world to pair each turn with the
/// observation features the policy would have seen.
pub fn expert_turns(
    scene: &Scene,
    episode: &Episode,
) -> Result<Vec<(Vec<f64>, Vec<u8>)>, ILError> {
    let token_turns = expert_token_turns(episode);
    let mut state = EpisodeState::new(
        episode.episode_id.clone(),
        scene,
        episode.start,
        episode.goal,
        episode.instruction.clone(),
    )?;
    let mut out = Vec::with_capacity(token_turns.len());
    for tokens in token_turns {
        let feats = encode_observation(&observe(&state, scene)?);
        for &tok in &tokens {
            if tok == TOKEN_EOT {
                continue;
            }
            let action = crate::policy::token_to_action(tok).expect("expert token");
            apply_merged(&mut state, scene, action)?;
        }
        out.push((feats, tokens));
    }
    Ok(out)
}

/// Mean over the batch of per-episode summed negative log-likelihood, with
/// gradients accumulated into `grad`.
pub fn il_loss_and_grad(
    params: &PolicyParams,
    batch: &[&Vec<(Vec<f64>, Vec<u8>)>],
    mode: Mode,
    grad: &mut [f64],
) -> Result<f64, PolicyError> {
    let b = batch.len().max(1) as f64;
    let mut loss = 0.0;
    for turns in batch {
        let (tape, trace) = Policy::score_trajectory(params, turns, mode, 1.0)?;
        loss += -trace.logps.iter().sum::<f64>() / b;
        let coeffs = vec![-1.0 / b; trace.logps.len()];
        Policy::backward(params, &tape, &coeffs, grad);
    }
    Ok(loss)
}

/// Greedy success rate over a slice of episodes.
pub fn greedy_success_rate(
    client: &dyn SimClient,
    params: &PolicyParams,
    episodes: &[Episode],
    mode: Mode,
    tag: &str,
) -> Result<f64, RolloutError> {
    if episodes.is_empty() {
        return Ok(0.0);
    }
    let cfg = RolloutConfig::greedy_eval(mode);
    let mut wins = 0usize;
    for (i, ep) in episodes.iter().enumerate() {
        let sid = format!("{}--{tag}-{i}", ep.episode_id);
        let t = rollout_episode(client, params, ep, &cfg, 0, &sid)?;
        wins += t.success as usize;
    }
    Ok(wins as f64 / episodes.len() as f64)
}

/// Behavior cloning. `val` optionally provides a simulator client and
/// held-out episodes for periodic greedy validation. `log` receives one line
/// per step.
pub fn train_il(
    params: &mut PolicyParams,
    opt: &mut OptimizerState,
    scenes: &HashMap<String, Arc<Scene>>,
    train: &[Episode],
    val: Option<(&dyn SimClient, &[Episode])>,
    cfg: &ILConfig,
    mut log: impl FnMut(&ILLogLine),
) -> Result<(), ILError> {
    let mut prepared = Vec::with_capacity(train.len());
    for ep in train {
        let scene = scenes.get(&ep.scene_id).ok_or_else(|| {
            ILError::MissingScene(ep.episode_id.clone(), ep.scene_id.clone())
        })?;
        prepared.push(expert_turns(scene, ep)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..prepared.len()).collect();
    for step in 1..=cfg.steps {
        indices.shuffle(&mut rng);
        let batch: Vec<&Vec<(Vec<f64>, Vec<u8>)>> = indices
            .iter()
            .take(cfg.batch_size.min(prepared.len()))
            .map(|&i| &prepared[i])
            .collect();
        let mut grad = vec![0.0; params.data.len()];
        let loss = il_loss_and_grad(params, &batch, cfg.mode, &mut grad)?;
        let grad_norm = adamw_step(&cfg.optimizer, params, opt, &mut grad);
        let mut val_sr = None;
        if cfg.val_every > 0 && step % cfg.val_every == 0 {
            if let Some((client, val_eps)) = val {
                let n = cfg.val_episodes.min(val_eps.len());
                val_sr = Some(greedy_success_rate(
                    client,
                    params,
                    &val_eps[..n],
                    cfg.mode,
                    &format!("ilval{step}"),
                )?);
            }
        }
        log(&ILLogLine {
            step,
            loss,
            lr: cfg.optimizer.lr,
            grad_norm,
            val_sr,
        });
    }
    Ok(())
}
