//! Compact recurrent instruction-conditioned policy over merged-action
//! tokens, with hand-rolled reverse-mode differentiation and versioned
//! binary checkpoints.
//!
//! The network is: a two-layer tanh observation encoder, a gated recurrent
//! cell (GRU, hidden width 128 by default), and an affine head over the
//! 11-token vocabulary {F1..F3, L1..L3, R1..R3, S, EOT}. A turn encodes one
//! observation and then autoregressively emits up to three action tokens
//! followed by EOT (or S, which terminates the episode). In multi-turn mode
//! sampled-token embeddings are fed back into the recurrent state; in
//! single-turn mode the recurrent state sees a zero vector instead, so the
//! two modes coincide exactly when the token-embedding table is zero.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::world::{ActionKind, MergedAction, Observation, MAX_INSTRUCTION_TOKENS, PATCH_SIZE};

pub const VOCAB_SIZE: usize = 11;
pub const TOKEN_STOP: u8 = 9;
pub const TOKEN_EOT: u8 = 10;
/// Maximum action tokens per turn before EOT is forced by the grammar mask.
pub const MAX_ACTIONS_PER_TURN: usize = 3;

pub const TOKEN_NAMES: [&str; VOCAB_SIZE] = [
    "F1", "F2", "F3", "L1", "L2", "L3", "R1", "R2", "R3", "S", "EOT",
];

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite logits encountered")]
    NumericFault,
    #[error("token {0} outside vocabulary")]
    BadToken(u8),
    #[error("turn token sequence malformed: {0}")]
    BadTurn(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Conditioning mode. See module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MultiTurn,
    SingleTurn,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "multi_turn" | "multi" => Some(Mode::MultiTurn),
            "single_turn" | "single" => Some(Mode::SingleTurn),
            _ => None,
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            Mode::MultiTurn => "multi_turn",
            Mode::SingleTurn => "single_turn",
        }
    }
}

pub fn token_to_action(token: u8) -> Option<MergedAction> {
    match token {
        0..=2 => MergedAction::new(ActionKind::Forward, token + 1),
        3..=5 => MergedAction::new(ActionKind::Left, token - 2),
        6..=8 => MergedAction::new(ActionKind::Right, token - 5),
        9 => Some(MergedAction::stop()),
        _ => None,
    }
}

pub fn action_to_token(action: MergedAction) -> u8 {
    match action.kind {
        ActionKind::Forward => action.magnitude - 1,
        ActionKind::Left => 2 + action.magnitude,
        ActionKind::Right => 5 + action.magnitude,
        ActionKind::Stop => TOKEN_STOP,
    }
}

// ---- observation features ----------------------------------------------------

const PATCH_DIM: usize = PATCH_SIZE * PATCH_SIZE;
const SLOT_DIM: usize = 6; // present, landmark id, relation one-hot(4)
/// Input feature width of the observation encoder.
pub const OBS_DIM: usize = PATCH_DIM + 3 + MAX_INSTRUCTION_TOKENS * SLOT_DIM + 2;

const DIST_SCALE_M: f64 = 15.0;
const LANDMARK_ID_SCALE: f64 = 32.0;

/// Fixed-length numeric encoding of an observation.
pub fn encode_observation(obs: &Observation) -> Vec<f64> {
    let mut x = Vec::with_capacity(OBS_DIM);
    for row in &obs.patch_rows {
        for ch in row.bytes() {
            x.push(if ch == b'1' { 1.0 } else { 0.0 });
        }
    }
    let d = if obs.goal_distance.is_finite() {
        (obs.goal_distance / DIST_SCALE_M).min(1.0)
    } else {
        1.0
    };
    x.push(d);
    let rad = obs.goal_bearing.to_radians();
    x.push(rad.sin());
    x.push(rad.cos());
    for slot in 0..MAX_INSTRUCTION_TOKENS {
        match obs.instruction_tokens.get(slot) {
            Some(t) => {
                x.push(1.0);
                x.push((t.landmark_id as f64 % LANDMARK_ID_SCALE) / LANDMARK_ID_SCALE);
                let mut onehot = [0.0; 4];
                onehot[t.relation as usize] = 1.0;
                x.extend_from_slice(&onehot);
            }
            None => x.extend_from_slice(&[0.0; SLOT_DIM]),
        }
    }
    let len = obs.instruction_tokens.len().max(1) as f64;
    x.push(obs.instruction_cursor as f64 / len);
    x.push(if obs.collision { 1.0 } else { 0.0 });
    debug_assert_eq!(x.len(), OBS_DIM);
    x
}

// ---- parameters ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub obs_dim: usize,
    pub enc_hidden: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        PolicyDims {
            obs_dim: OBS_DIM,
            enc_hidden: 128,
            embed: 64,
            hidden: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl PolicyDims {
    /// Flat parameter layout: name, rows, cols, offset.
    pub fn tensors(&self) -> Vec<TensorSpec> {
        let d = *self;
        let shapes: [(&'static str, usize, usize); 14] = [
            ("w1", d.enc_hidden, d.obs_dim),
            ("b1", d.enc_hidden, 1),
            ("w2", d.embed, d.enc_hidden),
            ("b2", d.embed, 1),
            ("emb", VOCAB_SIZE, d.embed),
            ("wz", d.hidden, d.embed),
            ("uz", d.hidden, d.hidden),
            ("bz", d.hidden, 1),
            ("wr", d.hidden, d.embed),
            ("ur", d.hidden, d.hidden),
            ("br", d.hidden, 1),
            ("wc", d.hidden, d.embed),
            ("uc", d.hidden, d.hidden),
            ("bc", d.hidden, 1),
        ];
        let mut out = Vec::with_capacity(16);
        let mut offset = 0;
        for (name, rows, cols) in shapes {
            out.push(TensorSpec {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        }
        out.push(TensorSpec {
            name: "wo",
            rows: VOCAB_SIZE,
            cols: d.hidden,
            offset,
        });
        offset += VOCAB_SIZE * d.hidden;
        out.push(TensorSpec {
            name: "bo",
            rows: VOCAB_SIZE,
            cols: 1,
            offset,
        });
        out
    }

    pub fn param_count(&self) -> usize {
        let last = self.tensors();
        let t = last.last().unwrap();
        t.offset + t.rows * t.cols
    }
}

/// All learnable values as one flat vector. Values are always kept exactly
/// representable in f32 so checkpoints round-trip bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub data: Vec<f64>,
}

impl PolicyParams {
    pub fn init(dims: PolicyDims, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; dims.param_count()];
        for t in dims.tensors() {
            if t.cols == 1 {
                continue; // biases start at zero
            }
            let bound = 1.0 / (t.cols as f64).sqrt();
            for v in &mut data[t.offset..t.offset + t.rows * t.cols] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        let mut params = PolicyParams { dims, data };
        // update-gate bias +1.0 for stable early training
        let bz = params.tensor_range("bz");
        for v in &mut params.data[bz] {
            *v = 1.0;
        }
        params.quantize_f32();
        params
    }

    pub fn tensor_range(&self, name: &str) -> std::ops::Range<usize> {
        let t = self
            .dims
            .tensors()
            .into_iter()
            .find(|t| t.name == name)
            .expect("known tensor name");
        t.offset..t.offset + t.rows * t.cols
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        &self.data[self.tensor_range(name)]
    }

    /// Round every value to the nearest f32. Called after init and after
    /// every optimizer update.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---- forward/backward machinery ------------------------------------------------

fn mat_vec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn mat_t_vec_add(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let g = dy[r];
        if g != 0.0 {
            for (c, wv) in row.iter().enumerate() {
                dx[c] += wv * g;
            }
        }
    }
}

fn outer_add(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    for r in 0..rows {
        let g = dy[r];
        if g != 0.0 {
            let row = &mut dw[r * cols..(r + 1) * cols];
            for (c, xv) in x.iter().enumerate() {
                row[c] += g * xv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
struct EncCache {
    x: Vec<f64>,
    h1: Vec<f64>,
    e: Vec<f64>,
}

#[derive(Debug, Clone)]
enum GruInput {
    Obs(EncCache),
    Token(u8),
    Zero,
}

#[derive(Debug, Clone)]
struct GruCache {
    input: GruInput,
    u: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SampleCache {
    probs: Vec<f64>,
    token: u8,
    temperature: f64,
}

/// Recorded forward pass of one trajectory: one GRU step plus one sampling
/// point per emitted token.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    steps: Vec<(GruCache, SampleCache)>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
    pub fn tokens(&self) -> Vec<u8> {
        self.steps.iter().map(|(_, s)| s.token).collect()
    }
}

/// Per-token log-probabilities aligned with emission order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LogProbTrace {
    pub logps: Vec<f64>,
}

/// Recurrent context across turns of one episode.
#[derive(Debug, Clone)]
pub struct TurnContext {
    pub hidden: Vec<f64>,
}

impl TurnContext {
    pub fn fresh(dims: &PolicyDims) -> Self {
        TurnContext {
            hidden: vec![0.0; dims.hidden],
        }
    }
}

pub struct Policy;

impl Policy {
    fn encode(params: &PolicyParams, x: &[f64]) -> EncCache {
        let d = params.dims;
        let mut a1 = vec![0.0; d.enc_hidden];
        mat_vec(params.tensor("w1"), d.enc_hidden, d.obs_dim, x, &mut a1);
        let b1 = params.tensor("b1");
        let h1: Vec<f64> = a1.iter().zip(b1).map(|(a, b)| (a + b).tanh()).collect();
        let mut a2 = vec![0.0; d.embed];
        mat_vec(params.tensor("w2"), d.embed, d.enc_hidden, &h1, &mut a2);
        let b2 = params.tensor("b2");
        let e: Vec<f64> = a2.iter().zip(b2).map(|(a, b)| (a + b).tanh()).collect();
        EncCache {
            x: x.to_vec(),
            h1,
            e,
        }
    }

    fn gru(params: &PolicyParams, h_prev: &[f64], input: GruInput) -> GruCache {
        let d = params.dims;
        let u: Vec<f64> = match &input {
            GruInput::Obs(enc) => enc.e.clone(),
            GruInput::Token(t) => {
                let emb = params.tensor("emb");
                emb[*t as usize * d.embed..(*t as usize + 1) * d.embed].to_vec()
            }
            GruInput::Zero => vec![0.0; d.embed],
        };
        let gate = |w: &str, uu: &str, b: &str, hin: &[f64]| -> Vec<f64> {
            let mut a = vec![0.0; d.hidden];
            mat_vec(params.tensor(w), d.hidden, d.embed, &u, &mut a);
            let mut ah = vec![0.0; d.hidden];
            mat_vec(params.tensor(uu), d.hidden, d.hidden, hin, &mut ah);
            let bias = params.tensor(b);
            (0..d.hidden).map(|i| a[i] + ah[i] + bias[i]).collect()
        };
        let z: Vec<f64> = gate("wz", "uz", "bz", h_prev)
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = gate("wr", "ur", "br", h_prev)
            .into_iter()
            .map(sigmoid)
            .collect();
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let c: Vec<f64> = gate("wc", "uc", "bc", &rh)
            .into_iter()
            .map(|v| v.tanh())
            .collect();
        let h: Vec<f64> = (0..d.hidden)
            .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * c[i])
            .collect();
        GruCache {
            input,
            u,
            h_prev: h_prev.to_vec(),
            z,
            r,
            c,
            h,
        }
    }

    /// Masked, temperature-scaled token distribution at hidden state `h`.
    /// Uses max-subtraction for numeric stability; masked entries have
    /// probability exactly zero.
    fn token_probs(
        params: &PolicyParams,
        h: &[f64],
        n_actions_emitted: usize,
        temperature: f64,
    ) -> Result<Vec<f64>, PolicyError> {
        let d = params.dims;
        let mut logits = vec![0.0; VOCAB_SIZE];
        mat_vec(params.tensor("wo"), VOCAB_SIZE, d.hidden, h, &mut logits);
        for (l, b) in logits.iter_mut().zip(params.tensor("bo")) {
            *l += b;
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NumericFault);
        }
        let force_eot = n_actions_emitted >= MAX_ACTIONS_PER_TURN;
        let tau = if temperature > 0.0 { temperature } else { 1.0 };
        let allowed = |j: usize| !force_eot || j == TOKEN_EOT as usize;
        let max = (0..VOCAB_SIZE)
            .filter(|&j| allowed(j))
            .map(|j| logits[j] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; VOCAB_SIZE];
        let mut total = 0.0;
        for j in 0..VOCAB_SIZE {
            if allowed(j) {
                probs[j] = ((logits[j] / tau) - max).exp();
                total += probs[j];
            }
        }
        for p in &mut probs {
            *p /= total;
        }
        Ok(probs)
    }

    /// Run one turn: encode the observation, then emit tokens until EOT, S,
    /// or the grammar forces EOT. `forced` replays a recorded token sequence
    /// (teacher forcing); otherwise tokens are sampled with `rng`.
    #[allow(clippy::too_many_arguments)]
    fn run_turn(
        params: &PolicyParams,
        ctx: &mut TurnContext,
        obs_features: &[f64],
        mode: Mode,
        temperature: f64,
        rng: Option<&mut ChaCha8Rng>,
        forced: Option<&[u8]>,
        tape: &mut Tape,
    ) -> Result<Vec<u8>, PolicyError> {
        let mut rng = rng;
        let enc = Self::encode(params, obs_features);
        let mut gru = Self::gru(params, &ctx.hidden, GruInput::Obs(enc));
        let mut emitted: Vec<u8> = Vec::new();
        let mut n_actions = 0usize;
        loop {
            let probs = Self::token_probs(params, &gru.h, n_actions, temperature)?;
            let token = match forced {
                Some(seq) => {
                    let t = *seq.get(emitted.len()).ok_or_else(|| {
                        PolicyError::BadTurn("turn shorter than forward pass expects".into())
                    })?;
                    if t as usize >= VOCAB_SIZE {
                        return Err(PolicyError::BadToken(t));
                    }
                    if probs[t as usize] <= 0.0 {
                        return Err(PolicyError::BadTurn(format!(
                            "token {} has zero probability under the grammar mask",
                            TOKEN_NAMES[t as usize]
                        )));
                    }
                    t
                }
                None => match &mut rng {
                    Some(rng) => sample_index(&probs, rng) as u8,
                    None => argmax(&probs) as u8,
                },
            };
            let h_after = gru.h.clone();
            tape.steps.push((
                gru,
                SampleCache {
                    probs,
                    token,
                    temperature,
                },
            ));
            emitted.push(token);
            if token == TOKEN_EOT || token == TOKEN_STOP {
                ctx.hidden = h_after;
                break;
            }
            n_actions += 1;
            let input = match mode {
                Mode::MultiTurn => GruInput::Token(token),
                Mode::SingleTurn => GruInput::Zero,
            };
            gru = Self::gru(params, &h_after, input);
        }
        if let Some(seq) = forced {
            if seq.len() != emitted.len() {
                return Err(PolicyError::BadTurn(format!(
                    "recorded turn has {} tokens, forward pass ended after {}",
                    seq.len(),
                    emitted.len()
                )));
            }
        }
        Ok(emitted)
    }

    /// Sample one turn. Temperature 0 decodes greedily.
    pub fn step_turn(
        params: &PolicyParams,
        ctx: &mut TurnContext,
        obs_features: &[f64],
        mode: Mode,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<u8>, LogProbTrace), PolicyError> {
        let mut tape = Tape::default();
        let rng_opt = if temperature > 0.0 { Some(rng) } else { None };
        let tokens = Self::run_turn(
            params,
            ctx,
            obs_features,
            mode,
            temperature,
            rng_opt,
            None,
            &mut tape,
        )?;
        Ok((tokens, trace_of(&tape)))
    }

    /// Teacher-forced forward over a whole trajectory: per-turn observation
    /// features and recorded tokens. Returns the tape (for backward) and the
    /// log-prob trace of every recorded token.
    pub fn score_trajectory(
        params: &PolicyParams,
        turns: &[(Vec<f64>, Vec<u8>)],
        mode: Mode,
        temperature: f64,
    ) -> Result<(Tape, LogProbTrace), PolicyError> {
        let mut tape = Tape::default();
        let mut ctx = TurnContext::fresh(&params.dims);
        for (obs, tokens) in turns {
            if tokens.is_empty() {
                return Err(PolicyError::BadTurn("empty turn".into()));
            }
            Self::run_turn(
                params,
                &mut ctx,
                obs,
                mode,
                temperature,
                None,
                Some(tokens),
                &mut tape,
            )?;
        }
        let trace = trace_of(&tape);
        Ok((tape, trace))
    }

    /// Reverse-mode differentiation through a recorded trajectory.
    /// `dloss_dlogp[t]` is the derivative of the scalar loss w.r.t. the
    /// log-probability of the t-th emitted token; gradients accumulate into
    /// `grad` (same layout as the parameter vector).
    pub fn backward(params: &PolicyParams, tape: &Tape, dloss_dlogp: &[f64], grad: &mut [f64]) {
        assert_eq!(tape.steps.len(), dloss_dlogp.len());
        assert_eq!(grad.len(), params.data.len());
        let d = params.dims;
        let specs: std::collections::HashMap<&str, TensorSpec> = d
            .tensors()
            .into_iter()
            .map(|t| (t.name, t))
            .collect();
        let g = |name: &str| {
            let t = specs[name];
            (t.offset, t.rows, t.cols)
        };

        let mut dh = vec![0.0; d.hidden];
        for (step_idx, (gru, sample)) in tape.steps.iter().enumerate().rev() {
            let coeff = dloss_dlogp[step_idx];
            // head backward: dL/dlogits_j = coeff * (delta_j,tok - p_j) / tau
            if coeff != 0.0 {
                let tau = if sample.temperature > 0.0 {
                    sample.temperature
                } else {
                    1.0
                };
                let mut dlogits = vec![0.0; VOCAB_SIZE];
                for j in 0..VOCAB_SIZE {
                    let delta = if j == sample.token as usize { 1.0 } else { 0.0 };
                    dlogits[j] = coeff * (delta - sample.probs[j]) / tau;
                }
                let (wo_off, wo_r, wo_c) = g("wo");
                outer_add(&mut grad[wo_off..wo_off + wo_r * wo_c], wo_r, wo_c, &dlogits, &gru.h);
                let (bo_off, ..) = g("bo");
                for (j, dv) in dlogits.iter().enumerate() {
                    grad[bo_off + j] += dv;
                }
                mat_t_vec_add(params.tensor("wo"), VOCAB_SIZE, d.hidden, &dlogits, &mut dh);
            }

            // GRU backward
            let mut dz = vec![0.0; d.hidden];
            let mut dc = vec![0.0; d.hidden];
            let mut dh_prev = vec![0.0; d.hidden];
            for i in 0..d.hidden {
                dz[i] = dh[i] * (gru.c[i] - gru.h_prev[i]);
                dc[i] = dh[i] * gru.z[i];
                dh_prev[i] = dh[i] * (1.0 - gru.z[i]);
            }
            let dac: Vec<f64> = (0..d.hidden)
                .map(|i| dc[i] * (1.0 - gru.c[i] * gru.c[i]))
                .collect();
            let daz: Vec<f64> = (0..d.hidden)
                .map(|i| dz[i] * gru.z[i] * (1.0 - gru.z[i]))
                .collect();
            let rh: Vec<f64> = (0..d.hidden).map(|i| gru.r[i] * gru.h_prev[i]).collect();

            let mut drh = vec![0.0; d.hidden];
            mat_t_vec_add(params.tensor("uc"), d.hidden, d.hidden, &dac, &mut drh);
            let dr: Vec<f64> = (0..d.hidden).map(|i| drh[i] * gru.h_prev[i]).collect();
            for i in 0..d.hidden {
                dh_prev[i] += drh[i] * gru.r[i];
            }
            let dar: Vec<f64> = (0..d.hidden)
                .map(|i| dr[i] * gru.r[i] * (1.0 - gru.r[i]))
                .collect();

            let mut du = vec![0.0; d.embed];
            for (w_name, u_name, b_name, da, hin) in [
                ("wz", "uz", "bz", &daz, &gru.h_prev),
                ("wr", "ur", "br", &dar, &gru.h_prev),
                ("wc", "uc", "bc", &dac, &rh),
            ] {
                let (w_off, w_r, w_c) = g(w_name);
                outer_add(&mut grad[w_off..w_off + w_r * w_c], w_r, w_c, da, &gru.u);
                let (u_off, u_r, u_c) = g(u_name);
                outer_add(&mut grad[u_off..u_off + u_r * u_c], u_r, u_c, da, hin);
                let (b_off, ..) = g(b_name);
                for (i, v) in da.iter().enumerate() {
                    grad[b_off + i] += v;
                }
                mat_t_vec_add(params.tensor(w_name), d.hidden, d.embed, da, &mut du);
                if w_name != "wc" {
                    mat_t_vec_add(params.tensor(u_name), d.hidden, d.hidden, da, &mut dh_prev);
                } else {
                    // uc feeds r*h_prev, handled through drh above
                }
            }

            match &gru.input {
                GruInput::Obs(enc) => {
                    // e = tanh(a2); a2 = w2 h1 + b2; h1 = tanh(a1); a1 = w1 x + b1
                    let da2: Vec<f64> = (0..d.embed)
                        .map(|i| du[i] * (1.0 - enc.e[i] * enc.e[i]))
                        .collect();
                    let (w2_off, w2_r, w2_c) = g("w2");
                    outer_add(&mut grad[w2_off..w2_off + w2_r * w2_c], w2_r, w2_c, &da2, &enc.h1);
                    let (b2_off, ..) = g("b2");
                    for (i, v) in da2.iter().enumerate() {
                        grad[b2_off + i] += v;
                    }
                    let mut dh1 = vec![0.0; d.enc_hidden];
                    mat_t_vec_add(params.tensor("w2"), d.embed, d.enc_hidden, &da2, &mut dh1);
                    let da1: Vec<f64> = (0..d.enc_hidden)
                        .map(|i| dh1[i] * (1.0 - enc.h1[i] * enc.h1[i]))
                        .collect();
                    let (w1_off, w1_r, w1_c) = g("w1");
                    outer_add(&mut grad[w1_off..w1_off + w1_r * w1_c], w1_r, w1_c, &da1, &enc.x);
                    let (b1_off, ..) = g("b1");
                    for (i, v) in da1.iter().enumerate() {
                        grad[b1_off + i] += v;
                    }
                }
                GruInput::Token(tok) => {
                    let (emb_off, _, emb_c) = g("emb");
                    let base = emb_off + *tok as usize * emb_c;
                    for (i, v) in du.iter().enumerate() {
                        grad[base + i] += v;
                    }
                }
                GruInput::Zero => {}
            }
            dh = dh_prev;
        }
    }
}

fn trace_of(tape: &Tape) -> LogProbTrace {
    LogProbTrace {
        logps: tape
            .steps
            .iter()
            .map(|(_, s)| s.probs[s.token as usize].ln())
            .collect(),
    }
}

fn argmax(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

// ---- checkpoints -----------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"GNAVCKPT";
const CKPT_VERSION: u32 = 1;

/// Optimizer moments saved with a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn fresh(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn quantize_f32(&mut self) {
        for v in self.m.iter_mut().chain(self.v.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

fn push_f32_block(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn read_f32_block(bytes: &[u8], pos: &mut usize, n: usize) -> Result<Vec<f64>, PolicyError> {
    let need = n * 4;
    if *pos + need > bytes.len() {
        return Err(PolicyError::Checkpoint("truncated parameter block".into()));
    }
    let out = bytes[*pos..*pos + need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    *pos += need;
    Ok(out)
}

/// Versioned binary checkpoint: header (magic, version, mode, shape
/// manifest), raw little-endian f32 parameter and moment blocks, then a
/// SHA-256 checksum of everything before it.
pub fn save_checkpoint(
    params: &PolicyParams,
    opt: &OptimizerState,
    mode: Mode,
    path: &std::path::Path,
) -> Result<(), PolicyError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.push(match mode {
        Mode::MultiTurn => 0,
        Mode::SingleTurn => 1,
    });
    for v in [
        params.dims.obs_dim,
        params.dims.enc_hidden,
        params.dims.embed,
        params.dims.hidden,
        VOCAB_SIZE,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&opt.step.to_le_bytes());
    push_f32_block(&mut buf, &params.data);
    push_f32_block(&mut buf, &opt.m);
    push_f32_block(&mut buf, &opt.v);
    let checksum = Sha256::digest(&buf);
    buf.extend_from_slice(&checksum);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &std::path::Path,
) -> Result<(PolicyParams, OptimizerState, Mode), PolicyError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 + 4 + 1 + 20 + 8 + 32 {
        return Err(PolicyError::Checkpoint("file too short".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(PolicyError::Checkpoint("checksum mismatch".into()));
    }
    let mut pos = 0usize;
    if &body[..8] != CKPT_MAGIC {
        return Err(PolicyError::Checkpoint("bad magic".into()));
    }
    pos += 8;
    let version = u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap());
    pos += 4;
    if version != CKPT_VERSION {
        return Err(PolicyError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mode = match body[pos] {
        0 => Mode::MultiTurn,
        1 => Mode::SingleTurn,
        other => {
            return Err(PolicyError::Checkpoint(format!("unknown mode byte {other}")));
        }
    };
    pos += 1;
    let mut dims_raw = [0u32; 5];
    for d in &mut dims_raw {
        *d = u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap());
        pos += 4;
    }
    if dims_raw[4] as usize != VOCAB_SIZE {
        return Err(PolicyError::Checkpoint(format!(
            "vocabulary size {} does not match {}",
            dims_raw[4], VOCAB_SIZE
        )));
    }
    let dims = PolicyDims {
        obs_dim: dims_raw[0] as usize,
        enc_hidden: dims_raw[1] as usize,
        embed: dims_raw[2] as usize,
        hidden: dims_raw[3] as usize,
    };
    let step = u64::from_le_bytes(body[pos..pos + 8].try_into().unwrap());
    pos += 8;
    let n = dims.param_count();
    let data = read_f32_block(body, &mut pos, n)?;
    let m = read_f32_block(body, &mut pos, n)?;
    let v = read_f32_block(body, &mut pos, n)?;
    if pos != body.len() {
        return Err(PolicyError::Checkpoint("trailing bytes".into()));
    }
    Ok((
        PolicyParams { dims, data },
        OptimizerState { m, v, step },
        mode,
    ))
}

/// Guard used when a caller expects specific shapes (e.g. loading into a
/// configured trainer).
pub fn expect_dims(params: &PolicyParams, dims: PolicyDims) -> Result<(), PolicyError> {
    if params.dims != dims {
        return Err(PolicyError::Checkpoint(format!(
            "shape mismatch: checkpoint {:?} vs configured {:?}",
            params.dims, dims
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_dims() -> PolicyDims {
        PolicyDims {
            obs_dim: 7,
            enc_hidden: 5,
            embed: 4,
            hidden: 6,
        }
    }

    fn rand_obs(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let params = PolicyParams::init(tiny_dims(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = rand_obs(&mut rng, params.dims.hidden);
        for n in 0..=3 {
            let p = Policy::token_probs(&params, &h, n, 1.0).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_params_give_uniform_distribution() {
        let dims = tiny_dims();
        let params = PolicyParams {
            dims,
            data: vec![0.0; dims.param_count()],
        };
        let h = vec![0.0; dims.hidden];
        let p = Policy::token_probs(&params, &h, 0, 1.0).unwrap();
        for v in &p {
            assert!((v - 1.0 / VOCAB_SIZE as f64).abs() < 1e-12);
        }
        // each log-prob is exactly -ln(11)
        assert!((p[0].ln() + (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn fourth_token_is_forced_eot_with_probability_one() {
        let params = PolicyParams::init(tiny_dims(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = rand_obs(&mut rng, params.dims.hidden);
        let p = Policy::token_probs(&params, &h, MAX_ACTIONS_PER_TURN, 1.0).unwrap();
        assert_eq!(p[TOKEN_EOT as usize], 1.0);
        for (j, v) in p.iter().enumerate() {
            if j != TOKEN_EOT as usize {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn step_turn_is_deterministic_under_a_seed() {
        let params = PolicyParams::init(tiny_dims(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let obs = rand_obs(&mut rng, params.dims.obs_dim);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ctx = TurnContext::fresh(&params.dims);
            Policy::step_turn(&params, &mut ctx, &obs, Mode::MultiTurn, 1.0, &mut rng).unwrap()
        };
        let (t1, tr1) = run(42);
        let (t2, tr2) = run(42);
        assert_eq!(t1, t2);
        assert_eq!(tr1, tr2);
        // turns end with a terminator and have <= 4 tokens
        assert!(t1.len() <= 4);
        let last = *t1.last().unwrap();
        assert!(last == TOKEN_EOT || last == TOKEN_STOP);
    }

    #[test]
    fn greedy_decoding_is_shift_invariant() {
        let mut params = PolicyParams::init(tiny_dims(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = rand_obs(&mut rng, params.dims.obs_dim);
        let greedy = |params: &PolicyParams| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut ctx = TurnContext::fresh(&params.dims);
            Policy::step_turn(params, &mut ctx, &obs, Mode::MultiTurn, 0.0, &mut rng)
                .unwrap()
                .0
        };
        let before = greedy(&params);
        let bo = params.tensor_range("bo");
        for v in &mut params.data[bo] {
            *v += 3.25; // f32-exact constant
        }
        assert_eq!(before, greedy(&params));
    }

    #[test]
    fn rescoring_reproduces_the_sampling_trace() {
        let params = PolicyParams::init(tiny_dims(), 13);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obs1 = rand_obs(&mut rng, params.dims.obs_dim);
        let obs2 = rand_obs(&mut rng, params.dims.obs_dim);
        let mut ctx = TurnContext::fresh(&params.dims);
        let mut srng = ChaCha8Rng::seed_from_u64(17);
        let (t1, tr1) =
            Policy::step_turn(&params, &mut ctx, &obs1, Mode::MultiTurn, 1.0, &mut srng).unwrap();
        let ended = *t1.last().unwrap() == TOKEN_STOP;
        let mut turns = vec![(obs1, t1)];
        let mut full_trace = tr1.logps.clone();
        if !ended {
            let (t2, tr2) =
                Policy::step_turn(&params, &mut ctx, &obs2, Mode::MultiTurn, 1.0, &mut srng)
                    .unwrap();
            full_trace.extend(tr2.logps.iter());
            turns.push((obs2, t2));
        }
        let (_, scored) =
            Policy::score_trajectory(&params, &turns, Mode::MultiTurn, 1.0).unwrap();
        assert_eq!(scored.logps.len(), full_trace.len());
        for (a, b) in scored.logps.iter().zip(&full_trace) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn probability_one_token_has_zero_logp() {
        let dims = tiny_dims();
        let mut params = PolicyParams {
            dims,
            data: vec![0.0; dims.param_count()],
        };
        let bo = params.tensor_range("bo");
        params.data[bo][0] = 200.0; // dominate token F1
        let h = vec![0.0; dims.hidden];
        let p = Policy::token_probs(&params, &h, 0, 1.0).unwrap();
        assert_eq!(p[0].ln(), 0.0);
    }

    #[test]
    fn modes_match_when_token_embeddings_are_zero() {
        let mut params = PolicyParams::init(tiny_dims(), 23);
        let emb = params.tensor_range("emb");
        for v in &mut params.data[emb] {
            *v = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = rand_obs(&mut rng, params.dims.obs_dim);
        // force a specific multi-token turn through both modes and compare traces
        let turn = vec![0u8, 4u8, TOKEN_EOT];
        let turns = vec![(obs, turn)];
        let (_, tr_multi) =
            Policy::score_trajectory(&params, &turns, Mode::MultiTurn, 1.0).unwrap();
        let (_, tr_single) =
            Policy::score_trajectory(&params, &turns, Mode::SingleTurn, 1.0).unwrap();
        for (a, b) in tr_multi.logps.iter().zip(&tr_single.logps) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..10 {
            let params = PolicyParams::init(dims, 1000 + trial);
            let obs1 = rand_obs(&mut rng, dims.obs_dim);
            let obs2 = rand_obs(&mut rng, dims.obs_dim);
            let turns = vec![
                (obs1, vec![1u8, 3u8, 0u8, TOKEN_EOT]),
                (obs2, vec![6u8, TOKEN_STOP]),
            ];
            let mode = if trial % 2 == 0 {
                Mode::MultiTurn
            } else {
                Mode::SingleTurn
            };
            // loss = weighted sum of token logps
            let weights: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |p: &PolicyParams| -> f64 {
                let (_, tr) = Policy::score_trajectory(p, &turns, mode, 1.0).unwrap();
                tr.logps.iter().zip(&weights).map(|(l, w)| l * w).sum()
            };
            let (tape, _) = Policy::score_trajectory(&params, &turns, mode, 1.0).unwrap();
            let mut grad = vec![0.0; params.data.len()];
            Policy::backward(&params, &tape, &weights, &mut grad);

            for _ in 0..12 {
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
                    "trial {trial} idx {idx}: fd {fd} vs analytic {}",
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn zero_coefficients_give_zero_gradients() {
        let dims = tiny_dims();
        let params = PolicyParams::init(dims, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let obs = rand_obs(&mut rng, dims.obs_dim);
        let turns = vec![(obs, vec![0u8, TOKEN_EOT])];
        let (tape, _) = Policy::score_trajectory(&params, &turns, Mode::MultiTurn, 1.0).unwrap();
        let mut grad = vec![0.0; params.data.len()];
        Policy::backward(&params, &tape, &[0.0, 0.0], &mut grad);
        assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let dims = tiny_dims();
        let params = PolicyParams::init(dims, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let obs = rand_obs(&mut rng, dims.obs_dim);
        let turns = vec![(obs, vec![2u8, 7u8, TOKEN_EOT])];
        let (tape, _) = Policy::score_trajectory(&params, &turns, Mode::MultiTurn, 1.0).unwrap();
        let mut ga = vec![0.0; params.data.len()];
        Policy::backward(&params, &tape, &[1.0, 0.0, 0.0], &mut ga);
        let mut gb = vec![0.0; params.data.len()];
        Policy::backward(&params, &tape, &[0.0, 1.0, 0.5], &mut gb);
        let mut gsum = vec![0.0; params.data.len()];
        Policy::backward(&params, &tape, &[1.0, 1.0, 0.5], &mut gsum);
        for i in 0..ga.len() {
            assert!((ga[i] + gb[i] - gsum[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let params = PolicyParams::init(PolicyDims::default(), 21);
        let mut opt = OptimizerState::fresh(params.data.len());
        opt.step = 17;
        opt.m[3] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&params, &opt, Mode::MultiTurn, &path).unwrap();
        let (p2, o2, mode) = load_checkpoint(&path).unwrap();
        assert_eq!(params, p2);
        assert_eq!(opt, o2);
        assert_eq!(mode, Mode::MultiTurn);
    }

    #[test]
    fn corrupted_checkpoint_fails_checksum() {
        let params = PolicyParams::init(tiny_dims(), 2);
        let opt = OptimizerState::fresh(params.data.len());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&params, &opt, Mode::SingleTurn, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            PolicyError::Checkpoint(msg) => assert!(msg.contains("checksum")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected_on_load_into_config() {
        let small = PolicyDims {
            hidden: 3,
            ..tiny_dims()
        };
        let params = PolicyParams::init(small, 2);
        let opt = OptimizerState::fresh(params.data.len());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_checkpoint(&params, &opt, Mode::MultiTurn, &path).unwrap();
        let (loaded, _, _) = load_checkpoint(&path).unwrap();
        assert!(expect_dims(&loaded, tiny_dims()).is_err());
    }

    #[test]
    fn token_action_round_trip() {
        for t in 0..=TOKEN_STOP {
            let a = token_to_action(t).unwrap();
            assert_eq!(action_to_token(a), t);
        }
        assert!(token_to_action(TOKEN_EOT).is_none());
    }
}
