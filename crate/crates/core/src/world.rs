//! Continuous 2D navigation on top of an occupancy-grid [`Scene`]: agent
//! kinematics, collision handling, the episode state machine, and symbolic
//! egocentric observations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Scene, SceneError};

/// Forward step size in meters per FORWARD primitive.
pub const STEP_METERS: f64 = 0.25;
/// Turn increment in degrees per LEFT/RIGHT primitive.
pub const TURN_DEGREES: f64 = 15.0;
/// Success radius in meters around the goal.
pub const SUCCESS_RADIUS_M: f64 = 3.0;
/// Side length of the egocentric occupancy patch (cells).
pub const PATCH_SIZE: usize = 11;
/// Maximum instruction length in tokens.
pub const MAX_INSTRUCTION_TOKENS: usize = 8;
/// Landmark proximity that advances the instruction cursor (meters).
pub const CURSOR_RADIUS_M: f64 = 1.5;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("episode {0} is already done")]
    EpisodeDone(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Agent pose: position in meters, heading in degrees CCW from +x, kept in
/// [0, 360).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose {
            x,
            y,
            heading: normalize_heading(heading),
        }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

pub fn normalize_heading(deg: f64) -> f64 {
    deg.rem_euclid(360.0)
}

/// Signed smallest angular difference a - b, in (-180, 180].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        d -= 360.0;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrimitiveAction {
    Forward,
    Left,
    Right,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionKind {
    Forward,
    Left,
    Right,
    Stop,
}

/// A run of identical primitives collapsed into one action. STOP always has
/// magnitude 1; FORWARD/LEFT/RIGHT carry magnitude 1..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedAction {
    pub kind: ActionKind,
    pub magnitude: u8,
}

impl MergedAction {
    pub fn new(kind: ActionKind, magnitude: u8) -> Option<Self> {
        let ok = match kind {
            ActionKind::Stop => magnitude == 1,
            _ => (1..=3).contains(&magnitude),
        };
        ok.then_some(MergedAction { kind, magnitude })
    }

    pub fn stop() -> Self {
        MergedAction {
            kind: ActionKind::Stop,
            magnitude: 1,
        }
    }

    pub fn primitives(&self) -> impl Iterator<Item = PrimitiveAction> {
        let p = match self.kind {
            ActionKind::Forward => PrimitiveAction::Forward,
            ActionKind::Left => PrimitiveAction::Left,
            ActionKind::Right => PrimitiveAction::Right,
            ActionKind::Stop => PrimitiveAction::Stop,
        };
        std::iter::repeat(p).take(self.magnitude as usize)
    }

    /// Compact wire name: F1..F3, L1..L3, R1..R3, S.
    pub fn token_name(&self) -> String {
        match self.kind {
            ActionKind::Forward => format!("F{}", self.magnitude),
            ActionKind::Left => format!("L{}", self.magnitude),
            ActionKind::Right => format!("R{}", self.magnitude),
            ActionKind::Stop => "S".to_string(),
        }
    }

    pub fn from_token_name(s: &str) -> Option<Self> {
        match s {
            "S" | "STOP" => Some(MergedAction::stop()),
            _ => {
                let kind = match s.as_bytes().first()? {
                    b'F' => ActionKind::Forward,
                    b'L' => ActionKind::Left,
                    b'R' => ActionKind::Right,
                    _ => return None,
                };
                let mag: u8 = s.get(1..)?.parse().ok()?;
                MergedAction::new(kind, mag)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Toward,
    LeftOf,
    RightOf,
    StopAt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionToken {
    pub landmark_id: u32,
    pub relation: Relation,
}

/// Symbolic landmark-token instruction. Nonempty; the last token's relation
/// is always `StopAt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<InstructionToken>,
}

impl Instruction {
    pub fn validate(&self, scene: &Scene) -> Result<(), SceneError> {
        if self.tokens.is_empty() || self.tokens.len() > MAX_INSTRUCTION_TOKENS {
            return Err(SceneError::Invalid(format!(
                "instruction must have 1..={} tokens",
                MAX_INSTRUCTION_TOKENS
            )));
        }
        if self.tokens.last().unwrap().relation != Relation::StopAt {
            return Err(SceneError::Invalid("last token must be stop_at".into()));
        }
        for t in &self.tokens {
            if !scene.landmarks.iter().any(|l| l.id == t.landmark_id) {
                return Err(SceneError::Invalid(format!(
                    "unknown landmark {}",
                    t.landmark_id
                )));
            }
        }
        Ok(())
    }
}

/// Live state of one episode, including the static goal/instruction metadata
/// the state machine needs for distance tracking and cursor advancement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub episode_id: String,
    pub scene_id: String,
    pub pose: Pose,
    pub goal: Pose,
    pub instruction: Instruction,
    pub steps_taken: u32,
    pub done: bool,
    pub stopped: bool,
    pub last_collision: bool,
    pub min_goal_distance_seen: f64,
    pub instruction_cursor: usize,
}

impl EpisodeState {
    pub fn new(
        episode_id: String,
        scene: &Scene,
        start: Pose,
        goal: Pose,
        instruction: Instruction,
    ) -> Result<Self, SceneError> {
        if scene.blocked_at(start.x, start.y) {
            return Err(SceneError::InvalidPose {
                x: start.x,
                y: start.y,
            });
        }
        if scene.blocked_at(goal.x, goal.y) {
            return Err(SceneError::InvalidPose {
                x: goal.x,
                y: goal.y,
            });
        }
        let d0 = scene.geodesic(start.position(), goal.position())?;
        let mut state = EpisodeState {
            episode_id,
            scene_id: scene.scene_id.clone(),
            pose: start,
            goal,
            instruction,
            steps_taken: 0,
            done: false,
            stopped: false,
            last_collision: false,
            min_goal_distance_seen: d0,
            instruction_cursor: 0,
        };
        state.advance_cursor(scene);
        Ok(state)
    }

    pub fn goal_distance(&self, scene: &Scene) -> Result<f64, SceneError> {
        scene.geodesic(self.pose.position(), self.goal.position())
    }

    pub fn success(&self, scene: &Scene) -> bool {
        self.stopped
            && self
                .goal_distance(scene)
                .map(|d| d <= SUCCESS_RADIUS_M)
                .unwrap_or(false)
    }

    fn advance_cursor(&mut self, scene: &Scene) {
        while self.instruction_cursor < self.instruction.tokens.len() {
            let token = &self.instruction.tokens[self.instruction_cursor];
            let Some(lm) = scene
                .landmarks
                .iter()
                .find(|l| l.id == token.landmark_id)
            else {
                break;
            };
            let (lx, ly) = lm.cell.center(scene.resolution);
            let d = ((self.pose.x - lx).powi(2) + (self.pose.y - ly).powi(2)).sqrt();
            if d < CURSOR_RADIUS_M {
                self.instruction_cursor += 1;
            } else {
                break;
            }
        }
    }
}

/// Apply one primitive action. FORWARD with a blocked destination cell leaves
/// the pose unchanged (no sliding) and raises `last_collision`.
pub fn apply_primitive(
    state: &mut EpisodeState,
    scene: &Scene,
    action: PrimitiveAction,
) -> Result<(), WorldError> {
    if state.done {
        return Err(WorldError::EpisodeDone(state.episode_id.clone()));
    }
    state.last_collision = false;
    match action {
        PrimitiveAction::Forward => {
            let rad = state.pose.heading.to_radians();
            let nx = state.pose.x + STEP_METERS * rad.cos();
            let ny = state.pose.y + STEP_METERS * rad.sin();
            if scene.blocked_at(nx, ny) {
                state.last_collision = true;
            } else {
                state.pose.x = nx;
                state.pose.y = ny;
            }
        }
        PrimitiveAction::Left => {
            state.pose.heading = normalize_heading(state.pose.heading + TURN_DEGREES);
        }
        PrimitiveAction::Right => {
            state.pose.heading = normalize_heading(state.pose.heading - TURN_DEGREES);
        }
        PrimitiveAction::Stop => {
            state.done = true;
            state.stopped = true;
        }
    }
    state.steps_taken += 1;
    let d = state.goal_distance(scene)?;
    if d < state.min_goal_distance_seen {
        state.min_goal_distance_seen = d;
    }
    state.advance_cursor(scene);
    Ok(())
}

/// Apply a merged action as its primitive expansion. Collisions may truncate
/// displacement mid-merge; every sub-step is checked independently and still
/// counted in `steps_taken`.
pub fn apply_merged(
    state: &mut EpisodeState,
    scene: &Scene,
    action: MergedAction,
) -> Result<(), WorldError> {
    for p in action.primitives() {
        apply_primitive(state, scene, p)?;
    }
    Ok(())
}

/// Egocentric symbolic observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Heading-aligned occupancy window as `PATCH_SIZE` strings of '0'/'1'.
    /// Row 0 is farthest ahead; column `PATCH_SIZE/2` is straight ahead;
    /// column 0 is leftmost. Cells outside the scene read as blocked.
    pub patch_rows: Vec<String>,
    /// Geodesic distance to the goal, meters.
    pub goal_distance: f64,
    /// Bearing to the goal relative to the agent heading, degrees in
    /// (-180, 180].
    pub goal_bearing: f64,
    pub instruction_tokens: Vec<InstructionToken>,
    pub instruction_cursor: usize,
    pub collision: bool,
}

/// Deterministic observation of the current state. The patch is rotated with
/// the heading in 15-degree increments using nearest-cell sampling.
pub fn observe(state: &EpisodeState, scene: &Scene) -> Result<Observation, WorldError> {
    let half = (PATCH_SIZE / 2) as i64;
    let rad = state.pose.heading.to_radians();
    let (fx, fy) = (rad.cos(), rad.sin()); // forward unit vector
    let (lx, ly) = (-rad.sin(), rad.cos()); // left unit vector
    let mut rows = Vec::with_capacity(PATCH_SIZE);
    for i in 0..PATCH_SIZE as i64 {
        let forward = (half - i) as f64;
        let mut row = String::with_capacity(PATCH_SIZE);
        for j in 0..PATCH_SIZE as i64 {
            let left = (half - j) as f64;
            let px = state.pose.x + scene.resolution * (forward * fx + left * lx);
            let py = state.pose.y + scene.resolution * (forward * fy + left * ly);
            row.push(if scene.blocked_at(px, py) { '1' } else { '0' });
        }
        rows.push(row);
    }
    let goal_distance = state.goal_distance(scene)?;
    let world_bearing = (state.goal.y - state.pose.y)
        .atan2(state.goal.x - state.pose.x)
        .to_degrees();
    let goal_bearing = angle_diff(world_bearing, state.pose.heading);
    Ok(Observation {
        patch_rows: rows,
        goal_distance,
        goal_bearing,
        instruction_tokens: state.instruction.tokens.clone(),
        instruction_cursor: state.instruction_cursor,
        collision: state.last_collision,
    })
}
