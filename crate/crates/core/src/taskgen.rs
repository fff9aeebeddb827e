//! Procedural generation of scenes, episodes, symbolic instructions, and
//! expert trajectories, plus dataset serialization.
//!
//! Generation is a pure function of (seed, config): the same inputs always
//! produce byte-identical scene files and datasets. Every generated episode
//! is validated by replaying its expert actions through the world module
//! before it is accepted.

use std::collections::HashSet;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scene::{Cell, Landmark, Scene, SceneError};
use crate::world::{
    angle_diff, apply_primitive, ActionKind, EpisodeState, Instruction,
    InstructionToken, MergedAction, Pose, PrimitiveAction, Relation, CURSOR_RADIUS_M,
    MAX_INSTRUCTION_TOKENS, SUCCESS_RADIUS_M, TURN_DEGREES,
};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("scene generation failed: {0}")]
    Scene(String),
    #[error("episode generation failed: {0}")]
    Episode(String),
    #[error("compress_expert: {0}")]
    Compress(String),
    #[error("dataset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("manifest digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error(transparent)]
    SceneFile(#[from] SceneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub width: usize,
    pub height: usize,
    pub room_count: usize,
    pub corridor_width: usize,
    pub min_room_side: usize,
    pub max_room_side: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            width: 64,
            height: 64,
            room_count: 5,
            corridor_width: 2,
            min_room_side: 8,
            max_room_side: 14,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeGenConfig {
    /// Geodesic start-to-goal distance range in meters.
    pub min_goal_distance: f64,
    pub max_goal_distance: f64,
    /// Safety cap on expert length during generation (primitive actions).
    pub max_expert_primitives: usize,
    pub max_attempts: usize,
}

impl Default for EpisodeGenConfig {
    fn default() -> Self {
        EpisodeGenConfig {
            min_goal_distance: 3.0,
            max_goal_distance: 15.0,
            max_expert_primitives: 600,
            max_attempts: 200,
        }
    }
}

/// One navigation task: start, goal, instruction, and the oracle trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub scene_id: String,
    pub start: Pose,
    pub goal: Pose,
    pub instruction: Instruction,
    pub expert_actions: Vec<MergedAction>,
    /// Pose after each primitive action, starting with `start`.
    pub expert_path: Vec<Pose>,
    /// Oracle length in primitive actions, including the final STOP.
    pub expert_primitive_len: u32,
}

// ---- scene generation -------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Room {
    col: usize,
    row: usize,
    w: usize,
    h: usize,
}

impl Room {
    fn center(&self) -> Cell {
        Cell::new(self.col + self.w / 2, self.row + self.h / 2)
    }
    fn overlaps(&self, other: &Room, gap: usize) -> bool {
        !(self.col + self.w + gap <= other.col
            || other.col + other.w + gap <= self.col
            || self.row + self.h + gap <= other.row
            || other.row + other.h + gap <= self.row)
    }
}

/// Generate a connected multi-room scene. Free space is guaranteed to be a
/// single connected component; landmarks sit at room centers and corridor
/// junctions.
pub fn generate_scene(seed: u64, config: &SceneGenConfig) -> Result<Scene, GenError> {
    if config.room_count == 0 {
        return Err(GenError::Scene("room_count must be >= 1".into()));
    }
    if config.max_room_side + 2 >= config.width.min(config.height)
        || config.min_room_side > config.max_room_side
        || config.corridor_width == 0
    {
        return Err(GenError::Scene("rooms do not fit the grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rooms: Vec<Room> = Vec::new();
    let mut attempts = 0;
    while rooms.len() < config.room_count {
        attempts += 1;
        if attempts > 2000 {
            return Err(GenError::Scene(format!(
                "could not place {} rooms in a {}x{} grid",
                config.room_count, config.width, config.height
            )));
        }
        let w = rng.gen_range(config.min_room_side..=config.max_room_side);
        let h = rng.gen_range(config.min_room_side..=config.max_room_side);
        if w + 2 >= config.width || h + 2 >= config.height {
            continue;
        }
        let col = rng.gen_range(1..config.width - w - 1);
        let row = rng.gen_range(1..config.height - h - 1);
        let room = Room { col, row, w, h };
        if rooms.iter().all(|r| !room.overlaps(r, 1)) {
            rooms.push(room);
        }
    }

    let mut grid = vec![true; config.width * config.height];
    let mut carve = |c: usize, r: usize| {
        if c >= 1 && c < config.width - 1 && r >= 1 && r < config.height - 1 {
            grid[r * config.width + c] = false;
        }
    };
    for room in &rooms {
        for r in room.row..room.row + room.h {
            for c in room.col..room.col + room.w {
                carve(c, r);
            }
        }
    }
    // L-shaped corridors between consecutive room centers
    let mut junctions = Vec::new();
    for pair in rooms.windows(2) {
        let a = pair[0].center();
        let b = pair[1].center();
        let (c0, c1) = (a.col.min(b.col), a.col.max(b.col));
        for c in c0..=c1 {
            for k in 0..config.corridor_width {
                carve(c, a.row + k);
            }
        }
        let (r0, r1) = (a.row.min(b.row), a.row.max(b.row));
        for r in r0..=r1 {
            for k in 0..config.corridor_width {
                carve(b.col + k, r);
            }
        }
        junctions.push(Cell::new(b.col, a.row));
    }

    let mut landmarks = Vec::new();
    let mut used = HashSet::new();
    let mut next_id = 0u32;
    for cell in rooms.iter().map(|r| r.center()).chain(junctions) {
        if grid[cell.row * config.width + cell.col] || !used.insert((cell.col, cell.row)) {
            continue;
        }
        landmarks.push(Landmark { id: next_id, cell });
        next_id += 1;
    }
    if landmarks.len() < 4 {
        return Err(GenError::Scene(format!(
            "only {} landmarks placed, need >= 4",
            landmarks.len()
        )));
    }

    let scene = Scene::new(
        format!("scene-{seed:08x}"),
        crate::scene::DEFAULT_RESOLUTION,
        config.width,
        config.height,
        grid,
        landmarks,
    )?;
    let free = scene.free_cells();
    if flood_fill_count(&scene, free[0]) != free.len() {
        return Err(GenError::Scene("free space is not connected".into()));
    }
    Ok(scene)
}

/// Size of the connected component of free cells containing `start`
/// (8-connected). Exposed for tests.
pub fn flood_fill_count(scene: &Scene, start: Cell) -> usize {
    let mut seen = HashSet::new();
    let mut stack = vec![start];
    seen.insert((start.col, start.row));
    while let Some(c) = stack.pop() {
        for dc in -1i64..=1 {
            for dr in -1i64..=1 {
                if dc == 0 && dr == 0 {
                    continue;
                }
                let (ncol, nrow) = (c.col as i64 + dc, c.row as i64 + dr);
                if scene.in_bounds(ncol, nrow) {
                    let nc = Cell::new(ncol as usize, nrow as usize);
                    if !scene.blocked(nc) && seen.insert((nc.col, nc.row)) {
                        stack.push(nc);
                    }
                }
            }
        }
    }
    seen.len()
}

// ---- expert policy and episode generation -----------------------------------

/// Shortest-path follower on the 24-heading grid: descend the goal's distance
/// field, turning to within half an increment of the next waypoint bearing
/// before stepping forward.
fn expert_primitives(
    scene: &Scene,
    start: Pose,
    goal: Pose,
    cap: usize,
) -> Result<(Vec<PrimitiveAction>, Vec<Pose>), GenError> {
    let goal_cell = scene
        .cell_at(goal.x, goal.y)
        .ok_or_else(|| GenError::Episode("goal outside scene".into()))?;
    let field = scene.distance_field(goal_cell)?;
    let mut state = EpisodeState::new(
        "expert".into(),
        scene,
        start,
        goal,
        Instruction {
            tokens: vec![InstructionToken {
                landmark_id: scene.landmarks[0].id,
                relation: Relation::StopAt,
            }],
        },
    )?;
    let mut actions = Vec::new();
    let mut path = vec![start];
    let mut stuck = 0;
    loop {
        if actions.len() >= cap {
            return Err(GenError::Episode("expert exceeded length cap".into()));
        }
        let cell = scene
            .cell_at(state.pose.x, state.pose.y)
            .ok_or_else(|| GenError::Episode("expert left the scene".into()))?;
        if cell == goal_cell {
            actions.push(PrimitiveAction::Stop);
            apply_primitive(&mut state, scene, PrimitiveAction::Stop)
                .map_err(|e| GenError::Episode(e.to_string()))?;
            path.push(state.pose);
            break;
        }
        // next waypoint: free neighbor with the smallest field value
        let mut best: Option<(f64, Cell)> = None;
        for dc in -1i64..=1 {
            for dr in -1i64..=1 {
                if dc == 0 && dr == 0 {
                    continue;
                }
                let (ncol, nrow) = (cell.col as i64 + dc, cell.row as i64 + dr);
                if !scene.in_bounds(ncol, nrow) {
                    continue;
                }
                let nc = Cell::new(ncol as usize, nrow as usize);
                if scene.blocked(nc) {
                    continue;
                }
                let v = field.value(nc);
                if best.map(|(bv, _)| v < bv).unwrap_or(true) {
                    best = Some((v, nc));
                }
            }
        }
        let (_, waypoint) =
            best.ok_or_else(|| GenError::Episode("expert has no free neighbor".into()))?;
        let (wx, wy) = waypoint.center(scene.resolution);
        let bearing = (wy - state.pose.y).atan2(wx - state.pose.x).to_degrees();
        let diff = angle_diff(bearing, state.pose.heading);
        let action = if diff > TURN_DEGREES / 2.0 {
            PrimitiveAction::Left
        } else if diff < -TURN_DEGREES / 2.0 {
            PrimitiveAction::Right
        } else {
            PrimitiveAction::Forward
        };
        apply_primitive(&mut state, scene, action)
            .map_err(|e| GenError::Episode(e.to_string()))?;
        actions.push(action);
        path.push(state.pose);
        if action == PrimitiveAction::Forward && state.last_collision {
            stuck += 1;
            if stuck > 8 {
                return Err(GenError::Episode("expert stuck on collision".into()));
            }
            // sidestep and retry from the new heading
            apply_primitive(&mut state, scene, PrimitiveAction::Left)
                .map_err(|e| GenError::Episode(e.to_string()))?;
            actions.push(PrimitiveAction::Left);
            path.push(state.pose);
            continue;
        }
        stuck = 0;
    }
    Ok((actions, path))
}

/// Collapse maximal runs of identical primitives into merged actions of
/// magnitude <= 3. The expansion of the output equals the input exactly.
pub fn compress_expert(primitives: &[PrimitiveAction]) -> Result<Vec<MergedAction>, GenError> {
    if primitives.is_empty() {
        return Err(GenError::Compress("empty primitive sequence".into()));
    }
    if *primitives.last().unwrap() != PrimitiveAction::Stop {
        return Err(GenError::Compress("sequence must end with STOP".into()));
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < primitives.len() {
        let p = primitives[i];
        let kind = match p {
            PrimitiveAction::Forward => ActionKind::Forward,
            PrimitiveAction::Left => ActionKind::Left,
            PrimitiveAction::Right => ActionKind::Right,
            PrimitiveAction::Stop => {
                out.push(MergedAction::stop());
                i += 1;
                continue;
            }
        };
        let mut run = 1;
        while run < 3 && i + run < primitives.len() && primitives[i + run] == p {
            run += 1;
        }
        out.push(MergedAction::new(kind, run as u8).unwrap());
        i += run;
    }
    Ok(out)
}

pub fn expand_merged(actions: &[MergedAction]) -> Vec<PrimitiveAction> {
    actions.iter().flat_map(|m| m.primitives()).collect()
}

fn build_instruction(scene: &Scene, path: &[Pose], goal: Pose) -> Instruction {
    // landmarks within CURSOR_RADIUS_M of the expert path, in first-visit order
    let mut visits: Vec<(usize, u32, Relation)> = Vec::new();
    let mut seen = HashSet::new();
    for lm in &scene.landmarks {
        let (lx, ly) = lm.cell.center(scene.resolution);
        let mut best: Option<(usize, f64)> = None;
        let mut first_hit: Option<usize> = None;
        for (i, p) in path.iter().enumerate() {
            let d = ((p.x - lx).powi(2) + (p.y - ly).powi(2)).sqrt();
            if d < CURSOR_RADIUS_M {
                first_hit.get_or_insert(i);
                if best.map(|(_, bd)| d < bd).unwrap_or(true) {
                    best = Some((i, d));
                }
            }
        }
        if let (Some(first), Some((closest, _))) = (first_hit, best) {
            if !seen.insert(lm.id) {
                continue;
            }
            // side of the path direction at closest approach
            let dir = path_direction(path, closest);
            let toward = (lx - path[closest].x, ly - path[closest].y);
            let cross = dir.0 * toward.1 - dir.1 * toward.0;
            let relation = if cross > 0.08 {
                Relation::LeftOf
            } else if cross < -0.08 {
                Relation::RightOf
            } else {
                Relation::Toward
            };
            visits.push((first, lm.id, relation));
        }
    }
    visits.sort_by_key(|(i, id, _)| (*i, *id));
    let mut tokens: Vec<InstructionToken> = visits
        .into_iter()
        .map(|(_, landmark_id, relation)| InstructionToken {
            landmark_id,
            relation,
        })
        .collect();
    // terminal token: landmark nearest the goal, relation STOP_AT
    let stop_lm = scene
        .landmarks
        .iter()
        .min_by(|a, b| {
            let da = lm_dist(a, goal, scene);
            let db = lm_dist(b, goal, scene);
            da.partial_cmp(&db).unwrap()
        })
        .expect("scene has landmarks");
    tokens.retain(|t| t.landmark_id != stop_lm.id);
    tokens.truncate(MAX_INSTRUCTION_TOKENS - 1);
    tokens.push(InstructionToken {
        landmark_id: stop_lm.id,
        relation: Relation::StopAt,
    });
    Instruction { tokens }
}

fn lm_dist(lm: &Landmark, goal: Pose, scene: &Scene) -> f64 {
    let (lx, ly) = lm.cell.center(scene.resolution);
    ((goal.x - lx).powi(2) + (goal.y - ly).powi(2)).sqrt()
}

fn path_direction(path: &[Pose], i: usize) -> (f64, f64) {
    let a = if i + 1 < path.len() {
        (path[i], path[i + 1])
    } else if i > 0 {
        (path[i - 1], path[i])
    } else {
        return (1.0, 0.0);
    };
    let (dx, dy) = (a.1.x - a.0.x, a.1.y - a.0.y);
    let n = (dx * dx + dy * dy).sqrt();
    if n < 1e-9 {
        let rad = a.0.heading.to_radians();
        (rad.cos(), rad.sin())
    } else {
        (dx / n, dy / n)
    }
}

/// Generate one episode on `scene`: start/goal sampling, expert trajectory
/// synthesis, and instruction construction. The expert replay is validated
/// before the episode is returned.
pub fn generate_episode(
    scene: &Scene,
    seed: u64,
    config: &EpisodeGenConfig,
) -> Result<Episode, GenError> {
    if scene.landmarks.len() < 2 {
        return Err(GenError::Episode("scene needs >= 2 landmarks".into()));
    }
    if config.min_goal_distance < SUCCESS_RADIUS_M {
        return Err(GenError::Episode(format!(
            "min_goal_distance {} below the {} m success radius",
            config.min_goal_distance, SUCCESS_RADIUS_M
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let free = scene.free_cells();
    for _ in 0..config.max_attempts {
        let start_cell = free[rng.gen_range(0..free.len())];
        let goal_cell = free[rng.gen_range(0..free.len())];
        let d = scene
            .distance_field(goal_cell)?
            .value(start_cell);
        if !(config.min_goal_distance..=config.max_goal_distance).contains(&d) {
            continue;
        }
        let heading = TURN_DEGREES * rng.gen_range(0..24) as f64;
        let (sx, sy) = start_cell.center(scene.resolution);
        let (gx, gy) = goal_cell.center(scene.resolution);
        let start = Pose::new(sx, sy, heading);
        let goal = Pose::new(gx, gy, 0.0);
        let Ok((primitives, path)) =
            expert_primitives(scene, start, goal, config.max_expert_primitives)
        else {
            continue;
        };
        let expert_actions = compress_expert(&primitives)?;
        let instruction = build_instruction(scene, &path, goal);
        let episode = Episode {
            episode_id: format!("{}-ep{:08x}", scene.scene_id, seed),
            scene_id: scene.scene_id.clone(),
            start,
            goal,
            instruction,
            expert_actions,
            expert_path: path,
            expert_primitive_len: primitives.len() as u32,
        };
        if replay_expert(scene, &episode)? {
            return Ok(episode);
        }
    }
    Err(GenError::Episode(format!(
        "no valid start/goal pair within [{}, {}] m after {} attempts",
        config.min_goal_distance, config.max_goal_distance, config.max_attempts
    )))
}

/// Replay an episode's expert actions through the world module and report
/// whether they end in success.
pub fn replay_expert(scene: &Scene, episode: &Episode) -> Result<bool, GenError> {
    let mut state = EpisodeState::new(
        episode.episode_id.clone(),
        scene,
        episode.start,
        episode.goal,
        episode.instruction.clone(),
    )?;
    for p in expand_merged(&episode.expert_actions) {
        apply_primitive(&mut state, scene, p).map_err(|e| GenError::Episode(e.to_string()))?;
    }
    Ok(state.success(scene))
}

// ---- dataset serialization ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub episode_count: usize,
    pub scenes: Vec<String>,
    pub digest: String,
}

fn manifest_path(dataset_path: &Path) -> std::path::PathBuf {
    let mut p = dataset_path.as_os_str().to_owned();
    p.push(".manifest.json");
    std::path::PathBuf::from(p)
}

/// Write episodes as line-delimited records plus a manifest with a content
/// digest next to the dataset file.
pub fn write_dataset(
    episodes: &[Episode],
    path: &Path,
    split: &str,
) -> Result<DatasetManifest, GenError> {
    let mut body = String::new();
    for ep in episodes {
        body.push_str(&serde_json::to_string(ep).expect("episode serializes"));
        body.push('\n');
    }
    std::fs::write(path, &body)?;
    let mut scenes: Vec<String> = episodes.iter().map(|e| e.scene_id.clone()).collect();
    scenes.sort();
    scenes.dedup();
    let manifest = DatasetManifest {
        split: split.to_string(),
        episode_count: episodes.len(),
        scenes,
        digest: hex_digest(body.as_bytes()),
    };
    std::fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    Ok(manifest)
}

/// Read a dataset back. When a manifest exists alongside the file, the
/// content digest is verified first.
pub fn read_dataset(path: &Path) -> Result<Vec<Episode>, GenError> {
    let body = std::fs::read_to_string(path)?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)
            .map_err(|e| GenError::Parse {
                line: 0,
                msg: format!("manifest: {e}"),
            })?;
        let found = hex_digest(body.as_bytes());
        if found != manifest.digest {
            return Err(GenError::DigestMismatch {
                expected: manifest.digest,
                found,
            });
        }
    }
    let mut episodes = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(line).map_err(|e| GenError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        episodes.push(ep);
    }
    Ok(episodes)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
