//! Occupancy-grid scenes with landmarks and cached geodesic distance fields.
//!
//! A [`Scene`] is the unit of simulation: a 2D boolean occupancy grid at a
//! fixed resolution, a set of named landmark cells, and a lazily computed
//! per-goal geodesic distance field over the 8-connected free-cell graph.
//! Scenes are immutable after load and safe to share across threads; the
//! distance-field cache is internally synchronized.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub const DEFAULT_RESOLUTION: f64 = 0.25;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("pose ({x:.3}, {y:.3}) is on a blocked or out-of-bounds cell")]
    InvalidPose { x: f64, y: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Grid cell coordinates: `col` indexes x, `row` indexes y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Cell {
    pub col: usize,
    pub row: usize,
}

impl Cell {
    pub fn new(col: usize, row: usize) -> Self {
        Cell { col, row }
    }

    /// World coordinates of the cell center.
    pub fn center(&self, resolution: f64) -> (f64, f64) {
        (
            (self.col as f64 + 0.5) * resolution,
            (self.row as f64 + 0.5) * resolution,
        )
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Landmark {
    pub id: u32,
    pub cell: Cell,
}

/// Geodesic distances (meters) from one goal cell to every cell of a scene.
/// Unreachable or blocked cells hold `f64::INFINITY`.
#[derive(Debug, Clone)]
pub struct DistanceField {
    pub goal: Cell,
    values: Vec<f64>,
    width: usize,
}

impl DistanceField {
    pub fn value(&self, cell: Cell) -> f64 {
        self.values[cell.row * self.width + cell.col]
    }
}

pub struct Scene {
    pub scene_id: String,
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major occupancy, `true` = blocked.
    grid: Vec<bool>,
    pub landmarks: Vec<Landmark>,
    dist_cache: Mutex<HashMap<Cell, Arc<DistanceField>>>,
}

impl std::fmt::Debug for Scene {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scene")
            .field("scene_id", &self.scene_id)
            .field("resolution", &self.resolution)
            .field("width", &self.width)
            .field("height", &self.height)
            .field("landmarks", &self.landmarks.len())
            .finish()
    }
}

impl Scene {
    pub fn new(
        scene_id: String,
        resolution: f64,
        width: usize,
        height: usize,
        grid: Vec<bool>,
        landmarks: Vec<Landmark>,
    ) -> Result<Self, SceneError> {
        if resolution <= 0.0 {
            return Err(SceneError::Invalid("resolution must be > 0".into()));
        }
        if grid.len() != width * height {
            return Err(SceneError::Invalid(format!(
                "grid has {} cells, bounds say {}x{}",
                grid.len(),
                width,
                height
            )));
        }
        if !grid.iter().any(|b| !b) {
            return Err(SceneError::Invalid("no free cells".into()));
        }
        let scene = Scene {
            scene_id,
            resolution,
            width,
            height,
            grid,
            landmarks,
            dist_cache: Mutex::new(HashMap::new()),
        };
        for lm in &scene.landmarks {
            if lm.cell.col >= scene.width || lm.cell.row >= scene.height {
                return Err(SceneError::Invalid(format!(
                    "landmark {} outside bounds",
                    lm.id
                )));
            }
            if scene.blocked(lm.cell) {
                return Err(SceneError::Invalid(format!(
                    "landmark {} on a blocked cell",
                    lm.id
                )));
            }
        }
        Ok(scene)
    }

    pub fn blocked(&self, cell: Cell) -> bool {
        self.grid[cell.row * self.width + cell.col]
    }

    pub fn in_bounds(&self, col: i64, row: i64) -> bool {
        col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height
    }

    /// Occupancy at a world point; out-of-bounds reads as blocked.
    pub fn blocked_at(&self, x: f64, y: f64) -> bool {
        match self.cell_at(x, y) {
            Some(c) => self.blocked(c),
            None => true,
        }
    }

    pub fn cell_at(&self, x: f64, y: f64) -> Option<Cell> {
        let col = (x / self.resolution).floor() as i64;
        let row = (y / self.resolution).floor() as i64;
        if self.in_bounds(col, row) {
            Some(Cell::new(col as usize, row as usize))
        } else {
            None
        }
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                let c = Cell::new(col, row);
                if !self.blocked(c) {
                    out.push(c);
                }
            }
        }
        out
    }

    /// Distance field from `goal`, computed on first use and cached.
    pub fn distance_field(&self, goal: Cell) -> Result<Arc<DistanceField>, SceneError> {
        if self.blocked(goal) {
            let (x, y) = goal.center(self.resolution);
            return Err(SceneError::InvalidPose { x, y });
        }
        let mut cache = self.dist_cache.lock().unwrap();
        if let Some(f) = cache.get(&goal) {
            return Ok(Arc::clone(f));
        }
        let field = Arc::new(self.dijkstra(goal));
        cache.insert(goal, Arc::clone(&field));
        Ok(field)
    }

    /// Geodesic distance in meters between the cells containing two world
    /// points, over the 8-connected free-cell graph. `f64::INFINITY` when
    /// disconnected.
    pub fn geodesic(&self, from: (f64, f64), to: (f64, f64)) -> Result<f64, SceneError> {
        let from_cell = self
            .cell_at(from.0, from.1)
            .filter(|c| !self.blocked(*c))
            .ok_or(SceneError::InvalidPose {
                x: from.0,
                y: from.1,
            })?;
        let to_cell = self
            .cell_at(to.0, to.1)
            .filter(|c| !self.blocked(*c))
            .ok_or(SceneError::InvalidPose { x: to.0, y: to.1 })?;
        Ok(self.distance_field(to_cell)?.value(from_cell))
    }

    fn dijkstra(&self, goal: Cell) -> DistanceField {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;

        let n = self.width * self.height;
        let mut dist = vec![f64::INFINITY; n];
        let idx = |c: Cell| c.row * self.width + c.col;
        let mut heap: BinaryHeap<Reverse<(ordered::F64, usize, usize)>> = BinaryHeap::new();
        dist[idx(goal)] = 0.0;
        heap.push(Reverse((ordered::F64(0.0), goal.col, goal.row)));
        let straight = self.resolution;
        let diag = self.resolution * std::f64::consts::SQRT_2;
        while let Some(Reverse((ordered::F64(d), col, row))) = heap.pop() {
            let c = Cell::new(col, row);
            if d > dist[idx(c)] {
                continue;
            }
            for dc in -1i64..=1 {
                for dr in -1i64..=1 {
                    if dc == 0 && dr == 0 {
                        continue;
                    }
                    let (ncol, nrow) = (col as i64 + dc, row as i64 + dr);
                    if !self.in_bounds(ncol, nrow) {
                        continue;
                    }
                    let nc = Cell::new(ncol as usize, nrow as usize);
                    if self.blocked(nc) {
                        continue;
                    }
                    let step = if dc != 0 && dr != 0 { diag } else { straight };
                    let nd = d + step;
                    if nd < dist[idx(nc)] {
                        dist[idx(nc)] = nd;
                        heap.push(Reverse((ordered::F64(nd), nc.col, nc.row)));
                    }
                }
            }
        }
        DistanceField {
            goal,
            values: dist,
            width: self.width,
        }
    }

    /// Number of distance fields currently cached (diagnostics).
    pub fn cached_fields(&self) -> usize {
        self.dist_cache.lock().unwrap().len()
    }

    // ---- scene file format -------------------------------------------------
    //
    // scene <scene_id>
    // resolution <meters-per-cell>
    // size <width> <height>
    // grid
    // <height rows of width '0'/'1' chars, row 0 first>
    // landmarks <n>
    // <id> <col> <row>

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "scene {}", self.scene_id).unwrap();
        writeln!(s, "resolution {}", self.resolution).unwrap();
        writeln!(s, "size {} {}", self.width, self.height).unwrap();
        writeln!(s, "grid").unwrap();
        for row in 0..self.height {
            for col in 0..self.width {
                s.push(if self.blocked(Cell::new(col, row)) {
                    '1'
                } else {
                    '0'
                });
            }
            s.push('\n');
        }
        writeln!(s, "landmarks {}", self.landmarks.len()).unwrap();
        for lm in &self.landmarks {
            writeln!(s, "{} {} {}", lm.id, lm.cell.col, lm.cell.row).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SceneError> {
        let mut lines = text.lines().enumerate();
        let mut next = |expect: &str| -> Result<(usize, String), SceneError> {
            for (i, raw) in lines.by_ref() {
                let t = raw.trim();
                if !t.is_empty() {
                    return Ok((i + 1, t.to_string()));
                }
            }
            Err(SceneError::Parse {
                line: 0,
                msg: format!("unexpected end of file, expected {expect}"),
            })
        };
        let parse = |line: usize, msg: &str| SceneError::Parse {
            line,
            msg: msg.to_string(),
        };

        let (ln, l) = next("scene header")?;
        let scene_id = l
            .strip_prefix("scene ")
            .ok_or_else(|| parse(ln, "expected 'scene <id>'"))?
            .trim()
            .to_string();
        let (ln, l) = next("resolution")?;
        let resolution: f64 = l
            .strip_prefix("resolution ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| parse(ln, "expected 'resolution <f64>'"))?;
        let (ln, l) = next("size")?;
        let dims: Vec<usize> = l
            .strip_prefix("size ")
            .map(|v| v.split_whitespace().filter_map(|t| t.parse().ok()).collect())
            .unwrap_or_default();
        if dims.len() != 2 {
            return Err(parse(ln, "expected 'size <w> <h>'"));
        }
        let (width, height) = (dims[0], dims[1]);
        let (ln, l) = next("grid")?;
        if l != "grid" {
            return Err(parse(ln, "expected 'grid'"));
        }
        let mut grid = Vec::with_capacity(width * height);
        for _ in 0..height {
            let (ln, l) = next("grid row")?;
            if l.len() != width {
                return Err(parse(ln, &format!("grid row has {} chars, want {width}", l.len())));
            }
            for ch in l.chars() {
                match ch {
                    '0' => grid.push(false),
                    '1' => grid.push(true),
                    _ => return Err(parse(ln, "grid rows must be '0'/'1'")),
                }
            }
        }
        let (ln, l) = next("landmarks")?;
        let n: usize = l
            .strip_prefix("landmarks ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| parse(ln, "expected 'landmarks <n>'"))?;
        let mut landmarks = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, l) = next("landmark row")?;
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(parse(ln, "expected '<id> <col> <row>'"));
            }
            let id = parts[0].parse().map_err(|_| parse(ln, "bad landmark id"))?;
            let col = parts[1].parse().map_err(|_| parse(ln, "bad landmark col"))?;
            let row = parts[2].parse().map_err(|_| parse(ln, "bad landmark row"))?;
            landmarks.push(Landmark {
                id,
                cell: Cell::new(col, row),
            });
        }
        Scene::new(scene_id, resolution, width, height, grid, landmarks)
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path)?;
        Scene::from_text(&text)
    }
}

mod ordered {
    /// f64 wrapper with total order for the Dijkstra heap; distances are
    /// never NaN.
    #[derive(PartialEq, PartialOrd)]
    pub struct F64(pub f64);
    impl Eq for F64 {}
    #[allow(clippy::derive_ord_xor_partial_ord)]
    impl Ord for F64 {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.partial_cmp(other).unwrap()
        }
    }
}

/// Small scene constructors shared by tests and examples.
pub mod test_support {
    use super::*;

    pub fn empty_scene(w: usize, h: usize) -> Scene {
        Scene::new(
            "empty".into(),
            DEFAULT_RESOLUTION,
            w,
            h,
            vec![false; w * h],
            vec![Landmark {
                id: 0,
                cell: Cell::new(1, 1),
            }],
        )
        .unwrap()
    }
}
