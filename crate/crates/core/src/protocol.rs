//! Wire types shared by the simulator server and its HTTP client.
//!
//! All floating-point fields are rounded to six decimal places before
//! serialization so transcripts of identical request sequences are
//! byte-identical across runs and across local/remote transports.

use serde::{Deserialize, Serialize};

use crate::world::{Observation, Pose};

pub fn round6(v: f64) -> f64 {
    if !v.is_finite() {
        return v;
    }
    (v * 1e6).round() / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseWire {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl From<Pose> for PoseWire {
    fn from(p: Pose) -> Self {
        PoseWire {
            x: round6(p.x),
            y: round6(p.y),
            heading: round6(p.heading),
        }
    }
}

impl From<PoseWire> for Pose {
    fn from(p: PoseWire) -> Self {
        Pose {
            x: p.x,
            y: p.y,
            heading: p.heading,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateEpisodeRequest {
    pub episode_id: String,
    pub scene_id: String,
    pub start: PoseWire,
    pub goal: PoseWire,
    pub instruction: crate::world::Instruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    /// Merged-action token name: F1..F3, L1..L3, R1..R3, S.
    pub action: String,
}

/// Full post-transition snapshot returned by episode creation and every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub observation: Observation,
    pub pose: PoseWire,
    /// Pose after each primitive inside the merged action (empty on create).
    pub sub_poses: Vec<PoseWire>,
    pub d_goal: f64,
    pub min_goal_distance: f64,
    pub steps_taken: u32,
    pub collision: bool,
    pub done: bool,
    pub stopped: bool,
    /// True iff the agent has stopped within the success radius.
    pub success: bool,
}

impl StepResponse {
    pub fn rounded(mut self) -> Self {
        self.observation.goal_distance = round6(self.observation.goal_distance);
        self.observation.goal_bearing = round6(self.observation.goal_bearing);
        self.d_goal = round6(self.d_goal);
        self.min_goal_distance = round6(self.min_goal_distance);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreloadRequest {
    pub scene_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreloadResponse {
    pub accepted: Vec<String>,
    pub unknown: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CacheStats {
    pub capacity: usize,
    pub entries: usize,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub preloads: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCount {
    pub sessions: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_truncates_to_six_places() {
        assert_eq!(round6(0.1234567891), 0.123457);
        assert_eq!(round6(-2.0000004), -2.0);
        assert!(round6(f64::INFINITY).is_infinite());
    }

    #[test]
    fn step_response_serializes_identically_after_round_trip() {
        let resp = StepResponse {
            observation: Observation {
                patch_rows: vec!["000".into(); 3],
                goal_distance: 1.23456789,
                goal_bearing: -17.000000449,
                instruction_tokens: vec![],
                instruction_cursor: 0,
                collision: false,
            },
            pose: PoseWire {
                x: round6(1.0000000003),
                y: 2.5,
                heading: 345.0,
            },
            sub_poses: vec![],
            d_goal: 1.234568,
            min_goal_distance: 1.234568,
            steps_taken: 4,
            collision: false,
            done: false,
            stopped: false,
            success: false,
        }
        .rounded();
        let a = serde_json::to_string(&resp).unwrap();
        let back: StepResponse = serde_json::from_str(&a).unwrap();
        let b = serde_json::to_string(&back).unwrap();
        assert_eq!(a, b);
    }
}
