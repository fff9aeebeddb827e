//! Client abstraction over the simulator: an in-process implementation that
//! drives [`SimCore`] directly and an HTTP implementation speaking the wire
//! protocol. Training and evaluation are written against the trait, so the
//! same rollout code runs locally or against a remote simulator.

use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::protocol::*;
use crate::server::{SimCore, SimError};
use crate::taskgen::Episode;
use crate::world::MergedAction;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("transport: {0}")]
    Transport(String),
    #[error("simulator returned {status}: {message}")]
    Status { status: u16, message: String },
}

pub trait SimClient: Send + Sync {
    /// Open a session and return the initial snapshot.
    fn create_episode(&self, req: &CreateEpisodeRequest) -> Result<StepResponse, ClientError>;
    fn step(&self, episode_id: &str, action: MergedAction) -> Result<StepResponse, ClientError>;
    fn close_episode(&self, episode_id: &str) -> Result<(), ClientError>;
    /// Fire-and-forget scene preloading hint.
    fn preload(&self, scene_ids: &[String]) -> Result<PreloadResponse, ClientError>;
    fn cache_stats(&self) -> Result<CacheStats, ClientError>;
}

pub fn create_request(episode: &Episode, episode_id: &str) -> CreateEpisodeRequest {
    CreateEpisodeRequest {
        episode_id: episode_id.to_string(),
        scene_id: episode.scene_id.clone(),
        start: episode.start.into(),
        goal: episode.goal.into(),
        instruction: episode.instruction.clone(),
    }
}

// ---- in-process client ---------------------------------------------------------

pub struct LocalSimClient {
    core: Arc<SimCore>,
}

impl LocalSimClient {
    pub fn new(scene_dir: PathBuf, cache_capacity: usize) -> Self {
        LocalSimClient {
            core: SimCore::new(scene_dir, cache_capacity),
        }
    }

    pub fn from_core(core: Arc<SimCore>) -> Self {
        LocalSimClient { core }
    }

    pub fn core(&self) -> &Arc<SimCore> {
        &self.core
    }
}

impl SimClient for LocalSimClient {
    fn create_episode(&self, req: &CreateEpisodeRequest) -> Result<StepResponse, ClientError> {
        Ok(self.core.create_episode(req.clone())?)
    }

    fn step(&self, episode_id: &str, action: MergedAction) -> Result<StepResponse, ClientError> {
        Ok(self.core.step(episode_id, &action.token_name())?)
    }

    fn close_episode(&self, episode_id: &str) -> Result<(), ClientError> {
        Ok(self.core.close_episode(episode_id)?)
    }

    fn preload(&self, scene_ids: &[String]) -> Result<PreloadResponse, ClientError> {
        Ok(self.core.request_preload(scene_ids.to_vec()))
    }

    fn cache_stats(&self) -> Result<CacheStats, ClientError> {
        Ok(self.core.store.stats())
    }
}

// ---- HTTP client ----------------------------------------------------------------

pub struct HttpSimClient {
    base: String,
    agent: ureq::Agent,
}

impl HttpSimClient {
    /// `base` like `http://127.0.0.1:7700` (no trailing slash).
    pub fn new(base: &str) -> Self {
        HttpSimClient {
            base: base.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new()
                .timeout(std::time::Duration::from_secs(30))
                .build(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn decode<T: serde::de::DeserializeOwned>(
        result: Result<ureq::Response, ureq::Error>,
    ) -> Result<T, ClientError> {
        match result {
            Ok(resp) => resp
                .into_json::<T>()
                .map_err(|e| ClientError::Transport(format!("decoding response: {e}"))),
            Err(ureq::Error::Status(status, resp)) => {
                let message = resp
                    .into_json::<ErrorResponse>()
                    .map(|e| e.error)
                    .unwrap_or_else(|e| format!("undecodable error body: {e}"));
                Err(ClientError::Status { status, message })
            }
            Err(e) => Err(ClientError::Transport(e.to_string())),
        }
    }

    pub fn healthz(&self) -> Result<(), ClientError> {
        let _: serde_json::Value = Self::decode(self.agent.get(&self.url("/healthz")).call())?;
        Ok(())
    }

    pub fn session_count(&self) -> Result<usize, ClientError> {
        let c: SessionCount = Self::decode(self.agent.get(&self.url("/sessions/count")).call())?;
        Ok(c.sessions)
    }
}

impl SimClient for HttpSimClient {
    fn create_episode(&self, req: &CreateEpisodeRequest) -> Result<StepResponse, ClientError> {
        Self::decode(self.agent.post(&self.url("/episodes")).send_json(req))
    }

    fn step(&self, episode_id: &str, action: MergedAction) -> Result<StepResponse, ClientError> {
        let path = format!("/episodes/{episode_id}/step");
        Self::decode(self.agent.post(&self.url(&path)).send_json(StepRequest {
            action: action.token_name(),
        }))
    }

    fn close_episode(&self, episode_id: &str) -> Result<(), ClientError> {
        let path = format!("/episodes/{episode_id}");
        match self.agent.delete(&self.url(&path)).call() {
            Ok(_) => Ok(()),
            Err(ureq::Error::Status(status, resp)) => {
                let message = resp
                    .into_json::<ErrorResponse>()
                    .map(|e| e.error)
                    .unwrap_or_default();
                Err(ClientError::Status { status, message })
            }
            Err(e) => Err(ClientError::Transport(e.to_string())),
        }
    }

    fn preload(&self, scene_ids: &[String]) -> Result<PreloadResponse, ClientError> {
        Self::decode(
            self.agent
                .post(&self.url("/scenes/preload"))
                .send_json(PreloadRequest {
                    scene_ids: scene_ids.to_vec(),
                }),
        )
    }

    fn cache_stats(&self) -> Result<CacheStats, ClientError> {
        Self::decode(self.agent.get(&self.url("/cache/stats")).call())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::test_support::empty_scene;
    use crate::server::serve;
    use crate::world::{Instruction, Pose};

    fn scene_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let mut scene = empty_scene(40, 40);
        scene.scene_id = "s0".into();
        scene.save(&dir.path().join("s0.scene")).unwrap();
        dir
    }

    fn sample_request(id: &str) -> CreateEpisodeRequest {
        CreateEpisodeRequest {
            episode_id: id.into(),
            scene_id: "s0".into(),
            start: Pose::new(2.125, 2.125, 0.0).into(),
            goal: Pose::new(6.125, 2.125, 0.0).into(),
            instruction: Instruction {
                tokens: vec![crate::world::InstructionToken {
                    landmark_id: 0,
                    relation: crate::world::Relation::StopAt,
                }],
            },
        }
    }

    fn drive(client: &dyn SimClient) -> Vec<String> {
        let mut transcript = Vec::new();
        let first = client.create_episode(&sample_request("e0")).unwrap();
        transcript.push(serde_json::to_string(&first).unwrap());
        for action in ["F3", "F3", "L2", "R2", "F3", "S"] {
            let resp = client
                .step("e0", MergedAction::from_token_name(action).unwrap())
                .unwrap();
            transcript.push(serde_json::to_string(&resp).unwrap());
        }
        client.close_episode("e0").unwrap();
        transcript
    }

    #[test]
    fn local_and_http_transcripts_are_byte_identical() {
        let dir = scene_dir();
        let local = LocalSimClient::new(dir.path().to_path_buf(), 4);
        let t_local = drive(&local);

        let handle = serve("127.0.0.1:0", dir.path().to_path_buf(), 4, 2).unwrap();
        let http = HttpSimClient::new(&format!("http://127.0.0.1:{}", handle.port));
        http.healthz().unwrap();
        let t_http = drive(&http);
        assert_eq!(t_local, t_http);
        assert_eq!(http.session_count().unwrap(), 0);
        handle.stop();
    }

    #[test]
    fn http_errors_carry_status_codes() {
        let dir = scene_dir();
        let handle = serve("127.0.0.1:0", dir.path().to_path_buf(), 4, 1).unwrap();
        let http = HttpSimClient::new(&format!("http://127.0.0.1:{}", handle.port));
        match http.step("ghost", MergedAction::from_token_name("F1").unwrap()) {
            Err(ClientError::Status { status: 404, .. }) => {}
            other => panic!("expected 404, got {other:?}"),
        }
        let mut bad = sample_request("e1");
        bad.scene_id = "missing".into();
        match http.create_episode(&bad) {
            Err(ClientError::Status { status: 404, .. }) => {}
            other => panic!("expected 404, got {other:?}"),
        }
        http.create_episode(&sample_request("e2")).unwrap();
        match http.create_episode(&sample_request("e2")) {
            Err(ClientError::Status { status: 409, .. }) => {}
            other => panic!("expected 409, got {other:?}"),
        }
        handle.stop();
    }

    #[test]
    fn preload_then_rollout_hits_the_cache() {
        let dir = scene_dir();
        let handle = serve("127.0.0.1:0", dir.path().to_path_buf(), 4, 1).unwrap();
        let http = HttpSimClient::new(&format!("http://127.0.0.1:{}", handle.port));
        let resp = http.preload(&["s0".into(), "zz".into()]).unwrap();
        assert_eq!(resp.accepted, vec!["s0".to_string()]);
        assert_eq!(resp.unknown, vec!["zz".to_string()]);
        // wait for the background worker to land the scene
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
        loop {
            let stats = http.cache_stats().unwrap();
            if stats.preloads >= 1 {
                break;
            }
            assert!(std::time::Instant::now() < deadline, "preload never landed");
            std::thread::sleep(std::time::Duration::from_millis(10));
        }
        http.create_episode(&sample_request("e0")).unwrap();
        let stats = http.cache_stats().unwrap();
        assert_eq!(stats.misses, 0);
        assert_eq!(stats.hits, 1);
        handle.stop();
    }
}
