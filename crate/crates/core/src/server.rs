//! Standalone simulator: scene store with an LRU cache and background
//! preloading, episode sessions, and a small HTTP front end.
//!
//! The server is transport-thin: all behavior lives in [`SimCore`], which is
//! also driven directly by the in-process client, so local and remote
//! rollouts share one code path.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::protocol::*;
use crate::scene::Scene;
use crate::world::{apply_primitive, observe, EpisodeState, MergedAction, Pose};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scene {0} not found")]
    UnknownScene(String),
    #[error("episode {0} not found")]
    UnknownEpisode(String),
    #[error("episode {0} already exists")]
    DuplicateEpisode(String),
    #[error("episode {0} is already done")]
    EpisodeDone(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl SimError {
    pub fn status(&self) -> u16 {
        match self {
            SimError::UnknownScene(_) | SimError::UnknownEpisode(_) => 404,
            SimError::DuplicateEpisode(_) | SimError::EpisodeDone(_) => 409,
            SimError::BadRequest(_) => 400,
            SimError::Internal(_) => 500,
        }
    }
}

// ---- scene store -------------------------------------------------------------

struct LruState {
    /// Most-recently-used last.
    entries: Vec<(String, Arc<Scene>)>,
    stats: CacheStats,
}

/// Disk-backed scene store with an LRU cache. Capacity 0 disables caching
/// entirely (every lookup is a miss that reloads from disk), which exists so
/// the caching speedup can be measured against a true baseline.
pub struct SceneStore {
    dir: PathBuf,
    capacity: usize,
    lru: Mutex<LruState>,
}

impl SceneStore {
    pub fn new(dir: PathBuf, capacity: usize) -> Self {
        SceneStore {
            dir,
            capacity,
            lru: Mutex::new(LruState {
                entries: Vec::new(),
                stats: CacheStats {
                    capacity,
                    ..Default::default()
                },
            }),
        }
    }

    pub fn scene_path(&self, scene_id: &str) -> PathBuf {
        self.dir.join(format!("{scene_id}.scene"))
    }

    fn load_from_disk(&self, scene_id: &str) -> Result<Arc<Scene>, SimError> {
        let path = self.scene_path(scene_id);
        if !path.is_file() {
            return Err(SimError::UnknownScene(scene_id.to_string()));
        }
        let scene = Scene::load(&path)
            .map_err(|e| SimError::Internal(format!("loading scene {scene_id}: {e}")))?;
        if scene.scene_id != scene_id {
            return Err(SimError::Internal(format!(
                "scene file {} declares id {}",
                path.display(),
                scene.scene_id
            )));
        }
        Ok(Arc::new(scene))
    }

    fn insert_locked(&self, lru: &mut LruState, scene_id: &str, scene: Arc<Scene>) {
        if self.capacity == 0 {
            return;
        }
        lru.entries.retain(|(id, _)| id != scene_id);
        if lru.entries.len() >= self.capacity {
            lru.entries.remove(0);
            lru.stats.evictions += 1;
        }
        lru.entries.push((scene_id.to_string(), scene));
        lru.stats.entries = lru.entries.len();
    }

    pub fn get(&self, scene_id: &str) -> Result<Arc<Scene>, SimError> {
        {
            let mut lru = self.lru.lock().unwrap();
            if let Some(idx) = lru.entries.iter().position(|(id, _)| id == scene_id) {
                let entry = lru.entries.remove(idx);
                let scene = entry.1.clone();
                lru.entries.push(entry);
                lru.stats.hits += 1;
                return Ok(scene);
            }
            lru.stats.misses += 1;
        }
        // load outside the lock so a slow disk read doesn't serialize hits
        let scene = self.load_from_disk(scene_id)?;
        let mut lru = self.lru.lock().unwrap();
        self.insert_locked(&mut lru, scene_id, scene.clone());
        Ok(scene)
    }

    /// Load a scene into the cache without counting a miss. No-op if already
    /// cached.
    pub fn preload(&self, scene_id: &str) -> Result<(), SimError> {
        {
            let lru = self.lru.lock().unwrap();
            if lru.entries.iter().any(|(id, _)| id == scene_id) {
                return Ok(());
            }
        }
        let scene = self.load_from_disk(scene_id)?;
        let mut lru = self.lru.lock().unwrap();
        if !lru.entries.iter().any(|(id, _)| id == scene_id) {
            self.insert_locked(&mut lru, scene_id, scene);
            lru.stats.preloads += 1;
        }
        Ok(())
    }

    pub fn known(&self, scene_id: &str) -> bool {
        self.scene_path(scene_id).is_file()
    }

    pub fn stats(&self) -> CacheStats {
        self.lru.lock().unwrap().stats
    }
}

// ---- episode sessions -------------------------------------------------------

struct Session {
    state: EpisodeState,
    scene: Arc<Scene>,
}

/// All simulator behavior behind the HTTP surface.
pub struct SimCore {
    pub store: SceneStore,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    preload_tx: Mutex<Option<mpsc::Sender<String>>>,
}

impl SimCore {
    pub fn new(scene_dir: PathBuf, cache_capacity: usize) -> Arc<Self> {
        let core = Arc::new(SimCore {
            store: SceneStore::new(scene_dir, cache_capacity),
            sessions: Mutex::new(HashMap::new()),
            preload_tx: Mutex::new(None),
        });
        // background preload worker; requests are fire-and-forget
        let (tx, rx) = mpsc::channel::<String>();
        *core.preload_tx.lock().unwrap() = Some(tx);
        let worker = Arc::downgrade(&core);
        std::thread::spawn(move || {
            while let Ok(scene_id) = rx.recv() {
                let Some(core) = worker.upgrade() else { break };
                let _ = core.store.preload(&scene_id);
            }
        });
        core
    }

    fn response_for(session: &Session, sub_poses: Vec<PoseWire>) -> Result<StepResponse, SimError> {
        let obs = observe(&session.state, &session.scene)
            .map_err(|e| SimError::Internal(e.to_string()))?;
        let d_goal = session
            .state
            .goal_distance(&session.scene)
            .map_err(|e| SimError::Internal(e.to_string()))?;
        Ok(StepResponse {
            observation: obs,
            pose: session.state.pose.into(),
            sub_poses,
            d_goal,
            min_goal_distance: session.state.min_goal_distance_seen,
            steps_taken: session.state.steps_taken,
            collision: session.state.last_collision,
            done: session.state.done,
            stopped: session.state.stopped,
            success: session.state.success(&session.scene),
        }
        .rounded())
    }

    pub fn create_episode(&self, req: CreateEpisodeRequest) -> Result<StepResponse, SimError> {
        let scene = self.store.get(&req.scene_id)?;
        req.instruction
            .validate(&scene)
            .map_err(|e| SimError::BadRequest(format!("invalid instruction: {e}")))?;
        let state = EpisodeState::new(
            req.episode_id.clone(),
            &scene,
            Pose::from(req.start),
            Pose::from(req.goal),
            req.instruction,
        )
        .map_err(|e| SimError::BadRequest(e.to_string()))?;
        let session = Session { state, scene };
        let resp = Self::response_for(&session, Vec::new())?;
        let mut sessions = self.sessions.lock().unwrap();
        if sessions.contains_key(&req.episode_id) {
            return Err(SimError::DuplicateEpisode(req.episode_id));
        }
        sessions.insert(req.episode_id, Arc::new(Mutex::new(session)));
        Ok(resp)
    }

    pub fn step(&self, episode_id: &str, action_name: &str) -> Result<StepResponse, SimError> {
        let action = MergedAction::from_token_name(action_name)
            .ok_or_else(|| SimError::BadRequest(format!("unknown action `{action_name}`")))?;
        let session = {
            let sessions = self.sessions.lock().unwrap();
            sessions
                .get(episode_id)
                .cloned()
                .ok_or_else(|| SimError::UnknownEpisode(episode_id.to_string()))?
        };
        let mut session = session.lock().unwrap();
        if session.state.done {
            return Err(SimError::EpisodeDone(episode_id.to_string()));
        }
        let mut sub_poses = Vec::new();
        let session = &mut *session;
        for p in action.primitives() {
            apply_primitive(&mut session.state, &session.scene, p)
                .map_err(|e| SimError::Internal(e.to_string()))?;
            sub_poses.push(session.state.pose.into());
        }
        Self::response_for(&session, sub_poses)
    }

    pub fn close_episode(&self, episode_id: &str) -> Result<(), SimError> {
        self.sessions
            .lock()
            .unwrap()
            .remove(episode_id)
            .map(|_| ())
            .ok_or_else(|| SimError::UnknownEpisode(episode_id.to_string()))
    }

    /// Queue scenes for background preloading. Ids without a scene file are
    /// reported back instead of queued.
    pub fn request_preload(&self, scene_ids: Vec<String>) -> PreloadResponse {
        let mut accepted = Vec::new();
        let mut unknown = Vec::new();
        let tx = self.preload_tx.lock().unwrap();
        for id in scene_ids {
            if self.store.known(&id) {
                if let Some(tx) = tx.as_ref() {
                    let _ = tx.send(id.clone());
                }
                accepted.push(id);
            } else {
                unknown.push(id);
            }
        }
        PreloadResponse { accepted, unknown }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }
}

// ---- HTTP front end -----------------------------------------------------------

pub struct ServerHandle {
    pub port: u16,
    pub core: Arc<SimCore>,
    stop: Arc<AtomicBool>,
    threads: Vec<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn json_response<T: Serialize>(status: u16, body: &T) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    let bytes = serde_json::to_vec(body).expect("serializable response");
    tiny_http::Response::from_data(bytes)
        .with_status_code(status)
        .with_header(
            tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap(),
        )
}

fn respond_err(req: tiny_http::Request, e: SimError) {
    let status = e.status();
    let _ = req.respond(json_response(
        status,
        &ErrorResponse {
            error: e.to_string(),
        },
    ));
}

fn handle(core: &SimCore, mut req: tiny_http::Request) {
    let url = req.url().to_string();
    let method = req.method().clone();
    let segments: Vec<&str> = url.trim_matches('/').split('/').collect();
    use tiny_http::Method;
    match (&method, segments.as_slice()) {
        (Method::Get, ["healthz"]) => {
            let _ = req.respond(json_response(200, &serde_json::json!({ "ok": true })));
        }
        (Method::Get, ["cache", "stats"]) => {
            let _ = req.respond(json_response(200, &core.store.stats()));
        }
        (Method::Get, ["sessions", "count"]) => {
            let _ = req.respond(json_response(
                200,
                &SessionCount {
                    sessions: core.session_count(),
                },
            ));
        }
        (Method::Post, ["episodes"]) => {
            let parsed: Result<CreateEpisodeRequest, _> = serde_json::from_reader(req.as_reader());
            match parsed {
                Err(e) => respond_err(req, SimError::BadRequest(format!("bad body: {e}"))),
                Ok(body) => match core.create_episode(body) {
                    Ok(resp) => {
                        let _ = req.respond(json_response(201, &resp));
                    }
                    Err(e) => respond_err(req, e),
                },
            }
        }
        (Method::Post, ["episodes", id, "step"]) => {
            let id = id.to_string();
            let parsed: Result<StepRequest, _> = serde_json::from_reader(req.as_reader());
            match parsed {
                Err(e) => respond_err(req, SimError::BadRequest(format!("bad body: {e}"))),
                Ok(body) => match core.step(&id, &body.action) {
                    Ok(resp) => {
                        let _ = req.respond(json_response(200, &resp));
                    }
                    Err(e) => respond_err(req, e),
                },
            }
        }
        (Method::Delete, ["episodes", id]) => match core.close_episode(id) {
            Ok(()) => {
                let _ = req.respond(tiny_http::Response::empty(204));
            }
            Err(e) => respond_err(req, e),
        },
        (Method::Post, ["scenes", "preload"]) => {
            let parsed: Result<PreloadRequest, _> = serde_json::from_reader(req.as_reader());
            match parsed {
                Err(e) => respond_err(req, SimError::BadRequest(format!("bad body: {e}"))),
                Ok(body) => {
                    let resp = core.request_preload(body.scene_ids);
                    let _ = req.respond(json_response(202, &resp));
                }
            }
        }
        _ => {
            let _ = req.respond(json_response(
                404,
                &ErrorResponse {
                    error: format!("no route for {method} {url}"),
                },
            ));
        }
    }
}

/// Start the simulator on `addr` (port 0 picks a free port) with `workers`
/// accept threads. Returns a handle that stops the server on drop.
pub fn serve(
    addr: &str,
    scene_dir: PathBuf,
    cache_capacity: usize,
    workers: usize,
) -> Result<ServerHandle, SimError> {
    let core = SimCore::new(scene_dir, cache_capacity);
    let server =
        Arc::new(tiny_http::Server::http(addr).map_err(|e| SimError::Internal(e.to_string()))?);
    let port = server.server_addr().to_ip().map(|a| a.port()).unwrap_or(0);
    let stop = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();
    for _ in 0..workers.max(1) {
        let server = server.clone();
        let core = core.clone();
        let stop = stop.clone();
        threads.push(std::thread::spawn(move || loop {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            match server.recv_timeout(Duration::from_millis(50)) {
                Ok(Some(req)) => handle(&core, req),
                Ok(None) => {}
                Err(_) => break,
            }
        }));
    }
    Ok(ServerHandle {
        port,
        core,
        stop,
        threads,
    })
}
