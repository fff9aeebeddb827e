//! Command-line front end: dataset generation, the two training stages,
//! evaluation, the simulator server, ablation studies, and report rendering.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 runtime failure.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Config;
use crate::metrics;
use crate::optim::AdamWConfig;
use crate::orchestrator::{
    read_trajectories, rollout_episode, write_trajectories, RolloutConfig, Trajectory,
};
use crate::policy::{
    expect_dims, load_checkpoint, save_checkpoint, Mode, OptimizerState, PolicyDims, PolicyParams,
};
use crate::scene::Scene;
use crate::server::serve;
use crate::sim_client::{HttpSimClient, LocalSimClient, SimClient};
use crate::taskgen::{
    generate_episode, generate_scene, read_dataset, write_dataset, Episode, EpisodeGenConfig,
    SceneGenConfig,
};
use crate::train_il::{train_il, ILConfig};
use crate::train_rl::{train_rl, RLConfig, RewardKind};

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
    fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "gridnav", version, about = "Continuous grid-world navigation: task generation, simulator, IL + GRPO training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural scenes into a directory
    GenScenes(GenScenesArgs),
    /// Generate episode datasets over existing scenes
    GenEpisodes(GenEpisodesArgs),
    /// Imitation-learning bootstrap from shortest-path experts
    TrainIl(TrainIlArgs),
    /// GRPO fine-tuning from an IL checkpoint
    TrainRl(TrainRlArgs),
    /// Greedy evaluation of a checkpoint (no early stopping)
    Eval(EvalArgs),
    /// Run the standalone HTTP simulator
    ServeSim(ServeSimArgs),
    /// Run an ablation study end to end
    Ablate(AblateArgs),
    /// Render a CSV report from a training log or a trajectory dump
    Report(ReportArgs),
}

#[derive(Args)]
struct GenScenesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 5)]
    rooms: usize,
}

#[derive(Args)]
struct GenEpisodesArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 3.0)]
    min_goal_distance: f64,
    #[arg(long, default_value_t = 15.0)]
    max_goal_distance: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    MultiTurn,
    SingleTurn,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::MultiTurn => Mode::MultiTurn,
            ModeArg::SingleTurn => Mode::SingleTurn,
        }
    }
}

#[derive(Args)]
struct TrainIlArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the resolved configuration and exit
    #[arg(long)]
    print_config: bool,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RewardArg {
    Soft,
    Hard,
    PathAlign,
}

#[derive(Args)]
struct TrainRlArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    print_config: bool,
    /// Remote simulator base URL; omitted = in-process simulator
    #[arg(long)]
    sim: Option<String>,
    #[arg(long)]
    cache_capacity: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    kl: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    reward: Option<RewardArg>,
    #[arg(long)]
    w_success: Option<f64>,
    #[arg(long)]
    w_ndtw: Option<f64>,
    /// Score the soft reward literally as d_goal / 3 instead of the
    /// distance-decreasing form
    #[arg(long)]
    literal_soft_reward: bool,
    #[arg(long)]
    alpha_roll: Option<f64>,
    /// Disable dynamic early stopping entirely
    #[arg(long)]
    no_early_stop: bool,
    #[arg(long)]
    max_resample_attempts: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Must match the checkpoint's conditioning mode when given
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    sim: Option<String>,
    #[arg(long)]
    cache_capacity: Option<usize>,
    /// Per-episode metric CSV output
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trajectory JSONL dump
    #[arg(long)]
    traj: Option<PathBuf>,
    /// Directory for per-episode SVG renders
    #[arg(long)]
    svg_dir: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ServeSimArgs {
    /// Falls back to SIM_SCENE_DIR
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Falls back to SIM_PORT, then 7700
    #[arg(long)]
    port: Option<u16>,
    /// Falls back to SIM_CACHE_CAPACITY, then 8
    #[arg(long)]
    cache_capacity: Option<usize>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Study {
    Reward,
    Paradigm,
    Speedups,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    #[arg(long, value_enum)]
    study: Study,
    #[arg(long)]
    out: PathBuf,
    /// IL checkpoint every cell starts from
    #[arg(long)]
    init: PathBuf,
    #[arg(long, default_value_t = 60)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    eval_limit: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Training-log JSONL (IL or RL); emits the logged series as CSV
    #[arg(long)]
    log: Option<PathBuf>,
    /// Trajectory JSONL; emits per-episode navigation metrics as CSV
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenScenes(a) => gen_scenes(a),
        Command::GenEpisodes(a) => gen_episodes(a),
        Command::TrainIl(a) => train_il_cmd(a),
        Command::TrainRl(a) => train_rl_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ServeSim(a) => serve_sim(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

// ---- helpers -------------------------------------------------------------------

fn load_scene_dir(dir: &Path) -> Result<HashMap<String, Arc<Scene>>, CliError> {
    let mut scenes = HashMap::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| CliError::usage(format!("scene dir {}: {e}", dir.display())))?
    {
        let path = entry.map_err(CliError::from)?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("scene") {
            let scene = Scene::load(&path)?;
            scenes.insert(scene.scene_id.clone(), Arc::new(scene));
        }
    }
    if scenes.is_empty() {
        return Err(CliError::usage(format!(
            "no .scene files in {}",
            dir.display()
        )));
    }
    Ok(scenes)
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, CliError> {
    match path {
        None => Ok(Config::default()),
        Some(p) => Config::load(p).map_err(|e| CliError::usage(e.to_string())),
    }
}

fn open_log(path: &Option<PathBuf>) -> Result<Option<std::fs::File>, CliError> {
    Ok(match path {
        None => None,
        Some(p) => Some(std::fs::File::create(p)?),
    })
}

fn make_client(
    sim: &Option<String>,
    scenes: &Path,
    cache_capacity: usize,
) -> Result<Box<dyn SimClient>, CliError> {
    Ok(match sim {
        Some(url) => {
            let client = HttpSimClient::new(url);
            client
                .healthz()
                .map_err(|e| CliError::runtime(format!("simulator at {url}: {e}")))?;
            Box::new(client)
        }
        None => Box::new(LocalSimClient::new(scenes.to_path_buf(), cache_capacity)),
    })
}

// ---- subcommands ----------------------------------------------------------------

fn gen_scenes(a: GenScenesArgs) -> CliResult {
    std::fs::create_dir_all(&a.out)?;
    let cfg = SceneGenConfig {
        width: a.width,
        height: a.height,
        room_count: a.rooms,
        ..Default::default()
    };
    let mut written = 0usize;
    let mut attempt = 0u64;
    while written < a.count {
        let seed = a.seed.wrapping_add(attempt);
        attempt += 1;
        if attempt > (a.count as u64) * 50 {
            return Err(CliError::runtime(
                "scene generation kept failing; relax the geometry settings",
            ));
        }
        let Ok(scene) = generate_scene(seed, &cfg) else {
            continue;
        };
        scene.save(&a.out.join(format!("{}.scene", scene.scene_id)))?;
        written += 1;
    }
    println!("wrote {written} scenes to {}", a.out.display());
    Ok(())
}

fn gen_episodes(a: GenEpisodesArgs) -> CliResult {
    let scenes = load_scene_dir(&a.scenes)?;
    let mut ids: Vec<&String> = scenes.keys().collect();
    ids.sort();
    let cfg = EpisodeGenConfig {
        min_goal_distance: a.min_goal_distance,
        max_goal_distance: a.max_goal_distance,
        ..Default::default()
    };
    let mut episodes = Vec::with_capacity(a.count);
    let mut attempt = 0u64;
    while episodes.len() < a.count {
        let scene = &scenes[ids[episodes.len() % ids.len()]];
        let seed = a.seed.wrapping_add(attempt);
        attempt += 1;
        if attempt > (a.count as u64) * 200 {
            return Err(CliError::runtime(
                "episode generation kept failing; widen the goal-distance range",
            ));
        }
        if let Ok(ep) = generate_episode(scene, seed, &cfg) {
            episodes.push(ep);
        }
    }
    let manifest = write_dataset(&episodes, &a.out, &a.split)?;
    println!(
        "wrote {} episodes ({} split) to {} [sha256 {}]",
        episodes.len(),
        manifest.split,
        a.out.display(),
        &manifest.digest[..12]
    );
    Ok(())
}

fn train_il_cmd(a: TrainIlArgs) -> CliResult {
    let file_cfg = load_config(&a.config)?;
    let bad = |e: crate::config::ConfigError| CliError::usage(e.to_string());
    let mode: Mode = a
        .mode
        .map(Mode::from)
        .or_else(|| file_cfg.get("mode").and_then(Mode::parse))
        .unwrap_or(Mode::MultiTurn);
    let cfg = ILConfig {
        mode,
        steps: a
            .steps
            .or(file_cfg.get_usize("steps").map_err(bad)?)
            .unwrap_or(400),
        batch_size: a
            .batch_size
            .or(file_cfg.get_usize("batch_size").map_err(bad)?)
            .unwrap_or(16),
        optimizer: AdamWConfig {
            lr: a.lr.or(file_cfg.get_f64("lr").map_err(bad)?).unwrap_or(3e-3),
            weight_decay: file_cfg
                .get_f64("weight_decay")
                .map_err(bad)?
                .unwrap_or(1e-4),
            ..Default::default()
        },
        seed: a
            .seed
            .or(file_cfg.get_u64("seed").map_err(bad)?)
            .unwrap_or(0),
        val_every: a
            .val_every
            .or(file_cfg.get_usize("val_every").map_err(bad)?)
            .unwrap_or(100),
        val_episodes: file_cfg.get_usize("val_episodes").map_err(bad)?.unwrap_or(40),
    };
    let hidden = a
        .hidden
        .or(file_cfg.get_usize("hidden").map_err(bad)?)
        .unwrap_or(128);
    if a.print_config {
        let mut resolved = file_cfg.clone();
        resolved.set("mode", mode.name());
        resolved.set("steps", &cfg.steps.to_string());
        resolved.set("batch_size", &cfg.batch_size.to_string());
        resolved.set("lr", &cfg.optimizer.lr.to_string());
        resolved.set("weight_decay", &cfg.optimizer.weight_decay.to_string());
        resolved.set("seed", &cfg.seed.to_string());
        resolved.set("val_every", &cfg.val_every.to_string());
        resolved.set("hidden", &hidden.to_string());
        print!("{}", resolved.render());
        return Ok(());
    }
    let scenes = load_scene_dir(&a.scenes)?;
    let train = read_dataset(&a.train)?;
    let val = match &a.val {
        Some(p) => Some(read_dataset(p)?),
        None => None,
    };
    let dims = PolicyDims {
        enc_hidden: hidden,
        hidden,
        ..Default::default()
    };
    let mut params = PolicyParams::init(dims, cfg.seed);
    let mut opt = OptimizerState::fresh(params.data.len());
    let client = LocalSimClient::new(a.scenes.clone(), 8);
    let val_ref: Option<(&dyn SimClient, &[Episode])> =
        val.as_deref().map(|v| (&client as &dyn SimClient, v));
    let mut log_file = open_log(&a.log)?;
    train_il(&mut params, &mut opt, &scenes, &train, val_ref, &cfg, |line| {
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(f, "{}", serde_json::to_string(line).unwrap());
        }
        if line.step % 25 == 0 || line.val_sr.is_some() {
            println!(
                "step {:>5}  loss {:.4}{}",
                line.step,
                line.loss,
                line.val_sr
                    .map(|s| format!("  val_sr {s:.3}"))
                    .unwrap_or_default()
            );
        }
    })?;
    save_checkpoint(&params, &opt, cfg.mode, &a.out)?;
    println!("saved checkpoint to {}", a.out.display());
    Ok(())
}

fn train_rl_cmd(a: TrainRlArgs) -> CliResult {
    let file_cfg = load_config(&a.config)?;
    let bad = |e: crate::config::ConfigError| CliError::usage(e.to_string());
    let (mut params, _old_opt, mode) = load_checkpoint(&a.init)?;
    let reward = match a.reward.unwrap_or(RewardArg::Soft) {
        RewardArg::Soft => RewardKind::Soft,
        RewardArg::Hard => RewardKind::Hard,
        RewardArg::PathAlign => RewardKind::PathAlign {
            w_success: a.w_success.unwrap_or(10.0),
            w_ndtw: a.w_ndtw.unwrap_or(5.0),
        },
    };
    let alpha_roll = if a.no_early_stop {
        None
    } else {
        Some(
            a.alpha_roll
                .or(file_cfg.get_f64("alpha_roll").map_err(bad)?)
                .unwrap_or(2.0),
        )
    };
    let cfg = RLConfig {
        mode,
        steps: a
            .steps
            .or(file_cfg.get_usize("steps").map_err(bad)?)
            .unwrap_or(300),
        prompts_per_batch: a
            .prompts
            .or(file_cfg.get_usize("prompts").map_err(bad)?)
            .unwrap_or(8),
        group_size: a
            .group_size
            .or(file_cfg.get_usize("group_size").map_err(bad)?)
            .unwrap_or(4),
        clip_epsilon: a
            .epsilon
            .or(file_cfg.get_f64("epsilon").map_err(bad)?)
            .unwrap_or(0.28),
        kl_coefficient: a
            .kl
            .or(file_cfg.get_f64("kl").map_err(bad)?)
            .unwrap_or(0.0),
        optimizer: AdamWConfig {
            lr: a.lr.or(file_cfg.get_f64("lr").map_err(bad)?).unwrap_or(1e-5),
            weight_decay: 0.0,
            ..Default::default()
        },
        reward,
        literal_soft_reward: a.literal_soft_reward,
        alpha_roll,
        max_resample_attempts: a
            .max_resample_attempts
            .or(file_cfg.get_usize("max_resample_attempts").map_err(bad)?)
            .unwrap_or(2),
        temperature: a
            .temperature
            .or(file_cfg.get_f64("temperature").map_err(bad)?)
            .unwrap_or(1.0),
        seed: a
            .seed
            .or(file_cfg.get_u64("seed").map_err(bad)?)
            .unwrap_or(0),
        workers: a
            .workers
            .or(file_cfg.get_usize("workers").map_err(bad)?)
            .unwrap_or(8),
    };
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    if a.print_config {
        let mut resolved = file_cfg.clone();
        resolved.set("mode", mode.name());
        resolved.set("steps", &cfg.steps.to_string());
        resolved.set("prompts", &cfg.prompts_per_batch.to_string());
        resolved.set("group_size", &cfg.group_size.to_string());
        resolved.set("epsilon", &cfg.clip_epsilon.to_string());
        resolved.set("kl", &cfg.kl_coefficient.to_string());
        resolved.set("lr", &cfg.optimizer.lr.to_string());
        resolved.set("reward", &serde_json::to_string(&cfg.reward).unwrap());
        resolved.set(
            "alpha_roll",
            &cfg.alpha_roll.map(|v| v.to_string()).unwrap_or("off".into()),
        );
        resolved.set("temperature", &cfg.temperature.to_string());
        resolved.set("seed", &cfg.seed.to_string());
        resolved.set("workers", &cfg.workers.to_string());
        print!("{}", resolved.render());
        return Ok(());
    }
    let train = read_dataset(&a.train)?;
    let client = make_client(&a.sim, &a.scenes, a.cache_capacity.unwrap_or(8))?;
    let mut opt = OptimizerState::fresh(params.data.len());
    let mut log_file = open_log(&a.log)?;
    train_rl(&mut params, &mut opt, client.as_ref(), &train, &cfg, |line| {
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(f, "{}", serde_json::to_string(line).unwrap());
        }
        if line.step % 10 == 0 {
            println!(
                "step {:>5}  reward {:.3}  sr {:.3}  len {:.1}  early_stop {:.2}",
                line.step, line.reward_mean, line.sr_train, line.episode_len_mean,
                line.early_stop_rate
            );
        }
    })?;
    save_checkpoint(&params, &opt, mode, &a.out)?;
    println!("saved checkpoint to {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let (params, _, ckpt_mode) = load_checkpoint(&a.ckpt)?;
    if let Some(flag_mode) = a.mode {
        if Mode::from(flag_mode) != ckpt_mode {
            return Err(CliError::usage(format!(
                "checkpoint was trained in {} mode but --mode asked for {}",
                ckpt_mode.name(),
                Mode::from(flag_mode).name()
            )));
        }
    }
    expect_dims(&params, params.dims).map_err(|e| CliError::usage(e.to_string()))?;
    let scenes = load_scene_dir(&a.scenes)?;
    let mut episodes = read_dataset(&a.episodes)?;
    if let Some(limit) = a.limit {
        episodes.truncate(limit);
    }
    let client = make_client(&a.sim, &a.scenes, a.cache_capacity.unwrap_or(8))?;
    let cfg = RolloutConfig::greedy_eval(ckpt_mode);
    let mut trajectories: Vec<Trajectory> = Vec::with_capacity(episodes.len());
    let mut per_episode = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let sid = format!("{}--eval{i}", ep.episode_id);
        let t = rollout_episode(client.as_ref(), &params, ep, &cfg, 0, &sid)?;
        let scene = scenes.get(&ep.scene_id).ok_or_else(|| {
            CliError::usage(format!("episode references unknown scene {}", ep.scene_id))
        })?;
        per_episode.push(metrics::evaluate_episode(&t.record(), ep, scene)?);
        if let Some(dir) = &a.svg_dir {
            std::fs::create_dir_all(dir)?;
            let svg = render_svg(scene, ep, &t);
            std::fs::write(dir.join(format!("{}.svg", ep.episode_id)), svg)?;
        }
        trajectories.push(t);
    }
    let report = metrics::aggregate(per_episode);
    println!(
        "episodes {}  NE {:.3}  SR {:.3}  OSR {:.3}  SPL {:.3}  nDTW {:.3}",
        episodes.len(),
        report.ne_mean,
        report.sr,
        report.osr,
        report.spl_mean,
        report.ndtw_mean
    );
    if let Some(path) = &a.out {
        std::fs::write(path, metrics::report_csv(&report))?;
    }
    if let Some(path) = &a.traj {
        write_trajectories(path, &trajectories)?;
    }
    Ok(())
}

fn serve_sim(a: ServeSimArgs) -> CliResult {
    let scenes = a
        .scenes
        .or_else(|| std::env::var("SIM_SCENE_DIR").ok().map(PathBuf::from))
        .ok_or_else(|| CliError::usage("--scenes or SIM_SCENE_DIR is required"))?;
    let port = match a.port {
        Some(p) => p,
        None => match std::env::var("SIM_PORT") {
            Ok(v) => v
                .parse()
                .map_err(|_| CliError::usage(format!("SIM_PORT `{v}` is not a port")))?,
            Err(_) => 7700,
        },
    };
    let cache_capacity = match a.cache_capacity {
        Some(c) => c,
        None => match std::env::var("SIM_CACHE_CAPACITY") {
            Ok(v) => v.parse().map_err(|_| {
                CliError::usage(format!("SIM_CACHE_CAPACITY `{v}` is not a count"))
            })?,
            Err(_) => 8,
        },
    };
    if !scenes.is_dir() {
        return Err(CliError::usage(format!(
            "scene dir {} does not exist",
            scenes.display()
        )));
    }
    let handle = serve(&format!("0.0.0.0:{port}"), scenes, cache_capacity, a.workers)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    println!(
        "simulator listening on port {} (cache capacity {cache_capacity})",
        handle.port
    );
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

fn ablate(a: AblateArgs) -> CliResult {
    std::fs::create_dir_all(&a.out)?;
    let train = read_dataset(&a.train)?;
    let mut eval = read_dataset(&a.eval)?;
    if let Some(limit) = a.eval_limit {
        eval.truncate(limit);
    }
    let scenes_dir = a.scenes.clone();
    let (init_params, _, init_mode) = load_checkpoint(&a.init)?;

    let cells: Vec<(String, RLConfig)> = match a.study {
        Study::Reward => [
            ("soft", RewardKind::Soft),
            ("hard", RewardKind::Hard),
            (
                "path_align",
                RewardKind::PathAlign {
                    w_success: 10.0,
                    w_ndtw: 5.0,
                },
            ),
        ]
        .into_iter()
        .map(|(name, reward)| {
            (
                name.to_string(),
                RLConfig {
                    mode: init_mode,
                    steps: a.steps,
                    seed: a.seed,
                    reward,
                    ..Default::default()
                },
            )
        })
        .collect(),
        Study::Paradigm => [Mode::MultiTurn, Mode::SingleTurn]
            .into_iter()
            .map(|mode| {
                (
                    mode.name().to_string(),
                    RLConfig {
                        mode,
                        steps: a.steps,
                        seed: a.seed,
                        ..Default::default()
                    },
                )
            })
            .collect(),
        Study::Speedups => ["baseline", "early_stop", "cache", "both"]
            .into_iter()
            .map(|name| {
                (
                    name.to_string(),
                    RLConfig {
                        mode: init_mode,
                        steps: a.steps,
                        seed: a.seed,
                        alpha_roll: match name {
                            "early_stop" | "both" => Some(2.0),
                            _ => None,
                        },
                        ..Default::default()
                    },
                )
            })
            .collect(),
    };

    let baseline_sr = {
        let client = LocalSimClient::new(scenes_dir.clone(), 8);
        crate::train_il::greedy_success_rate(&client, &init_params, &eval, init_mode, "base")?
    };

    let mut summary = vec![format!("cell,sr,delta_sr,reward_mean_last,rollout_s_mean")];
    for (name, cfg) in cells {
        let cell_path = a.out.join(format!("{name}.json"));
        if cell_path.exists() {
            let existing: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(&cell_path)?)?;
            summary.push(format!(
                "{name},{},{},{},{}",
                existing["sr"], existing["delta_sr"], existing["reward_mean_last"],
                existing["rollout_s_mean"]
            ));
            println!("cell {name}: reusing existing result");
            continue;
        }
        let cache_capacity = match (a.study, name.as_str()) {
            (Study::Speedups, "baseline" | "early_stop") => 0,
            _ => 8,
        };
        let client = LocalSimClient::new(scenes_dir.clone(), cache_capacity);
        let mut params = init_params.clone();
        // the paradigm cells must not share token-feedback weights semantics;
        // each cell still starts from the same IL weights
        let mut opt = OptimizerState::fresh(params.data.len());
        let mut last_reward = 0.0;
        let mut rollout_s = Vec::new();
        train_rl(&mut params, &mut opt, &client, &train, &cfg, |line| {
            last_reward = line.reward_mean;
            rollout_s.push(line.wall_time_rollout_s);
        })?;
        let sr =
            crate::train_il::greedy_success_rate(&client, &params, &eval, cfg.mode, &name)?;
        let rollout_s_mean = rollout_s.iter().sum::<f64>() / rollout_s.len().max(1) as f64;
        let cell = serde_json::json!({
            "cell": name,
            "sr": sr,
            "delta_sr": sr - baseline_sr,
            "reward_mean_last": last_reward,
            "rollout_s_mean": rollout_s_mean,
            "cache_stats": client.cache_stats().ok(),
        });
        std::fs::write(&cell_path, serde_json::to_string_pretty(&cell)?)?;
        summary.push(format!(
            "{name},{sr},{},{last_reward},{rollout_s_mean}",
            sr - baseline_sr
        ));
        println!("cell {name}: sr {sr:.3} (baseline {baseline_sr:.3})");
    }
    std::fs::write(a.out.join("summary.csv"), summary.join("\n") + "\n")?;
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    match (&a.log, &a.traj) {
        (Some(log), None) => {
            let body = std::fs::read_to_string(log)?;
            let mut rows: Vec<serde_json::Map<String, serde_json::Value>> = Vec::new();
            for line in body.lines().filter(|l| !l.trim().is_empty()) {
                let v: serde_json::Value = serde_json::from_str(line)
                    .map_err(|e| CliError::usage(format!("{}: {e}", log.display())))?;
                rows.push(v.as_object().cloned().ok_or_else(|| {
                    CliError::usage("log lines must be JSON objects")
                })?);
            }
            if rows.is_empty() {
                return Err(CliError::usage("log file is empty"));
            }
            let mut columns: Vec<String> = rows
                .iter()
                .flat_map(|r| r.keys().cloned())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            if let Some(i) = columns.iter().position(|c| c == "step") {
                columns.remove(i);
                columns.insert(0, "step".into());
            }
            let mut out = columns.join(",") + "\n";
            for row in &rows {
                let cells: Vec<String> = columns
                    .iter()
                    .map(|c| row.get(c).map(|v| v.to_string()).unwrap_or_default())
                    .collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            std::fs::write(&a.out, out)?;
        }
        (None, Some(traj)) => {
            let episodes_path = a
                .episodes
                .as_ref()
                .ok_or_else(|| CliError::usage("--traj reports need --episodes"))?;
            let scenes_dir = a
                .scenes
                .as_ref()
                .ok_or_else(|| CliError::usage("--traj reports need --scenes"))?;
            let episodes = read_dataset(episodes_path)?;
            let by_id: HashMap<&str, &Episode> = episodes
                .iter()
                .map(|e| (e.episode_id.as_str(), e))
                .collect();
            let scenes = load_scene_dir(scenes_dir)?;
            let mut per_episode = Vec::new();
            for line in read_trajectories(traj)? {
                let ep = by_id.get(line.episode_id.as_str()).ok_or_else(|| {
                    CliError::usage(format!("trajectory for unknown episode {}", line.episode_id))
                })?;
                let scene = scenes.get(&ep.scene_id).ok_or_else(|| {
                    CliError::usage(format!("unknown scene {}", ep.scene_id))
                })?;
                per_episode.push(metrics::evaluate_episode(&line.record(), ep, scene)?);
            }
            let report = metrics::aggregate(per_episode);
            std::fs::write(&a.out, metrics::report_csv(&report))?;
        }
        _ => {
            return Err(CliError::usage(
                "pass exactly one of --log (training log) or --traj (trajectory dump)",
            ));
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Minimal SVG render: walls, expert path, rollout path, start/goal markers.
fn render_svg(scene: &Scene, episode: &Episode, traj: &Trajectory) -> String {
    let res = scene.resolution;
    let w = scene.width as f64 * res;
    let h = scene.height as f64 * res;
    let scale = 24.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {w} {h}\">\n",
        w * scale,
        h * scale
    );
    s.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"#fafafa\"/>\n"
    ));
    for row in 0..scene.height {
        for col in 0..scene.width {
            if scene.blocked(crate::scene::Cell::new(col, row)) {
                s.push_str(&format!(
                    "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{res}\" height=\"{res}\" fill=\"#444\"/>\n",
                    col as f64 * res,
                    row as f64 * res
                ));
            }
        }
    }
    let polyline = |pts: &[(f64, f64)], color: &str, width: f64| {
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.3},{y:.3}")).collect();
        format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"/>\n",
            coords.join(" ")
        )
    };
    let expert: Vec<(f64, f64)> = episode.expert_path.iter().map(|p| (p.x, p.y)).collect();
    s.push_str(&polyline(&expert, "#2a7", 0.08));
    s.push_str(&polyline(&traj.path, "#d33", 0.08));
    s.push_str(&format!(
        "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"0.3\" fill=\"#27c\"/>\n",
        episode.start.x, episode.start.y
    ));
    s.push_str(&format!(
        "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"0.3\" fill=\"#fb0\" stroke=\"#a80\" stroke-width=\"0.05\"/>\n",
        episode.goal.x, episode.goal.y
    ));
    s.push_str("</svg>\n");
    s
}
