//! Run orchestration behind the `roadblock` binary: configuration, training,
//! evaluation, MADDPG vs DQN comparison, CSV logs and checkpoints.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use roadblock_core::env::{EpisodeConfig, Scenario};
use roadblock_core::nn::checkpoint::write_atomic;
use roadblock_core::nn::{CheckpointBundle, CheckpointMetadata, Mlp, NnError};
use roadblock_core::sim::HighwayConfig;
use roadblock_core::train::{mean, EpisodeLog, LearnError, TrainConfig, EPISODE_LOG_COLUMNS};
use roadblock_core::{dqn, maddpg};

/// Default output root when neither `--out` nor `out_dir` is given.
pub const OUT_ENV: &str = "ROADBLOCK_OUT";
pub const EPISODES_CSV: &str = "episodes.csv";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const CONFIG_JSON: &str = "config.json";
pub const COMPARE_CSV: &str = "compare.csv";
pub const PLOT_DATA_JSON: &str = "plot_data.json";
/// Episodes at each end of a run used for trend summaries.
pub const SUMMARY_WINDOW: usize = 20;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Runtime(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Runtime(_) | CliError::Io { .. } => 1,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::InvalidConfig(m) => CliError::Config(m),
            LearnError::Env(e) => CliError::Config(e.to_string()),
            LearnError::Nn(e) => CliError::Runtime(e.to_string()),
        }
    }
}

fn checkpoint_error(path: &Path, e: NnError) -> CliError {
    match e {
        NnError::Io(source) => CliError::io(path, source),
        other => CliError::Checkpoint(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Maddpg,
    Dqn,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Maddpg => maddpg::ALGO,
            Algo::Dqn => dqn::ALGO,
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "maddpg" => Ok(Algo::Maddpg),
            "dqn" => Ok(Algo::Dqn),
            other => Err(format!("unknown algo {other:?}, expected maddpg or dqn")),
        }
    }
}

/// One JSON document describing a run. `scenario`, `n_agents` and `seed`
/// take precedence over the matching nested fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub n_agents: usize,
    pub algo: Algo,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub episode: EpisodeConfig,
    pub highway: HighwayConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::TwoLaneOneBlock,
            n_agents: 4,
            algo: Algo::Maddpg,
            seed: 0,
            out_dir: None,
            train: TrainConfig::default(),
            episode: EpisodeConfig::default(),
            highway: HighwayConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of a [`RunConfig`].
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub episodes: Option<usize>,
    pub steps: Option<u64>,
    pub agents: Option<usize>,
    pub seed: Option<u64>,
    pub scenario: Option<Scenario>,
    pub algo: Option<Algo>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.episodes {
            self.train.episodes = v;
        }
        if let Some(v) = o.steps {
            self.train.steps = v;
        }
        if let Some(v) = o.agents {
            self.n_agents = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.scenario {
            self.scenario = v;
        }
        if let Some(v) = o.algo {
            self.algo = v;
        }
        if let Some(v) = &o.out {
            self.out_dir = Some(v.clone());
        }
    }

    /// Folds the top-level fields into the nested configs and validates them.
    pub fn resolve(&self) -> Result<(EpisodeConfig, HighwayConfig, TrainConfig), CliError> {
        let episode = EpisodeConfig {
            n_agents: self.n_agents,
            scenario: self.scenario,
            max_steps: self.train.steps,
            ..self.episode.clone()
        };
        let train = TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        };
        episode.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.scenario
            .highway(&self.highway)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        train.validate()?;
        Ok((episode, self.highway.clone(), train))
    }

    /// `--out`, then `out_dir`, then `$ROADBLOCK_OUT/<run name>`, then `runs/<run name>`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.out_dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(self.run_name())
    }

    pub fn run_name(&self) -> String {
        format!("{}-{}-n{}-s{}", self.algo.name(), self.scenario.name(), self.n_agents, self.seed)
    }
}

pub fn episode_csv(rows: &[EpisodeLog]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record(EPISODE_LOG_COLUMNS).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn eval_csv(rows: &[EpisodeLog], checkpoint_id: &str) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Runtime(e.to_string());
    let mut header: Vec<&str> = EPISODE_LOG_COLUMNS.to_vec();
    header.push("checkpoint_id");
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        w.serialize((row, checkpoint_id)).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Reads an `episodes.csv` (or an eval CSV; extra columns are ignored).
pub fn read_episode_csv(path: &Path) -> Result<Vec<EpisodeLog>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<EpisodeLog>, _>>()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| match e {
        NnError::Io(source) => CliError::io(path, source),
        other => CliError::Runtime(other.to_string()),
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// First 16 hex digits of the SHA-256 of the checkpoint file.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub out_dir: PathBuf,
    pub logs: Vec<EpisodeLog>,
}

impl TrainReport {
    pub fn summary_line(&self, cfg: &RunConfig) -> String {
        let rewards: Vec<f64> = self.logs.iter().map(|l| l.mean_reward).collect();
        let (first, last) = window_means(&rewards, SUMMARY_WINDOW);
        format!(
            "{} {} agents={} seed={} episodes={} first_mean_reward={first:.3} last_mean_reward={last:.3} out={}",
            cfg.algo.name(),
            cfg.scenario.name(),
            cfg.n_agents,
            cfg.seed,
            self.logs.len(),
            self.out_dir.display()
        )
    }
}

/// Means over the first and last `window` entries (clipped to the length).
pub fn window_means(xs: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(xs.len());
    (mean(&xs[..w]), mean(&xs[xs.len() - w..]))
}

/// Trains, then writes `config.json`, `episodes.csv` and `checkpoint.json`
/// into the output directory. Each file is written atomically.
pub fn run_train(cfg: &RunConfig) -> Result<TrainReport, CliError> {
    let (episode, highway, train) = cfg.resolve()?;
    let metadata = |episodes: usize| CheckpointMetadata {
        scenario: cfg.scenario.name().to_string(),
        n_agents: cfg.n_agents,
        seed: cfg.seed,
        episode: episodes,
        role: None,
        agent: None,
    };
    let (logs, bundle) = match cfg.algo {
        Algo::Maddpg => {
            let out = maddpg::train(&episode, &highway, &train)?;
            let bundle = maddpg::to_bundle(&out.nets, metadata(out.logs.len()));
            (out.logs, bundle)
        }
        Algo::Dqn => {
            let out = dqn::dqn_train(&episode, &highway, &train)?;
            let bundle = dqn::to_bundle(&out.agents, metadata(out.logs.len()));
            (out.logs, bundle)
        }
    };
    let out_dir = cfg.output_dir();
    create_dir(&out_dir)?;
    let echo = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out_dir.join(CONFIG_JSON), echo.as_bytes())?;
    write_file(&out_dir.join(EPISODES_CSV), &episode_csv(&logs)?)?;
    let bundle_json = bundle.to_json().map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out_dir.join(CHECKPOINT_JSON), bundle_json.as_bytes())?;
    Ok(TrainReport { out_dir, logs })
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub n_agents: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Episode step cap; the environment default when `None`.
    pub steps: Option<u64>,
    /// Environment settings; scenario and agent count come from the checkpoint and `n_agents`.
    pub config: Option<RunConfig>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub csv_path: PathBuf,
    pub checkpoint_id: String,
    pub logs: Vec<EpisodeLog>,
}

/// Policy networks stored in a bundle: actors for MADDPG, online Q-networks for DQN.
pub fn policies_from_bundle(bundle: &CheckpointBundle) -> Result<Vec<Mlp>, CliError> {
    let map = |e: LearnError| match e {
        LearnError::Nn(e) => CliError::Checkpoint(e.to_string()),
        other => CliError::from(other),
    };
    match bundle.algo.as_str() {
        maddpg::ALGO => Ok(maddpg::from_bundle(bundle, 1e-3)
            .map_err(map)?
            .into_iter()
            .map(|n| n.actor)
            .collect()),
        dqn::ALGO => Ok(dqn::from_bundle(bundle, &TrainConfig::default())
            .map_err(map)?
            .into_iter()
            .map(|a| a.q_net)
            .collect()),
        other => Err(CliError::Checkpoint(format!("unknown algo {other:?} in checkpoint"))),
    }
}

pub fn run_eval(req: &EvalRequest) -> Result<EvalReport, CliError> {
    if !(1..=64).contains(&req.n_agents) {
        return Err(CliError::Config(format!("--agents {} out of range", req.n_agents)));
    }
    let bytes = fs::read(&req.checkpoint).map_err(|e| CliError::io(&req.checkpoint, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    let bundle = CheckpointBundle::from_json(&text).map_err(|e| checkpoint_error(&req.checkpoint, e))?;
    let policies = policies_from_bundle(&bundle)?;
    let scenario: Scenario = bundle
        .metadata
        .scenario
        .parse()
        .map_err(|e: String| CliError::Checkpoint(e))?;
    let base = req.config.clone().unwrap_or_default();
    let episode = EpisodeConfig {
        n_agents: req.n_agents,
        scenario,
        max_steps: req.steps.unwrap_or(base.episode.max_steps),
        ..base.episode.clone()
    };
    episode.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let logs = roadblock_core::train::evaluate_greedy(
        &policies.iter().collect::<Vec<_>>(),
        &bundle.algo,
        &episode,
        &base.highway,
        req.episodes,
        req.seed,
    )?;
    let id = checkpoint_id(&bytes);
    let csv_path = req.out.clone().unwrap_or_else(|| {
        let dir = req.checkpoint.parent().unwrap_or(Path::new("."));
        dir.join(format!("eval_n{}_s{}.csv", req.n_agents, req.seed))
    });
    if let Some(parent) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&csv_path, &eval_csv(&logs, &id)?)?;
    Ok(EvalReport {
        csv_path,
        checkpoint_id: id,
        logs,
    })
}

/// One row of `compare.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub seed: u64,
    pub algo: String,
    pub episodes: usize,
    pub first20_mean_reward: f64,
    pub final20_mean_reward: f64,
    pub final20_harmonic_speed: f64,
    pub final20_lane_changes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub algo: String,
    pub seed: u64,
    pub episode: Vec<usize>,
    pub mean_reward: Vec<f64>,
    pub harmonic_speed_mean: Vec<f64>,
    pub lane_changes_total: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<PlotSeries>,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub out_dir: PathBuf,
    pub rows: Vec<CompareRow>,
    /// Seeds on which MADDPG's final-window mean reward is at least DQN's.
    pub maddpg_wins: usize,
}

pub fn compare_row(seed: u64, algo: &str, logs: &[EpisodeLog]) -> CompareRow {
    let col = |f: fn(&EpisodeLog) -> f64| logs.iter().map(f).collect::<Vec<f64>>();
    let rewards = col(|l| l.mean_reward);
    let (first, last) = window_means(&rewards, SUMMARY_WINDOW);
    CompareRow {
        seed,
        algo: algo.to_string(),
        episodes: logs.len(),
        first20_mean_reward: first,
        final20_mean_reward: last,
        final20_harmonic_speed: window_means(&col(|l| l.harmonic_speed_mean), SUMMARY_WINDOW).1,
        final20_lane_changes: window_means(&col(|l| l.lane_changes_total as f64), SUMMARY_WINDOW).1,
    }
}

/// Trains both algorithms for every seed under the same budget. Each run
/// lands in `<out>/<algo>/seed-<seed>/`.
pub fn run_compare(cfg: &RunConfig, seeds: &[u64]) -> Result<CompareReport, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("at least one seed is required".into()));
    }
    cfg.resolve()?;
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(format!("compare-{}-n{}", cfg.scenario.name(), cfg.n_agents))
    });
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut maddpg_wins = 0;
    for &seed in seeds {
        let mut finals = [0.0; 2];
        for (k, algo) in [Algo::Maddpg, Algo::Dqn].into_iter().enumerate() {
            let run = RunConfig {
                algo,
                seed,
                out_dir: Some(out_dir.join(algo.name()).join(format!("seed-{seed}"))),
                ..cfg.clone()
            };
            let report = run_train(&run)?;
            let row = compare_row(seed, algo.name(), &report.logs);
            finals[k] = row.final20_mean_reward;
            rows.push(row);
            series.push(PlotSeries {
                algo: algo.name().to_string(),
                seed,
                episode: report.logs.iter().map(|l| l.episode).collect(),
                mean_reward: report.logs.iter().map(|l| l.mean_reward).collect(),
                harmonic_speed_mean: report.logs.iter().map(|l| l.harmonic_speed_mean).collect(),
                lane_changes_total: report.logs.iter().map(|l| l.lane_changes_total).collect(),
            });
        }
        maddpg_wins += (finals[0] >= finals[1]) as usize;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let table = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out_dir.join(COMPARE_CSV), &table)?;
    let plot = PlotData {
        x_label: "episode".into(),
        y_label: "mean_reward".into(),
        series,
    };
    let plot_json = serde_json::to_string_pretty(&plot).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out_dir.join(PLOT_DATA_JSON), plot_json.as_bytes())?;
    Ok(CompareReport {
        out_dir,
        rows,
        maddpg_wins,
    })
}
