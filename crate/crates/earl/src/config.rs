//! Run configuration and profile files.
//!
//! One TOML file drives every subcommand. Each section has complete
//! defaults, so an empty file is a valid configuration and a section
//! only needs the keys it overrides. Unknown keys are rejected
//! everywhere; a typo should fail loudly, not silently fall back to a
//! default.
//!
//! Profiles cross process boundaries as JSON (`profile` writes one,
//! `run` can load one), versioned with their own schema number.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{DispatchStrategy, RoleRouting};
use crate::model::{
    default_tensors, predict_oom, BatchMeta, ClusterSpec, ModelSpec, ParallelismConfig,
    TensorSpec, BATCH_BYTES_PER_TOKEN_PER_WORKER,
};
use crate::orchestrator::{RunMode, RunParams, WorkloadSpec};
use crate::selector::{
    build_policy, buckets_from_edges, profile, ProbeOutcome, ProfileEntry, SelectorError,
    ThroughputProfile,
};
use crate::transport::tcp::{PeerBook, TcpOptions, TransportError};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const PROFILE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

/// Which backend moves the batch bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Analytic network model, single process.
    Sim,
    /// Real sockets, one process per worker.
    Tcp,
}

/// Whether the run re-selects parallelism or holds one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Policy,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub steps: u64,
    pub backend: BackendKind,
    pub mode: ModeKind,
    /// Starting configuration in policy mode.
    pub initial: ParallelismConfig,
    /// The pinned configuration in fixed mode.
    pub fixed: Option<ParallelismConfig>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            steps: 30,
            backend: BackendKind::Sim,
            mode: ModeKind::Policy,
            initial: ParallelismConfig::new(4, 4),
            fixed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorSection {
    /// Ascending context-length bucket edges, starting at 0.
    pub bucket_edges: Vec<u64>,
    pub hysteresis_tokens: u64,
    pub switch_cost_s: f64,
    /// How many recent steps feed the observed average length.
    pub observation_window: usize,
    pub candidates: Vec<ParallelismConfig>,
}

impl Default for SelectorSection {
    fn default() -> Self {
        SelectorSection {
            bucket_edges: vec![0, 8_192, 16_384, 32_768, 65_536],
            hysteresis_tokens: 256,
            switch_cost_s: 0.5,
            observation_window: 1,
            candidates: vec![ParallelismConfig::new(4, 4), ParallelismConfig::new(8, 2)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DispatchSection {
    pub strategy: DispatchStrategy,
    /// Scatter aggregated tensors back out instead of leaving them on
    /// the controller.
    pub distribute_aggregates: bool,
    pub batch_bytes_per_token_per_worker: u64,
    pub tensors: Vec<TensorSpec>,
}

impl Default for DispatchSection {
    fn default() -> Self {
        DispatchSection {
            strategy: DispatchStrategy::AllToAll,
            distribute_aggregates: false,
            batch_bytes_per_token_per_worker: BATCH_BYTES_PER_TOKEN_PER_WORKER,
            tensors: default_tensors(),
        }
    }
}

/// Where bucket throughputs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    /// Pinned measurements from the `table` key.
    Table,
    /// Synthesized from the memory model and `base_tgs`/`tp_overhead`.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub mode: ProfileMode,
    /// Load this profile JSON instead of probing.
    pub path: Option<PathBuf>,
    pub table: Vec<ProfileEntry>,
    pub base_tgs: f64,
    pub tp_overhead: f64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            mode: ProfileMode::Table,
            path: None,
            table: default_profile_table(),
            base_tgs: 150.0,
            tp_overhead: 0.101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportSection {
    /// One `ip:port` per worker; the list index is the worker id.
    pub peers: Vec<String>,
    pub connect_timeout_s: f64,
    pub io_timeout_s: f64,
    pub barrier_timeout_s: f64,
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection {
            peers: (0..17).map(|i| format!("127.0.0.1:{}", 46_100 + i)).collect(),
            connect_timeout_s: 10.0,
            io_timeout_s: 30.0,
            barrier_timeout_s: 30.0,
        }
    }
}

impl TransportSection {
    pub fn options(&self) -> TcpOptions {
        TcpOptions {
            connect_timeout: Duration::from_secs_f64(self.connect_timeout_s),
            io_timeout: Duration::from_secs_f64(self.io_timeout_s),
            barrier_timeout: Duration::from_secs_f64(self.barrier_timeout_s),
        }
    }

    pub fn peer_book(&self) -> Result<PeerBook, TransportError> {
        PeerBook::from_strings(&self.peers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Per-worker payload sizes to sweep, in MiB.
    pub payload_mib: Vec<u64>,
    /// Compute workers in the rotation; the bench cluster adds a
    /// controller on top.
    pub payload_workers: u32,
    /// Repetitions per point; the median is reported.
    pub runs: u32,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            payload_mib: vec![46, 93, 187],
            payload_workers: 16,
            runs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub trace: PathBuf,
    pub profile_out: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            trace: PathBuf::from("trace.jsonl"),
            profile_out: PathBuf::from("profile.json"),
        }
    }
}

/// The whole configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub run: RunSection,
    pub cluster: ClusterSpec,
    pub model: ModelSpec,
    pub workload: WorkloadSpec,
    pub selector: SelectorSection,
    pub dispatch: DispatchSection,
    pub profile: ProfileSection,
    pub transport: TransportSection,
    pub bench: BenchSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            run: RunSection::default(),
            cluster: ClusterSpec::desk_default(),
            model: ModelSpec::desk_default(),
            workload: WorkloadSpec::default(),
            selector: SelectorSection::default(),
            dispatch: DispatchSection::default(),
            profile: ProfileSection::default(),
            transport: TransportSection::default(),
            bench: BenchSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.cluster.validate().map_err(|e| e.to_string())?;
        self.model.validate().map_err(|e| e.to_string())?;
        self.workload.validate().map_err(|e| e.to_string())?;

        let s = &self.selector;
        buckets_from_edges(&s.bucket_edges).map_err(|e| e.to_string())?;
        let last_edge = *s.bucket_edges.last().expect("validated nonempty");
        if last_edge <= self.workload.context_limit {
            return Err(format!(
                "the last bucket edge ({last_edge}) must exceed workload.context_limit ({}) so every observable length falls in a bucket",
                self.workload.context_limit
            ));
        }
        if s.observation_window == 0 {
            return Err("selector.observation_window must be at least 1".into());
        }
        if !(s.switch_cost_s >= 0.0) || !s.switch_cost_s.is_finite() {
            return Err("selector.switch_cost_s must be nonnegative".into());
        }
        if s.candidates.is_empty() {
            return Err("selector.candidates must not be empty".into());
        }
        for (i, c) in s.candidates.iter().enumerate() {
            c.validate_for(&self.cluster).map_err(|e| e.to_string())?;
            if s.candidates[..i].contains(c) {
                return Err(format!("selector.candidates lists {c} twice"));
            }
        }
        let require_candidate = |c: &ParallelismConfig, what: &str| {
            if s.candidates.contains(c) {
                Ok(())
            } else {
                Err(format!("{what} {c} is not among selector.candidates, so it has no profile entries"))
            }
        };
        match self.run.mode {
            ModeKind::Fixed => match &self.run.fixed {
                None => return Err("run.mode = \"fixed\" requires run.fixed".into()),
                Some(c) => {
                    c.validate_for(&self.cluster).map_err(|e| e.to_string())?;
                    require_candidate(c, "run.fixed")?;
                }
            },
            ModeKind::Policy => {
                self.run
                    .initial
                    .validate_for(&self.cluster)
                    .map_err(|e| e.to_string())?;
                require_candidate(&self.run.initial, "run.initial")?;
            }
        }

        let d = &self.dispatch;
        if d.batch_bytes_per_token_per_worker == 0 {
            return Err("dispatch.batch_bytes_per_token_per_worker must be positive".into());
        }
        let probe_batch = BatchMeta {
            num_sequences: 1,
            max_context_len: 1,
            tensors: d.tensors.clone(),
        };
        probe_batch.validate().map_err(|e| e.to_string())?;

        let p = &self.profile;
        if !(p.base_tgs > 0.0) || !p.base_tgs.is_finite() {
            return Err("profile.base_tgs must be positive".into());
        }
        if !(p.tp_overhead >= 0.0) || !p.tp_overhead.is_finite() {
            return Err("profile.tp_overhead must be nonnegative".into());
        }
        if p.mode == ProfileMode::Table && p.path.is_none() {
            ThroughputProfile::new(p.table.clone())
                .map_err(|e| format!("profile.table: {e}"))?;
        }

        if self.run.backend == BackendKind::Tcp {
            let t = &self.transport;
            if t.peers.len() != self.cluster.worker_count as usize {
                return Err(format!(
                    "transport.peers lists {} addresses but the cluster has {} workers",
                    t.peers.len(),
                    self.cluster.worker_count
                ));
            }
            t.peer_book().map_err(|e| e.to_string())?;
            for (name, v) in [
                ("connect_timeout_s", t.connect_timeout_s),
                ("io_timeout_s", t.io_timeout_s),
                ("barrier_timeout_s", t.barrier_timeout_s),
            ] {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(format!("transport.{name} must be positive"));
                }
            }
        }

        let b = &self.bench;
        if b.payload_mib.is_empty() || b.payload_mib.contains(&0) {
            return Err("bench.payload_mib must list positive sizes".into());
        }
        if b.payload_workers < 2 {
            return Err("bench.payload_workers must be at least 2".into());
        }
        if b.runs == 0 {
            return Err("bench.runs must be at least 1".into());
        }
        Ok(())
    }

    /// Assembles run parameters once a profile has been resolved.
    pub fn run_params(&self, profile: ThroughputProfile) -> Result<RunParams, SelectorError> {
        let mode = match self.run.mode {
            ModeKind::Fixed => RunMode::Fixed(self.run.fixed.expect("validated")),
            ModeKind::Policy => RunMode::Policy {
                policy: build_policy(
                    &profile,
                    self.selector.hysteresis_tokens,
                    self.selector.switch_cost_s,
                )?,
                initial: self.run.initial,
            },
        };
        let routing = RoleRouting {
            distribute_aggregates: self.dispatch.distribute_aggregates,
            ..RoleRouting::default()
        };
        Ok(RunParams {
            workload: self.workload.clone(),
            cluster: self.cluster.clone(),
            model: self.model.clone(),
            mode,
            strategy: self.dispatch.strategy,
            routing,
            tensors: self.dispatch.tensors.clone(),
            profile,
            steps: self.run.steps,
            batch_bytes_per_token_per_worker: self.dispatch.batch_bytes_per_token_per_worker,
            observation_window: self.selector.observation_window,
        })
    }
}

/// Loads and validates a TOML configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    config.validate().map_err(|message| ConfigError::Invalid {
        path: path.to_path_buf(),
        message,
    })?;
    Ok(config)
}

/// The shipped two-candidate profile: the throughput argmax flips from
/// TP4xDP4 to TP8xDP2 at 16K context, and TP4xDP4 runs out of memory
/// past 32K.
pub fn default_profile_table() -> Vec<ProfileEntry> {
    let entry = |tp, dp, lower, upper, tgs: Option<f64>| ProfileEntry {
        tensor_parallel: tp,
        data_parallel: dp,
        lower,
        upper,
        oom: tgs.is_none(),
        tgs,
    };
    vec![
        entry(4, 4, 0, 8_192, Some(131.0)),
        entry(8, 2, 0, 8_192, Some(100.0)),
        entry(4, 4, 8_192, 16_384, Some(131.0)),
        entry(8, 2, 8_192, 16_384, Some(100.0)),
        entry(4, 4, 16_384, 32_768, Some(200.0)),
        entry(8, 2, 16_384, 32_768, Some(210.0)),
        entry(4, 4, 32_768, 65_536, None),
        entry(8, 2, 32_768, 65_536, Some(210.0)),
    ]
}

/// Probe that answers from a pinned table, resolving each requested
/// bucket by its midpoint.
pub fn table_probe(
    table: &ThroughputProfile,
) -> impl FnMut(&ParallelismConfig, u64) -> Result<ProbeOutcome, String> + '_ {
    move |config, len| {
        let bucket = table
            .buckets()
            .into_iter()
            .find(|b| b.contains(len as f64))
            .ok_or_else(|| format!("no table bucket covers context length {len}"))?;
        let entry = table.lookup(config, &bucket).ok_or_else(|| {
            format!(
                "no table entry for {config} in bucket [{}, {})",
                bucket.lower, bucket.upper
            )
        })?;
        Ok(match entry.tgs {
            Some(tgs) => ProbeOutcome::Throughput(tgs),
            None => ProbeOutcome::OutOfMemory,
        })
    }
}

/// Probe synthesized from the memory model: a configuration that does
/// not fit reports OOM; one that fits pays a tensor-parallel
/// communication overhead and slows down as memory pressure grows, so
/// wider sharding wins once contexts are long enough.
pub fn model_probe<'a>(
    cluster: &'a ClusterSpec,
    model: &'a ModelSpec,
    num_responses: u64,
    base_tgs: f64,
    tp_overhead: f64,
) -> impl FnMut(&ParallelismConfig, u64) -> Result<ProbeOutcome, String> + 'a {
    move |config, len| {
        let pred = predict_oom(config, model, len, num_responses, cluster)
            .map_err(|e| e.to_string())?;
        if pred.oom {
            return Ok(ProbeOutcome::OutOfMemory);
        }
        let util = (pred.demand_bytes / cluster.memory_capacity_bytes as f64).clamp(0.0, 1.0);
        let comm = 1.0 + tp_overhead * (config.tensor_parallel as f64 - 1.0);
        Ok(ProbeOutcome::Throughput(
            base_tgs / comm * (1.0 - 0.5 * util * util),
        ))
    }
}

/// Builds the throughput profile the way the configuration asks:
/// loading `profile.path` is the caller's business (it carries file
/// errors); this probes table or model mode in memory.
pub fn build_profile(config: &RunConfig) -> Result<ThroughputProfile, String> {
    let buckets = buckets_from_edges(&config.selector.bucket_edges).map_err(|e| e.to_string())?;
    let candidates = &config.selector.candidates;
    match config.profile.mode {
        ProfileMode::Table => {
            let table = ThroughputProfile::new(config.profile.table.clone())
                .map_err(|e| format!("profile.table: {e}"))?;
            profile(candidates, &buckets, table_probe(&table))
        }
        ProfileMode::Model => profile(
            candidates,
            &buckets,
            model_probe(
                &config.cluster,
                &config.model,
                config.workload.episodes_per_step,
                config.profile.base_tgs,
                config.profile.tp_overhead,
            ),
        ),
    }
    .map_err(|e| e.to_string())
}

/// On-disk profile representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub schema_version: u32,
    pub entries: Vec<ProfileEntry>,
}

pub fn save_profile(path: &Path, profile: &ThroughputProfile) -> Result<(), ConfigError> {
    let file = ProfileFile {
        schema_version: PROFILE_SCHEMA_VERSION,
        entries: profile.entries.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("profile serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_profile(path: &Path) -> Result<ThroughputProfile, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: ProfileFile = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if file.schema_version != PROFILE_SCHEMA_VERSION {
        return Err(ConfigError::Invalid {
            path: path.to_path_buf(),
            message: format!(
                "profile schema_version {} is not supported (expected {PROFILE_SCHEMA_VERSION})",
                file.schema_version
            ),
        });
    }
    ThroughputProfile::new(file.entries).map_err(|e| ConfigError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
