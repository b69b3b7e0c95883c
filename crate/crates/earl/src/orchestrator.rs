//! The step loop tying the stages together.
//!
//! Each training step generates a synthetic rollout, consults the
//! selection policy (in policy mode), checks the memory model, plans the
//! batch dispatch, executes it on a backend, and emits one trace row.
//! Everything downstream of the workload seed is deterministic, so
//! independent processes running the same parameters make identical
//! decisions step for step; that is what lets TCP workers replicate the
//! run without a control channel.

use std::collections::VecDeque;
use std::io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{
    plan_batch, row_payload, DispatchError, DispatchPlan, DispatchStrategy, RoleRouting, RowStore,
    ShardLayout,
};
use crate::model::{
    estimate_batch_bytes, predict_oom, BatchMeta, ClusterSpec, ModelError, ModelSpec,
    ParallelismConfig, TensorSpec,
};
use crate::selector::{observe, SelectionPolicy, SelectorError, ThroughputProfile};
use crate::transport::sim::{simulate_latency, NetModel};
use crate::transport::tcp::{TcpSession, TransportError};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("invalid workload: {0}")]
    InvalidWorkload(String),
    #[error("no profile bucket covers average context length {avg}")]
    UnprofiledLength { avg: f64 },
    #[error("profile has no entry for {config} in bucket [{lower}, {upper})")]
    MissingProfileEntry {
        config: ParallelismConfig,
        lower: u64,
        upper: u64,
    },
    #[error("profile marks {config} unusable in bucket [{lower}, {upper}) but the memory model let the step proceed")]
    ProfileContradiction {
        config: ParallelismConfig,
        lower: u64,
        upper: u64,
    },
    #[error("trace sink: {0}")]
    Sink(#[from] io::Error),
}

/// Synthetic multi-turn rollout workload. Contexts grow linearly with
/// the training step and get a lognormal length jitter with unit mean,
/// so the long-run average tracks the deterministic schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub episodes_per_step: u64,
    pub turns_per_episode: f64,
    pub turn_len_initial: u64,
    pub turn_len_growth: f64,
    pub prompt_len: u64,
    pub context_limit: u64,
    pub length_noise: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            episodes_per_step: 32,
            turns_per_episode: 3.0,
            turn_len_initial: 1_000,
            turn_len_growth: 130.0,
            prompt_len: 192,
            context_limit: 8_192,
            length_noise: 0.2,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let fail = |m: &str| Err(OrchestratorError::InvalidWorkload(m.into()));
        if self.episodes_per_step == 0 {
            return fail("episodes_per_step must be at least 1");
        }
        if !(self.turns_per_episode > 0.0) || !self.turns_per_episode.is_finite() {
            return fail("turns_per_episode must be positive");
        }
        if self.turn_len_initial == 0 {
            return fail("turn_len_initial must be at least 1");
        }
        if !(self.turn_len_growth >= 0.0) || !self.turn_len_growth.is_finite() {
            return fail("turn_len_growth must be nonnegative");
        }
        if !(self.length_noise >= 0.0) || !self.length_noise.is_finite() {
            return fail("length_noise must be nonnegative");
        }
        if self.context_limit <= self.prompt_len {
            return fail("context_limit must exceed prompt_len");
        }
        Ok(())
    }
}

/// One generated episode: final context length and whether it hit the
/// context limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Episode {
    pub len: u64,
    pub truncated: bool,
}

/// All episodes generated for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub step_id: u64,
    pub episodes: Vec<Episode>,
}

impl Rollout {
    pub fn lengths(&self) -> Vec<u64> {
        self.episodes.iter().map(|e| e.len).collect()
    }

    pub fn avg_len(&self) -> f64 {
        let sum: u128 = self.episodes.iter().map(|e| e.len as u128).sum();
        sum as f64 / self.episodes.len() as f64
    }

    pub fn max_len(&self) -> u64 {
        self.episodes.iter().map(|e| e.len).max().unwrap_or(0)
    }

    pub fn total_tokens(&self) -> u64 {
        self.episodes.iter().map(|e| e.len).sum()
    }

    pub fn truncation_fraction(&self) -> f64 {
        let hit = self.episodes.iter().filter(|e| e.truncated).count();
        hit as f64 / self.episodes.len() as f64
    }
}

/// Generates the rollout for one step. The generator is keyed on
/// (seed, step) through the RNG stream, so any step can be regenerated
/// in isolation and every process derives the same episodes.
pub fn generate_rollout(step: u64, w: &WorkloadSpec) -> Rollout {
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed);
    rng.set_stream(step + 1);
    // Unit-mean lognormal: E[X] = 1 for sigma^2 = ln(1 + cv^2),
    // mu = -sigma^2 / 2.
    let jitter = if w.length_noise > 0.0 {
        let sigma2 = (1.0 + w.length_noise * w.length_noise).ln();
        Some(LogNormal::new(-sigma2 / 2.0, sigma2.sqrt()).expect("finite parameters"))
    } else {
        None
    };
    let draw = |rng: &mut ChaCha8Rng| match &jitter {
        Some(d) => d.sample(rng),
        None => 1.0,
    };
    let base_turn_len = w.turn_len_initial as f64 + w.turn_len_growth * step as f64;
    let mut episodes = Vec::with_capacity(w.episodes_per_step as usize);
    for _ in 0..w.episodes_per_step {
        let turns = (w.turns_per_episode * draw(&mut rng)).round().max(1.0) as u64;
        let mut len = w.prompt_len;
        let mut truncated = false;
        for _ in 0..turns {
            let turn_len = (base_turn_len * draw(&mut rng)).round().max(1.0) as u64;
            len += turn_len;
            if len >= w.context_limit {
                len = w.context_limit;
                truncated = true;
                break;
            }
        }
        episodes.push(Episode { len, truncated });
    }
    Rollout {
        step_id: step,
        episodes,
    }
}

/// One trace row per training step, written as JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRow {
    pub step_id: u64,
    pub tensor_parallel: u32,
    pub data_parallel: u32,
    pub switched: bool,
    pub avg_context_len: f64,
    pub max_context_len: u64,
    pub truncation_fraction: f64,
    pub oom_event: bool,
    pub strategy: DispatchStrategy,
    pub batch_bytes: u64,
    pub dispatch_total_bytes: u64,
    pub dispatch_latency_s: f64,
    pub switch_time_s: f64,
    pub rollout_time_s: f64,
    pub prep_time_s: f64,
    pub update_time_s: f64,
    pub step_time_s: f64,
    pub tgs: f64,
}

/// How the parallelism configuration evolves over the run.
#[derive(Debug, Clone, PartialEq)]
pub enum RunMode {
    /// One configuration for the whole run, abort on predicted OOM.
    Fixed(ParallelismConfig),
    /// Re-select per step from observed context lengths.
    Policy {
        policy: SelectionPolicy,
        initial: ParallelismConfig,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Completed,
    OomAborted { step: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub rows: Vec<TraceRow>,
    pub outcome: RunOutcome,
}

/// Executes the data-dispatch stage of one step for one tensor.
pub trait DispatchBackend {
    fn dispatch(
        &mut self,
        step_id: u64,
        tensor: &TensorSpec,
        batch: &BatchMeta,
        src: &ShardLayout,
        plan: &DispatchPlan,
    ) -> Result<f64, OrchestratorError>;
}

/// Analytic alpha-beta cost model; no bytes move.
pub struct SimulatedDispatch {
    pub net: NetModel,
}

impl SimulatedDispatch {
    pub fn new(cluster: &ClusterSpec) -> Self {
        SimulatedDispatch {
            net: NetModel::from_cluster(cluster),
        }
    }
}

impl DispatchBackend for SimulatedDispatch {
    fn dispatch(
        &mut self,
        _step_id: u64,
        _tensor: &TensorSpec,
        _batch: &BatchMeta,
        _src: &ShardLayout,
        plan: &DispatchPlan,
    ) -> Result<f64, OrchestratorError> {
        Ok(simulate_latency(plan, &self.net))
    }
}

/// Moves real bytes through an established TCP mesh. Each worker fills
/// its resident source rows with deterministic content, so the transfer
/// is verifiable without a shared filesystem.
pub struct TcpDispatch<'a> {
    pub session: &'a mut TcpSession,
}

impl DispatchBackend for TcpDispatch<'_> {
    fn dispatch(
        &mut self,
        step_id: u64,
        tensor: &TensorSpec,
        batch: &BatchMeta,
        src: &ShardLayout,
        plan: &DispatchPlan,
    ) -> Result<f64, OrchestratorError> {
        let row_bytes = batch.row_bytes(tensor);
        let me = self.session.my_id();
        let mut store = RowStore::new();
        for (w, range) in src.assignments() {
            if *w == me {
                for row in range.start..range.end {
                    store.insert(row, row_payload(row, row_bytes));
                }
            }
        }
        let durations = self
            .session
            .execute_plan(step_id, &tensor.name, plan, &mut store)?;
        Ok(durations.iter().map(|d| d.as_secs_f64()).sum())
    }
}

/// Everything a run needs. The same value drives simulated and TCP
/// backends; only the backend differs between processes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunParams {
    pub workload: WorkloadSpec,
    pub cluster: ClusterSpec,
    pub model: ModelSpec,
    pub mode: RunMode,
    pub strategy: DispatchStrategy,
    pub routing: RoleRouting,
    pub tensors: Vec<TensorSpec>,
    pub profile: ThroughputProfile,
    pub steps: u64,
    pub batch_bytes_per_token_per_worker: u64,
    pub observation_window: usize,
}

/// The first data-parallel rank of each replica: sources of freshly
/// generated rollout data.
fn replica_leaders(pool: &[u32], config: &ParallelismConfig) -> Vec<u32> {
    (0..config.data_parallel as usize)
        .map(|r| pool[r * config.tensor_parallel as usize])
        .collect()
}

fn profile_tgs(
    profile: &ThroughputProfile,
    config: &ParallelismConfig,
    avg: f64,
) -> Result<f64, OrchestratorError> {
    let bucket = profile
        .buckets()
        .into_iter()
        .find(|b| b.contains(avg))
        .ok_or(OrchestratorError::UnprofiledLength { avg })?;
    let entry = profile.lookup(config, &bucket).ok_or({
        OrchestratorError::MissingProfileEntry {
            config: *config,
            lower: bucket.lower,
            upper: bucket.upper,
        }
    })?;
    match entry.tgs {
        Some(tgs) if !entry.oom => Ok(tgs),
        _ => Err(OrchestratorError::ProfileContradiction {
            config: *config,
            lower: bucket.lower,
            upper: bucket.upper,
        }),
    }
}

/// Runs the step loop, emitting each row to `sink` as it completes.
///
/// A predicted OOM ends the run early with [`RunOutcome::OomAborted`]
/// after emitting a final row flagged `oom_event`; the policy mode is
/// expected to steer away before that happens.
pub fn run<B: DispatchBackend>(
    params: &RunParams,
    backend: &mut B,
    mut sink: impl FnMut(&TraceRow) -> io::Result<()>,
) -> Result<RunResult, OrchestratorError> {
    params.workload.validate()?;
    params.cluster.validate()?;
    params.model.validate()?;
    params.profile.validate()?;
    let pool = params.cluster.compute_workers();
    let mut current = match &params.mode {
        RunMode::Fixed(config) => *config,
        RunMode::Policy { initial, .. } => *initial,
    };
    let mut window: VecDeque<Vec<u64>> = VecDeque::new();
    let mut rows: Vec<TraceRow> = Vec::with_capacity(params.steps as usize);

    for step in 0..params.steps {
        let mut switched = false;
        let mut switch_time_s = 0.0;
        if let RunMode::Policy { policy, .. } = &params.mode {
            if !window.is_empty() {
                let observed: Vec<u64> = window.iter().flatten().copied().collect();
                let avg = observe(&observed)?;
                let selection = policy.select(avg, &current)?;
                if selection.switched {
                    current = selection.config;
                    switched = true;
                    switch_time_s = policy.switch_cost_s;
                }
            }
        }

        let rollout = generate_rollout(step, &params.workload);
        window.push_back(rollout.lengths());
        while window.len() > params.observation_window.max(1) {
            window.pop_front();
        }

        let episodes = params.workload.episodes_per_step;
        let prediction = predict_oom(
            &current,
            &params.model,
            rollout.max_len(),
            episodes,
            &params.cluster,
        )?;
        if prediction.oom {
            let row = TraceRow {
                step_id: step,
                tensor_parallel: current.tensor_parallel,
                data_parallel: current.data_parallel,
                switched,
                avg_context_len: rollout.avg_len(),
                max_context_len: rollout.max_len(),
                truncation_fraction: rollout.truncation_fraction(),
                oom_event: true,
                strategy: params.strategy,
                batch_bytes: 0,
                dispatch_total_bytes: 0,
                dispatch_latency_s: 0.0,
                switch_time_s,
                rollout_time_s: 0.0,
                prep_time_s: 0.0,
                update_time_s: 0.0,
                step_time_s: switch_time_s,
                tgs: 0.0,
            };
            sink(&row)?;
            rows.push(row);
            return Ok(RunResult {
                rows,
                outcome: RunOutcome::OomAborted { step },
            });
        }

        let workers_used = current.workers_used();
        let batch_bytes = estimate_batch_bytes(
            rollout.max_len(),
            workers_used,
            params.batch_bytes_per_token_per_worker,
        );
        let batch = BatchMeta {
            num_sequences: episodes,
            max_context_len: rollout.max_len(),
            tensors: params.tensors.clone(),
        };
        let src = ShardLayout::block(episodes, &replica_leaders(&pool, &current))?;
        let dst = ShardLayout::block(episodes, &pool[..workers_used as usize])?;
        let plans = plan_batch(
            &batch,
            &src,
            &dst,
            params.cluster.controller_id,
            &params.routing,
            params.strategy,
        )?;
        let mut dispatch_total_bytes = 0u64;
        let mut dispatch_latency_s = 0.0f64;
        for tensor_plan in &plans {
            dispatch_total_bytes += tensor_plan.plan.total_bytes();
            dispatch_latency_s +=
                backend.dispatch(step, &tensor_plan.spec, &batch, &src, &tensor_plan.plan)?;
        }

        let tgs = profile_tgs(&params.profile, &current, rollout.avg_len())?;
        let cluster_rate = tgs * workers_used as f64;
        let rollout_time_s = rollout.total_tokens() as f64 / cluster_rate;
        let update_time_s = rollout.total_tokens() as f64 / cluster_rate;
        let prep_time_s = 0.0;
        let step_time_s =
            switch_time_s + rollout_time_s + prep_time_s + dispatch_latency_s + update_time_s;
        let row = TraceRow {
            step_id: step,
            tensor_parallel: current.tensor_parallel,
            data_parallel: current.data_parallel,
            switched,
            avg_context_len: rollout.avg_len(),
            max_context_len: rollout.max_len(),
            truncation_fraction: rollout.truncation_fraction(),
            oom_event: false,
            strategy: params.strategy,
            batch_bytes,
            dispatch_total_bytes,
            dispatch_latency_s,
            switch_time_s,
            rollout_time_s,
            prep_time_s,
            update_time_s,
            step_time_s,
            tgs,
        };
        sink(&row)?;
        rows.push(row);
    }
    Ok(RunResult {
        rows,
        outcome: RunOutcome::Completed,
    })
}
