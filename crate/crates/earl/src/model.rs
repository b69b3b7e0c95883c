//! Shared domain types and the memory / data-volume cost models.
//!
//! Everything downstream (selector, dispatcher, orchestrator) works in
//! terms of the types defined here. The two cost models are deliberately
//! simple closed forms: intermediate-batch volume is strictly linear in
//! context length and worker count, and activation memory is a quadratic
//! fit through two measured calibration points.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Workers are addressed by dense ids `0..worker_count`.
pub type WorkerId = u32;

/// Intermediate-batch volume per token per worker, in bytes.
///
/// Calibrated so a 1,024-worker cluster at context length 1,024 moves a
/// 15,625 MiB batch between stages, doubling with either axis.
pub const BATCH_BYTES_PER_TOKEN_PER_WORKER: u64 = 15_625;

/// Decimal gigabyte, the unit memory sizes are quoted in.
pub const GB: f64 = 1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid cluster spec: {0}")]
    InvalidCluster(String),
    #[error("invalid parallelism config {config}: {reason}")]
    InvalidParallelism {
        config: ParallelismConfig,
        reason: String,
    },
    #[error("activation fit is degenerate for anchor lengths {l1} and {l2}")]
    DegenerateFit { l1: u64, l2: u64 },
    #[error("invalid model spec: {0}")]
    InvalidModel(String),
    #[error("invalid batch meta: {0}")]
    InvalidBatch(String),
}

/// Static description of the worker pool.
///
/// One worker (`controller_id`) doubles as the central controller; the
/// rest are compute workers. Bandwidths are link rates in bits per
/// second, `per_message_latency_s` is the fixed per-message cost used by
/// the network simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSpec {
    pub worker_count: u32,
    pub memory_capacity_bytes: u64,
    pub link_bandwidth_bps: u64,
    pub controller_bandwidth_bps: u64,
    pub per_message_latency_s: f64,
    pub controller_id: WorkerId,
}

impl ClusterSpec {
    /// Seventeen workers (controller plus sixteen compute workers) with
    /// 80 GB of device memory each on 25 Gbps links.
    pub fn desk_default() -> Self {
        ClusterSpec {
            worker_count: 17,
            memory_capacity_bytes: 80_000_000_000,
            link_bandwidth_bps: 25_000_000_000,
            controller_bandwidth_bps: 25_000_000_000,
            per_message_latency_s: 1e-5,
            controller_id: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.worker_count == 0 {
            return Err(ModelError::InvalidCluster("worker_count must be > 0".into()));
        }
        if self.controller_id >= self.worker_count {
            return Err(ModelError::InvalidCluster(format!(
                "controller_id {} out of range for {} workers",
                self.controller_id, self.worker_count
            )));
        }
        if self.memory_capacity_bytes == 0 {
            return Err(ModelError::InvalidCluster(
                "memory_capacity_bytes must be > 0".into(),
            ));
        }
        if self.link_bandwidth_bps == 0 || self.controller_bandwidth_bps == 0 {
            return Err(ModelError::InvalidCluster("bandwidths must be > 0".into()));
        }
        if !self.per_message_latency_s.is_finite() || self.per_message_latency_s < 0.0 {
            return Err(ModelError::InvalidCluster(
                "per_message_latency_s must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Compute workers in id order: every worker except the controller,
    /// unless the cluster is a single worker doing double duty.
    pub fn compute_workers(&self) -> Vec<WorkerId> {
        if self.worker_count == 1 {
            return vec![self.controller_id];
        }
        (0..self.worker_count)
            .filter(|&w| w != self.controller_id)
            .collect()
    }
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self::desk_default()
    }
}

/// A tensor-parallel by data-parallel grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelismConfig {
    pub tensor_parallel: u32,
    pub data_parallel: u32,
}

impl ParallelismConfig {
    pub fn new(tensor_parallel: u32, data_parallel: u32) -> Self {
        ParallelismConfig {
            tensor_parallel,
            data_parallel,
        }
    }

    /// Total compute workers the configuration occupies.
    pub fn workers_used(&self) -> u32 {
        self.tensor_parallel * self.data_parallel
    }

    pub fn validate_for(&self, cluster: &ClusterSpec) -> Result<(), ModelError> {
        if self.tensor_parallel == 0 || self.data_parallel == 0 {
            return Err(ModelError::InvalidParallelism {
                config: *self,
                reason: "degrees must be > 0".into(),
            });
        }
        let available = cluster.compute_workers().len() as u32;
        if self.workers_used() > available {
            return Err(ModelError::InvalidParallelism {
                config: *self,
                reason: format!(
                    "needs {} workers but only {} compute workers exist",
                    self.workers_used(),
                    available
                ),
            });
        }
        Ok(())
    }
}

impl fmt::Display for ParallelismConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TP{}xDP{}", self.tensor_parallel, self.data_parallel)
    }
}

/// Memory-relevant constants of the trained model.
///
/// Activation demand is modelled as `a*L + b*L^2` bytes for context
/// length `L`; the coefficients come either from direct calibration or
/// from [`ModelSpec::fit_activation_coeffs`] through two measured points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub weight_bytes: u64,
    pub kv_bytes_per_token: u64,
    pub activation_linear_bytes_per_token: f64,
    pub activation_quadratic_bytes_per_token2: f64,
}

impl ModelSpec {
    /// Small-model calibration sized for the default 17-worker desk
    /// cluster: 144 GB of weights and a memory curve that fits long
    /// contexts at TP=8 but not at TP=4.
    pub fn desk_default() -> Self {
        ModelSpec {
            weight_bytes: 144_000_000_000,
            kv_bytes_per_token: 40_960,
            activation_linear_bytes_per_token: 500_000.0,
            activation_quadratic_bytes_per_token2: 120.0,
        }
    }

    /// 70B-class calibration: coefficients fitted through the measured
    /// activation footprints 97 GB at length 4,096 and 354 GB at length
    /// 8,196.
    pub fn calibrated_70b() -> Self {
        let (a, b) = Self::fit_activation_coeffs(4_096, 97.0 * GB, 8_196, 354.0 * GB)
            .expect("calibration anchors are distinct");
        ModelSpec {
            weight_bytes: 140_000_000_000,
            kv_bytes_per_token: 163_840,
            activation_linear_bytes_per_token: a,
            activation_quadratic_bytes_per_token2: b,
        }
    }

    /// Solves `a*L + b*L^2` exactly through two anchor points.
    pub fn fit_activation_coeffs(
        l1: u64,
        bytes1: f64,
        l2: u64,
        bytes2: f64,
    ) -> Result<(f64, f64), ModelError> {
        if l1 == 0 || l2 == 0 || l1 == l2 {
            return Err(ModelError::DegenerateFit { l1, l2 });
        }
        let (x1, x2) = (l1 as f64, l2 as f64);
        let b = (bytes2 * x1 - bytes1 * x2) / (x1 * x2 * (x2 - x1));
        let a = bytes1 / x1 - b * x1;
        Ok((a, b))
    }

    /// Activation bytes one model replica needs at context length `len`.
    pub fn activation_bytes(&self, len: u64) -> f64 {
        let l = len as f64;
        self.activation_linear_bytes_per_token * l + self.activation_quadratic_bytes_per_token2 * l * l
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.weight_bytes == 0 {
            return Err(ModelError::InvalidModel("weight_bytes must be > 0".into()));
        }
        for (name, v) in [
            ("activation_linear_bytes_per_token", self.activation_linear_bytes_per_token),
            (
                "activation_quadratic_bytes_per_token2",
                self.activation_quadratic_bytes_per_token2,
            ),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::InvalidModel(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::desk_default()
    }
}

/// Intermediate-batch volume in bytes for one stage handoff.
///
/// Strictly linear in both context length and worker count:
/// `kappa * context_len * workers` in exact integer arithmetic.
pub fn estimate_batch_bytes(context_len: u64, workers: u32, kappa: u64) -> u64 {
    kappa * context_len * workers as u64
}

/// Outcome of a memory feasibility check for one worker of a replica.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OomPrediction {
    pub oom: bool,
    /// Capacity minus demand in bytes; negative when over budget.
    pub headroom_bytes: f64,
    pub demand_bytes: f64,
}

/// Predicts whether one training step fits in per-worker memory.
///
/// Weights and activations shard across the tensor-parallel group; the
/// response KV footprint additionally shards across data-parallel
/// replicas (each replica serves `ceil(num_responses / dp)` responses).
pub fn predict_oom(
    config: &ParallelismConfig,
    model: &ModelSpec,
    context_len: u64,
    num_responses: u64,
    cluster: &ClusterSpec,
) -> Result<OomPrediction, ModelError> {
    config.validate_for(cluster)?;
    model.validate()?;
    let tp = config.tensor_parallel as f64;
    let dp = config.data_parallel as u64;
    let responses_per_replica = num_responses.div_ceil(dp);
    let kv_bytes = (responses_per_replica * context_len * model.kv_bytes_per_token) as f64;
    let demand = model.weight_bytes as f64 / tp + (model.activation_bytes(context_len) + kv_bytes) / tp;
    let capacity = cluster.memory_capacity_bytes as f64;
    Ok(OomPrediction {
        oom: demand > capacity,
        headroom_bytes: capacity - demand,
        demand_bytes: demand,
    })
}

/// Role a batch tensor plays in the update stage. Roles drive routing:
/// aggregation-free tensors can go worker-to-worker, aggregated ones
/// must visit the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Tokens,
    LogProbs,
    Rewards,
    Returns,
    Advantages,
    Auxiliary,
}

impl TensorRole {
    pub const ALL: [TensorRole; 6] = [
        TensorRole::Tokens,
        TensorRole::LogProbs,
        TensorRole::Rewards,
        TensorRole::Returns,
        TensorRole::Advantages,
        TensorRole::Auxiliary,
    ];
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TensorRole::Tokens => "tokens",
            TensorRole::LogProbs => "log_probs",
            TensorRole::Rewards => "rewards",
            TensorRole::Returns => "returns",
            TensorRole::Advantages => "advantages",
            TensorRole::Auxiliary => "auxiliary",
        };
        f.write_str(s)
    }
}

/// One named tensor in the batch; rows are padded to the batch's
/// `max_context_len`, so a row occupies `max_context_len * bytes_per_token`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub name: String,
    pub role: TensorRole,
    pub bytes_per_token: u64,
}

/// Shape metadata for one dispatched batch. Row `i` holds episode `i`'s
/// padded sequence for every tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchMeta {
    pub num_sequences: u64,
    pub max_context_len: u64,
    pub tensors: Vec<TensorSpec>,
}

impl BatchMeta {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_sequences == 0 {
            return Err(ModelError::InvalidBatch("num_sequences must be > 0".into()));
        }
        if self.max_context_len == 0 {
            return Err(ModelError::InvalidBatch("max_context_len must be > 0".into()));
        }
        let mut names = BTreeSet::new();
        for t in &self.tensors {
            if t.name.is_empty() {
                return Err(ModelError::InvalidBatch("tensor name must be nonempty".into()));
            }
            if t.bytes_per_token == 0 {
                return Err(ModelError::InvalidBatch(format!(
                    "tensor {} has bytes_per_token 0",
                    t.name
                )));
            }
            if !names.insert(t.name.as_str()) {
                return Err(ModelError::InvalidBatch(format!(
                    "duplicate tensor name {}",
                    t.name
                )));
            }
        }
        Ok(())
    }

    /// Bytes of one padded row of tensor `t`.
    pub fn row_bytes(&self, t: &TensorSpec) -> u64 {
        self.max_context_len * t.bytes_per_token
    }

    /// Total padded batch payload across all tensors.
    pub fn total_bytes(&self) -> u64 {
        self.tensors
            .iter()
            .map(|t| self.num_sequences * self.row_bytes(t))
            .sum()
    }
}

/// The tensor set a plain policy-gradient step moves between stages.
pub fn default_tensors() -> Vec<TensorSpec> {
    let t = |name: &str, role, bytes_per_token| TensorSpec {
        name: name.to_string(),
        role,
        bytes_per_token,
    };
    vec![
        t("tokens", TensorRole::Tokens, 4),
        t("log_probs", TensorRole::LogProbs, 4),
        t("rewards", TensorRole::Rewards, 4),
        t("returns", TensorRole::Returns, 4),
    ]
}
