//! Profile-driven parallelism selection.
//!
//! A profiling pass probes every candidate parallelism configuration at a
//! representative length per context bucket and records throughput (or an
//! out-of-memory verdict). [`build_policy`] turns the profile into a
//! bucket-to-configuration table by throughput argmax, and
//! [`SelectionPolicy::select`] applies it at runtime with hysteresis so a
//! batch-length average oscillating around a bucket edge does not thrash
//! the parallelism layout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParallelismConfig;

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("invalid bucket list: {0}")]
    InvalidBuckets(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("probe failed for {config} in bucket [{lower}, {upper}): {message}")]
    ProbeFailed {
        config: ParallelismConfig,
        lower: u64,
        upper: u64,
        message: String,
    },
    #[error("no memory-feasible configuration for bucket [{lower}, {upper})")]
    UnsatisfiableBucket { lower: u64, upper: u64 },
    #[error("throughput must be positive, got {a} and {b}")]
    NonPositiveThroughput { a: f64, b: f64 },
    #[error("average length {avg} falls outside the profiled range [0, {upper})")]
    OutOfRange { avg: f64, upper: u64 },
    #[error("cannot observe an empty rollout")]
    EmptyObservation,
}

/// Half-open context-length interval `[lower, upper)`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(deny_unknown_fields)]
pub struct ContextBucket {
    pub lower: u64,
    pub upper: u64,
}

impl ContextBucket {
    pub fn new(lower: u64, upper: u64) -> Self {
        ContextBucket { lower, upper }
    }

    pub fn contains(&self, len: f64) -> bool {
        len >= self.lower as f64 && len < self.upper as f64
    }

    /// Representative probe length: the interval midpoint.
    pub fn midpoint(&self) -> u64 {
        self.lower + (self.upper - self.lower) / 2
    }
}

/// Builds the bucket partition from ascending edge values; `edges[0]`
/// must be 0 so the list covers `[0, last)` without gaps.
pub fn buckets_from_edges(edges: &[u64]) -> Result<Vec<ContextBucket>, SelectorError> {
    if edges.len() < 2 {
        return Err(SelectorError::InvalidBuckets(
            "need at least two edges".into(),
        ));
    }
    if edges[0] != 0 {
        return Err(SelectorError::InvalidBuckets(format!(
            "first edge must be 0, got {}",
            edges[0]
        )));
    }
    let mut buckets = Vec::with_capacity(edges.len() - 1);
    for pair in edges.windows(2) {
        if pair[1] <= pair[0] {
            return Err(SelectorError::InvalidBuckets(format!(
                "edges must be strictly ascending, got {} then {}",
                pair[0], pair[1]
            )));
        }
        buckets.push(ContextBucket::new(pair[0], pair[1]));
    }
    Ok(buckets)
}

/// Checks that `buckets` is a sorted, gap-free, overlap-free partition
/// of `[0, last_upper)`.
pub fn validate_partition(buckets: &[ContextBucket]) -> Result<(), SelectorError> {
    if buckets.is_empty() {
        return Err(SelectorError::InvalidBuckets("bucket list is empty".into()));
    }
    if buckets[0].lower != 0 {
        return Err(SelectorError::InvalidBuckets(format!(
            "first bucket must start at 0, got {}",
            buckets[0].lower
        )));
    }
    let mut prev_upper = 0;
    for b in buckets {
        if b.lower != prev_upper {
            return Err(SelectorError::InvalidBuckets(format!(
                "gap or overlap at {}: bucket starts at {}",
                prev_upper, b.lower
            )));
        }
        if b.upper <= b.lower {
            return Err(SelectorError::InvalidBuckets(format!(
                "empty bucket [{}, {})",
                b.lower, b.upper
            )));
        }
        prev_upper = b.upper;
    }
    Ok(())
}

/// What a single profiling probe observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeOutcome {
    /// Sustained throughput in tokens per GPU-second.
    Throughput(f64),
    OutOfMemory,
}

/// One profiled (configuration, bucket) cell.
///
/// Invariant: `oom == false` implies `tgs` is present and positive;
/// `oom == true` implies `tgs` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub tensor_parallel: u32,
    pub data_parallel: u32,
    pub lower: u64,
    pub upper: u64,
    pub oom: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgs: Option<f64>,
}

impl ProfileEntry {
    pub fn config(&self) -> ParallelismConfig {
        ParallelismConfig::new(self.tensor_parallel, self.data_parallel)
    }

    pub fn bucket(&self) -> ContextBucket {
        ContextBucket::new(self.lower, self.upper)
    }

    pub fn ok(config: ParallelismConfig, bucket: ContextBucket, tgs: f64) -> Self {
        ProfileEntry {
            tensor_parallel: config.tensor_parallel,
            data_parallel: config.data_parallel,
            lower: bucket.lower,
            upper: bucket.upper,
            oom: false,
            tgs: Some(tgs),
        }
    }

    pub fn oom(config: ParallelismConfig, bucket: ContextBucket) -> Self {
        ProfileEntry {
            tensor_parallel: config.tensor_parallel,
            data_parallel: config.data_parallel,
            lower: bucket.lower,
            upper: bucket.upper,
            oom: true,
            tgs: None,
        }
    }
}

/// The complete profiling result: one entry per (configuration, bucket)
/// pair, buckets forming a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThroughputProfile {
    pub entries: Vec<ProfileEntry>,
}

impl ThroughputProfile {
    pub fn new(entries: Vec<ProfileEntry>) -> Result<Self, SelectorError> {
        let profile = ThroughputProfile { entries };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), SelectorError> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            let key = (e.tensor_parallel, e.data_parallel, e.lower, e.upper);
            if !seen.insert(key) {
                return Err(SelectorError::InvalidProfile(format!(
                    "duplicate entry for {} in [{}, {})",
                    e.config(),
                    e.lower,
                    e.upper
                )));
            }
            match (e.oom, e.tgs) {
                (false, Some(t)) if t > 0.0 && t.is_finite() => {}
                (true, None) => {}
                _ => {
                    return Err(SelectorError::InvalidProfile(format!(
                        "entry for {} in [{}, {}) must carry either oom or a positive tgs",
                        e.config(),
                        e.lower,
                        e.upper
                    )));
                }
            }
        }
        validate_partition(&self.buckets())?;
        Ok(())
    }

    /// Distinct buckets in ascending order.
    pub fn buckets(&self) -> Vec<ContextBucket> {
        let set: std::collections::BTreeSet<ContextBucket> =
            self.entries.iter().map(|e| e.bucket()).collect();
        set.into_iter().collect()
    }

    /// Distinct configurations in (tp, dp) order.
    pub fn configs(&self) -> Vec<ParallelismConfig> {
        let set: std::collections::BTreeSet<ParallelismConfig> =
            self.entries.iter().map(|e| e.config()).collect();
        set.into_iter().collect()
    }

    pub fn lookup(&self, config: &ParallelismConfig, bucket: &ContextBucket) -> Option<&ProfileEntry> {
        self.entries
            .iter()
            .find(|e| e.config() == *config && e.bucket() == *bucket)
    }
}

/// Probes every (configuration, bucket) cell through `probe`, which
/// receives the configuration and the bucket's representative length.
pub fn profile<P>(
    configs: &[ParallelismConfig],
    buckets: &[ContextBucket],
    mut probe: P,
) -> Result<ThroughputProfile, SelectorError>
where
    P: FnMut(&ParallelismConfig, u64) -> Result<ProbeOutcome, String>,
{
    validate_partition(buckets)?;
    if configs.is_empty() {
        return Err(SelectorError::InvalidProfile(
            "no candidate configurations".into(),
        ));
    }
    let mut entries = Vec::with_capacity(configs.len() * buckets.len());
    for bucket in buckets {
        for config in configs {
            let outcome =
                probe(config, bucket.midpoint()).map_err(|message| SelectorError::ProbeFailed {
                    config: *config,
                    lower: bucket.lower,
                    upper: bucket.upper,
                    message,
                })?;
            entries.push(match outcome {
                ProbeOutcome::Throughput(tgs) => ProfileEntry::ok(*config, *bucket, tgs),
                ProbeOutcome::OutOfMemory => ProfileEntry::oom(*config, *bucket),
            });
        }
    }
    ThroughputProfile::new(entries)
}

/// Relative throughput change moving from `tgs_a` to `tgs_b`, in percent:
/// `(tgs_b - tgs_a) / tgs_a * 100`.
pub fn speedup_pct(tgs_a: f64, tgs_b: f64) -> Result<f64, SelectorError> {
    if !(tgs_a > 0.0) || !(tgs_b > 0.0) || !tgs_a.is_finite() || !tgs_b.is_finite() {
        return Err(SelectorError::NonPositiveThroughput { a: tgs_a, b: tgs_b });
    }
    Ok((tgs_b - tgs_a) / tgs_a * 100.0)
}

/// Result of one selection decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub config: ParallelismConfig,
    pub switched: bool,
}

/// The runtime policy: per bucket, the configuration to run, plus the
/// hysteresis band and the simulated cost of a layout switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPolicy {
    pub table: Vec<(ContextBucket, ParallelismConfig)>,
    pub hysteresis_tokens: u64,
    pub switch_cost_s: f64,
}

impl SelectionPolicy {
    /// Ascending bucket list of the policy table.
    pub fn buckets(&self) -> Vec<ContextBucket> {
        self.table.iter().map(|(b, _)| *b).collect()
    }

    /// Target configuration for an in-range average length, hysteresis
    /// aside.
    pub fn lookup(&self, avg_len: f64) -> Option<&(ContextBucket, ParallelismConfig)> {
        self.table.iter().find(|(b, _)| b.contains(avg_len))
    }

    /// Picks the configuration for the next step.
    ///
    /// Returns the bucket's table entry unless it already matches
    /// `current`, or unless `current` is the table entry of an adjacent
    /// bucket and `avg_len` sits strictly within `hysteresis_tokens` of
    /// the shared edge, in which case the current configuration is held.
    pub fn select(
        &self,
        avg_len: f64,
        current: &ParallelismConfig,
    ) -> Result<Selection, SelectorError> {
        let upper = self.table.last().map(|(b, _)| b.upper).unwrap_or(0);
        if !avg_len.is_finite() || avg_len < 0.0 || avg_len >= upper as f64 {
            return Err(SelectorError::OutOfRange { avg: avg_len, upper });
        }
        let idx = self
            .table
            .iter()
            .position(|(b, _)| b.contains(avg_len))
            .expect("partition covers the validated range");
        let (bucket, target) = self.table[idx];
        if target == *current {
            return Ok(Selection {
                config: *current,
                switched: false,
            });
        }
        let h = self.hysteresis_tokens as f64;
        if h > 0.0 {
            let near_lower = avg_len - bucket.lower as f64;
            let near_upper = bucket.upper as f64 - avg_len;
            let held_below =
                idx > 0 && self.table[idx - 1].1 == *current && near_lower < h;
            let held_above =
                idx + 1 < self.table.len() && self.table[idx + 1].1 == *current && near_upper < h;
            if held_below || held_above {
                return Ok(Selection {
                    config: *current,
                    switched: false,
                });
            }
        }
        Ok(Selection {
            config: target,
            switched: true,
        })
    }
}

/// Reduces a profile to a policy: per bucket the highest-throughput
/// memory-feasible configuration, ties broken toward the smaller
/// tensor-parallel degree, then the smaller data-parallel degree.
pub fn build_policy(
    profile: &ThroughputProfile,
    hysteresis_tokens: u64,
    switch_cost_s: f64,
) -> Result<SelectionPolicy, SelectorError> {
    profile.validate()?;
    let mut table = Vec::new();
    for bucket in profile.buckets() {
        let mut best: Option<&ProfileEntry> = None;
        for e in profile.entries.iter().filter(|e| e.bucket() == bucket && !e.oom) {
            best = Some(match best {
                None => e,
                Some(cur) => {
                    let (et, ct) = (e.tgs.unwrap(), cur.tgs.unwrap());
                    if et > ct
                        || (et == ct
                            && (e.config().tensor_parallel, e.config().data_parallel)
                                < (cur.config().tensor_parallel, cur.config().data_parallel))
                    {
                        e
                    } else {
                        cur
                    }
                }
            });
        }
        let chosen = best.ok_or(SelectorError::UnsatisfiableBucket {
            lower: bucket.lower,
            upper: bucket.upper,
        })?;
        table.push((bucket, chosen.config()));
    }
    Ok(SelectionPolicy {
        table,
        hysteresis_tokens,
        switch_cost_s,
    })
}

/// Mean of the observed episode context lengths.
pub fn observe(lengths: &[u64]) -> Result<f64, SelectorError> {
    if lengths.is_empty() {
        return Err(SelectorError::EmptyObservation);
    }
    let sum: u128 = lengths.iter().map(|&l| l as u128).sum();
    Ok(sum as f64 / lengths.len() as f64)
}
