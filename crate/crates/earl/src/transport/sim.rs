//! Alpha-beta latency model for dispatch plans.
//!
//! A phase's segments overlap in time; its latency is a fixed
//! per-message term plus the busiest link's serialization time. Phases
//! run back to back, so plan latency is the sum over phases:
//!
//! ```text
//! phase = alpha * max_w(messages touching w)
//!       + max_w(max(bytes_in_w, bytes_out_w) * 8 / rate_w)
//! ```
//!
//! where `rate_w` is the controller's bandwidth for the controller and
//! the common link bandwidth for everyone else. The model deliberately
//! prices only planned data movement; control traffic is free.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dispatch::{DispatchPlan, TransferSegment};
use crate::model::{ClusterSpec, WorkerId};

/// Network parameters of the latency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetModel {
    pub alpha_s: f64,
    pub beta_bps: f64,
    pub controller_beta_bps: f64,
    pub controller: WorkerId,
}

impl NetModel {
    pub fn from_cluster(cluster: &ClusterSpec) -> Self {
        NetModel {
            alpha_s: cluster.per_message_latency_s,
            beta_bps: cluster.link_bandwidth_bps as f64,
            controller_beta_bps: cluster.controller_bandwidth_bps as f64,
            controller: cluster.controller_id,
        }
    }

    fn rate(&self, w: WorkerId) -> f64 {
        if w == self.controller {
            self.controller_beta_bps
        } else {
            self.beta_bps
        }
    }
}

/// Latency of one phase's segments running concurrently.
pub fn simulate_phase(segments: &[TransferSegment], net: &NetModel) -> f64 {
    let mut messages: BTreeMap<WorkerId, u64> = BTreeMap::new();
    let mut bytes_in: BTreeMap<WorkerId, u64> = BTreeMap::new();
    let mut bytes_out: BTreeMap<WorkerId, u64> = BTreeMap::new();
    for seg in segments {
        *messages.entry(seg.src).or_default() += 1;
        *messages.entry(seg.dst).or_default() += 1;
        *bytes_out.entry(seg.src).or_default() += seg.bytes;
        *bytes_in.entry(seg.dst).or_default() += seg.bytes;
    }
    let alpha_term = net.alpha_s * messages.values().copied().max().unwrap_or(0) as f64;
    let mut serial_term: f64 = 0.0;
    for (&w, _) in &messages {
        let heavier = bytes_in.get(&w).copied().unwrap_or(0).max(
            bytes_out.get(&w).copied().unwrap_or(0),
        );
        serial_term = serial_term.max(heavier as f64 * 8.0 / net.rate(w));
    }
    alpha_term + serial_term
}

/// Total latency of a plan: phases run sequentially.
pub fn simulate_latency(plan: &DispatchPlan, net: &NetModel) -> f64 {
    plan.phases
        .iter()
        .map(|phase| simulate_phase(phase, net))
        .sum()
}
