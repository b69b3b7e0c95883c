//! Layout-aware batch dispatch planning.
//!
//! A batch is a contiguous range of padded rows sharded across workers by
//! a [`ShardLayout`]. Moving a batch from the rollout layout to the
//! training layout either funnels every row through the controller
//! (gather-and-scatter, two phases) or routes each row directly from the
//! worker that holds it to the worker that needs it (all-to-all, one
//! phase). Planners emit [`TransferSegment`]s in canonical order, one per
//! maximal contiguous row interval shared by a worker pair, so equal
//! layouts always produce byte-identical plans.
//!
//! [`oracle`] holds an intentionally naive per-row reference
//! implementation the planners are tested against.

pub mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BatchMeta, TensorRole, TensorSpec, WorkerId};

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("invalid shard layout: {0}")]
    InvalidLayout(String),
    #[error("source layout has {src_rows} rows but destination has {dst_rows}")]
    LayoutMismatch { src_rows: u64, dst_rows: u64 },
    #[error("apply: worker {worker} does not hold row {row}")]
    MissingRow { worker: WorkerId, row: u64 },
    #[error("apply: worker {worker} already holds row {row}")]
    DuplicateRow { worker: WorkerId, row: u64 },
    #[error("apply: row {row} holds {got} bytes but the plan says {want}")]
    RowSizeMismatch { row: u64, want: u64, got: u64 },
    #[error("segment {src}->{dst} [{start}, {end}) carries {bytes} bytes, not divisible by its {rows} rows")]
    NonUniformSegment {
        src: WorkerId,
        dst: WorkerId,
        start: u64,
        end: u64,
        bytes: u64,
        rows: u64,
    },
    #[error("apply: worker id {worker} outside store range {stores}")]
    WorkerOutOfRange { worker: WorkerId, stores: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
}

/// Half-open row interval `[start, end)`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(deny_unknown_fields)]
pub struct RowRange {
    pub start: u64,
    pub end: u64,
}

impl RowRange {
    pub fn new(start: u64, end: u64) -> Self {
        RowRange { start, end }
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn intersect(&self, other: &RowRange) -> Option<RowRange> {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end);
        (start < end).then_some(RowRange { start, end })
    }
}

/// Assignment of every batch row to exactly one worker.
///
/// Assignments are stored sorted by row interval; together they cover
/// `[0, num_rows)` with no gaps or overlaps. A worker may own several
/// intervals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardLayout {
    assignments: Vec<(WorkerId, RowRange)>,
    num_rows: u64,
}

impl ShardLayout {
    pub fn new(mut assignments: Vec<(WorkerId, RowRange)>) -> Result<Self, DispatchError> {
        assignments.retain(|(_, r)| !r.is_empty());
        if assignments.is_empty() {
            return Err(DispatchError::InvalidLayout("no rows assigned".into()));
        }
        assignments.sort_by_key(|(_, r)| r.start);
        let mut expected = 0;
        for (w, r) in &assignments {
            if r.start != expected {
                return Err(DispatchError::InvalidLayout(format!(
                    "worker {w}: interval [{}, {}) leaves a gap or overlap at row {expected}",
                    r.start, r.end
                )));
            }
            expected = r.end;
        }
        Ok(ShardLayout {
            num_rows: expected,
            assignments,
        })
    }

    /// Splits `num_rows` into near-equal contiguous blocks, one per
    /// worker in order; the first `num_rows % workers` blocks get the
    /// extra row. Workers beyond the row count receive nothing.
    pub fn block(num_rows: u64, workers: &[WorkerId]) -> Result<Self, DispatchError> {
        if workers.is_empty() {
            return Err(DispatchError::InvalidLayout("no workers".into()));
        }
        if num_rows == 0 {
            return Err(DispatchError::InvalidLayout("no rows".into()));
        }
        let n = workers.len() as u64;
        let base = num_rows / n;
        let extra = num_rows % n;
        let mut assignments = Vec::with_capacity(workers.len());
        let mut start = 0;
        for (i, &w) in workers.iter().enumerate() {
            let len = base + u64::from((i as u64) < extra);
            assignments.push((w, RowRange::new(start, start + len)));
            start += len;
        }
        Self::new(assignments)
    }

    /// Every row on a single worker.
    pub fn all_on(worker: WorkerId, num_rows: u64) -> Result<Self, DispatchError> {
        Self::new(vec![(worker, RowRange::new(0, num_rows))])
    }

    /// Benchmark pair: one row per compute worker (ids 1..=workers),
    /// destinations rotated by one so every worker both sends and
    /// receives exactly one row and worker 0 holds nothing. Direct
    /// routing does one ring step; routing through worker 0 hauls the
    /// full payload in and back out.
    pub fn rotation_pair(workers: u32) -> Result<(Self, Self), DispatchError> {
        let src = Self::new(
            (0..workers)
                .map(|i| (i + 1, RowRange::new(i as u64, i as u64 + 1)))
                .collect(),
        )?;
        let dst = Self::new(
            (0..workers)
                .map(|i| ((i + 1) % workers + 1, RowRange::new(i as u64, i as u64 + 1)))
                .collect(),
        )?;
        Ok((src, dst))
    }

    pub fn num_rows(&self) -> u64 {
        self.num_rows
    }

    pub fn assignments(&self) -> &[(WorkerId, RowRange)] {
        &self.assignments
    }

    pub fn worker_of_row(&self, row: u64) -> Option<WorkerId> {
        self.assignments
            .iter()
            .find(|(_, r)| r.start <= row && row < r.end)
            .map(|(w, _)| *w)
    }

    pub fn workers(&self) -> BTreeSet<WorkerId> {
        self.assignments.iter().map(|(w, _)| *w).collect()
    }
}

/// How a batch travels between stage layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchStrategy {
    /// Every row visits the controller: gather phase then scatter phase.
    GatherScatter,
    /// Rows travel directly between workers in a single phase;
    /// aggregation-needing tensors still gather to the controller.
    AllToAll,
}

/// One contiguous row interval moving from `src` to `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSegment {
    pub src: WorkerId,
    pub dst: WorkerId,
    pub rows: RowRange,
    pub bytes: u64,
}

/// An ordered sequence of transfer phases; segments within a phase are
/// independent and may overlap in time, phases are barriers apart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchPlan {
    pub strategy: DispatchStrategy,
    pub num_rows: u64,
    pub phases: Vec<Vec<TransferSegment>>,
}

impl DispatchPlan {
    pub fn segments(&self) -> impl Iterator<Item = &TransferSegment> {
        self.phases.iter().flatten()
    }

    pub fn total_bytes(&self) -> u64 {
        self.segments().map(|s| s.bytes).sum()
    }
}

fn canonicalize(mut segments: Vec<TransferSegment>) -> Vec<TransferSegment> {
    segments.sort_by_key(|s| (s.src, s.dst, s.rows.start));
    let mut out: Vec<TransferSegment> = Vec::with_capacity(segments.len());
    for seg in segments {
        match out.last_mut() {
            Some(last)
                if last.src == seg.src
                    && last.dst == seg.dst
                    && last.rows.end == seg.rows.start =>
            {
                last.rows.end = seg.rows.end;
                last.bytes += seg.bytes;
            }
            _ => out.push(seg),
        }
    }
    out
}

fn check_same_rows(src: &ShardLayout, dst: &ShardLayout) -> Result<u64, DispatchError> {
    if src.num_rows() != dst.num_rows() {
        return Err(DispatchError::LayoutMismatch {
            src_rows: src.num_rows(),
            dst_rows: dst.num_rows(),
        });
    }
    Ok(src.num_rows())
}

/// Plans direct worker-to-worker movement: one phase, one segment per
/// maximal contiguous interval whose source and destination workers
/// differ. Rows already on their destination move nowhere.
pub fn plan_all_to_all(
    src: &ShardLayout,
    dst: &ShardLayout,
    row_bytes: u64,
) -> Result<DispatchPlan, DispatchError> {
    let num_rows = check_same_rows(src, dst)?;
    let mut segments = Vec::new();
    for (sw, sr) in src.assignments() {
        for (dw, dr) in dst.assignments() {
            if sw == dw {
                continue;
            }
            if let Some(rows) = sr.intersect(dr) {
                segments.push(TransferSegment {
                    src: *sw,
                    dst: *dw,
                    rows,
                    bytes: rows.len() * row_bytes,
                });
            }
        }
    }
    Ok(DispatchPlan {
        strategy: DispatchStrategy::AllToAll,
        num_rows,
        phases: vec![canonicalize(segments)],
    })
}

/// Plans the centralized route: phase one gathers every row not already
/// on the controller to it, phase two scatters rows to destination
/// workers other than the controller.
pub fn plan_gather_scatter(
    src: &ShardLayout,
    dst: &ShardLayout,
    controller: WorkerId,
    row_bytes: u64,
) -> Result<DispatchPlan, DispatchError> {
    let num_rows = check_same_rows(src, dst)?;
    let gather: Vec<TransferSegment> = src
        .assignments()
        .iter()
        .filter(|(w, _)| *w != controller)
        .map(|(w, r)| TransferSegment {
            src: *w,
            dst: controller,
            rows: *r,
            bytes: r.len() * row_bytes,
        })
        .collect();
    let scatter: Vec<TransferSegment> = dst
        .assignments()
        .iter()
        .filter(|(w, _)| *w != controller)
        .map(|(w, r)| TransferSegment {
            src: controller,
            dst: *w,
            rows: *r,
            bytes: r.len() * row_bytes,
        })
        .collect();
    Ok(DispatchPlan {
        strategy: DispatchStrategy::GatherScatter,
        num_rows,
        phases: vec![canonicalize(gather), canonicalize(scatter)],
    })
}

/// Traffic summary of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub total_bytes: u64,
    pub segment_count: usize,
    pub per_worker_in: BTreeMap<WorkerId, u64>,
    pub per_worker_out: BTreeMap<WorkerId, u64>,
    /// Largest single-worker burden: max over workers of
    /// max(bytes in, bytes out).
    pub bottleneck_bytes: u64,
}

/// Traffic summary of a whole plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub total_bytes: u64,
    pub segment_count: usize,
    pub phases: Vec<PhaseStats>,
}

pub fn plan_stats(plan: &DispatchPlan) -> PlanStats {
    let mut phases = Vec::with_capacity(plan.phases.len());
    for phase in &plan.phases {
        let mut per_worker_in: BTreeMap<WorkerId, u64> = BTreeMap::new();
        let mut per_worker_out: BTreeMap<WorkerId, u64> = BTreeMap::new();
        let mut total_bytes = 0;
        for seg in phase {
            *per_worker_out.entry(seg.src).or_default() += seg.bytes;
            *per_worker_in.entry(seg.dst).or_default() += seg.bytes;
            total_bytes += seg.bytes;
        }
        let bottleneck_bytes = per_worker_in
            .values()
            .chain(per_worker_out.values())
            .copied()
            .max()
            .unwrap_or(0);
        phases.push(PhaseStats {
            total_bytes,
            segment_count: phase.len(),
            per_worker_in,
            per_worker_out,
            bottleneck_bytes,
        });
    }
    PlanStats {
        total_bytes: phases.iter().map(|p| p.total_bytes).sum(),
        segment_count: phases.iter().map(|p| p.segment_count).sum(),
        phases,
    }
}

/// How one tensor role travels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Worker to worker, no central hop.
    Direct,
    /// Collected on the controller for aggregation.
    GatherToController,
}

/// Role-based routing table.
///
/// Aggregation-free roles ship directly between workers; the rest gather
/// to the controller, unless `distribute_aggregates` opts them into
/// direct routing too.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleRouting {
    pub aggregation_free: BTreeSet<TensorRole>,
    pub distribute_aggregates: bool,
}

impl Default for RoleRouting {
    fn default() -> Self {
        RoleRouting {
            aggregation_free: BTreeSet::from([
                TensorRole::Tokens,
                TensorRole::LogProbs,
                TensorRole::Advantages,
                TensorRole::Auxiliary,
            ]),
            distribute_aggregates: false,
        }
    }
}

impl RoleRouting {
    pub fn route(&self, role: TensorRole) -> Route {
        if self.distribute_aggregates || self.aggregation_free.contains(&role) {
            Route::Direct
        } else {
            Route::GatherToController
        }
    }
}

/// One tensor's movement plan.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorPlan {
    pub spec: TensorSpec,
    pub plan: DispatchPlan,
}

/// Plans the whole batch, one plan per tensor.
///
/// Under [`DispatchStrategy::GatherScatter`] every tensor funnels through
/// the controller to `dst`. Under [`DispatchStrategy::AllToAll`],
/// direct-routed roles go worker to worker and aggregation roles gather
/// onto the controller (their scatter phase is empty).
pub fn plan_batch(
    batch: &BatchMeta,
    src: &ShardLayout,
    dst: &ShardLayout,
    controller: WorkerId,
    routing: &RoleRouting,
    strategy: DispatchStrategy,
) -> Result<Vec<TensorPlan>, DispatchError> {
    batch
        .validate()
        .map_err(|e| DispatchError::InvalidBatch(e.to_string()))?;
    if batch.num_sequences != src.num_rows() {
        return Err(DispatchError::InvalidBatch(format!(
            "batch has {} sequences but the source layout has {} rows",
            batch.num_sequences,
            src.num_rows()
        )));
    }
    let mut plans = Vec::with_capacity(batch.tensors.len());
    for t in &batch.tensors {
        let row_bytes = batch.row_bytes(t);
        let plan = match strategy {
            DispatchStrategy::GatherScatter => {
                plan_gather_scatter(src, dst, controller, row_bytes)?
            }
            DispatchStrategy::AllToAll => match routing.route(t.role) {
                Route::Direct => plan_all_to_all(src, dst, row_bytes)?,
                Route::GatherToController => {
                    let hub = ShardLayout::all_on(controller, src.num_rows())?;
                    plan_gather_scatter(src, &hub, controller, row_bytes)?
                }
            },
        };
        plans.push(TensorPlan {
            spec: t.clone(),
            plan,
        });
    }
    Ok(plans)
}

/// Per-worker row storage used by the in-memory executor and the tests.
pub type RowStore = BTreeMap<u64, Vec<u8>>;

/// Executes a plan against in-memory stores indexed by worker id,
/// moving row payloads phase by phase. After a full
/// source-to-destination plan, every store holds exactly its layout's
/// rows with contents preserved.
pub fn apply_plan(plan: &DispatchPlan, stores: &mut [RowStore]) -> Result<(), DispatchError> {
    for phase in &plan.phases {
        for seg in phase {
            let rows = seg.rows.len();
            if rows == 0 || seg.bytes % rows != 0 {
                return Err(DispatchError::NonUniformSegment {
                    src: seg.src,
                    dst: seg.dst,
                    start: seg.rows.start,
                    end: seg.rows.end,
                    bytes: seg.bytes,
                    rows,
                });
            }
            let row_bytes = seg.bytes / rows;
            for worker in [seg.src, seg.dst] {
                if worker as usize >= stores.len() {
                    return Err(DispatchError::WorkerOutOfRange {
                        worker,
                        stores: stores.len(),
                    });
                }
            }
            for row in seg.rows.start..seg.rows.end {
                let payload = stores[seg.src as usize]
                    .remove(&row)
                    .ok_or(DispatchError::MissingRow {
                        worker: seg.src,
                        row,
                    })?;
                if payload.len() as u64 != row_bytes {
                    return Err(DispatchError::RowSizeMismatch {
                        row,
                        want: row_bytes,
                        got: payload.len() as u64,
                    });
                }
                if stores[seg.dst as usize].insert(row, payload).is_some() {
                    return Err(DispatchError::DuplicateRow {
                        worker: seg.dst,
                        row,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Populates per-worker stores with one deterministic payload per row
/// according to `layout`.
pub fn place_rows(layout: &ShardLayout, row_bytes: u64, num_workers: usize) -> Vec<RowStore> {
    let mut stores = vec![RowStore::new(); num_workers];
    for (w, range) in layout.assignments() {
        for row in range.start..range.end {
            stores[*w as usize].insert(row, row_payload(row, row_bytes));
        }
    }
    stores
}

/// Deterministic, row-dependent filler so misrouted rows are detectable.
pub fn row_payload(row: u64, row_bytes: u64) -> Vec<u8> {
    (0..row_bytes)
        .map(|i| (row.wrapping_mul(31).wrapping_add(i) & 0xff) as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_tensors;
    use proptest::prelude::*;

    fn layout(parts: &[(WorkerId, u64, u64)]) -> ShardLayout {
        ShardLayout::new(
            parts
                .iter()
                .map(|&(w, s, e)| (w, RowRange::new(s, e)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn block_layout_splits_remainder_first() {
        let l = ShardLayout::block(5, &[3, 7]).unwrap();
        assert_eq!(
            l.assignments(),
            &[(3, RowRange::new(0, 3)), (7, RowRange::new(3, 5))]
        );
        let even = ShardLayout::block(16, &[1, 2, 3, 4]).unwrap();
        assert!(even.assignments().iter().all(|(_, r)| r.len() == 4));
        assert_eq!(even.num_rows(), 16);
    }

    #[test]
    fn block_layout_drops_surplus_workers() {
        let l = ShardLayout::block(2, &[5, 6, 7]).unwrap();
        assert_eq!(l.assignments().len(), 2);
        assert_eq!(l.num_rows(), 2);
    }

    #[test]
    fn layout_validation_rejects_gaps_and_overlaps() {
        assert!(ShardLayout::new(vec![
            (0, RowRange::new(0, 4)),
            (1, RowRange::new(5, 8)),
        ])
        .is_err());
        assert!(ShardLayout::new(vec![
            (0, RowRange::new(0, 4)),
            (1, RowRange::new(3, 8)),
        ])
        .is_err());
        assert!(ShardLayout::new(vec![(0, RowRange::new(1, 4))]).is_err());
        assert!(ShardLayout::block(4, &[]).is_err());
    }

    #[test]
    fn all_to_all_hand_example() {
        let src = layout(&[(1, 0, 4), (2, 4, 8)]);
        let dst = layout(&[(1, 0, 2), (2, 2, 6), (3, 6, 8)]);
        let plan = plan_all_to_all(&src, &dst, 10).unwrap();
        assert_eq!(plan.phases.len(), 1);
        assert_eq!(
            plan.phases[0],
            vec![
                TransferSegment { src: 1, dst: 2, rows: RowRange::new(2, 4), bytes: 20 },
                TransferSegment { src: 2, dst: 3, rows: RowRange::new(6, 8), bytes: 20 },
            ]
        );
    }

    #[test]
    fn gather_scatter_hand_example() {
        let src = layout(&[(1, 0, 4), (2, 4, 8)]);
        let dst = layout(&[(0, 0, 2), (3, 2, 8)]);
        let plan = plan_gather_scatter(&src, &dst, 0, 10).unwrap();
        assert_eq!(plan.phases.len(), 2);
        assert_eq!(
            plan.phases[0],
            vec![
                TransferSegment { src: 1, dst: 0, rows: RowRange::new(0, 4), bytes: 40 },
                TransferSegment { src: 2, dst: 0, rows: RowRange::new(4, 8), bytes: 40 },
            ]
        );
        // Rows staying on the controller are not scattered back out.
        assert_eq!(
            plan.phases[1],
            vec![TransferSegment { src: 0, dst: 3, rows: RowRange::new(2, 8), bytes: 60 }]
        );
    }

    #[test]
    fn identical_layouts_need_no_direct_traffic() {
        let l = ShardLayout::block(64, &[1, 2, 3, 4]).unwrap();
        let plan = plan_all_to_all(&l, &l, 8).unwrap();
        assert!(plan.phases[0].is_empty());
        assert_eq!(plan.total_bytes(), 0);
        // The centralized route still pays the full round trip.
        let gs = plan_gather_scatter(&l, &l, 0, 8).unwrap();
        assert_eq!(gs.total_bytes(), 2 * 64 * 8);
    }

    #[test]
    fn mismatched_row_counts_are_rejected() {
        let a = ShardLayout::block(8, &[1, 2]).unwrap();
        let b = ShardLayout::block(9, &[1, 2]).unwrap();
        assert!(matches!(
            plan_all_to_all(&a, &b, 1),
            Err(DispatchError::LayoutMismatch { src_rows: 8, dst_rows: 9 })
        ));
    }

    #[test]
    fn stats_hand_example() {
        let src = layout(&[(1, 0, 4), (2, 4, 8)]);
        let dst = layout(&[(0, 0, 2), (3, 2, 8)]);
        let stats = plan_stats(&plan_gather_scatter(&src, &dst, 0, 10).unwrap());
        assert_eq!(stats.total_bytes, 140);
        assert_eq!(stats.segment_count, 3);
        assert_eq!(stats.phases[0].per_worker_in[&0], 80);
        assert_eq!(stats.phases[0].bottleneck_bytes, 80);
        assert_eq!(stats.phases[1].per_worker_out[&0], 60);
    }

    #[test]
    fn default_routing_gathers_only_aggregation_roles() {
        let routing = RoleRouting::default();
        assert_eq!(routing.route(TensorRole::Tokens), Route::Direct);
        assert_eq!(routing.route(TensorRole::LogProbs), Route::Direct);
        assert_eq!(routing.route(TensorRole::Advantages), Route::Direct);
        assert_eq!(routing.route(TensorRole::Rewards), Route::GatherToController);
        assert_eq!(routing.route(TensorRole::Returns), Route::GatherToController);
        let distribute = RoleRouting {
            distribute_aggregates: true,
            ..Default::default()
        };
        assert_eq!(distribute.route(TensorRole::Rewards), Route::Direct);
    }

    #[test]
    fn batch_planning_splits_by_role() {
        let batch = BatchMeta {
            num_sequences: 16,
            max_context_len: 128,
            tensors: default_tensors(),
        };
        let src = ShardLayout::block(16, &[1, 5]).unwrap();
        let dst = ShardLayout::block(16, &[1, 2, 5, 6]).unwrap();
        let plans = plan_batch(&batch, &src, &dst, 0, &RoleRouting::default(), DispatchStrategy::AllToAll)
            .unwrap();
        assert_eq!(plans.len(), 4);
        for tp in &plans {
            match tp.spec.role {
                TensorRole::Rewards | TensorRole::Returns => {
                    assert_eq!(tp.plan.strategy, DispatchStrategy::GatherScatter);
                    assert!(tp.plan.phases[1].is_empty(), "gather only");
                    assert!(tp.plan.phases[0].iter().all(|s| s.dst == 0));
                }
                _ => {
                    assert_eq!(tp.plan.strategy, DispatchStrategy::AllToAll);
                    assert!(tp.plan.segments().all(|s| s.src != 0 && s.dst != 0));
                }
            }
        }
        // The baseline funnels every tensor through the controller.
        let baseline =
            plan_batch(&batch, &src, &dst, 0, &RoleRouting::default(), DispatchStrategy::GatherScatter)
                .unwrap();
        for tp in &baseline {
            assert_eq!(tp.plan.phases.len(), 2);
            assert!(!tp.plan.phases[1].is_empty());
        }
    }

    #[test]
    fn zero_tensor_batch_is_rejected_by_meta_but_plans_empty() {
        let batch = BatchMeta {
            num_sequences: 4,
            max_context_len: 8,
            tensors: vec![],
        };
        let src = ShardLayout::block(4, &[1]).unwrap();
        let dst = ShardLayout::block(4, &[1, 2]).unwrap();
        let plans = plan_batch(&batch, &src, &dst, 0, &RoleRouting::default(), DispatchStrategy::AllToAll)
            .unwrap();
        assert!(plans.is_empty());
    }

    fn arb_layout(num_rows: u64, max_workers: u32) -> impl Strategy<Value = ShardLayout> {
        // A random composition of [0, num_rows) into labeled intervals.
        (
            proptest::collection::vec(1u64..=num_rows, 0..8),
            proptest::collection::vec(0..max_workers, 9),
        )
            .prop_map(move |(mut cuts, workers)| {
                cuts.retain(|&c| c < num_rows);
                cuts.sort_unstable();
                cuts.dedup();
                cuts.push(num_rows);
                let mut assignments = Vec::new();
                let mut start = 0;
                for (i, cut) in cuts.into_iter().enumerate() {
                    assignments.push((workers[i % workers.len()], RowRange::new(start, cut)));
                    start = cut;
                }
                ShardLayout::new(assignments).unwrap()
            })
    }

    proptest! {
        #[test]
        fn planners_agree_with_the_row_oracle(
            (src, dst) in (16u64..96).prop_flat_map(|n| (arb_layout(n, 6), arb_layout(n, 6))),
        ) {
            let a2a = plan_all_to_all(&src, &dst, 3)?;
            let want = oracle::all_to_all_moves(&src, &dst);
            prop_assert_eq!(oracle::expand_phase(&a2a.phases[0]), want.clone());
            prop_assert_eq!(a2a.total_bytes(), 3 * want.len() as u64);
            prop_assert!(a2a.segments().all(|s| s.src != s.dst));

            let gs = plan_gather_scatter(&src, &dst, 0, 3)?;
            let (gather, scatter) = oracle::gather_scatter_moves(&src, &dst, 0);
            prop_assert_eq!(oracle::expand_phase(&gs.phases[0]), gather);
            prop_assert_eq!(oracle::expand_phase(&gs.phases[1]), scatter);
        }

        #[test]
        fn plans_are_maximally_coalesced(
            (src, dst) in (16u64..96).prop_flat_map(|n| (arb_layout(n, 6), arb_layout(n, 6))),
        ) {
            let plan = plan_all_to_all(&src, &dst, 1)?;
            for pair in plan.phases[0].windows(2) {
                let same_pair = pair[0].src == pair[1].src && pair[0].dst == pair[1].dst;
                prop_assert!(
                    !(same_pair && pair[0].rows.end == pair[1].rows.start),
                    "adjacent mergeable segments {:?}",
                    pair
                );
            }
        }

        #[test]
        fn applying_a_plan_realizes_the_destination_layout(
            (src, dst) in (16u64..96).prop_flat_map(|n| (arb_layout(n, 6), arb_layout(n, 6))),
            centralized in proptest::bool::ANY,
        ) {
            let row_bytes = 5;
            let plan = if centralized {
                plan_gather_scatter(&src, &dst, 0, row_bytes)?
            } else {
                plan_all_to_all(&src, &dst, row_bytes)?
            };
            let mut stores = place_rows(&src, row_bytes, 7);
            apply_plan(&plan, &mut stores)?;
            let want = place_rows(&dst, row_bytes, 7);
            prop_assert_eq!(stores, want);
        }
    }
}
