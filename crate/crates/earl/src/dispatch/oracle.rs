//! Per-row reference routing, kept deliberately naive.
//!
//! Routes every row independently by scanning the layouts, with no
//! interval arithmetic and no coalescing. The planners must produce the
//! exact same sorted multiset of `(src, dst, row)` moves.

use super::{ShardLayout, TransferSegment};
use crate::model::WorkerId;

/// A single row traveling between two workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct RowMove {
    pub src: WorkerId,
    pub dst: WorkerId,
    pub row: u64,
}

/// Direct routing: each row goes straight from its holder to its
/// destination; rows already in place move nowhere.
pub fn all_to_all_moves(src: &ShardLayout, dst: &ShardLayout) -> Vec<RowMove> {
    let mut moves = Vec::new();
    for row in 0..src.num_rows() {
        let s = src.worker_of_row(row).expect("layout covers every row");
        let d = dst.worker_of_row(row).expect("layout covers every row");
        if s != d {
            moves.push(RowMove { src: s, dst: d, row });
        }
    }
    moves.sort_unstable();
    moves
}

/// Centralized routing: every row not already on the controller is
/// pulled to it, then every row not staying there is pushed out.
pub fn gather_scatter_moves(
    src: &ShardLayout,
    dst: &ShardLayout,
    controller: WorkerId,
) -> (Vec<RowMove>, Vec<RowMove>) {
    let mut gather = Vec::new();
    let mut scatter = Vec::new();
    for row in 0..src.num_rows() {
        let s = src.worker_of_row(row).expect("layout covers every row");
        let d = dst.worker_of_row(row).expect("layout covers every row");
        if s != controller {
            gather.push(RowMove { src: s, dst: controller, row });
        }
        if d != controller {
            scatter.push(RowMove { src: controller, dst: d, row });
        }
    }
    gather.sort_unstable();
    scatter.sort_unstable();
    (gather, scatter)
}

/// Expands a phase's segments into the sorted per-row move multiset.
pub fn expand_phase(segments: &[TransferSegment]) -> Vec<RowMove> {
    let mut moves: Vec<RowMove> = segments
        .iter()
        .flat_map(|seg| {
            (seg.rows.start..seg.rows.end).map(|row| RowMove {
                src: seg.src,
                dst: seg.dst,
                row,
            })
        })
        .collect();
    moves.sort_unstable();
    moves
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::RowRange;

    #[test]
    fn oracle_routes_each_row_independently() {
        let src = ShardLayout::new(vec![
            (1, RowRange::new(0, 2)),
            (2, RowRange::new(2, 4)),
        ])
        .unwrap();
        let dst = ShardLayout::new(vec![
            (2, RowRange::new(0, 3)),
            (1, RowRange::new(3, 4)),
        ])
        .unwrap();
        assert_eq!(
            all_to_all_moves(&src, &dst),
            vec![
                RowMove { src: 1, dst: 2, row: 0 },
                RowMove { src: 1, dst: 2, row: 1 },
                RowMove { src: 2, dst: 1, row: 3 },
            ]
        );
        let (gather, scatter) = gather_scatter_moves(&src, &dst, 0);
        assert_eq!(gather.len(), 4);
        assert_eq!(scatter.len(), 4);
        assert!(gather.iter().all(|m| m.dst == 0));
        assert!(scatter.iter().all(|m| m.src == 0));
    }
}
