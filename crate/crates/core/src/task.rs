//! Transportation tasks: pickup/delivery tuples chained into production
//! lines, plus the seeded generator that produces them.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Cell, DistanceMatrix, FactoryGraph};
use crate::timing::Slot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub u32);

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineId(pub u32);

/// One pickup-and-delivery job.
///
/// `priority` is the task's 1-based position within its production line;
/// within a line, the delivery node of priority u is the pickup node of
/// priority u+1, and downstream tasks cannot start until upstream ones
/// finish.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportTask {
    pub id: TaskId,
    pub pickup: Cell,
    pub delivery: Cell,
    /// Units of partially-finished product produced at the pickup node.
    pub qty_out: u32,
    /// Units of raw material demanded at the delivery node.
    pub qty_in: u32,
    pub deadline: Slot,
    /// Permissible soft delay beyond the deadline.
    pub soft_delay: Slot,
    /// Position within the line, 1-based.
    pub priority: u32,
    pub line: LineId,
    /// Production processing time for this task's product.
    pub processing_time: Slot,
    /// Reconfiguration slot at which the task becomes known.
    pub arrival_slot: Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskGenParams {
    pub lines: u32,
    pub per_line: u32,
    /// Inclusive range for both qty_out and qty_in draws.
    pub qty_range: (u32, u32),
    /// Inclusive range for processing-time draws.
    pub proc_range: (Slot, Slot),
    /// AGV maximum payload d*; quantities above it are infeasible.
    pub capacity: u32,
    /// Deadline = release + slack_factor * (shortest pickup->delivery + t_p).
    pub slack_factor: u32,
    pub soft_delay: Slot,
    /// Slot at which this batch becomes known.
    pub release_slot: Slot,
    /// Ids are allocated from these so successive waves never collide.
    pub first_task_id: u32,
    pub first_line_id: u32,
}

impl Default for TaskGenParams {
    fn default() -> Self {
        TaskGenParams {
            lines: 1,
            per_line: 1,
            qty_range: (5, 10),
            proc_range: (5, 10),
            capacity: 20,
            slack_factor: 6,
            soft_delay: 20,
            release_slot: 0,
            first_task_id: 0,
            first_line_id: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenError {
    #[error("lines and per_line must be at least 1")]
    EmptyBatch,
    #[error("quantity range [{lo},{hi}] exceeds AGV capacity {capacity}")]
    InfeasibleQuantity { lo: u32, hi: u32, capacity: u32 },
    #[error("invalid range [{0},{1}]")]
    InvalidRange(u64, u64),
    #[error("need at least 2 production nodes to chain tasks, found {0}")]
    TooFewProductionNodes(usize),
    #[error("production nodes are mutually unreachable")]
    UnreachableNodes,
}

/// Generate `lines * per_line` tasks. Tasks of one line form a chain: the
/// delivery node of priority u is the pickup node of priority u+1.
/// Byte-identical output for identical inputs and RNG state.
pub fn generate_tasks(
    params: &TaskGenParams,
    graph: &FactoryGraph,
    dist: &DistanceMatrix,
    rng: &mut impl Rng,
) -> Result<Vec<TransportTask>, GenError> {
    if params.lines == 0 || params.per_line == 0 {
        return Err(GenError::EmptyBatch);
    }
    let (qlo, qhi) = params.qty_range;
    if qlo > qhi {
        return Err(GenError::InvalidRange(u64::from(qlo), u64::from(qhi)));
    }
    if qhi > params.capacity {
        return Err(GenError::InfeasibleQuantity {
            lo: qlo,
            hi: qhi,
            capacity: params.capacity,
        });
    }
    let (plo, phi) = params.proc_range;
    if plo > phi || plo == 0 {
        return Err(GenError::InvalidRange(plo, phi));
    }
    let nodes = graph.production_nodes();
    if nodes.len() < 2 {
        return Err(GenError::TooFewProductionNodes(nodes.len()));
    }

    let mut tasks = Vec::with_capacity((params.lines * params.per_line) as usize);
    let mut next_id = params.first_task_id;
    for line_ix in 0..params.lines {
        let line = LineId(params.first_line_id + line_ix);
        // Chain of per_line+1 nodes with no two consecutive equal.
        let mut chain = Vec::with_capacity(params.per_line as usize + 1);
        let mut prev: Option<Cell> = None;
        for _ in 0..=params.per_line {
            let node = loop {
                let candidate = nodes[rng.gen_range(0..nodes.len())];
                if Some(candidate) != prev {
                    break candidate;
                }
            };
            chain.push(node);
            prev = Some(node);
        }
        for step in 0..params.per_line as usize {
            let pickup = chain[step];
            let delivery = chain[step + 1];
            let qty_out = rng.gen_range(qlo..=qhi);
            let qty_in = rng.gen_range(qlo..=qhi);
            let processing_time = rng.gen_range(plo..=phi);
            let travel = dist
                .travel(graph, pickup, delivery)
                .map_err(|_| GenError::UnreachableNodes)?;
            let deadline = params.release_slot
                + u64::from(params.slack_factor) * (u64::from(travel) + processing_time);
            tasks.push(TransportTask {
                id: TaskId(next_id),
                pickup,
                delivery,
                qty_out,
                qty_in,
                deadline,
                soft_delay: params.soft_delay,
                priority: step as u32 + 1,
                line,
                processing_time,
                arrival_slot: params.release_slot,
            });
            next_id += 1;
        }
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LayoutSpec;
    use crate::rng;

    fn world() -> (FactoryGraph, DistanceMatrix) {
        let g = FactoryGraph::build(10, 10, &LayoutSpec::default_columns(10, 10)).unwrap();
        let d = DistanceMatrix::new(&g);
        (g, d)
    }

    #[test]
    fn degenerate_ranges_pin_values() {
        let (g, d) = world();
        let params = TaskGenParams {
            qty_range: (5, 5),
            proc_range: (5, 5),
            ..TaskGenParams::default()
        };
        let tasks = generate_tasks(&params, &g, &d, &mut rng::stream(7, "tasks")).unwrap();
        assert_eq!(tasks.len(), 1);
        let t = &tasks[0];
        assert_eq!((t.qty_out, t.qty_in, t.processing_time), (5, 5, 5));
        assert_eq!(t.priority, 1);
    }

    #[test]
    fn paper_scale_batch() {
        let (g, d) = world();
        let params = TaskGenParams {
            lines: 60,
            per_line: 4,
            ..TaskGenParams::default()
        };
        let tasks = generate_tasks(&params, &g, &d, &mut rng::stream(3, "tasks")).unwrap();
        assert_eq!(tasks.len(), 240);
        // 60 chains of length 4: delivery of priority u is pickup of u+1.
        for w in tasks.windows(2) {
            if w[0].line == w[1].line {
                assert_eq!(w[0].priority + 1, w[1].priority);
                assert_eq!(w[0].delivery, w[1].pickup);
                assert_ne!(w[1].pickup, w[1].delivery);
            }
        }
        let lines: std::collections::BTreeSet<_> = tasks.iter().map(|t| t.line).collect();
        assert_eq!(lines.len(), 60);
        for t in &tasks {
            assert!(g.production_nodes().contains(&t.pickup));
            assert!(g.production_nodes().contains(&t.delivery));
            assert!((5..=10).contains(&t.qty_in) && (5..=10).contains(&t.qty_out));
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let (g, d) = world();
        let params = TaskGenParams {
            lines: 12,
            per_line: 3,
            ..TaskGenParams::default()
        };
        let a = generate_tasks(&params, &g, &d, &mut rng::stream(9, "tasks")).unwrap();
        let b = generate_tasks(&params, &g, &d, &mut rng::stream(9, "tasks")).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn infeasible_quantity_rejected() {
        let (g, d) = world();
        let params = TaskGenParams {
            qty_range: (5, 25),
            capacity: 20,
            ..TaskGenParams::default()
        };
        assert_eq!(
            generate_tasks(&params, &g, &d, &mut rng::stream(1, "tasks")).unwrap_err(),
            GenError::InfeasibleQuantity {
                lo: 5,
                hi: 25,
                capacity: 20
            }
        );
    }

    #[test]
    fn deadlines_scale_with_distance_and_processing() {
        let (g, d) = world();
        let params = TaskGenParams {
            lines: 5,
            per_line: 2,
            release_slot: 100,
            ..TaskGenParams::default()
        };
        let tasks = generate_tasks(&params, &g, &d, &mut rng::stream(4, "tasks")).unwrap();
        for t in &tasks {
            let travel = d.travel(&g, t.pickup, t.delivery).unwrap();
            assert_eq!(
                t.deadline,
                100 + 6 * (u64::from(travel) + t.processing_time)
            );
            assert_eq!(t.arrival_slot, 100);
        }
    }
}
