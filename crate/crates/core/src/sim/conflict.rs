//! Imminent-conflict detection over intended moves and the heading-based
//! right-of-way rules that resolve them.

use std::collections::BTreeMap;

use crate::agv::{AgvId, Heading};
use crate::grid::Cell;

/// One AGV's intended move for the next slot (adjacent cell or stay).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub agv: AgvId,
    pub from: Cell,
    pub to: Cell,
}

impl Move {
    pub fn heading(&self) -> Heading {
        Heading::of_move(self.from, self.to)
    }

    pub fn is_stay(&self) -> bool {
        self.from == self.to
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Conflict {
    /// The cell's resulting occupancy would exceed the safety bound.
    Vertex { cell: Cell, agvs: Vec<AgvId> },
    /// Two AGVs swapping cells head-on.
    EdgeSwap { a: AgvId, b: AgvId },
}

/// Flag vertex conflicts (target occupancy above `occupancy_bound`) and
/// head-on edge swaps. The closed loop passes the congestion threshold as
/// the bound, so co-location below it is legal.
pub fn detect_conflicts(moves: &[Move], occupancy_bound: u32) -> Vec<Conflict> {
    let mut by_target: BTreeMap<Cell, Vec<AgvId>> = BTreeMap::new();
    for m in moves {
        by_target.entry(m.to).or_default().push(m.agv);
    }
    let mut conflicts = Vec::new();
    for (cell, agvs) in by_target {
        if agvs.len() as u32 > occupancy_bound {
            conflicts.push(Conflict::Vertex { cell, agvs });
        }
    }
    for (i, a) in moves.iter().enumerate() {
        if a.is_stay() {
            continue;
        }
        for b in &moves[i + 1..] {
            if !b.is_stay() && a.to == b.from && a.from == b.to {
                conflicts.push(Conflict::EdgeSwap {
                    a: a.agv.min(b.agv),
                    b: a.agv.max(b.agv),
                });
            }
        }
    }
    conflicts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Proceed,
    Stay,
}

/// Resolve one conflict set: the northbound AGV outranks southbound, then
/// eastbound, then westbound; a staying AGV never outranks a mover; equal
/// headings break toward the lower AGV id. Exactly one AGV proceeds.
pub fn resolve_right_of_way(conflicted: &[(AgvId, Heading)]) -> BTreeMap<AgvId, Decision> {
    let winner = conflicted
        .iter()
        .min_by_key(|(id, heading)| (heading.rank(), *id))
        .map(|(id, _)| *id);
    conflicted
        .iter()
        .map(|(id, _)| {
            let d = if Some(*id) == winner {
                Decision::Proceed
            } else {
                Decision::Stay
            };
            (*id, d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(id: u32, from: (u16, u16), to: (u16, u16)) -> Move {
        Move {
            agv: AgvId(id),
            from: Cell::new(from.0, from.1),
            to: Cell::new(to.0, to.1),
        }
    }

    #[test]
    fn two_into_one_cell_is_vertex_conflict() {
        // Strict single-occupancy bound, as for an empty target cell.
        let moves = [mv(0, (1, 1), (1, 2)), mv(1, (0, 2), (1, 2))];
        let conflicts = detect_conflicts(&moves, 1);
        assert_eq!(
            conflicts,
            vec![Conflict::Vertex {
                cell: Cell::new(1, 2),
                agvs: vec![AgvId(0), AgvId(1)]
            }]
        );
    }

    #[test]
    fn threshold_bound_permits_co_location() {
        let moves = [
            mv(0, (1, 1), (1, 2)),
            mv(1, (0, 2), (1, 2)),
            mv(2, (2, 2), (1, 2)),
        ];
        assert!(detect_conflicts(&moves, 3).is_empty());
        let crowd = [
            mv(0, (1, 1), (1, 2)),
            mv(1, (0, 2), (1, 2)),
            mv(2, (2, 2), (1, 2)),
            mv(3, (1, 3), (1, 2)),
        ];
        assert_eq!(detect_conflicts(&crowd, 3).len(), 1);
    }

    #[test]
    fn head_on_swap_flagged() {
        let moves = [mv(3, (1, 1), (2, 1)), mv(5, (2, 1), (1, 1))];
        let conflicts = detect_conflicts(&moves, 3);
        assert_eq!(
            conflicts,
            vec![Conflict::EdgeSwap {
                a: AgvId(3),
                b: AgvId(5)
            }]
        );
    }

    #[test]
    fn disjoint_moves_are_clean() {
        let moves = [mv(0, (0, 0), (0, 1)), mv(1, (3, 3), (3, 2))];
        assert!(detect_conflicts(&moves, 1).is_empty());
    }

    #[test]
    fn north_beats_west() {
        let decisions =
            resolve_right_of_way(&[(AgvId(0), Heading::North), (AgvId(1), Heading::West)]);
        assert_eq!(decisions[&AgvId(0)], Decision::Proceed);
        assert_eq!(decisions[&AgvId(1)], Decision::Stay);
    }

    #[test]
    fn south_beats_east() {
        let decisions =
            resolve_right_of_way(&[(AgvId(0), Heading::East), (AgvId(1), Heading::South)]);
        assert_eq!(decisions[&AgvId(1)], Decision::Proceed);
        assert_eq!(decisions[&AgvId(0)], Decision::Stay);
    }

    #[test]
    fn equal_headings_break_by_id() {
        let decisions =
            resolve_right_of_way(&[(AgvId(4), Heading::North), (AgvId(2), Heading::North)]);
        assert_eq!(decisions[&AgvId(2)], Decision::Proceed);
        assert_eq!(decisions[&AgvId(4)], Decision::Stay);
    }

    #[test]
    fn movers_outrank_stayers() {
        let decisions =
            resolve_right_of_way(&[(AgvId(0), Heading::Stay), (AgvId(1), Heading::West)]);
        assert_eq!(decisions[&AgvId(1)], Decision::Proceed);
        assert_eq!(decisions[&AgvId(0)], Decision::Stay);
    }
}
