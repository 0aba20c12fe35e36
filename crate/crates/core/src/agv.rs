//! AGV state and the key-node routes they execute.

use serde::{Deserialize, Serialize};

use crate::grid::Cell;
use crate::router::NavPath;
use crate::task::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgvId(pub u32);

impl std::fmt::Display for AgvId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "agv{}", self.0)
    }
}

/// A per-slot navigation action. Right-of-way priority is North over South
/// over East over West; movers outrank staying AGVs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heading {
    North,
    South,
    East,
    West,
    Stay,
}

impl Heading {
    /// Lower rank wins a conflict.
    pub fn rank(self) -> u8 {
        match self {
            Heading::North => 0,
            Heading::South => 1,
            Heading::East => 2,
            Heading::West => 3,
            Heading::Stay => 4,
        }
    }

    /// Heading of a single-step move; `Stay` when `from == to`.
    /// North is +y, East is +x.
    pub fn of_move(from: Cell, to: Cell) -> Heading {
        let dx = i32::from(to.x) - i32::from(from.x);
        let dy = i32::from(to.y) - i32::from(from.y);
        match (dx, dy) {
            (0, 1) => Heading::North,
            (0, -1) => Heading::South,
            (1, 0) => Heading::East,
            (-1, 0) => Heading::West,
            (0, 0) => Heading::Stay,
            _ => panic!("non-adjacent move {from} -> {to}"),
        }
    }
}

/// One entry of a task route: where to go and what to do there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteStop {
    Pickup(TaskId),
    Delivery(TaskId),
    /// Refill raw materials at this resupply cell.
    Resupply(Cell),
}

impl RouteStop {
    pub fn task(self) -> Option<TaskId> {
        match self {
            RouteStop::Pickup(m) | RouteStop::Delivery(m) => Some(m),
            RouteStop::Resupply(_) => None,
        }
    }
}

/// An AGV: position, raw-material payload, and its current plans.
///
/// Raw materials and the picked-up product are tracked separately: products
/// ride in their own slot between pickup and delivery, while `payload`
/// counts raw materials consumed at delivery nodes and refilled at resupply
/// cells.
#[derive(Debug, Clone)]
pub struct Agv {
    pub id: AgvId,
    pub location: Cell,
    pub payload: u32,
    pub capacity: u32,
    pub sensing_range: u16,
    pub task_route: Vec<RouteStop>,
    pub nav_path: Option<NavPath>,
    pub last_action: Heading,
}

impl Agv {
    pub fn new(id: AgvId, location: Cell, capacity: u32, sensing_range: u16) -> Self {
        Agv {
            id,
            location,
            payload: capacity,
            capacity,
            sensing_range,
            task_route: Vec::new(),
            nav_path: None,
            last_action: Heading::Stay,
        }
    }

    pub fn snapshot(&self) -> AgvSnapshot {
        AgvSnapshot {
            id: self.id,
            location: self.location,
            payload: self.payload,
            capacity: self.capacity,
            carrying: None,
        }
    }
}

/// The slice of AGV state the planner and validator need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgvSnapshot {
    pub id: AgvId,
    pub location: Cell,
    pub payload: u32,
    pub capacity: u32,
    /// Task already picked up and pinned to this AGV, if any.
    pub carrying: Option<TaskId>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headings_and_priority() {
        let c = Cell::new(3, 3);
        assert_eq!(Heading::of_move(c, Cell::new(3, 4)), Heading::North);
        assert_eq!(Heading::of_move(c, Cell::new(3, 2)), Heading::South);
        assert_eq!(Heading::of_move(c, Cell::new(4, 3)), Heading::East);
        assert_eq!(Heading::of_move(c, Cell::new(2, 3)), Heading::West);
        assert_eq!(Heading::of_move(c, c), Heading::Stay);
        assert!(Heading::North.rank() < Heading::South.rank());
        assert!(Heading::South.rank() < Heading::East.rank());
        assert!(Heading::East.rank() < Heading::West.rank());
        assert!(Heading::West.rank() < Heading::Stay.rank());
    }
}
