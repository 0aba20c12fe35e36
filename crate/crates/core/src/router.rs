//! Congestion-map-aware spatiotemporal A*.
//!
//! Search states are (cell, slot) pairs; successors are the four neighbors
//! plus staying in place, each one slot later. The total cost of a state is
//! g + h + c: elapsed slots, Manhattan heuristic to the goal, and the
//! congestion penalties accumulated over every entered state whose
//! predicted occupancy reaches the threshold.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Cell, FactoryGraph};
use crate::timing::Slot;

/// Predicted AGV occupancy per (cell, future slot) over a finite horizon.
/// Lookups outside the window return zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CongestionMap {
    origin: Slot,
    horizon: u32,
    ncells: usize,
    counts: Vec<u16>,
}

impl CongestionMap {
    pub fn zero(ncells: usize, origin: Slot, horizon: u32) -> Self {
        CongestionMap {
            origin,
            horizon,
            ncells,
            counts: vec![0; ncells * horizon as usize],
        }
    }

    pub fn origin(&self) -> Slot {
        self.origin
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn ncells(&self) -> usize {
        self.ncells
    }

    pub fn occupancy(&self, graph: &FactoryGraph, cell: Cell, slot: Slot) -> u32 {
        if slot < self.origin {
            return 0;
        }
        let offset = slot - self.origin;
        if offset >= u64::from(self.horizon) {
            return 0;
        }
        u32::from(self.counts[offset as usize * self.ncells + graph.index(cell)])
    }

    pub fn add(&mut self, graph: &FactoryGraph, cell: Cell, slot: Slot, count: u32) {
        if slot < self.origin {
            return;
        }
        let offset = slot - self.origin;
        if offset >= u64::from(self.horizon) {
            return;
        }
        let slot_count = &mut self.counts[offset as usize * self.ncells + graph.index(cell)];
        *slot_count = slot_count.saturating_add(count.min(u32::from(u16::MAX)) as u16);
    }
}

/// Element-wise maximum of two maps, aligned on absolute slots and padded
/// with zeros where their windows differ.
pub fn merge_maps(a: &CongestionMap, b: &CongestionMap) -> CongestionMap {
    assert_eq!(a.ncells, b.ncells, "maps cover different worlds");
    let origin = a.origin.min(b.origin);
    let end = (a.origin + u64::from(a.horizon)).max(b.origin + u64::from(b.horizon));
    let horizon = (end - origin) as u32;
    let mut merged = CongestionMap::zero(a.ncells, origin, horizon);
    for offset in 0..horizon as usize {
        let slot = origin + offset as u64;
        for cell in 0..a.ncells {
            let va = lookup_raw(a, cell, slot);
            let vb = lookup_raw(b, cell, slot);
            merged.counts[offset * a.ncells + cell] = va.max(vb);
        }
    }
    merged
}

fn lookup_raw(map: &CongestionMap, cell: usize, slot: Slot) -> u16 {
    if slot < map.origin {
        return 0;
    }
    let offset = slot - map.origin;
    if offset >= u64::from(map.horizon) {
        return 0;
    }
    map.counts[offset as usize * map.ncells + cell]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Occupancy threshold kappa*: at or above it a state is penalized.
    pub kappa: u32,
    /// Penalty in slot-equivalents added per penalized state entered.
    pub congestion_penalty: u64,
    /// Expansion budget before the search gives up.
    pub max_expansions: usize,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            kappa: 3,
            congestion_penalty: 50,
            max_expansions: 20_000,
        }
    }
}

/// Penalty for entering `cell` at `slot` under the given map.
pub fn congestion_penalty(
    map: &CongestionMap,
    graph: &FactoryGraph,
    cell: Cell,
    slot: Slot,
    config: &RouterConfig,
) -> u64 {
    if map.occupancy(graph, cell, slot) >= config.kappa {
        config.congestion_penalty
    } else {
        0
    }
}

/// Admissible remaining-travel estimate under unit edge cost.
pub fn heuristic(v: Cell, goal: Cell) -> u32 {
    v.manhattan(goal)
}

/// A time-indexed navigation path. The AGV occupies `cells[i]` at slot
/// `start_slot + i`; `wait_at_goal` covers a predicted wait for product
/// preparation when the goal is a pickup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NavPath {
    pub start_slot: Slot,
    pub cells: Vec<Cell>,
    pub wait_at_goal: Slot,
}

impl NavPath {
    pub fn arrival(&self) -> Slot {
        self.start_slot + self.cells.len() as u64 - 1
    }

    /// Cell occupied at `slot`; clamps to the endpoints outside the window.
    pub fn position_at(&self, slot: Slot) -> Cell {
        if slot <= self.start_slot {
            return self.cells[0];
        }
        let i = (slot - self.start_slot) as usize;
        self.cells[i.min(self.cells.len() - 1)]
    }

    pub fn is_valid(&self) -> bool {
        !self.cells.is_empty()
            && self
                .cells
                .windows(2)
                .all(|w| w[0] == w[1] || w[0].manhattan(w[1]) == 1)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    /// Search space exhausted: no admissible path exists.
    #[error("no path from {start} to {goal}")]
    NoPath { start: Cell, goal: Cell },
    /// Expansion budget ran out before the search could conclude.
    #[error("expansion budget exhausted planning {start} to {goal}")]
    BudgetExhausted { start: Cell, goal: Cell },
    #[error("start cell {0} is not traversable")]
    InvalidStart(Cell),
    #[error("goal {0} has no service cell")]
    InvalidGoal(Cell),
}

/// One path-planning request.
#[derive(Debug, Clone, Copy)]
pub struct PlanQuery<'a> {
    pub graph: &'a FactoryGraph,
    pub start: Cell,
    pub goal: Cell,
    pub start_slot: Slot,
    pub map: &'a CongestionMap,
    pub config: &'a RouterConfig,
    /// Due slot of the goal node, when it has one.
    pub deadline: Option<Slot>,
    /// Permissible delay past the deadline before a path is rejected.
    pub soft_delay: Slot,
    /// Preparation completion slot when the goal is a pickup; the planner
    /// turns it into a predicted wait at the goal.
    pub prep_ready: Option<Slot>,
}

type State = (Cell, Slot);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct OpenEntry {
    phi: u64,
    h: u32,
    cell: Cell,
    slot: Slot,
}

impl Ord for OpenEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed for a min-heap; ties broken by lower h, then vertex
        // order, then earlier slot, keeping the search deterministic.
        other
            .phi
            .cmp(&self.phi)
            .then_with(|| other.h.cmp(&self.h))
            .then_with(|| (other.cell.y, other.cell.x).cmp(&(self.cell.y, self.cell.x)))
            .then_with(|| other.slot.cmp(&self.slot))
    }
}

impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Plan a time-indexed path from start to goal.
///
/// The search is optimal with respect to elapsed slots plus accumulated
/// congestion penalties. When the goal carries a deadline, arrivals beyond
/// deadline + soft_delay are rejected and the search continues; if no
/// conforming path exists the result is `NoPath`.
pub fn plan_path(q: &PlanQuery) -> Result<NavPath, PlanError> {
    let graph = q.graph;
    if !graph.contains(q.start) || !graph.is_traversable(q.start) {
        return Err(PlanError::InvalidStart(q.start));
    }
    let goal_cells = graph.service_cells(q.goal);
    if goal_cells.is_empty() {
        return Err(PlanError::InvalidGoal(q.goal));
    }
    let h_of = |c: Cell| goal_cells.iter().map(|&g| heuristic(c, g)).min().unwrap();
    let is_goal = |c: Cell| goal_cells.contains(&c);
    let latest_arrival = q.deadline.map(|d| d + q.soft_delay);

    // Static reachability distinguishes a proven NoPath from a budget stop.
    if !reachable(graph, q.start, &goal_cells) {
        return Err(PlanError::NoPath {
            start: q.start,
            goal: q.goal,
        });
    }

    let mut best_cost: HashMap<State, u64> = HashMap::new();
    let mut parents: HashMap<State, State> = HashMap::new();
    let mut open = BinaryHeap::new();
    let start_state = (q.start, q.start_slot);
    best_cost.insert(start_state, 0);
    open.push(OpenEntry {
        phi: u64::from(h_of(q.start)),
        h: h_of(q.start),
        cell: q.start,
        slot: q.start_slot,
    });

    let mut expansions = 0usize;
    while let Some(entry) = open.pop() {
        let state = (entry.cell, entry.slot);
        let cost = entry.phi - u64::from(entry.h);
        if best_cost.get(&state).map_or(true, |&c| cost > c) {
            continue; // superseded entry
        }
        if is_goal(entry.cell) {
            let arrival = entry.slot;
            let within_due = latest_arrival.map_or(true, |lim| arrival <= lim);
            if within_due {
                let wait_at_goal = q
                    .prep_ready
                    .map_or(0, |ready| ready.saturating_sub(arrival));
                return Ok(reconstruct(&parents, state, wait_at_goal));
            }
            continue;
        }
        expansions += 1;
        if expansions > q.config.max_expansions {
            return Err(PlanError::BudgetExhausted {
                start: q.start,
                goal: q.goal,
            });
        }

        let t_next = entry.slot + 1;
        let successors = graph
            .neighbors(entry.cell)
            .filter(|&n| graph.is_traversable(n))
            .chain(std::iter::once(entry.cell));
        for next in successors {
            let h = h_of(next);
            if let Some(lim) = latest_arrival {
                if t_next + u64::from(h) > lim {
                    continue;
                }
            }
            let theta = congestion_penalty(q.map, graph, next, t_next, q.config);
            let next_cost = cost + 1 + theta;
            let next_state = (next, t_next);
            if best_cost.get(&next_state).map_or(true, |&c| next_cost < c) {
                best_cost.insert(next_state, next_cost);
                parents.insert(next_state, state);
                open.push(OpenEntry {
                    phi: next_cost + u64::from(h),
                    h,
                    cell: next,
                    slot: t_next,
                });
            }
        }
    }
    Err(PlanError::NoPath {
        start: q.start,
        goal: q.goal,
    })
}

fn reachable(graph: &FactoryGraph, start: Cell, goals: &[Cell]) -> bool {
    if goals.contains(&start) {
        return true;
    }
    let mut seen = vec![false; graph.vertex_count()];
    seen[graph.index(start)] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(c) = queue.pop_front() {
        for n in graph.neighbors(c) {
            if graph.is_traversable(n) && !seen[graph.index(n)] {
                if goals.contains(&n) {
                    return true;
                }
                seen[graph.index(n)] = true;
                queue.push_back(n);
            }
        }
    }
    false
}

/// Walk the parent chain back from the goal state into a `NavPath`.
pub fn reconstruct(
    parents: &HashMap<State, State>,
    goal_state: State,
    wait_at_goal: Slot,
) -> NavPath {
    let mut cells = vec![goal_state.0];
    let mut cursor = goal_state;
    while let Some(&prev) = parents.get(&cursor) {
        assert!(
            prev.1 + 1 == cursor.1 && (prev.0 == cursor.0 || prev.0.manhattan(cursor.0) == 1),
            "broken parent chain at {:?} -> {:?}",
            prev,
            cursor
        );
        cells.push(prev.0);
        cursor = prev;
    }
    cells.reverse();
    let path = NavPath {
        start_slot: cursor.1,
        cells,
        wait_at_goal,
    };
    debug_assert!(path.is_valid());
    path
}

/// Congestion penalties the path accumulates from `from_slot` onward,
/// excluding its start state.
pub fn path_penalty(
    path: &NavPath,
    map: &CongestionMap,
    graph: &FactoryGraph,
    config: &RouterConfig,
    from_slot: Slot,
) -> u64 {
    let mut total = 0;
    for (i, &cell) in path.cells.iter().enumerate().skip(1) {
        let slot = path.start_slot + i as u64;
        if slot >= from_slot {
            total += congestion_penalty(map, graph, cell, slot, config);
        }
    }
    total
}

/// Elapsed slots plus accumulated penalties: the quantity the search
/// minimizes, reconstructed from a finished path.
pub fn path_cost(
    path: &NavPath,
    map: &CongestionMap,
    graph: &FactoryGraph,
    config: &RouterConfig,
) -> u64 {
    (path.cells.len() as u64 - 1) + path_penalty(path, map, graph, config, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LayoutSpec;

    fn open_grid(n: u16) -> FactoryGraph {
        FactoryGraph::build(n, n, &LayoutSpec::empty()).unwrap()
    }

    fn quick_query<'a>(
        graph: &'a FactoryGraph,
        start: Cell,
        goal: Cell,
        map: &'a CongestionMap,
        config: &'a RouterConfig,
    ) -> PlanQuery<'a> {
        PlanQuery {
            graph,
            start,
            goal,
            start_slot: 0,
            map,
            config,
            deadline: None,
            soft_delay: 0,
            prep_ready: None,
        }
    }

    #[test]
    fn heuristic_examples() {
        assert_eq!(heuristic(Cell::new(0, 0), Cell::new(0, 0)), 0);
        assert_eq!(heuristic(Cell::new(0, 0), Cell::new(3, 4)), 7);
    }

    #[test]
    fn penalty_threshold() {
        let g = open_grid(3);
        let config = RouterConfig::default();
        let mut map = CongestionMap::zero(g.vertex_count(), 0, 10);
        let c = Cell::new(1, 1);
        assert_eq!(congestion_penalty(&map, &g, c, 3, &config), 0);
        map.add(&g, c, 3, 2);
        assert_eq!(congestion_penalty(&map, &g, c, 3, &config), 0);
        map.add(&g, c, 3, 1);
        assert_eq!(congestion_penalty(&map, &g, c, 3, &config), 50);
        // Beyond the horizon the prediction is empty.
        assert_eq!(map.occupancy(&g, c, 10), 0);
        assert_eq!(congestion_penalty(&map, &g, c, 10, &config), 0);
    }

    #[test]
    fn trivial_start_is_goal() {
        let g = open_grid(3);
        let map = CongestionMap::zero(g.vertex_count(), 0, 10);
        let config = RouterConfig::default();
        let mut q = quick_query(&g, Cell::new(1, 1), Cell::new(1, 1), &map, &config);
        q.start_slot = 5;
        let path = plan_path(&q).unwrap();
        assert_eq!(path.cells, vec![Cell::new(1, 1)]);
        assert_eq!(path.arrival(), 5);
    }

    #[test]
    fn empty_map_matches_bfs() {
        let layout = LayoutSpec {
            production: vec![Cell::new(2, 2), Cell::new(2, 3), Cell::new(5, 5)],
            resupply: vec![],
        };
        let g = FactoryGraph::build(8, 8, &layout).unwrap();
        let dist = crate::grid::DistanceMatrix::new(&g);
        let map = CongestionMap::zero(g.vertex_count(), 0, 10);
        let config = RouterConfig::default();
        let mut rng = crate::rng::stream(11, "router-test");
        use rand::Rng;
        for _ in 0..40 {
            let pick = |rng: &mut rand_chacha::ChaCha8Rng| loop {
                let c = Cell::new(rng.gen_range(0..8), rng.gen_range(0..8));
                if g.is_traversable(c) {
                    return c;
                }
            };
            let start = pick(&mut rng);
            let goal = pick(&mut rng);
            let path = plan_path(&quick_query(&g, start, goal, &map, &config)).unwrap();
            let bfs = dist.between(&g, start, goal).unwrap();
            assert_eq!(path.cells.len() as u32 - 1, bfs, "{start} -> {goal}");
        }
    }

    #[test]
    fn congested_center_detour() {
        let g = open_grid(3);
        let config = RouterConfig::default();
        let mut map = CongestionMap::zero(g.vertex_count(), 0, 16);
        for slot in 0..16 {
            map.add(&g, Cell::new(1, 1), slot, config.kappa);
        }
        let q = quick_query(&g, Cell::new(0, 0), Cell::new(2, 2), &map, &config);
        let path = plan_path(&q).unwrap();
        assert_eq!(path.cells.len(), 5, "length 4 around either side");
        assert!(!path.cells.contains(&Cell::new(1, 1)));
        assert_eq!(path_penalty(&path, &map, &g, &config, 0), 0);
    }

    #[test]
    fn deadline_rejects_when_unreachable_in_time() {
        let g = open_grid(5);
        let map = CongestionMap::zero(g.vertex_count(), 0, 10);
        let config = RouterConfig::default();
        let mut q = quick_query(&g, Cell::new(0, 0), Cell::new(4, 4), &map, &config);
        q.deadline = Some(3);
        q.soft_delay = 2;
        // Best possible arrival is slot 8 > 5.
        assert!(matches!(plan_path(&q), Err(PlanError::NoPath { .. })));
        q.soft_delay = 5;
        assert!(plan_path(&q).is_ok());
    }

    #[test]
    fn budget_exhaustion_is_distinguished() {
        let g = open_grid(6);
        let mut map = CongestionMap::zero(g.vertex_count(), 0, 64);
        let config = RouterConfig {
            max_expansions: 8,
            ..RouterConfig::default()
        };
        // Flood everything so the search cannot finish cheaply.
        for slot in 0..64 {
            for cell in g.all_cells().collect::<Vec<_>>() {
                map.add(&g, cell, slot, 3);
            }
        }
        let q = quick_query(&g, Cell::new(0, 0), Cell::new(5, 5), &map, &config);
        assert!(matches!(plan_path(&q), Err(PlanError::BudgetExhausted { .. })));
    }

    #[test]
    fn pickup_wait_is_reported() {
        let g = open_grid(4);
        let map = CongestionMap::zero(g.vertex_count(), 0, 10);
        let config = RouterConfig::default();
        let mut q = quick_query(&g, Cell::new(0, 0), Cell::new(3, 0), &map, &config);
        q.prep_ready = Some(9);
        let path = plan_path(&q).unwrap();
        assert_eq!(path.arrival(), 3);
        assert_eq!(path.wait_at_goal, 6);
    }

    #[test]
    fn production_goal_served_from_neighbor() {
        let layout = LayoutSpec {
            production: vec![Cell::new(2, 1)],
            resupply: vec![],
        };
        let g = FactoryGraph::build(4, 4, &layout).unwrap();
        let map = CongestionMap::zero(g.vertex_count(), 0, 10);
        let config = RouterConfig::default();
        let q = quick_query(&g, Cell::new(0, 1), Cell::new(2, 1), &map, &config);
        let path = plan_path(&q).unwrap();
        let last = *path.cells.last().unwrap();
        assert_eq!(last.manhattan(Cell::new(2, 1)), 1);
        assert_eq!(path.cells.len(), 2, "stops at the adjacent service cell");
    }

    #[test]
    fn reconstruct_examples() {
        let parents: HashMap<State, State> = HashMap::new();
        let single = reconstruct(&parents, (Cell::new(2, 2), 7), 0);
        assert_eq!(single.cells, vec![Cell::new(2, 2)]);
        assert_eq!(single.arrival(), 7);

        let mut parents: HashMap<State, State> = HashMap::new();
        parents.insert((Cell::new(1, 0), 1), (Cell::new(0, 0), 0));
        parents.insert((Cell::new(1, 1), 2), (Cell::new(1, 0), 1));
        let path = reconstruct(&parents, (Cell::new(1, 1), 2), 0);
        assert_eq!(
            path.cells,
            vec![Cell::new(0, 0), Cell::new(1, 0), Cell::new(1, 1)]
        );
        assert_eq!(path.start_slot, 0);
        assert_eq!(path.arrival(), 2);
    }

    #[test]
    fn merge_identity_and_idempotence() {
        let g = open_grid(3);
        let zero = CongestionMap::zero(g.vertex_count(), 0, 8);
        let mut m = CongestionMap::zero(g.vertex_count(), 0, 8);
        m.add(&g, Cell::new(1, 2), 3, 2);
        m.add(&g, Cell::new(0, 0), 0, 1);
        assert_eq!(merge_maps(&m, &zero), m);
        assert_eq!(merge_maps(&m, &m), m);
    }

    #[test]
    fn merge_aligns_absolute_slots() {
        let g = open_grid(3);
        let mut a = CongestionMap::zero(g.vertex_count(), 0, 4);
        let mut b = CongestionMap::zero(g.vertex_count(), 2, 4);
        a.add(&g, Cell::new(1, 1), 3, 1);
        b.add(&g, Cell::new(1, 1), 3, 2);
        b.add(&g, Cell::new(2, 2), 5, 4);
        let m = merge_maps(&a, &b);
        assert_eq!(m.occupancy(&g, Cell::new(1, 1), 3), 2);
        assert_eq!(m.occupancy(&g, Cell::new(2, 2), 5), 4);
        assert_eq!(m.origin(), 0);
        assert_eq!(m.horizon(), 6);
    }
}
