//! Factory world model: a rectangular grid of cells with 4-neighbor
//! adjacency, cell roles, and precomputed shortest-path distances.
//!
//! Production robots occupy their cells and cannot be driven through; an
//! AGV services a production cell from any adjacent traversable cell.
//! Resupply cells are ordinary traversable cells an AGV parks on to refill.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One grid cell, addressed by column `x` and row `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: u16,
    pub y: u16,
}

impl Cell {
    pub fn new(x: u16, y: u16) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> u32 {
        let dx = (i32::from(self.x) - i32::from(other.x)).unsigned_abs();
        let dy = (i32::from(self.y) - i32::from(other.y)).unsigned_abs();
        dx + dy
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// What occupies a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Aisle,
    Production,
    Resupply,
}

/// Placement of production and resupply cells inside the grid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayoutSpec {
    pub production: Vec<Cell>,
    pub resupply: Vec<Cell>,
}

impl LayoutSpec {
    /// All-aisle world.
    pub fn empty() -> Self {
        LayoutSpec::default()
    }

    /// Production robots in columns separated by single-width aisles, with
    /// resupply bays along the west wall. Top and bottom rows stay clear so
    /// the aisle network is always connected.
    pub fn default_columns(width: u16, height: u16) -> Self {
        let mut production = Vec::new();
        let mut x = 2;
        while x + 2 < width {
            for y in 1..height.saturating_sub(1) {
                production.push(Cell::new(x, y));
            }
            x += 2;
        }
        let mut resupply = Vec::new();
        let mut y = 0;
        while y < height {
            resupply.push(Cell::new(0, y));
            y += 3;
        }
        LayoutSpec {
            production,
            resupply,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("grid must be at least 2x2, got {width}x{height}")]
    TooSmall { width: u16, height: u16 },
    #[error("layout cell {0} is outside the {1}x{2} grid")]
    OutOfBounds(Cell, u16, u16),
    #[error("cell {0} is assigned more than one role")]
    OverlappingRoles(Cell),
    #[error("world is disconnected: {0}")]
    DisconnectedWorld(String),
}

/// The factory grid world.
#[derive(Debug, Clone)]
pub struct FactoryGraph {
    width: u16,
    height: u16,
    roles: Vec<Role>,
    production: Vec<Cell>,
    resupply: Vec<Cell>,
}

impl FactoryGraph {
    /// Build and validate a world. Deterministic for identical inputs.
    pub fn build(width: u16, height: u16, layout: &LayoutSpec) -> Result<Self, GridError> {
        if width == 0 || height == 0 || usize::from(width) * usize::from(height) < 2 {
            return Err(GridError::TooSmall { width, height });
        }
        let mut roles = vec![Role::Aisle; usize::from(width) * usize::from(height)];
        let in_bounds = |c: Cell| c.x < width && c.y < height;
        for &c in &layout.production {
            if !in_bounds(c) {
                return Err(GridError::OutOfBounds(c, width, height));
            }
            let idx = usize::from(c.y) * usize::from(width) + usize::from(c.x);
            if roles[idx] != Role::Aisle {
                return Err(GridError::OverlappingRoles(c));
            }
            roles[idx] = Role::Production;
        }
        for &c in &layout.resupply {
            if !in_bounds(c) {
                return Err(GridError::OutOfBounds(c, width, height));
            }
            let idx = usize::from(c.y) * usize::from(width) + usize::from(c.x);
            if roles[idx] != Role::Aisle {
                return Err(GridError::OverlappingRoles(c));
            }
            roles[idx] = Role::Resupply;
        }

        let mut production: Vec<Cell> = layout.production.clone();
        production.sort();
        production.dedup();
        let mut resupply: Vec<Cell> = layout.resupply.clone();
        resupply.sort();
        resupply.dedup();

        let graph = FactoryGraph {
            width,
            height,
            roles,
            production,
            resupply,
        };

        // Every production cell must be serviceable from some adjacent
        // traversable cell, otherwise its tasks can never be reached.
        for &p in &graph.production {
            if graph.neighbors(p).all(|n| !graph.is_traversable(n)) {
                return Err(GridError::DisconnectedWorld(format!(
                    "production cell {p} has no traversable neighbor"
                )));
            }
        }
        Ok(graph)
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn vertex_count(&self) -> usize {
        usize::from(self.width) * usize::from(self.height)
    }

    /// Number of 4-neighbor adjacencies in the grid.
    pub fn edge_count(&self) -> usize {
        let w = usize::from(self.width);
        let h = usize::from(self.height);
        h * (w - 1) + w * (h - 1)
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x < self.width && c.y < self.height
    }

    pub fn index(&self, c: Cell) -> usize {
        debug_assert!(self.contains(c));
        usize::from(c.y) * usize::from(self.width) + usize::from(c.x)
    }

    pub fn role(&self, c: Cell) -> Role {
        self.roles[self.index(c)]
    }

    /// AGVs may occupy aisle and resupply cells, not production cells.
    pub fn is_traversable(&self, c: Cell) -> bool {
        self.role(c) != Role::Production
    }

    pub fn production_nodes(&self) -> &[Cell] {
        &self.production
    }

    pub fn resupply_nodes(&self) -> &[Cell] {
        &self.resupply
    }

    /// In-bounds 4-neighbors, in N, S, E, W order.
    pub fn neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        let (x, y) = (i32::from(c.x), i32::from(c.y));
        [(0, 1), (0, -1), (1, 0), (-1, 0)]
            .into_iter()
            .filter_map(move |(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < i32::from(self.width) && ny < i32::from(self.height)
                {
                    Some(Cell::new(nx as u16, ny as u16))
                } else {
                    None
                }
            })
    }

    /// Cells an AGV may stand on to act at `target`: the cell itself when
    /// traversable, otherwise its traversable neighbors.
    pub fn service_cells(&self, target: Cell) -> Vec<Cell> {
        if self.is_traversable(target) {
            vec![target]
        } else {
            self.neighbors(target)
                .filter(|&n| self.is_traversable(n))
                .collect()
        }
    }

    /// Whether all traversable cells form a single connected component.
    /// The default layouts guarantee this; scenario validation requires it.
    pub fn traversable_connected(&self) -> bool {
        let start = match self.all_cells().find(|&c| self.is_traversable(c)) {
            Some(c) => c,
            None => return false,
        };
        let mut seen = vec![false; self.vertex_count()];
        let mut queue = VecDeque::from([start]);
        seen[self.index(start)] = true;
        let mut count = 1usize;
        while let Some(c) = queue.pop_front() {
            for n in self.neighbors(c) {
                if self.is_traversable(n) && !seen[self.index(n)] {
                    seen[self.index(n)] = true;
                    count += 1;
                    queue.push_back(n);
                }
            }
        }
        count == self.all_cells().filter(|&c| self.is_traversable(c)).count()
    }

    pub fn all_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let (w, h) = (self.width, self.height);
        (0..h).flat_map(move |y| (0..w).map(move |x| Cell::new(x, y)))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no traversable route between {from} and {to}")]
pub struct Unreachable {
    pub from: Cell,
    pub to: Cell,
}

/// All-pairs shortest-path travel times over the traversable subgraph,
/// computed by BFS (unit edge cost: one slot per step).
///
/// Distances to or from a production cell are resolved through its best
/// traversable neighbor, matching the service-from-adjacent rule. Both the
/// raw and the resolved tables are precomputed so lookups are O(1); the
/// solver calls them in its innermost loop.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    ncells: usize,
    /// dist[src * ncells + dst] over traversable cells, u32::MAX when
    /// unreachable; only rows for traversable sources are populated.
    dist: Vec<u32>,
    /// Service-resolved distances between any two key nodes.
    resolved: Vec<u32>,
    /// Per (from, to): the resupply cell minimizing from->u->to and that
    /// detour length; u16::MAX cell index when no resupply is reachable.
    resupply_choice: Vec<u16>,
    resupply_detour: Vec<u32>,
}

impl DistanceMatrix {
    pub fn new(graph: &FactoryGraph) -> Self {
        let ncells = graph.vertex_count();
        let mut dist = vec![u32::MAX; ncells * ncells];
        for src in graph.all_cells() {
            if !graph.is_traversable(src) {
                continue;
            }
            let row = graph.index(src) * ncells;
            let mut queue = VecDeque::from([src]);
            dist[row + graph.index(src)] = 0;
            while let Some(c) = queue.pop_front() {
                let d = dist[row + graph.index(c)];
                for n in graph.neighbors(c) {
                    if graph.is_traversable(n) && dist[row + graph.index(n)] == u32::MAX {
                        dist[row + graph.index(n)] = d + 1;
                        queue.push_back(n);
                    }
                }
            }
        }

        let service: Vec<Vec<Cell>> = graph.all_cells().map(|c| graph.service_cells(c)).collect();
        let mut resolved = vec![u32::MAX; ncells * ncells];
        for from in graph.all_cells() {
            let fi = graph.index(from);
            for to in graph.all_cells() {
                let ti = graph.index(to);
                let mut best = u32::MAX;
                for f in &service[fi] {
                    for t in &service[ti] {
                        let d = dist[graph.index(*f) * ncells + graph.index(*t)];
                        best = best.min(d);
                    }
                }
                resolved[fi * ncells + ti] = best;
            }
        }

        let mut resupply_choice = vec![u16::MAX; ncells * ncells];
        let mut resupply_detour = vec![u32::MAX; ncells * ncells];
        if !graph.resupply_nodes().is_empty() {
            for from in graph.all_cells() {
                let fi = graph.index(from);
                for to in graph.all_cells() {
                    let ti = graph.index(to);
                    let mut best: Option<(u32, u16)> = None;
                    for &u in graph.resupply_nodes() {
                        let ui = graph.index(u);
                        let to_u = resolved[fi * ncells + ui];
                        let onward = resolved[ui * ncells + ti];
                        if to_u == u32::MAX || onward == u32::MAX {
                            continue;
                        }
                        let detour = to_u + onward;
                        if best.map_or(true, |(cost, _)| detour < cost) {
                            best = Some((detour, ui as u16));
                        }
                    }
                    if let Some((detour, u)) = best {
                        resupply_choice[fi * ncells + ti] = u;
                        resupply_detour[fi * ncells + ti] = detour;
                    }
                }
            }
        }
        DistanceMatrix {
            ncells,
            dist,
            resolved,
            resupply_choice,
            resupply_detour,
        }
    }

    /// Travel time between two key nodes, resolving production endpoints
    /// through their nearest traversable service cell.
    pub fn travel(&self, graph: &FactoryGraph, from: Cell, to: Cell) -> Result<u32, Unreachable> {
        let d = self.resolved[graph.index(from) * self.ncells + graph.index(to)];
        if d == u32::MAX {
            Err(Unreachable { from, to })
        } else {
            Ok(d)
        }
    }

    /// Best resupply stop on the way from `from` to `to`: the cell and the
    /// total from->resupply->to travel time.
    pub fn resupply_via(
        &self,
        graph: &FactoryGraph,
        from: Cell,
        to: Cell,
    ) -> Option<(Cell, u32)> {
        let i = graph.index(from) * self.ncells + graph.index(to);
        let u = self.resupply_choice[i];
        if u == u16::MAX {
            return None;
        }
        let w = usize::from(graph.width());
        let cell = Cell::new(u as usize as u16 % w as u16, (u as usize / w) as u16);
        Some((cell, self.resupply_detour[i]))
    }

    /// BFS distance between two traversable cells, without service-cell
    /// resolution.
    pub fn between(
        &self,
        graph: &FactoryGraph,
        from: Cell,
        to: Cell,
    ) -> Result<u32, Unreachable> {
        let d = self.dist[graph.index(from) * self.ncells + graph.index(to)];
        if d == u32::MAX {
            Err(Unreachable { from, to })
        } else {
            Ok(d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_grid_all_aisle() {
        let g = FactoryGraph::build(2, 2, &LayoutSpec::empty()).unwrap();
        assert_eq!(g.vertex_count(), 4);
        assert_eq!(g.edge_count(), 4);
        assert!(g.all_cells().all(|c| g.role(c) == Role::Aisle));
    }

    #[test]
    fn paper_scale_world() {
        let g = FactoryGraph::build(10, 10, &LayoutSpec::default_columns(10, 10)).unwrap();
        assert_eq!(g.vertex_count(), 100);
        assert!(!g.production_nodes().is_empty());
        assert!(!g.resupply_nodes().is_empty());
        assert!(g.traversable_connected());
        // Production columns at x = 2, 4, 6 over rows 1..=8.
        assert_eq!(g.production_nodes().len(), 24);
    }

    #[test]
    fn three_by_one_path_graph() {
        let layout = LayoutSpec {
            production: vec![Cell::new(1, 0)],
            resupply: vec![],
        };
        let g = FactoryGraph::build(3, 1, &layout).unwrap();
        assert_eq!(g.vertex_count(), 3);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.role(Cell::new(1, 0)), Role::Production);
        // Path-graph adjacency: the mid cell links both ends, ends link once.
        assert_eq!(g.neighbors(Cell::new(1, 0)).count(), 2);
        assert_eq!(g.neighbors(Cell::new(0, 0)).count(), 1);
        assert_eq!(g.neighbors(Cell::new(2, 0)).count(), 1);
    }

    #[test]
    fn degenerate_grids_rejected() {
        assert!(matches!(
            FactoryGraph::build(1, 1, &LayoutSpec::empty()).unwrap_err(),
            GridError::TooSmall { .. }
        ));
        assert!(matches!(
            FactoryGraph::build(0, 5, &LayoutSpec::empty()).unwrap_err(),
            GridError::TooSmall { .. }
        ));
    }

    #[test]
    fn overlapping_roles_rejected() {
        let layout = LayoutSpec {
            production: vec![Cell::new(1, 1)],
            resupply: vec![Cell::new(1, 1)],
        };
        assert_eq!(
            FactoryGraph::build(3, 3, &layout).unwrap_err(),
            GridError::OverlappingRoles(Cell::new(1, 1))
        );
    }

    #[test]
    fn unserviceable_production_rejected() {
        let layout = LayoutSpec {
            production: vec![
                Cell::new(0, 0),
                Cell::new(1, 0),
                Cell::new(0, 1),
                Cell::new(1, 1),
            ],
            resupply: vec![],
        };
        assert!(matches!(
            FactoryGraph::build(2, 2, &layout).unwrap_err(),
            GridError::DisconnectedWorld(_)
        ));
    }

    #[test]
    fn distances_route_around_production() {
        let layout = LayoutSpec {
            production: vec![Cell::new(1, 0), Cell::new(1, 1)],
            resupply: vec![],
        };
        let g = FactoryGraph::build(3, 3, &layout).unwrap();
        let d = DistanceMatrix::new(&g);
        // (0,0) -> (2,0) must detour through row 2.
        assert_eq!(d.travel(&g, Cell::new(0, 0), Cell::new(2, 0)).unwrap(), 6);
        // Service distance to the production cell itself: nearest neighbor.
        assert_eq!(d.travel(&g, Cell::new(0, 0), Cell::new(1, 0)).unwrap(), 0);
        assert_eq!(d.travel(&g, Cell::new(0, 2), Cell::new(1, 1)).unwrap(), 1);
    }
}
