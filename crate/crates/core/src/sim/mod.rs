//! The closed scheduling loop: uplink reporting, edge-side congestion-map
//! construction, downlink broadcast, distributed conflict-aware path
//! execution, and reconfiguration on task arrival.
//!
//! Four operating modes share one implementation. Uncontrolled AGVs plan on
//! empty maps and collide; local-only AGVs rely on sensing plus right-of-way
//! with extra safety stays; the communication modes run the full loop, the
//! ideal one with guaranteed delivery.

pub mod conflict;
pub mod events;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agv::{AgvId, AgvSnapshot, Heading, RouteStop};
use crate::assignment::materialize_route;
use crate::config::{Mode, ScenarioConfig, SimSection};
use crate::grid::{Cell, DistanceMatrix, FactoryGraph};
use crate::mrta::{self, TaskMap};
use crate::netsim::{
    sample_channel_set, schedule_traffic, simulate_slot, ChannelConfig, TrafficMode,
    UplinkAttempt,
};
use crate::router::{
    merge_maps, plan_path, CongestionMap, NavPath, PlanError, PlanQuery, RouterConfig,
};
use crate::task::{LineId, TaskId, TransportTask};
use crate::timing::{preparation_time, tardiness, Slot};
use crate::{rng, task};

use conflict::{detect_conflicts, resolve_right_of_way, Conflict, Decision, Move};
use events::SlotRecord;
use metrics::Metrics;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Gen(#[from] crate::task::GenError),
    #[error(transparent)]
    Assign(#[from] crate::mrta::MrtaError),
    #[error(transparent)]
    Route(#[from] crate::assignment::RouteError),
    #[error(transparent)]
    Channel(#[from] crate::netsim::ChannelError),
    #[error("event log write failed: {0}")]
    Io(#[from] std::io::Error),
}

/// What one AGV perceives: its own cell plus every AGV within Manhattan
/// distance `range`, with their last actions, and the visible vertices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub own: Cell,
    pub neighbors: Vec<Neighbor>,
    pub visible: Vec<Cell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub id: AgvId,
    pub location: Cell,
    pub last_action: Heading,
}

/// Partial observability: exactly the AGVs within the sensing range and
/// nothing outside it.
pub fn local_observation(
    agvs: &[(AgvId, Cell, Heading)],
    graph: &FactoryGraph,
    own: AgvId,
    range: u16,
) -> Observation {
    let own_cell = agvs
        .iter()
        .find(|(id, _, _)| *id == own)
        .map(|(_, c, _)| *c)
        .expect("unknown AGV id");
    let neighbors = agvs
        .iter()
        .filter(|(id, c, _)| *id != own && c.manhattan(own_cell) <= u32::from(range))
        .map(|&(id, location, last_action)| Neighbor {
            id,
            location,
            last_action,
        })
        .collect();
    let visible = graph
        .all_cells()
        .filter(|c| c.manhattan(own_cell) <= u32::from(range))
        .collect();
    Observation {
        own: own_cell,
        neighbors,
        visible,
    }
}

/// Predict near-future occupancy from one observation: each neighbor holds
/// its cell now and its last action is extrapolated ahead a few slots.
pub fn local_map(
    obs: &Observation,
    graph: &FactoryGraph,
    origin: Slot,
    extrapolate: u32,
) -> CongestionMap {
    let horizon = extrapolate + 1;
    let mut map = CongestionMap::zero(graph.vertex_count(), origin, horizon);
    for n in &obs.neighbors {
        map.add(graph, n.location, origin, 1);
        let (dx, dy): (i32, i32) = match n.last_action {
            Heading::North => (0, 1),
            Heading::South => (0, -1),
            Heading::East => (1, 0),
            Heading::West => (-1, 0),
            Heading::Stay => (0, 0),
        };
        let mut pos = n.location;
        for step in 1..=extrapolate {
            let nx = i32::from(pos.x) + dx;
            let ny = i32::from(pos.y) + dy;
            if nx < 0 || ny < 0 {
                break;
            }
            let next = Cell::new(nx as u16, ny as u16);
            if !graph.contains(next) || !graph.is_traversable(next) {
                // Blocked extrapolation: assume it lingers where it is.
                map.add(graph, pos, origin + u64::from(step), 1);
                continue;
            }
            pos = next;
            map.add(graph, pos, origin + u64::from(step), 1);
        }
    }
    map
}

/// The latest successfully uplinked report of one AGV.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub slot: Slot,
    pub location: Cell,
    pub path: Option<NavPath>,
}

/// Edge-side map construction: counts, per future slot within the horizon,
/// how many registered routes stand on each vertex. Entries older than the
/// staleness cap are excluded; a report without a route predicts the AGV
/// parked at its reported cell.
pub fn build_global_map(
    registry: &BTreeMap<AgvId, RegistryEntry>,
    graph: &FactoryGraph,
    now: Slot,
    horizon: u32,
    staleness_cap: Slot,
) -> CongestionMap {
    let mut map = CongestionMap::zero(graph.vertex_count(), now, horizon);
    for entry in registry.values() {
        if now.saturating_sub(entry.slot) > staleness_cap {
            continue;
        }
        for offset in 0..u64::from(horizon) {
            let position = match &entry.path {
                Some(p) => p.position_at(now + offset),
                None => entry.location,
            };
            map.add(graph, position, now + offset, 1);
        }
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskPhase {
    /// Generated but not yet released by its reconfiguration wave.
    Future,
    Open,
    PickedUp,
    Delivered(Slot),
}

#[derive(Debug, Clone)]
struct TaskState {
    task: TransportTask,
    phase: TaskPhase,
    /// Realized preparation completion, once its inputs are known.
    prep_ready: Option<Slot>,
}

#[derive(Debug, Clone)]
struct SimAgv {
    id: AgvId,
    location: Cell,
    payload: u32,
    capacity: u32,
    route: Vec<RouteStop>,
    cursor: usize,
    carrying: Option<TaskId>,
    product: u32,
    path: Option<NavPath>,
    last_action: Heading,
    last_global: Option<(Slot, Arc<CongestionMap>)>,
    yield_until: Slot,
    stalled: u64,
    waiting_since: Option<Slot>,
    boost_next_plan: bool,
    replan: bool,
    last_plan: Slot,
}

impl SimAgv {
    fn snapshot(&self) -> AgvSnapshot {
        AgvSnapshot {
            id: self.id,
            location: self.location,
            payload: self.payload,
            capacity: self.capacity,
            carrying: self.carrying,
        }
    }
}

/// One scenario run in progress.
pub struct Simulation {
    mode: Mode,
    graph: FactoryGraph,
    dist: DistanceMatrix,
    router_cfg: RouterConfig,
    channel: ChannelConfig,
    sim_cfg: SimSection,
    traffic: TrafficMode,
    horizon: u32,
    staleness_cap: Slot,
    slot_cap: Slot,
    guaranteed: bool,
    sensing: u16,

    slot: Slot,
    /// Traversable cells that are neither adjacent to a production robot
    /// nor resupply bays: where idle AGVs go to keep loading zones clear.
    parking: Vec<Cell>,
    agvs: Vec<SimAgv>,
    tasks: BTreeMap<TaskId, TaskState>,
    /// Per production node: the slot its robot finishes its current job.
    node_robot_free: BTreeMap<Cell, Slot>,
    upstream: BTreeMap<(LineId, u32), TaskId>,
    waves: Vec<(Slot, Vec<TaskId>)>,
    next_wave: usize,
    sa_params: crate::mrta::SaParams,
    registry: BTreeMap<AgvId, RegistryEntry>,
    reported_since_broadcast: BTreeSet<AgvId>,
    last_broadcast_slot: Option<Slot>,
    rng_channel: ChaCha8Rng,
    seed: u64,

    metrics: Metrics,
    tardiness_sum: u64,
    fallback_agv_slots: u64,
    agv_slots: u64,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> Result<Self, SimError> {
        cfg.validate()?;
        let graph = cfg.build_graph()?;
        let dist = DistanceMatrix::new(&graph);

        // Pre-generate every wave so a run is a pure function of the seed.
        let mut tasks: BTreeMap<TaskId, TaskState> = BTreeMap::new();
        let mut waves = Vec::new();
        for wave in 0..cfg.tasks.waves {
            let params = cfg.wave_params(wave);
            let mut wave_rng = rng::indexed_stream(seed, "tasks", u64::from(wave));
            let batch = if params.lines == 0 {
                Vec::new()
            } else {
                task::generate_tasks(&params, &graph, &dist, &mut wave_rng)?
            };
            let ids: Vec<TaskId> = batch.iter().map(|t| t.id).collect();
            for t in batch {
                tasks.insert(
                    t.id,
                    TaskState {
                        task: t,
                        phase: TaskPhase::Future,
                        prep_ready: None,
                    },
                );
            }
            waves.push((params.release_slot, ids));
        }
        let upstream = tasks
            .values()
            .map(|s| ((s.task.line, s.task.priority), s.task.id))
            .collect();

        // Spawn AGVs on pinned cells, or distinct seeded traversable ones.
        let mut spawn_cells: Vec<Cell> = graph
            .all_cells()
            .filter(|&c| graph.is_traversable(c))
            .collect();
        let mut spawn_rng = rng::stream(seed, "spawn");
        let mut agvs = Vec::with_capacity(cfg.agv.count as usize);
        for i in 0..cfg.agv.count {
            use rand::Rng;
            let location = if let Some(&[x, y]) = cfg.agv.spawn.get(i as usize) {
                Cell::new(x, y)
            } else {
                let pick = spawn_rng.gen_range(0..spawn_cells.len());
                spawn_cells.swap_remove(pick)
            };
            agvs.push(SimAgv {
                id: AgvId(i),
                location,
                payload: cfg.agv.capacity,
                capacity: cfg.agv.capacity,
                route: Vec::new(),
                cursor: 0,
                carrying: None,
                product: 0,
                path: None,
                last_action: Heading::Stay,
                last_global: None,
                yield_until: 0,
                stalled: 0,
                waiting_since: None,
                boost_next_plan: false,
                replan: false,
                last_plan: 0,
            });
        }

        let parking: Vec<Cell> = graph
            .all_cells()
            .filter(|&c| {
                graph.is_traversable(c)
                    && graph.role(c) != crate::grid::Role::Resupply
                    && !graph
                        .neighbors(c)
                        .any(|n| graph.role(n) == crate::grid::Role::Production)
            })
            .collect();

        let metrics = Metrics {
            tasks_total: tasks.len() as u64,
            ..Metrics::default()
        };
        Ok(Simulation {
            mode: cfg.mode.kind,
            router_cfg: cfg.router_config(),
            channel: cfg.channel,
            sim_cfg: cfg.sim.clone(),
            traffic: cfg.sim.traffic,
            horizon: cfg.router.horizon,
            staleness_cap: cfg.staleness_cap(),
            slot_cap: cfg.run.slot_cap,
            guaranteed: cfg.mode.kind.delivery_guaranteed() || cfg.channel.guaranteed,
            sensing: cfg.agv.sensing_range,
            graph,
            dist,
            slot: 0,
            parking,
            agvs,
            tasks,
            node_robot_free: BTreeMap::new(),
            upstream,
            waves,
            next_wave: 0,
            sa_params: cfg.sa_params(),
            registry: BTreeMap::new(),
            reported_since_broadcast: BTreeSet::new(),
            last_broadcast_slot: None,
            rng_channel: rng::stream(seed, "channel"),
            seed,
            metrics,
            tardiness_sum: 0,
            fallback_agv_slots: 0,
            agv_slots: 0,
        })
    }

    pub fn slot(&self) -> Slot {
        self.slot
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    fn done(&self) -> bool {
        self.next_wave >= self.waves.len()
            && self
                .tasks
                .values()
                .all(|t| matches!(t.phase, TaskPhase::Delivered(_)))
    }

    /// Run to completion or the slot cap; returns final metrics.
    pub fn run(&mut self, mut sink: Option<&mut dyn std::io::Write>) -> Result<Metrics, SimError> {
        while !self.done() && self.slot < self.slot_cap {
            let record = self.step()?;
            if let Some(w) = sink.as_deref_mut() {
                events::write_record(w, &record)?;
            }
        }
        self.metrics.timed_out = !self.done();
        self.metrics.slots_run = self.slot;
        let completed = self.metrics.completions.len() as u64;
        self.metrics.tasks_completed = completed;
        self.metrics.mean_tardiness = if completed > 0 {
            self.tardiness_sum as f64 / completed as f64
        } else {
            0.0
        };
        self.metrics.fallback_fraction = if self.agv_slots > 0 {
            self.fallback_agv_slots as f64 / self.agv_slots as f64
        } else {
            0.0
        };
        self.metrics.finalize();
        Ok(self.metrics.clone())
    }

    /// Advance one slot through the full phase sequence.
    pub fn step(&mut self) -> Result<SlotRecord, SimError> {
        let slot = self.slot;
        let mut record = SlotRecord {
            slot,
            positions: Vec::new(),
            pickups: Vec::new(),
            deliveries: Vec::new(),
            conflicts: 0,
            collisions: 0,
            uplink_delivered: 0,
            map_broadcast: false,
        };

        // Reconfiguration: release due waves and re-solve the assignment.
        let mut reconfigured = false;
        while self.next_wave < self.waves.len() && self.waves[self.next_wave].0 <= slot {
            let (_, ids) = self.waves[self.next_wave].clone();
            for id in ids {
                self.tasks.get_mut(&id).unwrap().phase = TaskPhase::Open;
            }
            self.next_wave += 1;
            reconfigured = true;
        }
        if reconfigured {
            self.resolve_preps();
            self.reassign()?;
        }

        // Uplink and downlink phases run only when the loop communicates.
        if self.mode.communicates() {
            record.uplink_delivered = self.uplink_phase()?;
            if slot % u64::from(self.channel.interval) == 0 {
                self.broadcast_phase();
                record.map_broadcast = true;
            }
        }

        // Distributed decisions over an immutable position snapshot.
        let states: Vec<(AgvId, Cell, Heading)> = self
            .agvs
            .iter()
            .map(|a| (a.id, a.location, a.last_action))
            .collect();
        let mut moves = Vec::with_capacity(self.agvs.len());
        for i in 0..self.agvs.len() {
            let to = self.decide(i, &states);
            moves.push(Move {
                agv: self.agvs[i].id,
                from: self.agvs[i].location,
                to,
            });
        }

        // Conflict resolution by right-of-way in the controlled modes.
        if self.mode.controlled() {
            record.conflicts = self.resolve_conflicts(&mut moves);
            self.metrics.conflicts += record.conflicts;
        }

        // Execute moves.
        let extra_collisions = self.execute_moves(&moves);
        record.collisions = extra_collisions;
        self.metrics.collisions += extra_collisions;

        // Arrivals: pickups, deliveries, resupply.
        self.process_arrivals(&mut record);
        self.resolve_preps();

        // Safety accounting and bookkeeping.
        self.slot_bookkeeping();
        record.positions = self
            .agvs
            .iter()
            .map(|a| (a.id.0, a.location.x, a.location.y))
            .collect();

        self.slot += 1;
        Ok(record)
    }

    /// Re-solve the assignment over open tasks, keeping picked-up tasks
    /// pinned to their carriers, and hand the new routes to the AGVs.
    fn reassign(&mut self) -> Result<(), SimError> {
        let mut solver_tasks: TaskMap = BTreeMap::new();
        for state in self.tasks.values() {
            match state.phase {
                TaskPhase::Open | TaskPhase::PickedUp => {
                    solver_tasks.insert(state.task.id, state.task.clone());
                }
                _ => {}
            }
        }
        if solver_tasks.is_empty() {
            for agv in &mut self.agvs {
                agv.route.clear();
                agv.cursor = 0;
                agv.path = None;
            }
            return Ok(());
        }
        let snapshots: Vec<AgvSnapshot> = self.agvs.iter().map(SimAgv::snapshot).collect();
        let mut sa_rng = rng::indexed_stream(self.seed, "sa", u64::from(self.next_wave as u32));
        let assignment = mrta::sa_solve(
            &solver_tasks,
            &snapshots,
            &self.graph,
            &self.dist,
            &self.sa_params,
            &mut sa_rng,
        )?;
        for agv in &mut self.agvs {
            let mut route = assignment.routes.get(&agv.id).cloned().unwrap_or_default();
            // The carried delivery is materialized at the front; the AGV
            // keeps executing it seamlessly.
            agv.cursor = 0;
            agv.route = std::mem::take(&mut route);
            agv.path = None;
            agv.replan = true;
            agv.waiting_since = None;
        }
        Ok(())
    }

    fn uplink_phase(&mut self) -> Result<u64, SimError> {
        let ids: Vec<AgvId> = self.agvs.iter().map(|a| a.id).collect();
        let attempting = schedule_traffic(
            &ids,
            self.slot,
            &self.channel,
            self.traffic,
            &mut self.rng_channel,
        );
        self.metrics.uplink_attempts += attempting.len() as u64;
        let delivered: Vec<AgvId> = if self.guaranteed {
            attempting
        } else {
            let attempts: Vec<UplinkAttempt> = attempting
                .iter()
                .map(|&agv| UplinkAttempt {
                    agv,
                    channels: sample_channel_set(
                        self.channel.channels,
                        self.channel.selected,
                        &mut self.rng_channel,
                    ),
                })
                .collect();
            simulate_slot(&attempts, &self.channel, &mut self.rng_channel)?.delivered
        };
        self.metrics.uplink_delivered += delivered.len() as u64;
        for id in &delivered {
            let agv = &self.agvs[id.0 as usize];
            self.registry.insert(
                *id,
                RegistryEntry {
                    slot: self.slot,
                    location: agv.location,
                    path: agv.path.clone(),
                },
            );
            self.reported_since_broadcast.insert(*id);
        }
        Ok(delivered.len() as u64)
    }

    /// Build the global map and hand it to the AGVs that successfully
    /// reported since the previous broadcast.
    fn broadcast_phase(&mut self) {
        let map = Arc::new(build_global_map(
            &self.registry,
            &self.graph,
            self.slot,
            self.horizon,
            self.staleness_cap,
        ));
        let recipients: Vec<AgvId> = self.reported_since_broadcast.iter().copied().collect();
        self.reported_since_broadcast.clear();
        for id in recipients {
            self.agvs[id.0 as usize].last_global = Some((self.slot, map.clone()));
        }
        self.last_broadcast_slot = Some(self.slot);
    }

    /// One AGV's intended move for this slot.
    fn decide(&mut self, i: usize, states: &[(AgvId, Cell, Heading)]) -> Cell {
        let slot = self.slot;
        let location = self.agvs[i].location;

        if self.agvs[i].yield_until > slot {
            self.metrics.forced_wait_slots += 1;
            return location;
        }

        let stop = match self.agvs[i].route.get(self.agvs[i].cursor) {
            Some(s) => *s,
            None => return self.idle_move(i, states),
        };
        let (target, deadline, prep_hint) = match stop {
            RouteStop::Pickup(m) => {
                let ts = &self.tasks[&m];
                (ts.task.pickup, None, ts.prep_ready)
            }
            RouteStop::Delivery(m) => {
                let ts = &self.tasks[&m];
                (
                    ts.task.delivery,
                    Some((ts.task.deadline, ts.task.soft_delay)),
                    None,
                )
            }
            RouteStop::Resupply(u) => (u, None, None),
        };

        if self.at_stop(i, stop) {
            // Waiting for an unready product is handled by the rotation
            // timer; everything else executes in the arrival phase. Waiting
            // AGVs sharing a cell disperse so they never pin a cell at the
            // congestion threshold.
            if let RouteStop::Pickup(m) = stop {
                let ready = self.tasks[&m]
                    .prep_ready
                    .map_or(false, |ready| ready <= slot);
                if !ready {
                    if self.should_rotate(i, slot) {
                        self.rotate_route(i);
                    }
                    if let Some(aside) = self.step_aside_target(i, states) {
                        return aside;
                    }
                }
            }
            return self.agvs[i].location;
        }

        // A fresh map that newly penalizes the planned path triggers a
        // proactive replan; so does any deviation or a missing path.
        let mut need_plan = self.agvs[i].replan || self.agvs[i].path.is_none();
        if let Some(p) = &self.agvs[i].path {
            if p.position_at(slot) != location {
                need_plan = true;
            }
        }
        if !need_plan
            && self.mode.communicates()
            && slot.saturating_sub(self.agvs[i].last_plan) >= self.sim_cfg.replan_cooldown
        {
            if let Some((received, map)) = &self.agvs[i].last_global {
                if *received == slot {
                    let p = self.agvs[i].path.as_ref().unwrap();
                    if crate::router::path_penalty(p, map, &self.graph, &self.router_cfg, slot) > 0
                    {
                        need_plan = true;
                    }
                }
            }
        }

        if need_plan {
            let merged = self.planning_map(i, states);
            let boost = std::mem::take(&mut self.agvs[i].boost_next_plan);
            let map = if boost {
                let mut boosted = merged;
                for offset in 1..=self.sim_cfg.patience {
                    boosted.add(&self.graph, location, slot + offset, self.router_cfg.kappa);
                }
                boosted
            } else {
                merged
            };
            // A deadline already out of reach would only force a futile
            // constrained search; plan unconstrained straight away.
            let usable_deadline = deadline.filter(|(d, soft)| {
                slot + u64::from(location.manhattan(target)) <= d + soft
            });
            let mut query = PlanQuery {
                graph: &self.graph,
                start: location,
                goal: target,
                start_slot: slot,
                map: &map,
                config: &self.router_cfg,
                deadline: usable_deadline.map(|(d, _)| d),
                soft_delay: usable_deadline.map(|(_, s)| s).unwrap_or(0),
                prep_ready: prep_hint,
            };
            let planned = match plan_path(&query) {
                Ok(p) => Some(p),
                Err(PlanError::NoPath { .. }) if query.deadline.is_some() => {
                    // The due time cannot be met; deliver late rather than
                    // strand the task.
                    query.deadline = None;
                    plan_path(&query).ok()
                }
                Err(_) => None,
            };
            self.agvs[i].replan = false;
            self.agvs[i].last_plan = slot;
            match planned {
                Some(p) => {
                    self.metrics.replans += 1;
                    self.agvs[i].path = Some(p);
                }
                None => {
                    self.agvs[i].path = None;
                    return location;
                }
            }
        }

        let path = self.agvs[i].path.as_ref().unwrap();
        path.position_at(slot + 1)
    }

    /// Idle AGVs clear loading zones: an AGV with no route standing next
    /// to a production robot (or on a resupply bay) heads for the nearest
    /// parking cell so deliveries and pickups can land.
    fn idle_move(&mut self, i: usize, states: &[(AgvId, Cell, Heading)]) -> Cell {
        let slot = self.slot;
        let location = self.agvs[i].location;
        if !self.is_loading_cell(location) || self.parking.is_empty() {
            self.agvs[i].path = None;
            if let Some(aside) = self.step_aside_target(i, states) {
                return aside;
            }
            return location;
        }
        let path_ok = self.agvs[i]
            .path
            .as_ref()
            .map_or(false, |p| p.position_at(slot) == location);
        if !path_ok {
            let target = self
                .parking
                .iter()
                .copied()
                .min_by_key(|&c| {
                    (
                        self.dist.travel(&self.graph, location, c).unwrap_or(u32::MAX),
                        c,
                    )
                })
                .unwrap();
            let map = self.planning_map(i, states);
            let query = PlanQuery {
                graph: &self.graph,
                start: location,
                goal: target,
                start_slot: slot,
                map: &map,
                config: &self.router_cfg,
                deadline: None,
                soft_delay: 0,
                prep_ready: None,
            };
            match plan_path(&query) {
                Ok(p) => self.agvs[i].path = Some(p),
                Err(_) => {
                    self.agvs[i].path = None;
                    return location;
                }
            }
        }
        self.agvs[i].path.as_ref().unwrap().position_at(slot + 1)
    }

    fn is_loading_cell(&self, c: Cell) -> bool {
        self.graph.role(c) == crate::grid::Role::Resupply
            || self
                .graph
                .neighbors(c)
                .any(|n| self.graph.role(n) == crate::grid::Role::Production)
    }

    /// Stationary AGVs sharing a cell spread out: everyone but the lowest
    /// id steps to the least-crowded adjacent cell. Keeps standing
    /// occupancy from pinning cells at the congestion threshold.
    fn step_aside_target(&self, i: usize, states: &[(AgvId, Cell, Heading)]) -> Option<Cell> {
        let id = self.agvs[i].id;
        let location = self.agvs[i].location;
        let lowest = states
            .iter()
            .filter(|(_, c, _)| *c == location)
            .map(|(a, _, _)| *a)
            .min()
            .unwrap_or(id);
        let sharing = states.iter().filter(|(_, c, _)| *c == location).count();
        if sharing < 2 || id == lowest {
            return None;
        }
        let occupancy =
            |c: Cell| states.iter().filter(|(_, p, _)| *p == c).count() as u32;
        self.graph
            .neighbors(location)
            .filter(|&n| self.graph.is_traversable(n))
            .filter(|&n| occupancy(n) + 1 <= self.router_cfg.kappa)
            .min_by_key(|&n| (occupancy(n), n))
    }

    /// The congestion picture an AGV plans against in its current mode.
    fn planning_map(&self, i: usize, states: &[(AgvId, Cell, Heading)]) -> CongestionMap {
        let slot = self.slot;
        let agv = &self.agvs[i];
        match self.mode {
            Mode::Uncontrolled => CongestionMap::zero(self.graph.vertex_count(), slot, 1),
            Mode::LocalOnly => {
                let obs = local_observation(states, &self.graph, agv.id, self.sensing);
                local_map(&obs, &self.graph, slot, self.sim_cfg.local_horizon)
            }
            Mode::CommIdeal | Mode::CommRealistic => {
                let obs = local_observation(states, &self.graph, agv.id, self.sensing);
                let local = local_map(&obs, &self.graph, slot, self.sim_cfg.local_horizon);
                match &agv.last_global {
                    Some((_, global)) => merge_maps(global, &local),
                    None => local,
                }
            }
        }
    }

    fn at_stop(&self, i: usize, stop: RouteStop) -> bool {
        let location = self.agvs[i].location;
        match stop {
            RouteStop::Pickup(m) => self
                .graph
                .service_cells(self.tasks[&m].task.pickup)
                .contains(&location),
            RouteStop::Delivery(m) => self
                .graph
                .service_cells(self.tasks[&m].task.delivery)
                .contains(&location),
            RouteStop::Resupply(u) => location == u,
        }
    }

    fn should_rotate(&mut self, i: usize, slot: Slot) -> bool {
        let waiting_since = match self.agvs[i].waiting_since {
            Some(s) => s,
            None => {
                self.agvs[i].waiting_since = Some(slot);
                return false;
            }
        };
        if slot - waiting_since < self.sim_cfg.pickup_rotate {
            return false;
        }
        // Only rotate when another block could make progress meanwhile.
        let remaining_blocks = self.agvs[i].route[self.agvs[i].cursor..]
            .iter()
            .filter(|s| matches!(s, RouteStop::Pickup(_)))
            .count();
        remaining_blocks > 1
    }

    /// Defer the currently blocked task block to the end of the route and
    /// re-materialize the remainder from the live state.
    fn rotate_route(&mut self, i: usize) {
        let agv = &self.agvs[i];
        let mut order: Vec<TaskId> = agv.route[agv.cursor..]
            .iter()
            .filter_map(|s| match s {
                RouteStop::Pickup(m) => Some(*m),
                _ => None,
            })
            .collect();
        if order.len() < 2 {
            return;
        }
        let blocked = order.remove(0);
        // Reinsert as late as line ordering allows.
        let blocked_line = self.tasks[&blocked].task.line;
        let blocked_priority = self.tasks[&blocked].task.priority;
        let limit = order
            .iter()
            .position(|m| {
                let t = &self.tasks[m].task;
                t.line == blocked_line && t.priority > blocked_priority
            })
            .unwrap_or(order.len());
        order.insert(limit, blocked);
        let solver_tasks: TaskMap = self
            .tasks
            .iter()
            .map(|(id, s)| (*id, s.task.clone()))
            .collect();
        let snapshot = self.agvs[i].snapshot();
        match materialize_route(&snapshot, &order, &solver_tasks, &self.graph, &self.dist) {
            Ok(route) => {
                let agv = &mut self.agvs[i];
                agv.route = route;
                agv.cursor = usize::from(agv.carrying.is_some());
                agv.path = None;
                agv.replan = true;
                agv.waiting_since = None;
                self.metrics.rotations += 1;
            }
            Err(_) => {
                // Keep waiting; rotation is best-effort.
                self.agvs[i].waiting_since = None;
            }
        }
    }

    /// Iteratively demote conflicted movers until the schedule is safe.
    /// Returns the number of conflicts resolved.
    fn resolve_conflicts(&mut self, moves: &mut [Move]) -> u64 {
        let bound = self.router_cfg.kappa;
        let yield_extra = if self.mode == Mode::LocalOnly {
            self.sim_cfg.local_safety_stay
        } else {
            0
        };
        let mut resolved = 0u64;
        loop {
            let conflicts = detect_conflicts(moves, bound);
            if conflicts.is_empty() {
                break;
            }
            let mut demoted_any = false;
            for conflict in conflicts {
                match conflict {
                    Conflict::Vertex { cell, agvs } => {
                        let stayers = moves
                            .iter()
                            .filter(|m| agvs.contains(&m.agv) && m.is_stay() && m.to == cell)
                            .count() as u32;
                        let movers: Vec<(AgvId, Heading)> = moves
                            .iter()
                            .filter(|m| agvs.contains(&m.agv) && !m.is_stay() && m.to == cell)
                            .map(|m| (m.agv, m.heading()))
                            .collect();
                        if movers.is_empty() {
                            continue;
                        }
                        resolved += 1;
                        let decisions = resolve_right_of_way(&movers);
                        let capacity = bound.saturating_sub(stayers);
                        for (id, decision) in decisions {
                            let demote = capacity == 0 || decision == Decision::Stay;
                            if demote {
                                self.demote(moves, id, yield_extra);
                                demoted_any = true;
                            }
                        }
                    }
                    Conflict::EdgeSwap { a, b } => {
                        let pair: Vec<(AgvId, Heading)> = moves
                            .iter()
                            .filter(|m| m.agv == a || m.agv == b)
                            .map(|m| (m.agv, m.heading()))
                            .collect();
                        resolved += 1;
                        for (id, decision) in resolve_right_of_way(&pair) {
                            if decision == Decision::Stay {
                                self.demote(moves, id, yield_extra);
                                demoted_any = true;
                            }
                        }
                    }
                }
            }
            if !demoted_any {
                break;
            }
        }
        resolved
    }

    fn demote(&mut self, moves: &mut [Move], id: AgvId, yield_extra: u64) {
        let m = moves.iter_mut().find(|m| m.agv == id).unwrap();
        if m.is_stay() {
            return;
        }
        m.to = m.from;
        let agv = &mut self.agvs[id.0 as usize];
        agv.yield_until = agv.yield_until.max(self.slot + yield_extra);
        agv.replan = true;
    }

    /// Apply the final moves; in uncontrolled mode, count executed
    /// collisions and stall the AGVs involved.
    fn execute_moves(&mut self, moves: &[Move]) -> u64 {
        let slot = self.slot;
        let mut collisions = 0u64;

        if !self.mode.controlled() {
            // Executed head-on swaps.
            for (i, a) in moves.iter().enumerate() {
                if a.is_stay() {
                    continue;
                }
                for b in &moves[i + 1..] {
                    if !b.is_stay() && a.to == b.from && a.from == b.to {
                        collisions += 1;
                        self.metrics.edge_swaps += 1;
                        for id in [a.agv, b.agv] {
                            let agv = &mut self.agvs[id.0 as usize];
                            agv.yield_until =
                                agv.yield_until.max(slot + self.sim_cfg.collision_recovery);
                            agv.replan = true;
                        }
                    }
                }
            }
        }

        for m in moves {
            let agv = &mut self.agvs[m.agv.0 as usize];
            agv.last_action = m.heading();
            agv.location = m.to;
            let has_goal = agv.route.get(agv.cursor).is_some();
            if m.is_stay() {
                if has_goal && agv.waiting_since.is_none() {
                    agv.stalled += 1;
                    if agv.stalled > self.sim_cfg.patience {
                        agv.stalled = 0;
                        agv.boost_next_plan = true;
                        agv.replan = true;
                    }
                }
            } else {
                agv.stalled = 0;
            }
        }

        // Executed per-cell occupancy.
        let mut occupancy: BTreeMap<Cell, Vec<AgvId>> = BTreeMap::new();
        for a in &self.agvs {
            occupancy.entry(a.location).or_default().push(a.id);
        }
        let moved_into: BTreeSet<AgvId> = moves
            .iter()
            .filter(|m| !m.is_stay())
            .map(|m| m.agv)
            .collect();
        for (cell, ids) in occupancy {
            if ids.len() as u32 > self.router_cfg.kappa {
                if self.mode.controlled() {
                    debug_assert!(
                        false,
                        "occupancy bound broken at {cell} slot {slot}: {ids:?}"
                    );
                    self.metrics.occupancy_violations += 1;
                } else if ids.iter().any(|id| moved_into.contains(id)) {
                    collisions += 1;
                    self.metrics.occupancy_violations += 1;
                    for id in ids {
                        let agv = &mut self.agvs[id.0 as usize];
                        agv.yield_until =
                            agv.yield_until.max(slot + self.sim_cfg.collision_recovery);
                        agv.replan = true;
                    }
                }
            }
        }
        collisions
    }

    fn process_arrivals(&mut self, record: &mut SlotRecord) {
        let slot = self.slot;
        for i in 0..self.agvs.len() {
            loop {
                let stop = match self.agvs[i].route.get(self.agvs[i].cursor) {
                    Some(s) => *s,
                    None => break,
                };
                if !self.at_stop(i, stop) {
                    break;
                }
                match stop {
                    RouteStop::Pickup(m) => {
                        let ready = {
                            let ts = &self.tasks[&m];
                            ts.phase == TaskPhase::Open
                                && ts.prep_ready.map_or(false, |r| r <= slot)
                        };
                        if !ready {
                            if self.agvs[i].waiting_since.is_none() {
                                self.agvs[i].waiting_since = Some(slot);
                            }
                            break;
                        }
                        let qty_out = self.tasks[&m].task.qty_out;
                        debug_assert!(qty_out <= self.agvs[i].capacity);
                        let agv = &mut self.agvs[i];
                        agv.product = qty_out;
                        agv.carrying = Some(m);
                        agv.cursor += 1;
                        agv.path = None;
                        agv.waiting_since = None;
                        self.tasks.get_mut(&m).unwrap().phase = TaskPhase::PickedUp;
                        record.pickups.push(m.0);
                    }
                    RouteStop::Delivery(m) => {
                        if self.agvs[i].carrying != Some(m) {
                            break;
                        }
                        let (qty_in, deadline) = {
                            let t = &self.tasks[&m].task;
                            (t.qty_in, t.deadline)
                        };
                        let agv = &mut self.agvs[i];
                        debug_assert!(
                            agv.payload >= qty_in,
                            "payload short at delivery of {m}"
                        );
                        agv.payload = agv.payload.saturating_sub(qty_in);
                        agv.product = 0;
                        agv.carrying = None;
                        agv.cursor += 1;
                        agv.path = None;
                        self.tasks.get_mut(&m).unwrap().phase = TaskPhase::Delivered(slot);
                        let late = tardiness(slot, deadline);
                        self.tardiness_sum += late;
                        self.metrics.max_tardiness = self.metrics.max_tardiness.max(late);
                        self.metrics.completions.push((m, slot));
                        record.deliveries.push(m.0);
                    }
                    RouteStop::Resupply(_) => {
                        let agv = &mut self.agvs[i];
                        agv.payload = agv.capacity;
                        agv.cursor += 1;
                        agv.path = None;
                    }
                }
            }
        }
    }

    /// Realized preparation times. The production robot at each node
    /// dispatches jobs in readiness order: a job is ready once released and
    /// its upstream delivery has happened, and its product completes
    /// `processing_time` after both the robot and the input are available.
    /// The previous-product term of the recursion is the robot-free slot.
    fn resolve_preps(&mut self) {
        // (node, ready, line, priority, id) for every dispatchable job.
        let mut candidates: Vec<(Cell, Slot, LineId, u32, TaskId)> = Vec::new();
        for state in self.tasks.values() {
            if state.prep_ready.is_some() || state.phase == TaskPhase::Future {
                continue;
            }
            let arrival = state.task.arrival_slot;
            let ready = if state.task.priority <= 1 {
                Some(arrival)
            } else {
                match self.upstream.get(&(state.task.line, state.task.priority - 1)) {
                    Some(up_id) => match self.tasks[up_id].phase {
                        TaskPhase::Delivered(s) => Some(s.max(arrival)),
                        _ => None,
                    },
                    None => Some(arrival),
                }
            };
            if let Some(ready) = ready {
                candidates.push((
                    state.task.pickup,
                    ready,
                    state.task.line,
                    state.task.priority,
                    state.task.id,
                ));
            }
        }
        candidates.sort();
        for (node, ready, _, _, id) in candidates {
            let free = self.node_robot_free.entry(node).or_insert(0);
            let processing = self.tasks[&id].task.processing_time;
            let done = preparation_time(*free, ready, processing);
            *free = done;
            self.tasks.get_mut(&id).unwrap().prep_ready = Some(done);
        }
    }

    fn slot_bookkeeping(&mut self) {
        if self.mode.communicates() {
            self.agv_slots += self.agvs.len() as u64;
            let fresh_slot = self.last_broadcast_slot;
            for agv in &self.agvs {
                let fresh = match (fresh_slot, &agv.last_global) {
                    (Some(b), Some((received, _))) => *received == b,
                    _ => false,
                };
                if !fresh {
                    self.fallback_agv_slots += 1;
                }
            }
        }
    }
}

impl Simulation {
    /// Current AGV positions, in id order.
    pub fn positions(&self) -> Vec<(AgvId, Cell)> {
        self.agvs.iter().map(|a| (a.id, a.location)).collect()
    }

    #[doc(hidden)]
    pub fn debug_done(&self) -> bool {
        self.done()
    }

    #[doc(hidden)]
    pub fn debug_map_at(&self, agv: u32) {
        let i = agv as usize;
        let states: Vec<(AgvId, Cell, Heading)> = self
            .agvs
            .iter()
            .map(|a| (a.id, a.location, a.last_action))
            .collect();
        let map = self.planning_map(i, &states);
        if let Some(p) = &self.agvs[i].path {
            println!("path start {} cells {:?}", p.start_slot, p.cells);
            for (j, c) in p.cells.iter().enumerate() {
                let t = p.start_slot + j as u64;
                let occ = map.occupancy(&self.graph, *c, t);
                if occ > 0 {
                    println!("  occ {} at {} t{}", occ, c, t);
                }
            }
        }
        for c in [Cell::new(1, 6), Cell::new(3, 6)] {
            let occs: Vec<u32> = (0..12)
                .map(|d| map.occupancy(&self.graph, c, self.slot + d))
                .collect();
            println!("map at {c}: {:?}", occs);
        }
    }

    #[doc(hidden)]
    pub fn debug_dump_stuck(&self) {
        for t in self.tasks.values() {
            if !matches!(t.phase, TaskPhase::Delivered(_)) {
                println!(
                    "task {} phase {:?} prep {:?} line {:?} prio {} pickup {} delivery {}",
                    t.task.id, t.phase, t.prep_ready, t.task.line, t.task.priority,
                    t.task.pickup, t.task.delivery
                );
            }
        }
        for a in &self.agvs {
            if a.route.get(a.cursor).is_some() {
                println!(
                    "agv {} at {} cursor {}/{} stop {:?} carrying {:?} payload {} yield_until {} stalled {} waiting {:?} path {:?}",
                    a.id, a.location, a.cursor, a.route.len(), a.route.get(a.cursor),
                    a.carrying, a.payload, a.yield_until, a.stalled, a.waiting_since,
                    a.path.as_ref().map(|p| (p.start_slot, p.cells.len()))
                );
            }
        }
    }
}

/// Run one scenario to completion. Deterministic per (config, seed).
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Metrics, SimError> {
    Simulation::new(cfg, seed)?.run(None)
}

/// As `run_scenario`, also writing one event record per slot to `sink`.
pub fn run_scenario_logged(
    cfg: &ScenarioConfig,
    seed: u64,
    sink: &mut dyn std::io::Write,
) -> Result<Metrics, SimError> {
    Simulation::new(cfg, seed)?.run(Some(sink))
}
