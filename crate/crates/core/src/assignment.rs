//! Task-to-AGV assignment: the sparse binary decision matrix, route
//! materialization from per-AGV task orders, and the constraint validator.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::agv::{AgvId, AgvSnapshot, RouteStop};
use crate::grid::{DistanceMatrix, FactoryGraph};
use crate::task::{TaskId, TransportTask};
use crate::timing::{self, Slot};

/// The assignment decision: sparse entries of the binary matrix plus the
/// materialized per-AGV key-node routes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Assignment {
    /// Sparse binary decision matrix entries (task, agv). A well-formed
    /// assignment has exactly one entry per task; the validator reports
    /// duplicates rather than making them unrepresentable.
    pub matrix: BTreeSet<(TaskId, AgvId)>,
    pub routes: BTreeMap<AgvId, Vec<RouteStop>>,
}

impl Assignment {
    pub fn entries(&self) -> impl Iterator<Item = (TaskId, AgvId)> + '_ {
        self.matrix.iter().copied()
    }

    pub fn agv_of(&self, task: TaskId) -> Option<AgvId> {
        self.matrix
            .range((task, AgvId(0))..=(task, AgvId(u32::MAX)))
            .map(|&(_, k)| k)
            .next()
    }

    pub fn task_count(&self) -> usize {
        self.matrix.len()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RouteError {
    #[error("task {task} demands {demand} but no resupply node exists to refill")]
    NoResupply { task: TaskId, demand: u32 },
    #[error("unknown task {0} in route order")]
    UnknownTask(TaskId),
    #[error("no traversable route to serve task {0}")]
    Unreachable(TaskId),
}

/// Materialize the stop list for one AGV from its task block order,
/// inserting a resupply stop whenever the running raw payload would not
/// cover the next delivery. The resupply cell chosen is the one minimizing
/// the detour, ties broken by cell order.
pub fn materialize_route(
    agv: &AgvSnapshot,
    order: &[TaskId],
    tasks: &BTreeMap<TaskId, TransportTask>,
    graph: &FactoryGraph,
    dist: &DistanceMatrix,
) -> Result<Vec<RouteStop>, RouteError> {
    let mut stops = Vec::with_capacity(order.len() * 2 + 1);
    let mut position = agv.location;
    let mut payload = agv.payload;

    if let Some(m) = agv.carrying {
        let t = tasks.get(&m).ok_or(RouteError::UnknownTask(m))?;
        stops.push(RouteStop::Delivery(m));
        payload = payload.saturating_sub(t.qty_in);
        position = t.delivery;
    }
    for &m in order {
        let t = tasks.get(&m).ok_or(RouteError::UnknownTask(m))?;
        if payload < t.qty_in {
            let (u, _) = dist.resupply_via(graph, position, t.pickup).ok_or(
                RouteError::NoResupply {
                    task: m,
                    demand: t.qty_in,
                },
            )?;
            stops.push(RouteStop::Resupply(u));
            payload = agv.capacity;
        }
        stops.push(RouteStop::Pickup(m));
        stops.push(RouteStop::Delivery(m));
        payload -= t.qty_in;
        position = t.delivery;
    }
    Ok(stops)
}

/// Build a full assignment from per-AGV task orders.
pub fn from_orders(
    orders: &BTreeMap<AgvId, Vec<TaskId>>,
    agvs: &[AgvSnapshot],
    tasks: &BTreeMap<TaskId, TransportTask>,
    graph: &FactoryGraph,
    dist: &DistanceMatrix,
) -> Result<Assignment, RouteError> {
    let mut assignment = Assignment::default();
    for agv in agvs {
        let order = orders.get(&agv.id).map(Vec::as_slice).unwrap_or(&[]);
        for &m in order {
            assignment.matrix.insert((m, agv.id));
        }
        if let Some(m) = agv.carrying {
            assignment.matrix.insert((m, agv.id));
        }
        let route = materialize_route(agv, order, tasks, graph, dist)?;
        assignment.routes.insert(agv.id, route);
    }
    Ok(assignment)
}

/// One constraint breach, naming the constraint and the task involved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Uniqueness: a task with zero or multiple assigned AGVs.
    Assignment4a { task: TaskId, agv_count: usize },
    /// Due time: planned tardiness beyond the permissible soft delay.
    Tardiness4b {
        task: TaskId,
        tardiness: Slot,
        soft_delay: Slot,
    },
    /// Security payload: raw materials short of the delivery demand.
    Payload4c {
        task: TaskId,
        agv: AgvId,
        payload: u32,
        demand: u32,
    },
    /// Resupply condition: product exceeds the free product capacity.
    Capacity4d {
        task: TaskId,
        agv: AgvId,
        capacity: u32,
        produced: u32,
    },
    /// Route inconsistent with the matrix or precedence rules.
    RouteShape { agv: AgvId, detail: String },
    /// The planned timeline cannot settle (cyclic cross-AGV wait).
    Stalled { tasks: Vec<TaskId> },
}

impl Violation {
    pub fn constraint(&self) -> &'static str {
        match self {
            Violation::Assignment4a { .. } => "4a",
            Violation::Tardiness4b { .. } => "4b",
            Violation::Payload4c { .. } => "4c",
            Violation::Capacity4d { .. } => "4d",
            Violation::RouteShape { .. } => "route",
            Violation::Stalled { .. } => "timeline",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValidateError {
    #[error("unknown task id {0}")]
    UnknownTask(TaskId),
    #[error("unknown AGV id {0}")]
    UnknownAgv(AgvId),
}

/// Check constraints over an assignment: uniqueness, due times under the
/// planned timeline, payload sufficiency at deliveries, product capacity at
/// pickups, and route/precedence shape. Binary-ness of the decision matrix
/// holds structurally in the sparse representation. Returns one violation
/// record per breach; an empty list means the assignment is feasible.
pub fn validate_assignment(
    assignment: &Assignment,
    tasks: &BTreeMap<TaskId, TransportTask>,
    agvs: &[AgvSnapshot],
    graph: &FactoryGraph,
    dist: &DistanceMatrix,
    start_slot: Slot,
) -> Result<Vec<Violation>, ValidateError> {
    let known_agvs: BTreeSet<AgvId> = agvs.iter().map(|a| a.id).collect();
    for &(task, agv) in &assignment.matrix {
        if !tasks.contains_key(&task) {
            return Err(ValidateError::UnknownTask(task));
        }
        if !known_agvs.contains(&agv) {
            return Err(ValidateError::UnknownAgv(agv));
        }
    }
    for (agv, route) in &assignment.routes {
        if !known_agvs.contains(agv) {
            return Err(ValidateError::UnknownAgv(*agv));
        }
        for stop in route {
            if let Some(m) = stop.task() {
                if !tasks.contains_key(&m) {
                    return Err(ValidateError::UnknownTask(m));
                }
            }
        }
    }

    let mut violations = Vec::new();

    // (4a) each task is conducted by exactly one AGV.
    for &task in tasks.keys() {
        let count = assignment
            .matrix
            .range((task, AgvId(0))..=(task, AgvId(u32::MAX)))
            .count();
        if count != 1 {
            violations.push(Violation::Assignment4a {
                task,
                agv_count: count,
            });
        }
    }

    // Route shape: matrix consistency, pickup-before-delivery, one task at
    // a time, and same-line priority ordering within an AGV.
    for agv in agvs {
        let route = match assignment.routes.get(&agv.id) {
            Some(r) => r,
            None => continue,
        };
        let mut open_block: Option<TaskId> = None;
        let mut seen_pickup: BTreeSet<TaskId> = BTreeSet::new();
        let mut seen_delivery: BTreeSet<TaskId> = BTreeSet::new();
        let mut last_line_priority: BTreeMap<crate::task::LineId, u32> = BTreeMap::new();
        for stop in route {
            match *stop {
                RouteStop::Pickup(m) => {
                    if assignment.agv_of(m) != Some(agv.id) {
                        violations.push(Violation::RouteShape {
                            agv: agv.id,
                            detail: format!("route visits {m} not assigned to it"),
                        });
                    }
                    if let Some(open) = open_block {
                        if agv.carrying != Some(open) || seen_delivery.contains(&open) {
                            violations.push(Violation::RouteShape {
                                agv: agv.id,
                                detail: format!("pickup of {m} while {open} is in transit"),
                            });
                        }
                    }
                    if !seen_pickup.insert(m) {
                        violations.push(Violation::RouteShape {
                            agv: agv.id,
                            detail: format!("{m} picked up twice"),
                        });
                    }
                    open_block = Some(m);
                    let t = &tasks[&m];
                    if let Some(&prev) = last_line_priority.get(&t.line) {
                        if t.priority <= prev {
                            violations.push(Violation::RouteShape {
                                agv: agv.id,
                                detail: format!(
                                    "line {:?} visited out of priority order at {m}",
                                    t.line
                                ),
                            });
                        }
                    }
                    last_line_priority.insert(t.line, t.priority);
                }
                RouteStop::Delivery(m) => {
                    let picked_here = seen_pickup.contains(&m) || agv.carrying == Some(m);
                    if !picked_here {
                        violations.push(Violation::RouteShape {
                            agv: agv.id,
                            detail: format!("delivery of {m} precedes its pickup"),
                        });
                    }
                    if !seen_delivery.insert(m) {
                        violations.push(Violation::RouteShape {
                            agv: agv.id,
                            detail: format!("{m} delivered twice"),
                        });
                    }
                    if open_block == Some(m) {
                        open_block = None;
                    }
                }
                RouteStop::Resupply(_) => {}
            }
        }
        // Matrix entries must appear in the route.
        for (task, k) in assignment.entries() {
            if k == agv.id
                && agv.carrying != Some(task)
                && (!seen_pickup.contains(&task) || !seen_delivery.contains(&task))
            {
                violations.push(Violation::RouteShape {
                    agv: agv.id,
                    detail: format!("assigned task {task} missing from route"),
                });
            }
        }
    }

    // (4c)/(4d) payload walk along each route.
    for agv in agvs {
        let route = match assignment.routes.get(&agv.id) {
            Some(r) => r,
            None => continue,
        };
        let mut payload = agv.payload;
        for stop in route {
            match *stop {
                RouteStop::Pickup(m) => {
                    let t = &tasks[&m];
                    if t.qty_out > agv.capacity {
                        violations.push(Violation::Capacity4d {
                            task: m,
                            agv: agv.id,
                            capacity: agv.capacity,
                            produced: t.qty_out,
                        });
                    }
                }
                RouteStop::Delivery(m) => {
                    let t = &tasks[&m];
                    if payload < t.qty_in {
                        violations.push(Violation::Payload4c {
                            task: m,
                            agv: agv.id,
                            payload,
                            demand: t.qty_in,
                        });
                    }
                    payload = payload.saturating_sub(t.qty_in);
                }
                RouteStop::Resupply(_) => payload = agv.capacity,
            }
        }
    }

    // (4b) due times under the planned timeline. Skipped when the matrix is
    // malformed, since the timeline is undefined then.
    if violations.is_empty() {
        match timing::build_timeline(assignment, tasks, agvs, graph, dist, start_slot) {
            Ok(timeline) => {
                for (task, t) in tasks {
                    if let Some(&ta) = timeline.tardiness.get(task) {
                        if ta > t.soft_delay {
                            violations.push(Violation::Tardiness4b {
                                task: *task,
                                tardiness: ta,
                                soft_delay: t.soft_delay,
                            });
                        }
                    }
                }
            }
            Err(timing::TimingError::Stalled(tasks)) => {
                violations.push(Violation::Stalled { tasks })
            }
            Err(timing::TimingError::UnknownTask { task, .. }) => {
                return Err(ValidateError::UnknownTask(task))
            }
            Err(_) => {}
        }
    }

    Ok(violations)
}
