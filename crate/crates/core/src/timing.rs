//! Slot arithmetic for arrivals, preparation times, tardiness, and the
//! planned schedule timeline evaluated over an assignment.
//!
//! One slot is one navigation step: the travel time of a sub-path is its
//! vertex count minus one.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::agv::{AgvId, AgvSnapshot, RouteStop};
use crate::assignment::Assignment;
use crate::grid::{DistanceMatrix, FactoryGraph};
use crate::task::{TaskId, TransportTask};

/// Discrete simulation time.
pub type Slot = u64;

/// Arrival recursion: arrival at step e is the previous arrival plus the
/// wait incurred there plus the travel time of the connecting sub-path.
pub fn arrival_update(prev_arrival: Slot, prev_wait: Slot, travel: Slot) -> Slot {
    prev_arrival + prev_wait + travel
}

/// Earliest slot a product is ready: the production robot must both have
/// finished the previous product at this node and have received the
/// upstream delivery, then spends the processing time.
pub fn preparation_time(prev_task_prep: Slot, upstream_delivery: Slot, processing: Slot) -> Slot {
    prev_task_prep.max(upstream_delivery) + processing
}

/// Slots late past the deadline, zero when on time.
pub fn tardiness(delivery_arrival: Slot, deadline: Slot) -> Slot {
    delivery_arrival.saturating_sub(deadline)
}

/// Planned per-step arrival and wait times for every AGV, with per-task
/// preparation times, delivery slots, and tardiness.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScheduleTimeline {
    /// Arrival slot per route step, indexed like the AGV's task route.
    pub arrivals: BTreeMap<AgvId, Vec<Slot>>,
    /// Wait incurred at each route step (nonzero only at pickups).
    pub waits: BTreeMap<AgvId, Vec<Slot>>,
    pub prep: BTreeMap<TaskId, Slot>,
    pub delivery: BTreeMap<TaskId, Slot>,
    pub tardiness: BTreeMap<TaskId, Slot>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TimingError {
    #[error("no arrival recorded for task {0}")]
    MissingArrival(TaskId),
    #[error("route of {agv} references unknown task {task}")]
    UnknownTask { agv: AgvId, task: TaskId },
    #[error("unreachable leg in route of {0}")]
    UnreachableLeg(AgvId),
    #[error("timeline stalled: cyclic cross-AGV wait involving tasks {0:?}")]
    Stalled(Vec<TaskId>),
}

/// Makespan: latest planned delivery among assigned tasks, 0 when empty.
pub fn makespan(timeline: &ScheduleTimeline, assignment: &Assignment) -> Result<Slot, TimingError> {
    let mut latest = 0;
    for (task, _) in assignment.entries() {
        let slot = timeline
            .delivery
            .get(&task)
            .ok_or(TimingError::MissingArrival(task))?;
        latest = latest.max(*slot);
    }
    Ok(latest)
}

/// Evaluate the planned timeline of an assignment assuming every sub-path
/// takes its shortest-path travel time. Waits follow the preparation-time
/// recursion with each production robot dispatching jobs in readiness
/// order; a cyclic cross-AGV wait is reported as `Stalled`.
/// `start_slot` is the slot the AGVs begin executing from.
pub fn build_timeline(
    assignment: &Assignment,
    tasks: &BTreeMap<TaskId, TransportTask>,
    agvs: &[AgvSnapshot],
    graph: &FactoryGraph,
    dist: &DistanceMatrix,
    start_slot: Slot,
) -> Result<ScheduleTimeline, TimingError> {
    let upstream: BTreeMap<(crate::task::LineId, u32), TaskId> = tasks
        .values()
        .map(|t| ((t.line, t.priority), t.id))
        .collect();

    struct Progress {
        step: usize,
        position: crate::grid::Cell,
        arrivals: Vec<Slot>,
        waits: Vec<Slot>,
    }

    let mut timeline = ScheduleTimeline::default();
    let mut progress: BTreeMap<AgvId, Progress> = BTreeMap::new();
    for agv in agvs {
        progress.insert(
            agv.id,
            Progress {
                step: 0,
                position: agv.location,
                arrivals: Vec::new(),
                waits: Vec::new(),
            },
        );
    }

    // Each production robot dispatches jobs in readiness order: a job is
    // ready once its upstream delivery time is known; its product is done
    // processing_time after both the robot and the input are available.
    let mut node_robot_free: BTreeMap<crate::grid::Cell, Slot> = BTreeMap::new();
    let resolve_preps = |timeline: &mut ScheduleTimeline,
                             node_robot_free: &mut BTreeMap<crate::grid::Cell, Slot>| {
        let mut candidates: Vec<(crate::grid::Cell, Slot, crate::task::LineId, u32, TaskId)> =
            Vec::new();
        for t in tasks.values() {
            if timeline.prep.contains_key(&t.id) {
                continue;
            }
            let ready = if t.priority <= 1 {
                Some(t.arrival_slot)
            } else {
                match upstream.get(&(t.line, t.priority - 1)) {
                    Some(up) => timeline
                        .delivery
                        .get(up)
                        .map(|&d| d.max(t.arrival_slot)),
                    // Upstream not in this batch: treat as ready.
                    None => Some(t.arrival_slot),
                }
            };
            if let Some(ready) = ready {
                candidates.push((t.pickup, ready, t.line, t.priority, t.id));
            }
        }
        candidates.sort();
        for (node, ready, _, _, id) in candidates {
            let free = node_robot_free.entry(node).or_insert(0);
            let done = preparation_time(*free, ready, tasks[&id].processing_time);
            *free = done;
            timeline.prep.insert(id, done);
        }
    };

    resolve_preps(&mut timeline, &mut node_robot_free);
    loop {
        let mut progressed = false;
        for agv in agvs {
            let route = match assignment.routes.get(&agv.id) {
                Some(r) => r,
                None => continue,
            };
            let p = progress.get_mut(&agv.id).unwrap();
            while p.step < route.len() {
                let stop = route[p.step];
                let target = match stop {
                    RouteStop::Pickup(m) | RouteStop::Delivery(m) => {
                        tasks
                            .get(&m)
                            .ok_or(TimingError::UnknownTask { agv: agv.id, task: m })
                            .map(|t| {
                                if matches!(stop, RouteStop::Pickup(_)) {
                                    t.pickup
                                } else {
                                    t.delivery
                                }
                            })?
                    }
                    RouteStop::Resupply(u) => u,
                };
                let travel = dist
                    .travel(graph, p.position, target)
                    .map_err(|_| TimingError::UnreachableLeg(agv.id))?;
                let (prev_arrival, prev_wait) = match p.step {
                    0 => (start_slot, 0),
                    e => (p.arrivals[e - 1], p.waits[e - 1]),
                };
                let arrival = arrival_update(prev_arrival, prev_wait, Slot::from(travel));
                let wait = match stop {
                    RouteStop::Pickup(m) => match timeline.prep.get(&m) {
                        Some(&ready) => ready.saturating_sub(arrival),
                        // Preparation not resolvable yet: suspend this AGV.
                        None => break,
                    },
                    _ => 0,
                };
                p.arrivals.push(arrival);
                p.waits.push(wait);
                if let RouteStop::Delivery(m) = stop {
                    let t = &tasks[&m];
                    timeline.delivery.insert(m, arrival);
                    timeline.tardiness.insert(m, tardiness(arrival, t.deadline));
                }
                p.position = target;
                p.step += 1;
                progressed = true;
            }
        }
        resolve_preps(&mut timeline, &mut node_robot_free);
        let done = agvs.iter().all(|a| {
            progress[&a.id].step >= assignment.routes.get(&a.id).map_or(0, |r| r.len())
        });
        if done {
            break;
        }
        if !progressed {
            let stuck: Vec<TaskId> = agvs
                .iter()
                .filter_map(|a| {
                    let p = &progress[&a.id];
                    assignment
                        .routes
                        .get(&a.id)
                        .and_then(|r| r.get(p.step))
                        .and_then(|s| s.task())
                })
                .collect();
            return Err(TimingError::Stalled(stuck));
        }
    }

    for (id, p) in progress {
        timeline.arrivals.insert(id, p.arrivals);
        timeline.waits.insert(id, p.waits);
    }
    Ok(timeline)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrival_examples() {
        assert_eq!(arrival_update(0, 0, 7), 7);
        assert_eq!(arrival_update(7, 3, 5), 15);
        // Route [start, p, d], travels 4 and 6, pickup wait 2 at p.
        let at_p = arrival_update(0, 0, 4);
        let at_d = arrival_update(at_p, 2, 6);
        assert_eq!(at_d, 12);
    }

    #[test]
    fn preparation_examples() {
        assert_eq!(preparation_time(0, 0, 5), 5);
        assert_eq!(preparation_time(10, 4, 5), 15);
        assert_eq!(preparation_time(4, 10, 5), 15);
    }

    #[test]
    fn tardiness_examples() {
        assert_eq!(tardiness(10, 12), 0);
        assert_eq!(tardiness(12, 12), 0);
        assert_eq!(tardiness(15, 12), 3);
    }
}
