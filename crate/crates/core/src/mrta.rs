//! Centralized task assignment: simulated annealing with large-neighborhood
//! destroy/repair.
//!
//! Each iteration removes a few tasks, biased toward low-precedence ones
//! (high priority index), reinserts them greedily in priority order, and
//! accepts the candidate per the annealing rule. Costs are estimated
//! completion times: every AGV follows shortest paths through its route
//! nodes, ignoring congestion, collisions, and waits.
//!
//! The solver works on dense task indices internally; the public
//! destroy/repair entry points convert at the boundary.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::agv::{AgvId, AgvSnapshot};
use crate::assignment::{self, Assignment};
use crate::grid::{Cell, DistanceMatrix, FactoryGraph};
use crate::task::{TaskId, TransportTask};

pub type TaskMap = BTreeMap<TaskId, TransportTask>;
/// Per-AGV ordered task blocks; resupply stops are derived, not stored.
pub type TaskOrders = BTreeMap<AgvId, Vec<TaskId>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SaParams {
    /// Initial temperature; `None` derives half the greedy solution cost.
    pub t_init: Option<f64>,
    /// Termination temperature.
    pub t_stop: f64,
    /// Cooling factor applied every iteration.
    pub cooling: f64,
    /// Tasks removed per iteration; `None` derives max(1, ceil(0.2 M)).
    pub destroy_size: Option<usize>,
    /// Exponent weighting removal probability by task priority.
    pub removal_bias: f64,
    /// Hard stop on iterations regardless of temperature.
    pub max_iterations: usize,
}

impl Default for SaParams {
    fn default() -> Self {
        SaParams {
            t_init: None,
            t_stop: 1e-3,
            cooling: 0.995,
            destroy_size: None,
            removal_bias: 1.0,
            max_iterations: 10_000,
        }
    }
}

impl SaParams {
    pub fn validate(&self) -> Result<(), MrtaError> {
        let err = |field: &'static str, detail: String| {
            Err(MrtaError::InvalidParams { field, detail })
        };
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            return err("cooling", format!("{} not in (0,1)", self.cooling));
        }
        if self.t_stop <= 0.0 {
            return err("t_stop", format!("{} must be positive", self.t_stop));
        }
        if let Some(t) = self.t_init {
            if t <= self.t_stop {
                return err("t_init", format!("{t} must exceed t_stop {}", self.t_stop));
            }
        }
        if self.destroy_size == Some(0) {
            return err("destroy_size", "must be at least 1".into());
        }
        if self.removal_bias < 0.0 {
            return err("removal_bias", "must be nonnegative".into());
        }
        if self.max_iterations == 0 {
            return err("max_iterations", "must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MrtaError {
    #[error("invalid parameter {field}: {detail}")]
    InvalidParams {
        field: &'static str,
        detail: String,
    },
    #[error("no tasks to assign")]
    EmptyInstance,
    #[error("no AGVs available")]
    NoAgvs,
    #[error("instance infeasible: {0}")]
    Infeasible(String),
    #[error("no feasible insertion for task {0}")]
    NoFeasibleInsertion(TaskId),
    #[error("route node unreachable for task {0}")]
    UnreachableNode(TaskId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("temperature must be positive, got {0}")]
    NonpositiveTemperature(f64),
}

/// Estimated completion times per AGV and solution-wide.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimatedCost {
    pub per_agv: BTreeMap<AgvId, u64>,
    pub total: u64,
}

/// Probability of accepting a candidate that worsens the estimated
/// makespan by `delta` at temperature `temp`.
pub fn accept_probability(delta: f64, temp: f64) -> Result<f64, MrtaError> {
    if temp <= 0.0 {
        return Err(MrtaError::NonpositiveTemperature(temp));
    }
    Ok((-delta / temp).exp().clamp(0.0, 1.0))
}

/// Solver context: the instance plus dense per-task tables for the hot
/// insertion loops.
pub struct SolveCtx<'a> {
    tasks: &'a TaskMap,
    agvs: Vec<AgvSnapshot>,
    graph: &'a FactoryGraph,
    dist: &'a DistanceMatrix,
    ids: Vec<TaskId>,
    pickup: Vec<Cell>,
    delivery: Vec<Cell>,
    qty_in: Vec<u32>,
    priority: Vec<u32>,
    line: Vec<u32>,
}

impl<'a> SolveCtx<'a> {
    pub fn new(
        tasks: &'a TaskMap,
        agvs: &[AgvSnapshot],
        graph: &'a FactoryGraph,
        dist: &'a DistanceMatrix,
    ) -> Self {
        let mut sorted = agvs.to_vec();
        sorted.sort_by_key(|a| a.id);
        let ids: Vec<TaskId> = tasks.keys().copied().collect();
        let mut ctx = SolveCtx {
            tasks,
            agvs: sorted,
            graph,
            dist,
            pickup: Vec::with_capacity(ids.len()),
            delivery: Vec::with_capacity(ids.len()),
            qty_in: Vec::with_capacity(ids.len()),
            priority: Vec::with_capacity(ids.len()),
            line: Vec::with_capacity(ids.len()),
            ids,
        };
        for id in &ctx.ids {
            let t = &tasks[id];
            ctx.pickup.push(t.pickup);
            ctx.delivery.push(t.delivery);
            ctx.qty_in.push(t.qty_in);
            ctx.priority.push(t.priority);
            ctx.line.push(t.line.0);
        }
        ctx
    }

    pub fn tasks(&self) -> &TaskMap {
        self.tasks
    }

    pub fn agvs(&self) -> &[AgvSnapshot] {
        &self.agvs
    }

    fn index_of(&self, m: TaskId) -> Result<u32, MrtaError> {
        self.ids
            .binary_search(&m)
            .map(|i| i as u32)
            .map_err(|_| MrtaError::UnknownTask(m))
    }

    fn travel(&self, from: Cell, to: Cell, m: TaskId) -> Result<u64, MrtaError> {
        self.dist
            .travel(self.graph, from, to)
            .map(u64::from)
            .map_err(|_| MrtaError::UnreachableNode(m))
    }

    /// Travel cost of one AGV's block order, mirroring route
    /// materialization: carried delivery first, then per task a
    /// minimum-detour resupply stop whenever the raw payload would not
    /// cover the delivery, the pickup, and the delivery. `insert` splices
    /// a virtual extra task before position `at` without allocating.
    fn agv_cost(
        &self,
        ai: usize,
        order: &[u32],
        insert: Option<(u32, usize)>,
    ) -> Result<u64, MrtaError> {
        let a = &self.agvs[ai];
        let mut cost = 0u64;
        let mut position = a.location;
        let mut payload = a.payload;
        if let Some(m) = a.carrying {
            let t = self.tasks.get(&m).ok_or(MrtaError::UnknownTask(m))?;
            cost += self.travel(position, t.delivery, m)?;
            payload = payload.saturating_sub(t.qty_in);
            position = t.delivery;
        }
        let total = order.len() + usize::from(insert.is_some());
        for slot in 0..total {
            let ti = match insert {
                Some((task, at)) => {
                    use std::cmp::Ordering::*;
                    match slot.cmp(&at) {
                        Less => order[slot],
                        Equal => task,
                        Greater => order[slot - 1],
                    }
                }
                None => order[slot],
            } as usize;
            let id = self.ids[ti];
            let (pickup, delivery) = (self.pickup[ti], self.delivery[ti]);
            if payload < self.qty_in[ti] {
                let (_, detour) = self
                    .dist
                    .resupply_via(self.graph, position, pickup)
                    .ok_or(MrtaError::NoFeasibleInsertion(id))?;
                cost += u64::from(detour);
                payload = a.capacity;
            } else {
                cost += self.travel(position, pickup, id)?;
            }
            cost += self.travel(pickup, delivery, id)?;
            payload -= self.qty_in[ti];
            position = delivery;
        }
        Ok(cost)
    }

    /// Whether inserting task `ti` at `at` keeps same-line blocks of this
    /// order in increasing priority.
    fn insertion_keeps_line_order(&self, order: &[u32], ti: u32, at: usize) -> bool {
        let line = self.line[ti as usize];
        let priority = self.priority[ti as usize];
        for (i, &o) in order.iter().enumerate() {
            if self.line[o as usize] != line {
                continue;
            }
            let other = self.priority[o as usize];
            if i < at {
                if other >= priority {
                    return false;
                }
            } else if other <= priority {
                return false;
            }
        }
        true
    }

    fn to_dense(&self, orders: &TaskOrders) -> Result<Vec<Vec<u32>>, MrtaError> {
        let mut dense = vec![Vec::new(); self.agvs.len()];
        for (ai, agv) in self.agvs.iter().enumerate() {
            if let Some(order) = orders.get(&agv.id) {
                for &m in order {
                    dense[ai].push(self.index_of(m)?);
                }
            }
        }
        Ok(dense)
    }

    fn from_dense(&self, dense: &[Vec<u32>]) -> TaskOrders {
        self.agvs
            .iter()
            .enumerate()
            .map(|(ai, agv)| {
                (
                    agv.id,
                    dense[ai].iter().map(|&ti| self.ids[ti as usize]).collect(),
                )
            })
            .collect()
    }

    fn all_costs(&self, dense: &[Vec<u32>]) -> Result<Vec<u64>, MrtaError> {
        dense
            .iter()
            .enumerate()
            .map(|(ai, order)| self.agv_cost(ai, order, None))
            .collect()
    }
}

/// Remove `destroy_size` tasks, sampled without replacement with
/// probability proportional to priority^removal_bias, so low-precedence
/// tasks are removed more often. Panics when the size is zero or exceeds
/// the assigned task count (contract boundary).
pub fn destroy(
    orders: &mut TaskOrders,
    tasks: &TaskMap,
    destroy_size: usize,
    removal_bias: f64,
    rng: &mut impl Rng,
) -> Vec<TaskId> {
    let mut pool: Vec<TaskId> = orders.values().flatten().copied().collect();
    pool.sort();
    assert!(
        destroy_size >= 1 && destroy_size <= pool.len(),
        "destroy_size {destroy_size} out of 1..={}",
        pool.len()
    );
    let weights: Vec<f64> = pool
        .iter()
        .map(|m| f64::from(tasks[m].priority).powf(removal_bias))
        .collect();
    let picks = weighted_sample(&weights, destroy_size, rng);
    let removed: Vec<TaskId> = picks.iter().map(|&i| pool[i]).collect();
    for order in orders.values_mut() {
        order.retain(|m| !removed.contains(m));
    }
    removed
}

/// Draw `count` distinct indices with probability proportional to weight.
fn weighted_sample(weights: &[f64], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut live: Vec<usize> = (0..weights.len()).collect();
    let mut remaining: Vec<f64> = weights.to_vec();
    let mut picks = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = remaining.iter().sum();
        let mut draw = rng.gen::<f64>() * total;
        let mut chosen = live.len() - 1;
        for (i, w) in remaining.iter().enumerate() {
            if draw < *w {
                chosen = i;
                break;
            }
            draw -= w;
        }
        picks.push(live.swap_remove(chosen));
        remaining.swap_remove(chosen);
    }
    picks
}

fn destroy_dense(
    ctx: &SolveCtx,
    dense: &mut [Vec<u32>],
    costs: &mut [u64],
    destroy_size: usize,
    removal_bias: f64,
    rng: &mut impl Rng,
) -> Result<Vec<u32>, MrtaError> {
    let mut pool: Vec<u32> = dense.iter().flatten().copied().collect();
    pool.sort_unstable();
    debug_assert!(destroy_size >= 1 && destroy_size <= pool.len());
    let weights: Vec<f64> = pool
        .iter()
        .map(|&ti| f64::from(ctx.priority[ti as usize]).powf(removal_bias))
        .collect();
    let picks = weighted_sample(&weights, destroy_size, rng);
    let removed: Vec<u32> = picks.iter().map(|&i| pool[i]).collect();
    for (ai, order) in dense.iter_mut().enumerate() {
        let before = order.len();
        order.retain(|ti| !removed.contains(ti));
        if order.len() != before {
            costs[ai] = ctx.agv_cost(ai, order, None)?;
        }
    }
    Ok(removed)
}

/// Reinsert removed tasks: sorted ascending by priority, each placed at
/// the (AGV, position) minimizing the resulting estimated makespan,
/// subject to line ordering. Ties break toward the lowest AGV id, then
/// the earliest position.
pub fn repair(
    orders: &mut TaskOrders,
    removed: Vec<TaskId>,
    ctx: &SolveCtx,
) -> Result<(), MrtaError> {
    let mut dense = ctx.to_dense(orders)?;
    let mut costs = ctx.all_costs(&dense)?;
    let mut removed_dense = Vec::with_capacity(removed.len());
    for m in removed {
        removed_dense.push(ctx.index_of(m)?);
    }
    repair_dense(ctx, &mut dense, &mut costs, removed_dense)?;
    *orders = ctx.from_dense(&dense);
    Ok(())
}

fn repair_dense(
    ctx: &SolveCtx,
    dense: &mut [Vec<u32>],
    costs: &mut [u64],
    mut removed: Vec<u32>,
) -> Result<(), MrtaError> {
    removed.sort_by_key(|&ti| {
        (
            ctx.priority[ti as usize],
            ctx.line[ti as usize],
            ctx.ids[ti as usize],
        )
    });
    for ti in removed {
        // Makespan over the untouched AGVs: track the top two costs.
        let (mut max1, mut arg1, mut max2) = (0u64, usize::MAX, 0u64);
        for (ai, &c) in costs.iter().enumerate() {
            if c > max1 {
                max2 = max1;
                max1 = c;
                arg1 = ai;
            } else if c > max2 {
                max2 = c;
            }
        }
        let mut best: Option<(u64, usize, usize, u64)> = None;
        for ai in 0..dense.len() {
            let order = &dense[ai];
            let others = if ai == arg1 { max2 } else { max1 };
            if let Some((b, _, _, _)) = best {
                // No insertion into this AGV can beat a makespan below the
                // untouched maximum.
                if others >= b {
                    continue;
                }
            }
            for at in 0..=order.len() {
                if !ctx.insertion_keeps_line_order(order, ti, at) {
                    continue;
                }
                let cost = match ctx.agv_cost(ai, order, Some((ti, at))) {
                    Ok(c) => c,
                    Err(MrtaError::NoFeasibleInsertion(_)) => continue,
                    Err(e) => return Err(e),
                };
                let makespan = others.max(cost);
                if best.map_or(true, |(b, _, _, _)| makespan < b) {
                    best = Some((makespan, ai, at, cost));
                }
            }
        }
        let (_, ai, at, cost) =
            best.ok_or(MrtaError::NoFeasibleInsertion(ctx.ids[ti as usize]))?;
        dense[ai].insert(at, ti);
        costs[ai] = cost;
    }
    Ok(())
}

/// Estimated completion of a materialized assignment: per-AGV sums of
/// shortest-path travel times through route nodes in order, and their max.
pub fn estimated_completion(
    assignment: &Assignment,
    ctx: &SolveCtx,
) -> Result<EstimatedCost, MrtaError> {
    let mut per_agv = BTreeMap::new();
    for agv in &ctx.agvs {
        let mut cost = 0u64;
        let mut position = agv.location;
        if let Some(route) = assignment.routes.get(&agv.id) {
            for stop in route {
                let (target, id) = match *stop {
                    crate::agv::RouteStop::Pickup(m) => (ctx.tasks[&m].pickup, m),
                    crate::agv::RouteStop::Delivery(m) => (ctx.tasks[&m].delivery, m),
                    crate::agv::RouteStop::Resupply(u) => (u, TaskId(u32::MAX)),
                };
                cost += ctx.travel(position, target, id)?;
                position = target;
            }
        }
        per_agv.insert(agv.id, cost);
    }
    let total = per_agv.values().copied().max().unwrap_or(0);
    Ok(EstimatedCost { per_agv, total })
}

/// Greedy nearest-insertion initial solution over priority-sorted tasks.
/// Tasks already in transit stay pinned to their carriers and are not
/// reinserted.
fn greedy_initial_dense(ctx: &SolveCtx) -> Result<(Vec<Vec<u32>>, Vec<u64>), MrtaError> {
    let carried: std::collections::BTreeSet<TaskId> =
        ctx.agvs.iter().filter_map(|a| a.carrying).collect();
    let mut dense = vec![Vec::new(); ctx.agvs.len()];
    let mut costs = ctx.all_costs(&dense)?;
    let pending: Vec<u32> = (0..ctx.ids.len() as u32)
        .filter(|&ti| !carried.contains(&ctx.ids[ti as usize]))
        .collect();
    repair_dense(ctx, &mut dense, &mut costs, pending)?;
    Ok((dense, costs))
}

/// Solve the assignment with LNS-assisted simulated annealing. Returns the
/// best solution seen, materialized into routes; its estimated makespan
/// never exceeds the greedy initial solution's.
pub fn sa_solve(
    tasks: &TaskMap,
    agvs: &[AgvSnapshot],
    graph: &FactoryGraph,
    dist: &DistanceMatrix,
    params: &SaParams,
    rng: &mut impl Rng,
) -> Result<Assignment, MrtaError> {
    params.validate()?;
    if tasks.is_empty() {
        return Err(MrtaError::EmptyInstance);
    }
    if agvs.is_empty() {
        return Err(MrtaError::NoAgvs);
    }
    for t in tasks.values() {
        for agv in agvs {
            if t.qty_in > agv.capacity || t.qty_out > agv.capacity {
                return Err(MrtaError::Infeasible(format!(
                    "task {} quantities exceed capacity {}",
                    t.id, agv.capacity
                )));
            }
        }
    }
    let ctx = SolveCtx::new(tasks, agvs, graph, dist);

    let (mut current, mut costs) = greedy_initial_dense(&ctx)?;
    let mut current_cost = costs.iter().copied().max().unwrap_or(0);
    let mut best = current.clone();
    let mut best_cost = current_cost;

    let movable: usize = current.iter().map(Vec::len).sum();
    let destroy_size = params
        .destroy_size
        .unwrap_or_else(|| ((movable as f64 * 0.2).ceil() as usize).max(1))
        .min(movable);
    let mut temp = params.t_init.unwrap_or(current_cost as f64 / 2.0);

    let mut iterations = 0usize;
    while temp > params.t_stop && iterations < params.max_iterations && destroy_size >= 1 {
        iterations += 1;
        let mut candidate = current.clone();
        let mut candidate_costs = costs.clone();
        let removed = destroy_dense(
            &ctx,
            &mut candidate,
            &mut candidate_costs,
            destroy_size,
            params.removal_bias,
            rng,
        )?;
        if repair_dense(&ctx, &mut candidate, &mut candidate_costs, removed).is_err() {
            temp *= params.cooling;
            continue;
        }
        let candidate_cost = candidate_costs.iter().copied().max().unwrap_or(0);
        let accept = if candidate_cost < current_cost {
            true
        } else {
            let delta = candidate_cost as f64 - current_cost as f64;
            let p = accept_probability(delta, temp)?;
            rng.gen::<f64>() < p
        };
        if accept {
            current = candidate;
            costs = candidate_costs;
            current_cost = candidate_cost;
            #[cfg(debug_assertions)]
            assert_structurally_sound(&current, &ctx);
            if current_cost < best_cost {
                best = current.clone();
                best_cost = current_cost;
            }
        }
        temp *= params.cooling;
    }

    let orders = ctx.from_dense(&best);
    assignment::from_orders(&orders, &ctx.agvs, tasks, graph, dist).map_err(|e| match e {
        assignment::RouteError::NoResupply { task, .. } => MrtaError::NoFeasibleInsertion(task),
        assignment::RouteError::UnknownTask(m) => MrtaError::UnknownTask(m),
        assignment::RouteError::Unreachable(m) => MrtaError::UnreachableNode(m),
    })
}

/// Debug-mode check after every accepted move: uniqueness and precedence
/// must hold; due times are a reported metric, not a solver invariant.
#[cfg(debug_assertions)]
fn assert_structurally_sound(dense: &[Vec<u32>], ctx: &SolveCtx) {
    use std::collections::BTreeSet;
    let mut seen = BTreeSet::new();
    for order in dense {
        let mut line_priority: BTreeMap<u32, u32> = BTreeMap::new();
        for &ti in order {
            assert!(seen.insert(ti), "task index {ti} assigned twice");
            let (line, priority) = (ctx.line[ti as usize], ctx.priority[ti as usize]);
            if let Some(&prev) = line_priority.get(&line) {
                assert!(prev < priority, "line order broken at index {ti}");
            }
            line_priority.insert(line, priority);
        }
    }
    let assigned: usize = dense.iter().map(Vec::len).sum();
    let carried = ctx.agvs.iter().filter(|a| a.carrying.is_some()).count();
    assert_eq!(assigned + carried, ctx.ids.len(), "tasks lost or duplicated");
}
