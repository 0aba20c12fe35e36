//! Scenario configuration: a TOML schema with strict validation, plus
//! dotted-key overrides for sweeps and the command line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Cell, FactoryGraph, GridError, LayoutSpec};
use crate::mrta::SaParams;
use crate::netsim::{ChannelConfig, TrafficMode};
use crate::router::RouterConfig;
use crate::task::TaskGenParams;
use crate::timing::Slot;

/// Operating mode of the closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// No communication, no conflict rules; collisions are counted.
    Uncontrolled,
    /// Local sensing and right-of-way rules only, with extra safety stays.
    LocalOnly,
    /// Full loop with guaranteed packet delivery.
    CommIdeal,
    /// Full loop over the contention channel with per-link errors.
    CommRealistic,
}

impl Mode {
    pub fn communicates(self) -> bool {
        matches!(self, Mode::CommIdeal | Mode::CommRealistic)
    }

    pub fn controlled(self) -> bool {
        self != Mode::Uncontrolled
    }

    /// Ideal communication behaves as the realistic loop with delivery
    /// guaranteed.
    pub fn delivery_guaranteed(self) -> bool {
        self == Mode::CommIdeal
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config field {field} out of range: {detail}")]
    Field { field: String, detail: String },
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn field_err(field: &str, detail: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub width: u16,
    pub height: u16,
    pub layout: LayoutKind,
    /// Explicit cells for the `custom` layout, as [x, y] pairs.
    pub production: Vec<[u16; 2]>,
    pub resupply: Vec<[u16; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Empty,
    Columns,
    Custom,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            width: 10,
            height: 10,
            layout: LayoutKind::Columns,
            production: Vec::new(),
            resupply: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgvSection {
    pub count: u32,
    pub capacity: u32,
    pub sensing_range: u16,
    /// Pinned spawn cells as [x, y]; empty for seeded random placement.
    pub spawn: Vec<[u16; 2]>,
}

impl Default for AgvSection {
    fn default() -> Self {
        AgvSection {
            count: 30,
            capacity: 20,
            sensing_range: 2,
            spawn: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// Production lines over the whole scenario, split across waves.
    pub lines: u32,
    pub per_line: u32,
    pub qty: [u32; 2],
    pub processing: [u64; 2],
    /// Reconfiguration count; task batches arrive one per wave.
    pub waves: u32,
    pub wave_interval: Slot,
    pub slack_factor: u32,
    pub soft_delay: Slot,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            lines: 60,
            per_line: 4,
            qty: [5, 10],
            processing: [5, 10],
            waves: 3,
            wave_interval: 200,
            slack_factor: 6,
            soft_delay: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterSection {
    pub kappa: u32,
    pub congestion_penalty: u64,
    pub max_expansions: usize,
    /// Congestion-map prediction horizon in slots.
    pub horizon: u32,
}

impl Default for RouterSection {
    fn default() -> Self {
        RouterSection {
            kappa: 3,
            congestion_penalty: 50,
            max_expansions: 20_000,
            horizon: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaSection {
    /// Initial temperature; omit for half the greedy cost.
    pub t_init: Option<f64>,
    pub t_stop: f64,
    pub cooling: f64,
    /// Tasks removed per iteration; omit for 20% of the batch.
    pub destroy_size: Option<usize>,
    pub removal_bias: f64,
    pub max_iterations: usize,
}

impl Default for SaSection {
    fn default() -> Self {
        let p = SaParams::default();
        SaSection {
            t_init: p.t_init,
            t_stop: p.t_stop,
            cooling: p.cooling,
            destroy_size: p.destroy_size,
            removal_bias: p.removal_bias,
            max_iterations: p.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub traffic: TrafficMode,
    /// Slots an AGV may sit blocked before forcing a replan.
    pub patience: u64,
    /// Extra stay slots a yielding AGV spends in local-only mode.
    pub local_safety_stay: u64,
    /// Stall applied to AGVs involved in an uncontrolled collision.
    pub collision_recovery: u64,
    /// Registry entries older than this are dropped from the global map;
    /// omit for twice the router horizon.
    pub staleness_cap: Option<Slot>,
    /// Slots ahead a neighbor's last action is extrapolated locally.
    pub local_horizon: u32,
    /// Waiting this long at a pickup with an unready product defers the
    /// block to the end of the route.
    pub pickup_rotate: u64,
    /// Minimum slots between proactive fresh-map replans per AGV.
    pub replan_cooldown: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            traffic: TrafficMode::Bernoulli,
            patience: 10,
            local_safety_stay: 2,
            collision_recovery: 25,
            staleness_cap: None,
            local_horizon: 3,
            pickup_rotate: 25,
            replan_cooldown: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub slot_cap: Slot,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![1, 2, 3, 4, 5],
            slot_cap: 10_000,
        }
    }
}

/// A complete scenario description. Unknown keys are rejected at parse
/// time; every field is range-checked by `validate`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub mode: ModeSection,
    pub grid: GridSection,
    pub agv: AgvSection,
    pub tasks: TaskSection,
    pub channel: ChannelConfig,
    pub router: RouterSection,
    pub sa: SaSection,
    pub sim: SimSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeSection {
    pub kind: Mode,
}

impl Default for ModeSection {
    fn default() -> Self {
        ModeSection {
            kind: Mode::CommIdeal,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply a dotted-key override like `channel.interval=25`. The key must
    /// name a real config field; the value is parsed as a TOML literal.
    pub fn with_override(&self, key: &str, raw_value: &str) -> Result<Self, ConfigError> {
        let mut tree: toml::Value = toml::Value::try_from(self.clone())
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        for part in &parts[..parts.len() - 1] {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*part))
                .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        }
        let leaf = parts[parts.len() - 1];
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        if !table.contains_key(leaf) {
            // Optional fields (t_init, destroy_size, staleness_cap) may be
            // absent from the serialized tree yet still be real fields.
            let optional = matches!(
                key,
                "sa.t_init" | "sa.destroy_size" | "sim.staleness_cap"
            );
            if !optional {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
        }
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw_value}"))
            .map(|t| t["v"].clone())
            .or_else(|_| {
                toml::from_str::<toml::Table>(&format!("v = \"{raw_value}\""))
                    .map(|t| t["v"].clone())
            })
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        table.insert(leaf.to_string(), parsed);
        let cfg: ScenarioConfig = tree
            .try_into()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grid.width < 2 || self.grid.height < 2 {
            return Err(field_err(
                "grid.width/height",
                format!("{}x{} below the 2x2 minimum", self.grid.width, self.grid.height),
            ));
        }
        if self.grid.layout != LayoutKind::Custom
            && (!self.grid.production.is_empty() || !self.grid.resupply.is_empty())
        {
            return Err(field_err(
                "grid.production",
                "explicit cells require layout = \"custom\"",
            ));
        }
        if self.agv.count == 0 {
            return Err(field_err("agv.count", "must be at least 1"));
        }
        if self.agv.capacity == 0 {
            return Err(field_err("agv.capacity", "must be at least 1"));
        }
        if self.tasks.per_line == 0 {
            return Err(field_err("tasks.per_line", "must be at least 1"));
        }
        if self.tasks.qty[0] > self.tasks.qty[1] {
            return Err(field_err("tasks.qty", "lo exceeds hi"));
        }
        if self.tasks.qty[1] > self.agv.capacity {
            return Err(field_err(
                "tasks.qty",
                format!("max {} exceeds capacity {}", self.tasks.qty[1], self.agv.capacity),
            ));
        }
        if self.tasks.processing[0] > self.tasks.processing[1] || self.tasks.processing[0] == 0 {
            return Err(field_err("tasks.processing", "need 1 <= lo <= hi"));
        }
        if self.tasks.waves == 0 {
            return Err(field_err("tasks.waves", "must be at least 1"));
        }
        if self.tasks.waves > 1 && self.tasks.wave_interval == 0 {
            return Err(field_err("tasks.wave_interval", "must be positive with several waves"));
        }
        self.channel.validate().map_err(|e| match e {
            crate::netsim::ChannelError::InvalidConfig { field, detail } => {
                field_err(&format!("channel.{field}"), detail)
            }
            other => ConfigError::Parse(other.to_string()),
        })?;
        if self.router.kappa < 1 {
            return Err(field_err("router.kappa", "must be at least 1"));
        }
        if self.router.congestion_penalty == 0 {
            return Err(field_err("router.congestion_penalty", "must be positive"));
        }
        if self.router.horizon == 0 {
            return Err(field_err("router.horizon", "must be positive"));
        }
        if self.router.max_expansions == 0 {
            return Err(field_err("router.max_expansions", "must be positive"));
        }
        self.sa_params().validate().map_err(|e| match e {
            crate::mrta::MrtaError::InvalidParams { field, detail } => {
                field_err(&format!("sa.{field}"), detail)
            }
            other => ConfigError::Parse(other.to_string()),
        })?;
        if self.run.seeds.is_empty() {
            return Err(field_err("run.seeds", "need at least one seed"));
        }
        if self.run.slot_cap == 0 {
            return Err(field_err("run.slot_cap", "must be positive"));
        }

        // The world itself must build and be operable.
        let graph = self.build_graph()?;
        if !graph.traversable_connected() {
            return Err(field_err("grid", "traversable cells are not connected"));
        }
        if self.tasks.lines > 0 {
            if graph.production_nodes().len() < 2 {
                return Err(field_err("grid", "need at least 2 production nodes for task chains"));
            }
            if graph.resupply_nodes().is_empty() {
                return Err(field_err("grid", "need at least one resupply node"));
            }
        }
        if !self.agv.spawn.is_empty() {
            if self.agv.spawn.len() != self.agv.count as usize {
                return Err(field_err(
                    "agv.spawn",
                    format!("{} cells for {} AGVs", self.agv.spawn.len(), self.agv.count),
                ));
            }
            let mut seen = std::collections::BTreeSet::new();
            for &[x, y] in &self.agv.spawn {
                let c = Cell::new(x, y);
                if !graph.contains(c) || !graph.is_traversable(c) {
                    return Err(field_err("agv.spawn", format!("cell {c} not traversable")));
                }
                if !seen.insert(c) {
                    return Err(field_err("agv.spawn", format!("cell {c} repeated")));
                }
            }
        }
        let traversable = graph
            .all_cells()
            .filter(|&c| graph.is_traversable(c))
            .count();
        if (self.agv.count as usize) > traversable {
            return Err(field_err(
                "agv.count",
                format!("{} AGVs exceed {} traversable cells", self.agv.count, traversable),
            ));
        }
        Ok(())
    }

    pub fn build_graph(&self) -> Result<FactoryGraph, GridError> {
        let layout = match self.grid.layout {
            LayoutKind::Empty => LayoutSpec::empty(),
            LayoutKind::Columns => LayoutSpec::default_columns(self.grid.width, self.grid.height),
            LayoutKind::Custom => LayoutSpec {
                production: self
                    .grid
                    .production
                    .iter()
                    .map(|&[x, y]| Cell::new(x, y))
                    .collect(),
                resupply: self
                    .grid
                    .resupply
                    .iter()
                    .map(|&[x, y]| Cell::new(x, y))
                    .collect(),
            },
        };
        FactoryGraph::build(self.grid.width, self.grid.height, &layout)
    }

    pub fn sa_params(&self) -> SaParams {
        SaParams {
            t_init: self.sa.t_init,
            t_stop: self.sa.t_stop,
            cooling: self.sa.cooling,
            destroy_size: self.sa.destroy_size,
            removal_bias: self.sa.removal_bias,
            max_iterations: self.sa.max_iterations,
        }
    }

    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            kappa: self.router.kappa,
            congestion_penalty: self.router.congestion_penalty,
            max_expansions: self.router.max_expansions,
        }
    }

    /// Task-generation parameters for one wave. Lines are split as evenly
    /// as possible across waves, earlier waves taking the remainder.
    pub fn wave_params(&self, wave: u32) -> TaskGenParams {
        let base = self.tasks.lines / self.tasks.waves;
        let extra = self.tasks.lines % self.tasks.waves;
        let lines = base + u32::from(wave < extra);
        let first_line = wave * base + wave.min(extra);
        TaskGenParams {
            lines,
            per_line: self.tasks.per_line,
            qty_range: (self.tasks.qty[0], self.tasks.qty[1]),
            proc_range: (self.tasks.processing[0], self.tasks.processing[1]),
            capacity: self.agv.capacity,
            slack_factor: self.tasks.slack_factor,
            soft_delay: self.tasks.soft_delay,
            release_slot: Slot::from(wave) * self.tasks.wave_interval,
            first_task_id: first_line * self.tasks.per_line,
            first_line_id: first_line,
        }
    }

    pub fn staleness_cap(&self) -> Slot {
        self.sim
            .staleness_cap
            .unwrap_or(2 * Slot::from(self.router.horizon))
    }
}
