//! Line-delimited event log: one JSON record per slot for offline
//! inspection and replay.

use serde::{Deserialize, Serialize};

use crate::timing::Slot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: Slot,
    /// (agv id, x, y) for every AGV, in id order.
    pub positions: Vec<(u32, u16, u16)>,
    pub pickups: Vec<u32>,
    pub deliveries: Vec<u32>,
    pub conflicts: u64,
    pub collisions: u64,
    pub uplink_delivered: u64,
    pub map_broadcast: bool,
}

pub fn write_record(sink: &mut dyn std::io::Write, record: &SlotRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *sink, record)?;
    sink.write_all(b"\n")
}

pub fn parse_log(text: &str) -> Result<Vec<SlotRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
