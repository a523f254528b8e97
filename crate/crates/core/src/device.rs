//! Values exchanged across the platform-manager boundary: device snapshots,
//! tasks, results and device events.

use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::circuit::{GateKind, HardwareTarget, MeasurementCounts, QuantumCircuit};
use crate::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceStatus {
    Online,
    Calibrating,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub device_id: String,
    pub modality: String,
    pub target: HardwareTarget,
    pub calibration_epoch: u64,
    pub error_rates: BTreeMap<GateKind, f64>,
    pub queue_depth: u64,
    pub status: DeviceStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceEventKind {
    CalibrationUpdate,
    NoiseIncident,
    HardwareFault,
    /// Clears a hardware fault and brings the device back online.
    Recovery,
}

impl DeviceEventKind {
    pub const ALL: [DeviceEventKind; 4] = [
        DeviceEventKind::CalibrationUpdate,
        DeviceEventKind::NoiseIncident,
        DeviceEventKind::HardwareFault,
        DeviceEventKind::Recovery,
    ];

    pub const fn name(self) -> &'static str {
        match self {
            DeviceEventKind::CalibrationUpdate => "calibration_update",
            DeviceEventKind::NoiseIncident => "noise_incident",
            DeviceEventKind::HardwareFault => "hardware_fault",
            DeviceEventKind::Recovery => "recovery",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceEvent {
    pub device_id: String,
    pub kind: DeviceEventKind,
    #[serde(default)]
    pub payload: BTreeMap<String, String>,
    pub at: Tick,
}

/// Where a task came from: the owning job and, for QPI traffic, the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaskOrigin {
    pub job_id: u64,
    #[serde(default)]
    pub stream_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpmTask {
    pub task_id: String,
    pub circuit: QuantumCircuit,
    pub shots: u64,
    /// Absolute tick by which execution must have started.
    #[serde(default)]
    pub deadline: Option<Tick>,
    #[serde(default)]
    pub origin: TaskOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Ok,
    Failed,
    DeadlineMissed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub queued_at: Tick,
    pub started_at: Tick,
    pub finished_at: Tick,
    /// Sampler seed used for this task, so counts can be regenerated.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QpmResult {
    pub task_id: String,
    pub device_id: String,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<MeasurementCounts>,
    pub timing: TaskTiming,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QpmResult {
    /// Checks the timing order and the counts-iff-ok rule.
    pub fn is_consistent(&self) -> bool {
        let t = &self.timing;
        t.queued_at <= t.started_at
            && t.started_at <= t.finished_at
            && (self.status == TaskStatus::Ok) == self.counts.is_some()
    }
}
