//! Device manifest loaded at gateway startup.
//!
//! Either a bare array of device entries or an object:
//!
//! ```json
//! {"version": 1, "classical_nodes": 16, "devices": [
//!   {"device_id": "sim0", "modality": "simulator", "gres": "qc:QC",
//!    "target": {"native_gates": ["rz", "rx", "cx"], "num_qubits": 4,
//!               "connectivity": [[0,1],[1,2],[2,3]], "max_shots": 100000},
//!    "config": {"seed": 7, "calibration_period_ticks": 500}}
//! ]}
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use qbridge_core::scheduler::{default_gres, ClusterConfig, DeviceSlot};
use qbridge_core::sim::SimulatorConfig;
use qbridge_core::HardwareTarget;
use serde::{Deserialize, Serialize};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceEntry {
    pub device_id: String,
    pub modality: String,
    pub target: HardwareTarget,
    /// Generic-resource label jobs request this device by.
    #[serde(default = "default_gres")]
    pub gres: String,
    #[serde(default)]
    pub config: SimulatorConfig,
    /// Extra per-task run time, drawn deterministically from the task id in
    /// `0..=latency_jitter_ticks`.
    #[serde(default)]
    pub latency_jitter_ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_nodes")]
    pub classical_nodes: u32,
    pub devices: Vec<DeviceEntry>,
}

fn default_version() -> u32 {
    MANIFEST_VERSION
}

fn default_nodes() -> u32 {
    16
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawManifest {
    Full(Manifest),
    Bare(Vec<DeviceEntry>),
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot read manifest: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("manifest lists no devices")]
    Empty,
    #[error("duplicate device_id {0:?}")]
    DuplicateDevice(String),
    #[error("unsupported manifest version {0}")]
    Version(u32),
}

impl Manifest {
    pub fn new(devices: Vec<DeviceEntry>) -> Manifest {
        Manifest {
            version: MANIFEST_VERSION,
            classical_nodes: default_nodes(),
            devices,
        }
    }

    pub fn from_json(text: &str) -> Result<Manifest, ManifestError> {
        let raw: RawManifest = serde_json::from_str(text).map_err(|e| ManifestError::Malformed(e.to_string()))?;
        let m = match raw {
            RawManifest::Full(m) => m,
            RawManifest::Bare(devices) => Manifest::new(devices),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Manifest, ManifestError> {
        Manifest::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.version != MANIFEST_VERSION {
            return Err(ManifestError::Version(self.version));
        }
        if self.devices.is_empty() {
            return Err(ManifestError::Empty);
        }
        let mut seen = BTreeSet::new();
        for d in &self.devices {
            if !seen.insert(d.device_id.as_str()) {
                return Err(ManifestError::DuplicateDevice(d.device_id.clone()));
            }
        }
        Ok(())
    }

    pub fn cluster(&self) -> ClusterConfig {
        ClusterConfig {
            classical_nodes: self.classical_nodes,
            devices: self
                .devices
                .iter()
                .map(|d| DeviceSlot {
                    id: d.device_id.clone(),
                    gres: d.gres.clone(),
                })
                .collect(),
        }
    }
}

impl DeviceEntry {
    /// A simulator entry with default settings.
    pub fn simulator(device_id: &str, target: HardwareTarget, seed: u64) -> DeviceEntry {
        DeviceEntry {
            device_id: device_id.into(),
            modality: "simulator".into(),
            target,
            gres: default_gres(),
            config: SimulatorConfig {
                seed,
                ..SimulatorConfig::default()
            },
            latency_jitter_ticks: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{"device_id":"sim0","modality":"simulator",
        "target":{"native_gates":["rz","rx","cx"],"num_qubits":2,"connectivity":[[0,1]],"max_shots":1000}}"#;

    #[test]
    fn bare_and_wrapped_forms() {
        let bare = Manifest::from_json(&format!("[{ONE}]")).unwrap();
        assert_eq!(bare.devices[0].gres, "qc");
        assert_eq!(bare.classical_nodes, 16);
        let full = Manifest::from_json(&format!(r#"{{"classical_nodes":4,"devices":[{ONE}]}}"#)).unwrap();
        assert_eq!(full.cluster().classical_nodes, 4);
    }

    #[test]
    fn rejects_duplicates_and_junk() {
        assert!(matches!(
            Manifest::from_json(&format!("[{ONE},{ONE}]")),
            Err(ManifestError::DuplicateDevice(id)) if id == "sim0"
        ));
        assert!(matches!(Manifest::from_json("[]"), Err(ManifestError::Empty)));
        assert!(matches!(Manifest::from_json("{"), Err(ManifestError::Malformed(_))));
    }
}
