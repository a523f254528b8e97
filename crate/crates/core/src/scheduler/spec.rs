use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::Tick;

pub type JobId = u64;

pub const JOBSPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMode {
    /// Nodes and devices granted together for the whole job.
    Simultaneous,
    /// Independent per-stage grants along `chain`.
    Interleaved,
}

/// Advisory resource-usage pattern. Recorded, never used for placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    HighQLowC,
    LowQHighC,
    #[default]
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalRequest {
    pub nodes: u32,
    pub walltime_ticks: Tick,
}

/// Generic-resource request, `kind` in `name[:type]` form (e.g. `qc:QC`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GresRequest {
    pub kind: String,
    pub count: u32,
}

impl GresRequest {
    /// A bare name matches every typed resource of that name.
    pub fn matches(&self, device_gres: &str) -> bool {
        device_gres == self.kind
            || (!self.kind.contains(':') && device_gres.split(':').next() == Some(self.kind.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantumRequest {
    pub gres: GresRequest,
    pub walltime_ticks: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Classical,
    Quantum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub kind: StageKind,
    /// Defaults to the walltime of the matching component.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walltime_ticks: Option<Tick>,
}

/// Credit account and activation-bound parameters for the job's quantum
/// task queue. Costs are in device ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QosSpec {
    pub initial_credits: u64,
    pub replenish_per_tick: u64,
    pub cap: u64,
    pub activation_bound_ticks: Tick,
    pub max_task_cost: u64,
}

impl Default for QosSpec {
    fn default() -> Self {
        QosSpec {
            initial_credits: 1000,
            replenish_per_tick: 1,
            cap: 1000,
            activation_bound_ticks: 1000,
            max_task_cost: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridJobSpec {
    #[serde(default = "default_version")]
    pub version: u32,
    /// Requested id; assigned by the scheduler when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<JobId>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub classical: ClassicalRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantum: Option<QuantumRequest>,
    pub mode: AllocationMode,
    #[serde(default)]
    pub pattern: Pattern,
    #[serde(default)]
    pub priority: i32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chain: Vec<Stage>,
    #[serde(default)]
    pub qos: QosSpec,
}

fn default_version() -> u32 {
    JOBSPEC_VERSION
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("malformed job spec: {0}")]
    Malformed(String),
    #[error("request exceeds total capacity: {0}")]
    Oversubscribed(String),
    #[error("job id {0} already in use")]
    DuplicateJobId(JobId),
}

fn malformed(msg: impl Into<String>) -> SubmitError {
    SubmitError::Malformed(msg.into())
}

impl HybridJobSpec {
    pub fn from_json(text: &str) -> Result<HybridJobSpec, SubmitError> {
        let spec: HybridJobSpec = serde_json::from_str(text).map_err(|e| malformed(format!("{e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Structural checks that do not depend on the cluster.
    pub fn validate(&self) -> Result<(), SubmitError> {
        if self.version != JOBSPEC_VERSION {
            return Err(malformed(format!("unsupported version {}", self.version)));
        }
        if self.classical.nodes == 0 {
            return Err(malformed("classical.nodes must be positive"));
        }
        if self.classical.walltime_ticks == 0 {
            return Err(malformed("classical.walltime_ticks must be positive"));
        }
        if let Some(q) = &self.quantum {
            if q.gres.count == 0 {
                return Err(malformed("quantum.gres.count must be positive"));
            }
            if q.gres.kind.is_empty() {
                return Err(malformed("quantum.gres.kind must be non-empty"));
            }
            if q.walltime_ticks == 0 {
                return Err(malformed("quantum.walltime_ticks must be positive"));
            }
        }
        match self.mode {
            AllocationMode::Simultaneous => {
                if self.quantum.is_none() {
                    return Err(malformed("simultaneous mode needs a quantum component"));
                }
                if !self.chain.is_empty() {
                    return Err(malformed("chain is only meaningful in interleaved mode"));
                }
            }
            AllocationMode::Interleaved => {
                if self.chain.is_empty() {
                    return Err(malformed("interleaved mode needs a non-empty chain"));
                }
                for (i, s) in self.chain.iter().enumerate() {
                    if s.kind == StageKind::Quantum && self.quantum.is_none() {
                        return Err(malformed(format!("stage {i} is quantum but no quantum component is declared")));
                    }
                    if s.walltime_ticks == Some(0) {
                        return Err(malformed(format!("stage {i} has zero walltime")));
                    }
                }
            }
        }
        let q = &self.qos;
        if q.activation_bound_ticks == 0 {
            return Err(malformed("qos.activation_bound_ticks must be positive"));
        }
        if q.max_task_cost == 0 {
            return Err(malformed("qos.max_task_cost must be positive"));
        }
        if q.cap < q.max_task_cost && self.quantum.is_some() {
            return Err(malformed("qos.cap must cover qos.max_task_cost"));
        }
        Ok(())
    }

    /// Whole-job lifetime in simultaneous mode.
    pub fn simultaneous_lifetime(&self) -> Tick {
        let q = self.quantum.as_ref().map_or(0, |q| q.walltime_ticks);
        self.classical.walltime_ticks.max(q)
    }

    pub fn stage_walltime(&self, stage: &Stage) -> Tick {
        stage.walltime_ticks.unwrap_or(match stage.kind {
            StageKind::Classical => self.classical.walltime_ticks,
            StageKind::Quantum => self.quantum.as_ref().map_or(1, |q| q.walltime_ticks),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HETJOB: &str = r#"{
        "version": 1,
        "name": "vqls",
        "classical": {"nodes": 10, "walltime_ticks": 600},
        "quantum": {"gres": {"kind": "qc:QC", "count": 1}, "walltime_ticks": 600},
        "mode": "simultaneous",
        "pattern": "high_q_low_c"
    }"#;

    #[test]
    fn hetjob_spec_parses() {
        let s = HybridJobSpec::from_json(HETJOB).unwrap();
        assert_eq!(s.classical.nodes, 10);
        assert_eq!(s.quantum.as_ref().unwrap().gres.count, 1);
        assert_eq!(s.pattern, Pattern::HighQLowC);
        assert_eq!(s.simultaneous_lifetime(), 600);
    }

    #[test]
    fn structural_rejections() {
        let classical_only = r#"{"classical":{"nodes":1,"walltime_ticks":5},"mode":"simultaneous"}"#;
        assert!(HybridJobSpec::from_json(classical_only).is_err());
        let ok = r#"{"classical":{"nodes":1,"walltime_ticks":5},"mode":"interleaved","chain":[{"kind":"classical"}]}"#;
        assert!(HybridJobSpec::from_json(ok).is_ok());
        let dangling = r#"{"classical":{"nodes":1,"walltime_ticks":5},"mode":"interleaved","chain":[{"kind":"quantum"}]}"#;
        assert!(HybridJobSpec::from_json(dangling).is_err());
        assert!(HybridJobSpec::from_json("{").is_err());
        assert!(HybridJobSpec::from_json(&HETJOB.replace("\"version\": 1", "\"version\": 2")).is_err());
    }

    #[test]
    fn gres_matching() {
        let g = GresRequest {
            kind: "qc".into(),
            count: 1,
        };
        assert!(g.matches("qc"));
        assert!(g.matches("qc:QC"));
        assert!(!g.matches("qcx"));
        let typed = GresRequest {
            kind: "qc:QC".into(),
            count: 1,
        };
        assert!(typed.matches("qc:QC"));
        assert!(!typed.matches("qc:SIM"));
    }
}
