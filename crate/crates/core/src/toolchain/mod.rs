//! Runtime circuit-processing pipeline: reduction passes followed by
//! target-specific transpilation.

mod passes;
mod routing;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::circuit::{validate_against_target, GateKind, HardwareTarget, QuantumCircuit, Violation};

pub use passes::{
    cancel_inverse_pairs, decompose_to_target, merge_rotations, normalize_angle, rewrite_rule, DEFAULT_EPSILON,
};
pub use routing::{format_layout, read_layout, route_connectivity, shortest_path};

/// Metadata key listing the applied passes, comma separated.
pub const PASSES_KEY: &str = "pipeline.passes";
/// Metadata key listing the gate count before the first pass and after each
/// pass, comma separated.
pub const GATE_COUNTS_KEY: &str = "pipeline.gate_counts";

pub const PIPELINE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassName {
    CancelInversePairs,
    MergeRotations,
    DecomposeToTarget,
    RouteConnectivity,
    CircuitCutStub,
}

impl PassName {
    pub const fn as_str(self) -> &'static str {
        match self {
            PassName::CancelInversePairs => "cancel_inverse_pairs",
            PassName::MergeRotations => "merge_rotations",
            PassName::DecomposeToTarget => "decompose_to_target",
            PassName::RouteConnectivity => "route_connectivity",
            PassName::CircuitCutStub => "circuit_cut_stub",
        }
    }

    pub const fn needs_target(self) -> bool {
        matches!(self, PassName::DecomposeToTarget | PassName::RouteConnectivity)
    }

    /// Reduction passes never add gates.
    pub const fn is_reduction(self) -> bool {
        matches!(self, PassName::CancelInversePairs | PassName::MergeRotations)
    }
}

impl fmt::Display for PassName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassSpec {
    pub name: PassName,
    #[serde(default)]
    pub options: BTreeMap<String, serde_json::Value>,
}

impl PassSpec {
    pub fn new(name: PassName) -> PassSpec {
        PassSpec {
            name,
            options: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolPipelineSpec {
    #[serde(default = "default_version")]
    pub version: u32,
    pub passes: Vec<PassSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<HardwareTarget>,
}

fn default_version() -> u32 {
    PIPELINE_VERSION
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PassError {
    #[error("target cannot express gate {0}")]
    UnsupportedTarget(GateKind),
    #[error("target connectivity graph is disconnected")]
    DisconnectedTarget,
    #[error("circuit has {circuit} qubits, target has {target}")]
    TooManyQubits { circuit: usize, target: usize },
    #[error("unimplemented pass")]
    Unimplemented,
    #[error("bad option: {0}")]
    BadOption(String),
    #[error("internal pass error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid pipeline: {0}")]
    InvalidSpec(String),
    #[error("pass {index} ({name}) failed: {source}")]
    PassFailed {
        index: usize,
        name: PassName,
        source: PassError,
    },
    #[error("pipeline output violates the target: {}", list_violations(.0))]
    TargetViolations(Vec<Violation>),
}

fn list_violations(v: &[Violation]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    parts.join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassStat {
    pub name: PassName,
    pub gates_before: usize,
    pub gates_after: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub passes: Vec<PassStat>,
}

impl ToolPipelineSpec {
    pub fn new(passes: impl IntoIterator<Item = PassName>, target: Option<HardwareTarget>) -> ToolPipelineSpec {
        ToolPipelineSpec {
            version: PIPELINE_VERSION,
            passes: passes.into_iter().map(PassSpec::new).collect(),
            target,
        }
    }

    pub fn from_json(text: &str) -> Result<ToolPipelineSpec, PipelineError> {
        let spec: ToolPipelineSpec =
            serde_json::from_str(text).map_err(|e| PipelineError::InvalidSpec(format!("{e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.version != PIPELINE_VERSION {
            return Err(PipelineError::InvalidSpec(format!(
                "unsupported version {}",
                self.version
            )));
        }
        let decomposes = self
            .passes
            .iter()
            .filter(|p| p.name == PassName::DecomposeToTarget)
            .count();
        if decomposes > 1 {
            return Err(PipelineError::InvalidSpec("at most one decompose_to_target pass".into()));
        }
        if self.target.is_none() {
            if let Some(p) = self.passes.iter().find(|p| p.name.needs_target()) {
                return Err(PipelineError::InvalidSpec(format!("{} requires a target", p.name)));
            }
        }
        for (index, p) in self.passes.iter().enumerate() {
            pass_epsilon(p).map_err(|source| PipelineError::PassFailed {
                index,
                name: p.name,
                source,
            })?;
        }
        Ok(())
    }

    /// The same passes with decompose and route appended when missing, all
    /// aimed at `target`.
    pub fn with_final_stage(&self, target: &HardwareTarget) -> ToolPipelineSpec {
        let mut out = self.clone();
        out.target = Some(target.clone());
        for name in [PassName::DecomposeToTarget, PassName::RouteConnectivity] {
            if !out.passes.iter().any(|p| p.name == name) {
                out.passes.push(PassSpec::new(name));
            }
        }
        out
    }

    pub fn pass_list(&self) -> String {
        let names: Vec<&str> = self.passes.iter().map(|p| p.name.as_str()).collect();
        names.join(",")
    }
}

/// Checks the option map and returns the merge tolerance.
fn pass_epsilon(p: &PassSpec) -> Result<f64, PassError> {
    let mut eps = DEFAULT_EPSILON;
    for (key, value) in &p.options {
        match (p.name, key.as_str()) {
            (PassName::MergeRotations, "epsilon") => {
                eps = value
                    .as_f64()
                    .filter(|e| e.is_finite() && *e >= 0.0)
                    .ok_or_else(|| PassError::BadOption(format!("epsilon must be a non-negative number, got {value}")))?;
            }
            _ => return Err(PassError::BadOption(format!("{} has no option `{key}`", p.name))),
        }
    }
    Ok(eps)
}

/// Runs one pass. `target` must be present for passes that need it.
pub fn apply_pass(
    spec: &PassSpec,
    c: &QuantumCircuit,
    target: Option<&HardwareTarget>,
) -> Result<QuantumCircuit, PassError> {
    let eps = pass_epsilon(spec)?;
    let need = || target.ok_or_else(|| PassError::BadOption(format!("{} requires a target", spec.name)));
    match spec.name {
        PassName::CancelInversePairs => Ok(cancel_inverse_pairs(c)),
        PassName::MergeRotations => Ok(merge_rotations(c, eps)),
        PassName::DecomposeToTarget => decompose_to_target(c, need()?),
        PassName::RouteConnectivity => route_connectivity(c, need()?),
        PassName::CircuitCutStub => Err(PassError::Unimplemented),
    }
}

/// Applies the passes in order, records per-pass gate counts in the output
/// metadata, and checks the result against the target when one is given.
pub fn run_pipeline(
    p: &ToolPipelineSpec,
    c: &QuantumCircuit,
) -> Result<(QuantumCircuit, PipelineStats), PipelineError> {
    p.validate()?;
    let mut cur = c.clone();
    let mut stats = PipelineStats::default();
    let mut counts = Vec::with_capacity(p.passes.len() + 1);
    counts.push(format!("{}", cur.len()));
    for (index, spec) in p.passes.iter().enumerate() {
        let before = cur.len();
        cur = apply_pass(spec, &cur, p.target.as_ref()).map_err(|source| PipelineError::PassFailed {
            index,
            name: spec.name,
            source,
        })?;
        stats.passes.push(PassStat {
            name: spec.name,
            gates_before: before,
            gates_after: cur.len(),
        });
        counts.push(format!("{}", cur.len()));
    }
    if let Some(t) = &p.target {
        let violations = validate_against_target(&cur, t);
        if !violations.is_empty() {
            return Err(PipelineError::TargetViolations(violations));
        }
    }
    cur.metadata.insert(PASSES_KEY.into(), p.pass_list());
    cur.metadata.insert(GATE_COUNTS_KEY.into(), counts.join(","));
    Ok((cur, stats))
}
