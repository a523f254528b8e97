//! Gate-list intermediate representation.
//!
//! Qubit 0 is the most significant bit of a basis-state index and the
//! leftmost character of every bitstring. The simulator, the unitary oracle
//! and measurement counts all share this convention.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    H,
    X,
    Y,
    Z,
    S,
    Sdg,
    T,
    Tdg,
    Rx,
    Ry,
    Rz,
    Cx,
    Swap,
    Measure,
}

impl GateKind {
    pub const ALL: [GateKind; 14] = [
        GateKind::H,
        GateKind::X,
        GateKind::Y,
        GateKind::Z,
        GateKind::S,
        GateKind::Sdg,
        GateKind::T,
        GateKind::Tdg,
        GateKind::Rx,
        GateKind::Ry,
        GateKind::Rz,
        GateKind::Cx,
        GateKind::Swap,
        GateKind::Measure,
    ];

    /// Lowercase mnemonic used by the text format.
    pub const fn name(self) -> &'static str {
        match self {
            GateKind::H => "h",
            GateKind::X => "x",
            GateKind::Y => "y",
            GateKind::Z => "z",
            GateKind::S => "s",
            GateKind::Sdg => "sdg",
            GateKind::T => "t",
            GateKind::Tdg => "tdg",
            GateKind::Rx => "rx",
            GateKind::Ry => "ry",
            GateKind::Rz => "rz",
            GateKind::Cx => "cx",
            GateKind::Swap => "swap",
            GateKind::Measure => "measure",
        }
    }

    pub fn from_name(name: &str) -> Option<GateKind> {
        GateKind::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const fn arity(self) -> usize {
        match self {
            GateKind::Cx | GateKind::Swap => 2,
            _ => 1,
        }
    }

    pub const fn is_rotation(self) -> bool {
        matches!(self, GateKind::Rx | GateKind::Ry | GateKind::Rz)
    }

    pub const fn is_two_qubit(self) -> bool {
        self.arity() == 2
    }

    /// The kind that undoes `self` when applied to the same qubits, for the
    /// fixed-angle gates. Rotations and measurement have none.
    pub const fn inverse_kind(self) -> Option<GateKind> {
        match self {
            GateKind::H
            | GateKind::X
            | GateKind::Y
            | GateKind::Z
            | GateKind::Cx
            | GateKind::Swap => Some(self),
            GateKind::S => Some(GateKind::Sdg),
            GateKind::Sdg => Some(GateKind::S),
            GateKind::T => Some(GateKind::Tdg),
            GateKind::Tdg => Some(GateKind::T),
            GateKind::Rx | GateKind::Ry | GateKind::Rz | GateKind::Measure => None,
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CircuitError {
    #[error("circuit must have at least one qubit")]
    ZeroQubits,
    #[error("qubit {qubit} out of range for {num_qubits}-qubit register")]
    QubitOutOfRange { qubit: usize, num_qubits: usize },
    #[error("gate {kind} repeats qubit {qubit}")]
    DuplicateQubit { kind: GateKind, qubit: usize },
    #[error("gate {kind} takes {expected} qubit(s), got {got}")]
    WrongArity {
        kind: GateKind,
        expected: usize,
        got: usize,
    },
    #[error("gate {0} requires an angle")]
    MissingParameter(GateKind),
    #[error("gate {0} takes no angle")]
    UnexpectedParameter(GateKind),
    #[error("angle for {0} is not finite")]
    NonFiniteParameter(GateKind),
    #[error("gate {kind} at index {index} follows a measurement")]
    GateAfterMeasure { index: usize, kind: GateKind },
    #[error("qubit {0} measured twice")]
    RepeatedMeasure(usize),
}

/// One gate application. Construction enforces arity, distinct operands and
/// the angle-iff-rotation rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    kind: GateKind,
    qubits: [usize; 2],
    param: Option<f64>,
}

impl Gate {
    pub fn new(kind: GateKind, qubits: &[usize], param: Option<f64>) -> Result<Gate, CircuitError> {
        if qubits.len() != kind.arity() {
            return Err(CircuitError::WrongArity {
                kind,
                expected: kind.arity(),
                got: qubits.len(),
            });
        }
        if qubits.len() == 2 && qubits[0] == qubits[1] {
            return Err(CircuitError::DuplicateQubit {
                kind,
                qubit: qubits[0],
            });
        }
        match (kind.is_rotation(), param) {
            (true, None) => return Err(CircuitError::MissingParameter(kind)),
            (false, Some(_)) => return Err(CircuitError::UnexpectedParameter(kind)),
            (true, Some(p)) if !p.is_finite() => return Err(CircuitError::NonFiniteParameter(kind)),
            _ => {}
        }
        let mut q = [qubits[0], 0];
        if qubits.len() == 2 {
            q[1] = qubits[1];
        }
        Ok(Gate {
            kind,
            qubits: q,
            param,
        })
    }

    fn fixed(kind: GateKind, q: usize) -> Gate {
        Gate {
            kind,
            qubits: [q, 0],
            param: None,
        }
    }

    /// # Panics
    /// Panics if `theta` is not finite.
    fn rotation(kind: GateKind, q: usize, theta: f64) -> Gate {
        assert!(theta.is_finite(), "rotation angle must be finite");
        Gate {
            kind,
            qubits: [q, 0],
            param: Some(theta),
        }
    }

    /// # Panics
    /// Panics if `a == b`.
    fn pair(kind: GateKind, a: usize, b: usize) -> Gate {
        assert_ne!(a, b, "two-qubit gate operands must differ");
        Gate {
            kind,
            qubits: [a, b],
            param: None,
        }
    }

    pub fn h(q: usize) -> Gate {
        Gate::fixed(GateKind::H, q)
    }
    pub fn x(q: usize) -> Gate {
        Gate::fixed(GateKind::X, q)
    }
    pub fn y(q: usize) -> Gate {
        Gate::fixed(GateKind::Y, q)
    }
    pub fn z(q: usize) -> Gate {
        Gate::fixed(GateKind::Z, q)
    }
    pub fn s(q: usize) -> Gate {
        Gate::fixed(GateKind::S, q)
    }
    pub fn sdg(q: usize) -> Gate {
        Gate::fixed(GateKind::Sdg, q)
    }
    pub fn t(q: usize) -> Gate {
        Gate::fixed(GateKind::T, q)
    }
    pub fn tdg(q: usize) -> Gate {
        Gate::fixed(GateKind::Tdg, q)
    }
    pub fn measure(q: usize) -> Gate {
        Gate::fixed(GateKind::Measure, q)
    }
    pub fn rx(q: usize, theta: f64) -> Gate {
        Gate::rotation(GateKind::Rx, q, theta)
    }
    pub fn ry(q: usize, theta: f64) -> Gate {
        Gate::rotation(GateKind::Ry, q, theta)
    }
    pub fn rz(q: usize, theta: f64) -> Gate {
        Gate::rotation(GateKind::Rz, q, theta)
    }
    pub fn cx(control: usize, target: usize) -> Gate {
        Gate::pair(GateKind::Cx, control, target)
    }
    pub fn swap(a: usize, b: usize) -> Gate {
        Gate::pair(GateKind::Swap, a, b)
    }

    pub fn kind(&self) -> GateKind {
        self.kind
    }

    pub fn qubits(&self) -> &[usize] {
        &self.qubits[..self.kind.arity()]
    }

    pub fn param(&self) -> Option<f64> {
        self.param
    }

    /// Same gate kind and angle on remapped operands.
    pub fn remapped(&self, map: impl Fn(usize) -> usize) -> Gate {
        let mut g = *self;
        for q in g.qubits.iter_mut().take(self.kind.arity()) {
            *q = map(*q);
        }
        g
    }

    /// The gate that undoes this one, or `None` for measurement.
    pub fn inverse(&self) -> Option<Gate> {
        if self.kind.is_rotation() {
            let mut g = *self;
            g.param = self.param.map(|p| -p);
            return Some(g);
        }
        self.kind.inverse_kind().map(|kind| Gate { kind, ..*self })
    }

    /// True when `other` applied right after `self` yields the identity for
    /// a fixed-angle gate pair on the same operands.
    pub fn cancels_with(&self, other: &Gate) -> bool {
        let Some(inv) = self.kind.inverse_kind() else {
            return false;
        };
        if inv != other.kind {
            return false;
        }
        match self.kind {
            // SWAP is symmetric in its operands; CX is not.
            GateKind::Swap => {
                let mut a = [self.qubits[0], self.qubits[1]];
                let mut b = [other.qubits[0], other.qubits[1]];
                a.sort_unstable();
                b.sort_unstable();
                a == b
            }
            _ => self.qubits() == other.qubits(),
        }
    }

    pub fn approx_eq(&self, other: &Gate, tol: f64) -> bool {
        if self.kind != other.kind || self.qubits() != other.qubits() {
            return false;
        }
        match (self.param, other.param) {
            (Some(a), Some(b)) => libm::fabs(a - b) <= tol,
            (None, None) => true,
            _ => false,
        }
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(p) = self.param {
            write!(f, "({p})")?;
        }
        let mut sep = " ";
        for q in self.qubits() {
            write!(f, "{sep}q[{q}]")?;
            sep = ",";
        }
        Ok(())
    }
}

/// Flat gate list over a single register. Measurements, when present, form
/// a trailing suffix and touch each qubit at most once.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumCircuit {
    num_qubits: usize,
    gates: Vec<Gate>,
    pub metadata: BTreeMap<String, String>,
}

impl QuantumCircuit {
    pub fn new(num_qubits: usize) -> Result<QuantumCircuit, CircuitError> {
        if num_qubits == 0 {
            return Err(CircuitError::ZeroQubits);
        }
        Ok(QuantumCircuit {
            num_qubits,
            gates: Vec::new(),
            metadata: BTreeMap::new(),
        })
    }

    pub fn from_gates(
        num_qubits: usize,
        gates: impl IntoIterator<Item = Gate>,
    ) -> Result<QuantumCircuit, CircuitError> {
        let mut c = QuantumCircuit::new(num_qubits)?;
        for g in gates {
            c.push(g)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, gate: Gate) -> Result<(), CircuitError> {
        for &q in gate.qubits() {
            if q >= self.num_qubits {
                return Err(CircuitError::QubitOutOfRange {
                    qubit: q,
                    num_qubits: self.num_qubits,
                });
            }
        }
        if let Some(last) = self.gates.last() {
            if last.kind() == GateKind::Measure {
                if gate.kind() != GateKind::Measure {
                    return Err(CircuitError::GateAfterMeasure {
                        index: self.gates.len(),
                        kind: gate.kind(),
                    });
                }
                let q = gate.qubits()[0];
                if self.measured_qubits().contains(&q) {
                    return Err(CircuitError::RepeatedMeasure(q));
                }
            }
        }
        self.gates.push(gate);
        Ok(())
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    /// Empty copy sharing width and metadata.
    pub fn empty_like(&self) -> QuantumCircuit {
        QuantumCircuit {
            num_qubits: self.num_qubits,
            gates: Vec::new(),
            metadata: self.metadata.clone(),
        }
    }

    /// Widens the register. Never shrinks.
    pub fn widen(&mut self, num_qubits: usize) {
        self.num_qubits = self.num_qubits.max(num_qubits);
    }

    pub fn has_measurements(&self) -> bool {
        self.gates.iter().any(|g| g.kind() == GateKind::Measure)
    }

    /// Qubits touched by the trailing measurement suffix, in statement order.
    pub fn measured_qubits(&self) -> Vec<usize> {
        self.gates
            .iter()
            .rev()
            .take_while(|g| g.kind() == GateKind::Measure)
            .map(|g| g.qubits()[0])
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect()
    }

    /// The gate list without its measurement suffix.
    pub fn unitary_part(&self) -> &[Gate] {
        let n = self
            .gates
            .iter()
            .rev()
            .take_while(|g| g.kind() == GateKind::Measure)
            .count();
        &self.gates[..self.gates.len() - n]
    }

    pub fn kinds(&self) -> BTreeSet<GateKind> {
        self.gates.iter().map(|g| g.kind()).collect()
    }

    /// Structural equality with angles compared to `tol`. Metadata must match
    /// exactly.
    pub fn approx_eq(&self, other: &QuantumCircuit, tol: f64) -> bool {
        self.num_qubits == other.num_qubits
            && self.metadata == other.metadata
            && self.gates.len() == other.gates.len()
            && self
                .gates
                .iter()
                .zip(&other.gates)
                .all(|(a, b)| a.approx_eq(b, tol))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TargetError {
    #[error("target must have at least one qubit")]
    ZeroQubits,
    #[error("native gate set is empty")]
    NoNativeGates,
    #[error("max_shots must be positive")]
    ZeroShots,
    #[error("connectivity edge ({0}, {1}) references a qubit outside the target")]
    EdgeOutOfRange(usize, usize),
    #[error("connectivity edge ({0}, {0}) is a self-loop")]
    SelfLoop(usize),
}

/// Device-facing constraints a circuit must satisfy before execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTarget", into = "RawTarget")]
pub struct HardwareTarget {
    native_gates: BTreeSet<GateKind>,
    num_qubits: usize,
    connectivity: BTreeSet<(usize, usize)>,
    max_shots: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTarget {
    native_gates: Vec<GateKind>,
    num_qubits: usize,
    #[serde(default)]
    connectivity: Vec<[usize; 2]>,
    max_shots: u64,
}

impl TryFrom<RawTarget> for HardwareTarget {
    type Error = TargetError;

    fn try_from(raw: RawTarget) -> Result<Self, Self::Error> {
        HardwareTarget::new(
            raw.native_gates,
            raw.num_qubits,
            raw.connectivity.into_iter().map(|[a, b]| (a, b)),
            raw.max_shots,
        )
    }
}

impl From<HardwareTarget> for RawTarget {
    fn from(t: HardwareTarget) -> Self {
        RawTarget {
            native_gates: t.native_gates.into_iter().collect(),
            num_qubits: t.num_qubits,
            connectivity: t.connectivity.into_iter().map(|(a, b)| [a, b]).collect(),
            max_shots: t.max_shots,
        }
    }
}

impl HardwareTarget {
    pub fn new(
        native_gates: impl IntoIterator<Item = GateKind>,
        num_qubits: usize,
        connectivity: impl IntoIterator<Item = (usize, usize)>,
        max_shots: u64,
    ) -> Result<HardwareTarget, TargetError> {
        if num_qubits == 0 {
            return Err(TargetError::ZeroQubits);
        }
        if max_shots == 0 {
            return Err(TargetError::ZeroShots);
        }
        let native_gates: BTreeSet<GateKind> = native_gates.into_iter().collect();
        if native_gates.is_empty() {
            return Err(TargetError::NoNativeGates);
        }
        let mut edges = BTreeSet::new();
        for (a, b) in connectivity {
            if a == b {
                return Err(TargetError::SelfLoop(a));
            }
            if a >= num_qubits || b >= num_qubits {
                return Err(TargetError::EdgeOutOfRange(a, b));
            }
            edges.insert((a.min(b), a.max(b)));
        }
        Ok(HardwareTarget {
            native_gates,
            num_qubits,
            connectivity: edges,
            max_shots,
        })
    }

    /// Linear nearest-neighbour chain `0-1-...-(n-1)`.
    pub fn line(
        native_gates: impl IntoIterator<Item = GateKind>,
        num_qubits: usize,
        max_shots: u64,
    ) -> Result<HardwareTarget, TargetError> {
        let edges = (1..num_qubits).map(|q| (q - 1, q));
        HardwareTarget::new(native_gates, num_qubits, edges, max_shots)
    }

    pub fn all_to_all(
        native_gates: impl IntoIterator<Item = GateKind>,
        num_qubits: usize,
        max_shots: u64,
    ) -> Result<HardwareTarget, TargetError> {
        let edges = (0..num_qubits).flat_map(|a| (a + 1..num_qubits).map(move |b| (a, b)));
        HardwareTarget::new(native_gates, num_qubits, edges, max_shots)
    }

    pub fn native_gates(&self) -> &BTreeSet<GateKind> {
        &self.native_gates
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn connectivity(&self) -> &BTreeSet<(usize, usize)> {
        &self.connectivity
    }

    pub fn max_shots(&self) -> u64 {
        self.max_shots
    }

    /// Measurement is always accepted; it is not a transpilation concern.
    pub fn is_native(&self, kind: GateKind) -> bool {
        kind == GateKind::Measure || self.native_gates.contains(&kind)
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.connectivity.contains(&(a.min(b), a.max(b)))
    }

    /// Neighbours of `q` in ascending order.
    pub fn neighbors(&self, q: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .connectivity
            .iter()
            .filter_map(|&(a, b)| {
                if a == q {
                    Some(b)
                } else if b == q {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = alloc::vec![false; self.num_qubits];
        let mut stack = alloc::vec![0usize];
        seen[0] = true;
        while let Some(q) = stack.pop() {
            for n in self.neighbors(q) {
                if !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// A gate set counts as universal when it has an entangling two-qubit
    /// gate (CX) and a continuous rotation. Single-qubit targets only need
    /// the rotation.
    pub fn is_universal(&self) -> bool {
        let rotation = self.native_gates.iter().any(|k| k.is_rotation());
        let entangler = self.native_gates.contains(&GateKind::Cx);
        rotation && (entangler || self.num_qubits == 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    TooManyQubits { circuit: usize, target: usize },
    NonNativeGate { index: usize, kind: GateKind },
    Connectivity { index: usize, qubits: [usize; 2] },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooManyQubits { circuit, target } => {
                write!(f, "circuit uses {circuit} qubits, target has {target}")
            }
            Violation::NonNativeGate { index, kind } => {
                write!(f, "gate {index}: non-native gate {kind}")
            }
            Violation::Connectivity { index, qubits } => write!(
                f,
                "gate {index}: qubits ({}, {}) are not connected",
                qubits[0], qubits[1]
            ),
        }
    }
}

/// Every reason `circuit` cannot run on `target` as-is. Empty means valid.
pub fn validate_against_target(circuit: &QuantumCircuit, target: &HardwareTarget) -> Vec<Violation> {
    let mut out = Vec::new();
    if circuit.num_qubits() > target.num_qubits() {
        out.push(Violation::TooManyQubits {
            circuit: circuit.num_qubits(),
            target: target.num_qubits(),
        });
    }
    for (index, g) in circuit.gates().iter().enumerate() {
        if !target.is_native(g.kind()) {
            out.push(Violation::NonNativeGate {
                index,
                kind: g.kind(),
            });
        }
        if g.kind().is_two_qubit() {
            let q = g.qubits();
            if !target.are_adjacent(q[0], q[1]) {
                out.push(Violation::Connectivity {
                    index,
                    qubits: [q[0], q[1]],
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CountsError {
    #[error("shots must be positive")]
    ZeroShots,
    #[error("counts sum to {sum}, expected {shots}")]
    SumMismatch { sum: u64, shots: u64 },
    #[error("bitstring {0:?} has inconsistent width or non-binary characters")]
    BadBitstring(String),
}

/// Histogram of measured bitstrings, qubit 0 leftmost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawCounts", into = "RawCounts")]
pub struct MeasurementCounts {
    shots: u64,
    counts: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct RawCounts {
    shots: u64,
    counts: BTreeMap<String, u64>,
}

impl TryFrom<RawCounts> for MeasurementCounts {
    type Error = CountsError;
    fn try_from(raw: RawCounts) -> Result<Self, Self::Error> {
        MeasurementCounts::new(raw.shots, raw.counts)
    }
}

impl From<MeasurementCounts> for RawCounts {
    fn from(c: MeasurementCounts) -> Self {
        RawCounts {
            shots: c.shots,
            counts: c.counts,
        }
    }
}

impl MeasurementCounts {
    pub fn new(shots: u64, counts: BTreeMap<String, u64>) -> Result<MeasurementCounts, CountsError> {
        if shots == 0 {
            return Err(CountsError::ZeroShots);
        }
        let mut width = None;
        for key in counts.keys() {
            if !key.bytes().all(|b| b == b'0' || b == b'1') || *width.get_or_insert(key.len()) != key.len() {
                return Err(CountsError::BadBitstring(key.clone()));
            }
        }
        let sum: u64 = counts.values().sum();
        if sum != shots {
            return Err(CountsError::SumMismatch { sum, shots });
        }
        // zero entries carry no information and would break map equality
        let counts = counts.into_iter().filter(|(_, v)| *v > 0).collect();
        Ok(MeasurementCounts { shots, counts })
    }

    pub fn shots(&self) -> u64 {
        self.shots
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn get(&self, bits: &str) -> u64 {
        self.counts.get(bits).copied().unwrap_or(0)
    }

    /// Bitstring width, or `None` when no outcome was recorded.
    pub fn width(&self) -> Option<usize> {
        self.counts.keys().next().map(|k| k.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn bell() -> QuantumCircuit {
        QuantumCircuit::from_gates(2, [Gate::h(0), Gate::cx(0, 1)]).unwrap()
    }

    #[test]
    fn gate_construction_rules() {
        assert!(Gate::new(GateKind::Cx, &[1, 1], None).is_err());
        assert!(Gate::new(GateKind::Rz, &[0], None).is_err());
        assert!(Gate::new(GateKind::H, &[0], Some(1.0)).is_err());
        assert!(Gate::new(GateKind::Rx, &[0], Some(f64::NAN)).is_err());
        assert!(Gate::new(GateKind::Swap, &[0], None).is_err());
        assert_eq!(Gate::new(GateKind::Cx, &[0, 2], None).unwrap(), Gate::cx(0, 2));
    }

    #[test]
    fn measurement_must_be_suffix() {
        let mut c = QuantumCircuit::new(2).unwrap();
        c.push(Gate::h(0)).unwrap();
        c.push(Gate::measure(0)).unwrap();
        assert!(matches!(c.push(Gate::x(1)), Err(CircuitError::GateAfterMeasure { .. })));
        assert_eq!(c.push(Gate::measure(0)), Err(CircuitError::RepeatedMeasure(0)));
        c.push(Gate::measure(1)).unwrap();
        assert_eq!(c.measured_qubits(), vec![0, 1]);
        assert_eq!(c.unitary_part().len(), 1);
    }

    #[test]
    fn out_of_range_qubit_rejected() {
        let mut c = QuantumCircuit::new(2).unwrap();
        assert_eq!(
            c.push(Gate::x(2)),
            Err(CircuitError::QubitOutOfRange {
                qubit: 2,
                num_qubits: 2
            })
        );
        assert_eq!(QuantumCircuit::new(0), Err(CircuitError::ZeroQubits));
    }

    #[test]
    fn cancellation_pairs() {
        assert!(Gate::h(0).cancels_with(&Gate::h(0)));
        assert!(Gate::s(1).cancels_with(&Gate::sdg(1)));
        assert!(Gate::tdg(1).cancels_with(&Gate::t(1)));
        assert!(Gate::swap(0, 1).cancels_with(&Gate::swap(1, 0)));
        assert!(!Gate::cx(0, 1).cancels_with(&Gate::cx(1, 0)));
        assert!(!Gate::s(0).cancels_with(&Gate::s(0)));
        assert!(!Gate::rz(0, 1.0).cancels_with(&Gate::rz(0, -1.0)));
    }

    #[test]
    fn validate_bell_on_matching_target() {
        let t = HardwareTarget::new([GateKind::H, GateKind::Cx], 2, [(0, 1)], 1000).unwrap();
        assert!(validate_against_target(&bell(), &t).is_empty());
    }

    #[test]
    fn validate_reports_missing_edge() {
        let t = HardwareTarget::new([GateKind::H, GateKind::Cx], 2, [], 1000).unwrap();
        assert_eq!(
            validate_against_target(&bell(), &t),
            vec![Violation::Connectivity {
                index: 1,
                qubits: [0, 1]
            }]
        );
    }

    #[test]
    fn validate_reports_non_native_gate() {
        let c = QuantumCircuit::from_gates(1, [Gate::t(0)]).unwrap();
        let t = HardwareTarget::new([GateKind::H, GateKind::Cx, GateKind::Rz], 1, [], 1000).unwrap();
        assert_eq!(
            validate_against_target(&c, &t),
            vec![Violation::NonNativeGate {
                index: 0,
                kind: GateKind::T
            }]
        );
    }

    #[test]
    fn validate_reports_width() {
        let t = HardwareTarget::new([GateKind::H, GateKind::Cx], 1, [], 1000).unwrap();
        let v = validate_against_target(&bell(), &t);
        assert!(v.contains(&Violation::TooManyQubits {
            circuit: 2,
            target: 1
        }));
    }

    #[test]
    fn target_invariants() {
        assert_eq!(
            HardwareTarget::new([GateKind::Cx], 2, [(0, 2)], 10),
            Err(TargetError::EdgeOutOfRange(0, 2))
        );
        assert_eq!(HardwareTarget::new([], 2, [], 10), Err(TargetError::NoNativeGates));
        assert_eq!(HardwareTarget::new([GateKind::Cx], 2, [(1, 1)], 10), Err(TargetError::SelfLoop(1)));
        let t = HardwareTarget::new([GateKind::Cx, GateKind::Rz], 3, [(1, 0), (2, 1)], 10).unwrap();
        assert!(t.are_adjacent(0, 1) && t.are_adjacent(1, 0) && !t.are_adjacent(0, 2));
        assert!(t.is_connected());
        assert!(t.is_universal());
        let disconnected = HardwareTarget::new([GateKind::Cx], 3, [(0, 1)], 10).unwrap();
        assert!(!disconnected.is_connected());
        assert!(!disconnected.is_universal());
    }

    #[test]
    fn counts_validation() {
        let mut m = BTreeMap::new();
        m.insert("00".into(), 3);
        m.insert("11".into(), 7);
        let c = MeasurementCounts::new(10, m.clone()).unwrap();
        assert_eq!(c.get("11"), 7);
        assert_eq!(c.width(), Some(2));
        assert!(MeasurementCounts::new(11, m.clone()).is_err());
        m.insert("1".into(), 0);
        assert!(MeasurementCounts::new(10, m).is_err());
    }
}
