//! Simulator execution model: sampling, duration estimates and the synthetic
//! calibration drift reported by simulated devices.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::circuit::{GateKind, MeasurementCounts, QuantumCircuit};
use crate::rng::SplitMix64;
use crate::statevector::{sample_counts, StateError, StateVector, MAX_STATE_QUBITS};
use crate::Tick;

/// Circuit metadata key holding the logical-to-physical layout written by
/// routing, as comma-separated physical indices.
pub const LAYOUT_KEY: &str = "layout";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub seed: u64,
    pub max_qubits: usize,
    pub gate_latency_ticks: u64,
    pub calibration_period_ticks: Option<u64>,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            seed: 0,
            max_qubits: MAX_STATE_QUBITS,
            gate_latency_ticks: 1,
            calibration_period_ticks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("max_qubits {0} exceeds the simulator limit of {MAX_STATE_QUBITS}")]
    ConfigQubits(usize),
    #[error("circuit needs {needed} qubits, budget is {budget}")]
    QubitBudgetExceeded { needed: usize, budget: usize },
    #[error("shots must be positive")]
    ZeroShots,
    #[error("bad layout metadata: {0}")]
    BadLayout(String),
    #[error(transparent)]
    State(#[from] StateError),
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.max_qubits == 0 || self.max_qubits > MAX_STATE_QUBITS {
            return Err(SimError::ConfigQubits(self.max_qubits));
        }
        Ok(())
    }
}

/// `gates * gate_latency + ceil(shots / 1000)` ticks.
pub fn estimate_duration(circuit: &QuantumCircuit, shots: u64, config: &SimulatorConfig) -> Tick {
    circuit.len() as u64 * config.gate_latency_ticks + shots.div_ceil(1000)
}

/// Physical qubits to read, in output bit order (logical qubit 0 first).
///
/// Without a layout, logical and physical indices coincide. With a routing
/// layout, logical qubit `i` lives on physical `layout[i]`. Without
/// measurement statements every logical qubit is read.
pub fn measurement_plan(circuit: &QuantumCircuit) -> Result<Vec<usize>, SimError> {
    let layout: Vec<usize> = match circuit.metadata.get(LAYOUT_KEY) {
        None => (0..circuit.num_qubits()).collect(),
        Some(text) => {
            let parsed: Result<Vec<usize>, _> = text.split(',').map(|s| s.trim().parse::<usize>()).collect();
            let parsed = parsed.map_err(|_| SimError::BadLayout(text.clone()))?;
            let mut seen = alloc::collections::BTreeSet::new();
            if parsed.is_empty()
                || parsed.iter().any(|&p| p >= circuit.num_qubits() || !seen.insert(p))
            {
                return Err(SimError::BadLayout(text.clone()));
            }
            parsed
        }
    };
    if !circuit.has_measurements() {
        return Ok(layout);
    }
    let measured = circuit.measured_qubits();
    Ok(layout.into_iter().filter(|p| measured.contains(p)).collect())
}

/// Samples `shots` outcomes of the ideal final state. Identical
/// `(circuit, shots, seed)` always produce identical counts.
pub fn run_task(
    circuit: &QuantumCircuit,
    shots: u64,
    seed: u64,
    config: &SimulatorConfig,
) -> Result<MeasurementCounts, SimError> {
    config.validate()?;
    if shots == 0 {
        return Err(SimError::ZeroShots);
    }
    if circuit.num_qubits() > config.max_qubits {
        return Err(SimError::QubitBudgetExceeded {
            needed: circuit.num_qubits(),
            budget: config.max_qubits,
        });
    }
    let plan = measurement_plan(circuit)?;
    let mut state = StateVector::zero(circuit.num_qubits())?;
    state.apply_circuit(circuit)?;
    let mut rng = SplitMix64::new(seed);
    let counts = sample_counts(&state, &plan, shots, &mut rng);
    Ok(MeasurementCounts::new(shots, counts).expect("sampler output is consistent"))
}

/// Default per-gate error rates for a fresh simulated device.
pub fn initial_error_rates(natives: impl IntoIterator<Item = GateKind>) -> BTreeMap<GateKind, f64> {
    natives
        .into_iter()
        .map(|k| {
            let base = match k {
                GateKind::Cx | GateKind::Swap => 1e-2,
                GateKind::Measure => 2e-2,
                _ => 1e-3,
            };
            (k, base)
        })
        .collect()
}

/// Seeded calibration drift: each rate is scaled by a factor drawn
/// uniformly from `[0.9, 1.1]` and clamped to `[0, 1]`.
pub fn perturb_error_rates(rates: &mut BTreeMap<GateKind, f64>, rng: &mut SplitMix64) {
    for rate in rates.values_mut() {
        let factor = 0.9 + 0.2 * rng.next_f64();
        *rate = (*rate * factor).clamp(0.0, 1.0);
    }
}

/// True when a device with this calibration period recalibrates at `now`.
/// Tick 0 is the registration-time calibration and never fires.
pub fn calibration_due(period: Option<Tick>, now: Tick) -> bool {
    matches!(period, Some(p) if p > 0 && now > 0 && now % p == 0)
}
