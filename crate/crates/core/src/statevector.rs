//! Ideal statevector simulation.

use alloc::vec;
use alloc::vec::Vec;

use crate::circuit::{Gate, GateKind, QuantumCircuit};
use crate::rng::SplitMix64;
use crate::unitary::{gate_matrix, C64};

pub const MAX_STATE_QUBITS: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StateError {
    #[error("{0} qubits exceeds the statevector limit of {MAX_STATE_QUBITS}")]
    TooManyQubits(usize),
    #[error("state needs at least one qubit")]
    ZeroQubits,
    #[error("gate acts on qubit {qubit} of a {num_qubits}-qubit state")]
    QubitOutOfRange { qubit: usize, num_qubits: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    num_qubits: usize,
    amps: Vec<C64>,
}

impl StateVector {
    /// `|0...0>` on `num_qubits` qubits.
    pub fn zero(num_qubits: usize) -> Result<StateVector, StateError> {
        if num_qubits == 0 {
            return Err(StateError::ZeroQubits);
        }
        if num_qubits > MAX_STATE_QUBITS {
            return Err(StateError::TooManyQubits(num_qubits));
        }
        let mut amps = vec![C64::new(0.0, 0.0); 1 << num_qubits];
        amps[0] = C64::new(1.0, 0.0);
        Ok(StateVector { num_qubits, amps })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn shift(&self, q: usize) -> usize {
        self.num_qubits - 1 - q
    }

    /// Applies `gate` in place. Measurement is a no-op here; terminal
    /// measurement is handled by [`sample_counts`].
    pub fn apply_gate(&mut self, gate: &Gate) -> Result<(), StateError> {
        for &q in gate.qubits() {
            if q >= self.num_qubits {
                return Err(StateError::QubitOutOfRange {
                    qubit: q,
                    num_qubits: self.num_qubits,
                });
            }
        }
        if gate.kind() == GateKind::Measure {
            return Ok(());
        }
        let m = gate_matrix(gate).expect("unitary gate");
        match gate.qubits() {
            [q] => {
                let stride = 1usize << self.shift(*q);
                let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
                for base in (0..self.amps.len()).filter(|i| i & stride == 0) {
                    let (x, y) = (self.amps[base], self.amps[base | stride]);
                    self.amps[base] = a * x + b * y;
                    self.amps[base | stride] = c * x + d * y;
                }
            }
            [hi, lo] => {
                let (sh, sl) = (1usize << self.shift(*hi), 1usize << self.shift(*lo));
                for base in (0..self.amps.len()).filter(|i| i & (sh | sl) == 0) {
                    let idx = [base, base | sl, base | sh, base | sh | sl];
                    let v = idx.map(|i| self.amps[i]);
                    for (r, &out) in idx.iter().enumerate() {
                        self.amps[out] = (0..4).map(|k| m[(r, k)] * v[k]).sum();
                    }
                }
            }
            _ => unreachable!("gates act on one or two qubits"),
        }
        Ok(())
    }

    pub fn apply_circuit(&mut self, circuit: &QuantumCircuit) -> Result<(), StateError> {
        for g in circuit.gates() {
            self.apply_gate(g)?;
        }
        Ok(())
    }

    /// Outcome probabilities over `qubits`, outcome bits ordered as given
    /// (first listed qubit is the high bit).
    pub fn marginal_probabilities(&self, qubits: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; 1 << qubits.len()];
        let shifts: Vec<usize> = qubits.iter().map(|&q| self.shift(q)).collect();
        for (i, a) in self.amps.iter().enumerate() {
            let k = shifts.iter().fold(0usize, |acc, &s| (acc << 1) | ((i >> s) & 1));
            out[k] += a.norm_sqr();
        }
        out
    }
}

/// Draws `shots` outcomes of `qubits` from `state` with inverse-CDF
/// sampling. Bitstrings list `qubits` left to right.
pub fn sample_counts(
    state: &StateVector,
    qubits: &[usize],
    shots: u64,
    rng: &mut SplitMix64,
) -> alloc::collections::BTreeMap<alloc::string::String, u64> {
    let probs = state.marginal_probabilities(qubits);
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cdf.push(acc);
    }
    let total = acc;
    let mut hits = vec![0u64; probs.len()];
    for _ in 0..shots {
        let u = rng.next_f64() * total;
        let mut k = cdf.partition_point(|&c| c <= u);
        if k >= probs.len() {
            k = probs.len() - 1;
        }
        // never report an outcome with zero probability
        while probs[k] == 0.0 && k > 0 {
            k -= 1;
        }
        hits[k] += 1;
    }
    let width = qubits.len();
    hits.into_iter()
        .enumerate()
        .filter(|(_, n)| *n > 0)
        .map(|(k, n)| (bitstring(k, width), n))
        .collect()
}

pub fn bitstring(value: usize, width: usize) -> alloc::string::String {
    (0..width)
        .map(|i| if (value >> (width - 1 - i)) & 1 == 1 { '1' } else { '0' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unitary::circuit_unitary;
    use core::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn hadamard_on_zero() {
        let mut s = StateVector::zero(1).unwrap();
        s.apply_gate(&Gate::h(0)).unwrap();
        for a in s.amplitudes() {
            assert!((a - C64::new(FRAC_1_SQRT_2, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn x_on_zero() {
        let mut s = StateVector::zero(1).unwrap();
        s.apply_gate(&Gate::x(0)).unwrap();
        assert_eq!(s.amplitudes(), &[C64::new(0.0, 0.0), C64::new(1.0, 0.0)]);
    }

    #[test]
    fn two_qubit_gate_respects_operand_order() {
        let c = QuantumCircuit::from_gates(3, [Gate::h(2), Gate::cx(2, 0), Gate::swap(0, 1), Gate::ry(1, 0.4)])
            .unwrap();
        let mut s = StateVector::zero(3).unwrap();
        s.apply_circuit(&c).unwrap();
        let col = circuit_unitary(&c).unwrap().column(0);
        for (a, b) in s.amplitudes().iter().zip(col) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_sizes_and_indices() {
        assert_eq!(StateVector::zero(25), Err(StateError::TooManyQubits(25)));
        assert_eq!(StateVector::zero(0), Err(StateError::ZeroQubits));
        let mut s = StateVector::zero(2).unwrap();
        assert!(s.apply_gate(&Gate::x(2)).is_err());
    }

    #[test]
    fn marginals_and_bitstrings() {
        let mut s = StateVector::zero(3).unwrap();
        s.apply_gate(&Gate::x(0)).unwrap();
        assert_eq!(s.marginal_probabilities(&[0]), vec![0.0, 1.0]);
        assert_eq!(s.marginal_probabilities(&[1, 0]), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(bitstring(0b011, 3), "011");
        let mut rng = SplitMix64::new(1);
        let counts = sample_counts(&s, &[0, 1, 2], 50, &mut rng);
        assert_eq!(counts.get("100"), Some(&50));
    }
}
