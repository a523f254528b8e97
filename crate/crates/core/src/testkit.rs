//! Seeded workload generators shared by tests, the acceptance suite and
//! the fuzzing harness.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::circuit::{Gate, GateKind, QuantumCircuit};
use crate::rng::SplitMix64;

/// Uniform integer in `0..n`.
pub fn below(rng: &mut SplitMix64, n: u64) -> u64 {
    // modulo bias is irrelevant at test scale
    rng.next_u64() % n
}

/// Random gate over `num_qubits` qubits, never a measurement. Angles mix
/// arbitrary values with exact multiples of pi/4 so that merges hit zero.
pub fn random_gate(rng: &mut SplitMix64, num_qubits: usize) -> Gate {
    let unitary_kinds = &GateKind::ALL[..13];
    loop {
        let kind = unitary_kinds[below(rng, unitary_kinds.len() as u64) as usize];
        if kind.is_two_qubit() && num_qubits < 2 {
            continue;
        }
        let a = below(rng, num_qubits as u64) as usize;
        let qubits = if kind.is_two_qubit() {
            let mut b = below(rng, num_qubits as u64 - 1) as usize;
            if b >= a {
                b += 1;
            }
            alloc::vec![a, b]
        } else {
            alloc::vec![a]
        };
        let param = kind.is_rotation().then(|| {
            if rng.next_u64() % 3 == 0 {
                (below(rng, 16) as f64 - 8.0) * PI / 4.0
            } else {
                (rng.next_f64() * 2.0 - 1.0) * 2.0 * PI
            }
        });
        return Gate::new(kind, &qubits, param).expect("generated gate is well formed");
    }
}

/// Random circuit without measurements. Every third gate, when possible,
/// is the inverse or a same-axis rotation of its predecessor so reduction
/// passes have work to do.
pub fn random_circuit(rng: &mut SplitMix64, num_qubits: usize, num_gates: usize) -> QuantumCircuit {
    let mut gates: Vec<Gate> = Vec::with_capacity(num_gates);
    while gates.len() < num_gates {
        let g = match gates.last() {
            Some(prev) if rng.next_u64() % 3 == 0 => {
                if prev.kind().is_rotation() {
                    Gate::new(prev.kind(), prev.qubits(), Some(rng.next_f64() * PI)).expect("rotation")
                } else {
                    prev.inverse().expect("no measurements generated")
                }
            }
            _ => random_gate(rng, num_qubits),
        };
        gates.push(g);
    }
    QuantumCircuit::from_gates(num_qubits, gates).expect("generated gates are in range")
}

/// Appends a measurement of every qubit.
pub fn measure_all(mut c: QuantumCircuit) -> QuantumCircuit {
    for q in 0..c.num_qubits() {
        c.push(Gate::measure(q)).expect("measure suffix");
    }
    c
}
