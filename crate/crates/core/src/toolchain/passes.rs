use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};

use crate::circuit::{Gate, GateKind, HardwareTarget, QuantumCircuit};

use super::PassError;

/// Angles within this distance of a multiple of 2*pi count as zero.
pub const DEFAULT_EPSILON: f64 = 1e-12;

fn rebuild(template: &QuantumCircuit, gates: Vec<Gate>) -> QuantumCircuit {
    let mut out = template.empty_like();
    for g in gates {
        out.push(g).expect("pass output keeps the input's qubits and measurement suffix");
    }
    out
}

/// Removes adjacent `(g, g^-1)` pairs until none remain. A stack makes a
/// single scan reach the fixpoint: removing a pair exposes the previous
/// survivor to the next gate.
pub fn cancel_inverse_pairs(c: &QuantumCircuit) -> QuantumCircuit {
    let mut stack: Vec<Gate> = Vec::with_capacity(c.len());
    for g in c.gates() {
        match stack.last() {
            Some(top) if top.cancels_with(g) => {
                stack.pop();
            }
            _ => stack.push(*g),
        }
    }
    rebuild(c, stack)
}

/// `x mod 2*pi` mapped into `(-pi, pi]`.
pub fn normalize_angle(x: f64) -> f64 {
    let mut r = libm::fmod(x, TAU);
    if r > PI {
        r -= TAU;
    } else if r <= -PI {
        r += TAU;
    }
    r
}

fn is_zero_angle(theta: f64, epsilon: f64) -> bool {
    libm::fabs(normalize_angle(theta)) <= epsilon
}

/// Fuses adjacent same-axis rotations on the same qubit and drops rotations
/// that are a full turn. Fused angles are reduced into `(-pi, pi]`, which
/// changes the unitary by at most a sign.
pub fn merge_rotations(c: &QuantumCircuit, epsilon: f64) -> QuantumCircuit {
    let mut stack: Vec<Gate> = Vec::with_capacity(c.len());
    for g in c.gates() {
        if !g.kind().is_rotation() {
            stack.push(*g);
            continue;
        }
        let theta = g.param().expect("rotation angle");
        match stack.last_mut() {
            Some(top) if top.kind() == g.kind() && top.qubits() == g.qubits() => {
                let merged = normalize_angle(top.param().expect("rotation angle") + theta);
                if is_zero_angle(merged, epsilon) {
                    stack.pop();
                } else {
                    *top = Gate::new(g.kind(), g.qubits(), Some(merged)).expect("finite angle");
                }
            }
            _ => {
                if !is_zero_angle(theta, epsilon) {
                    stack.push(*g);
                }
            }
        }
    }
    rebuild(c, stack)
}

/// Fixed rewrite of one gate into the `{RZ, RX, CX}` base, in circuit order.
/// `None` means the gate has no entry in the table.
pub fn rewrite_rule(g: &Gate) -> Option<Vec<Gate>> {
    let q = g.qubits()[0];
    let out = match g.kind() {
        GateKind::H => alloc::vec![Gate::rz(q, FRAC_PI_2), Gate::rx(q, FRAC_PI_2), Gate::rz(q, FRAC_PI_2)],
        GateKind::X => alloc::vec![Gate::rx(q, PI)],
        GateKind::Y => alloc::vec![Gate::rz(q, -FRAC_PI_2), Gate::rx(q, PI), Gate::rz(q, FRAC_PI_2)],
        GateKind::Z => alloc::vec![Gate::rz(q, PI)],
        GateKind::S => alloc::vec![Gate::rz(q, FRAC_PI_2)],
        GateKind::Sdg => alloc::vec![Gate::rz(q, -FRAC_PI_2)],
        GateKind::T => alloc::vec![Gate::rz(q, FRAC_PI_4)],
        GateKind::Tdg => alloc::vec![Gate::rz(q, -FRAC_PI_4)],
        GateKind::Ry => {
            let theta = g.param().expect("rotation angle");
            alloc::vec![Gate::rz(q, -FRAC_PI_2), Gate::rx(q, theta), Gate::rz(q, FRAC_PI_2)]
        }
        GateKind::Swap => {
            let b = g.qubits()[1];
            alloc::vec![Gate::cx(q, b), Gate::cx(b, q), Gate::cx(q, b)]
        }
        GateKind::Rx | GateKind::Rz | GateKind::Cx | GateKind::Measure => return None,
    };
    Some(out)
}

/// Rewrites every non-native gate through [`rewrite_rule`]. Native gates
/// are kept as they are.
pub fn decompose_to_target(c: &QuantumCircuit, t: &HardwareTarget) -> Result<QuantumCircuit, PassError> {
    let mut out = Vec::with_capacity(c.len());
    for g in c.gates() {
        if t.is_native(g.kind()) {
            out.push(*g);
            continue;
        }
        let replacement = rewrite_rule(g).ok_or(PassError::UnsupportedTarget(g.kind()))?;
        if let Some(bad) = replacement.iter().find(|r| !t.is_native(r.kind())) {
            return Err(PassError::UnsupportedTarget(bad.kind()));
        }
        out.extend(replacement);
    }
    Ok(rebuild(c, out))
}
