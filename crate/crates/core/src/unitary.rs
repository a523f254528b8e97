//! Dense unitary oracle.
//!
//! [`circuit_unitary`] multiplies Kronecker-lifted gate matrices in gate
//! order. It is deliberately the slow, obvious construction: every other
//! module's tests use it as ground truth, so it shares nothing with the
//! statevector kernels beyond the 2x2/4x4 gate tables.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex;

use crate::circuit::{Gate, GateKind, QuantumCircuit};

pub type C64 = Complex<f64>;

/// Largest register the dense oracle accepts.
pub const MAX_ORACLE_QUBITS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UnitaryError {
    #[error("circuit contains a measurement")]
    ContainsMeasure,
    #[error("{0} qubits exceeds the oracle limit of {MAX_ORACLE_QUBITS}")]
    TooManyQubits(usize),
}

/// Row-major square complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<C64>,
}

impl Matrix {
    pub fn zeros(dim: usize) -> Matrix {
        Matrix {
            dim,
            data: vec![C64::new(0.0, 0.0); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Matrix {
        let mut m = Matrix::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    /// # Panics
    /// Panics unless `rows` is square.
    pub fn from_rows(rows: &[&[C64]]) -> Matrix {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for r in rows {
            assert_eq!(r.len(), dim, "matrix must be square");
            data.extend_from_slice(r);
        }
        Matrix { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.dim).map(|r| self[(r, c)]).collect()
    }

    pub fn mul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.dim, rhs.dim);
        let n = self.dim;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * rhs.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn adjoint(&self) -> Matrix {
        let n = self.dim;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.data[i * n + j].conj();
            }
        }
        out
    }

    pub fn kron(&self, rhs: &Matrix) -> Matrix {
        let (a, b) = (self.dim, rhs.dim);
        let mut out = Matrix::zeros(a * b);
        for i in 0..a {
            for j in 0..a {
                let x = self[(i, j)];
                for k in 0..b {
                    for l in 0..b {
                        out[(i * b + k, j * b + l)] = x * rhs[(k, l)];
                    }
                }
            }
        }
        out
    }

    pub fn scale(&self, s: C64) -> Matrix {
        Matrix {
            dim: self.dim,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// Largest entrywise modulus of `self - rhs`.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!(self.dim, rhs.dim);
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// `max |(U^dagger U - I)_ij|`.
    pub fn unitarity_error(&self) -> f64 {
        self.adjoint().mul(self).max_abs_diff(&Matrix::identity(self.dim))
    }

    /// Distance from `self * rhs^dagger` to the nearest `c * I` with `|c| = 1`,
    /// entrywise. Zero iff the two agree up to global phase.
    pub fn phase_distance(&self, rhs: &Matrix) -> f64 {
        if self.dim != rhs.dim {
            return f64::INFINITY;
        }
        let m = self.mul(&rhs.adjoint());
        let trace: C64 = (0..self.dim).map(|i| m[(i, i)]).sum();
        if trace.norm() == 0.0 {
            return f64::INFINITY;
        }
        let phase = trace / trace.norm();
        m.max_abs_diff(&Matrix::identity(self.dim).scale(phase))
    }

    pub fn equal_up_to_phase(&self, rhs: &Matrix, tol: f64) -> bool {
        self.phase_distance(rhs) <= tol
    }
}

impl core::ops::Index<(usize, usize)> for Matrix {
    type Output = C64;
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        &self.data[r * self.dim + c]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        &mut self.data[r * self.dim + c]
    }
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// The gate's own matrix: 2x2 for single-qubit kinds, 4x4 for CX/SWAP with
/// `qubits()[0]` as the high bit. `None` for measurement.
pub fn gate_matrix(gate: &Gate) -> Option<Matrix> {
    let o = c(0.0, 0.0);
    let l = c(1.0, 0.0);
    let h = c(FRAC_1_SQRT_2, 0.0);
    let m = match gate.kind() {
        GateKind::H => Matrix::from_rows(&[&[h, h], &[h, -h]]),
        GateKind::X => Matrix::from_rows(&[&[o, l], &[l, o]]),
        GateKind::Y => Matrix::from_rows(&[&[o, c(0.0, -1.0)], &[c(0.0, 1.0), o]]),
        GateKind::Z => Matrix::from_rows(&[&[l, o], &[o, -l]]),
        GateKind::S => Matrix::from_rows(&[&[l, o], &[o, c(0.0, 1.0)]]),
        GateKind::Sdg => Matrix::from_rows(&[&[l, o], &[o, c(0.0, -1.0)]]),
        GateKind::T => Matrix::from_rows(&[&[l, o], &[o, c(FRAC_1_SQRT_2, FRAC_1_SQRT_2)]]),
        GateKind::Tdg => Matrix::from_rows(&[&[l, o], &[o, c(FRAC_1_SQRT_2, -FRAC_1_SQRT_2)]]),
        GateKind::Rx | GateKind::Ry | GateKind::Rz => {
            let theta = gate.param().expect("rotation carries an angle");
            let (s, co) = (libm::sin(theta / 2.0), libm::cos(theta / 2.0));
            match gate.kind() {
                GateKind::Rx => Matrix::from_rows(&[&[c(co, 0.0), c(0.0, -s)], &[c(0.0, -s), c(co, 0.0)]]),
                GateKind::Ry => Matrix::from_rows(&[&[c(co, 0.0), c(-s, 0.0)], &[c(s, 0.0), c(co, 0.0)]]),
                _ => Matrix::from_rows(&[&[c(co, -s), o], &[o, c(co, s)]]),
            }
        }
        GateKind::Cx => Matrix::from_rows(&[
            &[l, o, o, o],
            &[o, l, o, o],
            &[o, o, o, l],
            &[o, o, l, o],
        ]),
        GateKind::Swap => Matrix::from_rows(&[
            &[l, o, o, o],
            &[o, o, l, o],
            &[o, l, o, o],
            &[o, o, o, l],
        ]),
        GateKind::Measure => return None,
    };
    Some(m)
}

fn bit(index: usize, qubit: usize, n: usize) -> usize {
    (index >> (n - 1 - qubit)) & 1
}

/// Dense `2^n x 2^n` embedding of `gate` into an `n`-qubit register:
/// `L[r][c] = G[sub(r)][sub(c)]` when `r` and `c` agree on every other qubit.
pub fn lifted_matrix(gate: &Gate, n: usize) -> Option<Matrix> {
    let g = gate_matrix(gate)?;
    let qs = gate.qubits();
    let dim = 1usize << n;
    let sub = |i: usize| qs.iter().fold(0, |acc, &q| (acc << 1) | bit(i, q, n));
    let mask: usize = qs.iter().map(|&q| 1usize << (n - 1 - q)).sum();
    let mut out = Matrix::zeros(dim);
    for r in 0..dim {
        for col in 0..dim {
            if r & !mask == col & !mask {
                out[(r, col)] = g[(sub(r), sub(col))];
            }
        }
    }
    Some(out)
}

/// `L * u` for the lifted gate without materialising `L`: each output row
/// only mixes the rows that differ from it on the gate's qubits.
fn lift_apply(gate: &Gate, u: &Matrix, n: usize) -> Matrix {
    let g = gate_matrix(gate).expect("unitary gate");
    let qs = gate.qubits();
    let dim = u.dim();
    let shifts: Vec<usize> = qs.iter().map(|&q| n - 1 - q).collect();
    let local = 1usize << qs.len();
    let mut out = Matrix::zeros(dim);
    for r in 0..dim {
        let row_sub = shifts.iter().fold(0, |acc, &s| (acc << 1) | ((r >> s) & 1));
        let base = shifts.iter().fold(r, |acc, &s| acc & !(1usize << s));
        for col_sub in 0..local {
            let coeff = g[(row_sub, col_sub)];
            if coeff == C64::new(0.0, 0.0) {
                continue;
            }
            let mut src = base;
            for (k, &s) in shifts.iter().enumerate() {
                let b = (col_sub >> (qs.len() - 1 - k)) & 1;
                src |= b << s;
            }
            for j in 0..dim {
                out[(r, j)] += coeff * u[(src, j)];
            }
        }
    }
    out
}

/// Product of the lifted gate matrices, first gate applied first.
pub fn circuit_unitary(circuit: &QuantumCircuit) -> Result<Matrix, UnitaryError> {
    let n = circuit.num_qubits();
    if n > MAX_ORACLE_QUBITS {
        return Err(UnitaryError::TooManyQubits(n));
    }
    if circuit.has_measurements() {
        return Err(UnitaryError::ContainsMeasure);
    }
    let mut u = Matrix::identity(1 << n);
    for g in circuit.gates() {
        u = lift_apply(g, &u, n);
    }
    Ok(u)
}

/// Unitary of the circuit with its measurement suffix stripped.
pub fn unitary_ignoring_measure(circuit: &QuantumCircuit) -> Result<Matrix, UnitaryError> {
    let mut stripped = circuit.empty_like();
    for g in circuit.unitary_part() {
        stripped.push(*g).expect("prefix of a valid circuit");
    }
    circuit_unitary(&stripped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    fn circ(n: usize, gates: &[Gate]) -> QuantumCircuit {
        QuantumCircuit::from_gates(n, gates.iter().copied()).unwrap()
    }

    #[test]
    fn hadamard_matrix() {
        let u = circuit_unitary(&circ(1, &[Gate::h(0)])).unwrap();
        let h = FRAC_1_SQRT_2;
        let expect = Matrix::from_rows(&[&[c(h, 0.0), c(h, 0.0)], &[c(h, 0.0), c(-h, 0.0)]]);
        assert!(u.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn x_is_an_involution() {
        let u = circuit_unitary(&circ(1, &[Gate::x(0), Gate::x(0)])).unwrap();
        assert!(u.max_abs_diff(&Matrix::identity(2)) < 1e-15);
    }

    #[test]
    fn bell_column() {
        // Hand product: CX * (H (x) I) |00> = (|00> + |11>)/sqrt2.
        let u = circuit_unitary(&circ(2, &[Gate::h(0), Gate::cx(0, 1)])).unwrap();
        let col = u.column(0);
        let h = FRAC_1_SQRT_2;
        let expect = [c(h, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(h, 0.0)];
        for (a, b) in col.iter().zip(expect) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn qubit_zero_is_high_bit() {
        let u = circuit_unitary(&circ(2, &[Gate::x(0)])).unwrap();
        // |00> -> |10> = index 2
        assert_eq!(u[(2, 0)], c(1.0, 0.0));
    }

    #[test]
    fn sparse_lift_matches_dense_kron() {
        let n = 3;
        let i2 = Matrix::identity(2);
        let h = gate_matrix(&Gate::h(1)).unwrap();
        let dense = i2.kron(&h).kron(&i2);
        assert!(lifted_matrix(&Gate::h(1), n).unwrap().max_abs_diff(&dense) < 1e-15);
        let cx = gate_matrix(&Gate::cx(1, 2)).unwrap();
        let dense = i2.kron(&cx);
        assert!(lifted_matrix(&Gate::cx(1, 2), n).unwrap().max_abs_diff(&dense) < 1e-15);
        for g in [Gate::cx(2, 0), Gate::swap(0, 2), Gate::ry(2, 0.7), Gate::cx(0, 1)] {
            let via_apply = circuit_unitary(&circ(n, &[g])).unwrap();
            let via_dense = lifted_matrix(&g, n).unwrap();
            assert!(via_apply.max_abs_diff(&via_dense) < 1e-15, "{g}");
        }
    }

    #[test]
    fn rejects_measure_and_wide_circuits() {
        assert_eq!(
            circuit_unitary(&circ(1, &[Gate::measure(0)])),
            Err(UnitaryError::ContainsMeasure)
        );
        assert_eq!(
            circuit_unitary(&QuantumCircuit::new(11).unwrap()),
            Err(UnitaryError::TooManyQubits(11))
        );
    }

    #[test]
    fn phase_distance_ignores_global_phase() {
        let a = circuit_unitary(&circ(1, &[Gate::rx(0, PI), Gate::rx(0, PI)])).unwrap();
        assert!(a.max_abs_diff(&Matrix::identity(2)) > 1.9);
        assert!(a.equal_up_to_phase(&Matrix::identity(2), 1e-12));
        let z = circuit_unitary(&circ(1, &[Gate::z(0)])).unwrap();
        assert!(!z.equal_up_to_phase(&Matrix::identity(2), 1e-3));
    }

    #[test]
    fn every_gate_is_unitary() {
        let gates = [
            Gate::h(0),
            Gate::x(1),
            Gate::y(0),
            Gate::z(1),
            Gate::s(0),
            Gate::sdg(1),
            Gate::t(0),
            Gate::tdg(1),
            Gate::rx(0, 0.3),
            Gate::ry(1, -1.2),
            Gate::rz(0, 2.2),
            Gate::cx(1, 0),
            Gate::swap(0, 1),
        ];
        let u = circuit_unitary(&circ(2, &gates)).unwrap();
        assert!(u.unitarity_error() < 1e-12);
    }
}
