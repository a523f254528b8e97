#![no_std]
//! Allocation-only core of the qbridge stack.
//!
//! Everything in this crate is a pure function or a single-threaded state
//! machine: the gate-list circuit IR and its OpenQASM-subset text form, the
//! dense unitary oracle, the transpiler passes, the statevector simulator,
//! and the two-level credit-bound scheduler. IO, threads, plugins and the
//! wire protocol live in the `qbridge` crate.

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod circuit;
pub mod device;
pub mod qasm;
pub mod reservation;
pub mod rng;
pub mod scheduler;
pub mod sim;
pub mod statevector;
pub mod testkit;
pub mod toolchain;
pub mod unitary;

pub use circuit::{
    validate_against_target, CircuitError, Gate, GateKind, HardwareTarget, MeasurementCounts,
    QuantumCircuit, TargetError, Violation,
};
pub use qasm::{parse_circuit, serialize_circuit, QasmError};
pub use unitary::{circuit_unitary, Matrix, C64};

/// Discrete scheduler time unit.
pub type Tick = u64;
