//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use qbridge::manifest::{DeviceEntry, Manifest};
use qbridge::qpi::TaskRequest;
use qbridge::{Engine, Session};
use qbridge_core::scheduler::{
    AllocationMode, ClassicalRequest, GresRequest, HybridJobSpec, JobId, Pattern, QosSpec, QuantumRequest, Stage,
    StageKind,
};
use qbridge_core::{Gate, GateKind, HardwareTarget, QuantumCircuit, Tick};

pub const LONG: Tick = 1_000_000;

/// Line-connected target with a rotation basis, so everything but the
/// basis needs the toolchain.
pub fn rotation_target(n: usize) -> HardwareTarget {
    HardwareTarget::line([GateKind::Rz, GateKind::Rx, GateKind::Cx], n, 100_000).unwrap()
}

/// Target on which a textbook Bell circuit is already native.
pub fn bell_target(n: usize) -> HardwareTarget {
    HardwareTarget::line([GateKind::H, GateKind::X, GateKind::Cx, GateKind::Rz], n, 100_000).unwrap()
}

pub fn entry(id: &str, seed: u64, jitter: u64) -> DeviceEntry {
    DeviceEntry {
        latency_jitter_ticks: jitter,
        ..DeviceEntry::simulator(id, rotation_target(3), seed)
    }
}

pub fn manifest(n: usize) -> Manifest {
    Manifest::new((0..n).map(|i| entry(&format!("sim{i}"), 11 + i as u64, 0)).collect())
}

pub fn bell() -> QuantumCircuit {
    QuantumCircuit::from_gates(2, [Gate::h(0), Gate::cx(0, 1), Gate::measure(0), Gate::measure(1)]).unwrap()
}

pub fn x0() -> QuantumCircuit {
    QuantumCircuit::from_gates(1, [Gate::x(0), Gate::measure(0)]).unwrap()
}

pub fn task(c: QuantumCircuit, shots: u64) -> TaskRequest {
    TaskRequest {
        circuit: c,
        shots,
        deadline: None,
    }
}

pub fn simultaneous(devices: u32) -> HybridJobSpec {
    HybridJobSpec {
        version: 1,
        job_id: None,
        name: "sim".into(),
        classical: ClassicalRequest {
            nodes: 1,
            walltime_ticks: LONG,
        },
        quantum: Some(QuantumRequest {
            gres: GresRequest {
                kind: "qc".into(),
                count: devices,
            },
            walltime_ticks: LONG,
        }),
        mode: AllocationMode::Simultaneous,
        pattern: Pattern::Balanced,
        priority: 0,
        chain: Vec::new(),
        qos: QosSpec::default(),
    }
}

pub fn interleaved_quantum() -> HybridJobSpec {
    HybridJobSpec {
        mode: AllocationMode::Interleaved,
        chain: vec![Stage {
            kind: StageKind::Quantum,
            walltime_ticks: Some(LONG),
        }],
        qos: QosSpec {
            initial_credits: 1_000_000,
            cap: 1_000_000,
            replenish_per_tick: 1000,
            ..QosSpec::default()
        },
        ..simultaneous(1)
    }
}

/// Submits `spec` and ticks until it runs.
pub fn start(engine: &Engine, spec: HybridJobSpec) -> JobId {
    let id = engine.submit_job(spec).unwrap();
    engine.wait_running(id, Some(100)).unwrap();
    id
}

/// A session inside a simultaneous job holding `devices` devices.
pub fn session(engine: &Engine, devices: u32) -> Session {
    let job = start(engine, simultaneous(devices));
    engine.qpi_init(job).unwrap()
}

/// Runs a small mixed workload to completion: an interleaved job and a
/// simultaneous job submitting circuits, plus a calibration event.
pub fn mixed_workload(engine: &Engine) {
    use qbridge::qpi::{StreamMode, StreamTarget};
    use qbridge_core::device::{DeviceEvent, DeviceEventKind};

    let sim = start(engine, simultaneous(1));
    let b = engine.qpi_init(sim).unwrap();
    let dev_b = b.list_devices().unwrap()[0].device_id.clone();
    let sb = b.create_qstream(StreamTarget::Device(dev_b.clone()), StreamMode::Sequential).unwrap();
    // the interleaved job shares whatever the simultaneous one does not hold
    let inter = start(engine, interleaved_quantum());
    let a = engine.qpi_init(inter).unwrap();
    let free = a.list_devices().unwrap().into_iter().find(|d| d.device_id != dev_b).unwrap().device_id;
    let sa = a.create_qstream(StreamTarget::Device(free), StreamMode::Parallel).unwrap();
    for i in 0..5u64 {
        a.submit(sa, &task(bell(), 1000 + 500 * i)).unwrap();
        b.submit(sb, &task(x0(), 300)).unwrap();
    }
    engine
        .inject_event(DeviceEvent {
            device_id: dev_b,
            kind: DeviceEventKind::CalibrationUpdate,
            payload: Default::default(),
            at: engine.now(),
        })
        .unwrap();
    a.finalize().unwrap();
    b.finalize().unwrap();
    engine.complete_stage(inter).unwrap();
    engine.release_job(sim).unwrap();
    engine.advance(5);
}
