//! The statevector simulator as a platform-manager plugin.
//!
//! One `SimDevice` is one device instance: it runs at most one task at a
//! time, in acceptance order. A task's run time is the core duration
//! estimate plus a jitter term fixed by the device seed and the task id, so
//! the scheduler's cost and the device's behaviour agree exactly.

use std::collections::{BTreeMap, VecDeque};

use qbridge_core::device::{
    DeviceDescriptor, DeviceEvent, DeviceEventKind, DeviceStatus, QpmResult, QpmTask, TaskStatus, TaskTiming,
};
use qbridge_core::rng::{derive_seed, fnv1a, mix64, SplitMix64};
use qbridge_core::sim::{
    calibration_due, estimate_duration, initial_error_rates, perturb_error_rates, run_task, SimulatorConfig,
};
use qbridge_core::{GateKind, HardwareTarget, Tick};

use crate::manifest::DeviceEntry;
use crate::qpm::QpmPlugin;

struct Queued {
    task: QpmTask,
    queued_at: Tick,
}

struct Running {
    job: Queued,
    started_at: Tick,
    finish: Tick,
}

pub struct SimDevice {
    id: String,
    target: HardwareTarget,
    config: SimulatorConfig,
    jitter: u64,
    epoch: u64,
    rates: BTreeMap<GateKind, f64>,
    status: DeviceStatus,
    queue: VecDeque<Queued>,
    running: Option<Running>,
    drift: SplitMix64,
}

pub(crate) fn factory(entry: &DeviceEntry) -> Result<Box<dyn QpmPlugin>, String> {
    SimDevice::new(entry).map(|d| Box::new(d) as Box<dyn QpmPlugin>)
}

impl SimDevice {
    pub fn new(entry: &DeviceEntry) -> Result<SimDevice, String> {
        entry.config.validate().map_err(|e| e.to_string())?;
        if entry.target.num_qubits() > entry.config.max_qubits {
            return Err(format!(
                "target has {} qubits, simulator budget is {}",
                entry.target.num_qubits(),
                entry.config.max_qubits
            ));
        }
        Ok(SimDevice {
            id: entry.device_id.clone(),
            target: entry.target.clone(),
            config: entry.config.clone(),
            jitter: entry.latency_jitter_ticks,
            epoch: 1,
            rates: initial_error_rates(entry.target.native_gates().iter().copied()),
            status: DeviceStatus::Online,
            queue: VecDeque::new(),
            running: None,
            drift: SplitMix64::new(derive_seed(entry.config.seed, fnv1a(entry.device_id.as_bytes()))),
        })
    }

    /// Seed the sampler uses for a task.
    pub fn sampling_seed(&self, task_id: &str) -> u64 {
        derive_seed(self.config.seed, fnv1a(task_id.as_bytes()))
    }

    fn jitter_for(&self, task_id: &str) -> Tick {
        if self.jitter == 0 {
            return 0;
        }
        mix64(self.config.seed ^ fnv1a(task_id.as_bytes())) % (self.jitter + 1)
    }

    fn result(&self, q: &Queued, started_at: Tick, finished_at: Tick, status: TaskStatus, error: Option<String>) -> QpmResult {
        QpmResult {
            task_id: q.task.task_id.clone(),
            device_id: self.id.clone(),
            status,
            counts: None,
            timing: TaskTiming {
                queued_at: q.queued_at,
                started_at,
                finished_at,
                seed: self.sampling_seed(&q.task.task_id),
            },
            error,
        }
    }

    fn complete(&self, r: Running) -> QpmResult {
        let seed = self.sampling_seed(&r.job.task.task_id);
        match run_task(&r.job.task.circuit, r.job.task.shots, seed, &self.config) {
            Ok(counts) => QpmResult {
                counts: Some(counts),
                ..self.result(&r.job, r.started_at, r.finish, TaskStatus::Ok, None)
            },
            Err(e) => self.result(&r.job, r.started_at, r.finish, TaskStatus::Failed, Some(e.to_string())),
        }
    }

    fn fail_all(&mut self, now: Tick, why: &str) -> Vec<QpmResult> {
        let mut out = Vec::new();
        if let Some(r) = self.running.take() {
            out.push(self.result(&r.job, r.started_at, now, TaskStatus::Failed, Some(why.into())));
        }
        while let Some(q) = self.queue.pop_front() {
            out.push(self.result(&q, now.max(q.queued_at), now.max(q.queued_at), TaskStatus::Failed, Some(why.into())));
        }
        out
    }
}

impl QpmPlugin for SimDevice {
    fn descriptor(&self) -> DeviceDescriptor {
        DeviceDescriptor {
            device_id: self.id.clone(),
            modality: "simulator".into(),
            target: self.target.clone(),
            calibration_epoch: self.epoch,
            error_rates: self.rates.clone(),
            queue_depth: self.queue.len() as u64 + self.running.is_some() as u64,
            status: self.status,
        }
    }

    fn estimate_duration(&self, task: &QpmTask) -> Tick {
        estimate_duration(&task.circuit, task.shots, &self.config).max(1) + self.jitter_for(&task.task_id)
    }

    fn accept(&mut self, task: QpmTask, now: Tick) -> Result<(), String> {
        if self.status == DeviceStatus::Offline {
            return Err("device is offline".into());
        }
        if task.circuit.num_qubits() > self.config.max_qubits {
            return Err(format!("circuit needs {} qubits", task.circuit.num_qubits()));
        }
        self.queue.push_back(Queued { task, queued_at: now });
        Ok(())
    }

    fn advance(&mut self, now: Tick) -> Vec<QpmResult> {
        let mut out = Vec::new();
        loop {
            if let Some(r) = &self.running {
                if r.finish > now {
                    break;
                }
                let r = self.running.take().expect("checked");
                out.push(self.complete(r));
            }
            let Some(q) = self.queue.pop_front() else { break };
            let start = now.max(q.queued_at);
            if q.task.deadline.is_some_and(|d| d < start) {
                out.push(self.result(&q, start, start, TaskStatus::DeadlineMissed, Some("deadline passed before start".into())));
                continue;
            }
            let finish = start + self.estimate_duration(&q.task);
            self.running = Some(Running {
                job: q,
                started_at: start,
                finish,
            });
        }
        out
    }

    fn calibration_tick(&mut self, now: Tick) -> Option<DeviceEvent> {
        if self.status == DeviceStatus::Offline || !calibration_due(self.config.calibration_period_ticks, now) {
            return None;
        }
        Some(DeviceEvent {
            device_id: self.id.clone(),
            kind: DeviceEventKind::CalibrationUpdate,
            payload: BTreeMap::new(),
            at: now,
        })
    }

    fn apply_event(&mut self, event: &DeviceEvent) -> Vec<QpmResult> {
        match event.kind {
            DeviceEventKind::CalibrationUpdate => {
                self.epoch += 1;
                perturb_error_rates(&mut self.rates, &mut self.drift);
                Vec::new()
            }
            // reported only; sampling stays ideal
            DeviceEventKind::NoiseIncident => Vec::new(),
            DeviceEventKind::HardwareFault => {
                self.status = DeviceStatus::Offline;
                self.fail_all(event.at, "hardware fault")
            }
            DeviceEventKind::Recovery => {
                self.status = DeviceStatus::Online;
                Vec::new()
            }
        }
    }

    fn capabilities(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("simulator".into(), "statevector".into()),
            ("noise".into(), "none".into()),
            ("max_qubits".into(), self.config.max_qubits.to_string()),
            ("latency_jitter_ticks".into(), self.jitter.to_string()),
        ])
    }
}
