//! The gateway's core: scheduler, platform manager, QPI state and telemetry
//! behind one lock, advanced one tick at a time.
//!
//! In manual mode time only moves when someone calls [`Engine::advance`] or
//! blocks on a result; a blocked call then drives the clock itself. In
//! real-time mode a pump thread ticks at a fixed rate and waiters sleep on a
//! condition variable.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};
use std::thread;
use std::time::Duration;

use qbridge_core::device::{DeviceDescriptor, DeviceEvent, QpmResult, TaskStatus};
use qbridge_core::reservation::Window;
use qbridge_core::scheduler::{
    AllocationMode, Decision, DecisionKind, HybridJobSpec, JobError, JobId, JobState, JobView, Scheduler, SubmitError,
    UtilizationReport,
};
use qbridge_core::{MeasurementCounts, Tick};
use serde_json::json;

use crate::manifest::{Manifest, ManifestError};
use crate::qpi::{CompletionKind, QpiError, QpiResult, QpiState, Session};
use crate::qpm::{changes_availability, PluginRegistry, Qpm, QpmError, Ticket};
use crate::telemetry::{Category, TelemetryFilter, TelemetryRecord, TelemetryStore};

/// Upper bound on ticks a blocking call may drive in manual mode.
pub const WAIT_CAP_TICKS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    Manual,
    /// One tick per period, driven by a background thread.
    RealTime(Duration),
}

pub struct EngineConfig {
    pub manifest: Manifest,
    pub clock: ClockMode,
    pub telemetry_path: Option<PathBuf>,
    pub plugins: PluginRegistry,
}

impl EngineConfig {
    pub fn new(manifest: Manifest) -> EngineConfig {
        EngineConfig {
            manifest,
            clock: ClockMode::Manual,
            telemetry_path: None,
            plugins: PluginRegistry::builtin(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Qpm(#[from] QpmError),
}

pub(crate) struct State {
    pub(crate) sched: Scheduler,
    pub(crate) qpm: Arc<Qpm>,
    pub(crate) telemetry: TelemetryStore,
    pub(crate) qpi: QpiState,
    pub(crate) manifest: Manifest,
    pub(crate) draining: bool,
    job_tickets: BTreeMap<JobId, Vec<Ticket>>,
}

struct Shared {
    state: Mutex<State>,
    changed: Condvar,
    clock: ClockMode,
    stopped: AtomicBool,
}

/// Cloneable handle; clones share one engine.
#[derive(Clone)]
pub struct Engine {
    shared: Arc<Shared>,
}

impl State {
    /// One scheduler tick followed by one platform-manager step at the same
    /// tick.
    pub(crate) fn tick(&mut self) {
        let now = self.sched.now();
        let decisions = self.sched.tick();
        for d in &decisions {
            self.telemetry.record(
                d.tick,
                Category::Scheduler,
                d.job_id,
                serde_json::to_value(d).expect("decision serializes"),
            );
        }
        for d in &decisions {
            self.apply_decision(d, now);
        }
        let adv = self.qpm.advance(now);
        for r in &adv.results {
            self.finish_result(r, now);
        }
        for ev in &adv.events {
            self.record_event(ev, now);
        }
        self.telemetry.flush();
    }

    fn apply_decision(&mut self, d: &Decision, now: Tick) {
        let Some(job) = d.job_id else { return };
        match d.kind {
            DecisionKind::JobStarted => {
                let Some(spec) = self.sched.spec(job) else { return };
                if spec.mode != AllocationMode::Simultaneous {
                    return;
                }
                let lifetime = spec.simultaneous_lifetime();
                for dev in d.resources.iter().filter(|r| !r.starts_with("node:")) {
                    match self.qpm.reserve(dev, d.tick, lifetime, job) {
                        Ok(t) => self.job_tickets.entry(job).or_default().push(t),
                        Err(e) => {
                            self.telemetry.record(
                                now,
                                Category::Device,
                                Some(job),
                                json!({"event": "reservation_failed", "device_id": dev, "error": e.to_string()}),
                            );
                        }
                    }
                }
            }
            DecisionKind::TaskDispatched => {
                if let Some(task_id) = &d.task_id {
                    self.dispatch(job, task_id, d, now);
                }
            }
            DecisionKind::TaskExpired => {
                if let Some(task_id) = &d.task_id {
                    let why = "deadline passed while queued".to_string();
                    self.finish_task(task_id, CompletionKind::DeadlineMissed, None, Some(why), None, now);
                }
            }
            DecisionKind::TaskDropped => {
                if let Some(task_id) = &d.task_id {
                    let why = d.note.clone().unwrap_or_else(|| "dropped".into());
                    self.finish_task(task_id, CompletionKind::Failed, None, Some(why), None, now);
                }
            }
            DecisionKind::JobCompleted => {
                for t in self.job_tickets.remove(&job).unwrap_or_default() {
                    let _ = self.qpm.release(&t, d.tick);
                }
            }
            _ => {}
        }
    }

    fn dispatch(&mut self, job: JobId, task_id: &str, d: &Decision, now: Tick) {
        let Some(task) = self.qpi.pending.remove(task_id) else { return };
        let device = d
            .resources
            .first()
            .cloned()
            .or_else(|| self.qpi.route_device(task_id).map(String::from))
            .unwrap_or_default();
        let ticket = match self.job_tickets.get(&job).and_then(|ts| ts.iter().find(|t| t.device_id == device)) {
            Some(t) => Ok(t.clone()),
            None => self.qpm.reserve(&device, now, d.cost.unwrap_or(1).max(1), job),
        };
        let submitted = ticket.and_then(|t| self.qpm.submit(&t, task, now));
        self.telemetry.record(
            now,
            Category::Task,
            Some(job),
            json!({"event": "started", "task_id": task_id, "device_id": device, "cost": d.cost}),
        );
        match submitted {
            Ok(_) => self.qpi.task_started(task_id),
            Err(e) => self.finish_task(task_id, CompletionKind::Failed, None, Some(e.to_string()), None, now),
        }
    }

    /// Records a terminal task transition and routes it to its session.
    pub(crate) fn finish_task(
        &mut self,
        task_id: &str,
        kind: CompletionKind,
        counts: Option<MeasurementCounts>,
        error: Option<String>,
        timing: Option<qbridge_core::device::TaskTiming>,
        now: Tick,
    ) {
        let job = self.qpi.route_job(task_id);
        self.telemetry.record(
            now,
            Category::Task,
            job,
            json!({"event": "finished", "task_id": task_id, "status": kind, "error": error}),
        );
        self.qpi.task_finished(task_id, kind, counts, error, timing, now);
    }

    fn finish_result(&mut self, r: &QpmResult, now: Tick) {
        let kind = match r.status {
            TaskStatus::Ok => CompletionKind::Ok,
            TaskStatus::Failed => CompletionKind::Failed,
            TaskStatus::DeadlineMissed => CompletionKind::DeadlineMissed,
        };
        self.finish_task(&r.task_id, kind, r.counts.clone(), r.error.clone(), Some(r.timing), now);
    }

    fn record_event(&mut self, ev: &DeviceEvent, now: Tick) {
        let desc = self.qpm.query_device(&ev.device_id).ok();
        self.telemetry.record(
            now.max(ev.at),
            Category::Device,
            None,
            json!({
                "event": ev.kind,
                "device_id": ev.device_id,
                "payload": ev.payload,
                "calibration_epoch": desc.as_ref().map(|d| d.calibration_epoch),
                "queue_depth": desc.as_ref().map(|d| d.queue_depth),
                "error_rates": desc.as_ref().map(|d| &d.error_rates),
                "status": desc.as_ref().map(|d| d.status),
            }),
        );
        if let Some(online) = changes_availability(ev.kind) {
            self.sched.set_device_online(&ev.device_id, online);
        }
    }

    /// Emits an out-of-band device event and applies its consequences.
    pub(crate) fn emit_device_event(&mut self, ev: DeviceEvent) -> Result<DeviceEvent, QpmError> {
        let now = self.sched.now();
        let (ev, killed) = self.qpm.emit_event(ev)?;
        self.record_event(&ev, now);
        for r in &killed {
            self.finish_result(r, now);
        }
        Ok(ev)
    }
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Engine, EngineError> {
        config.manifest.validate()?;
        let qpm = Arc::new(Qpm::new());
        let mut telemetry = match &config.telemetry_path {
            Some(p) => TelemetryStore::open(p),
            None => TelemetryStore::in_memory(),
        };
        for entry in &config.manifest.devices {
            let plugin = config.plugins.create(entry)?;
            qpm.register(plugin)?;
            let desc = qpm.query_device(&entry.device_id)?;
            telemetry.record(
                0,
                Category::Device,
                None,
                json!({"event": "registered", "device_id": entry.device_id, "descriptor": desc}),
            );
        }
        telemetry.flush();
        let secret = qbridge_core::rng::mix64(Arc::as_ptr(&qpm) as u64 ^ std::process::id() as u64);
        let state = State {
            sched: Scheduler::new(config.manifest.cluster()),
            qpm,
            telemetry,
            qpi: QpiState::new(secret),
            manifest: config.manifest,
            draining: false,
            job_tickets: BTreeMap::new(),
        };
        let engine = Engine {
            shared: Arc::new(Shared {
                state: Mutex::new(state),
                changed: Condvar::new(),
                clock: config.clock,
                stopped: AtomicBool::new(false),
            }),
        };
        if let ClockMode::RealTime(period) = config.clock {
            let weak = Arc::downgrade(&engine.shared);
            thread::Builder::new()
                .name("qbridge-clock".into())
                .spawn(move || pump(weak, period))
                .expect("spawn clock thread");
        }
        Ok(engine)
    }

    /// Manual-clock engine over `manifest`.
    pub fn manual(manifest: Manifest) -> Result<Engine, EngineError> {
        Engine::new(EngineConfig::new(manifest))
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.shared.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn with_state<T>(&self, f: impl FnOnce(&mut State) -> T) -> T {
        let mut g = self.lock();
        let out = f(&mut g);
        drop(g);
        self.shared.changed.notify_all();
        out
    }

    /// Re-evaluates `check` as time passes, for at most `max_ticks` ticks,
    /// never more than [`WAIT_CAP_TICKS`]. `Ok(None)` means the wait ran out.
    pub(crate) fn wait_for<T>(
        &self,
        max_ticks: Option<u64>,
        mut check: impl FnMut(&mut State) -> QpiResult<Option<T>>,
    ) -> QpiResult<Option<T>> {
        let limit = max_ticks.map_or(WAIT_CAP_TICKS, |t| t.min(WAIT_CAP_TICKS));
        let mut g = self.lock();
        let start = g.sched.now();
        loop {
            if let Some(v) = check(&mut g)? {
                drop(g);
                self.shared.changed.notify_all();
                return Ok(Some(v));
            }
            if g.sched.now() - start >= limit {
                return Ok(None);
            }
            match self.shared.clock {
                ClockMode::Manual => {
                    g.tick();
                    self.shared.changed.notify_all();
                }
                ClockMode::RealTime(period) => {
                    if self.shared.stopped.load(Ordering::SeqCst) {
                        return Ok(None);
                    }
                    g = self
                        .shared
                        .changed
                        .wait_timeout(g, period * 4)
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
            }
        }
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.shared.clock
    }

    /// The next tick to be processed.
    pub fn now(&self) -> Tick {
        self.lock().sched.now()
    }

    /// Processes `n` ticks and returns the new `now`.
    pub fn advance(&self, n: u64) -> Tick {
        self.with_state(|st| {
            for _ in 0..n {
                st.tick();
            }
            st.sched.now()
        })
    }

    pub fn manifest(&self) -> Manifest {
        self.lock().manifest.clone()
    }

    pub fn qpm(&self) -> Arc<Qpm> {
        self.lock().qpm.clone()
    }

    pub fn devices(&self) -> Vec<DeviceDescriptor> {
        self.with_state(|st| {
            st.qpm
                .device_ids()
                .iter()
                .filter_map(|d| st.qpm.query_device(d).ok())
                .collect()
        })
    }

    pub fn submit_job(&self, spec: HybridJobSpec) -> Result<JobId, SubmitError> {
        self.with_state(|st| {
            if st.draining {
                return Err(SubmitError::Malformed("gateway is shutting down".into()));
            }
            st.sched.submit_job(spec)
        })
    }

    pub fn job(&self, id: JobId) -> Option<JobView> {
        self.lock().sched.job(id)
    }

    pub fn jobs(&self) -> Vec<JobView> {
        self.lock().sched.jobs()
    }

    pub fn complete_stage(&self, id: JobId) -> Result<(), JobError> {
        self.with_state(|st| st.sched.complete_stage(id))
    }

    pub fn release_job(&self, id: JobId) -> Result<(), JobError> {
        self.with_state(|st| st.sched.release_job(id))
    }

    pub fn decisions(&self) -> Vec<Decision> {
        self.lock().sched.decisions().to_vec()
    }

    /// Utilization over `window`, by default everything processed so far.
    pub fn report(&self, window: Option<Window>) -> UtilizationReport {
        let g = self.lock();
        let w = window.unwrap_or(Window {
            start: 0,
            end: g.sched.now(),
        });
        g.sched.report(w)
    }

    /// Blocks until `job` is running; fails when it finished or never
    /// existed.
    pub fn wait_running(&self, job: JobId, max_ticks: Option<u64>) -> Result<JobView, QpiError> {
        self.wait_for(max_ticks, |st| match st.sched.job(job) {
            None => Err(QpiError::NoAllocation(job)),
            Some(v) if v.state == JobState::Completed => Err(QpiError::NoAllocation(job)),
            Some(v) if v.state == JobState::Running => Ok(Some(v)),
            Some(_) => Ok(None),
        })?
        .ok_or(QpiError::Timeout)
    }

    /// Opens a QPI session inside a running job's allocation.
    pub fn qpi_init(&self, job: JobId) -> QpiResult<Session> {
        let info = self.with_state(|st| {
            if st.draining {
                return Err(QpiError::ShuttingDown);
            }
            let view = st.sched.job(job).ok_or(QpiError::NoAllocation(job))?;
            if view.state != JobState::Running {
                return Err(QpiError::NoAllocation(job));
            }
            let spec = st.sched.spec(job).ok_or(QpiError::NoAllocation(job))?;
            let devices = match (spec.mode, &spec.quantum) {
                (_, None) => Vec::new(),
                (AllocationMode::Simultaneous, Some(_)) => view.devices.clone(),
                (AllocationMode::Interleaved, Some(q)) => st
                    .manifest
                    .devices
                    .iter()
                    .filter(|d| q.gres.matches(&d.gres))
                    .map(|d| d.device_id.clone())
                    .collect(),
            };
            Ok(st.qpi.open_session(job, devices))
        })?;
        Ok(Session::new(self.clone(), info))
    }

    /// Looks up a session by its wire token. Finalized sessions still resolve.
    pub fn session(&self, token: &str) -> QpiResult<Session> {
        let info = self.with_state(|st| st.qpi.session_info(token))?;
        Ok(Session::new(self.clone(), info))
    }

    /// Applies a device event as if the hardware had reported it.
    pub fn inject_event(&self, ev: DeviceEvent) -> Result<DeviceEvent, QpmError> {
        self.with_state(|st| {
            let r = st.emit_device_event(ev);
            st.telemetry.flush();
            r
        })
    }

    pub fn query_telemetry(&self, filter: &TelemetryFilter) -> Vec<TelemetryRecord> {
        self.lock().telemetry.query(filter)
    }

    pub fn telemetry_records(&self) -> Vec<TelemetryRecord> {
        self.lock().telemetry.records().to_vec()
    }

    pub fn telemetry_degraded(&self) -> Option<String> {
        let g = self.lock();
        g.telemetry
            .is_degraded()
            .then(|| g.telemetry.last_error().unwrap_or("telemetry unavailable").to_string())
    }

    pub fn is_draining(&self) -> bool {
        self.lock().draining
    }

    /// Refuses new work, waits for every in-flight op to finish, then stops
    /// the clock. Returns the tick at which the drain completed.
    pub fn shutdown(&self) -> Tick {
        self.with_state(|st| st.draining = true);
        let _ = self.wait_for(None, |st| Ok((!st.qpi.busy()).then_some(())));
        self.shared.stopped.store(true, Ordering::SeqCst);
        self.with_state(|st| {
            st.telemetry.flush();
            st.sched.now()
        })
    }

    pub fn is_stopped(&self) -> bool {
        self.shared.stopped.load(Ordering::SeqCst)
    }
}

fn pump(shared: Weak<Shared>, period: Duration) {
    loop {
        thread::sleep(period);
        let Some(s) = shared.upgrade() else { return };
        if s.stopped.load(Ordering::SeqCst) {
            return;
        }
        s.state.lock().unwrap_or_else(|e| e.into_inner()).tick();
        s.changed.notify_all();
    }
}
