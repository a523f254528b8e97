//! Platform manager: the hardware-facing plugin contract and the facade
//! that owns every registered device.
//!
//! The facade does the bookkeeping plugins should not have to repeat:
//! reservation tickets, target validation, queue depth, result storage and
//! event fan-out. Time is passed in by the caller.

use std::collections::hash_map::RandomState;
use std::collections::{BTreeMap, HashMap};
use std::hash::{BuildHasher, Hasher};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use qbridge_core::device::{DeviceDescriptor, DeviceEvent, DeviceEventKind, DeviceStatus, QpmResult, QpmTask};
use qbridge_core::reservation::{Ledger, ReserveError, Window};
use qbridge_core::rng::mix64;
use qbridge_core::{validate_against_target, Tick, Violation};
use serde::{Deserialize, Serialize};

use crate::manifest::DeviceEntry;

/// What a backend implements. Calls for one device are serialized by the
/// facade, so implementations need no locking of their own.
pub trait QpmPlugin: Send {
    fn descriptor(&self) -> DeviceDescriptor;

    /// Ticks the device will be busy with `task`. Must be positive and must
    /// match how long `advance` actually keeps the task running.
    fn estimate_duration(&self, task: &QpmTask) -> Tick;

    /// Queues a task that already passed ticket and target checks.
    fn accept(&mut self, task: QpmTask, now: Tick) -> Result<(), String>;

    /// Moves the device to `now` and returns tasks that reached a terminal
    /// state.
    fn advance(&mut self, now: Tick) -> Vec<QpmResult>;

    /// A calibration event the device wants to emit at `now`, not yet
    /// applied.
    fn calibration_tick(&mut self, now: Tick) -> Option<DeviceEvent>;

    /// Applies an event to device state. Returns tasks the event killed.
    fn apply_event(&mut self, event: &DeviceEvent) -> Vec<QpmResult>;

    /// Opaque hardware-specific attributes.
    fn capabilities(&self) -> BTreeMap<String, String> {
        BTreeMap::new()
    }
}

pub type PluginFactory = fn(&DeviceEntry) -> Result<Box<dyn QpmPlugin>, String>;

/// Modality name to constructor.
#[derive(Clone)]
pub struct PluginRegistry {
    factories: BTreeMap<String, PluginFactory>,
}

impl PluginRegistry {
    pub fn empty() -> PluginRegistry {
        PluginRegistry {
            factories: BTreeMap::new(),
        }
    }

    /// Registry with the built-in `simulator` modality.
    pub fn builtin() -> PluginRegistry {
        let mut r = PluginRegistry::empty();
        r.register("simulator", crate::sim_backend::factory);
        r
    }

    pub fn register(&mut self, modality: &str, factory: PluginFactory) {
        self.factories.insert(modality.into(), factory);
    }

    pub fn modalities(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, entry: &DeviceEntry) -> Result<Box<dyn QpmPlugin>, QpmError> {
        let f = self
            .factories
            .get(&entry.modality)
            .ok_or_else(|| QpmError::UnknownModality(entry.modality.clone()))?;
        f(entry).map_err(|e| QpmError::PluginInit(entry.device_id.clone(), e))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpmError {
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("device {0:?} already registered")]
    DuplicateDevice(String),
    #[error("no plugin for modality {0:?}")]
    UnknownModality(String),
    #[error("device {0:?} failed to initialize: {1}")]
    PluginInit(String, String),
    #[error("reservation duration must be positive")]
    ZeroDuration,
    #[error("window overlaps an existing reservation; earliest feasible start is {earliest_start}")]
    Denied { earliest_start: Tick },
    #[error("ticket is not valid")]
    InvalidTicket,
    #[error("ticket window [{}, {}) does not contain tick {now}", window.start, window.end)]
    ExpiredTicket { window: Window, now: Tick },
    #[error("device {0:?} is offline")]
    DeviceOffline(String),
    #[error("circuit fails target validation: {}", join(.0))]
    ValidationFailed(Vec<Violation>),
    #[error("shots {shots} outside 1..={max}")]
    ShotsOutOfRange { shots: u64, max: u64 },
    #[error("task id {0:?} already submitted")]
    DuplicateTask(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("device rejected the task: {0}")]
    Rejected(String),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl QpmError {
    pub fn code(&self) -> &'static str {
        match self {
            QpmError::UnknownDevice(_) => "unknown_device",
            QpmError::DuplicateDevice(_) => "duplicate_device",
            QpmError::UnknownModality(_) => "unknown_modality",
            QpmError::PluginInit(..) => "plugin_init",
            QpmError::ZeroDuration => "zero_duration",
            QpmError::Denied { .. } => "denied",
            QpmError::InvalidTicket => "invalid_ticket",
            QpmError::ExpiredTicket { .. } => "expired_ticket",
            QpmError::DeviceOffline(_) => "device_offline",
            QpmError::ValidationFailed(_) => "validation_failed",
            QpmError::ShotsOutOfRange { .. } => "shots_exceeded",
            QpmError::DuplicateTask(_) => "duplicate_task",
            QpmError::UnknownTask(_) => "unknown_task",
            QpmError::Rejected(_) => "rejected",
        }
    }
}

/// Proof of a granted reservation window. The token is derived from a
/// per-process secret, so a ticket cannot be built by hand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ticket {
    pub grant_id: u64,
    pub device_id: String,
    pub window: Window,
    pub job_id: u64,
    token: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Retrieved {
    Pending,
    Done(QpmResult),
}

/// Results and events produced by one `advance`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Advanced {
    pub results: Vec<QpmResult>,
    pub events: Vec<DeviceEvent>,
}

/// Receiving end of an event subscription on one device.
#[derive(Debug)]
pub struct Subscription {
    device_id: String,
    rx: Receiver<DeviceEvent>,
}

impl Subscription {
    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn try_next(&self) -> Option<DeviceEvent> {
        self.rx.try_recv().ok()
    }

    pub fn next_timeout(&self, timeout: Duration) -> Option<DeviceEvent> {
        match self.rx.recv_timeout(timeout) {
            Ok(e) => Some(e),
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => None,
        }
    }

    pub fn drain(&self) -> Vec<DeviceEvent> {
        self.rx.try_iter().collect()
    }
}

struct Device {
    plugin: Box<dyn QpmPlugin>,
    subscribers: Vec<Sender<DeviceEvent>>,
    in_flight: u64,
}

enum TaskState {
    InFlight { device: String },
    Done(QpmResult),
}

#[derive(Default)]
struct Inner {
    order: Vec<String>,
    devices: HashMap<String, Device>,
    ledger: Ledger,
    tasks: HashMap<String, TaskState>,
}

/// Thread-safe facade over the registered plugins.
pub struct Qpm {
    inner: Mutex<Inner>,
    finished: Condvar,
    secret: u64,
}

impl Default for Qpm {
    fn default() -> Self {
        Qpm::new()
    }
}

impl Qpm {
    pub fn new() -> Qpm {
        let mut h = RandomState::new().build_hasher();
        h.write_u64(0x5eed);
        Qpm {
            inner: Mutex::new(Inner::default()),
            finished: Condvar::new(),
            secret: h.finish(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn token(&self, grant_id: u64, device: &str, window: Window) -> u64 {
        let mut t = mix64(self.secret ^ grant_id);
        for b in device.bytes() {
            t = mix64(t ^ b as u64);
        }
        mix64(t ^ window.start ^ window.end.rotate_left(32))
    }

    pub fn register(&self, plugin: Box<dyn QpmPlugin>) -> Result<String, QpmError> {
        let id = plugin.descriptor().device_id;
        let mut g = self.lock();
        if g.devices.contains_key(&id) {
            return Err(QpmError::DuplicateDevice(id));
        }
        g.order.push(id.clone());
        g.devices.insert(
            id.clone(),
            Device {
                plugin,
                subscribers: Vec::new(),
                in_flight: 0,
            },
        );
        Ok(id)
    }

    /// Registration order.
    pub fn device_ids(&self) -> Vec<String> {
        self.lock().order.clone()
    }

    pub fn query_device(&self, device_id: &str) -> Result<DeviceDescriptor, QpmError> {
        let g = self.lock();
        let d = g
            .devices
            .get(device_id)
            .ok_or_else(|| QpmError::UnknownDevice(device_id.into()))?;
        let mut desc = d.plugin.descriptor();
        desc.queue_depth = d.in_flight;
        Ok(desc)
    }

    pub fn capabilities(&self, device_id: &str) -> Result<BTreeMap<String, String>, QpmError> {
        let g = self.lock();
        let d = g
            .devices
            .get(device_id)
            .ok_or_else(|| QpmError::UnknownDevice(device_id.into()))?;
        Ok(d.plugin.capabilities())
    }

    pub fn estimate_duration(&self, device_id: &str, task: &QpmTask) -> Result<Tick, QpmError> {
        let g = self.lock();
        let d = g
            .devices
            .get(device_id)
            .ok_or_else(|| QpmError::UnknownDevice(device_id.into()))?;
        Ok(d.plugin.estimate_duration(task))
    }

    pub fn reserve(&self, device_id: &str, start: Tick, duration: Tick, job_id: u64) -> Result<Ticket, QpmError> {
        let mut g = self.lock();
        if !g.devices.contains_key(device_id) {
            return Err(QpmError::UnknownDevice(device_id.into()));
        }
        let grant = g.ledger.reserve(device_id, start, duration, job_id).map_err(|e| match e {
            ReserveError::ZeroDuration => QpmError::ZeroDuration,
            ReserveError::Denied { earliest_start } => QpmError::Denied { earliest_start },
            ReserveError::UnknownGrant(_) => QpmError::InvalidTicket,
        })?;
        Ok(Ticket {
            token: self.token(grant.id, device_id, grant.window),
            grant_id: grant.id,
            device_id: device_id.into(),
            window: grant.window,
            job_id,
        })
    }

    /// Every live grant on a device, in start order.
    pub fn reservations(&self, device_id: &str) -> Vec<Window> {
        self.lock().ledger.grants(device_id).iter().map(|g| g.window).collect()
    }

    /// Ends a ticket's window at `at`. Later submissions with it fail.
    pub fn release(&self, ticket: &Ticket, at: Tick) -> Result<(), QpmError> {
        let mut g = self.lock();
        if self.check_ticket(&g, ticket)?.is_none() {
            return Ok(());
        }
        g.ledger.truncate(ticket.grant_id, at).map_err(|_| QpmError::InvalidTicket)
    }

    /// The grant's current window, `None` once it was pruned or released
    /// to nothing.
    fn check_ticket(&self, g: &Inner, ticket: &Ticket) -> Result<Option<Window>, QpmError> {
        if ticket.token != self.token(ticket.grant_id, &ticket.device_id, ticket.window) {
            return Err(QpmError::InvalidTicket);
        }
        match g.ledger.get(ticket.grant_id) {
            Some(grant) if grant.resource == ticket.device_id && grant.holder == ticket.job_id => Ok(Some(grant.window)),
            Some(_) => Err(QpmError::InvalidTicket),
            None => Ok(None),
        }
    }

    pub fn submit(&self, ticket: &Ticket, task: QpmTask, now: Tick) -> Result<String, QpmError> {
        let mut g = self.lock();
        let Some(window) = self.check_ticket(&g, ticket)? else {
            return Err(QpmError::ExpiredTicket {
                window: ticket.window,
                now,
            });
        };
        if !window.contains(now) {
            return Err(QpmError::ExpiredTicket { window, now });
        }
        if g.tasks.contains_key(&task.task_id) {
            return Err(QpmError::DuplicateTask(task.task_id));
        }
        let device = g
            .devices
            .get_mut(&ticket.device_id)
            .ok_or_else(|| QpmError::UnknownDevice(ticket.device_id.clone()))?;
        let desc = device.plugin.descriptor();
        if desc.status == DeviceStatus::Offline {
            return Err(QpmError::DeviceOffline(desc.device_id));
        }
        let max = desc.target.max_shots();
        if task.shots == 0 || task.shots > max {
            return Err(QpmError::ShotsOutOfRange { shots: task.shots, max });
        }
        let violations = validate_against_target(&task.circuit, &desc.target);
        if !violations.is_empty() {
            return Err(QpmError::ValidationFailed(violations));
        }
        let id = task.task_id.clone();
        device.plugin.accept(task, now).map_err(QpmError::Rejected)?;
        device.in_flight += 1;
        g.tasks.insert(
            id.clone(),
            TaskState::InFlight {
                device: ticket.device_id.clone(),
            },
        );
        Ok(id)
    }

    /// A terminal result, or `Pending`. With `wait`, blocks until some other
    /// thread advances the device far enough. Stored results can be read any
    /// number of times.
    pub fn retrieve(&self, task_id: &str, wait: bool) -> Result<Retrieved, QpmError> {
        let mut g = self.lock();
        loop {
            match g.tasks.get(task_id) {
                None => return Err(QpmError::UnknownTask(task_id.into())),
                Some(TaskState::Done(r)) => return Ok(Retrieved::Done(r.clone())),
                Some(TaskState::InFlight { .. }) if !wait => return Ok(Retrieved::Pending),
                Some(TaskState::InFlight { .. }) => {
                    g = self.finished.wait(g).unwrap_or_else(|e| e.into_inner());
                }
            }
        }
    }

    /// Device the task was submitted to.
    pub fn task_device(&self, task_id: &str) -> Option<String> {
        match self.lock().tasks.get(task_id)? {
            TaskState::InFlight { device } => Some(device.clone()),
            TaskState::Done(r) => Some(r.device_id.clone()),
        }
    }

    /// Events emitted from now on are delivered in emission order.
    pub fn subscribe_events(&self, device_id: &str) -> Result<Subscription, QpmError> {
        let mut g = self.lock();
        let d = g
            .devices
            .get_mut(device_id)
            .ok_or_else(|| QpmError::UnknownDevice(device_id.into()))?;
        let (tx, rx) = mpsc::channel();
        d.subscribers.push(tx);
        Ok(Subscription {
            device_id: device_id.into(),
            rx,
        })
    }

    pub fn subscriber_count(&self, device_id: &str) -> usize {
        let mut g = self.lock();
        g.devices.get_mut(device_id).map_or(0, |d| d.subscribers.len())
    }

    /// Applies an event to the device and fans it out. The delivered event
    /// carries the device's epoch and status after the change.
    pub fn emit_event(&self, event: DeviceEvent) -> Result<(DeviceEvent, Vec<QpmResult>), QpmError> {
        let mut g = self.lock();
        let out = Self::emit_locked(&mut g, event)?;
        drop(g);
        if !out.1.is_empty() {
            self.finished.notify_all();
        }
        Ok(out)
    }

    fn emit_locked(g: &mut Inner, mut event: DeviceEvent) -> Result<(DeviceEvent, Vec<QpmResult>), QpmError> {
        let d = g
            .devices
            .get_mut(&event.device_id)
            .ok_or_else(|| QpmError::UnknownDevice(event.device_id.clone()))?;
        let killed = d.plugin.apply_event(&event);
        let desc = d.plugin.descriptor();
        event
            .payload
            .insert("calibration_epoch".into(), desc.calibration_epoch.to_string());
        event.payload.insert(
            "status".into(),
            serde_json::to_value(desc.status)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
        );
        // a closed receiver just drops out of the list
        d.subscribers.retain(|tx| tx.send(event.clone()).is_ok());
        let killed = killed.into_iter().map(|r| Self::finish(g, r)).collect();
        Ok((event, killed))
    }

    fn finish(g: &mut Inner, r: QpmResult) -> QpmResult {
        if let Some(TaskState::InFlight { device }) = g.tasks.get(&r.task_id) {
            if let Some(d) = g.devices.get_mut(device) {
                d.in_flight = d.in_flight.saturating_sub(1);
            }
        }
        g.tasks.insert(r.task_id.clone(), TaskState::Done(r.clone()));
        r
    }

    /// Runs every device up to `now`, in registration order, then lets each
    /// emit its calibration event. Grants that ended before `now` are dropped.
    pub fn advance(&self, now: Tick) -> Advanced {
        let mut g = self.lock();
        let mut out = Advanced::default();
        for id in g.order.clone() {
            let results = g.devices.get_mut(&id).expect("registered").plugin.advance(now);
            for r in results {
                out.results.push(Self::finish(&mut g, r));
            }
            let cal = g.devices.get_mut(&id).expect("registered").plugin.calibration_tick(now);
            if let Some(ev) = cal {
                let (ev, killed) = Self::emit_locked(&mut g, ev).expect("device exists");
                out.events.push(ev);
                out.results.extend(killed);
            }
        }
        g.ledger.prune_before(now);
        drop(g);
        if !out.results.is_empty() {
            self.finished.notify_all();
        }
        out
    }
}

/// `true` for events that take the device down or bring it back.
pub fn changes_availability(kind: DeviceEventKind) -> Option<bool> {
    match kind {
        DeviceEventKind::HardwareFault => Some(false),
        DeviceEventKind::Recovery => Some(true),
        _ => None,
    }
}
