//! Application-facing runtime: sessions, meshes, q-streams, completion and
//! event queues, tool pipelines and operation handles.
//!
//! All QPI state lives inside the engine lock. `Session` is a cheap handle
//! that names a session and forwards to the engine; the gateway uses the
//! same calls, which is what makes remote and in-process runs identical.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use qbridge_core::device::{DeviceDescriptor, DeviceEvent, DeviceEventKind, QpmTask, TaskOrigin, TaskTiming};
use qbridge_core::scheduler::{JobId, QuantumTaskRequest};
use qbridge_core::toolchain::{run_pipeline, PipelineError, ToolPipelineSpec, GATE_COUNTS_KEY, PASSES_KEY};
use qbridge_core::{MeasurementCounts, QuantumCircuit, Tick};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{Engine, State};
use crate::qpm::{QpmError, Subscription};
use crate::telemetry::Category;

macro_rules! handle {
    ($($(#[$m:meta])* $name:ident),* $(,)?) => {$(
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    )*};
}

handle!(SessionId, MeshId, StreamId, CqId, EqId, PipelineId, OpId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshPolicy {
    ReplicateAll,
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Completions are delivered in submission order.
    Sequential,
    /// Completions are delivered as they happen.
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamTarget {
    Device(String),
    Mesh(MeshId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionKind {
    Ok,
    Failed,
    DeadlineMissed,
}

impl CompletionKind {
    pub const ALL: [CompletionKind; 3] = [CompletionKind::Ok, CompletionKind::Failed, CompletionKind::DeadlineMissed];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    ExecuteTask,
    QueryDevice,
    CalibrateRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpPhase {
    Queued,
    Running,
    Done,
    Failed,
}

impl OpPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, OpPhase::Done | OpPhase::Failed)
    }
}

/// One circuit execution request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRequest {
    pub circuit: QuantumCircuit,
    pub shots: u64,
    /// Absolute tick by which execution must have started.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline: Option<Tick>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: SessionId,
    pub token: String,
    pub job_id: JobId,
    pub devices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpHandle {
    pub op_id: OpId,
    pub stream_id: StreamId,
    pub seq: u64,
    pub kind: OpKind,
    pub submitted_at: Tick,
    /// Devices the op went to, one completion each.
    pub devices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpStatus {
    pub op_id: OpId,
    pub stream_id: StreamId,
    pub kind: OpKind,
    pub state: OpPhase,
    pub submitted_at: Tick,
    pub replicas: u32,
    pub completed: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub op_id: OpId,
    pub stream_id: StreamId,
    pub seq: u64,
    pub replica: u32,
    pub kind: CompletionKind,
    pub op_kind: OpKind,
    pub device_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<MeasurementCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TaskTiming>,
    /// Passes applied to the task, as recorded in the circuit metadata.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_counts: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<DeviceDescriptor>,
    /// Tick the completion was produced.
    pub at: Tick,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalizeSummary {
    pub ops: u64,
    pub done: u64,
    pub failed: u64,
    /// Failed ops with at least one missed deadline.
    pub deadline_missed: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpiError {
    #[error("job {0} has no active allocation")]
    NoAllocation(JobId),
    #[error("unknown session")]
    UnknownSession,
    #[error("invalid handle {0}")]
    InvalidHandle(u64),
    #[error("handle {0} belongs to another session")]
    CrossSession(u64),
    #[error("session already finalized")]
    AlreadyFinalized,
    #[error("device {0:?} is not part of this session")]
    UnknownDevice(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("pipeline failed: {0}")]
    Pipeline(String),
    #[error("{0}")]
    NotEligible(String),
    #[error("enqueue rejected: {0}")]
    Enqueue(String),
    #[error(transparent)]
    Qpm(#[from] QpmError),
    #[error("timed out")]
    Timeout,
    #[error("gateway is shutting down")]
    ShuttingDown,
}

impl QpiError {
    pub fn code(&self) -> &'static str {
        match self {
            QpiError::NoAllocation(_) => "no_allocation",
            QpiError::UnknownSession => "unknown_session",
            QpiError::InvalidHandle(_) => "invalid_handle",
            QpiError::CrossSession(_) => "cross_session",
            QpiError::AlreadyFinalized => "already_finalized",
            QpiError::UnknownDevice(_) => "unknown_device",
            QpiError::InvalidArgument(_) => "invalid_argument",
            QpiError::ValidationFailed(_) => "validation_failed",
            QpiError::Pipeline(_) => "pipeline_error",
            QpiError::NotEligible(_) => "not_eligible",
            QpiError::Enqueue(_) => "enqueue_rejected",
            QpiError::Qpm(e) => e.code(),
            QpiError::Timeout => "timeout",
            QpiError::ShuttingDown => "shutting_down",
        }
    }
}

impl From<PipelineError> for QpiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::TargetViolations(_) => QpiError::ValidationFailed(e.to_string()),
            other => QpiError::Pipeline(other.to_string()),
        }
    }
}

/// Transport-neutral error: what travels over the wire and what remote and
/// in-process sessions are compared on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> ApiError {
        ApiError {
            code: code.into(),
            message: message.into(),
        }
    }
}

impl From<QpiError> for ApiError {
    fn from(e: QpiError) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}

pub type QpiResult<T> = Result<T, QpiError>;

struct Mesh {
    devices: Vec<String>,
    policy: MeshPolicy,
}

struct Stream {
    target: StreamTarget,
    mode: StreamMode,
    pipeline: Option<PipelineId>,
    cqs: Vec<CqId>,
    next_seq: u64,
    cursor: usize,
    /// Sequential streams: completions held back until everything
    /// submitted earlier has been delivered.
    held: BTreeMap<(u64, u32), Option<Completion>>,
}

struct Cq {
    filter: BTreeSet<CompletionKind>,
    entries: VecDeque<Completion>,
}

struct Eq {
    filter: BTreeSet<DeviceEventKind>,
    sub: Subscription,
    entries: VecDeque<DeviceEvent>,
}

struct Op {
    stream: StreamId,
    seq: u64,
    kind: OpKind,
    submitted_at: Tick,
    replicas: u32,
    phase: OpPhase,
    results: Vec<Completion>,
}

struct SessionState {
    token: String,
    job_id: JobId,
    devices: Vec<String>,
    meshes: BTreeMap<u64, Mesh>,
    streams: BTreeMap<u64, Stream>,
    cqs: BTreeMap<u64, Cq>,
    eqs: BTreeMap<u64, Eq>,
    pipelines: BTreeMap<u64, ToolPipelineSpec>,
    ops: BTreeMap<u64, Op>,
    finalized: bool,
}

struct Route {
    session: u64,
    op: u64,
    replica: u32,
    device: String,
    passes: Option<String>,
    gate_counts: Option<String>,
}

/// Every session's objects, plus the task routing table.
pub(crate) struct QpiState {
    next_session: u64,
    next_handle: u64,
    sessions: BTreeMap<u64, SessionState>,
    tokens: HashMap<String, u64>,
    owner: HashMap<u64, u64>,
    routes: HashMap<String, Route>,
    /// Tasks waiting in the scheduler for a device.
    pub(crate) pending: HashMap<String, QpmTask>,
    secret: u64,
}

impl QpiState {
    pub(crate) fn new(secret: u64) -> QpiState {
        QpiState {
            next_session: 1,
            next_handle: 1,
            sessions: BTreeMap::new(),
            tokens: HashMap::new(),
            owner: HashMap::new(),
            routes: HashMap::new(),
            pending: HashMap::new(),
            secret,
        }
    }

    pub(crate) fn session_for_token(&self, token: &str) -> QpiResult<u64> {
        self.tokens.get(token).copied().ok_or(QpiError::UnknownSession)
    }

    pub(crate) fn open_session(&mut self, job_id: JobId, devices: Vec<String>) -> SessionInfo {
        let id = self.next_session;
        self.next_session += 1;
        let token = format!("{id:x}-{:016x}", qbridge_core::rng::mix64(self.secret ^ id));
        self.tokens.insert(token.clone(), id);
        self.sessions.insert(
            id,
            SessionState {
                token: token.clone(),
                job_id,
                devices: devices.clone(),
                meshes: BTreeMap::new(),
                streams: BTreeMap::new(),
                cqs: BTreeMap::new(),
                eqs: BTreeMap::new(),
                pipelines: BTreeMap::new(),
                ops: BTreeMap::new(),
                finalized: false,
            },
        );
        SessionInfo {
            session_id: SessionId(id),
            token,
            job_id,
            devices,
        }
    }

    fn live(&mut self, sid: u64) -> QpiResult<&mut SessionState> {
        match self.sessions.get_mut(&sid) {
            None => Err(QpiError::UnknownSession),
            Some(s) if s.finalized => Err(QpiError::InvalidHandle(sid)),
            Some(s) => Ok(s),
        }
    }

    fn handle(&mut self, sid: u64) -> u64 {
        let h = self.next_handle;
        self.next_handle += 1;
        self.owner.insert(h, sid);
        h
    }

    /// Distinguishes a handle of another session from one that never
    /// existed here.
    fn foreign(&self, sid: u64, h: u64) -> QpiError {
        match self.owner.get(&h) {
            Some(&o) if o != sid => QpiError::CrossSession(h),
            _ => QpiError::InvalidHandle(h),
        }
    }

    pub(crate) fn job_of(&self, sid: u64) -> QpiResult<JobId> {
        self.sessions.get(&sid).map(|s| s.job_id).ok_or(QpiError::UnknownSession)
    }

    pub(crate) fn devices_of(&mut self, sid: u64) -> QpiResult<Vec<String>> {
        Ok(self.live(sid)?.devices.clone())
    }

    pub(crate) fn check_device(&mut self, sid: u64, device: &str) -> QpiResult<()> {
        if self.live(sid)?.devices.iter().any(|d| d == device) {
            Ok(())
        } else {
            Err(QpiError::UnknownDevice(device.into()))
        }
    }

    pub(crate) fn create_mesh(&mut self, sid: u64, devices: &[String], policy: MeshPolicy) -> QpiResult<MeshId> {
        if devices.is_empty() {
            return Err(QpiError::InvalidArgument("a mesh needs at least one device".into()));
        }
        let mut seen = BTreeSet::new();
        for d in devices {
            self.check_device(sid, d)?;
            if !seen.insert(d) {
                return Err(QpiError::InvalidArgument(format!("device {d:?} listed twice")));
            }
        }
        let h = self.handle(sid);
        self.live(sid)?.meshes.insert(
            h,
            Mesh {
                devices: devices.to_vec(),
                policy,
            },
        );
        Ok(MeshId(h))
    }

    pub(crate) fn create_qstream(&mut self, sid: u64, target: StreamTarget, mode: StreamMode) -> QpiResult<StreamId> {
        match &target {
            StreamTarget::Device(d) => self.check_device(sid, d)?,
            StreamTarget::Mesh(m) => {
                if !self.live(sid)?.meshes.contains_key(&m.0) {
                    return Err(self.foreign(sid, m.0));
                }
            }
        }
        let h = self.handle(sid);
        self.live(sid)?.streams.insert(
            h,
            Stream {
                target,
                mode,
                pipeline: None,
                cqs: Vec::new(),
                next_seq: 0,
                cursor: 0,
                held: BTreeMap::new(),
            },
        );
        Ok(StreamId(h))
    }

    fn stream_mut(&mut self, sid: u64, stream: StreamId) -> QpiResult<&mut Stream> {
        if !self.live(sid)?.streams.contains_key(&stream.0) {
            return Err(self.foreign(sid, stream.0));
        }
        Ok(self.live(sid)?.streams.get_mut(&stream.0).expect("checked"))
    }

    pub(crate) fn bind_completion_queue(&mut self, sid: u64, stream: StreamId, filter: &[CompletionKind]) -> QpiResult<CqId> {
        self.stream_mut(sid, stream)?;
        let h = self.handle(sid);
        let s = self.live(sid)?;
        s.streams.get_mut(&stream.0).expect("checked").cqs.push(CqId(h));
        let filter = if filter.is_empty() {
            CompletionKind::ALL.into_iter().collect()
        } else {
            filter.iter().copied().collect()
        };
        s.cqs.insert(
            h,
            Cq {
                filter,
                entries: VecDeque::new(),
            },
        );
        Ok(CqId(h))
    }

    pub(crate) fn add_event_queue(&mut self, sid: u64, sub: Subscription, filter: &[DeviceEventKind]) -> QpiResult<EqId> {
        self.live(sid)?;
        let h = self.handle(sid);
        let filter = if filter.is_empty() {
            DeviceEventKind::ALL.into_iter().collect()
        } else {
            filter.iter().copied().collect()
        };
        self.live(sid)?.eqs.insert(
            h,
            Eq {
                filter,
                sub,
                entries: VecDeque::new(),
            },
        );
        Ok(EqId(h))
    }

    pub(crate) fn create_tool_pipeline(&mut self, sid: u64, spec: ToolPipelineSpec) -> QpiResult<PipelineId> {
        self.live(sid)?;
        spec.validate()?;
        let h = self.handle(sid);
        self.live(sid)?.pipelines.insert(h, spec);
        Ok(PipelineId(h))
    }

    pub(crate) fn bind_tool_pipeline(&mut self, sid: u64, stream: StreamId, pipeline: PipelineId) -> QpiResult<()> {
        if !self.live(sid)?.pipelines.contains_key(&pipeline.0) {
            return Err(self.foreign(sid, pipeline.0));
        }
        self.stream_mut(sid, stream)?.pipeline = Some(pipeline);
        Ok(())
    }

    /// Devices the next op on `stream` goes to, and the cursor after it.
    fn placement(&mut self, sid: u64, stream: StreamId) -> QpiResult<(Vec<String>, usize)> {
        let st = self.stream_mut(sid, stream)?;
        let (target, cursor) = (st.target.clone(), st.cursor);
        match target {
            StreamTarget::Device(d) => Ok((vec![d], cursor)),
            StreamTarget::Mesh(m) => {
                let s = self.live(sid)?;
                let mesh = s.meshes.get(&m.0).ok_or(QpiError::InvalidHandle(m.0))?;
                Ok(match mesh.policy {
                    MeshPolicy::ReplicateAll => (mesh.devices.clone(), cursor),
                    MeshPolicy::RoundRobin => (vec![mesh.devices[cursor % mesh.devices.len()].clone()], cursor + 1),
                })
            }
        }
    }

    fn new_op(&mut self, sid: u64, stream: StreamId, kind: OpKind, replicas: u32, cursor: usize, now: Tick) -> QpiResult<(u64, u64)> {
        let h = self.handle(sid);
        let st = self.stream_mut(sid, stream)?;
        let seq = st.next_seq;
        st.next_seq += 1;
        st.cursor = cursor;
        if st.mode == StreamMode::Sequential {
            for r in 0..replicas {
                st.held.insert((seq, r), None);
            }
        }
        self.live(sid)?.ops.insert(
            h,
            Op {
                stream,
                seq,
                kind,
                submitted_at: now,
                replicas,
                phase: OpPhase::Queued,
                results: Vec::new(),
            },
        );
        Ok((h, seq))
    }

    fn op(&mut self, sid: u64, op: OpId) -> QpiResult<&mut Op> {
        if !self.live(sid)?.ops.contains_key(&op.0) {
            return Err(self.foreign(sid, op.0));
        }
        Ok(self.live(sid)?.ops.get_mut(&op.0).expect("checked"))
    }

    pub(crate) fn op_status(&mut self, sid: u64, op: OpId) -> QpiResult<OpStatus> {
        let o = self.op(sid, op)?;
        Ok(OpStatus {
            op_id: op,
            stream_id: o.stream,
            kind: o.kind,
            state: o.phase,
            submitted_at: o.submitted_at,
            replicas: o.replicas,
            completed: o.results.len() as u32,
        })
    }

    /// Results of a terminal op in replica order.
    pub(crate) fn op_results(&mut self, sid: u64, op: OpId) -> QpiResult<Option<Vec<Completion>>> {
        let o = self.op(sid, op)?;
        if !o.phase.is_terminal() {
            return Ok(None);
        }
        let mut r = o.results.clone();
        r.sort_by_key(|c| c.replica);
        Ok(Some(r))
    }

    /// Takes up to `max` entries (all when `max == 0`); `None` when empty.
    pub(crate) fn take_completions(&mut self, sid: u64, cq: CqId, max: usize) -> QpiResult<Vec<Completion>> {
        if !self.live(sid)?.cqs.contains_key(&cq.0) {
            return Err(self.foreign(sid, cq.0));
        }
        let q = self.live(sid)?.cqs.get_mut(&cq.0).expect("checked");
        let n = if max == 0 { q.entries.len() } else { max.min(q.entries.len()) };
        Ok(q.entries.drain(..n).collect())
    }

    pub(crate) fn take_events(&mut self, sid: u64, eq: EqId, max: usize) -> QpiResult<Vec<DeviceEvent>> {
        if !self.live(sid)?.eqs.contains_key(&eq.0) {
            return Err(self.foreign(sid, eq.0));
        }
        let q = self.live(sid)?.eqs.get_mut(&eq.0).expect("checked");
        for e in q.sub.drain() {
            if q.filter.contains(&e.kind) {
                q.entries.push_back(e);
            }
        }
        let n = if max == 0 { q.entries.len() } else { max.min(q.entries.len()) };
        Ok(q.entries.drain(..n).collect())
    }

    pub(crate) fn all_terminal(&mut self, sid: u64) -> QpiResult<bool> {
        Ok(self.live(sid)?.ops.values().all(|o| o.phase.is_terminal()))
    }

    /// Whether any session still has work in flight.
    pub(crate) fn busy(&self) -> bool {
        self.sessions
            .values()
            .any(|s| !s.finalized && s.ops.values().any(|o| !o.phase.is_terminal()))
    }

    pub(crate) fn finalize(&mut self, sid: u64) -> QpiResult<FinalizeSummary> {
        let s = match self.sessions.get_mut(&sid) {
            None => return Err(QpiError::UnknownSession),
            Some(s) if s.finalized => return Err(QpiError::AlreadyFinalized),
            Some(s) => s,
        };
        let mut sum = FinalizeSummary::default();
        for o in s.ops.values() {
            sum.ops += 1;
            match o.phase {
                OpPhase::Done => sum.done += 1,
                _ => {
                    sum.failed += 1;
                    if o.results.iter().any(|c| c.kind == CompletionKind::DeadlineMissed) {
                        sum.deadline_missed += 1;
                    }
                }
            }
        }
        s.finalized = true;
        s.eqs.clear();
        s.cqs.clear();
        s.streams.clear();
        s.meshes.clear();
        s.pipelines.clear();
        // the token stays resolvable so remote callers see the same errors as local ones
        self.routes.retain(|_, r| r.session != sid);
        Ok(sum)
    }

    pub(crate) fn task_started(&mut self, task_id: &str) {
        let Some(r) = self.routes.get(task_id) else { return };
        let (sid, op) = (r.session, r.op);
        if let Some(o) = self.sessions.get_mut(&sid).and_then(|s| s.ops.get_mut(&op)) {
            if o.phase == OpPhase::Queued {
                o.phase = OpPhase::Running;
            }
        }
    }

    pub(crate) fn route_job(&self, task_id: &str) -> Option<JobId> {
        let r = self.routes.get(task_id)?;
        self.sessions.get(&r.session).map(|s| s.job_id)
    }

    pub(crate) fn session_info(&self, token: &str) -> QpiResult<SessionInfo> {
        let sid = self.session_for_token(token)?;
        let s = self.sessions.get(&sid).ok_or(QpiError::UnknownSession)?;
        Ok(SessionInfo {
            session_id: SessionId(sid),
            token: s.token.clone(),
            job_id: s.job_id,
            devices: s.devices.clone(),
        })
    }

    pub(crate) fn route_device(&self, task_id: &str) -> Option<&str> {
        self.routes.get(task_id).map(|r| r.device.as_str())
    }

    /// Turns a task outcome into a completion and delivers it.
    pub(crate) fn task_finished(
        &mut self,
        task_id: &str,
        kind: CompletionKind,
        counts: Option<MeasurementCounts>,
        error: Option<String>,
        timing: Option<TaskTiming>,
        now: Tick,
    ) {
        let Some(r) = self.routes.remove(task_id) else { return };
        self.pending.remove(task_id);
        let Some(o) = self.sessions.get(&r.session).and_then(|s| s.ops.get(&r.op)) else { return };
        let c = Completion {
            op_id: OpId(r.op),
            stream_id: o.stream,
            seq: o.seq,
            replica: r.replica,
            kind,
            op_kind: OpKind::ExecuteTask,
            device_id: r.device,
            task_id: Some(task_id.into()),
            counts,
            error,
            timing,
            passes: r.passes,
            gate_counts: r.gate_counts,
            descriptor: None,
            at: now,
        };
        self.deliver(r.session, c);
    }

    fn deliver(&mut self, sid: u64, c: Completion) {
        let Some(s) = self.sessions.get_mut(&sid) else { return };
        if s.finalized {
            return;
        }
        let Some(o) = s.ops.get_mut(&c.op_id.0) else { return };
        o.results.push(c.clone());
        if o.results.len() as u32 == o.replicas {
            o.phase = if o.results.iter().all(|r| r.kind == CompletionKind::Ok) {
                OpPhase::Done
            } else {
                OpPhase::Failed
            };
        } else if o.phase == OpPhase::Queued {
            o.phase = OpPhase::Running;
        }
        let Some(st) = s.streams.get_mut(&c.stream_id.0) else { return };
        let ready = match st.mode {
            StreamMode::Parallel => vec![c],
            StreamMode::Sequential => {
                st.held.insert((c.seq, c.replica), Some(c));
                let mut out = Vec::new();
                while let Some(entry) = st.held.first_entry() {
                    if entry.get().is_none() {
                        break;
                    }
                    out.push(entry.remove().expect("checked"));
                }
                out
            }
        };
        let cqs = st.cqs.clone();
        for c in ready {
            for cq in &cqs {
                if let Some(q) = s.cqs.get_mut(&cq.0) {
                    if q.filter.contains(&c.kind) {
                        q.entries.push_back(c.clone());
                    }
                }
            }
        }
    }
}

impl State {
    pub(crate) fn qpi_submit(&mut self, sid: u64, stream: StreamId, req: &TaskRequest) -> QpiResult<OpHandle> {
        if self.draining {
            return Err(QpiError::ShuttingDown);
        }
        let job_id = self.qpi.job_of(sid)?;
        let (devices, cursor) = self.qpi.placement(sid, stream)?;
        let spec = {
            let pid = self.qpi.stream_mut(sid, stream)?.pipeline;
            match pid {
                Some(p) => self.qpi.live(sid)?.pipelines.get(&p.0).cloned().ok_or(QpiError::InvalidHandle(p.0))?,
                None => ToolPipelineSpec::new([], None),
            }
        };
        let view = self.sched.job(job_id).ok_or(QpiError::NoAllocation(job_id))?;
        if !view.quantum_eligible {
            return Err(QpiError::NotEligible(format!("job {job_id} is not in a quantum-eligible phase")));
        }
        let max_cost = self.sched.spec(job_id).map_or(0, |s| s.qos.max_task_cost);
        let now = self.sched.now();
        // transpile and price every replica before touching the scheduler
        let mut prepared = Vec::with_capacity(devices.len());
        for (replica, dev) in devices.iter().enumerate() {
            let desc = self.qpm.query_device(dev)?;
            if req.shots == 0 || req.shots > desc.target.max_shots() {
                return Err(QpmError::ShotsOutOfRange {
                    shots: req.shots,
                    max: desc.target.max_shots(),
                }
                .into());
            }
            let (mut circuit, _stats) = run_pipeline(&spec.with_final_stage(&desc.target), &req.circuit)?;
            circuit.metadata.insert("origin".into(), format!("job-{job_id}"));
            let task = QpmTask {
                task_id: String::new(),
                circuit,
                shots: req.shots,
                deadline: req.deadline,
                origin: TaskOrigin {
                    job_id,
                    stream_id: Some(stream.0),
                },
            };
            prepared.push((replica as u32, dev.clone(), task));
        }
        let (op, seq) = self.qpi.new_op(sid, stream, OpKind::ExecuteTask, devices.len() as u32, cursor, now)?;
        let mut failures = Vec::new();
        for (replica, dev, mut task) in prepared {
            task.task_id = format!("s{sid}-o{op}-r{replica}");
            let cost = self.qpm.estimate_duration(&dev, &task)?;
            let passes = task.circuit.metadata.get(PASSES_KEY).cloned();
            let gate_counts = task.circuit.metadata.get(GATE_COUNTS_KEY).cloned();
            self.qpi.routes.insert(
                task.task_id.clone(),
                Route {
                    session: sid,
                    op,
                    replica,
                    device: dev.clone(),
                    passes: passes.clone(),
                    gate_counts: gate_counts.clone(),
                },
            );
            self.telemetry.record(
                now,
                Category::Pipeline,
                Some(job_id),
                json!({"task_id": task.task_id, "device_id": dev, "passes": passes, "gate_counts": gate_counts}),
            );
            let enq = if cost > max_cost {
                Err(format!("task cost {cost} exceeds the job's max_task_cost {max_cost}"))
            } else {
                self.sched
                    .enqueue_quantum_task(
                        job_id,
                        QuantumTaskRequest {
                            task_id: task.task_id.clone(),
                            cost,
                            devices: Some(vec![dev.clone()]),
                            deadline: req.deadline,
                        },
                    )
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            };
            self.telemetry.record(
                now,
                Category::Task,
                Some(job_id),
                json!({"event": "queued", "task_id": task.task_id, "device_id": dev, "cost": cost, "op_id": op, "stream_id": stream.0, "seq": seq}),
            );
            match enq {
                Ok(()) => {
                    self.qpi.pending.insert(task.task_id.clone(), task);
                }
                Err(e) => failures.push((task.task_id, e)),
            }
        }
        for (task_id, e) in failures {
            self.finish_task(&task_id, CompletionKind::Failed, None, Some(e), None, now);
        }
        Ok(OpHandle {
            op_id: OpId(op),
            stream_id: stream,
            seq,
            kind: OpKind::ExecuteTask,
            submitted_at: now,
            devices,
        })
    }

    /// Query and calibrate ops complete at once, on every placement device.
    pub(crate) fn qpi_submit_op(&mut self, sid: u64, stream: StreamId, kind: OpKind) -> QpiResult<OpHandle> {
        if kind == OpKind::ExecuteTask {
            return Err(QpiError::InvalidArgument("use submit for execute_task".into()));
        }
        if self.draining {
            return Err(QpiError::ShuttingDown);
        }
        let job_id = self.qpi.job_of(sid)?;
        let (devices, cursor) = self.qpi.placement(sid, stream)?;
        let now = self.sched.now();
        let (op, seq) = self.qpi.new_op(sid, stream, kind, devices.len() as u32, cursor, now)?;
        for (replica, dev) in devices.iter().enumerate() {
            let outcome = match kind {
                OpKind::CalibrateRequest => self
                    .emit_device_event(DeviceEvent {
                        device_id: dev.clone(),
                        kind: DeviceEventKind::CalibrationUpdate,
                        payload: BTreeMap::from([("requested_by".into(), format!("job-{job_id}"))]),
                        at: now,
                    })
                    .and_then(|_| self.qpm.query_device(dev)),
                _ => self.qpm.query_device(dev),
            };
            let (kind, descriptor, error) = match outcome {
                Ok(d) => (CompletionKind::Ok, Some(d), None),
                Err(e) => (CompletionKind::Failed, None, Some(e.to_string())),
            };
            let c = Completion {
                op_id: OpId(op),
                stream_id: stream,
                seq,
                replica: replica as u32,
                kind,
                op_kind: self.qpi.op(sid, OpId(op))?.kind,
                device_id: dev.clone(),
                task_id: None,
                counts: None,
                error,
                timing: None,
                passes: None,
                gate_counts: None,
                descriptor,
                at: now,
            };
            self.qpi.deliver(sid, c);
        }
        Ok(OpHandle {
            op_id: OpId(op),
            stream_id: stream,
            seq,
            kind,
            submitted_at: now,
            devices,
        })
    }
}

/// The QPI operations, implemented in-process by [`Session`] and over the
/// wire by `RemoteSession`.
pub trait QpiApi {
    fn info(&self) -> SessionInfo;
    fn list_devices(&self) -> Result<Vec<DeviceDescriptor>, ApiError>;
    fn query_device(&self, device_id: &str) -> Result<DeviceDescriptor, ApiError>;
    fn create_mesh(&self, devices: &[String], policy: MeshPolicy) -> Result<MeshId, ApiError>;
    fn create_qstream(&self, target: StreamTarget, mode: StreamMode) -> Result<StreamId, ApiError>;
    fn bind_completion_queue(&self, stream: StreamId, filter: &[CompletionKind]) -> Result<CqId, ApiError>;
    fn bind_event_queue(&self, device_id: &str, filter: &[DeviceEventKind]) -> Result<EqId, ApiError>;
    fn create_tool_pipeline(&self, spec: &ToolPipelineSpec) -> Result<PipelineId, ApiError>;
    fn bind_tool_pipeline(&self, stream: StreamId, pipeline: PipelineId) -> Result<(), ApiError>;
    fn submit(&self, stream: StreamId, req: &TaskRequest) -> Result<OpHandle, ApiError>;
    fn submit_op(&self, stream: StreamId, kind: OpKind) -> Result<OpHandle, ApiError>;
    fn op_status(&self, op: OpId) -> Result<OpStatus, ApiError>;
    fn poll_completion(&self, cq: CqId, max_entries: usize, timeout_ticks: u64) -> Result<Vec<Completion>, ApiError>;
    fn poll_events(&self, eq: EqId, max_entries: usize, timeout_ticks: u64) -> Result<Vec<DeviceEvent>, ApiError>;
    fn submit_and_wait(&self, stream: StreamId, req: &TaskRequest, timeout_ticks: Option<u64>) -> Result<Vec<Completion>, ApiError>;
    fn finalize(&self) -> Result<FinalizeSummary, ApiError>;
}

/// In-process session handle. Clones name the same session.
#[derive(Clone)]
pub struct Session {
    engine: Engine,
    info: SessionInfo,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session").field("info", &self.info).finish()
    }
}

impl Session {
    pub(crate) fn new(engine: Engine, info: SessionInfo) -> Session {
        Session { engine, info }
    }

    pub fn id(&self) -> SessionId {
        self.info.session_id
    }

    pub fn token(&self) -> &str {
        &self.info.token
    }

    pub fn job_id(&self) -> JobId {
        self.info.job_id
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    fn sid(&self) -> u64 {
        self.info.session_id.0
    }

    pub fn list_devices(&self) -> QpiResult<Vec<DeviceDescriptor>> {
        self.engine.with_state(|st| {
            let devs = st.qpi.devices_of(self.sid())?;
            devs.iter().map(|d| st.qpm.query_device(d).map_err(QpiError::from)).collect()
        })
    }

    pub fn query_device(&self, device_id: &str) -> QpiResult<DeviceDescriptor> {
        self.engine.with_state(|st| {
            st.qpi.check_device(self.sid(), device_id)?;
            Ok(st.qpm.query_device(device_id)?)
        })
    }

    pub fn create_mesh(&self, devices: &[String], policy: MeshPolicy) -> QpiResult<MeshId> {
        self.engine.with_state(|st| st.qpi.create_mesh(self.sid(), devices, policy))
    }

    pub fn create_qstream(&self, target: StreamTarget, mode: StreamMode) -> QpiResult<StreamId> {
        self.engine.with_state(|st| st.qpi.create_qstream(self.sid(), target, mode))
    }

    pub fn bind_completion_queue(&self, stream: StreamId, filter: &[CompletionKind]) -> QpiResult<CqId> {
        self.engine.with_state(|st| st.qpi.bind_completion_queue(self.sid(), stream, filter))
    }

    /// Only events emitted after this call reach the queue.
    pub fn bind_event_queue(&self, device_id: &str, filter: &[DeviceEventKind]) -> QpiResult<EqId> {
        self.engine.with_state(|st| {
            st.qpi.check_device(self.sid(), device_id)?;
            let sub = st.qpm.subscribe_events(device_id)?;
            st.qpi.add_event_queue(self.sid(), sub, filter)
        })
    }

    pub fn create_tool_pipeline(&self, spec: &ToolPipelineSpec) -> QpiResult<PipelineId> {
        self.engine.with_state(|st| st.qpi.create_tool_pipeline(self.sid(), spec.clone()))
    }

    pub fn bind_tool_pipeline(&self, stream: StreamId, pipeline: PipelineId) -> QpiResult<()> {
        self.engine.with_state(|st| st.qpi.bind_tool_pipeline(self.sid(), stream, pipeline))
    }

    pub fn submit(&self, stream: StreamId, req: &TaskRequest) -> QpiResult<OpHandle> {
        self.engine.with_state(|st| st.qpi_submit(self.sid(), stream, req))
    }

    pub fn submit_op(&self, stream: StreamId, kind: OpKind) -> QpiResult<OpHandle> {
        self.engine.with_state(|st| st.qpi_submit_op(self.sid(), stream, kind))
    }

    pub fn op_status(&self, op: OpId) -> QpiResult<OpStatus> {
        self.engine.with_state(|st| st.qpi.op_status(self.sid(), op))
    }

    /// Waits up to `timeout_ticks` for at least one entry. `max_entries == 0`
    /// takes everything queued.
    pub fn poll_completion(&self, cq: CqId, max_entries: usize, timeout_ticks: u64) -> QpiResult<Vec<Completion>> {
        let sid = self.sid();
        self.engine
            .wait_for(Some(timeout_ticks), |st| {
                let got = st.qpi.take_completions(sid, cq, max_entries)?;
                Ok((!got.is_empty()).then_some(got))
            })
            .map(Option::unwrap_or_default)
    }

    pub fn poll_events(&self, eq: EqId, max_entries: usize, timeout_ticks: u64) -> QpiResult<Vec<DeviceEvent>> {
        let sid = self.sid();
        self.engine
            .wait_for(Some(timeout_ticks), |st| {
                let got = st.qpi.take_events(sid, eq, max_entries)?;
                Ok((!got.is_empty()).then_some(got))
            })
            .map(Option::unwrap_or_default)
    }

    /// Submits and blocks until every replica has completed. Bound
    /// completion queues still receive the entries.
    pub fn submit_and_wait(&self, stream: StreamId, req: &TaskRequest, timeout_ticks: Option<u64>) -> QpiResult<Vec<Completion>> {
        let op = self.submit(stream, req)?.op_id;
        let sid = self.sid();
        self.engine
            .wait_for(timeout_ticks, |st| st.qpi.op_results(sid, op))?
            .ok_or(QpiError::Timeout)
    }

    /// Waits for in-flight ops, then invalidates every handle.
    pub fn finalize(&self) -> QpiResult<FinalizeSummary> {
        let sid = self.sid();
        let drained = self.engine.wait_for(None, |st| match st.qpi.all_terminal(sid) {
            Ok(true) => Ok(Some(())),
            Ok(false) => Ok(None),
            // already finalized: let finalize report it
            Err(QpiError::InvalidHandle(_)) => Ok(Some(())),
            Err(e) => Err(e),
        })?;
        if drained.is_none() {
            return Err(QpiError::Timeout);
        }
        self.engine.with_state(|st| st.qpi.finalize(sid))
    }
}

impl QpiApi for Session {
    fn info(&self) -> SessionInfo {
        self.info.clone()
    }
    fn list_devices(&self) -> Result<Vec<DeviceDescriptor>, ApiError> {
        Ok(Session::list_devices(self)?)
    }
    fn query_device(&self, device_id: &str) -> Result<DeviceDescriptor, ApiError> {
        Ok(Session::query_device(self, device_id)?)
    }
    fn create_mesh(&self, devices: &[String], policy: MeshPolicy) -> Result<MeshId, ApiError> {
        Ok(Session::create_mesh(self, devices, policy)?)
    }
    fn create_qstream(&self, target: StreamTarget, mode: StreamMode) -> Result<StreamId, ApiError> {
        Ok(Session::create_qstream(self, target, mode)?)
    }
    fn bind_completion_queue(&self, stream: StreamId, filter: &[CompletionKind]) -> Result<CqId, ApiError> {
        Ok(Session::bind_completion_queue(self, stream, filter)?)
    }
    fn bind_event_queue(&self, device_id: &str, filter: &[DeviceEventKind]) -> Result<EqId, ApiError> {
        Ok(Session::bind_event_queue(self, device_id, filter)?)
    }
    fn create_tool_pipeline(&self, spec: &ToolPipelineSpec) -> Result<PipelineId, ApiError> {
        Ok(Session::create_tool_pipeline(self, spec)?)
    }
    fn bind_tool_pipeline(&self, stream: StreamId, pipeline: PipelineId) -> Result<(), ApiError> {
        Ok(Session::bind_tool_pipeline(self, stream, pipeline)?)
    }
    fn submit(&self, stream: StreamId, req: &TaskRequest) -> Result<OpHandle, ApiError> {
        Ok(Session::submit(self, stream, req)?)
    }
    fn submit_op(&self, stream: StreamId, kind: OpKind) -> Result<OpHandle, ApiError> {
        Ok(Session::submit_op(self, stream, kind)?)
    }
    fn op_status(&self, op: OpId) -> Result<OpStatus, ApiError> {
        Ok(Session::op_status(self, op)?)
    }
    fn poll_completion(&self, cq: CqId, max_entries: usize, timeout_ticks: u64) -> Result<Vec<Completion>, ApiError> {
        Ok(Session::poll_completion(self, cq, max_entries, timeout_ticks)?)
    }
    fn poll_events(&self, eq: EqId, max_entries: usize, timeout_ticks: u64) -> Result<Vec<DeviceEvent>, ApiError> {
        Ok(Session::poll_events(self, eq, max_entries, timeout_ticks)?)
    }
    fn submit_and_wait(&self, stream: StreamId, req: &TaskRequest, timeout_ticks: Option<u64>) -> Result<Vec<Completion>, ApiError> {
        Ok(Session::submit_and_wait(self, stream, req, timeout_ticks)?)
    }
    fn finalize(&self) -> Result<FinalizeSummary, ApiError> {
        Ok(Session::finalize(self)?)
    }
}
