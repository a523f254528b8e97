//! TCP gateway: one thread per connection, every request handled against a
//! shared [`Engine`]. Also the matching client and remote session.

use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use qbridge_core::device::{DeviceDescriptor, DeviceEvent, DeviceEventKind};
use qbridge_core::reservation::Window;
use qbridge_core::scheduler::{HybridJobSpec, JobError, JobId, JobView, SubmitError, UtilizationReport};
use qbridge_core::toolchain::ToolPipelineSpec;
use qbridge_core::Tick;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::engine::{Engine, WAIT_CAP_TICKS};
use crate::qpi::{
    ApiError, Completion, CompletionKind, CqId, EqId, FinalizeSummary, MeshId, MeshPolicy, OpHandle, OpId, OpKind,
    OpStatus, PipelineId, QpiApi, QpiError, SessionInfo, StreamId, StreamMode, StreamTarget, TaskRequest,
};
use crate::telemetry::{TelemetryFilter, TelemetryRecord};
use crate::wire::{read_frame, write_envelope, Envelope, FrameError, GatewayStatus, Request, PROTOCOL_VERSION};

pub const DEFAULT_ENDPOINT: &str = "127.0.0.1:7878";

pub fn submit_error(e: &SubmitError) -> ApiError {
    let code = match e {
        SubmitError::Malformed(_) => "invalid_spec",
        SubmitError::Oversubscribed(_) => "oversubscribed",
        SubmitError::DuplicateJobId(_) => "duplicate_job",
    };
    ApiError::new(code, e.to_string())
}

pub fn job_error(e: &JobError) -> ApiError {
    let code = match e {
        JobError::UnknownJob(_) => "job_not_found",
        JobError::NoActiveStage(_) => "no_active_stage",
        JobError::Completed(_) => "job_completed",
    };
    ApiError::new(code, e.to_string())
}

fn protocol(msg: impl Into<String>) -> ApiError {
    ApiError::new("protocol_error", msg)
}

fn to_value<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("reply serializes")
}

/// Turns request envelopes into reply envelopes.
#[derive(Clone)]
pub struct Dispatcher {
    engine: Engine,
}

impl Dispatcher {
    pub fn new(engine: Engine) -> Dispatcher {
        Dispatcher { engine }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Never panics: a panic inside a handler becomes an `internal_error`
    /// reply.
    pub fn handle(&self, env: &Envelope) -> Envelope {
        if env.version != PROTOCOL_VERSION {
            return Envelope::error(
                env.msg_id,
                &ApiError::new(
                    "version_mismatch",
                    format!("protocol version {} not supported, expected {PROTOCOL_VERSION}", env.version),
                ),
            );
        }
        let res = catch_unwind(AssertUnwindSafe(|| self.handle_inner(env)))
            .unwrap_or_else(|_| Err(ApiError::new("internal_error", "request handler panicked")));
        match res {
            Ok(body) => Envelope::ok(env.msg_id, body),
            Err(e) => Envelope::error(env.msg_id, &e),
        }
    }

    fn handle_inner(&self, env: &Envelope) -> Result<Value, ApiError> {
        let req = Request::decode(&env.kind, &env.body).map_err(protocol)?;
        let session = if req.needs_session() {
            let token = env.session_id.as_deref().ok_or(QpiError::UnknownSession)?;
            Some(self.engine.session(token)?)
        } else {
            None
        };
        let s = || session.as_ref().expect("session checked");
        let e = &self.engine;
        Ok(match req {
            Request::QpiInit { job_id } => to_value(QpiApi::info(&e.qpi_init(job_id)?)),
            Request::ListDevices {} => to_value(s().list_devices()?),
            Request::QueryDevice { device_id } => to_value(s().query_device(&device_id)?),
            Request::CreateMesh { devices, policy } => to_value(s().create_mesh(&devices, policy)?),
            Request::CreateQstream { target, mode } => to_value(s().create_qstream(target, mode)?),
            Request::BindCompletionQueue { stream, filter } => to_value(s().bind_completion_queue(stream, &filter)?),
            Request::BindEventQueue { device_id, filter } => to_value(s().bind_event_queue(&device_id, &filter)?),
            Request::CreateToolPipeline { spec } => to_value(s().create_tool_pipeline(&spec)?),
            Request::BindToolPipeline { stream, pipeline } => {
                s().bind_tool_pipeline(stream, pipeline)?;
                json!({})
            }
            Request::Submit { stream, task } => to_value(s().submit(stream, &task)?),
            Request::SubmitOp { stream, op_kind } => to_value(s().submit_op(stream, op_kind)?),
            Request::OpStatus { op } => to_value(s().op_status(op)?),
            Request::PollCompletion {
                cq,
                max_entries,
                timeout_ticks,
            } => to_value(s().poll_completion(cq, max_entries, timeout_ticks)?),
            Request::PollEvents {
                eq,
                max_entries,
                timeout_ticks,
            } => to_value(s().poll_events(eq, max_entries, timeout_ticks)?),
            Request::SubmitAndWait {
                stream,
                task,
                timeout_ticks,
            } => to_value(s().submit_and_wait(stream, &task, timeout_ticks)?),
            Request::Finalize {} => to_value(s().finalize()?),
            Request::SubmitJob { spec } => {
                let spec: HybridJobSpec =
                    serde_json::from_value(spec).map_err(|err| ApiError::new("invalid_spec", err.to_string()))?;
                let id = e.submit_job(spec).map_err(|err| submit_error(&err))?;
                json!({ "job_id": id })
            }
            Request::JobStatus { job_id: Some(id) } => {
                to_value(e.job(id).ok_or_else(|| ApiError::new("job_not_found", format!("no job {id}")))?)
            }
            Request::JobStatus { job_id: None } => to_value(e.jobs()),
            Request::WaitRunning { job_id, timeout_ticks } => {
                if e.job(job_id).is_none() {
                    return Err(ApiError::new("job_not_found", format!("no job {job_id}")));
                }
                to_value(e.wait_running(job_id, timeout_ticks)?)
            }
            Request::CompleteStage { job_id } => {
                e.complete_stage(job_id).map_err(|err| job_error(&err))?;
                json!({})
            }
            Request::ReleaseJob { job_id } => {
                e.release_job(job_id).map_err(|err| job_error(&err))?;
                json!({})
            }
            Request::Report { job_id, window } => {
                let mut r = e.report(window);
                if let Some(id) = job_id {
                    if e.job(id).is_none() {
                        return Err(ApiError::new("job_not_found", format!("no job {id}")));
                    }
                    r.jobs.retain(|j| j.job_id == id);
                }
                to_value(r)
            }
            Request::Advance { ticks } => {
                if ticks > WAIT_CAP_TICKS {
                    return Err(ApiError::new(
                        "invalid_argument",
                        format!("cannot advance more than {WAIT_CAP_TICKS} ticks at once"),
                    ));
                }
                json!({ "now": e.advance(ticks) })
            }
            Request::Now {} => json!({ "now": e.now() }),
            Request::Status {} => to_value(GatewayStatus {
                now: e.now(),
                draining: e.is_draining(),
                telemetry_degraded: e.telemetry_degraded(),
                devices: e.devices(),
                jobs: e.jobs(),
            }),
            Request::InjectEvent { event } => to_value(e.inject_event(event).map_err(QpiError::from)?),
            Request::QueryTelemetry { filter } => to_value(e.query_telemetry(&filter)),
            Request::Shutdown {} => json!({ "drained_at": e.shutdown() }),
        })
    }
}

/// A bound listener, not yet serving.
pub struct Gateway {
    dispatcher: Dispatcher,
    listener: TcpListener,
    addr: SocketAddr,
}

/// A gateway serving on a background thread.
pub struct GatewayHandle {
    pub addr: SocketAddr,
    join: JoinHandle<io::Result<()>>,
}

impl GatewayHandle {
    /// Waits for the accept loop to exit, which happens after a `shutdown`
    /// request.
    pub fn join(self) -> io::Result<()> {
        self.join.join().unwrap_or_else(|_| Err(io::Error::other("gateway thread panicked")))
    }
}

impl Gateway {
    pub fn bind(engine: Engine, addr: impl ToSocketAddrs) -> io::Result<Gateway> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        Ok(Gateway {
            dispatcher: Dispatcher::new(engine),
            listener,
            addr,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Accepts connections until a client requests shutdown.
    pub fn serve(self) -> io::Result<()> {
        let stop = Arc::new(AtomicBool::new(false));
        for conn in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(conn) = conn else { continue };
            let d = self.dispatcher.clone();
            let (stop, addr) = (stop.clone(), self.addr);
            thread::spawn(move || {
                if serve_conn(&d, conn) == ConnEnd::ShutdownRequested {
                    stop.store(true, Ordering::SeqCst);
                    // wake the accept loop
                    let _ = TcpStream::connect(addr);
                }
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> GatewayHandle {
        let addr = self.addr;
        let join = thread::spawn(move || self.serve());
        GatewayHandle { addr, join }
    }
}

#[derive(PartialEq, Eq)]
enum ConnEnd {
    Closed,
    ShutdownRequested,
}

fn serve_conn(d: &Dispatcher, conn: TcpStream) -> ConnEnd {
    let _ = conn.set_nodelay(true);
    let Ok(read_half) = conn.try_clone() else { return ConnEnd::Closed };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(conn);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(FrameError::TooLarge(n)) => {
                let _ = write_envelope(&mut writer, &Envelope::error(0, &protocol(format!("frame of {n} bytes exceeds the limit"))));
                let _ = writer.get_ref().shutdown(Shutdown::Both);
                return ConnEnd::Closed;
            }
            Err(_) => return ConnEnd::Closed,
        };
        let reply = match serde_json::from_slice::<Envelope>(&frame) {
            Ok(env) => {
                let reply = d.handle(&env);
                let shutdown = env.kind == "shutdown" && env.version == PROTOCOL_VERSION && reply.kind == "ok";
                if write_envelope(&mut writer, &reply).is_err() {
                    return ConnEnd::Closed;
                }
                if shutdown {
                    return ConnEnd::ShutdownRequested;
                }
                continue;
            }
            Err(e) => {
                // salvage the msg_id when the frame is JSON but not an envelope
                let msg_id = serde_json::from_slice::<Value>(&frame)
                    .ok()
                    .and_then(|v| v.get("msg_id").and_then(Value::as_u64))
                    .unwrap_or(0);
                Envelope::error(msg_id, &protocol(format!("malformed envelope: {e}")))
            }
        };
        if write_envelope(&mut writer, &reply).is_err() {
            return ConnEnd::Closed;
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("gateway unreachable: {0}")]
    Io(#[from] io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Api(#[from] ApiError),
}

impl ClientError {
    pub fn into_api(self) -> ApiError {
        match self {
            ClientError::Api(e) => e,
            other => ApiError::new("transport", other.to_string()),
        }
    }
}

/// Blocking client; calls from several threads are serialized.
pub struct Client {
    conn: Mutex<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
    next_msg: AtomicU64,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Client, ClientError> {
        let mut last = io::Error::new(io::ErrorKind::InvalidInput, "no address");
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, Duration::from_secs(2)) {
                Ok(s) => return Client::from_stream(s),
                Err(e) => last = e,
            }
        }
        Err(last.into())
    }

    fn from_stream(s: TcpStream) -> Result<Client, ClientError> {
        s.set_nodelay(true)?;
        let r = s.try_clone()?;
        Ok(Client {
            conn: Mutex::new((BufReader::new(r), BufWriter::new(s))),
            next_msg: AtomicU64::new(1),
        })
    }

    /// Sends one envelope as is and returns the raw reply.
    pub fn roundtrip(&self, env: &Envelope) -> Result<Envelope, ClientError> {
        let mut g = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        write_envelope(&mut g.1, env)?;
        self.read_reply(&mut g.0)
    }

    /// Sends raw frame bytes, for exercising malformed input.
    pub fn roundtrip_raw(&self, payload: &[u8]) -> Result<Envelope, ClientError> {
        let mut g = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        crate::wire::write_frame(&mut g.1, payload)?;
        self.read_reply(&mut g.0)
    }

    fn read_reply(&self, r: &mut BufReader<TcpStream>) -> Result<Envelope, ClientError> {
        let frame = read_frame(r).map_err(|e| match e {
            FrameError::Io(e) => ClientError::Io(e),
            other => ClientError::Protocol(other.to_string()),
        })?;
        serde_json::from_slice(&frame).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn call(&self, kind: &str, session: Option<&str>, body: Value) -> Result<Value, ClientError> {
        let id = self.next_msg.fetch_add(1, Ordering::Relaxed);
        let reply = self.roundtrip(&Envelope::request(id, kind, session, body))?;
        if let Some(e) = reply.as_error() {
            return Err(e.into());
        }
        if reply.msg_id != id {
            return Err(ClientError::Protocol(format!("reply to {} for request {id}", reply.msg_id)));
        }
        Ok(reply.body)
    }

    pub fn request<T: DeserializeOwned>(&self, req: &Request, session: Option<&str>) -> Result<T, ClientError> {
        let (kind, body) = req.encode();
        let v = self.call(&kind, session, body)?;
        serde_json::from_value(v).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub fn submit_job(&self, spec: &Value) -> Result<JobId, ClientError> {
        let v: Value = self.request(&Request::SubmitJob { spec: spec.clone() }, None)?;
        v["job_id"].as_u64().ok_or_else(|| ClientError::Protocol("missing job_id".into()))
    }

    pub fn job_status(&self, job_id: JobId) -> Result<JobView, ClientError> {
        self.request(&Request::JobStatus { job_id: Some(job_id) }, None)
    }

    pub fn jobs(&self) -> Result<Vec<JobView>, ClientError> {
        self.request(&Request::JobStatus { job_id: None }, None)
    }

    pub fn wait_running(&self, job_id: JobId, timeout_ticks: Option<u64>) -> Result<JobView, ClientError> {
        self.request(&Request::WaitRunning { job_id, timeout_ticks }, None)
    }

    pub fn complete_stage(&self, job_id: JobId) -> Result<(), ClientError> {
        self.request::<Value>(&Request::CompleteStage { job_id }, None).map(drop)
    }

    pub fn release_job(&self, job_id: JobId) -> Result<(), ClientError> {
        self.request::<Value>(&Request::ReleaseJob { job_id }, None).map(drop)
    }

    pub fn report(&self, job_id: Option<JobId>, window: Option<Window>) -> Result<UtilizationReport, ClientError> {
        self.request(&Request::Report { job_id, window }, None)
    }

    pub fn advance(&self, ticks: u64) -> Result<Tick, ClientError> {
        let v: Value = self.request(&Request::Advance { ticks }, None)?;
        Ok(v["now"].as_u64().unwrap_or_default())
    }

    pub fn now(&self) -> Result<Tick, ClientError> {
        let v: Value = self.request(&Request::Now {}, None)?;
        Ok(v["now"].as_u64().unwrap_or_default())
    }

    pub fn status(&self) -> Result<GatewayStatus, ClientError> {
        self.request(&Request::Status {}, None)
    }

    pub fn inject_event(&self, event: &DeviceEvent) -> Result<DeviceEvent, ClientError> {
        self.request(&Request::InjectEvent { event: event.clone() }, None)
    }

    pub fn query_telemetry(&self, filter: &TelemetryFilter) -> Result<Vec<TelemetryRecord>, ClientError> {
        self.request(&Request::QueryTelemetry { filter: filter.clone() }, None)
    }

    /// Asks the gateway to drain and exit; returns the drain tick.
    pub fn shutdown(&self) -> Result<Tick, ClientError> {
        let v: Value = self.request(&Request::Shutdown {}, None)?;
        Ok(v["drained_at"].as_u64().unwrap_or_default())
    }

    pub fn qpi_init(self: &Arc<Self>, job_id: JobId) -> Result<RemoteSession, ClientError> {
        let info: SessionInfo = self.request(&Request::QpiInit { job_id }, None)?;
        Ok(RemoteSession {
            client: self.clone(),
            info,
        })
    }

    /// Reattaches to a session opened elsewhere, such as by `qbridge run`.
    pub fn attach(self: &Arc<Self>, info: SessionInfo) -> RemoteSession {
        RemoteSession {
            client: self.clone(),
            info,
        }
    }
}

/// A QPI session reached through the gateway.
pub struct RemoteSession {
    client: Arc<Client>,
    info: SessionInfo,
}

impl RemoteSession {
    pub fn client(&self) -> &Arc<Client> {
        &self.client
    }

    fn req<T: DeserializeOwned>(&self, req: Request) -> Result<T, ApiError> {
        self.client.request(&req, Some(&self.info.token)).map_err(ClientError::into_api)
    }
}

impl QpiApi for RemoteSession {
    fn info(&self) -> SessionInfo {
        self.info.clone()
    }
    fn list_devices(&self) -> Result<Vec<DeviceDescriptor>, ApiError> {
        self.req(Request::ListDevices {})
    }
    fn query_device(&self, device_id: &str) -> Result<DeviceDescriptor, ApiError> {
        self.req(Request::QueryDevice {
            device_id: device_id.into(),
        })
    }
    fn create_mesh(&self, devices: &[String], policy: MeshPolicy) -> Result<MeshId, ApiError> {
        self.req(Request::CreateMesh {
            devices: devices.to_vec(),
            policy,
        })
    }
    fn create_qstream(&self, target: StreamTarget, mode: StreamMode) -> Result<StreamId, ApiError> {
        self.req(Request::CreateQstream { target, mode })
    }
    fn bind_completion_queue(&self, stream: StreamId, filter: &[CompletionKind]) -> Result<CqId, ApiError> {
        self.req(Request::BindCompletionQueue {
            stream,
            filter: filter.to_vec(),
        })
    }
    fn bind_event_queue(&self, device_id: &str, filter: &[DeviceEventKind]) -> Result<EqId, ApiError> {
        self.req(Request::BindEventQueue {
            device_id: device_id.into(),
            filter: filter.to_vec(),
        })
    }
    fn create_tool_pipeline(&self, spec: &ToolPipelineSpec) -> Result<PipelineId, ApiError> {
        self.req(Request::CreateToolPipeline { spec: spec.clone() })
    }
    fn bind_tool_pipeline(&self, stream: StreamId, pipeline: PipelineId) -> Result<(), ApiError> {
        self.req::<Value>(Request::BindToolPipeline { stream, pipeline }).map(drop)
    }
    fn submit(&self, stream: StreamId, req: &TaskRequest) -> Result<OpHandle, ApiError> {
        self.req(Request::Submit {
            stream,
            task: req.clone(),
        })
    }
    fn submit_op(&self, stream: StreamId, kind: OpKind) -> Result<OpHandle, ApiError> {
        self.req(Request::SubmitOp { stream, op_kind: kind })
    }
    fn op_status(&self, op: OpId) -> Result<OpStatus, ApiError> {
        self.req(Request::OpStatus { op })
    }
    fn poll_completion(&self, cq: CqId, max_entries: usize, timeout_ticks: u64) -> Result<Vec<Completion>, ApiError> {
        self.req(Request::PollCompletion {
            cq,
            max_entries,
            timeout_ticks,
        })
    }
    fn poll_events(&self, eq: EqId, max_entries: usize, timeout_ticks: u64) -> Result<Vec<DeviceEvent>, ApiError> {
        self.req(Request::PollEvents {
            eq,
            max_entries,
            timeout_ticks,
        })
    }
    fn submit_and_wait(&self, stream: StreamId, req: &TaskRequest, timeout_ticks: Option<u64>) -> Result<Vec<Completion>, ApiError> {
        self.req(Request::SubmitAndWait {
            stream,
            task: req.clone(),
            timeout_ticks,
        })
    }
    fn finalize(&self) -> Result<FinalizeSummary, ApiError> {
        self.req(Request::Finalize {})
    }
}
