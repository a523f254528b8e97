//! Gateway wire protocol.
//!
//! A frame is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON holding one [`Envelope`]. Replies reuse the request's
//! `msg_id` and have kind `ok` (body = result) or `error`
//! (body = `{"code", "message"}`).

use std::io::{self, Read, Write};

use qbridge_core::device::{DeviceDescriptor, DeviceEvent, DeviceEventKind};
use qbridge_core::reservation::Window;
use qbridge_core::scheduler::{JobId, JobView};
use qbridge_core::toolchain::ToolPipelineSpec;
use qbridge_core::Tick;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::qpi::{ApiError, CompletionKind, CqId, EqId, MeshPolicy, OpId, OpKind, PipelineId, StreamId, StreamMode, StreamTarget, TaskRequest};
use crate::telemetry::TelemetryFilter;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub version: u32,
    pub msg_id: u64,
    pub kind: String,
    /// Session token returned by `qpi_init`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default)]
    pub body: Value,
}

impl Envelope {
    pub fn request(msg_id: u64, kind: &str, session: Option<&str>, body: Value) -> Envelope {
        Envelope {
            version: PROTOCOL_VERSION,
            msg_id,
            kind: kind.into(),
            session_id: session.map(String::from),
            body,
        }
    }

    pub fn ok(msg_id: u64, body: Value) -> Envelope {
        Envelope::request(msg_id, "ok", None, body)
    }

    pub fn error(msg_id: u64, err: &ApiError) -> Envelope {
        Envelope::request(msg_id, "error", None, json!({"code": err.code, "message": err.message}))
    }

    /// The error carried by an `error` reply.
    pub fn as_error(&self) -> Option<ApiError> {
        if self.kind != "error" {
            return None;
        }
        Some(serde_json::from_value(self.body.clone()).unwrap_or_else(|_| ApiError::new("protocol_error", self.body.to_string())))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("connection closed")]
    Closed,
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame. A clean end of stream before the length prefix is
/// `Closed`; an oversized length is reported without reading the payload.
pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>, FrameError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(FrameError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn write_envelope(w: &mut impl Write, env: &Envelope) -> io::Result<()> {
    write_frame(w, &serde_json::to_vec(env).expect("envelope serializes"))
}

/// Every request the gateway understands, keyed by envelope kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum Request {
    QpiInit {
        job_id: JobId,
    },
    ListDevices {},
    QueryDevice {
        device_id: String,
    },
    CreateMesh {
        devices: Vec<String>,
        policy: MeshPolicy,
    },
    CreateQstream {
        target: StreamTarget,
        mode: StreamMode,
    },
    BindCompletionQueue {
        stream: StreamId,
        #[serde(default)]
        filter: Vec<CompletionKind>,
    },
    BindEventQueue {
        device_id: String,
        #[serde(default)]
        filter: Vec<DeviceEventKind>,
    },
    CreateToolPipeline {
        spec: ToolPipelineSpec,
    },
    BindToolPipeline {
        stream: StreamId,
        pipeline: PipelineId,
    },
    Submit {
        stream: StreamId,
        task: TaskRequest,
    },
    SubmitOp {
        stream: StreamId,
        op_kind: OpKind,
    },
    OpStatus {
        op: OpId,
    },
    PollCompletion {
        cq: CqId,
        #[serde(default)]
        max_entries: usize,
        #[serde(default)]
        timeout_ticks: u64,
    },
    PollEvents {
        eq: EqId,
        #[serde(default)]
        max_entries: usize,
        #[serde(default)]
        timeout_ticks: u64,
    },
    SubmitAndWait {
        stream: StreamId,
        task: TaskRequest,
        #[serde(default)]
        timeout_ticks: Option<u64>,
    },
    Finalize {},
    /// The job spec travels as raw JSON so a bad spec is `invalid_spec`, not a
    /// protocol error.
    SubmitJob {
        spec: Value,
    },
    JobStatus {
        #[serde(default)]
        job_id: Option<JobId>,
    },
    WaitRunning {
        job_id: JobId,
        #[serde(default)]
        timeout_ticks: Option<u64>,
    },
    CompleteStage {
        job_id: JobId,
    },
    ReleaseJob {
        job_id: JobId,
    },
    Report {
        #[serde(default)]
        job_id: Option<JobId>,
        #[serde(default)]
        window: Option<Window>,
    },
    Advance {
        ticks: u64,
    },
    Now {},
    Status {},
    InjectEvent {
        event: DeviceEvent,
    },
    QueryTelemetry {
        #[serde(default)]
        filter: TelemetryFilter,
    },
    Shutdown {},
}

impl Request {
    /// Decodes an envelope's kind and body. A missing or null body counts as
    /// `{}`.
    pub fn decode(kind: &str, body: &Value) -> Result<Request, String> {
        let body = if body.is_null() { json!({}) } else { body.clone() };
        serde_json::from_value(json!({"kind": kind, "body": body})).map_err(|e| e.to_string())
    }

    /// Envelope kind and body.
    pub fn encode(&self) -> (String, Value) {
        let v = serde_json::to_value(self).expect("request serializes");
        let kind = v["kind"].as_str().unwrap_or_default().to_string();
        let body = v.get("body").cloned().unwrap_or_else(|| json!({}));
        (kind, body)
    }

    /// Requests that act inside a QPI session and need its token.
    pub fn needs_session(&self) -> bool {
        matches!(
            self,
            Request::ListDevices {}
                | Request::QueryDevice { .. }
                | Request::CreateMesh { .. }
                | Request::CreateQstream { .. }
                | Request::BindCompletionQueue { .. }
                | Request::BindEventQueue { .. }
                | Request::CreateToolPipeline { .. }
                | Request::BindToolPipeline { .. }
                | Request::Submit { .. }
                | Request::SubmitOp { .. }
                | Request::OpStatus { .. }
                | Request::PollCompletion { .. }
                | Request::PollEvents { .. }
                | Request::SubmitAndWait { .. }
                | Request::Finalize {}
        )
    }
}

/// Reply to `status`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayStatus {
    pub now: Tick,
    pub draining: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub telemetry_degraded: Option<String>,
    pub devices: Vec<DeviceDescriptor>,
    pub jobs: Vec<JobView>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip_and_limits() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{}").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 2]);
        assert_eq!(read_frame(&mut &buf[..]).unwrap(), b"{}");
        assert!(matches!(read_frame(&mut &[][..]), Err(FrameError::Closed)));
        let big = ((MAX_FRAME + 1) as u32).to_be_bytes();
        assert!(matches!(read_frame(&mut &big[..]), Err(FrameError::TooLarge(_))));
    }

    #[test]
    fn null_body_is_empty_object() {
        assert_eq!(Request::decode("now", &Value::Null).unwrap(), Request::Now {});
        assert!(Request::decode("no_such_kind", &json!({})).is_err());
        let r = Request::decode("poll_completion", &json!({"cq": 4})).unwrap();
        assert_eq!(
            r,
            Request::PollCompletion {
                cq: CqId(4),
                max_entries: 0,
                timeout_ticks: 0
            }
        );
        let (kind, body) = r.encode();
        assert_eq!(Request::decode(&kind, &body).unwrap(), r);
    }
}
