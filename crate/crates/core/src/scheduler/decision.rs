use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::spec::JobId;
use crate::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    JobSubmitted,
    JobStarted,
    AdmissionReport,
    StageStarted,
    StageCompleted,
    TaskEnqueued,
    TaskDispatched,
    TaskCompleted,
    TaskExpired,
    TaskDropped,
    BoundViolation,
    JobCompleted,
}

/// Outcome of the activation-bound feasibility check made at job start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Admission {
    /// Devices the job's tasks may run on.
    pub pool_size: u64,
    /// Replenishment of every active job sharing the pool, this one included.
    pub total_replenish: u64,
    /// Smallest bound the scheduler can promise, if any.
    pub required_bound: Option<Tick>,
    pub bound: Tick,
    pub feasible: bool,
}

/// One line of the scheduler's append-only decision log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub tick: Tick,
    pub kind: DecisionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<JobId>,
    /// Nodes (`node:<i>`) and devices touched by this decision.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resources: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enqueued_at: Option<Tick>,
    /// Tick the task's wait started: when it became a covered head, or when
    /// it reached the head if it never was covered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_at: Option<Tick>,
    /// Whether the account covered the task's cost while it was the head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covered: Option<bool>,
    /// Account balance after this decision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credits: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admission: Option<Admission>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Decision {
    pub fn new(tick: Tick, kind: DecisionKind, job_id: Option<JobId>) -> Decision {
        Decision {
            tick,
            kind,
            job_id,
            resources: Vec::new(),
            task_id: None,
            cost: None,
            enqueued_at: None,
            head_at: None,
            covered: None,
            credits: None,
            stage: None,
            admission: None,
            note: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("decision serializes")
    }
}
