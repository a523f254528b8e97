//! Two-level resource manager.
//!
//! The batch level grants hybrid jobs their classical nodes and quantum
//! devices, either together for the whole job (simultaneous) or stage by
//! stage (interleaved). The task level keeps one FIFO queue per job,
//! throttled by a credit account, and dispatches queue heads onto free
//! devices.
//!
//! Simultaneous jobs hold their devices exclusively and run tasks only there.
//! Interleaved quantum stages hold nothing: their tasks are placed on any
//! free device of the requested kind, and each placement is a short ledger
//! window for the task's duration.
//!
//! `tick()` processes the current tick and then advances the clock. Within a
//! tick: finished tasks release their devices, jobs and stages end or
//! advance, pending jobs start in `(priority desc, job_id asc)` order,
//! accounts are replenished, expired tasks are removed and queue heads are
//! dispatched.

mod decision;
mod report;
mod spec;

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::reservation::{Ledger, Window};
use crate::Tick;

pub use decision::{Admission, Decision, DecisionKind};
pub use report::{hard_activation_bound, soft_activation_bound, utilization_report, DeviceUtilization, JobMetrics, UtilizationReport};
pub use spec::{
    AllocationMode, ClassicalRequest, GresRequest, HybridJobSpec, JobId, Pattern, QosSpec, QuantumRequest, Stage,
    StageKind, SubmitError, JOBSPEC_VERSION,
};

/// A schedulable quantum device and the generic-resource label it satisfies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSlot {
    pub id: String,
    #[serde(default = "default_gres")]
    pub gres: String,
}

pub fn default_gres() -> String {
    "qc".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub classical_nodes: u32,
    pub devices: Vec<DeviceSlot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantumTaskRequest {
    pub task_id: String,
    /// Device ticks the task occupies; also its credit price.
    pub cost: u64,
    /// Restricts placement to these devices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub devices: Option<Vec<String>>,
    /// Absolute tick by which the task must start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline: Option<Tick>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnqueueError {
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {0} is not in a quantum-eligible phase")]
    NotEligible(JobId),
    #[error("task cost must be positive")]
    ZeroCost,
    #[error("task cost {cost} exceeds the job's max_task_cost {max}")]
    CostTooHigh { cost: u64, max: u64 },
    #[error("task id {0:?} already used")]
    DuplicateTask(String),
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("device {0:?} is not available to this job")]
    DeviceNotAllowed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JobError {
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {0} has no active stage to complete")]
    NoActiveStage(JobId),
    #[error("job {0} already completed")]
    Completed(JobId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Running,
    Completed,
}

/// Read-only snapshot of a job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: JobId,
    pub name: String,
    pub mode: AllocationMode,
    pub state: JobState,
    pub submitted_at: Tick,
    pub started_at: Option<Tick>,
    pub ended_at: Option<Tick>,
    /// Current stage index and whether it is active, interleaved mode only.
    pub stage: Option<usize>,
    pub stage_kind: Option<StageKind>,
    pub stage_active: bool,
    pub quantum_eligible: bool,
    pub credits: u64,
    pub credits_spent: u64,
    pub queue_len: usize,
    pub running_tasks: u64,
    pub nodes: Vec<usize>,
    /// Devices held exclusively (simultaneous mode).
    pub devices: Vec<String>,
}

#[derive(Debug, Clone)]
struct PendingTask {
    task_id: String,
    cost: u64,
    allowed: Option<Vec<usize>>,
    deadline: Option<Tick>,
    enqueued_at: Tick,
    head_at: Tick,
    covered: bool,
    violation_logged: bool,
}

#[derive(Debug, Clone)]
struct Job {
    id: JobId,
    spec: HybridJobSpec,
    state: JobState,
    submitted_at: Tick,
    started_at: Option<Tick>,
    ended_at: Option<Tick>,
    credits: u64,
    spent: u64,
    queue: VecDeque<PendingTask>,
    nodes: Vec<usize>,
    hard_devices: Vec<usize>,
    hard_grants: Vec<u64>,
    window_end: Tick,
    stage: usize,
    stage_active: bool,
    stage_end: Tick,
    finishing: bool,
    release_requested: bool,
    running_tasks: u64,
}

impl Job {
    fn quantum_eligible(&self) -> bool {
        if self.state != JobState::Running || self.release_requested {
            return false;
        }
        match self.spec.mode {
            AllocationMode::Simultaneous => true,
            AllocationMode::Interleaved => {
                self.stage_active && !self.finishing && self.spec.chain[self.stage].kind == StageKind::Quantum
            }
        }
    }

    /// Dispatch keeps running until a stage is finished even after
    /// `complete_stage`, so queued work drains.
    fn can_dispatch(&self) -> bool {
        if self.state != JobState::Running {
            return false;
        }
        match self.spec.mode {
            AllocationMode::Simultaneous => true,
            AllocationMode::Interleaved => self.stage_active && self.spec.chain[self.stage].kind == StageKind::Quantum,
        }
    }

    fn bound(&self) -> Tick {
        self.spec.qos.activation_bound_ticks
    }
}

#[derive(Debug, Clone)]
struct Running {
    task_id: String,
    job: JobId,
    finish: Tick,
}

#[derive(Debug, Clone)]
struct Device {
    slot: DeviceSlot,
    online: bool,
    running: Option<Running>,
}

/// Who occupies a device at the current tick.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceOccupancy {
    pub device_id: String,
    pub online: bool,
    pub running_task: Option<String>,
    pub running_job: Option<JobId>,
    pub busy_until: Option<Tick>,
    pub held_by: Option<JobId>,
}

pub struct Scheduler {
    clock: Tick,
    nodes: Vec<Option<JobId>>,
    devices: Vec<Device>,
    ledger: Ledger,
    jobs: BTreeMap<JobId, Job>,
    next_job_id: JobId,
    task_ids: BTreeSet<String>,
    log: Vec<Decision>,
    returned: usize,
}

impl Scheduler {
    pub fn new(config: ClusterConfig) -> Scheduler {
        Scheduler {
            clock: 0,
            nodes: alloc::vec![None; config.classical_nodes as usize],
            devices: config
                .devices
                .into_iter()
                .map(|slot| Device {
                    slot,
                    online: true,
                    running: None,
                })
                .collect(),
            ledger: Ledger::new(),
            jobs: BTreeMap::new(),
            next_job_id: 1,
            task_ids: BTreeSet::new(),
            log: Vec::new(),
            returned: 0,
        }
    }

    /// The tick the next `tick()` call will process.
    pub fn now(&self) -> Tick {
        self.clock
    }

    pub fn device_ids(&self) -> Vec<String> {
        self.devices.iter().map(|d| d.slot.id.clone()).collect()
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn free_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_none()).count()
    }

    pub fn node_owner(&self, node: usize) -> Option<JobId> {
        self.nodes.get(node).copied().flatten()
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.log
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    fn device_index(&self, id: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.slot.id == id)
    }

    pub fn set_device_online(&mut self, id: &str, online: bool) -> bool {
        match self.device_index(id) {
            Some(i) => {
                self.devices[i].online = online;
                true
            }
            None => false,
        }
    }

    fn push(&mut self, d: Decision) {
        self.log.push(d);
    }

    pub fn submit_job(&mut self, spec: HybridJobSpec) -> Result<JobId, SubmitError> {
        spec.validate()?;
        if spec.classical.nodes as usize > self.nodes.len() {
            return Err(SubmitError::Oversubscribed(format!(
                "{} nodes requested, cluster has {}",
                spec.classical.nodes,
                self.nodes.len()
            )));
        }
        if let Some(q) = &spec.quantum {
            let matching = self.devices.iter().filter(|d| q.gres.matches(&d.slot.gres)).count();
            if q.gres.count as usize > matching || matching == 0 {
                return Err(SubmitError::Oversubscribed(format!(
                    "{} {} device(s) requested, cluster has {}",
                    q.gres.count, q.gres.kind, matching
                )));
            }
        }
        let id = match spec.job_id {
            Some(id) if self.jobs.contains_key(&id) => return Err(SubmitError::DuplicateJobId(id)),
            Some(id) => id,
            None => self.next_job_id,
        };
        self.next_job_id = self.next_job_id.max(id + 1);
        let credits = spec.qos.initial_credits.min(spec.qos.cap);
        self.jobs.insert(
            id,
            Job {
                id,
                spec,
                state: JobState::Pending,
                submitted_at: self.clock,
                started_at: None,
                ended_at: None,
                credits,
                spent: 0,
                queue: VecDeque::new(),
                nodes: Vec::new(),
                hard_devices: Vec::new(),
                hard_grants: Vec::new(),
                window_end: 0,
                stage: 0,
                stage_active: false,
                stage_end: 0,
                finishing: false,
                release_requested: false,
                running_tasks: 0,
            },
        );
        let mut d = Decision::new(self.clock, DecisionKind::JobSubmitted, Some(id));
        d.note = Some(self.jobs[&id].spec.name.clone()).filter(|n| !n.is_empty());
        self.push(d);
        Ok(id)
    }

    pub fn job(&self, id: JobId) -> Option<JobView> {
        let j = self.jobs.get(&id)?;
        let interleaved = j.spec.mode == AllocationMode::Interleaved && j.state == JobState::Running;
        Some(JobView {
            job_id: j.id,
            name: j.spec.name.clone(),
            mode: j.spec.mode,
            state: j.state,
            submitted_at: j.submitted_at,
            started_at: j.started_at,
            ended_at: j.ended_at,
            stage: interleaved.then_some(j.stage),
            stage_kind: interleaved.then(|| j.spec.chain[j.stage].kind),
            stage_active: interleaved && j.stage_active,
            quantum_eligible: j.quantum_eligible(),
            credits: j.credits,
            credits_spent: j.spent,
            queue_len: j.queue.len(),
            running_tasks: j.running_tasks,
            nodes: j.nodes.clone(),
            devices: j.hard_devices.iter().map(|&i| self.devices[i].slot.id.clone()).collect(),
        })
    }

    pub fn jobs(&self) -> Vec<JobView> {
        self.jobs.keys().filter_map(|&id| self.job(id)).collect()
    }

    pub fn spec(&self, id: JobId) -> Option<&HybridJobSpec> {
        self.jobs.get(&id).map(|j| &j.spec)
    }

    pub fn occupancy(&self) -> Vec<DeviceOccupancy> {
        self.devices
            .iter()
            .map(|d| DeviceOccupancy {
                device_id: d.slot.id.clone(),
                online: d.online,
                running_task: d.running.as_ref().map(|r| r.task_id.clone()),
                running_job: d.running.as_ref().map(|r| r.job),
                busy_until: d.running.as_ref().map(|r| r.finish),
                held_by: self
                    .jobs
                    .values()
                    .find(|j| j.state == JobState::Running && j.hard_devices.iter().any(|&i| self.devices[i].slot.id == d.slot.id))
                    .map(|j| j.id),
            })
            .collect()
    }

    /// Devices a task of this job may use, before the per-task restriction.
    fn allowed_devices(&self, j: &Job) -> Vec<usize> {
        match j.spec.mode {
            AllocationMode::Simultaneous => j.hard_devices.clone(),
            AllocationMode::Interleaved => {
                let gres = &j.spec.quantum.as_ref().expect("quantum stage implies component").gres;
                (0..self.devices.len())
                    .filter(|&i| gres.matches(&self.devices[i].slot.gres))
                    .collect()
            }
        }
    }

    pub fn enqueue_quantum_task(&mut self, job_id: JobId, req: QuantumTaskRequest) -> Result<usize, EnqueueError> {
        let j = self.jobs.get(&job_id).ok_or(EnqueueError::UnknownJob(job_id))?;
        if !j.quantum_eligible() {
            return Err(EnqueueError::NotEligible(job_id));
        }
        if req.cost == 0 {
            return Err(EnqueueError::ZeroCost);
        }
        if req.cost > j.spec.qos.max_task_cost {
            return Err(EnqueueError::CostTooHigh {
                cost: req.cost,
                max: j.spec.qos.max_task_cost,
            });
        }
        if self.task_ids.contains(&req.task_id) {
            return Err(EnqueueError::DuplicateTask(req.task_id));
        }
        let base = self.allowed_devices(j);
        let allowed = match &req.devices {
            None => None,
            Some(ids) => {
                let mut out = Vec::with_capacity(ids.len());
                for id in ids {
                    let i = self.device_index(id).ok_or_else(|| EnqueueError::UnknownDevice(id.clone()))?;
                    if !base.contains(&i) {
                        return Err(EnqueueError::DeviceNotAllowed(id.clone()));
                    }
                    out.push(i);
                }
                Some(out)
            }
        };
        let now = self.clock;
        let j = self.jobs.get_mut(&job_id).expect("checked above");
        let position = j.queue.len();
        j.queue.push_back(PendingTask {
            task_id: req.task_id.clone(),
            cost: req.cost,
            allowed,
            deadline: req.deadline,
            enqueued_at: now,
            head_at: now,
            covered: j.credits >= req.cost,
            violation_logged: false,
        });
        self.task_ids.insert(req.task_id.clone());
        let mut d = Decision::new(now, DecisionKind::TaskEnqueued, Some(job_id));
        d.task_id = Some(req.task_id);
        d.cost = Some(req.cost);
        d.resources = req.devices.unwrap_or_default();
        d.note = Some(format!("position {position}"));
        self.push(d);
        Ok(position)
    }

    /// Marks the active stage as done; it ends once its tasks have drained.
    pub fn complete_stage(&mut self, job_id: JobId) -> Result<(), JobError> {
        let j = self.jobs.get_mut(&job_id).ok_or(JobError::UnknownJob(job_id))?;
        if j.state == JobState::Completed {
            return Err(JobError::Completed(job_id));
        }
        if j.spec.mode != AllocationMode::Interleaved || j.state != JobState::Running || !j.stage_active {
            return Err(JobError::NoActiveStage(job_id));
        }
        j.finishing = true;
        Ok(())
    }

    /// Ends the job at the next tick, dropping its queued tasks.
    pub fn release_job(&mut self, job_id: JobId) -> Result<(), JobError> {
        let j = self.jobs.get_mut(&job_id).ok_or(JobError::UnknownJob(job_id))?;
        if j.state == JobState::Completed {
            return Err(JobError::Completed(job_id));
        }
        j.release_requested = true;
        Ok(())
    }

    /// Processes the current tick and returns every decision logged since
    /// the previous call.
    pub fn tick(&mut self) -> Vec<Decision> {
        let now = self.clock;
        self.complete_tasks(now);
        self.advance_jobs(now);
        self.start_jobs(now);
        self.replenish(now);
        self.expire_tasks(now);
        self.dispatch(now);
        self.check_bounds(now);
        self.ledger.prune_before(now);
        self.clock += 1;
        let out = self.log[self.returned..].to_vec();
        self.returned = self.log.len();
        out
    }

    fn complete_tasks(&mut self, now: Tick) {
        for i in 0..self.devices.len() {
            let done = matches!(&self.devices[i].running, Some(r) if r.finish == now);
            if !done {
                continue;
            }
            let r = self.devices[i].running.take().expect("checked");
            if let Some(j) = self.jobs.get_mut(&r.job) {
                j.running_tasks -= 1;
            }
            let mut d = Decision::new(now, DecisionKind::TaskCompleted, Some(r.job));
            d.task_id = Some(r.task_id);
            d.resources = alloc::vec![self.devices[i].slot.id.clone()];
            self.push(d);
        }
    }

    fn drop_queue(&mut self, job_id: JobId, now: Tick, reason: &str) {
        let j = self.jobs.get_mut(&job_id).expect("job exists");
        let dropped: Vec<PendingTask> = j.queue.drain(..).collect();
        for t in dropped {
            let mut d = Decision::new(now, DecisionKind::TaskDropped, Some(job_id));
            d.task_id = Some(t.task_id);
            d.cost = Some(t.cost);
            d.note = Some(reason.into());
            self.push(d);
        }
    }

    fn free_nodes_of(&mut self, job_id: JobId) -> Vec<String> {
        let j = self.jobs.get_mut(&job_id).expect("job exists");
        let nodes: Vec<usize> = j.nodes.drain(..).collect();
        for &n in &nodes {
            self.nodes[n] = None;
        }
        nodes.into_iter().map(|n| format!("node:{n}")).collect()
    }

    fn finish_job(&mut self, job_id: JobId, now: Tick, reason: &str) {
        self.drop_queue(job_id, now, reason);
        let mut resources = self.free_nodes_of(job_id);
        let (grants, devices): (Vec<u64>, Vec<usize>) = {
            let j = self.jobs.get_mut(&job_id).expect("job exists");
            (j.hard_grants.drain(..).collect(), j.hard_devices.drain(..).collect())
        };
        for (g, dev) in grants.into_iter().zip(devices) {
            // a task may still be finishing on the device
            let until = match &self.devices[dev].running {
                Some(r) => r.finish.max(now),
                None => now,
            };
            let _ = self.ledger.truncate(g, until);
            resources.push(self.devices[dev].slot.id.clone());
        }
        let j = self.jobs.get_mut(&job_id).expect("job exists");
        j.state = JobState::Completed;
        j.ended_at = Some(now);
        j.stage_active = false;
        let mut d = Decision::new(now, DecisionKind::JobCompleted, Some(job_id));
        d.resources = resources;
        d.credits = Some(j.credits);
        d.note = Some(reason.into());
        self.push(d);
    }

    fn end_stage(&mut self, job_id: JobId, now: Tick, reason: &str) {
        let stage = self.jobs[&job_id].stage;
        if self.jobs[&job_id].spec.chain[stage].kind == StageKind::Quantum {
            self.drop_queue(job_id, now, "stage ended");
        }
        let resources = self.free_nodes_of(job_id);
        let j = self.jobs.get_mut(&job_id).expect("job exists");
        j.stage_active = false;
        j.finishing = false;
        j.stage += 1;
        let done = j.stage == j.spec.chain.len();
        let mut d = Decision::new(now, DecisionKind::StageCompleted, Some(job_id));
        d.stage = Some(stage);
        d.resources = resources;
        d.note = Some(reason.into());
        self.push(d);
        if done {
            // keep `stage` in range for views
            self.jobs.get_mut(&job_id).expect("job exists").stage = stage;
            self.finish_job(job_id, now, "chain complete");
        }
    }

    fn advance_jobs(&mut self, now: Tick) {
        let ids: Vec<JobId> = self.jobs.keys().copied().collect();
        for id in ids {
            let j = &self.jobs[&id];
            match (j.state, j.spec.mode) {
                (JobState::Pending, _) if j.release_requested => {
                    self.finish_job(id, now, "released before start");
                }
                (JobState::Running, AllocationMode::Simultaneous) => {
                    if j.release_requested {
                        self.finish_job(id, now, "released");
                    } else if now >= j.window_end {
                        self.finish_job(id, now, "walltime");
                    }
                }
                (JobState::Running, AllocationMode::Interleaved) => {
                    if j.release_requested {
                        if j.stage_active {
                            self.end_stage_without_advance(id, now);
                        }
                        self.finish_job(id, now, "released");
                    } else if j.stage_active {
                        let drained = j.queue.is_empty() && j.running_tasks == 0;
                        if now >= j.stage_end {
                            self.end_stage(id, now, "walltime");
                        } else if j.finishing && drained {
                            self.end_stage(id, now, "completed");
                        }
                    }
                }
                _ => {}
            }
        }
    }

    fn end_stage_without_advance(&mut self, job_id: JobId, now: Tick) {
        let resources = self.free_nodes_of(job_id);
        let j = self.jobs.get_mut(&job_id).expect("job exists");
        j.stage_active = false;
        let mut d = Decision::new(now, DecisionKind::StageCompleted, Some(job_id));
        d.stage = Some(j.stage);
        d.resources = resources;
        d.note = Some("released".into());
        self.push(d);
    }

    fn take_nodes(&mut self, job_id: JobId, count: usize) -> Option<Vec<usize>> {
        let free: Vec<usize> = (0..self.nodes.len()).filter(|&n| self.nodes[n].is_none()).take(count).collect();
        if free.len() < count {
            return None;
        }
        for &n in &free {
            self.nodes[n] = Some(job_id);
        }
        Some(free)
    }

    fn try_start_stage(&mut self, job_id: JobId, now: Tick) -> bool {
        let j = &self.jobs[&job_id];
        let stage = j.spec.chain[j.stage].clone();
        let walltime = j.spec.stage_walltime(&stage);
        let mut resources = Vec::new();
        if stage.kind == StageKind::Classical {
            let need = j.spec.classical.nodes as usize;
            let Some(nodes) = self.take_nodes(job_id, need) else {
                return false;
            };
            resources = nodes.iter().map(|n| format!("node:{n}")).collect();
            self.jobs.get_mut(&job_id).expect("job exists").nodes = nodes;
        }
        let j = self.jobs.get_mut(&job_id).expect("job exists");
        j.stage_active = true;
        j.finishing = false;
        j.stage_end = now + walltime;
        let mut d = Decision::new(now, DecisionKind::StageStarted, Some(job_id));
        d.stage = Some(j.stage);
        d.resources = resources;
        d.note = Some(
            match stage.kind {
                StageKind::Classical => "classical",
                StageKind::Quantum => "quantum",
            }
            .into(),
        );
        self.push(d);
        true
    }

    fn admission(&self, job: &Job) -> Admission {
        let qos = &job.spec.qos;
        match job.spec.mode {
            AllocationMode::Simultaneous => {
                let required = hard_activation_bound(qos.max_task_cost);
                Admission {
                    pool_size: job.hard_devices.len() as u64,
                    total_replenish: qos.replenish_per_tick,
                    required_bound: Some(required),
                    bound: qos.activation_bound_ticks,
                    feasible: qos.activation_bound_ticks >= required,
                }
            }
            AllocationMode::Interleaved => {
                let pool = self.allowed_devices(job);
                let shares_pool = |o: &Job| {
                    o.id != job.id
                        && o.state == JobState::Running
                        && o.spec.mode == AllocationMode::Interleaved
                        && o.spec.quantum.is_some()
                        && self.allowed_devices(o).iter().any(|d| pool.contains(d))
                };
                let others: Vec<(u64, u64)> = self
                    .jobs
                    .values()
                    .filter(|o| shares_pool(o))
                    .map(|o| (o.spec.qos.cap, o.spec.qos.replenish_per_tick))
                    .collect();
                let max_cost = self
                    .jobs
                    .values()
                    .filter(|o| shares_pool(o))
                    .map(|o| o.spec.qos.max_task_cost)
                    .fold(qos.max_task_cost, u64::max);
                let k = pool.len() as u64;
                let total_r = others.iter().map(|o| o.1).sum::<u64>() + qos.replenish_per_tick;
                let required = soft_activation_bound(k, max_cost, &others);
                Admission {
                    pool_size: k,
                    total_replenish: total_r,
                    required_bound: required,
                    bound: qos.activation_bound_ticks,
                    feasible: total_r <= k && required.is_some_and(|w| qos.activation_bound_ticks >= w),
                }
            }
        }
    }

    fn try_start_job(&mut self, job_id: JobId, now: Tick) -> bool {
        let spec = self.jobs[&job_id].spec.clone();
        let mut resources: Vec<String> = Vec::new();
        match spec.mode {
            AllocationMode::Simultaneous => {
                let q = spec.quantum.as_ref().expect("validated");
                let lifetime = spec.simultaneous_lifetime();
                if self.free_nodes() < spec.classical.nodes as usize {
                    return false;
                }
                let devices: Vec<usize> = (0..self.devices.len())
                    .filter(|&i| {
                        let d = &self.devices[i];
                        q.gres.matches(&d.slot.gres)
                            && d.online
                            && d.running.is_none()
                            && self.ledger.earliest_start(&d.slot.id, now, lifetime) == now
                    })
                    .take(q.gres.count as usize)
                    .collect();
                if devices.len() < q.gres.count as usize {
                    return false;
                }
                let nodes = self.take_nodes(job_id, spec.classical.nodes as usize).expect("counted above");
                resources.extend(nodes.iter().map(|n| format!("node:{n}")));
                let mut grants = Vec::new();
                for &i in &devices {
                    let g = self
                        .ledger
                        .reserve(&self.devices[i].slot.id, now, lifetime, job_id)
                        .expect("window checked free");
                    grants.push(g.id);
                    resources.push(self.devices[i].slot.id.clone());
                }
                let j = self.jobs.get_mut(&job_id).expect("job exists");
                j.nodes = nodes;
                j.hard_devices = devices;
                j.hard_grants = grants;
                j.window_end = now + lifetime;
            }
            AllocationMode::Interleaved => {
                if spec.chain[0].kind == StageKind::Classical && self.free_nodes() < spec.classical.nodes as usize {
                    return false;
                }
            }
        }
        let j = self.jobs.get_mut(&job_id).expect("job exists");
        j.state = JobState::Running;
        j.started_at = Some(now);
        let credits = j.credits;
        let mut d = Decision::new(now, DecisionKind::JobStarted, Some(job_id));
        d.resources = resources;
        d.credits = Some(credits);
        self.push(d);
        if spec.quantum.is_some() {
            let admission = self.admission(&self.jobs[&job_id]);
            let mut d = Decision::new(now, DecisionKind::AdmissionReport, Some(job_id));
            d.admission = Some(admission);
            self.push(d);
        }
        if spec.mode == AllocationMode::Interleaved {
            let started = self.try_start_stage(job_id, now);
            debug_assert!(started, "first stage resources were checked");
        }
        true
    }

    fn start_jobs(&mut self, now: Tick) {
        let mut order: Vec<(i32, JobId)> = self
            .jobs
            .values()
            .filter(|j| j.state != JobState::Completed)
            .map(|j| (j.spec.priority, j.id))
            .collect();
        order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        // running jobs waiting on their next stage go first
        for &(_, id) in &order {
            let j = &self.jobs[&id];
            if j.state == JobState::Running && j.spec.mode == AllocationMode::Interleaved && !j.stage_active {
                self.try_start_stage(id, now);
            }
        }
        // pending jobs start strictly in order, without backfill
        for &(_, id) in &order {
            if self.jobs[&id].state == JobState::Pending && !self.try_start_job(id, now) {
                break;
            }
        }
    }

    /// Tops up every running account. A head that was waiting for credits
    /// becomes covered here, and its wait clock starts now.
    fn replenish(&mut self, now: Tick) {
        for j in self.jobs.values_mut().filter(|j| j.state == JobState::Running) {
            j.credits = (j.credits + j.spec.qos.replenish_per_tick).min(j.spec.qos.cap);
            let credits = j.credits;
            if let Some(h) = j.queue.front_mut() {
                if !h.covered && credits >= h.cost {
                    h.covered = true;
                    h.head_at = now;
                }
            }
        }
    }

    fn refresh_head(j: &mut Job, now: Tick) {
        let credits = j.credits;
        if let Some(h) = j.queue.front_mut() {
            h.head_at = now;
            h.covered = credits >= h.cost;
        }
    }

    /// Removes tasks past their deadline, and tasks of a simultaneous job
    /// that can no longer finish inside its reservation.
    fn expire_tasks(&mut self, now: Tick) {
        let ids: Vec<JobId> = self.jobs.keys().copied().collect();
        for id in ids {
            let j = self.jobs.get_mut(&id).expect("job exists");
            let hard_end = (j.state == JobState::Running && j.spec.mode == AllocationMode::Simultaneous).then_some(j.window_end);
            let expired = |t: &PendingTask| t.deadline.is_some_and(|d| d < now);
            let unfit = |t: &PendingTask| hard_end.is_some_and(|end| now + t.cost > end);
            if !j.queue.iter().any(|t| expired(t) || unfit(t)) {
                continue;
            }
            let head_before = j.queue.front().map(|t| t.task_id.clone());
            let mut removed = Vec::new();
            let mut kept = VecDeque::with_capacity(j.queue.len());
            for t in j.queue.drain(..) {
                if expired(&t) {
                    removed.push((DecisionKind::TaskExpired, t));
                } else if unfit(&t) {
                    removed.push((DecisionKind::TaskDropped, t));
                } else {
                    kept.push_back(t);
                }
            }
            j.queue = kept;
            if j.queue.front().map(|t| &t.task_id) != head_before.as_ref() {
                Self::refresh_head(j, now);
            }
            for (kind, t) in removed {
                let mut d = Decision::new(now, kind, Some(id));
                d.task_id = Some(t.task_id);
                d.cost = Some(t.cost);
                d.enqueued_at = Some(t.enqueued_at);
                if kind == DecisionKind::TaskDropped {
                    d.note = Some("exceeds reservation".into());
                }
                self.push(d);
            }
        }
    }

    fn free_device_for(&self, j: &Job, t: &PendingTask, now: Tick) -> Option<usize> {
        let candidates = match &t.allowed {
            Some(a) => a.clone(),
            None => self.allowed_devices(j),
        };
        candidates.into_iter().find(|&i| {
            let d = &self.devices[i];
            if !d.online || d.running.is_some() {
                return false;
            }
            match j.spec.mode {
                AllocationMode::Simultaneous => now + t.cost <= j.window_end,
                AllocationMode::Interleaved => self.ledger.earliest_start(&d.slot.id, now, t.cost) == now,
            }
        })
    }

    fn dispatch(&mut self, now: Tick) {
        loop {
            let mut best: Option<((i64, i64, JobId), usize)> = None;
            for j in self.jobs.values().filter(|j| j.can_dispatch()) {
                let Some(head) = j.queue.front() else { continue };
                if j.credits < head.cost {
                    continue;
                }
                let Some(dev) = self.free_device_for(j, head, now) else {
                    continue;
                };
                let slack = (head.enqueued_at + j.bound()) as i64 - now as i64;
                let key = (slack, -(j.spec.priority as i64), j.id);
                if best.as_ref().is_none_or(|(k, _)| key < *k) {
                    best = Some((key, dev));
                }
            }
            let Some(((_, _, job_id), dev)) = best else { break };
            let mode = self.jobs[&job_id].spec.mode;
            let j = self.jobs.get_mut(&job_id).expect("job exists");
            let t = j.queue.pop_front().expect("head exists");
            j.credits -= t.cost;
            j.spent += t.cost;
            j.running_tasks += 1;
            let credits = j.credits;
            Self::refresh_head(j, now);
            let device_id = self.devices[dev].slot.id.clone();
            if mode == AllocationMode::Interleaved {
                self.ledger
                    .reserve(&device_id, now, t.cost, job_id)
                    .expect("device window checked free");
            }
            self.devices[dev].running = Some(Running {
                task_id: t.task_id.clone(),
                job: job_id,
                finish: now + t.cost,
            });
            let mut d = Decision::new(now, DecisionKind::TaskDispatched, Some(job_id));
            d.task_id = Some(t.task_id);
            d.resources = alloc::vec![device_id];
            d.cost = Some(t.cost);
            d.enqueued_at = Some(t.enqueued_at);
            d.head_at = Some(t.head_at);
            d.covered = Some(t.covered);
            d.credits = Some(credits);
            if t.violation_logged {
                d.note = Some("late".into());
            }
            self.push(d);
        }
    }

    /// Logs a bound violation once for every covered head task that can no
    /// longer start within its bound.
    fn check_bounds(&mut self, now: Tick) {
        let mut late = Vec::new();
        for j in self.jobs.values_mut().filter(|j| j.can_dispatch()) {
            let bound = j.spec.qos.activation_bound_ticks;
            if let Some(h) = j.queue.front_mut() {
                if h.covered && !h.violation_logged && now - h.head_at >= bound {
                    h.violation_logged = true;
                    late.push((j.id, h.task_id.clone(), h.head_at));
                }
            }
        }
        for (job, task, head_at) in late {
            let mut d = Decision::new(now, DecisionKind::BoundViolation, Some(job));
            d.task_id = Some(task);
            d.head_at = Some(head_at);
            self.push(d);
        }
    }

    /// Report over `[window.start, window.end)` from this scheduler's log.
    pub fn report(&self, window: Window) -> UtilizationReport {
        utilization_report(&self.log, &self.device_ids(), window)
    }
}
