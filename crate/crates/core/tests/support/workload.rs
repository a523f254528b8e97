//! Random scheduler workloads and an auditor that replays the decision log
//! against its own model of nodes, devices, credit accounts and queues.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use qbridge_core::rng::SplitMix64;
use qbridge_core::scheduler::*;
use qbridge_core::testkit::below;
use qbridge_core::Tick;

const POOL: &str = "qc:pool";
const EXCL: &str = "qc:excl";
const LONG: Tick = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Interleaved jobs sharing the pool devices.
    Soft,
    /// Simultaneous jobs on the exclusive devices.
    Hard,
    /// Interleaved jobs without quantum work.
    Classical,
}

/// A stream of jobs submitted one after another with the same account.
#[derive(Debug, Clone)]
pub struct Slot {
    pub kind: SlotKind,
    pub qos: QosSpec,
    pub priority: i32,
    pub enqueue_per_mille: u64,
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub seed: u64,
    pub cluster: ClusterConfig,
    pub pool_size: u64,
    pub max_cost: u64,
    pub slots: Vec<Slot>,
}

/// Pool jobs get the bound derived from every other pool account, so the
/// aggregate replenishment never exceeds the pool.
pub fn generate(seed: u64) -> Workload {
    let mut rng = SplitMix64::new(seed);
    let nodes = 8 + below(&mut rng, 9) as u32;
    let pool = 2 + below(&mut rng, 3);
    let excl = 1 + below(&mut rng, 2);
    let max_cost = 1 + below(&mut rng, 5);
    let mut devices: Vec<DeviceSlot> = (0..pool)
        .map(|i| DeviceSlot {
            id: format!("pool{i}"),
            gres: POOL.into(),
        })
        .collect();
    devices.extend((0..excl).map(|i| DeviceSlot {
        id: format!("excl{i}"),
        gres: EXCL.into(),
    }));

    let mut soft: Vec<(u64, u64, i32, u64)> = Vec::new();
    let mut budget = pool;
    for _ in 0..2 + below(&mut rng, 3) {
        let r = (1 + below(&mut rng, 2)).min(budget);
        budget -= r;
        let cap = max_cost + below(&mut rng, 3 * max_cost + 1);
        soft.push((cap, r, below(&mut rng, 3) as i32, 200 + below(&mut rng, 700)));
    }
    let mut slots = Vec::new();
    for (i, &(cap, r, priority, per_mille)) in soft.iter().enumerate() {
        let others: Vec<(u64, u64)> =
            soft.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| (o.0, o.1)).collect();
        let Some(bound) = soft_activation_bound(pool, max_cost, &others) else {
            continue;
        };
        slots.push(Slot {
            kind: SlotKind::Soft,
            qos: QosSpec {
                initial_credits: below(&mut rng, cap + 1),
                replenish_per_tick: r,
                cap,
                activation_bound_ticks: bound.max(1),
                max_task_cost: max_cost,
            },
            priority,
            enqueue_per_mille: per_mille,
        });
    }
    for _ in 0..1 + below(&mut rng, 2) {
        let cap = max_cost + below(&mut rng, 4 * max_cost + 1);
        slots.push(Slot {
            kind: SlotKind::Hard,
            qos: QosSpec {
                initial_credits: below(&mut rng, cap + 1),
                replenish_per_tick: 1 + below(&mut rng, 2),
                cap,
                activation_bound_ticks: hard_activation_bound(max_cost),
                max_task_cost: max_cost,
            },
            priority: below(&mut rng, 3) as i32,
            enqueue_per_mille: 100 + below(&mut rng, 500),
        });
    }
    if below(&mut rng, 2) == 0 {
        slots.push(Slot {
            kind: SlotKind::Classical,
            qos: QosSpec::default(),
            priority: below(&mut rng, 3) as i32,
            enqueue_per_mille: 0,
        });
    }
    Workload {
        seed,
        cluster: ClusterConfig {
            classical_nodes: nodes,
            devices,
        },
        pool_size: pool,
        max_cost,
        slots,
    }
}

#[derive(Debug, Default)]
struct SlotState {
    current: Option<JobId>,
    jobs: u32,
    next_submit: Tick,
    stage_seen: Option<usize>,
    planned: u64,
    enqueued: u64,
    finishing: bool,
}

pub struct Run {
    pub scheduler: Scheduler,
    pub specs: BTreeMap<JobId, HybridJobSpec>,
    /// Problems seen in the scheduler's own views after each tick.
    pub snapshot_errors: Vec<String>,
    pub ticks: Tick,
}

fn job_spec(w: &Workload, slot: &Slot, rng: &mut SplitMix64, first: bool) -> HybridJobSpec {
    let total = w.cluster.classical_nodes as u64;
    let mut qos = slot.qos;
    if !first {
        // a successor must not bring a second full account into the window
        qos.initial_credits = 0;
    }
    let (mode, quantum, chain, classical) = match slot.kind {
        SlotKind::Soft => {
            let len = 2 + below(rng, 4) as usize;
            let forced = below(rng, len as u64) as usize;
            let chain = (0..len)
                .map(|i| Stage {
                    kind: if i == forced || below(rng, 2) == 0 {
                        StageKind::Quantum
                    } else {
                        StageKind::Classical
                    },
                    walltime_ticks: None,
                })
                .collect();
            let q = QuantumRequest {
                gres: GresRequest {
                    kind: POOL.into(),
                    count: 1,
                },
                walltime_ticks: LONG,
            };
            let c = ClassicalRequest {
                nodes: 1 + below(rng, 4) as u32,
                walltime_ticks: 3 + below(rng, 25),
            };
            (AllocationMode::Interleaved, Some(q), chain, c)
        }
        SlotKind::Hard => {
            let excl = w.cluster.devices.iter().filter(|d| d.gres == EXCL).count() as u64;
            let q = QuantumRequest {
                gres: GresRequest {
                    kind: EXCL.into(),
                    count: 1 + below(rng, excl) as u32,
                },
                walltime_ticks: 20 + below(rng, 150),
            };
            let c = ClassicalRequest {
                nodes: 1 + below(rng, 4) as u32,
                walltime_ticks: 20 + below(rng, 150),
            };
            (AllocationMode::Simultaneous, Some(q), Vec::new(), c)
        }
        SlotKind::Classical => {
            let chain = (0..1 + below(rng, 3))
                .map(|_| Stage {
                    kind: StageKind::Classical,
                    walltime_ticks: Some(5 + below(rng, 40)),
                })
                .collect();
            let c = ClassicalRequest {
                nodes: 1 + below(rng, total) as u32,
                walltime_ticks: 40,
            };
            (AllocationMode::Interleaved, None, chain, c)
        }
    };
    HybridJobSpec {
        version: JOBSPEC_VERSION,
        job_id: None,
        name: String::new(),
        classical,
        quantum,
        mode,
        pattern: Pattern::Balanced,
        priority: slot.priority,
        chain,
        qos,
    }
}

fn enqueue(s: &mut Scheduler, job: JobId, n: u64, cost: u64) -> bool {
    let req = QuantumTaskRequest {
        task_id: format!("j{job}-t{n}"),
        cost,
        devices: None,
        deadline: None,
    };
    s.enqueue_quantum_task(job, req).is_ok()
}

/// Drives the workload for `ticks` ticks, submitting, enqueueing and
/// completing stages from a seeded stream of choices.
pub fn drive(w: &Workload, ticks: Tick) -> Run {
    let mut rng = SplitMix64::new(w.seed ^ 0xd1ce);
    let mut s = Scheduler::new(w.cluster.clone());
    let mut states: Vec<SlotState> = w.slots.iter().map(|_| SlotState::default()).collect();
    let mut specs = BTreeMap::new();
    let mut snapshot_errors = Vec::new();
    let mut task_no = 0u64;

    for _ in 0..ticks {
        let now = s.now();
        for (slot, st) in w.slots.iter().zip(states.iter_mut()) {
            let view = st.current.and_then(|id| s.job(id));
            if view.as_ref().is_none_or(|v| v.state == JobState::Completed) {
                if st.current.is_some() {
                    st.current = None;
                    st.next_submit = now + below(&mut rng, 20);
                }
                if now >= st.next_submit {
                    let spec = job_spec(w, slot, &mut rng, st.jobs == 0);
                    let id = s.submit_job(spec.clone()).expect("generated specs fit the cluster");
                    specs.insert(id, spec);
                    st.jobs += 1;
                    st.current = Some(id);
                    st.stage_seen = None;
                }
                continue;
            }
            let v = view.expect("checked");
            if v.state != JobState::Running {
                continue;
            }
            let id = v.job_id;
            match slot.kind {
                SlotKind::Soft | SlotKind::Classical => {
                    if v.stage != st.stage_seen {
                        st.stage_seen = v.stage;
                        st.planned = 1 + below(&mut rng, 12);
                        st.enqueued = 0;
                        st.finishing = false;
                    }
                    if !v.stage_active || st.finishing {
                        continue;
                    }
                    if v.stage_kind == Some(StageKind::Quantum) {
                        for _ in 0..3 {
                            if st.enqueued < st.planned && below(&mut rng, 1000) < slot.enqueue_per_mille {
                                task_no += 1;
                                let cost = 1 + below(&mut rng, w.max_cost);
                                assert!(enqueue(&mut s, id, task_no, cost), "eligible job rejected a task");
                                st.enqueued += 1;
                            }
                        }
                        if st.enqueued >= st.planned {
                            s.complete_stage(id).expect("active stage");
                            st.finishing = true;
                        }
                    } else if below(&mut rng, 100) < 5 {
                        s.complete_stage(id).expect("active stage");
                        st.finishing = true;
                    }
                }
                SlotKind::Hard => {
                    if below(&mut rng, 2000) == 0 {
                        s.release_job(id).expect("running job");
                        continue;
                    }
                    if below(&mut rng, 1000) >= slot.enqueue_per_mille {
                        continue;
                    }
                    let spec = &specs[&id];
                    let end = v.started_at.expect("running") + spec.simultaneous_lifetime();
                    let cost = 1 + below(&mut rng, w.max_cost);
                    let backlog = backlog_cost(&s, id) + cost;
                    let deficit = backlog.saturating_sub(v.credits);
                    let r = spec.qos.replenish_per_tick;
                    let eta = now + backlog + deficit.div_ceil(r) + 2 * w.max_cost;
                    if eta <= end {
                        task_no += 1;
                        assert!(enqueue(&mut s, id, task_no, cost), "simultaneous job rejected a task");
                    }
                }
            }
        }
        s.tick();
        check_snapshot(&s, &specs, &mut snapshot_errors);
    }
    Run {
        scheduler: s,
        specs,
        snapshot_errors,
        ticks,
    }
}

/// Cost of the tasks the job has queued, from the log.
fn backlog_cost(s: &Scheduler, job: JobId) -> u64 {
    let mut queued: BTreeMap<&str, u64> = BTreeMap::new();
    for d in s.decisions().iter().rev() {
        if d.job_id != Some(job) {
            continue;
        }
        if d.kind == DecisionKind::JobStarted {
            break;
        }
        let id = d.task_id.as_deref().unwrap_or("");
        match d.kind {
            DecisionKind::TaskEnqueued => {
                queued.entry(id).or_insert(d.cost.unwrap_or(0));
            }
            DecisionKind::TaskDispatched | DecisionKind::TaskExpired | DecisionKind::TaskDropped => {
                queued.insert(id, 0);
            }
            _ => {}
        }
    }
    queued.values().sum()
}

fn check_snapshot(s: &Scheduler, specs: &BTreeMap<JobId, HybridJobSpec>, errors: &mut Vec<String>) {
    let at = s.now() - 1;
    let occupancy = s.occupancy();
    for v in s.jobs().into_iter().filter(|v| v.state == JobState::Running) {
        let spec = &specs[&v.job_id];
        if v.mode == AllocationMode::Simultaneous {
            let want = spec.quantum.as_ref().map_or(0, |q| q.gres.count as usize);
            if v.nodes.len() != spec.classical.nodes as usize || v.devices.len() != want {
                errors.push(format!("tick {at}: job {} holds {:?} and {:?}", v.job_id, v.nodes, v.devices));
            }
            for d in &v.devices {
                let o = occupancy.iter().find(|o| &o.device_id == d).expect("known device");
                if o.held_by != Some(v.job_id) {
                    errors.push(format!("tick {at}: {d} not held by job {}", v.job_id));
                }
            }
        }
        for &n in &v.nodes {
            if s.node_owner(n) != Some(v.job_id) {
                errors.push(format!("tick {at}: node {n} owner mismatch for job {}", v.job_id));
            }
        }
    }
    for o in &occupancy {
        if let (Some(job), Some(holder)) = (o.running_job, o.held_by) {
            if job != holder {
                errors.push(format!("tick {at}: job {job} runs on {} held by {holder}", o.device_id));
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Audit {
    pub errors: Vec<String>,
    /// Tasks that were at the head of their queue with enough credits.
    pub covered_heads: u64,
    /// Of those, the ones that started within the job's bound.
    pub covered_on_time: u64,
    /// Covered heads withdrawn by a release before their bound ran out.
    pub withdrawn: u64,
    pub dispatched: u64,
    pub max_covered_wait: u64,
    pub bound_violations: u64,
}

impl Audit {
    pub fn bound_held(&self) -> bool {
        self.covered_on_time + self.withdrawn == self.covered_heads
    }
}

#[derive(Debug, Clone)]
struct Queued {
    task: String,
    cost: u64,
    head_at: Tick,
    covered: bool,
}

#[derive(Debug)]
struct Account {
    spec: HybridJobSpec,
    balance: u64,
    running: bool,
    done: bool,
    queue: VecDeque<Queued>,
    spent: u64,
}

impl Account {
    fn refresh_head(&mut self, t: Tick) {
        let bal = self.balance;
        if let Some(h) = self.queue.front_mut() {
            h.head_at = t;
            h.covered = bal >= h.cost;
        }
    }
}

fn is_post_replenish(d: &Decision) -> bool {
    match d.kind {
        DecisionKind::TaskExpired | DecisionKind::TaskDispatched | DecisionKind::BoundViolation => true,
        DecisionKind::TaskDropped => d.note.as_deref() == Some("exceeds reservation"),
        _ => false,
    }
}

fn nodes_of(d: &Decision) -> Vec<usize> {
    d.resources.iter().filter_map(|r| r.strip_prefix("node:")).map(|n| n.parse().expect("node index")).collect()
}

fn devices_of(d: &Decision) -> Vec<&str> {
    d.resources.iter().filter(|r| !r.starts_with("node:")).map(|r| r.as_str()).collect()
}

/// Replays `log` over ticks `0..end`, recomputing every account, queue head
/// and resource grant, and compares with what the scheduler recorded.
pub fn audit(log: &[Decision], specs: &BTreeMap<JobId, HybridJobSpec>, cluster: &ClusterConfig, end: Tick) -> Audit {
    let mut a = Audit::default();
    let mut accounts: BTreeMap<JobId, Account> = BTreeMap::new();
    let mut node_owner: Vec<Option<JobId>> = vec![None; cluster.classical_nodes as usize];
    let mut busy_until: BTreeMap<&str, Tick> = cluster.devices.iter().map(|d| (d.id.as_str(), 0)).collect();
    let mut held: BTreeMap<&str, JobId> = BTreeMap::new();
    let mut i = 0;

    macro_rules! fail {
        ($($t:tt)*) => { a.errors.push(format!($($t)*)) };
    }

    for t in 0..end {
        let mut replenished = false;
        loop {
            let next = log.get(i).filter(|d| d.tick == t);
            let needs_replenish = next.is_none_or(is_post_replenish);
            if needs_replenish && !replenished {
                replenished = true;
                for acc in accounts.values_mut().filter(|acc| acc.running) {
                    acc.balance = (acc.balance + acc.spec.qos.replenish_per_tick).min(acc.spec.qos.cap);
                    let bal = acc.balance;
                    if let Some(h) = acc.queue.front_mut() {
                        if !h.covered && bal >= h.cost {
                            h.covered = true;
                            h.head_at = t;
                        }
                    }
                }
            }
            let Some(d) = next else { break };
            i += 1;
            let Some(job) = d.job_id else { continue };
            if d.kind == DecisionKind::JobSubmitted {
                let spec = specs[&job].clone();
                let balance = spec.qos.initial_credits.min(spec.qos.cap);
                accounts.insert(
                    job,
                    Account {
                        spec,
                        balance,
                        running: false,
                        done: false,
                        queue: VecDeque::new(),
                        spent: 0,
                    },
                );
                continue;
            }
            let acc = accounts.get_mut(&job).expect("job submitted before use");
            match d.kind {
                DecisionKind::JobStarted | DecisionKind::StageStarted => {
                    if d.kind == DecisionKind::JobStarted {
                        acc.running = true;
                        if d.credits != Some(acc.balance) {
                            fail!("tick {t}: job {job} started with {:?}, expected {}", d.credits, acc.balance);
                        }
                        let devs = devices_of(d);
                        if acc.spec.mode == AllocationMode::Simultaneous {
                            let want_dev = acc.spec.quantum.as_ref().map_or(0, |q| q.gres.count as usize);
                            if nodes_of(d).len() != acc.spec.classical.nodes as usize || devs.len() != want_dev {
                                fail!("tick {t}: job {job} started without its full hybrid allocation");
                            }
                        }
                        for dev in devs {
                            if busy_until[dev] > t || held.contains_key(dev) {
                                fail!("tick {t}: {dev} granted to job {job} while in use");
                            }
                            held.insert(dev, job);
                        }
                    }
                    for n in nodes_of(d) {
                        if let Some(o) = node_owner[n] {
                            fail!("tick {t}: node {n} granted to job {job} while owned by {o}");
                        }
                        node_owner[n] = Some(job);
                    }
                }
                DecisionKind::StageCompleted | DecisionKind::JobCompleted => {
                    for n in nodes_of(d) {
                        if node_owner[n] != Some(job) {
                            fail!("tick {t}: job {job} released node {n} it did not own");
                        }
                        node_owner[n] = None;
                    }
                    if d.kind == DecisionKind::JobCompleted {
                        acc.running = false;
                        acc.done = true;
                        if !acc.queue.is_empty() {
                            fail!("tick {t}: job {job} completed with queued tasks");
                        }
                        if d.credits.is_some_and(|c| c != acc.balance) {
                            fail!("tick {t}: job {job} ended with {:?}, expected {}", d.credits, acc.balance);
                        }
                        for dev in devices_of(d) {
                            if held.remove(dev) != Some(job) {
                                fail!("tick {t}: job {job} released {dev} it did not hold");
                            }
                        }
                    }
                }
                DecisionKind::TaskEnqueued => {
                    let cost = d.cost.expect("cost");
                    acc.queue.push_back(Queued {
                        task: d.task_id.clone().expect("task id"),
                        cost,
                        head_at: t,
                        covered: false,
                    });
                    if acc.queue.len() == 1 {
                        acc.refresh_head(t);
                    }
                }
                DecisionKind::TaskExpired | DecisionKind::TaskDropped => {
                    let task = d.task_id.as_deref().expect("task id");
                    let Some(pos) = acc.queue.iter().position(|q| q.task == task) else {
                        fail!("tick {t}: {task} removed but not queued");
                        continue;
                    };
                    let q = acc.queue.remove(pos).expect("position valid");
                    if pos == 0 {
                        if q.covered {
                            let withdrawn = d.note.as_deref() == Some("released")
                                && t - q.head_at <= acc.spec.qos.activation_bound_ticks;
                            a.covered_heads += 1;
                            if withdrawn {
                                a.withdrawn += 1;
                            } else {
                                fail!("tick {t}: covered head {task} removed ({:?})", d.note);
                            }
                        }
                        acc.refresh_head(t);
                    }
                }
                DecisionKind::TaskDispatched => {
                    a.dispatched += 1;
                    let task = d.task_id.as_deref().expect("task id");
                    let cost = d.cost.expect("cost");
                    let Some(head) = acc.queue.pop_front() else {
                        fail!("tick {t}: {task} dispatched from an empty queue");
                        continue;
                    };
                    if head.task != task {
                        fail!("tick {t}: {task} dispatched ahead of head {}", head.task);
                    }
                    if acc.balance < cost {
                        fail!("tick {t}: {task} dispatched with {} credits for cost {cost}", acc.balance);
                    }
                    acc.balance = acc.balance.saturating_sub(cost);
                    acc.spent += cost;
                    if d.credits != Some(acc.balance) {
                        fail!("tick {t}: {task} left {:?} credits, expected {}", d.credits, acc.balance);
                    }
                    if d.covered != Some(head.covered) || d.head_at != Some(head.head_at) {
                        fail!(
                            "tick {t}: {task} recorded covered={:?} head_at={:?}, expected {} {}",
                            d.covered,
                            d.head_at,
                            head.covered,
                            head.head_at
                        );
                    }
                    if head.covered {
                        a.covered_heads += 1;
                        let wait = t - head.head_at;
                        a.max_covered_wait = a.max_covered_wait.max(wait);
                        if wait <= acc.spec.qos.activation_bound_ticks {
                            a.covered_on_time += 1;
                        } else {
                            fail!("tick {t}: {task} waited {wait} past bound {}", acc.spec.qos.activation_bound_ticks);
                        }
                    }
                    acc.refresh_head(t);

                    let [dev] = devices_of(d)[..] else {
                        fail!("tick {t}: {task} dispatched to {:?}", d.resources);
                        continue;
                    };
                    if busy_until[dev] > t {
                        fail!("tick {t}: {task} placed on busy {dev}");
                    }
                    busy_until.insert(dev, t + cost);
                    match (held.get(dev), acc.spec.mode) {
                        (Some(&h), _) if h != job => fail!("tick {t}: {task} of job {job} on {dev} held by {h}"),
                        (None, AllocationMode::Simultaneous) => fail!("tick {t}: {task} outside its job's devices"),
                        _ => {}
                    }
                    let gres = &cluster.devices.iter().find(|x| x.id == dev).expect("known device").gres;
                    if !acc.spec.quantum.as_ref().is_some_and(|q| q.gres.matches(gres)) {
                        fail!("tick {t}: {task} on {dev} of the wrong kind");
                    }
                }
                DecisionKind::BoundViolation => {
                    a.bound_violations += 1;
                    fail!("tick {t}: bound violation for job {job}");
                }
                _ => {}
            }
        }
    }
    if i != log.len() {
        fail!("{} decisions past tick {end}", log.len() - i);
    }
    // a covered head still waiting must not be overdue yet
    for (job, acc) in &accounts {
        if let Some(h) = acc.queue.front() {
            if h.covered && !acc.done && end - 1 - h.head_at >= acc.spec.qos.activation_bound_ticks {
                a.covered_heads += 1;
                fail!("job {job}: head {} still waiting at the end", h.task);
            }
        }
    }
    a
}

/// Sum of dispatched costs per job, from the log.
pub fn spent_per_job(log: &[Decision]) -> BTreeMap<JobId, u64> {
    let mut out = BTreeMap::new();
    for d in log.iter().filter(|d| d.kind == DecisionKind::TaskDispatched) {
        *out.entry(d.job_id.expect("job")).or_insert(0) += d.cost.expect("cost");
    }
    out
}
