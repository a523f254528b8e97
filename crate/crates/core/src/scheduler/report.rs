use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::decision::{Decision, DecisionKind};
use super::spec::JobId;
use crate::reservation::Window;
use crate::Tick;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceUtilization {
    pub device_id: String,
    pub busy_ticks: u64,
    pub utilization: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    pub job_id: JobId,
    pub tasks_enqueued: u64,
    pub tasks_dispatched: u64,
    pub tasks_completed: u64,
    pub tasks_expired: u64,
    pub tasks_dropped: u64,
    pub mean_wait: f64,
    pub max_wait: u64,
    pub credits_spent: u64,
    pub bound_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub window: Window,
    pub devices: Vec<DeviceUtilization>,
    /// Busy device-ticks over available device-ticks across all devices.
    pub quantum_utilization: f64,
    pub jobs: Vec<JobMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics over `window`, computed only from the decision log. Tasks count
/// toward the window in which they were dispatched; device busy time is the
/// part of each task's run that falls inside the window.
pub fn utilization_report(decisions: &[Decision], devices: &[String], window: Window) -> UtilizationReport {
    let span = window.duration();
    let mut busy: BTreeMap<&str, u64> = devices.iter().map(|d| (d.as_str(), 0)).collect();
    let mut jobs: BTreeMap<JobId, JobMetrics> = BTreeMap::new();
    let mut wait_sum: BTreeMap<JobId, u64> = BTreeMap::new();

    for d in decisions {
        let Some(job) = d.job_id else { continue };
        if d.tick >= window.end {
            continue;
        }
        let m = jobs.entry(job).or_insert_with(|| JobMetrics {
            job_id: job,
            ..JobMetrics::default()
        });
        if d.kind == DecisionKind::TaskDispatched {
            let cost = d.cost.unwrap_or(0);
            let run = Window {
                start: d.tick,
                end: d.tick + cost,
            };
            let overlap = run.end.min(window.end).saturating_sub(run.start.max(window.start));
            for r in &d.resources {
                if let Some(b) = busy.get_mut(r.as_str()) {
                    *b += overlap;
                }
            }
        }
        if d.tick < window.start {
            continue;
        }
        match d.kind {
            DecisionKind::TaskEnqueued => m.tasks_enqueued += 1,
            DecisionKind::TaskDispatched => {
                let wait = d.tick - d.enqueued_at.unwrap_or(d.tick);
                m.tasks_dispatched += 1;
                m.max_wait = m.max_wait.max(wait);
                m.credits_spent += d.cost.unwrap_or(0);
                *wait_sum.entry(job).or_default() += wait;
            }
            DecisionKind::TaskCompleted => m.tasks_completed += 1,
            DecisionKind::TaskExpired => m.tasks_expired += 1,
            DecisionKind::TaskDropped => m.tasks_dropped += 1,
            DecisionKind::BoundViolation => m.bound_violations += 1,
            _ => {}
        }
    }
    for m in jobs.values_mut() {
        m.mean_wait = ratio(wait_sum.get(&m.job_id).copied().unwrap_or(0), m.tasks_dispatched);
    }
    let total_busy: u64 = busy.values().sum();
    UtilizationReport {
        window,
        devices: devices
            .iter()
            .map(|d| {
                let b = busy[d.as_str()];
                DeviceUtilization {
                    device_id: d.clone(),
                    busy_ticks: b,
                    utilization: ratio(b, span),
                }
            })
            .collect(),
        quantum_utilization: ratio(total_busy, span * devices.len() as u64),
        jobs: jobs.into_values().collect(),
    }
}

/// Worst-case wait of a credit-covered head task on a shared pool of
/// `pool` unit-rate devices, given the `(cap, replenish)` accounts of every
/// other job on the pool and the largest task cost `max_cost`.
///
/// While the task waits every device is busy. What keeps them busy is work
/// already running when the task reached the head, at most
/// `pool * (max_cost - 1) + 1` device-ticks counting the predecessor that
/// may have been dispatched that same tick, plus what the other accounts
/// can spend over `w` ticks, `cap + replenish * (w - 1)` each. Solving
/// `pool * w <= that` for `w` gives the bound. `None` when the other
/// accounts alone can saturate the pool.
pub fn soft_activation_bound(pool: u64, max_cost: u64, others: &[(u64, u64)]) -> Option<Tick> {
    let sum_r: u64 = others.iter().map(|o| o.1).sum();
    let sum_cap: u64 = others.iter().map(|o| o.0).sum();
    if pool == 0 || sum_r >= pool {
        return None;
    }
    let num = (pool * max_cost.saturating_sub(1) + 1 + sum_cap).saturating_sub(sum_r);
    Some(num / (pool - sum_r))
}

/// Worst-case wait on devices held exclusively by the job: only its own
/// tasks can be in the way, the longest being a predecessor dispatched the
/// tick the task reached the head.
pub fn hard_activation_bound(max_cost: u64) -> Tick {
    max_cost
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn dispatch(tick: Tick, job: JobId, device: &str, cost: u64, enq: Tick) -> Decision {
        let mut d = Decision::new(tick, DecisionKind::TaskDispatched, Some(job));
        d.resources = vec![device.into()];
        d.cost = Some(cost);
        d.enqueued_at = Some(enq);
        d
    }

    #[test]
    fn half_busy_device() {
        let log = vec![dispatch(0, 1, "d0", 25, 0), dispatch(50, 1, "d0", 25, 40)];
        let r = utilization_report(&log, &["d0".into()], Window { start: 0, end: 100 });
        assert_eq!(r.devices[0].busy_ticks, 50);
        assert_eq!(r.devices[0].utilization, 0.5);
        assert_eq!(r.jobs[0].max_wait, 10);
        assert_eq!(r.jobs[0].mean_wait, 5.0);
        assert_eq!(r.jobs[0].credits_spent, 50);
    }

    #[test]
    fn empty_log_is_all_zero() {
        let r = utilization_report(&[], &["d0".into(), "d1".into()], Window { start: 0, end: 10 });
        assert!(r.jobs.is_empty());
        assert!(r.devices.iter().all(|d| d.busy_ticks == 0 && d.utilization == 0.0));
        assert_eq!(r.quantum_utilization, 0.0);
    }

    #[test]
    fn clipped_to_window() {
        let log = vec![dispatch(8, 1, "d0", 10, 8)];
        let r = utilization_report(&log, &["d0".into()], Window { start: 10, end: 20 });
        assert_eq!(r.devices[0].busy_ticks, 8);
        assert!(r.jobs[0].tasks_dispatched == 0);
    }

    #[test]
    fn bounds() {
        // lone job on one device: only a running task can block it
        assert_eq!(soft_activation_bound(1, 5, &[]), Some(5));
        // two rivals with cap 4, r = 1 each, on 3 devices, cost <= 2
        assert_eq!(soft_activation_bound(3, 2, &[(4, 1), (4, 1)]), Some(10));
        assert_eq!(soft_activation_bound(2, 2, &[(4, 1), (4, 1)]), None);
        assert_eq!(hard_activation_bound(3), 3);
    }
}
