//! Per-resource reservation ledger over half-open tick windows.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Window {
    pub start: Tick,
    pub end: Tick,
}

impl Window {
    pub fn new(start: Tick, duration: Tick) -> Window {
        Window {
            start,
            end: start.saturating_add(duration),
        }
    }

    pub fn duration(&self) -> Tick {
        self.end - self.start
    }

    pub fn contains(&self, t: Tick) -> bool {
        self.start <= t && t < self.end
    }

    pub fn overlaps(&self, other: &Window) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub id: u64,
    pub resource: String,
    pub window: Window,
    pub holder: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReserveError {
    #[error("reservation duration must be positive")]
    ZeroDuration,
    #[error("window overlaps an existing grant; earliest feasible start is {earliest_start}")]
    Denied { earliest_start: Tick },
    #[error("unknown reservation {0}")]
    UnknownGrant(u64),
}

/// Granted windows per resource. Windows on one resource never overlap.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    next_id: u64,
    by_resource: BTreeMap<String, Vec<Grant>>,
}

impl Ledger {
    pub fn new() -> Ledger {
        Ledger::default()
    }

    /// First start `>= from` at which `duration` ticks are free on `resource`.
    pub fn earliest_start(&self, resource: &str, from: Tick, duration: Tick) -> Tick {
        let mut t = from;
        if let Some(grants) = self.by_resource.get(resource) {
            // grants are kept sorted by start
            for g in grants {
                if g.window.end <= t {
                    continue;
                }
                if g.window.start >= t.saturating_add(duration) {
                    break;
                }
                t = g.window.end;
            }
        }
        t
    }

    pub fn reserve(
        &mut self,
        resource: &str,
        start: Tick,
        duration: Tick,
        holder: u64,
    ) -> Result<Grant, ReserveError> {
        if duration == 0 {
            return Err(ReserveError::ZeroDuration);
        }
        let earliest = self.earliest_start(resource, start, duration);
        if earliest != start {
            return Err(ReserveError::Denied {
                earliest_start: earliest,
            });
        }
        let grant = Grant {
            id: self.next_id,
            resource: resource.into(),
            window: Window::new(start, duration),
            holder,
        };
        self.next_id += 1;
        let list = self.by_resource.entry(resource.into()).or_default();
        let at = list.partition_point(|g| g.window.start < start);
        list.insert(at, grant.clone());
        Ok(grant)
    }

    /// Shortens a grant so it ends at `at` (never lengthens it). A grant
    /// truncated to zero length is removed.
    pub fn truncate(&mut self, id: u64, at: Tick) -> Result<(), ReserveError> {
        for list in self.by_resource.values_mut() {
            if let Some(i) = list.iter().position(|g| g.id == id) {
                let w = &mut list[i].window;
                w.end = w.end.min(at.max(w.start));
                if w.end == w.start {
                    list.remove(i);
                }
                return Ok(());
            }
        }
        Err(ReserveError::UnknownGrant(id))
    }

    pub fn get(&self, id: u64) -> Option<&Grant> {
        self.by_resource.values().flatten().find(|g| g.id == id)
    }

    pub fn grants(&self, resource: &str) -> &[Grant] {
        self.by_resource.get(resource).map_or(&[], |v| v.as_slice())
    }

    pub fn holder_at(&self, resource: &str, t: Tick) -> Option<u64> {
        self.grants(resource)
            .iter()
            .find(|g| g.window.contains(t))
            .map(|g| g.holder)
    }

    pub fn all(&self) -> impl Iterator<Item = &Grant> {
        self.by_resource.values().flatten()
    }

    /// Drops grants that ended at or before `t`.
    pub fn prune_before(&mut self, t: Tick) {
        for list in self.by_resource.values_mut() {
            list.retain(|g| g.window.end > t);
        }
    }
}
