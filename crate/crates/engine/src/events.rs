//! Ordered log of connector calls, transfers and compute, used to audit
//! call order, pipeline safety and store ordering.

use std::sync::atomic::{AtomicBool, Ordering};

use kvtier_core::QueryId;
use parking_lot::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    GetMatched,
    UpdateAlloc,
    BuildMeta,
    StartLoad,
    WaitLoad,
    StartStore,
    WaitStore,
    LoadDone,
    StoreBegin,
    StoreDone,
    ComputeBegin,
    ComputeEnd,
    /// Staging was short, the batch runs in blocking mode.
    Degraded,
    Prefetch,
}

impl EventKind {
    /// One of the seven engine-facing calls.
    pub fn is_call(self) -> bool {
        matches!(
            self,
            EventKind::GetMatched
                | EventKind::UpdateAlloc
                | EventKind::BuildMeta
                | EventKind::StartLoad
                | EventKind::WaitLoad
                | EventKind::StartStore
                | EventKind::WaitStore
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub seq: u64,
    pub kind: EventKind,
    pub batch: Option<u64>,
    pub query: Option<QueryId>,
    pub layer: Option<usize>,
}

pub struct EventLog {
    enabled: AtomicBool,
    events: Mutex<Vec<Event>>,
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new(true)
    }
}

impl EventLog {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled: AtomicBool::new(enabled),
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Relaxed);
    }

    pub fn record(
        &self,
        kind: EventKind,
        batch: Option<u64>,
        query: Option<QueryId>,
        layer: Option<usize>,
    ) {
        if !self.enabled.load(Ordering::Relaxed) {
            return;
        }
        let mut ev = self.events.lock();
        let seq = ev.len() as u64;
        ev.push(Event {
            seq,
            kind,
            batch,
            query,
            layer,
        });
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.events.lock().clone()
    }

    pub fn take(&self) -> Vec<Event> {
        std::mem::take(&mut *self.events.lock())
    }

    pub fn clear(&self) {
        self.events.lock().clear();
    }
}

/// Checks that no compute on a layer started before that layer's load for
/// the same query finished. Returns the offending compute events.
pub fn pipeline_violations(events: &[Event]) -> Vec<Event> {
    use std::collections::HashSet;
    let planned: HashSet<(u64, QueryId)> = events
        .iter()
        .filter(|e| e.kind == EventKind::LoadDone)
        .filter_map(|e| Some((e.batch?, e.query?)))
        .collect();
    let mut loaded: HashSet<(u64, QueryId, usize)> = HashSet::new();
    let mut bad = Vec::new();
    for e in events {
        match (e.kind, e.batch, e.query, e.layer) {
            (EventKind::LoadDone, Some(b), Some(q), Some(l)) => {
                loaded.insert((b, q, l));
            }
            (EventKind::ComputeBegin, Some(b), Some(q), Some(l))
                if planned.contains(&(b, q)) && !loaded.contains(&(b, q, l)) =>
            {
                bad.push(e.clone());
            }
            _ => {}
        }
    }
    bad
}

/// Checks that each batch's per-layer stores ran one at a time in layer
/// order. Returns a description of the first problem.
pub fn store_order_violation(events: &[Event]) -> Option<String> {
    use std::collections::HashMap;
    // batch -> (layer in progress, last finished layer)
    let mut state: HashMap<u64, (Option<usize>, Option<usize>)> = HashMap::new();
    for e in events {
        let (Some(b), Some(l)) = (e.batch, e.layer) else {
            continue;
        };
        match e.kind {
            EventKind::StoreBegin => {
                let s = state.entry(b).or_default();
                if let Some(open) = s.0 {
                    return Some(format!(
                        "batch {b}: layer {l} store began while layer {open} was in progress"
                    ));
                }
                if s.1.is_some_and(|done| l != done + 1) || (s.1.is_none() && l != 0) {
                    return Some(format!(
                        "batch {b}: layer {l} store began after layer {:?}",
                        s.1
                    ));
                }
                s.0 = Some(l);
            }
            EventKind::StoreDone => {
                let s = state.entry(b).or_default();
                if s.0 != Some(l) {
                    return Some(format!(
                        "batch {b}: layer {l} store finished without starting"
                    ));
                }
                s.0 = None;
                s.1 = Some(l);
            }
            _ => {}
        }
    }
    None
}
