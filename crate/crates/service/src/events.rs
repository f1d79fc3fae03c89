//! Event fan-out with resumable cursors.
//!
//! Track and label events live in a bounded ring. A subscriber whose cursor
//! fell behind the ring receives a gap marker first. Metrics ticks are not
//! queued at all: only the latest one is kept, so a slow reader sees one
//! coalesced tick instead of a backlog.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use reefpipe_core::pipeline::{RunStatus, StageMetrics};
use serde::Serialize;
use tokio::sync::watch;

use crate::labels::LabelRecord;
use crate::store::TrackSummary;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServiceEvent {
    TrackCreated { track: TrackSummary },
    TrackUpdated { track: TrackSummary },
    TrackLost { track: TrackSummary },
    TrackFinalized { track: TrackSummary },
    TrackLabeled { label: LabelRecord },
    MetricsTick { metrics: StageMetrics },
    RunFinished { outcome: RunStatus },
    /// Events `missed_from..=missed_to` were evicted before this subscriber
    /// read them.
    Gap { missed_from: u64, missed_to: u64 },
}

impl ServiceEvent {
    pub fn name(&self) -> &'static str {
        match self {
            ServiceEvent::TrackCreated { .. } => "track_created",
            ServiceEvent::TrackUpdated { .. } => "track_updated",
            ServiceEvent::TrackLost { .. } => "track_lost",
            ServiceEvent::TrackFinalized { .. } => "track_finalized",
            ServiceEvent::TrackLabeled { .. } => "track_labeled",
            ServiceEvent::MetricsTick { .. } => "metrics_tick",
            ServiceEvent::RunFinished { .. } => "run_finished",
            ServiceEvent::Gap { .. } => "gap",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Envelope {
    pub id: u64,
    pub event: Arc<ServiceEvent>,
}

#[derive(Debug)]
struct HubState {
    next_id: u64,
    ring: VecDeque<Envelope>,
    capacity: usize,
    /// Highest id pushed out of the ring.
    evicted_upto: u64,
    metrics: Option<Envelope>,
}

#[derive(Debug)]
pub struct EventHub {
    state: Mutex<HubState>,
    latest: watch::Sender<u64>,
}

impl EventHub {
    pub fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new(HubState {
                next_id: 1,
                ring: VecDeque::with_capacity(capacity.min(4096)),
                capacity: capacity.max(1),
                evicted_upto: 0,
                metrics: None,
            }),
            latest: watch::Sender::new(0),
        }
    }

    /// Assign the next id and make the event visible to subscribers.
    pub fn publish(&self, event: ServiceEvent) -> u64 {
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let id = st.next_id;
        st.next_id += 1;
        let env = Envelope {
            id,
            event: Arc::new(event),
        };
        if matches!(*env.event, ServiceEvent::MetricsTick { .. }) {
            st.metrics = Some(env);
        } else {
            if st.ring.len() == st.capacity {
                if let Some(old) = st.ring.pop_front() {
                    st.evicted_upto = old.id;
                }
            }
            st.ring.push_back(env);
        }
        drop(st);
        self.latest.send_replace(id);
        id
    }

    /// Id of the most recent event, 0 before the first.
    pub fn last_id(&self) -> u64 {
        self.state.lock().unwrap_or_else(|p| p.into_inner()).next_id - 1
    }

    /// Up to `max` events after `cursor`, in id order, preceded by a gap
    /// marker when some were evicted unread.
    pub fn since(&self, cursor: u64, max: usize) -> Vec<Envelope> {
        let st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let mut out = Vec::new();
        if st.evicted_upto > cursor {
            out.push(Envelope {
                id: st.evicted_upto,
                event: Arc::new(ServiceEvent::Gap {
                    missed_from: cursor + 1,
                    missed_to: st.evicted_upto,
                }),
            });
        }
        let floor = cursor.max(st.evicted_upto);
        let start = st.ring.partition_point(|e| e.id <= floor);
        let mut metrics = st.metrics.as_ref().filter(|m| m.id > floor);
        for e in st.ring.range(start..) {
            if out.len() >= max {
                break;
            }
            if let Some(m) = metrics.filter(|m| m.id < e.id) {
                out.push(m.clone());
                metrics = None;
                if out.len() >= max {
                    break;
                }
            }
            out.push(e.clone());
        }
        if let Some(m) = metrics {
            if out.len() < max && out.last().is_none_or(|l| l.id < m.id) {
                out.push(m.clone());
            }
        }
        out
    }

    /// Wakes whenever a new event is published.
    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.latest.subscribe()
    }
}
