//! Deterministic list scheduler producing per-resource event timelines.
//!
//! An event starts at `max(resource free time, end of every dependency)`.
//! Events must be pushed in a topological order; the push order also fixes
//! each resource's program order. Start times are therefore max-plus
//! expressions of the durations, which makes the makespan monotone in every
//! duration.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Resource {
    /// Matrix-multiply unit.
    Cube,
    /// Element-wise unit.
    Vector,
    /// Load queue from global memory.
    Dma,
    /// Store queue back to global memory.
    DmaOut,
    /// Communication channel `k`.
    Link(usize),
    /// Device compute stream.
    Compute,
    /// Host workers.
    CpuPool,
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::Link(k) => write!(f, "Link({k})"),
            other => write!(f, "{other:?}"),
        }
    }
}

/// Amount of work an event performs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "unit", content = "amount", rename_all = "lowercase")]
pub enum Work {
    Flops(f64),
    Elements(f64),
    Bytes(f64),
    None,
}

pub type EventId = usize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub id: EventId,
    pub resource: Resource,
    pub label: &'static str,
    pub start: f64,
    pub end: f64,
    pub work: Work,
    pub deps: Vec<EventId>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimelineError {
    #[error("events {a} and {b} overlap on {resource}")]
    Overlap {
        resource: Resource,
        a: EventId,
        b: EventId,
    },
    #[error("event {event} starts before its dependency {dep} ends")]
    Dependency { event: EventId, dep: EventId },
    #[error("event {event} has invalid times [{start}, {end}]")]
    Times {
        event: EventId,
        start: f64,
        end: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timeline {
    events: Vec<Event>,
    #[serde(skip)]
    ends: Vec<f64>,
    #[serde(skip)]
    free: BTreeMap<Resource, f64>,
    #[serde(skip)]
    record: bool,
    makespan: f64,
}

impl Default for Timeline {
    fn default() -> Self {
        Self::new()
    }
}

impl Timeline {
    pub fn new() -> Self {
        Self {
            events: Vec::new(),
            ends: Vec::new(),
            free: BTreeMap::new(),
            record: true,
            makespan: 0.0,
        }
    }

    /// A timeline that keeps only end times, for large sweeps where the
    /// event list itself is not needed.
    pub fn summary_only() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Schedules an event of length `duration` and returns its id.
    pub fn push(
        &mut self,
        resource: Resource,
        label: &'static str,
        duration: f64,
        deps: &[EventId],
        work: Work,
    ) -> EventId {
        let id = self.ends.len();
        debug_assert!(
            deps.iter().all(|&d| d < id),
            "dependencies must already exist"
        );
        debug_assert!(duration >= 0.0, "negative duration for {label}");
        let ready = deps.iter().map(|&d| self.ends[d]).fold(0.0, f64::max);
        let free = self.free.entry(resource).or_insert(0.0);
        let start = free.max(ready);
        let end = start + duration;
        *free = end;
        self.ends.push(end);
        self.makespan = self.makespan.max(end);
        if self.record {
            self.events.push(Event {
                id,
                resource,
                label,
                start,
                end,
                work,
                deps: deps.to_vec(),
            });
        }
        id
    }

    pub fn end(&self, id: EventId) -> f64 {
        self.ends[id]
    }

    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    /// Recorded events; empty for summary-only timelines.
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn makespan(&self) -> f64 {
        self.makespan
    }

    pub fn count_label(&self, label: &str) -> usize {
        self.events.iter().filter(|e| e.label == label).count()
    }

    /// Total busy time of one resource.
    pub fn busy(&self, resource: Resource) -> f64 {
        self.events
            .iter()
            .filter(|e| e.resource == resource)
            .map(|e| e.end - e.start)
            .sum()
    }

    /// Checks resource exclusivity and dependency ordering of the recorded
    /// events.
    pub fn validate(&self) -> Result<(), TimelineError> {
        let mut by_resource: BTreeMap<Resource, Vec<&Event>> = BTreeMap::new();
        for e in &self.events {
            if !(e.start.is_finite() && e.end >= e.start) {
                return Err(TimelineError::Times {
                    event: e.id,
                    start: e.start,
                    end: e.end,
                });
            }
            for &d in &e.deps {
                if d >= e.id || self.ends[d] > e.start {
                    return Err(TimelineError::Dependency {
                        event: e.id,
                        dep: d,
                    });
                }
            }
            by_resource.entry(e.resource).or_default().push(e);
        }
        for (resource, mut evs) in by_resource {
            evs.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
            for w in evs.windows(2) {
                if w[0].end > w[1].start {
                    return Err(TimelineError::Overlap {
                        resource,
                        a: w[0].id,
                        b: w[1].id,
                    });
                }
            }
        }
        Ok(())
    }
}
