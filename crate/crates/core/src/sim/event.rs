//! Event queue with a total order: time, then kind priority, then insertion.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    EngineReady {
        engine: usize,
    },
    FreqSwitchDone {
        engine: usize,
        generation: u64,
    },
    /// Index into the trace.
    Arrival(usize),
    /// Iteration boundary; `kick` marks one without a finished iteration,
    /// used to wake an idle engine.
    IterationComplete {
        engine: usize,
        kick: bool,
    },
    AutoscaleTick,
}

impl EventKind {
    fn priority(&self) -> u8 {
        match self {
            EventKind::EngineReady { .. } => 0,
            EventKind::FreqSwitchDone { .. } => 1,
            EventKind::Arrival(_) => 2,
            EventKind::IterationComplete { .. } => 3,
            EventKind::AutoscaleTick => 4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    seq: u64,
}

impl Event {
    fn key(&self) -> (f64, u8, u64) {
        (self.time, self.kind.priority(), self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.key(), other.key());
        b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: EventKind) {
        debug_assert!(time.is_finite(), "event at {time}");
        self.heap.push(Event {
            time,
            kind,
            seq: self.seq,
        });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
