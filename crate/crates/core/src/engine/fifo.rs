//! Bounded FIFO channels between engine units.

use std::collections::VecDeque;

/// Bounded queue that records producer stalls.
#[derive(Clone, Debug)]
pub struct Fifo<T> {
    name: &'static str,
    buf: VecDeque<T>,
    depth: usize,
    /// Pushes refused because the queue was full.
    pub stalls: u64,
    pub pushes: u64,
    pub high_water: usize,
}

impl<T> Fifo<T> {
    pub fn new(name: &'static str, depth: usize) -> Self {
        assert!(depth > 0, "fifo depth must be positive");
        Fifo {
            name,
            buf: VecDeque::with_capacity(depth),
            depth,
            stalls: 0,
            pushes: 0,
            high_water: 0,
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.buf.len() == self.depth
    }

    /// Pushes `item`, or hands it back and counts a stall when full.
    pub fn push(&mut self, item: T) -> Result<(), T> {
        if self.is_full() {
            self.stalls += 1;
            return Err(item);
        }
        self.buf.push_back(item);
        self.pushes += 1;
        self.high_water = self.high_water.max(self.buf.len());
        Ok(())
    }

    pub fn pop(&mut self) -> Option<T> {
        self.buf.pop_front()
    }

    pub fn occupancy(&self) -> QueueOccupancy {
        QueueOccupancy {
            name: self.name,
            len: self.buf.len(),
            depth: self.depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueueOccupancy {
    pub name: &'static str,
    pub len: usize,
    pub depth: usize,
}

impl std::fmt::Display for QueueOccupancy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}={}/{}", self.name, self.len, self.depth)
    }
}

/// Outcome of one scheduling step of a unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Progress,
    Blocked,
    Done,
}

/// Runs `step` over all units round by round until every unit reports
/// `Done`. A round in which no unit progresses is a deadlock; the
/// occupancy snapshot is returned as the error.
pub fn run_units<S>(
    state: &mut S,
    units: usize,
    mut step: impl FnMut(&mut S, usize) -> Step,
    snapshot: impl Fn(&S) -> Vec<QueueOccupancy>,
) -> Result<u64, Vec<QueueOccupancy>> {
    let mut rounds = 0u64;
    loop {
        let mut progressed = false;
        let mut all_done = true;
        for u in 0..units {
            match step(state, u) {
                Step::Progress => {
                    progressed = true;
                    all_done = false;
                }
                Step::Blocked => all_done = false,
                Step::Done => {}
            }
        }
        if all_done {
            return Ok(rounds);
        }
        if !progressed {
            return Err(snapshot(state));
        }
        rounds += 1;
    }
}
