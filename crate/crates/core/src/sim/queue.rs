use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::model::{CommunityId, PacketEnvelope};
use crate::sim::time::SimTime;

/// Timers owned by a node.
#[derive(Clone, Debug)]
pub enum Timer {
    /// Act on the best copy of a flood received at this instant.
    FloodDecide(u64),
    JoinWindowClose(CommunityId),
    RreqTimeout(u64),
    /// Gives up on friend-relayed data that was never delivered.
    FriendTimeout(u64),
    HelloTick,
    ChunkTimeout {
        session: u64,
        seq: u64,
        attempt: u32,
    },
    RequestTimeout {
        session: u64,
        attempt: u32,
    },
    Adversary(usize),
}

#[derive(Clone, Debug)]
pub enum EventAction {
    Deliver {
        to: usize,
        from: usize,
        pkt: Box<PacketEnvelope>,
    },
    Timer {
        node: usize,
        timer: Timer,
    },
    /// Repetition `rep` of scenario step `index`.
    Scenario {
        index: usize,
        rep: u32,
    },
}

#[derive(Clone, Debug)]
pub struct Event {
    pub time: SimTime,
    pub seq: u64,
    pub action: EventAction,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
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
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Pops in `(time, seq)` order; `seq` is assigned at insertion.
#[derive(Default, Debug)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: SimTime, action: EventAction) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, action });
        seq
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step(i: usize) -> EventAction {
        EventAction::Scenario { index: i, rep: 0 }
    }

    #[test]
    fn same_time_pops_in_insertion_order() {
        let mut q = EventQueue::new();
        q.push(SimTime(5), step(0));
        q.push(SimTime(1), step(1));
        q.push(SimTime(5), step(2));
        let order: Vec<u64> = std::iter::from_fn(|| q.pop()).map(|e| e.seq).collect();
        assert_eq!(order, [1, 0, 2]);
    }

    proptest! {
        #[test]
        fn pops_sorted_by_time_then_seq(times in proptest::collection::vec(0u64..20, 0..64)) {
            let mut q = EventQueue::new();
            for (i, t) in times.iter().enumerate() {
                q.push(SimTime(*t), step(i));
            }
            let popped: Vec<(SimTime, u64)> =
                std::iter::from_fn(|| q.pop()).map(|e| (e.time, e.seq)).collect();
            let mut sorted = popped.clone();
            sorted.sort();
            prop_assert_eq!(popped.len(), times.len());
            prop_assert_eq!(popped, sorted);
        }
    }
}
