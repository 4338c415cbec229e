use std::collections::BTreeMap;

use serde::Serialize;

use crate::model::PacketKind;

/// Final disposition of a data send.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Delivered,
    Dropped(DropReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    Loss,
    LinkDown,
    QueueOverflow,
    DeliveryTimeout,
    NoRoute,
    NoFriend,
    OpRejected,
    NotMember,
    TransferAborted,
}

impl DropReason {
    pub fn tag(self) -> &'static str {
        match self {
            DropReason::Loss => "loss",
            DropReason::LinkDown => "link_down",
            DropReason::QueueOverflow => "queue_overflow",
            DropReason::DeliveryTimeout => "delivery_timeout",
            DropReason::NoRoute => "no_route",
            DropReason::NoFriend => "no_friend",
            DropReason::OpRejected => "op_rejected",
            DropReason::NotMember => "not_member",
            DropReason::TransferAborted => "transfer_aborted",
        }
    }
}

/// Counters collected over one run. Maps serialize with sorted keys.
#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct Metrics {
    pub broadcast_tx: u64,
    pub unicast_tx: u64,
    pub total_tx: u64,
    /// Transmissions of control kinds, keyed by kind name.
    pub control_tx: BTreeMap<String, u64>,
    pub data_tx: u64,
    pub data_sends: u64,
    pub delivered: u64,
    pub dropped: BTreeMap<String, u64>,
    pub in_flight: u64,
    pub bytes_delivered: u64,
    pub rejected_ops: u64,
    pub link_losses: u64,
    pub duplicates_suppressed: u64,
    pub rreq_floods: u64,
    pub stale_replies: u64,
    pub rejected_replies: u64,
    pub rejected_packets: u64,
    /// Control packets that could not be sent or forwarded, by reason.
    pub control_dropped: BTreeMap<String, u64>,
    pub unreachable_members: u64,
    pub link_breaks: u64,
    pub retransmissions: u64,
    pub selfish_drops: u64,
    pub adversary_packets: u64,
    /// Formation time of each community in ticks, keyed by community id.
    pub formation_ticks: BTreeMap<String, u64>,
    /// Installed rows that were not walks in the live graph when installed.
    pub invalid_paths_installed: u64,
    pub double_settles: u64,
    /// Deliveries that arrived after the origin had already timed out.
    pub late_deliveries: u64,
    pub order_violations: u64,
}

impl Metrics {
    pub(crate) fn count_tx(&mut self, kind: PacketKind, broadcast: bool) {
        if broadcast {
            self.broadcast_tx += 1;
        } else {
            self.unicast_tx += 1;
        }
        self.total_tx += 1;
        if kind == PacketKind::Data {
            self.data_tx += 1;
        } else {
            *self.control_tx.entry(kind.name().to_string()).or_default() += 1;
        }
    }

    pub(crate) fn count_drop(&mut self, reason: DropReason) {
        *self.dropped.entry(reason.tag().to_string()).or_default() += 1;
    }

    pub(crate) fn count_control_drop(&mut self, reason: &str) {
        *self.control_dropped.entry(reason.to_string()).or_default() += 1;
    }

    pub fn control_total(&self) -> u64 {
        self.control_tx.values().sum()
    }

    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }

    pub fn dropped_by(&self, reason: DropReason) -> u64 {
        self.dropped.get(reason.tag()).copied().unwrap_or(0)
    }

    pub fn control_by(&self, kind: PacketKind) -> u64 {
        self.control_tx.get(kind.name()).copied().unwrap_or(0)
    }
}
