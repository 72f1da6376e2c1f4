//! Capability discovery between two hosts.
//!
//! Until a destination is known to speak the multipath extension, user
//! packets go out plain, and a copy carrying an enable query rides along
//! with each one. A capable receiver records the querying host and
//! replies with a confirmation; the query then stops and the session
//! switches to multipath. A destination that stays silent through the
//! query budget is marked unsupported and is spoken to in plain IP for
//! the rest of the run.

use crate::tables::{Availability, AvailabilityTable, NodeAddrTable, Sock};
use crate::wire::{ControlMessage, NodeId};

/// unanswered queries a destination gets before being written off
pub const QUERY_THRESHOLD: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendMode {
    /// no extension data at all
    Plain,
    /// plain packet, plus a duplicate carrying an enable query
    PlainWithQuery,
    /// full multipath send
    Multipath,
}

pub fn send_mode(avail: Availability) -> SendMode {
    match avail {
        Availability::Unknown => SendMode::PlainWithQuery,
        Availability::Confirmed => SendMode::Multipath,
        Availability::Unsupported => SendMode::Plain,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryOutcome {
    pub count: u32,
    /// the destination was just marked unsupported by this query
    pub gave_up: bool,
}

/// Accounts for one emitted query toward `dst`.
pub fn note_query_sent(
    table: &mut AvailabilityTable,
    dst: Sock,
    threshold: u32,
) -> QueryOutcome {
    let before = table.lookup(dst);
    let count = table.note_query(dst, threshold);
    QueryOutcome {
        count,
        gave_up: before == Availability::Unknown
            && table.lookup(dst) == Availability::Unsupported,
    }
}

/// A query arrived from `peer_src`: that host speaks multipath. Returns
/// true when this is news.
pub fn on_query_received(table: &mut AvailabilityTable, peer_src: Sock) -> bool {
    table.confirm(peer_src)
}

/// A confirmation arrived from `peer_src`. Returns true when this flips
/// the destination to confirmed.
pub fn on_confirm_received(table: &mut AvailabilityTable, peer_src: Sock) -> bool {
    table.confirm(peer_src)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LearnOutcome {
    pub new_socket: bool,
    pub new_advert: bool,
}

/// Harvests peer addressing from any received control block: the
/// observed source socket plus the one advertised address slot.
pub fn learn_from_cm(
    addrs: &mut NodeAddrTable,
    peer: NodeId,
    observed_src: Sock,
    cm: &ControlMessage,
) -> LearnOutcome {
    LearnOutcome {
        new_socket: addrs.note_socket(peer, observed_src),
        new_advert: addrs.note_advertised(peer, cm.addr_slot),
    }
}
