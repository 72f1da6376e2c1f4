//! Shields legacy transports from multipath side effects.
//!
//! Packets of one session race each other over paths with different
//! delays, so the receiver holds early segments in a reorder buffer and
//! releases them in sequence. The buffer is bounded: when it fills, the
//! whole thing is flushed upward in sequence order and the expected
//! sequence jumps forward, leaving loss recovery to the transport.
//!
//! For TCP sessions crossing strict NAT boxes, new paths first run a
//! fake three-way handshake so the NAT learns the flow; the tiny state
//! machine for that lives here too.

use std::collections::BTreeMap;

/// segments the reorder buffer may hold before it force-flushes; sized
/// for the deepest hole a bandwidth-delay spread can open at desk scale
pub const REORDER_CAP: usize = 256;

/// fake handshake attempts before a path is declared NAT-blocked
pub const MAX_HS_TRIES: u32 = 3;

#[derive(Debug)]
pub struct ReorderBuffer<T> {
    expected: u64,
    held: BTreeMap<u64, T>,
}

#[derive(Debug, PartialEq, Eq)]
pub struct PushOutcome<T> {
    /// segments released to the transport, in delivery order
    pub delivered: Vec<(u64, T)>,
    /// true when a full buffer forced everything out
    pub flushed: bool,
}

impl<T> ReorderBuffer<T> {
    pub fn new(first_seq: u64) -> Self {
        ReorderBuffer {
            expected: first_seq,
            held: BTreeMap::new(),
        }
    }

    pub fn expected(&self) -> u64 {
        self.expected
    }

    pub fn held_len(&self) -> usize {
        self.held.len()
    }

    /// Accepts one segment and returns whatever becomes deliverable.
    ///
    /// In order: the segment plus the maximal consecutive run behind it.
    /// Ahead of order: held back, unless the buffer is full, in which
    /// case everything (the newcomer included) flushes in sequence
    /// order. Behind the expected sequence: passed straight through so
    /// retransmits and stale duplicates never stall.
    pub fn push(&mut self, seq: u64, item: T) -> PushOutcome<T> {
        if seq < self.expected {
            return PushOutcome {
                delivered: vec![(seq, item)],
                flushed: false,
            };
        }
        if seq == self.expected {
            let mut out = vec![(seq, item)];
            self.expected += 1;
            while let Some(entry) = self.held.remove(&self.expected) {
                out.push((self.expected, entry));
                self.expected += 1;
            }
            return PushOutcome {
                delivered: out,
                flushed: false,
            };
        }
        // ahead of order
        if self.held.contains_key(&seq) {
            // duplicate of a held segment; drop the copy
            return PushOutcome {
                delivered: Vec::new(),
                flushed: false,
            };
        }
        if self.held.len() >= REORDER_CAP {
            self.held.insert(seq, item);
            let drained: Vec<(u64, T)> = std::mem::take(&mut self.held).into_iter().collect();
            self.expected = drained.last().map(|(s, _)| s + 1).unwrap_or(self.expected);
            return PushOutcome {
                delivered: drained,
                flushed: true,
            };
        }
        self.held.insert(seq, item);
        PushOutcome {
            delivered: Vec::new(),
            flushed: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsStatus {
    /// waiting for the synthetic SYN-ACK, carries attempts so far
    AwaitReply(u32),
    Done,
    Blocked,
}

/// Initiator-side fake handshake progress for one candidate path.
#[derive(Debug, Clone, Copy)]
pub struct FakeHandshake {
    pub status: HsStatus,
    pub retry_at_us: u64,
}

impl FakeHandshake {
    /// Starts with the first SYN considered sent.
    pub fn started(now_us: u64, retry_after_us: u64) -> Self {
        FakeHandshake {
            status: HsStatus::AwaitReply(1),
            retry_at_us: now_us + retry_after_us,
        }
    }

    pub fn on_reply(&mut self) -> bool {
        match self.status {
            HsStatus::AwaitReply(_) => {
                self.status = HsStatus::Done;
                true
            }
            _ => false,
        }
    }

    /// Called when the retry deadline passed. True means send another
    /// SYN; false means attempts ran out and the path is blocked.
    pub fn on_timeout(&mut self, now_us: u64, retry_after_us: u64) -> bool {
        match self.status {
            HsStatus::AwaitReply(tries) if tries < MAX_HS_TRIES => {
                self.status = HsStatus::AwaitReply(tries + 1);
                self.retry_at_us = now_us + retry_after_us;
                true
            }
            HsStatus::AwaitReply(_) => {
                self.status = HsStatus::Blocked;
                false
            }
            _ => false,
        }
    }

    pub fn usable(&self) -> bool {
        self.status == HsStatus::Done
    }
}
