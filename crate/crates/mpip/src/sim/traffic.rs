//! Application traffic endpoints: a fixed-window bulk sender with the
//! usual cumulative-ack, dupack and timeout machinery, its sink, and
//! constant-rate datagram schedules.
//!
//! These model transport behavior only; addressing and path choice stay
//! with the node engine.

use std::collections::BTreeSet;

use crate::metrics::DelayAgg;

pub const DUPACK_THRESHOLD: u32 = 3;
pub const RTO_CAP_US: u64 = 5_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcpState {
    Idle,
    SynSent,
    Established,
}

/// What a timer expiry asks the engine to put on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimerAction {
    None,
    Resyn,
    /// go-back-n resend of every outstanding segment
    Resend(Vec<u64>),
}

#[derive(Debug)]
pub struct TcpSource {
    pub window: u64,
    pub seg_payload: usize,
    pub state: TcpState,
    /// next never-sent sequence, numbering starts at 1
    next_new: u64,
    highest_acked: u64,
    dup_acks: u32,
    fast_retx_for: Option<u64>,
    rto_base_us: u64,
    rto_cur_us: u64,
    pub rto_deadline: Option<u64>,
    pub retransmits: u64,
}

#[derive(Debug, Default)]
pub struct AckOutcome {
    pub new_seqs: Vec<u64>,
    pub fast_retx: Option<u64>,
}

impl TcpSource {
    pub fn new(window: u64, seg_payload: usize, rto_us: u64) -> Self {
        TcpSource {
            window,
            seg_payload,
            state: TcpState::Idle,
            next_new: 1,
            highest_acked: 0,
            dup_acks: 0,
            fast_retx_for: None,
            rto_base_us: rto_us,
            rto_cur_us: rto_us,
            rto_deadline: None,
            retransmits: 0,
        }
    }

    pub fn outstanding(&self) -> u64 {
        self.next_new - 1 - self.highest_acked
    }

    /// Engine sends a syn when this returns.
    pub fn open(&mut self, now: u64) {
        self.state = TcpState::SynSent;
        self.rto_deadline = Some(now + self.rto_cur_us);
    }

    pub fn on_synack(&mut self, now: u64) -> Vec<u64> {
        if self.state != TcpState::SynSent {
            return Vec::new();
        }
        self.state = TcpState::Established;
        self.rto_cur_us = self.rto_base_us;
        self.rto_deadline = Some(now + self.rto_cur_us);
        self.take_sendable()
    }

    fn take_sendable(&mut self) -> Vec<u64> {
        let mut out = Vec::new();
        while self.next_new <= self.highest_acked + self.window {
            out.push(self.next_new);
            self.next_new += 1;
        }
        out
    }

    pub fn on_ack(&mut self, now: u64, cum: u64) -> AckOutcome {
        let mut out = AckOutcome::default();
        if self.state != TcpState::Established {
            return out;
        }
        if cum > self.highest_acked {
            self.highest_acked = cum;
            self.dup_acks = 0;
            self.fast_retx_for = None;
            self.rto_cur_us = self.rto_base_us;
            self.rto_deadline = if self.outstanding() > 0 {
                Some(now + self.rto_cur_us)
            } else {
                None
            };
            out.new_seqs = self.take_sendable();
        } else if cum == self.highest_acked && self.outstanding() > 0 {
            self.dup_acks += 1;
            if self.dup_acks >= DUPACK_THRESHOLD && self.fast_retx_for != Some(cum) {
                self.fast_retx_for = Some(cum);
                self.retransmits += 1;
                out.fast_retx = Some(cum + 1);
            }
        }
        out
    }

    pub fn on_timer(&mut self, now: u64) -> TimerAction {
        match self.rto_deadline {
            Some(d) if now >= d => {}
            _ => return TimerAction::None,
        }
        match self.state {
            TcpState::SynSent => {
                self.backoff(now);
                TimerAction::Resyn
            }
            TcpState::Established if self.outstanding() > 0 => {
                let seqs: Vec<u64> = (self.highest_acked + 1..self.next_new).collect();
                self.retransmits += seqs.len() as u64;
                self.backoff(now);
                TimerAction::Resend(seqs)
            }
            _ => {
                self.rto_deadline = None;
                TimerAction::None
            }
        }
    }

    fn backoff(&mut self, now: u64) {
        self.rto_cur_us = (self.rto_cur_us * 2).min(RTO_CAP_US);
        self.rto_deadline = Some(now + self.rto_cur_us);
    }
}

#[derive(Debug)]
pub struct TcpSink {
    /// next in-order sequence
    pub expected: u64,
    held: BTreeSet<u64>,
    /// segments that arrived above the in-order point
    pub ooo: u64,
}

impl TcpSink {
    pub fn new() -> Self {
        TcpSink {
            expected: 1,
            held: BTreeSet::new(),
            ooo: 0,
        }
    }

    /// Returns the cumulative ack to send back.
    pub fn on_data(&mut self, seq: u64) -> u64 {
        if seq == self.expected {
            self.expected += 1;
            while self.held.remove(&self.expected) {
                self.expected += 1;
            }
        } else if seq > self.expected && self.held.insert(seq) {
            self.ooo += 1;
        }
        self.expected - 1
    }
}

impl Default for TcpSink {
    fn default() -> Self {
        Self::new()
    }
}

/// One constant-rate packet class. `bps` is application payload rate;
/// emission k happens at a drift-free cumulative offset.
#[derive(Debug, Clone, Copy)]
pub struct CbrClass {
    pub payload: usize,
    pub bps: u64,
}

impl CbrClass {
    pub fn from_pps(payload: usize, pps: u64) -> Self {
        CbrClass {
            payload,
            bps: pps * payload as u64 * 8,
        }
    }

    pub fn emit_time_us(&self, start_us: u64, k: u64) -> u64 {
        start_us + k * self.payload as u64 * 8 * 1_000_000 / self.bps
    }
}

#[derive(Debug, Default)]
pub struct UdpSink {
    /// per payload-size class, first copies only
    pub classes: std::collections::BTreeMap<usize, DelayAgg>,
}

impl UdpSink {
    pub fn on_dgram(&mut self, now_us: u64, payload_len: usize, created_us: u64) {
        let delay = now_us.saturating_sub(created_us);
        self.classes.entry(payload_len).or_default().note(delay);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_opens_then_slides_on_acks() {
        let mut src = TcpSource::new(4, 1400, 200_000);
        src.open(0);
        assert_eq!(src.on_synack(1000), vec![1, 2, 3, 4]);
        assert_eq!(src.outstanding(), 4);
        // cumulative ack of 2 frees exactly two slots
        let out = src.on_ack(20_000, 2);
        assert_eq!(out.new_seqs, vec![5, 6]);
        assert_eq!(src.outstanding(), 4);
        // ack of everything clears the timer
        let out = src.on_ack(30_000, 6);
        assert_eq!(out.new_seqs, vec![7, 8, 9, 10]);
        let _ = src.on_ack(40_000, 10);
        assert_eq!(src.rto_deadline, None);
    }

    #[test]
    fn third_dupack_retransmits_once_per_value() {
        let mut src = TcpSource::new(8, 1400, 200_000);
        src.open(0);
        src.on_synack(1000);
        src.on_ack(10_000, 2);
        assert!(src.on_ack(11_000, 2).fast_retx.is_none());
        assert!(src.on_ack(12_000, 2).fast_retx.is_none());
        assert_eq!(src.on_ack(13_000, 2).fast_retx, Some(3));
        assert_eq!(src.retransmits, 1);
        // further dupacks for the same value stay quiet
        assert!(src.on_ack(14_000, 2).fast_retx.is_none());
        // a new ack value re-arms
        src.on_ack(20_000, 4);
        for _ in 0..2 {
            assert!(src.on_ack(21_000, 4).fast_retx.is_none());
        }
        assert_eq!(src.on_ack(22_000, 4).fast_retx, Some(5));
        assert_eq!(src.retransmits, 2);
    }

    #[test]
    fn timeout_resends_all_outstanding_and_backs_off() {
        let mut src = TcpSource::new(3, 1400, 200_000);
        src.open(0);
        src.on_synack(1000);
        src.on_ack(10_000, 1);
        // outstanding 2..=4
        assert_eq!(src.on_timer(100_000), TimerAction::None);
        assert_eq!(src.on_timer(210_001), TimerAction::Resend(vec![2, 3, 4]));
        assert_eq!(src.retransmits, 3);
        // doubled timeout: next expiry only 400ms later
        assert_eq!(src.on_timer(400_000), TimerAction::None);
        assert_eq!(src.on_timer(610_001), TimerAction::Resend(vec![2, 3, 4]));
        // cap holds at five seconds
        for _ in 0..8 {
            let d = src.rto_deadline.unwrap();
            src.on_timer(d);
        }
        let gap = src.rto_deadline.unwrap();
        src.on_timer(gap);
        assert_eq!(src.rto_deadline.unwrap() - gap, RTO_CAP_US);
    }

    #[test]
    fn syn_timeout_asks_for_resyn() {
        let mut src = TcpSource::new(3, 1400, 200_000);
        src.open(0);
        assert_eq!(src.on_timer(200_000), TimerAction::Resyn);
        assert_eq!(src.on_synack(300_000), vec![1, 2, 3]);
    }

    #[test]
    fn sink_acks_cumulatively_and_counts_holes() {
        let mut sink = TcpSink::new();
        assert_eq!(sink.on_data(1), 1);
        assert_eq!(sink.on_data(2), 2);
        // gap: 4 and 5 arrive above the in-order point
        assert_eq!(sink.on_data(4), 2);
        assert_eq!(sink.on_data(5), 2);
        assert_eq!(sink.ooo, 2);
        // duplicate of a held segment counts nothing
        assert_eq!(sink.on_data(4), 2);
        assert_eq!(sink.ooo, 2);
        // the missing segment releases the run
        assert_eq!(sink.on_data(3), 5);
        // stale duplicate below the in-order point changes nothing
        assert_eq!(sink.on_data(1), 5);
        assert_eq!(sink.ooo, 2);
    }

    #[test]
    fn cbr_schedule_is_exact() {
        // 1 Mbps of 1000 byte payloads is one packet per 8 ms
        let c = CbrClass {
            payload: 1000,
            bps: 1_000_000,
        };
        assert_eq!(c.emit_time_us(0, 0), 0);
        assert_eq!(c.emit_time_us(0, 1), 8_000);
        assert_eq!(c.emit_time_us(0, 124), 992_000);
        assert_eq!(c.emit_time_us(0, 125), 1_000_000);
        // 125 packets land inside the first second
        // a pps-defined class spaces evenly too
        let small = CbrClass::from_pps(160, 50);
        assert_eq!(small.bps, 64_000);
        assert_eq!(small.emit_time_us(0, 1), 20_000);
        assert_eq!(small.emit_time_us(0, 50), 1_000_000);
    }

    #[test]
    fn udp_sink_groups_by_payload_class() {
        let mut sink = UdpSink::default();
        sink.on_dgram(50_000, 1000, 0);
        sink.on_dgram(60_000, 1000, 20_000);
        sink.on_dgram(70_000, 160, 60_000);
        assert_eq!(sink.classes[&1000].count, 2);
        assert_eq!(sink.classes[&1000].mean_us(), 45_000);
        assert_eq!(sink.classes[&160].mean_us(), 10_000);
    }
}
