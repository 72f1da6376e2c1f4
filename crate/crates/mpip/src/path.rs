//! Path delay measurement and path establishment bookkeeping.
//!
//! The receiver of a path measures one-way delay per packet from the
//! sender timestamp in the control block, smooths it over a short
//! moving window, and feeds the smoothed value back. The sender turns
//! fed-back delays into a queuing estimate `q` by subtracting the
//! smallest delay ever seen on that path, which cancels the unknown
//! clock offset between the two hosts.

use std::collections::{BTreeMap, VecDeque};

use crate::tables::{PathRecord, Sock};

/// samples kept in the receiver-side moving average
pub const DELAY_WINDOW: usize = 10;

/// probe attempts per interface pair before giving up on it
pub const MAX_PROBE_TRIES: u32 = 3;

/// Signed ms between two wrapping 32-bit millisecond stamps taken from
/// different clocks. The result is meaningful only relative to other
/// samples of the same clock pair.
pub fn one_way_delay_ms(send_ts: u32, recv_ts: u32) -> i64 {
    recv_ts.wrapping_sub(send_ts) as i32 as i64
}

/// Moving average over the last `DELAY_WINDOW` raw samples, floored to
/// whole ms.
#[derive(Debug, Clone, Default)]
pub struct DelayEstimator {
    window: VecDeque<i64>,
}

impl DelayEstimator {
    pub fn push(&mut self, sample_ms: i64) -> i64 {
        if self.window.len() == DELAY_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(sample_ms);
        self.smoothed()
    }

    pub fn smoothed(&self) -> i64 {
        debug_assert!(!self.window.is_empty());
        let sum: i64 = self.window.iter().sum();
        sum.div_euclid(self.window.len() as i64)
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }
}

/// Applies one fed-back smoothed delay to the sender's path record.
pub fn update_delay_metrics(p: &mut PathRecord, d_rt: i64) {
    p.d_rt = d_rt;
    let d_min = match p.d_min {
        None => d_rt,
        Some(m) => m.min(d_rt),
    };
    p.d_min = Some(d_min);
    p.q = d_rt - d_min;
    p.q_max = p.q_max.max(p.q);
}

/// Receiver-side delay state for one peer: an estimator per remote path
/// id plus a rotation cursor so successive outgoing control blocks feed
/// back every path in turn.
#[derive(Debug, Default)]
pub struct PeerDelayStore {
    estimators: BTreeMap<u8, DelayEstimator>,
    rotation: usize,
}

impl PeerDelayStore {
    /// Ingests one delay sample for the peer's path and returns the new
    /// smoothed value.
    pub fn on_sample(&mut self, remote_path: u8, sample_ms: i64) -> i64 {
        self.estimators
            .entry(remote_path)
            .or_default()
            .push(sample_ms)
    }

    /// Next (remote path id, smoothed delay) pair to feed back, cycling
    /// through all measured paths.
    pub fn next_feedback(&mut self) -> Option<(u8, i64)> {
        if self.estimators.is_empty() {
            return None;
        }
        let idx = self.rotation % self.estimators.len();
        self.rotation = self.rotation.wrapping_add(1);
        self.estimators
            .iter()
            .nth(idx)
            .map(|(id, est)| (*id, est.smoothed()))
    }

    pub fn forget(&mut self, remote_path: u8) {
        self.estimators.remove(&remote_path);
    }

    pub fn clear(&mut self) {
        self.estimators.clear();
        self.rotation = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateState {
    /// still probing, carries attempts so far
    Probing(u32),
    /// a path exists for this pair
    Established,
    /// gave up: probe retries exhausted or NAT traversal failed
    Dead,
}

/// Interface-pair probe ledger for one session. Keys are
/// (local interface index, remote socket).
#[derive(Debug, Default)]
pub struct CandidateSet {
    rows: BTreeMap<(usize, Sock), CandidateState>,
}

impl CandidateSet {
    /// Registers a pair if unseen. New pairs start with zero attempts.
    pub fn ensure(&mut self, local_iface: usize, remote: Sock) {
        self.rows
            .entry((local_iface, remote))
            .or_insert(CandidateState::Probing(0));
    }

    /// Pairs that still want a probe. Each returned pair has its attempt
    /// count bumped; pairs reaching the retry cap flip to dead.
    pub fn take_due(&mut self) -> Vec<(usize, Sock)> {
        let mut due = Vec::new();
        for (key, state) in self.rows.iter_mut() {
            if let CandidateState::Probing(tries) = *state {
                if tries < MAX_PROBE_TRIES {
                    *state = CandidateState::Probing(tries + 1);
                    due.push(*key);
                } else {
                    *state = CandidateState::Dead;
                }
            }
        }
        due
    }

    pub fn mark_established(&mut self, local_iface: usize, remote: Sock) {
        self.rows
            .insert((local_iface, remote), CandidateState::Established);
    }

    pub fn mark_dead(&mut self, local_iface: usize, remote: Sock) {
        self.rows.insert((local_iface, remote), CandidateState::Dead);
    }

    pub fn state(&self, local_iface: usize, remote: Sock) -> Option<CandidateState> {
        self.rows.get(&(local_iface, remote)).copied()
    }

    /// Reopens probing for every pair on one local interface, e.g. after
    /// the interface came back up.
    pub fn reopen_iface(&mut self, local_iface: usize) {
        for (key, state) in self.rows.iter_mut() {
            if key.0 == local_iface {
                *state = CandidateState::Probing(0);
            }
        }
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tables::PathTable;
    use std::net::Ipv4Addr;

    fn record() -> (PathTable, u8) {
        let mut t = PathTable::default();
        let id = t
            .add(
                (7, 1),
                (Ipv4Addr::new(10, 0, 0, 1), 4000),
                (Ipv4Addr::new(10, 0, 0, 2), 80),
                500,
            )
            .unwrap();
        (t, id)
    }

    #[test]
    fn delay_wraps_around_timestamp_rollover() {
        assert_eq!(one_way_delay_ms(100, 130), 30);
        // send just before rollover, receive just after
        assert_eq!(one_way_delay_ms(u32::MAX - 5, 10), 16);
        // receiver clock behind sender gives a negative sample
        assert_eq!(one_way_delay_ms(130, 100), -30);
    }

    #[test]
    fn window_average_floors_and_slides() {
        let mut est = DelayEstimator::default();
        for (sample, want) in [(20, 20), (22, 21), (24, 22), (26, 23), (28, 24)] {
            assert_eq!(est.push(sample), want);
        }
        // fill past the window: the first samples fall out
        for _ in 0..DELAY_WINDOW {
            est.push(100);
        }
        assert_eq!(est.smoothed(), 100);
    }

    #[test]
    fn window_average_floors_negative_sums() {
        let mut est = DelayEstimator::default();
        est.push(-3);
        est.push(-4);
        // floor(-7/2) is -4, not -3
        assert_eq!(est.smoothed(), -4);
    }

    #[test]
    fn first_feedback_initializes_all_metrics() {
        let (mut t, id) = record();
        let p = t.get_mut(id).unwrap();
        update_delay_metrics(p, 50);
        assert_eq!(p.d_min, Some(50));
        assert_eq!(p.d_rt, 50);
        assert_eq!(p.q, 0);
        assert_eq!(p.q_max, 0);
    }

    #[test]
    fn queue_estimate_tracks_min_and_peak() {
        let (mut t, id) = record();
        let p = t.get_mut(id).unwrap();
        update_delay_metrics(p, 50);
        update_delay_metrics(p, 60);
        assert_eq!((p.q, p.q_max), (10, 10));
        // a smaller feedback shrinks q but the peak sticks
        update_delay_metrics(p, 58);
        assert_eq!((p.d_min, p.q, p.q_max), (Some(50), 8, 10));
        // a new floor resets q to zero through the min, not the peak
        update_delay_metrics(p, 45);
        assert_eq!((p.d_min, p.q, p.q_max), (Some(45), 0, 10));
    }

    #[test]
    fn constant_clock_offset_cancels_in_q() {
        let samples = [50i64, 60, 58, 45, 52, 70, 49];
        let mut qs_plain = Vec::new();
        let mut qs_shifted = Vec::new();
        for (qs, shift) in [(&mut qs_plain, 0i64), (&mut qs_shifted, 500)] {
            let (mut t, id) = record();
            let mut est = DelayEstimator::default();
            for s in samples {
                let smoothed = est.push(s + shift);
                let p = t.get_mut(id).unwrap();
                update_delay_metrics(p, smoothed);
                qs.push(p.q);
            }
        }
        assert_eq!(qs_plain, qs_shifted);
    }

    #[test]
    fn feedback_rotation_visits_every_path() {
        let mut store = PeerDelayStore::default();
        assert_eq!(store.next_feedback(), None);
        store.on_sample(1, 10);
        store.on_sample(2, 20);
        store.on_sample(3, 30);
        let mut seen = Vec::new();
        for _ in 0..6 {
            seen.push(store.next_feedback().unwrap().0);
        }
        assert_eq!(seen, vec![1, 2, 3, 1, 2, 3]);
        store.forget(2);
        let mut seen: Vec<u8> = (0..4).map(|_| store.next_feedback().unwrap().0).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![1, 1, 3, 3]);
    }

    #[test]
    fn candidates_cap_probe_attempts() {
        let mut set = CandidateSet::default();
        let remote = (Ipv4Addr::new(10, 0, 0, 2), 80);
        set.ensure(0, remote);
        for _ in 0..MAX_PROBE_TRIES {
            assert_eq!(set.take_due(), vec![(0, remote)]);
        }
        // cap reached: next sweep retires the pair instead of probing
        assert!(set.take_due().is_empty());
        assert_eq!(set.state(0, remote), Some(CandidateState::Dead));
        // reopening the interface starts the attempts over
        set.reopen_iface(0);
        assert_eq!(set.take_due(), vec![(0, remote)]);
    }

    #[test]
    fn established_candidates_stop_probing() {
        let mut set = CandidateSet::default();
        let remote = (Ipv4Addr::new(10, 0, 0, 2), 80);
        set.ensure(0, remote);
        set.ensure(1, remote);
        set.mark_established(0, remote);
        assert_eq!(set.take_due(), vec![(1, remote)]);
        set.mark_established(1, remote);
        assert!(set.take_due().is_empty());
    }
}
