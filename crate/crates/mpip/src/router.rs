//! Packet-to-path dispatch.
//!
//! Throughput-first traffic is spread probabilistically: a path with
//! weight W is picked with probability W over the weight sum. A fixed
//! control loop compares each path's queuing estimate against the
//! session average and moves weights a constant step toward the less
//! queued paths, so dispatch shares converge on relative path capacity.
//! Responsiveness-first traffic pins to a path by smoothed-delay rank,
//! and protected traffic is duplicated on every path with receive-side
//! dedup.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;

use crate::tables::{PathRecord, SessionKey, WEIGHT_MAX, WEIGHT_MIN};
use crate::wire::NodeId;

/// weight step per adjustment round
pub const WEIGHT_STEP: u32 = 10;
/// adjustment round interval, ms
pub const WEIGHT_TICK_MS: u64 = 100;
/// how long a protected packet's identity is remembered, us
pub const DEDUP_WINDOW_US: u64 = 1_000_000;

/// Splits 1000 evenly over `n` paths, used when a path joins a session.
pub fn initial_weight(n: usize) -> u32 {
    if n == 0 {
        return WEIGHT_MAX;
    }
    (WEIGHT_MAX / n as u32).max(WEIGHT_MIN)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    /// weighted draw landed on this path
    Spread(u8),
    /// delay-rank rule pinned this path
    Pinned(u8),
    /// duplicate onto all of these paths
    Duplicate(Vec<u8>),
}

/// Weighted random pick over (path id, weight) pairs.
pub fn pick_weighted<R: Rng>(paths: &[(u8, u32)], rng: &mut R) -> Option<u8> {
    let total: u64 = paths.iter().map(|(_, w)| *w as u64).sum();
    if total == 0 {
        return None;
    }
    let mut draw = rng.gen_range(0..total);
    for (id, w) in paths {
        if draw < *w as u64 {
            return Some(*id);
        }
        draw -= *w as u64;
    }
    None
}

/// One weight adjustment round for a session. Every path's queuing
/// estimate is compared against a single snapshot of the session
/// average: paths at or below average gain `step`, the rest lose it,
/// clamped to the legal weight range. The comparison multiplies through
/// by the path count so no rounding of the average is involved.
pub fn adjust_weights<'a, I>(paths: I, step: u32)
where
    I: Iterator<Item = &'a mut PathRecord>,
{
    let paths: Vec<&'a mut PathRecord> = paths.collect();
    let n = paths.len() as i64;
    if n == 0 {
        return;
    }
    let q_sum: i64 = paths.iter().map(|p| p.q).sum();
    for p in paths {
        let w = if p.q * n <= q_sum {
            p.weight.saturating_add(step)
        } else {
            p.weight.saturating_sub(step)
        };
        p.weight = w.clamp(WEIGHT_MIN, WEIGHT_MAX);
    }
}

/// Path with the `rank`-th smallest smoothed delay (1 = smallest).
/// Paths without any feedback yet sort after measured ones; ties break
/// toward the lowest path id. A rank past the end clamps to the last.
pub fn responsive_path(paths: &[&PathRecord], rank: u8) -> Option<u8> {
    if paths.is_empty() {
        return None;
    }
    let mut order: Vec<(bool, i64, u8)> = paths
        .iter()
        .map(|p| (p.d_min.is_none(), p.d_rt, p.id))
        .collect();
    order.sort_unstable();
    let idx = (rank.max(1) as usize - 1).min(order.len() - 1);
    Some(order[idx].2)
}

/// Remembers protected packet identities for a sliding window so the
/// second copy of a duplicated packet can be discarded. The identity is
/// (sender node, session, control-block timestamp, payload digest).
#[derive(Debug, Default)]
pub struct DedupWindow {
    seen: BTreeSet<(NodeId, u16, u32, u64)>,
    order: VecDeque<(u64, (NodeId, u16, u32, u64))>,
}

impl DedupWindow {
    /// Returns true when this identity is new within the window.
    pub fn check(&mut self, now_us: u64, session: SessionKey, ts: u32, digest: u64) -> bool {
        while let Some((expiry, key)) = self.order.front().copied() {
            if expiry <= now_us {
                self.order.pop_front();
                self.seen.remove(&key);
            } else {
                break;
            }
        }
        let key = (session.0, session.1, ts, digest);
        if self.seen.contains(&key) {
            return false;
        }
        self.seen.insert(key);
        self.order.push_back((now_us + DEDUP_WINDOW_US, key));
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tables::PathTable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::net::Ipv4Addr;

    fn table_with_weights(weights: &[u32]) -> PathTable {
        let mut t = PathTable::default();
        for (i, w) in weights.iter().enumerate() {
            t.add(
                (7, 1),
                (Ipv4Addr::new(10, 0, i as u8, 1), 4000),
                (Ipv4Addr::new(10, 0, 0, 2), 80),
                *w,
            )
            .unwrap();
        }
        t
    }

    fn set_q(t: &mut PathTable, qs: &[i64]) {
        for (i, q) in qs.iter().enumerate() {
            t.get_mut(i as u8 + 1).unwrap().q = *q;
        }
    }

    fn weights(t: &PathTable) -> Vec<u32> {
        t.of_session((7, 1)).map(|p| p.weight).collect()
    }

    #[test]
    fn initial_weight_splits_evenly() {
        assert_eq!(initial_weight(1), 1000);
        assert_eq!(initial_weight(2), 500);
        assert_eq!(initial_weight(3), 333);
        assert_eq!(initial_weight(4), 250);
        // degenerate many-path case still yields a legal weight
        assert_eq!(initial_weight(2000), 1);
    }

    #[test]
    fn adjust_moves_step_toward_less_queued_path() {
        let mut t = table_with_weights(&[500, 500]);
        set_q(&mut t, &[5, 15]);
        adjust_weights(t.of_session_mut((7, 1)), WEIGHT_STEP);
        assert_eq!(weights(&t), vec![510, 490]);
    }

    #[test]
    fn adjust_caps_at_upper_bound() {
        let mut t = table_with_weights(&[995, 500]);
        set_q(&mut t, &[0, 30]);
        adjust_weights(t.of_session_mut((7, 1)), WEIGHT_STEP);
        assert_eq!(weights(&t), vec![1000, 490]);
    }

    #[test]
    fn adjust_floors_at_lower_bound() {
        let mut t = table_with_weights(&[5, 600]);
        set_q(&mut t, &[30, 0]);
        adjust_weights(t.of_session_mut((7, 1)), WEIGHT_STEP);
        assert_eq!(weights(&t), vec![1, 610]);
    }

    #[test]
    fn adjust_uses_one_average_snapshot() {
        // all equal q: everyone counts as at-or-below average and gains
        let mut t = table_with_weights(&[400, 400, 400]);
        set_q(&mut t, &[7, 7, 7]);
        adjust_weights(t.of_session_mut((7, 1)), WEIGHT_STEP);
        assert_eq!(weights(&t), vec![410, 410, 410]);
    }

    fn chi_square(observed: &[u64], expected: &[f64]) -> f64 {
        observed
            .iter()
            .zip(expected)
            .map(|(o, e)| {
                let d = *o as f64 - e;
                d * d / e
            })
            .sum()
    }

    #[test]
    fn spread_matches_weight_ratio_two_paths() {
        let paths = [(1u8, 1000u32), (2, 500)];
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut counts = [0u64; 2];
        const DRAWS: u64 = 10_000;
        for _ in 0..DRAWS {
            let id = pick_weighted(&paths, &mut rng).unwrap();
            counts[(id - 1) as usize] += 1;
        }
        let expected = [DRAWS as f64 * 2.0 / 3.0, DRAWS as f64 / 3.0];
        let stat = chi_square(&counts, &expected);
        // df = 1, p > 0.01 means the statistic stays under 6.635
        assert!(stat < 6.635, "chi-square {stat} too large, counts {counts:?}");
    }

    #[test]
    fn spread_matches_weight_ratio_four_paths() {
        let paths = [(1u8, 250u32), (2, 250), (3, 250), (4, 250)];
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut counts = [0u64; 4];
        const DRAWS: u64 = 10_000;
        for _ in 0..DRAWS {
            let id = pick_weighted(&paths, &mut rng).unwrap();
            counts[(id - 1) as usize] += 1;
        }
        let expected = [2500.0; 4];
        let stat = chi_square(&counts, &expected);
        // df = 3, p > 0.01 means the statistic stays under 11.345
        assert!(stat < 11.345, "chi-square {stat} too large, counts {counts:?}");
    }

    #[test]
    fn responsive_rank_orders_by_delay_then_id() {
        let mut t = table_with_weights(&[300, 300, 300]);
        for (id, d) in [(1u8, 80i64), (2, 50), (3, 50)] {
            let p = t.get_mut(id).unwrap();
            p.d_min = Some(d);
            p.d_rt = d;
        }
        let paths: Vec<&PathRecord> = t.of_session((7, 1)).collect();
        // tie at 50 ms breaks toward the lower path id
        assert_eq!(responsive_path(&paths, 1), Some(2));
        assert_eq!(responsive_path(&paths, 2), Some(3));
        assert_eq!(responsive_path(&paths, 3), Some(1));
        // rank past the end clamps to the slowest path
        assert_eq!(responsive_path(&paths, 9), Some(1));
    }

    #[test]
    fn responsive_prefers_measured_paths() {
        let mut t = table_with_weights(&[300, 300]);
        // path 1 never measured, path 2 has real feedback
        let p = t.get_mut(2).unwrap();
        p.d_min = Some(60);
        p.d_rt = 60;
        let paths: Vec<&PathRecord> = t.of_session((7, 1)).collect();
        assert_eq!(responsive_path(&paths, 1), Some(2));
        // nothing measured at all: fall back to the lowest id
        let t2 = table_with_weights(&[300, 300]);
        let paths2: Vec<&PathRecord> = t2.of_session((7, 1)).collect();
        assert_eq!(responsive_path(&paths2, 1), Some(1));
        assert_eq!(responsive_path(&[], 1), None);
    }

    #[test]
    fn dedup_discards_second_copy_within_window() {
        let mut w = DedupWindow::default();
        assert!(w.check(0, (7, 1), 1000, 99));
        assert!(!w.check(500_000, (7, 1), 1000, 99));
        // same timestamp but different payload digest is a new packet
        assert!(w.check(500_000, (7, 1), 1000, 100));
        // different session entirely
        assert!(w.check(500_000, (7, 2), 1000, 99));
    }

    #[test]
    fn dedup_forgets_after_window() {
        let mut w = DedupWindow::default();
        assert!(w.check(0, (7, 1), 1000, 99));
        assert!(!w.check(999_999, (7, 1), 1000, 99));
        // a full window later the identity has been pruned
        assert!(w.check(2_000_000, (7, 1), 1000, 99));
    }

    #[test]
    fn pick_weighted_handles_edge_weights() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert_eq!(pick_weighted(&[], &mut rng), None);
        assert_eq!(pick_weighted(&[(4, 1)], &mut rng), Some(4));
        for _ in 0..100 {
            let id = pick_weighted(&[(1, 1), (2, 1000)], &mut rng).unwrap();
            assert!(id == 1 || id == 2);
        }
    }
}
