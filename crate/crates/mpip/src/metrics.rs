//! Run output: periodic per-path samples, an event log, and end-of-run
//! session summaries. Everything lands in integer cells so repeated runs
//! diff cleanly.

use std::collections::BTreeMap;

/// One 100 ms sample for one (session, path) pair, sender side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricRow {
    pub time_ms: u64,
    pub session_id: u16,
    /// 0 means traffic that went out plain, before any path existed
    pub path_id: u8,
    pub goodput_bps: u64,
    pub weight: u32,
    /// -1 until the path has a delay measurement
    pub q_ms: i64,
    pub d_rt_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRow {
    pub time_ms: u64,
    pub event: &'static str,
    pub detail: String,
}

/// Streaming delay aggregate, microsecond resolution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DelayAgg {
    pub count: u64,
    pub sum_us: u64,
    pub max_us: u64,
}

impl DelayAgg {
    pub fn note(&mut self, delay_us: u64) {
        self.count += 1;
        self.sum_us = self.sum_us.saturating_add(delay_us);
        self.max_us = self.max_us.max(delay_us);
    }

    pub fn mean_us(&self) -> u64 {
        self.sum_us.checked_div(self.count).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSummary {
    pub session_id: u16,
    pub src: String,
    pub dst: String,
    pub proto: &'static str,
    pub bytes_delivered: u64,
    pub pkts_delivered: u64,
    pub ooo_transport: u64,
    pub retransmits: u64,
    pub queries_sent: u32,
    /// udp sessions: per payload size class
    pub class_delays: Vec<(usize, DelayAgg)>,
}

/// Packet bookkeeping; a run balances or something leaked.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Conservation {
    pub emitted: u64,
    pub delivered: u64,
    pub dropped: BTreeMap<&'static str, u64>,
    pub in_flight_at_end: u64,
}

impl Conservation {
    pub fn drop_total(&self) -> u64 {
        self.dropped.values().sum()
    }

    pub fn balanced(&self) -> bool {
        self.emitted == self.delivered + self.drop_total() + self.in_flight_at_end
    }
}

#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
    pub events: Vec<EventRow>,
    pub summaries: Vec<SessionSummary>,
    pub conservation: Conservation,
}

impl MetricsLog {
    pub fn to_metrics_csv(&self) -> String {
        let mut s = String::from("time_ms,session_id,path_id,goodput_bps,weight,q_ms,d_rt_ms\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.time_ms, r.session_id, r.path_id, r.goodput_bps, r.weight, r.q_ms, r.d_rt_ms
            ));
        }
        s
    }

    pub fn to_events_csv(&self) -> String {
        let mut s = String::from("time_ms,event,detail\n");
        for e in &self.events {
            debug_assert!(!e.detail.contains(','), "event detail must stay comma free");
            s.push_str(&format!("{},{},{}\n", e.time_ms, e.event, e.detail));
        }
        s
    }

    pub fn to_summary_text(&self) -> String {
        let mut s = String::new();
        for m in &self.summaries {
            s.push_str(&format!(
                "session {} {} {}->{}: {} bytes {} pkts ooo={} retx={} queries={}\n",
                m.session_id,
                m.proto,
                m.src,
                m.dst,
                m.bytes_delivered,
                m.pkts_delivered,
                m.ooo_transport,
                m.retransmits,
                m.queries_sent
            ));
            for (payload, agg) in &m.class_delays {
                s.push_str(&format!(
                    "  class {}B: {} pkts mean_delay={}us max={}us\n",
                    payload,
                    agg.count,
                    agg.mean_us(),
                    agg.max_us
                ));
            }
        }
        let c = &self.conservation;
        s.push_str(&format!(
            "packets: emitted={} delivered={} dropped={} in_flight={} balanced={}\n",
            c.emitted,
            c.delivered,
            c.drop_total(),
            c.in_flight_at_end,
            c.balanced()
        ));
        for (reason, n) in &c.dropped {
            s.push_str(&format!("  drop {}: {}\n", reason, n));
        }
        s
    }
}
