//! Per-node protocol state: the five tables every multipath host keeps.
//!
//! * peer capability per destination socket, learned by query
//! * peer node id to address mappings, learned from observed traffic
//! * sessions, keyed by (peer node id, session id) instead of the 4-tuple
//! * paths, the unidirectional socket pairs a session may send on
//! * user routing rules, first match wins

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use crate::wire::NodeId;

pub type Sock = (Ipv4Addr, u16);

pub const WEIGHT_MIN: u32 = 1;
pub const WEIGHT_MAX: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Proto {
    Tcp,
    Udp,
}

impl std::fmt::Display for Proto {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Proto::Tcp => "tcp",
            Proto::Udp => "udp",
        })
    }
}

/// Whether a destination socket speaks the multipath extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Availability {
    #[default]
    Unknown,
    Confirmed,
    Unsupported,
}

#[derive(Debug, Default)]
pub struct AvailabilityTable {
    rows: BTreeMap<Sock, (Availability, u32)>,
}

impl AvailabilityTable {
    pub fn lookup(&self, dst: Sock) -> Availability {
        self.rows.get(&dst).map(|r| r.0).unwrap_or_default()
    }

    pub fn query_count(&self, dst: Sock) -> u32 {
        self.rows.get(&dst).map(|r| r.1).unwrap_or(0)
    }

    /// Counts one probe query toward `dst`. Once the count reaches
    /// `threshold` without a confirmation the peer is marked unsupported
    /// and stays that way for the rest of the run.
    pub fn note_query(&mut self, dst: Sock, threshold: u32) -> u32 {
        let row = self.rows.entry(dst).or_default();
        row.1 += 1;
        if row.1 >= threshold && row.0 == Availability::Unknown {
            row.0 = Availability::Unsupported;
        }
        row.1
    }

    /// A confirmation wins over any pending query count, but never
    /// resurrects a peer already marked unsupported.
    pub fn confirm(&mut self, dst: Sock) -> bool {
        let row = self.rows.entry(dst).or_default();
        if row.0 == Availability::Unsupported {
            return false;
        }
        let changed = row.0 != Availability::Confirmed;
        row.0 = Availability::Confirmed;
        changed
    }
}

/// Addresses known for each peer node: full sockets seen as packet
/// sources, plus bare addresses the peer advertised in its control
/// blocks (those get paired with a port only when a path is probed).
#[derive(Debug, Default)]
pub struct NodeAddrTable {
    sockets: BTreeMap<NodeId, BTreeSet<Sock>>,
    advertised: BTreeMap<NodeId, BTreeSet<Ipv4Addr>>,
}

impl NodeAddrTable {
    /// Records an observed source socket. Returns true if new.
    pub fn note_socket(&mut self, node: NodeId, sock: Sock) -> bool {
        self.sockets.entry(node).or_default().insert(sock)
    }

    pub fn note_advertised(&mut self, node: NodeId, addr: Ipv4Addr) -> bool {
        if addr.is_unspecified() {
            return false;
        }
        self.advertised.entry(node).or_default().insert(addr)
    }

    pub fn sockets_of(&self, node: NodeId) -> impl Iterator<Item = Sock> + '_ {
        self.sockets.get(&node).into_iter().flatten().copied()
    }

    pub fn advertised_of(&self, node: NodeId) -> impl Iterator<Item = Ipv4Addr> + '_ {
        self.advertised.get(&node).into_iter().flatten().copied()
    }

    pub fn node_by_sock(&self, sock: Sock) -> Option<NodeId> {
        self.sockets
            .iter()
            .find(|(_, socks)| socks.contains(&sock))
            .map(|(node, _)| *node)
    }

    /// Drops every socket and advertisement that uses `addr`. Called when
    /// a peer signals that an address went away.
    pub fn forget_addr(&mut self, node: NodeId, addr: Ipv4Addr) {
        if let Some(socks) = self.sockets.get_mut(&node) {
            socks.retain(|s| s.0 != addr);
        }
        if let Some(addrs) = self.advertised.get_mut(&node) {
            addrs.remove(&addr);
        }
    }
}

/// (peer node id, session id): both ends of a session share the same id,
/// so the peer's node id disambiguates sessions started by different hosts.
pub type SessionKey = (NodeId, u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FourTuple {
    pub src: Sock,
    pub dst: Sock,
}

#[derive(Debug, Clone)]
pub struct SessionRecord {
    orig: FourTuple,
    pub proto: Proto,
    pub next_seq: u64,
    pub update_time_us: u64,
}

impl SessionRecord {
    pub fn new(orig: FourTuple, proto: Proto, now_us: u64) -> Self {
        SessionRecord {
            orig,
            proto,
            next_seq: 1,
            update_time_us: now_us,
        }
    }

    /// The socket pair the transport opened. Fixed for the session's
    /// lifetime; path changes must never leak into it.
    pub fn orig(&self) -> FourTuple {
        self.orig
    }
}

#[derive(Debug, Default)]
pub struct SessionTable {
    rows: BTreeMap<SessionKey, SessionRecord>,
}

impl SessionTable {
    pub fn insert(&mut self, key: SessionKey, rec: SessionRecord) {
        self.rows.insert(key, rec);
    }

    pub fn get(&self, key: SessionKey) -> Option<&SessionRecord> {
        self.rows.get(&key)
    }

    pub fn get_mut(&mut self, key: SessionKey) -> Option<&mut SessionRecord> {
        self.rows.get_mut(&key)
    }

    pub fn touch(&mut self, key: SessionKey, now_us: u64) {
        if let Some(rec) = self.rows.get_mut(&key) {
            rec.update_time_us = rec.update_time_us.max(now_us);
        }
    }

    pub fn by_orig(&self, orig: FourTuple) -> Option<SessionKey> {
        self.rows
            .iter()
            .find(|(_, r)| r.orig == orig)
            .map(|(k, _)| *k)
    }

    pub fn keys(&self) -> impl Iterator<Item = SessionKey> + '_ {
        self.rows.keys().copied()
    }

    /// Removes sessions idle longer than `ttl_us` and returns their keys.
    /// A ttl of zero disables expiry.
    pub fn expire(&mut self, now_us: u64, ttl_us: u64) -> Vec<SessionKey> {
        if ttl_us == 0 {
            return Vec::new();
        }
        let dead: Vec<SessionKey> = self
            .rows
            .iter()
            .filter(|(_, r)| now_us.saturating_sub(r.update_time_us) > ttl_us)
            .map(|(k, _)| *k)
            .collect();
        for k in &dead {
            self.rows.remove(k);
        }
        dead
    }
}

#[derive(Debug, Clone)]
pub struct PathRecord {
    pub id: u8,
    pub session: SessionKey,
    pub src: Sock,
    pub dst: Sock,
    /// smallest smoothed delay ever fed back for this path; the queuing
    /// estimate is measured against it, so clock offset cancels out
    pub d_min: Option<i64>,
    /// latest smoothed one-way delay feedback, ms
    pub d_rt: i64,
    /// queuing delay estimate, ms: d_rt relative to d_min
    pub q: i64,
    pub q_max: i64,
    pub weight: u32,
    /// set when NAT traversal on this path failed for good
    pub nat_blocked: bool,
}

#[derive(Debug, Default)]
pub struct PathTable {
    rows: BTreeMap<u8, PathRecord>,
    next_id: u8,
}

impl PathTable {
    /// Adds a path with the given initial weight. Ids start at 1 and are
    /// never reused within a run; id 0 stays reserved as "no path".
    pub fn add(
        &mut self,
        session: SessionKey,
        src: Sock,
        dst: Sock,
        weight: u32,
    ) -> Option<u8> {
        if self.next_id == u8::MAX {
            return None;
        }
        self.next_id += 1;
        let id = self.next_id;
        self.rows.insert(
            id,
            PathRecord {
                id,
                session,
                src,
                dst,
                d_min: None,
                d_rt: 0,
                q: 0,
                q_max: 0,
                weight: weight.clamp(WEIGHT_MIN, WEIGHT_MAX),
                nat_blocked: false,
            },
        );
        Some(id)
    }

    pub fn get(&self, id: u8) -> Option<&PathRecord> {
        self.rows.get(&id)
    }

    pub fn get_mut(&mut self, id: u8) -> Option<&mut PathRecord> {
        self.rows.get_mut(&id)
    }

    pub fn of_session(&self, key: SessionKey) -> impl Iterator<Item = &PathRecord> {
        self.rows.values().filter(move |p| p.session == key)
    }

    pub fn of_session_mut(
        &mut self,
        key: SessionKey,
    ) -> impl Iterator<Item = &mut PathRecord> {
        self.rows.values_mut().filter(move |p| p.session == key)
    }

    pub fn find(&self, key: SessionKey, src: Sock, dst: Sock) -> Option<u8> {
        self.rows
            .values()
            .find(|p| p.session == key && p.src == src && p.dst == dst)
            .map(|p| p.id)
    }

    pub fn remove(&mut self, id: u8) -> Option<PathRecord> {
        self.rows.remove(&id)
    }

    /// Removes every path of the session except `keep`. Returns the
    /// removed ids in ascending order.
    pub fn retain_only(&mut self, key: SessionKey, keep: u8) -> Vec<u8> {
        let gone: Vec<u8> = self
            .rows
            .values()
            .filter(|p| p.session == key && p.id != keep)
            .map(|p| p.id)
            .collect();
        for id in &gone {
            self.rows.remove(id);
        }
        gone
    }

    pub fn remove_session(&mut self, key: SessionKey) -> Vec<u8> {
        let gone: Vec<u8> = self
            .rows
            .values()
            .filter(|p| p.session == key)
            .map(|p| p.id)
            .collect();
        for id in &gone {
            self.rows.remove(id);
        }
        gone
    }
}

/// What a matching rule asks the router to do with a packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Priority {
    /// spread over all paths by weight (token `Tf`)
    Throughput,
    /// pin to one path by delay rank: 1 = lowest smoothed delay
    /// (token `Rf`), 2 = second lowest (token `Rf2`), and so on
    Responsive(u8),
    /// duplicate on every path and dedup at the receiver (token `Pf`)
    Protected,
}

#[derive(Debug, Clone, Copy)]
pub struct RoutingRule {
    /// None matches any address
    pub dst_addr: Option<Ipv4Addr>,
    pub dst_port: Option<u16>,
    pub proto: Option<Proto>,
    /// inclusive payload length range; max None means unbounded
    pub min_len: u32,
    pub max_len: Option<u32>,
    pub priority: Priority,
}

impl RoutingRule {
    fn matches(&self, dst: Sock, proto: Proto, payload_len: u32) -> bool {
        self.dst_addr.is_none_or(|a| a == dst.0)
            && self.dst_port.is_none_or(|p| p == dst.1)
            && self.proto.is_none_or(|pr| pr == proto)
            && payload_len >= self.min_len
            && self.max_len.is_none_or(|m| payload_len <= m)
    }
}

#[derive(Debug, Default)]
pub struct RuleTable {
    rules: Vec<RoutingRule>,
}

impl RuleTable {
    pub fn push(&mut self, rule: RoutingRule) {
        self.rules.push(rule);
    }

    /// First matching rule wins; no match means throughput-first.
    pub fn priority_for(&self, dst: Sock, proto: Proto, payload_len: u32) -> Priority {
        self.rules
            .iter()
            .find(|r| r.matches(dst, proto, payload_len))
            .map(|r| r.priority)
            .unwrap_or(Priority::Throughput)
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sock(a: [u8; 4], p: u16) -> Sock {
        (Ipv4Addr::new(a[0], a[1], a[2], a[3]), p)
    }

    #[test]
    fn availability_starts_unknown_and_confirms() {
        let mut t = AvailabilityTable::default();
        let dst = sock([10, 0, 0, 2], 80);
        assert_eq!(t.lookup(dst), Availability::Unknown);
        t.note_query(dst, 10);
        assert_eq!(t.lookup(dst), Availability::Unknown);
        assert!(t.confirm(dst));
        assert_eq!(t.lookup(dst), Availability::Confirmed);
        // second confirm is a no-op
        assert!(!t.confirm(dst));
    }

    #[test]
    fn availability_gives_up_at_threshold() {
        let mut t = AvailabilityTable::default();
        let dst = sock([10, 0, 0, 2], 80);
        for i in 1..10 {
            assert_eq!(t.note_query(dst, 10), i);
            assert_eq!(t.lookup(dst), Availability::Unknown);
        }
        assert_eq!(t.note_query(dst, 10), 10);
        assert_eq!(t.lookup(dst), Availability::Unsupported);
        // a late confirmation must not flip it back
        assert!(!t.confirm(dst));
        assert_eq!(t.lookup(dst), Availability::Unsupported);
    }

    #[test]
    fn node_addrs_dedup_and_forget() {
        let mut t = NodeAddrTable::default();
        assert!(t.note_socket(7, sock([10, 0, 0, 2], 80)));
        assert!(!t.note_socket(7, sock([10, 0, 0, 2], 80)));
        assert!(t.note_socket(7, sock([10, 0, 1, 2], 80)));
        assert!(t.note_advertised(7, Ipv4Addr::new(10, 0, 1, 2)));
        assert!(!t.note_advertised(7, Ipv4Addr::new(0, 0, 0, 0)));
        assert_eq!(t.sockets_of(7).count(), 2);
        assert_eq!(t.node_by_sock(sock([10, 0, 1, 2], 80)), Some(7));
        t.forget_addr(7, Ipv4Addr::new(10, 0, 1, 2));
        assert_eq!(t.sockets_of(7).count(), 1);
        assert_eq!(t.advertised_of(7).count(), 0);
    }

    #[test]
    fn session_expiry_by_ttl() {
        let mut t = SessionTable::default();
        let orig = FourTuple {
            src: sock([10, 0, 0, 1], 4000),
            dst: sock([10, 0, 0, 2], 80),
        };
        t.insert((7, 1), SessionRecord::new(orig, Proto::Tcp, 0));
        t.insert((7, 2), SessionRecord::new(orig, Proto::Tcp, 5_000_000));
        assert!(t.expire(4_000_000, 60_000_000).is_empty());
        let dead = t.expire(61_000_000, 60_000_000);
        assert_eq!(dead, vec![(7, 1)]);
        assert!(t.get((7, 1)).is_none());
        assert!(t.get((7, 2)).is_some());
        // ttl 0 means never expire
        assert!(t.expire(u64::MAX, 0).is_empty());
        assert!(t.get((7, 2)).is_some());
    }

    #[test]
    fn touch_never_moves_update_time_backwards() {
        let mut t = SessionTable::default();
        let orig = FourTuple {
            src: sock([10, 0, 0, 1], 4000),
            dst: sock([10, 0, 0, 2], 80),
        };
        t.insert((7, 1), SessionRecord::new(orig, Proto::Udp, 100));
        t.touch((7, 1), 500);
        t.touch((7, 1), 300);
        assert_eq!(t.get((7, 1)).unwrap().update_time_us, 500);
    }

    #[test]
    fn path_ids_unique_and_start_at_one() {
        let mut t = PathTable::default();
        let key = (7, 1);
        let a = t
            .add(key, sock([10, 0, 0, 1], 4000), sock([10, 0, 0, 2], 80), 500)
            .unwrap();
        let b = t
            .add(key, sock([10, 0, 1, 1], 4000), sock([10, 0, 0, 2], 80), 500)
            .unwrap();
        assert_eq!(a, 1);
        assert_eq!(b, 2);
        t.remove(a);
        let c = t
            .add(key, sock([10, 0, 0, 1], 4000), sock([10, 0, 0, 2], 80), 500)
            .unwrap();
        // freed ids are not recycled
        assert_eq!(c, 3);
        assert_eq!(t.of_session(key).count(), 2);
    }

    #[test]
    fn weights_clamped_into_bounds() {
        let mut t = PathTable::default();
        let id = t
            .add((7, 1), sock([10, 0, 0, 1], 1), sock([10, 0, 0, 2], 2), 0)
            .unwrap();
        assert_eq!(t.get(id).unwrap().weight, WEIGHT_MIN);
        let id2 = t
            .add((7, 1), sock([10, 0, 1, 1], 1), sock([10, 0, 0, 2], 2), 4000)
            .unwrap();
        assert_eq!(t.get(id2).unwrap().weight, WEIGHT_MAX);
    }

    #[test]
    fn retain_only_keeps_the_one_path() {
        let mut t = PathTable::default();
        let key = (7, 1);
        for i in 0..4 {
            t.add(key, sock([10, 0, i, 1], 1), sock([10, 0, 0, 2], 2), 250)
                .unwrap();
        }
        let gone = t.retain_only(key, 3);
        assert_eq!(gone, vec![1, 2, 4]);
        assert_eq!(t.of_session(key).count(), 1);
        assert_eq!(t.of_session(key).next().unwrap().id, 3);
    }

    #[test]
    fn rules_first_match_wins() {
        let mut t = RuleTable::default();
        // small interactive packets to port 22 want the fastest path
        t.push(RoutingRule {
            dst_addr: None,
            dst_port: Some(22),
            proto: Some(Proto::Tcp),
            min_len: 0,
            max_len: Some(200),
            priority: Priority::Responsive(1),
        });
        // mid-size chat traffic to one host spreads over all paths
        t.push(RoutingRule {
            dst_addr: Some(Ipv4Addr::new(192, 168, 1, 2)),
            dst_port: Some(5222),
            proto: Some(Proto::Udp),
            min_len: 200,
            max_len: None,
            priority: Priority::Throughput,
        });

        let ssh = sock([192, 168, 1, 9], 22);
        assert_eq!(
            t.priority_for(ssh, Proto::Tcp, 150),
            Priority::Responsive(1)
        );
        // payload above the range falls through to the default
        assert_eq!(t.priority_for(ssh, Proto::Tcp, 300), Priority::Throughput);
        // boundary values are inclusive
        assert_eq!(
            t.priority_for(ssh, Proto::Tcp, 200),
            Priority::Responsive(1)
        );

        let chat = sock([192, 168, 1, 2], 5222);
        assert_eq!(t.priority_for(chat, Proto::Udp, 200), Priority::Throughput);
        assert_eq!(t.priority_for(chat, Proto::Udp, 64), Priority::Throughput);

        // wrong protocol never matches the ssh rule
        assert_eq!(t.priority_for(ssh, Proto::Udp, 100), Priority::Throughput);
    }

    #[test]
    fn empty_rule_table_defaults_to_throughput() {
        let t = RuleTable::default();
        assert_eq!(
            t.priority_for(sock([1, 2, 3, 4], 5), Proto::Udp, 1000),
            Priority::Throughput
        );
    }
}
