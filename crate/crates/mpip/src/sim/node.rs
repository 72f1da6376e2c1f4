//! The per-node engine: owns the protocol tables and the transport
//! endpoints, and turns application sends, received packets, and timer
//! ticks into outgoing packets.
//!
//! A node that has the extension disabled behaves as a plain host: it
//! never emits control blocks and ignores any it receives.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use rand_chacha::ChaCha12Rng;

use crate::handshake::{
    learn_from_cm, note_query_sent, on_confirm_received, on_query_received, send_mode, SendMode,
};
use crate::path::{one_way_delay_ms, CandidateSet, PeerDelayStore};
use crate::router::{
    adjust_weights, initial_weight, pick_weighted, responsive_path, DedupWindow,
};
use crate::tables::{
    AvailabilityTable, FourTuple, NodeAddrTable, PathTable, Priority, Proto, RoutingRule,
    RuleTable, SessionKey, SessionRecord, SessionTable, Sock,
};
use crate::transport::{FakeHandshake, HsStatus, ReorderBuffer};
use crate::wire::{
    ControlMessage, NodeId, FLAG_ENABLE, FLAG_ENABLED, FLAG_HEARTBEAT, FLAG_HS, FLAG_IP_CHANGE,
    FLAG_PROTECTED,
};

use super::packet::{Seg, SimPacket};
use super::traffic::{TcpSink, TcpSource, TimerAction, UdpSink};

/// minimum spacing between capability queries toward one destination,
/// so a capable peer's confirmation can arrive before the budget burns
pub const QUERY_SPACING_US: u64 = 20_000;

/// candidate probe sweep period
pub const PROBE_TICK_US: u64 = 200_000;

/// fake handshake reply wait per attempt
pub const FAKE_HS_RETRY_US: u64 = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NatMode {
    Off,
    /// synthetic SYN exchange opens middlebox flow state per path
    FakeHandshake,
    /// tcp packets ride an outer udp header on every path
    UdpWrap,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub node_id: NodeId,
    pub name: String,
    pub mpip_enabled: bool,
    pub query_threshold: u32,
    pub heartbeat_us: u64,
    pub reorder_on: bool,
    pub nat_mode: NatMode,
    pub session_ttl_us: u64,
    pub rto_us: u64,
    pub weight_step: u32,
}

/// Application endpoint attached to one session side.
#[derive(Debug)]
pub enum App {
    BulkOut(TcpSource),
    BulkIn(TcpSink),
    CbrOut,
    CbrIn(UdpSink),
}

#[derive(Debug)]
pub struct SessionCtl {
    pub app: App,
    reorder: Option<ReorderBuffer<()>>,
    /// first-copy filter: tcp segment seqs or udp origins already seen
    seen: BTreeSet<u64>,
    /// datagrams that arrived behind a later one
    pub udp_ooo: u64,
    max_origin: u64,
    pub delay: PeerDelayStore,
    pub candidates: CandidateSet,
    /// interface pair to the path id probing it; ids survive re-probes
    cand_path: BTreeMap<(usize, Sock), u8>,
    last_send_us: u64,
    ip_change_pending: bool,
    addr_rot: usize,
}

/// One first-copy application payload arrival, for goodput accounting.
#[derive(Debug, Clone)]
pub struct Arrival {
    pub key: SessionKey,
    pub path_id: u8,
    pub bytes: u64,
    pub created_us: u64,
}

#[derive(Debug, Default)]
pub struct EngineOut {
    /// (local interface index, packet)
    pub pkts: Vec<(usize, SimPacket)>,
    pub arrivals: Vec<Arrival>,
}

#[derive(Debug)]
pub struct Engine {
    pub cfg: EngineConfig,
    pub ifaces: Vec<Ipv4Addr>,
    pub iface_up: Vec<bool>,
    pub avail: AvailabilityTable,
    pub addrs: NodeAddrTable,
    pub sessions: SessionTable,
    pub paths: PathTable,
    pub rules: RuleTable,
    pub dedup: DedupWindow,
    pub dedupe_discards: u64,
    ctl: BTreeMap<SessionKey, SessionCtl>,
    fake_hs: BTreeMap<(SessionKey, usize, Sock), FakeHandshake>,
    rng: ChaCha12Rng,
    last_query_us: BTreeMap<Sock, u64>,
    origin_seq: u64,
    events: Vec<(&'static str, String)>,
}

fn now_ms(now_us: u64) -> u32 {
    (now_us / 1000) as u32
}

/// Builds a control block: timestamp, one rotating delay feedback pair,
/// one rotating advertised address.
fn make_cm(
    node_id: NodeId,
    sid: u16,
    path_id: u8,
    flags: u8,
    now_us: u64,
    ctl: &mut SessionCtl,
    ups: &[Ipv4Addr],
) -> ControlMessage {
    let mut cm = ControlMessage::new(node_id, sid);
    cm.flags = flags;
    cm.path_id = path_id;
    cm.timestamp_ms = now_ms(now_us);
    if let Some((f, d)) = ctl.delay.next_feedback() {
        cm.feedback_path_id = f;
        cm.path_delay_ms = d.clamp(i32::MIN as i64, i32::MAX as i64) as i32;
    }
    cm.addr_count = ups.len() as u8;
    if !ups.is_empty() {
        cm.addr_slot = ups[ctl.addr_rot % ups.len()];
        ctl.addr_rot += 1;
    }
    cm
}

impl Engine {
    pub fn new(cfg: EngineConfig, ifaces: Vec<Ipv4Addr>, rng: ChaCha12Rng) -> Self {
        let n = ifaces.len();
        Engine {
            cfg,
            ifaces,
            iface_up: vec![true; n],
            avail: AvailabilityTable::default(),
            addrs: NodeAddrTable::default(),
            sessions: SessionTable::default(),
            paths: PathTable::default(),
            rules: RuleTable::default(),
            dedup: DedupWindow::default(),
            dedupe_discards: 0,
            ctl: BTreeMap::new(),
            fake_hs: BTreeMap::new(),
            rng,
            last_query_us: BTreeMap::new(),
            origin_seq: 0,
            events: Vec::new(),
        }
    }

    pub fn take_events(&mut self) -> Vec<(&'static str, String)> {
        std::mem::take(&mut self.events)
    }

    fn event(&mut self, name: &'static str, detail: String) {
        self.events.push((name, detail));
    }

    pub fn iface_of(&self, addr: Ipv4Addr) -> Option<usize> {
        self.ifaces.iter().position(|a| *a == addr)
    }

    fn up_iface_addrs(&self) -> Vec<Ipv4Addr> {
        self.ifaces
            .iter()
            .zip(&self.iface_up)
            .filter(|(_, up)| **up)
            .map(|(a, _)| *a)
            .collect()
    }

    pub fn add_session(&mut self, key: SessionKey, orig: FourTuple, proto: Proto, app: App, now_us: u64) {
        let reorder = match (&app, self.cfg.reorder_on) {
            (App::BulkIn(_), true) => Some(ReorderBuffer::new(1)),
            _ => None,
        };
        self.sessions.insert(key, SessionRecord::new(orig, proto, now_us));
        self.ctl.insert(
            key,
            SessionCtl {
                app,
                reorder,
                seen: BTreeSet::new(),
                udp_ooo: 0,
                max_origin: 0,
                delay: PeerDelayStore::default(),
                candidates: CandidateSet::default(),
                cand_path: BTreeMap::new(),
                last_send_us: now_us,
                ip_change_pending: false,
                addr_rot: 0,
            },
        );
    }

    pub fn session_ctl(&self, key: SessionKey) -> Option<&SessionCtl> {
        self.ctl.get(&key)
    }

    pub fn add_rule(&mut self, rule: RoutingRule) {
        self.rules.push(rule);
    }

    /// Paths the router may choose from: not blocked, and either
    /// measured or the original socket pair.
    pub fn usable_path_ids(&self, key: SessionKey) -> Vec<u8> {
        let Some(sess) = self.sessions.get(key) else {
            return Vec::new();
        };
        let orig = sess.orig();
        self.paths
            .of_session(key)
            .filter(|p| {
                !p.nat_blocked
                    && (p.d_min.is_some() || (p.src == orig.src && p.dst == orig.dst))
            })
            .map(|p| p.id)
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn plain_packet(
        &self,
        orig: FourTuple,
        proto: Proto,
        seg: Seg,
        payload_len: u32,
        origin: u64,
        created_us: u64,
        cm: Option<ControlMessage>,
    ) -> (usize, SimPacket) {
        let iface = self.iface_of(orig.src.0).unwrap_or(0);
        (
            iface,
            SimPacket {
                uid: 0,
                origin,
                src: orig.src,
                dst: orig.dst,
                proto,
                seg,
                payload_len,
                cm,
                wrapped: false,
                created_us,
            },
        )
    }

    /// Routes one application or transport packet of a session.
    #[allow(clippy::too_many_arguments)]
    fn dispatch(
        &mut self,
        now: u64,
        key: SessionKey,
        seg: Seg,
        payload_len: u32,
        origin: u64,
        created_us: u64,
        out: &mut EngineOut,
    ) {
        let Some(sess) = self.sessions.get(key) else {
            return;
        };
        let orig = sess.orig();
        let proto = sess.proto;
        self.sessions.touch(key, now);
        if let Some(ctl) = self.ctl.get_mut(&key) {
            ctl.last_send_us = now;
        }
        let mode = if self.cfg.mpip_enabled {
            send_mode(self.avail.lookup(orig.dst))
        } else {
            SendMode::Plain
        };
        match mode {
            SendMode::Plain => {
                out.pkts
                    .push(self.plain_packet(orig, proto, seg, payload_len, origin, created_us, None));
            }
            SendMode::PlainWithQuery => {
                out.pkts
                    .push(self.plain_packet(orig, proto, seg, payload_len, origin, created_us, None));
                let due = self
                    .last_query_us
                    .get(&orig.dst)
                    .is_none_or(|t| now >= t + QUERY_SPACING_US);
                if due && self.avail.query_count(orig.dst) < self.cfg.query_threshold {
                    self.last_query_us.insert(orig.dst, now);
                    let ups = self.up_iface_addrs();
                    let node_id = self.cfg.node_id;
                    let ctl = self.ctl.get_mut(&key).unwrap();
                    let cm = make_cm(node_id, key.1, 0, FLAG_ENABLE | FLAG_HS, now, ctl, &ups);
                    let q = note_query_sent(&mut self.avail, orig.dst, self.cfg.query_threshold);
                    self.event("handshake_query", format!("sid={} n={}", key.1, q.count));
                    if q.gave_up {
                        self.event("availability_false", format!("sid={} dst={}", key.1, orig.dst.0));
                    }
                    out.pkts.push(self.plain_packet(
                        orig,
                        proto,
                        seg,
                        payload_len,
                        origin,
                        created_us,
                        Some(cm),
                    ));
                }
            }
            SendMode::Multipath => {
                self.dispatch_multipath(now, key, orig, proto, seg, payload_len, origin, created_us, out)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn dispatch_multipath(
        &mut self,
        now: u64,
        key: SessionKey,
        orig: FourTuple,
        proto: Proto,
        seg: Seg,
        payload_len: u32,
        origin: u64,
        created_us: u64,
        out: &mut EngineOut,
    ) {
        let usable = self.usable_path_ids(key);
        let ups = self.up_iface_addrs();
        let node_id = self.cfg.node_id;
        let pending = self
            .ctl
            .get(&key)
            .map(|c| c.ip_change_pending)
            .unwrap_or(false);
        if usable.is_empty() {
            // no live path: fall back to the original socket pair, and
            // let a pending address-change note ride it
            let cm = if pending {
                let ctl = self.ctl.get_mut(&key).unwrap();
                ctl.ip_change_pending = false;
                let cm = make_cm(node_id, key.1, 0, FLAG_ENABLED | FLAG_IP_CHANGE, now, ctl, &ups);
                self.event("ip_change_notify", format!("sid={} path=0", key.1));
                Some(cm)
            } else {
                None
            };
            out.pkts
                .push(self.plain_packet(orig, proto, seg, payload_len, origin, created_us, cm));
            return;
        }
        let pri = self.rules.priority_for(orig.dst, proto, payload_len);
        let chosen: Vec<u8> = match pri {
            Priority::Throughput => {
                let pairs: Vec<(u8, u32)> = usable
                    .iter()
                    .map(|id| (*id, self.paths.get(*id).unwrap().weight))
                    .collect();
                pick_weighted(&pairs, &mut self.rng).into_iter().collect()
            }
            Priority::Responsive(rank) => {
                let refs: Vec<&crate::tables::PathRecord> =
                    usable.iter().map(|id| self.paths.get(*id).unwrap()).collect();
                responsive_path(&refs, rank).into_iter().collect()
            }
            Priority::Protected => usable.clone(),
        };
        let protected = matches!(pri, Priority::Protected);
        let wrap = self.cfg.nat_mode == NatMode::UdpWrap && proto == Proto::Tcp;
        for (i, pid) in chosen.iter().enumerate() {
            let p = self.paths.get(*pid).unwrap();
            let (src, dst) = (p.src, p.dst);
            let mut flags = FLAG_ENABLED;
            if protected {
                flags |= FLAG_PROTECTED;
            }
            if pending && i == 0 {
                flags |= FLAG_IP_CHANGE;
            }
            let ctl = self.ctl.get_mut(&key).unwrap();
            let cm = make_cm(node_id, key.1, *pid, flags, now, ctl, &ups);
            let iface = self.iface_of(src.0).unwrap_or(0);
            out.pkts.push((
                iface,
                SimPacket {
                    uid: 0,
                    origin,
                    src,
                    dst,
                    proto,
                    seg,
                    payload_len,
                    cm: Some(cm),
                    wrapped: wrap,
                    created_us,
                },
            ));
        }
        if pending {
            let keep = chosen[0];
            let ctl = self.ctl.get_mut(&key).unwrap();
            ctl.ip_change_pending = false;
            self.event("ip_change_notify", format!("sid={} path={}", key.1, keep));
            let kept_pair = self.paths.get(keep).map(|p| (self.iface_of(p.src.0), p.dst));
            for gone in self.paths.retain_only(key, keep) {
                self.event("path_remove", format!("sid={} path={} reason=ip_change", key.1, gone));
            }
            let ctl = self.ctl.get_mut(&key).unwrap();
            ctl.candidates.clear();
            ctl.cand_path.retain(|_, id| *id == keep);
            if let Some((Some(ifc), dst)) = kept_pair {
                ctl.candidates.mark_established(ifc, dst);
            }
        }
    }

    /// Transport wants a connection: emit the opening syn, plain.
    pub fn app_open(&mut self, now: u64, key: SessionKey) -> EngineOut {
        let mut out = EngineOut::default();
        let Some(sess) = self.sessions.get(key) else {
            return out;
        };
        let orig = sess.orig();
        let proto = sess.proto;
        if let Some(ctl) = self.ctl.get_mut(&key) {
            if let App::BulkOut(src) = &mut ctl.app {
                src.open(now);
                ctl.last_send_us = now;
            }
        }
        out.pkts
            .push(self.plain_packet(orig, proto, Seg::Syn, 0, 0, now, None));
        out
    }

    /// Constant-rate source emits one datagram.
    pub fn app_dgram(&mut self, now: u64, key: SessionKey, payload_len: u32) -> EngineOut {
        let mut out = EngineOut::default();
        self.origin_seq += 1;
        let origin = self.origin_seq;
        self.dispatch(now, key, Seg::Dgram, payload_len, origin, now, &mut out);
        out
    }

    fn send_segments(&mut self, now: u64, key: SessionKey, seqs: &[u64], out: &mut EngineOut) {
        let payload = match self.ctl.get(&key).map(|c| &c.app) {
            Some(App::BulkOut(src)) => src.seg_payload as u32,
            _ => return,
        };
        for seq in seqs {
            self.dispatch(now, key, Seg::Data { seq: *seq }, payload, *seq, now, out);
        }
    }

    pub fn receive(&mut self, now: u64, iface: usize, pkt: SimPacket) -> EngineOut {
        let mut out = EngineOut::default();
        if !self.cfg.mpip_enabled {
            self.receive_plain(now, pkt, &mut out);
            return out;
        }
        let pkt = if pkt.wrapped { pkt.unwrap_udp() } else { pkt };
        let mut discard_payload = false;
        let mut arrival_path = 0u8;
        let mut session_key: Option<SessionKey> = None;

        if let Some(cm) = pkt.cm {
            let peer = cm.node_id;
            let key = (peer, cm.session_id);
            learn_from_cm(&mut self.addrs, peer, pkt.src, &cm);
            if let Some((orig, proto)) = self.sessions.get(key).map(|s| (s.orig(), s.proto)) {
                session_key = Some(key);
                self.sessions.touch(key, now);

                if cm.has(FLAG_HS) && !cm.has(FLAG_ENABLED) {
                    // enable query: the payload duplicates the plain
                    // copy, and the peer wants a confirmation back; keep
                    // answering while it keeps asking
                    discard_payload = true;
                    if on_query_received(&mut self.avail, orig.dst) {
                        self.confirmed_peer(key, orig);
                    }
                    let ups = self.up_iface_addrs();
                    let node_id = self.cfg.node_id;
                    let ctl = self.ctl.get_mut(&key).unwrap();
                    let reply = make_cm(node_id, key.1, 0, FLAG_ENABLED, now, ctl, &ups);
                    out.pkts.push(self.plain_packet(
                        orig,
                        proto,
                        Seg::Note,
                        0,
                        0,
                        now,
                        Some(reply),
                    ));
                }
                if cm.has(FLAG_ENABLED) && on_confirm_received(&mut self.avail, orig.dst) {
                    self.confirmed_peer(key, orig);
                }
                if cm.path_id != 0 {
                    arrival_path = cm.path_id;
                    let sample = one_way_delay_ms(cm.timestamp_ms, now_ms(now));
                    let ctl = self.ctl.get_mut(&key).unwrap();
                    ctl.delay.on_sample(cm.path_id, sample);
                    // sending back toward a new visible socket needs a
                    // path of our own
                    let local = (self.ifaces[iface], orig.src.1);
                    if self.paths.find(key, local, pkt.src).is_none() {
                        let n = self.paths.of_session(key).count() + 1;
                        let id = self.paths.add(key, local, pkt.src, initial_weight(n)).unwrap();
                        self.event("path_add", format!("sid={} path={} kind=reverse", key.1, id));
                        let ctl = self.ctl.get_mut(&key).unwrap();
                        ctl.candidates.mark_established(iface, pkt.src);
                        ctl.cand_path.insert((iface, pkt.src), id);
                    }
                }
                if cm.feedback_path_id != 0 {
                    self.apply_feedback(key, cm.feedback_path_id, cm.path_delay_ms as i64);
                }
                if cm.has(FLAG_IP_CHANGE) {
                    self.peer_moved(now, key, iface, pkt.src);
                }
                if cm.has(FLAG_PROTECTED) {
                    let fresh = self.dedup.check(now, key, cm.timestamp_ms, pkt.origin);
                    if !fresh {
                        self.dedupe_discards += 1;
                        self.event("dedupe_discard", format!("sid={} origin={}", key.1, pkt.origin));
                        return out;
                    }
                }
            }
        }

        let key = session_key.or_else(|| {
            self.sessions.by_orig(FourTuple {
                src: pkt.dst,
                dst: pkt.src,
            })
        });
        match pkt.seg {
            Seg::Syn => {
                // reply to real connects and to traversal syn probes alike
                if let Some(k) = self.session_by_serving_sock(pkt.dst) {
                    let proto = self.sessions.get(k).unwrap().proto;
                    let iface = self.iface_of(pkt.dst.0).unwrap_or(0);
                    out.pkts.push((
                        iface,
                        SimPacket {
                            uid: 0,
                            origin: 0,
                            src: pkt.dst,
                            dst: pkt.src,
                            proto,
                            seg: Seg::SynAck,
                            payload_len: 0,
                            cm: None,
                            wrapped: false,
                            created_us: now,
                        },
                    ));
                }
            }
            Seg::SynAck => {
                let hs_key = self
                    .fake_hs
                    .keys()
                    .find(|(_, ifc, sock)| *ifc == iface && *sock == pkt.src)
                    .copied();
                if let Some(k) = hs_key {
                    if self.fake_hs.get_mut(&k).unwrap().on_reply() {
                        self.event("fake_hs_done", format!("sid={} dst={}", k.0 .1, k.2 .0));
                    }
                } else if let Some(k) = key {
                    if matches!(self.ctl.get(&k).map(|c| &c.app), Some(App::BulkOut(_))) {
                        let seqs = match self.ctl.get_mut(&k).map(|c| &mut c.app) {
                            Some(App::BulkOut(src)) => src.on_synack(now),
                            _ => Vec::new(),
                        };
                        let sess = self.sessions.get(k).unwrap();
                        let (orig, proto) = (sess.orig(), sess.proto);
                        out.pkts
                            .push(self.plain_packet(orig, proto, Seg::HsAck, 0, 0, now, None));
                        self.send_segments(now, k, &seqs, &mut out);
                    }
                }
            }
            Seg::Ack { cum } => {
                if let Some(k) = key {
                    let (new_seqs, fast) = match self.ctl.get_mut(&k).map(|c| &mut c.app) {
                        Some(App::BulkOut(src)) => {
                            let o = src.on_ack(now, cum);
                            (o.new_seqs, o.fast_retx)
                        }
                        _ => (Vec::new(), None),
                    };
                    self.send_segments(now, k, &new_seqs, &mut out);
                    if let Some(seq) = fast {
                        self.event("retransmit", format!("sid={} kind=fast seq={}", k.1, seq));
                        self.send_segments(now, k, &[seq], &mut out);
                    }
                }
            }
            Seg::Data { seq } => {
                if let Some(k) = key {
                    if !discard_payload {
                        self.deliver_data(now, k, seq, &pkt, arrival_path, &mut out);
                    }
                }
            }
            Seg::Dgram => {
                if let Some(k) = key {
                    if !discard_payload {
                        self.deliver_dgram(now, k, &pkt, arrival_path, &mut out);
                    }
                }
            }
            Seg::HsAck | Seg::Beat | Seg::Note => {}
        }
        out
    }

    fn deliver_dgram(
        &mut self,
        now: u64,
        key: SessionKey,
        pkt: &SimPacket,
        arrival_path: u8,
        out: &mut EngineOut,
    ) {
        let ctl = self.ctl.get_mut(&key).unwrap();
        if !ctl.seen.insert(pkt.origin) {
            return;
        }
        if pkt.origin < ctl.max_origin {
            ctl.udp_ooo += 1;
        } else {
            ctl.max_origin = pkt.origin;
        }
        if let App::CbrIn(sink) = &mut ctl.app {
            sink.on_dgram(now, pkt.payload_len as usize, pkt.created_us);
        }
        out.arrivals.push(Arrival {
            key,
            path_id: arrival_path,
            bytes: pkt.payload_len as u64,
            created_us: pkt.created_us,
        });
    }

    fn deliver_data(
        &mut self,
        now: u64,
        key: SessionKey,
        seq: u64,
        pkt: &SimPacket,
        arrival_path: u8,
        out: &mut EngineOut,
    ) {
        let ctl = self.ctl.get_mut(&key).unwrap();
        if ctl.seen.insert(seq) {
            out.arrivals.push(Arrival {
                key,
                path_id: arrival_path,
                bytes: pkt.payload_len as u64,
                created_us: pkt.created_us,
            });
        }
        let mut flushed = false;
        let released: Vec<u64> = match ctl.reorder.as_mut() {
            Some(buf) => {
                let o = buf.push(seq, ());
                flushed = o.flushed;
                o.delivered.into_iter().map(|(s, _)| s).collect()
            }
            None => vec![seq],
        };
        let mut last_ack = None;
        if let App::BulkIn(sink) = &mut ctl.app {
            for s in released {
                last_ack = Some(sink.on_data(s));
            }
        }
        if flushed {
            self.event("reorder_flush", format!("sid={}", key.1));
        }
        if let Some(cum) = last_ack {
            self.dispatch(now, key, Seg::Ack { cum }, 0, 0, now, out);
        }
    }

    /// The destination speaks the extension: log the flip and seed the
    /// first path over the original socket pair.
    fn confirmed_peer(&mut self, key: SessionKey, orig: FourTuple) {
        self.event("handshake_confirm", format!("sid={} peer={}", key.1, key.0));
        if self.paths.find(key, orig.src, orig.dst).is_some() {
            return;
        }
        if let Some(id) = self.paths.add(key, orig.src, orig.dst, initial_weight(1)) {
            self.event("path_add", format!("sid={} path={} kind=primary", key.1, id));
            if let (Some(ifc), Some(ctl)) = (self.iface_of(orig.src.0), self.ctl.get_mut(&key)) {
                ctl.candidates.mark_established(ifc, orig.dst);
                ctl.cand_path.insert((ifc, orig.dst), id);
            }
        }
    }

    fn session_by_serving_sock(&self, sock: Sock) -> Option<SessionKey> {
        self.sessions
            .keys()
            .find(|k| self.sessions.get(*k).map(|s| s.orig().src) == Some(sock))
    }

    fn apply_feedback(&mut self, key: SessionKey, path_id: u8, d_rt: i64) {
        let Some(p) = self.paths.get_mut(path_id) else {
            return;
        };
        if p.session != key {
            return;
        }
        let first = p.d_min.is_none();
        crate::path::update_delay_metrics(p, d_rt);
        // feedback proves the path carries packets both ways
        p.nat_blocked = false;
        let (src, dst) = (p.src, p.dst);
        if first {
            let n = self
                .paths
                .of_session(key)
                .filter(|p| p.d_min.is_some())
                .count();
            self.paths.get_mut(path_id).unwrap().weight = initial_weight(n);
            self.event("path_established", format!("sid={} path={}", key.1, path_id));
            if let (Some(ifc), Some(ctl)) = (self.iface_of(src.0), self.ctl.get_mut(&key)) {
                ctl.candidates.mark_established(ifc, dst);
            }
        }
    }

    /// The peer lost an address: keep only the send path matching where
    /// its note arrived, and drop stale knowledge about the peer.
    fn peer_moved(&mut self, _now: u64, key: SessionKey, iface: usize, from: Sock) {
        let Some(sess) = self.sessions.get(key) else {
            return;
        };
        let orig = sess.orig();
        let local = (self.ifaces[iface], orig.src.1);
        let keep = self.paths.find(key, local, from).unwrap_or(0);
        let gone = if keep == 0 {
            self.paths.remove_session(key)
        } else {
            self.paths.retain_only(key, keep)
        };
        for id in &gone {
            self.event("path_remove", format!("sid={} path={} reason=peer_moved", key.1, id));
        }
        self.event("session_reset_paths", format!("sid={} keep={}", key.1, keep));
        for addr in self.addrs.advertised_of(key.0).collect::<Vec<_>>() {
            if addr != from.0 {
                self.addrs.forget_addr(key.0, addr);
            }
        }
        if let Some(ctl) = self.ctl.get_mut(&key) {
            // peer path ids may be reassigned after the reset, so the
            // estimators start over from live samples
            ctl.delay.clear();
            ctl.candidates.clear();
            ctl.cand_path.retain(|_, id| *id == keep);
            if keep != 0 {
                ctl.candidates.mark_established(iface, from);
            }
        }
    }

    fn receive_plain(&mut self, now: u64, pkt: SimPacket, out: &mut EngineOut) {
        // control blocks mean nothing to this host
        let key = self.sessions.by_orig(FourTuple {
            src: pkt.dst,
            dst: pkt.src,
        });
        match pkt.seg {
            Seg::Syn => {
                if let Some(k) = self.session_by_serving_sock(pkt.dst) {
                    let sess = self.sessions.get(k).unwrap();
                    let (orig, proto) = (sess.orig(), sess.proto);
                    out.pkts.push(self.plain_packet(
                        FourTuple { src: orig.src, dst: pkt.src },
                        proto,
                        Seg::SynAck,
                        0,
                        0,
                        now,
                        None,
                    ));
                }
            }
            Seg::SynAck => {
                if let Some(k) = key {
                    let seqs = match self.ctl.get_mut(&k).map(|c| &mut c.app) {
                        Some(App::BulkOut(src)) => src.on_synack(now),
                        _ => Vec::new(),
                    };
                    self.send_segments(now, k, &seqs, out);
                }
            }
            Seg::Ack { cum } => {
                if let Some(k) = key {
                    let (new_seqs, fast) = match self.ctl.get_mut(&k).map(|c| &mut c.app) {
                        Some(App::BulkOut(src)) => {
                            let o = src.on_ack(now, cum);
                            (o.new_seqs, o.fast_retx)
                        }
                        _ => (Vec::new(), None),
                    };
                    self.send_segments(now, k, &new_seqs, out);
                    if let Some(seq) = fast {
                        self.event("retransmit", format!("sid={} kind=fast seq={}", k.1, seq));
                        self.send_segments(now, k, &[seq], out);
                    }
                }
            }
            Seg::Data { seq } => {
                if let Some(k) = key {
                    self.sessions.touch(k, now);
                    self.deliver_data(now, k, seq, &pkt, 0, out);
                }
            }
            Seg::Dgram => {
                if let Some(k) = key {
                    self.sessions.touch(k, now);
                    self.deliver_dgram(now, k, &pkt, 0, out);
                }
            }
            Seg::HsAck | Seg::Beat | Seg::Note => {}
        }
    }

    /// Retransmission timers and fake handshake retries.
    pub fn on_wake(&mut self, now: u64) -> EngineOut {
        let mut out = EngineOut::default();
        let keys: Vec<SessionKey> = self.ctl.keys().copied().collect();
        for k in keys {
            let action = match self.ctl.get_mut(&k).map(|c| &mut c.app) {
                Some(App::BulkOut(src)) => src.on_timer(now),
                _ => TimerAction::None,
            };
            match action {
                TimerAction::None => {}
                TimerAction::Resyn => {
                    let sess = self.sessions.get(k).unwrap();
                    let (orig, proto) = (sess.orig(), sess.proto);
                    out.pkts
                        .push(self.plain_packet(orig, proto, Seg::Syn, 0, 0, now, None));
                }
                TimerAction::Resend(seqs) => {
                    self.event(
                        "retransmit",
                        format!("sid={} kind=rto n={} from={}", k.1, seqs.len(), seqs[0]),
                    );
                    self.send_segments(now, k, &seqs, &mut out);
                }
            }
        }
        // fake handshake retries
        let due: Vec<(SessionKey, usize, Sock)> = self
            .fake_hs
            .iter()
            .filter(|(_, hs)| matches!(hs.status, HsStatus::AwaitReply(_)) && hs.retry_at_us <= now)
            .map(|(k, _)| *k)
            .collect();
        for hk in due {
            let hs = self.fake_hs.get_mut(&hk).unwrap();
            if hs.on_timeout(now, FAKE_HS_RETRY_US) {
                self.event("fake_hs_syn", format!("sid={} dst={} retry=1", hk.0 .1, hk.2 .0));
                self.push_fake_syn(now, hk, &mut out);
            } else {
                self.event("fake_hs_blocked", format!("sid={} dst={}", hk.0 .1, hk.2 .0));
                if let Some(ctl) = self.ctl.get_mut(&hk.0) {
                    ctl.candidates.mark_dead(hk.1, hk.2);
                    if let Some(pid) = ctl.cand_path.get(&(hk.1, hk.2)).copied() {
                        if let Some(p) = self.paths.get_mut(pid) {
                            p.nat_blocked = true;
                        }
                        self.event("path_blocked", format!("sid={} path={} reason=fake_hs", hk.0 .1, pid));
                    }
                }
            }
        }
        out
    }

    pub fn next_wake(&self) -> Option<u64> {
        let rto = self
            .ctl
            .values()
            .filter_map(|c| match &c.app {
                App::BulkOut(src) => src.rto_deadline,
                _ => None,
            })
            .min();
        let hs = self
            .fake_hs
            .values()
            .filter(|h| matches!(h.status, HsStatus::AwaitReply(_)))
            .map(|h| h.retry_at_us)
            .min();
        match (rto, hs) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn push_fake_syn(&self, now: u64, hk: (SessionKey, usize, Sock), out: &mut EngineOut) {
        let Some(sess) = self.sessions.get(hk.0) else {
            return;
        };
        let src = (self.ifaces[hk.1], sess.orig().src.1);
        out.pkts.push((
            hk.1,
            SimPacket {
                uid: 0,
                origin: 0,
                src,
                dst: hk.2,
                proto: Proto::Tcp,
                seg: Seg::Syn,
                payload_len: 0,
                cm: None,
                wrapped: false,
                created_us: now,
            },
        ));
    }

    /// Keepalives for quiet sessions, plus session expiry.
    pub fn heartbeat_tick(&mut self, now: u64) -> EngineOut {
        let mut out = EngineOut::default();
        let ttl = self.cfg.session_ttl_us;
        for k in self.sessions.expire(now, ttl) {
            self.event("session_expire", format!("sid={}", k.1));
            self.ctl.remove(&k);
            for id in self.paths.remove_session(k) {
                self.event("path_remove", format!("sid={} path={} reason=expired", k.1, id));
            }
        }
        if !self.cfg.mpip_enabled {
            return out;
        }
        let keys: Vec<SessionKey> = self.sessions.keys().collect();
        let ups = self.up_iface_addrs();
        let node_id = self.cfg.node_id;
        for k in keys {
            let quiet = self
                .ctl
                .get(&k)
                .map(|c| now.saturating_sub(c.last_send_us) >= self.cfg.heartbeat_us)
                .unwrap_or(false);
            if !quiet {
                continue;
            }
            let usable = self.usable_path_ids(k);
            if usable.is_empty() {
                continue;
            }
            let proto = self.sessions.get(k).unwrap().proto;
            let wrap = self.cfg.nat_mode == NatMode::UdpWrap && proto == Proto::Tcp;
            for pid in usable {
                let p = self.paths.get(pid).unwrap();
                let (src, dst) = (p.src, p.dst);
                let ctl = self.ctl.get_mut(&k).unwrap();
                let cm = make_cm(node_id, k.1, pid, FLAG_ENABLED | FLAG_HEARTBEAT, now, ctl, &ups);
                ctl.last_send_us = now;
                let iface = self.iface_of(src.0).unwrap_or(0);
                out.pkts.push((
                    iface,
                    SimPacket {
                        uid: 0,
                        origin: 0,
                        src,
                        dst,
                        proto,
                        seg: Seg::Beat,
                        payload_len: 0,
                        cm: Some(cm),
                        wrapped: wrap,
                        created_us: now,
                    },
                ));
            }
            self.sessions.touch(k, now);
        }
        out
    }

    /// Candidate sweep: enumerate interface/address pairs, run NAT
    /// traversal where configured, and send keepalive probes on pairs
    /// still waiting for their first feedback.
    pub fn establish_tick(&mut self, now: u64) -> EngineOut {
        let mut out = EngineOut::default();
        if !self.cfg.mpip_enabled {
            return out;
        }
        let keys: Vec<SessionKey> = self.sessions.keys().collect();
        let ups = self.up_iface_addrs();
        let node_id = self.cfg.node_id;
        for k in keys {
            let sess = self.sessions.get(k).unwrap();
            let orig = sess.orig();
            let proto = sess.proto;
            if send_mode(self.avail.lookup(orig.dst)) != SendMode::Multipath {
                continue;
            }
            // candidate universe: every up interface toward every known
            // peer address, on the original destination port
            let mut remotes: BTreeSet<Sock> = BTreeSet::new();
            remotes.insert(orig.dst);
            for addr in self.addrs.advertised_of(k.0) {
                remotes.insert((addr, orig.dst.1));
            }
            {
                let ctl = self.ctl.get_mut(&k).unwrap();
                for (ifc, up) in self.iface_up.iter().enumerate() {
                    if !*up {
                        continue;
                    }
                    for r in &remotes {
                        ctl.candidates.ensure(ifc, *r);
                    }
                }
            }
            let due = self.ctl.get_mut(&k).unwrap().candidates.take_due();
            for (ifc, remote) in due {
                if !self.iface_up[ifc] {
                    continue;
                }
                if self.cfg.nat_mode == NatMode::FakeHandshake {
                    let hk = (k, ifc, remote);
                    match self.fake_hs.get(&hk) {
                        None => {
                            self.fake_hs
                                .insert(hk, FakeHandshake::started(now, FAKE_HS_RETRY_US));
                            self.event("fake_hs_syn", format!("sid={} dst={}", k.1, remote.0));
                            self.push_fake_syn(now, hk, &mut out);
                            continue;
                        }
                        Some(hs) if !hs.usable() => continue,
                        Some(_) => {}
                    }
                }
                let pid = {
                    let existing = self
                        .ctl
                        .get(&k)
                        .and_then(|c| c.cand_path.get(&(ifc, remote)).copied())
                        .filter(|id| self.paths.get(*id).is_some());
                    match existing {
                        Some(id) => id,
                        None => {
                            let src = (self.ifaces[ifc], orig.src.1);
                            let Some(id) = self.paths.add(k, src, remote, 1) else {
                                continue;
                            };
                            self.event("path_add", format!("sid={} path={} kind=probe", k.1, id));
                            self.ctl
                                .get_mut(&k)
                                .unwrap()
                                .cand_path
                                .insert((ifc, remote), id);
                            id
                        }
                    }
                };
                let wrap = self.cfg.nat_mode == NatMode::UdpWrap && proto == Proto::Tcp;
                let src = (self.ifaces[ifc], orig.src.1);
                let ctl = self.ctl.get_mut(&k).unwrap();
                let cm = make_cm(node_id, k.1, pid, FLAG_ENABLED | FLAG_HEARTBEAT, now, ctl, &ups);
                out.pkts.push((
                    ifc,
                    SimPacket {
                        uid: 0,
                        origin: 0,
                        src,
                        dst: remote,
                        proto,
                        seg: Seg::Beat,
                        payload_len: 0,
                        cm: Some(cm),
                        wrapped: wrap,
                        created_us: now,
                    },
                ));
            }
            // pairs that ran out of probe attempts block their path
            let newly_blocked: Vec<u8> = {
                let ctl = self.ctl.get(&k).unwrap();
                ctl.cand_path
                    .iter()
                    .filter(|((ifc, r), id)| {
                        ctl.candidates.state(*ifc, *r) == Some(crate::path::CandidateState::Dead)
                            && self
                                .paths
                                .get(**id)
                                .is_some_and(|p| !p.nat_blocked && p.d_min.is_none())
                    })
                    .map(|(_, id)| *id)
                    .collect()
            };
            for pid in newly_blocked {
                self.paths.get_mut(pid).unwrap().nat_blocked = true;
                self.event("path_blocked", format!("sid={} path={} reason=no_probe_reply", k.1, pid));
            }
        }
        out
    }

    /// One weight adjustment round per session over its measured paths.
    pub fn weight_tick(&mut self, _now: u64) {
        let keys: Vec<SessionKey> = self.sessions.keys().collect();
        for k in keys {
            adjust_weights(
                self.paths
                    .of_session_mut(k)
                    .filter(|p| p.d_min.is_some() && !p.nat_blocked),
                self.cfg.weight_step,
            );
        }
    }

    pub fn iface_down(&mut self, _now: u64, idx: usize) {
        if idx >= self.iface_up.len() {
            return;
        }
        self.iface_up[idx] = false;
        let addr = self.ifaces[idx];
        let keys: Vec<SessionKey> = self.sessions.keys().collect();
        for k in keys {
            let gone: Vec<u8> = self
                .paths
                .of_session(k)
                .filter(|p| p.src.0 == addr)
                .map(|p| p.id)
                .collect();
            for id in &gone {
                self.paths.remove(*id);
                self.event("path_remove", format!("sid={} path={} reason=iface_down", k.1, id));
            }
            if let Some(ctl) = self.ctl.get_mut(&k) {
                if !gone.is_empty() {
                    ctl.ip_change_pending = true;
                }
                for (pair, _) in ctl.cand_path.clone() {
                    if pair.0 == idx {
                        ctl.candidates.mark_dead(pair.0, pair.1);
                    }
                }
            }
        }
        self.fake_hs.retain(|(_, ifc, _), _| *ifc != idx);
    }

    pub fn iface_up_again(&mut self, _now: u64, idx: usize) {
        if idx >= self.iface_up.len() {
            return;
        }
        self.iface_up[idx] = true;
        for ctl in self.ctl.values_mut() {
            ctl.candidates.reopen_iface(idx);
            ctl.cand_path.retain(|(ifc, _), _| *ifc != idx);
        }
    }
}
