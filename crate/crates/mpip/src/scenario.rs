//! Text scenario format: nodes, interfaces, links, middleboxes,
//! sessions, routing rules, and run parameters, one declaration per
//! line. `#` starts a comment. Errors carry the line number.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::sim::node::NatMode;
use crate::tables::{Priority, Proto, RoutingRule};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn err(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Line { line, msg: msg.into() }
}

#[derive(Debug, Clone)]
pub struct NatDecl {
    pub outer: Ipv4Addr,
    pub drop_unknown_tcp: bool,
    pub verify_udp: bool,
}

#[derive(Debug, Clone)]
pub struct NodeDecl {
    pub name: String,
    pub mpip: bool,
    pub ifaces: Vec<Ipv4Addr>,
    /// one slot per interface
    pub nats: Vec<Option<NatDecl>>,
}

#[derive(Debug, Clone)]
pub struct LinkDecl {
    pub name: String,
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub bw_bps: u64,
    pub prop_us: u64,
    pub loss: f64,
    pub queue: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrafficDecl {
    /// windowed reliable stream, segments of `seg` payload bytes
    Bulk { window: u64, seg: usize },
    /// constant application bitrate datagrams
    Cbr { rate_bps: u64, size: usize },
    /// large class at a bitrate plus a small class at a packet rate
    Mix { rate_bps: u64, size: usize, pps: u64, small: usize },
}

#[derive(Debug, Clone)]
pub struct SessionDecl {
    pub name: String,
    pub src: usize,
    pub dst: usize,
    pub traffic: TrafficDecl,
    pub port: u16,
    /// interface index the original address pair uses, on both ends
    pub via: usize,
    pub start_ms: u64,
    pub stop_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
pub struct RuleDecl {
    pub at_ms: u64,
    pub rule: RoutingRule,
}

#[derive(Debug, Clone, Copy)]
pub struct RunParams {
    pub weight_step: u32,
    pub weight_tick_ms: u64,
    pub heartbeat_ms: u64,
    pub reorder: bool,
    pub nat_mode: NatMode,
    pub query_threshold: u32,
    pub session_ttl_ms: u64,
    pub rto_ms: u64,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            weight_step: 10,
            weight_tick_ms: 100,
            heartbeat_ms: 200,
            reorder: true,
            nat_mode: NatMode::Off,
            query_threshold: 10,
            session_ttl_ms: 60_000,
            rto_ms: 200,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinkEvent {
    pub link: usize,
    pub at_ms: u64,
    pub up: bool,
}

#[derive(Debug)]
pub struct Scenario {
    pub nodes: Vec<NodeDecl>,
    pub links: Vec<LinkDecl>,
    pub sessions: Vec<SessionDecl>,
    pub rules: Vec<RuleDecl>,
    pub params: RunParams,
    pub duration_ms: u64,
    pub seed: u64,
    pub link_events: Vec<LinkEvent>,
}

/// "40mbps" / "1.7mbps" / "500kbps" / "9600bps" to bits per second.
fn parse_rate(s: &str) -> Option<u64> {
    let (num, mult) = if let Some(n) = s.strip_suffix("gbps") {
        (n, 1e9)
    } else if let Some(n) = s.strip_suffix("mbps") {
        (n, 1e6)
    } else if let Some(n) = s.strip_suffix("kbps") {
        (n, 1e3)
    } else {
        (s.strip_suffix("bps")?, 1.0)
    };
    let v: f64 = num.parse().ok()?;
    if v < 0.0 {
        return None;
    }
    Some((v * mult).round() as u64)
}

/// "10ms" / "30s" / "1500us" / bare "250" (milliseconds) to microseconds.
fn parse_time_us(s: &str) -> Option<u64> {
    let (num, mult) = if let Some(n) = s.strip_suffix("us") {
        (n, 1.0)
    } else if let Some(n) = s.strip_suffix("ms") {
        (n, 1e3)
    } else if let Some(n) = s.strip_suffix('s') {
        (n, 1e6)
    } else {
        (s, 1e3)
    };
    let v: f64 = num.parse().ok()?;
    if v < 0.0 {
        return None;
    }
    Some((v * mult).round() as u64)
}

fn parse_time_ms(s: &str) -> Option<u64> {
    parse_time_us(s).map(|us| us / 1000)
}

/// "A.0" to (node index, iface index).
fn parse_endpoint(s: &str, names: &BTreeMap<String, usize>) -> Option<(usize, usize)> {
    let (name, idx) = s.rsplit_once('.')?;
    let node = *names.get(name)?;
    let iface: usize = idx.parse().ok()?;
    Some((node, iface))
}

fn split_kv(tok: &str) -> Option<(&str, &str)> {
    tok.split_once('=')
}

fn parse_traffic(spec: &str) -> Option<TrafficDecl> {
    let (kind, rest) = spec.split_once(':')?;
    let mut kv = BTreeMap::new();
    for part in rest.split(',') {
        let (k, v) = part.split_once('=')?;
        kv.insert(k, v);
    }
    match kind {
        "bulk" => Some(TrafficDecl::Bulk {
            window: kv.get("w")?.parse().ok()?,
            seg: kv.get("seg")?.parse().ok()?,
        }),
        "cbr" => Some(TrafficDecl::Cbr {
            rate_bps: parse_rate(kv.get("rate")?)?,
            size: kv.get("size")?.parse().ok()?,
        }),
        "mix" => Some(TrafficDecl::Mix {
            rate_bps: parse_rate(kv.get("rate")?)?,
            size: kv.get("size")?.parse().ok()?,
            pps: kv.get("pps")?.parse().ok()?,
            small: kv.get("small")?.parse().ok()?,
        }),
        _ => None,
    }
}

/// Rule line tail: priority token then optional matchers.
fn parse_rule(lineno: usize, toks: &[&str]) -> Result<RoutingRule, ScenarioError> {
    let Some(tok) = toks.first() else {
        return Err(err(lineno, "rule needs a priority token"));
    };
    let priority = match *tok {
        "Tf" => Priority::Throughput,
        "Rf" => Priority::Responsive(1),
        "Rf2" => Priority::Responsive(2),
        "Pf" => Priority::Protected,
        other => return Err(err(lineno, format!("unknown priority token {other}"))),
    };
    let mut rule = RoutingRule {
        dst_addr: None,
        dst_port: None,
        proto: None,
        min_len: 0,
        max_len: None,
        priority,
    };
    for t in &toks[1..] {
        let Some((k, v)) = split_kv(t) else {
            return Err(err(lineno, format!("expected key=value, got {t}")));
        };
        match k {
            "dst" => {
                rule.dst_addr = Some(
                    v.parse()
                        .map_err(|_| err(lineno, format!("bad address {v}")))?,
                )
            }
            "port" => {
                rule.dst_port = Some(
                    v.parse()
                        .map_err(|_| err(lineno, format!("bad port {v}")))?,
                )
            }
            "proto" => {
                rule.proto = Some(match v {
                    "tcp" => Proto::Tcp,
                    "udp" => Proto::Udp,
                    _ => return Err(err(lineno, format!("bad proto {v}"))),
                })
            }
            "min" => {
                rule.min_len = v
                    .parse()
                    .map_err(|_| err(lineno, format!("bad min {v}")))?
            }
            "max" => {
                rule.max_len = Some(
                    v.parse()
                        .map_err(|_| err(lineno, format!("bad max {v}")))?,
                )
            }
            _ => return Err(err(lineno, format!("unknown rule key {k}"))),
        }
    }
    Ok(rule)
}

pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
    let mut names: BTreeMap<String, usize> = BTreeMap::new();
    let mut link_names: BTreeMap<String, usize> = BTreeMap::new();
    let mut nodes: Vec<NodeDecl> = Vec::new();
    let mut links: Vec<LinkDecl> = Vec::new();
    let mut sessions: Vec<SessionDecl> = Vec::new();
    let mut rules: Vec<RuleDecl> = Vec::new();
    let mut params = RunParams::default();
    let mut duration_ms = 0u64;
    let mut seed = 1u64;
    let mut link_events: Vec<LinkEvent> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "node" => {
                if toks.len() < 2 || toks.len() > 3 {
                    return Err(err(lineno, "usage: node NAME [plain]"));
                }
                if toks.len() == 3 && toks[2] != "plain" {
                    return Err(err(lineno, format!("unknown node option {}", toks[2])));
                }
                if names.contains_key(toks[1]) {
                    return Err(err(lineno, format!("duplicate node {}", toks[1])));
                }
                names.insert(toks[1].to_string(), nodes.len());
                nodes.push(NodeDecl {
                    name: toks[1].to_string(),
                    mpip: toks.len() == 2,
                    ifaces: Vec::new(),
                    nats: Vec::new(),
                });
            }
            "iface" => {
                if toks.len() != 3 {
                    return Err(err(lineno, "usage: iface NODE ADDR"));
                }
                let idx = *names
                    .get(toks[1])
                    .ok_or_else(|| err(lineno, format!("unknown node {}", toks[1])))?;
                let addr: Ipv4Addr = toks[2]
                    .parse()
                    .map_err(|_| err(lineno, format!("bad address {}", toks[2])))?;
                nodes[idx].ifaces.push(addr);
                nodes[idx].nats.push(None);
            }
            "nat" => {
                if toks.len() < 3 {
                    return Err(err(lineno, "usage: nat NODE.IFACE OUTER [drop_unknown_tcp] [verify_udp]"));
                }
                let (n, ifc) = parse_endpoint(toks[1], &names)
                    .ok_or_else(|| err(lineno, format!("bad endpoint {}", toks[1])))?;
                if ifc >= nodes[n].ifaces.len() {
                    return Err(err(lineno, format!("node has no interface {ifc}")));
                }
                let outer: Ipv4Addr = toks[2]
                    .parse()
                    .map_err(|_| err(lineno, format!("bad address {}", toks[2])))?;
                let mut decl = NatDecl { outer, drop_unknown_tcp: false, verify_udp: false };
                for t in &toks[3..] {
                    match *t {
                        "drop_unknown_tcp" => decl.drop_unknown_tcp = true,
                        "verify_udp" => decl.verify_udp = true,
                        _ => return Err(err(lineno, format!("unknown nat option {t}"))),
                    }
                }
                nodes[n].nats[ifc] = Some(decl);
            }
            "link" => {
                if toks.len() < 6 {
                    return Err(err(lineno, "usage: link NAME A.IFACE B.IFACE RATE DELAY [loss=F] [queue=N]"));
                }
                if link_names.contains_key(toks[1]) {
                    return Err(err(lineno, format!("duplicate link {}", toks[1])));
                }
                let a = parse_endpoint(toks[2], &names)
                    .ok_or_else(|| err(lineno, format!("bad endpoint {}", toks[2])))?;
                let b = parse_endpoint(toks[3], &names)
                    .ok_or_else(|| err(lineno, format!("bad endpoint {}", toks[3])))?;
                for (n, ifc) in [a, b] {
                    if ifc >= nodes[n].ifaces.len() {
                        return Err(err(lineno, format!("{} has no interface {ifc}", nodes[n].name)));
                    }
                }
                let bw = parse_rate(toks[4])
                    .ok_or_else(|| err(lineno, format!("bad rate {}", toks[4])))?;
                let prop = parse_time_us(toks[5])
                    .ok_or_else(|| err(lineno, format!("bad delay {}", toks[5])))?;
                let mut loss = 0.0f64;
                let mut queue = 150usize;
                for t in &toks[6..] {
                    match split_kv(t) {
                        Some(("loss", v)) => {
                            loss = v
                                .parse()
                                .map_err(|_| err(lineno, format!("bad loss {v}")))?;
                            if !(0.0..=1.0).contains(&loss) {
                                return Err(err(lineno, "loss must be within 0..1"));
                            }
                        }
                        Some(("queue", v)) => {
                            queue = v
                                .parse()
                                .map_err(|_| err(lineno, format!("bad queue {v}")))?
                        }
                        _ => return Err(err(lineno, format!("unknown link option {t}"))),
                    }
                }
                if bw == 0 {
                    return Err(err(lineno, "link rate must be positive"));
                }
                link_names.insert(toks[1].to_string(), links.len());
                links.push(LinkDecl {
                    name: toks[1].to_string(),
                    a,
                    b,
                    bw_bps: bw,
                    prop_us: prop,
                    loss,
                    queue,
                });
            }
            "session" => {
                if toks.len() < 5 {
                    return Err(err(lineno, "usage: session NAME SRC DST SPEC [port=N] [via=IFACE] [start=T] [stop=T]"));
                }
                let src = *names
                    .get(toks[2])
                    .ok_or_else(|| err(lineno, format!("unknown node {}", toks[2])))?;
                let dst = *names
                    .get(toks[3])
                    .ok_or_else(|| err(lineno, format!("unknown node {}", toks[3])))?;
                if src == dst {
                    return Err(err(lineno, "session endpoints must differ"));
                }
                let traffic = parse_traffic(toks[4])
                    .ok_or_else(|| err(lineno, format!("bad traffic spec {}", toks[4])))?;
                let mut port = 5000 + sessions.len() as u16;
                let mut via = 0usize;
                let mut start_ms = 0u64;
                let mut stop_ms = None;
                for t in &toks[5..] {
                    match split_kv(t) {
                        Some(("port", v)) => {
                            port = v
                                .parse()
                                .map_err(|_| err(lineno, format!("bad port {v}")))?
                        }
                        Some(("via", v)) => {
                            via = v
                                .parse()
                                .map_err(|_| err(lineno, format!("bad via {v}")))?
                        }
                        Some(("start", v)) => {
                            start_ms = parse_time_ms(v)
                                .ok_or_else(|| err(lineno, format!("bad start {v}")))?
                        }
                        Some(("stop", v)) => {
                            stop_ms = Some(
                                parse_time_ms(v)
                                    .ok_or_else(|| err(lineno, format!("bad stop {v}")))?,
                            )
                        }
                        _ => return Err(err(lineno, format!("unknown session option {t}"))),
                    }
                }
                sessions.push(SessionDecl {
                    name: toks[1].to_string(),
                    src,
                    dst,
                    traffic,
                    port,
                    via,
                    start_ms,
                    stop_ms,
                });
            }
            "rule" => {
                let rule = parse_rule(lineno, &toks[1..])?;
                rules.push(RuleDecl { at_ms: 0, rule });
            }
            "rule_at" => {
                if toks.len() < 3 {
                    return Err(err(lineno, "usage: rule_at TIME PRIORITY [matchers]"));
                }
                let at_ms = parse_time_ms(toks[1])
                    .ok_or_else(|| err(lineno, format!("bad time {}", toks[1])))?;
                let rule = parse_rule(lineno, &toks[2..])?;
                rules.push(RuleDecl { at_ms, rule });
            }
            "param" => {
                if toks.len() != 3 {
                    return Err(err(lineno, "usage: param KEY VALUE"));
                }
                let v = toks[2];
                match toks[1] {
                    "S" => {
                        params.weight_step = v
                            .parse()
                            .map_err(|_| err(lineno, format!("bad S {v}")))?
                    }
                    "T" => {
                        params.weight_tick_ms = parse_time_ms(v)
                            .ok_or_else(|| err(lineno, format!("bad T {v}")))?
                    }
                    "heartbeat_ms" => {
                        params.heartbeat_ms = parse_time_ms(v)
                            .ok_or_else(|| err(lineno, format!("bad heartbeat {v}")))?
                    }
                    "reorder_buffer" => {
                        params.reorder = match v {
                            "on" => true,
                            "off" => false,
                            _ => return Err(err(lineno, "reorder_buffer takes on|off")),
                        }
                    }
                    "nat_mode" => {
                        params.nat_mode = match v {
                            "off" => NatMode::Off,
                            "fake_handshake" => NatMode::FakeHandshake,
                            "udp_wrap" => NatMode::UdpWrap,
                            _ => return Err(err(lineno, "nat_mode takes off|fake_handshake|udp_wrap")),
                        }
                    }
                    "query_threshold" => {
                        params.query_threshold = v
                            .parse()
                            .map_err(|_| err(lineno, format!("bad threshold {v}")))?
                    }
                    "session_ttl_ms" => {
                        params.session_ttl_ms = parse_time_ms(v)
                            .ok_or_else(|| err(lineno, format!("bad ttl {v}")))?
                    }
                    "rto_ms" => {
                        params.rto_ms = parse_time_ms(v)
                            .ok_or_else(|| err(lineno, format!("bad rto {v}")))?
                    }
                    other => return Err(err(lineno, format!("unknown param {other}"))),
                }
            }
            "duration" => {
                if toks.len() != 2 {
                    return Err(err(lineno, "usage: duration TIME"));
                }
                duration_ms = parse_time_ms(toks[1])
                    .ok_or_else(|| err(lineno, format!("bad duration {}", toks[1])))?;
            }
            "seed" => {
                if toks.len() != 2 {
                    return Err(err(lineno, "usage: seed N"));
                }
                seed = toks[1]
                    .parse()
                    .map_err(|_| err(lineno, format!("bad seed {}", toks[1])))?;
            }
            "fail" | "restore" => {
                if toks.len() != 3 {
                    return Err(err(lineno, "usage: fail|restore LINK TIME"));
                }
                let link = *link_names
                    .get(toks[1])
                    .ok_or_else(|| err(lineno, format!("unknown link {}", toks[1])))?;
                let at_ms = parse_time_ms(toks[2])
                    .ok_or_else(|| err(lineno, format!("bad time {}", toks[2])))?;
                link_events.push(LinkEvent { link, at_ms, up: toks[0] == "restore" });
            }
            other => return Err(err(lineno, format!("unknown directive {other}"))),
        }
    }

    if nodes.is_empty() {
        return Err(ScenarioError::Invalid("no nodes declared".into()));
    }
    for n in &nodes {
        if n.ifaces.is_empty() {
            return Err(ScenarioError::Invalid(format!("node {} has no interface", n.name)));
        }
    }
    if links.is_empty() {
        return Err(ScenarioError::Invalid("no links declared".into()));
    }
    if sessions.is_empty() {
        return Err(ScenarioError::Invalid("no sessions declared".into()));
    }
    for s in &sessions {
        if s.via >= nodes[s.src].ifaces.len() || s.via >= nodes[s.dst].ifaces.len() {
            return Err(ScenarioError::Invalid(format!(
                "session {}: via={} exceeds an endpoint's interface count",
                s.name, s.via
            )));
        }
    }
    if duration_ms == 0 {
        return Err(ScenarioError::Invalid("duration missing or zero".into()));
    }
    Ok(Scenario {
        nodes,
        links,
        sessions,
        rules,
        params,
        duration_ms,
        seed,
        link_events,
    })
}

/// Name and text of every scenario shipped with the binary.
pub fn canned() -> &'static [(&'static str, &'static str)] {
    &[
        ("loadbalance_40_20", include_str!("../scenarios/loadbalance_40_20.txt")),
        ("failover", include_str!("../scenarios/failover.txt")),
        ("reorder_10_2", include_str!("../scenarios/reorder_10_2.txt")),
        ("rf_audio_50_80", include_str!("../scenarios/rf_audio_50_80.txt")),
        ("coordinated_two_sessions", include_str!("../scenarios/coordinated_two_sessions.txt")),
        ("nat_fakehs", include_str!("../scenarios/nat_fakehs.txt")),
        ("nat_udpwrap", include_str!("../scenarios/nat_udpwrap.txt")),
        ("non_mpip_peer", include_str!("../scenarios/non_mpip_peer.txt")),
    ]
}

pub fn canned_text(name: &str) -> Option<&'static str> {
    canned().iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# two hosts, two disjoint links
node A
node B
iface A 10.0.0.1
iface A 10.0.1.1
iface B 10.0.0.2
iface B 10.0.1.2
link wan0 A.0 B.0 40mbps 10ms
link wan1 A.1 B.1 20mbps 10ms loss=0.01 queue=50
session s1 A B bulk:w=220,seg=1400
rule Tf
duration 30s
seed 42
";

    #[test]
    fn parses_the_sample() {
        let s = parse(SAMPLE).unwrap();
        assert_eq!(s.nodes.len(), 2);
        assert_eq!(s.nodes[0].ifaces.len(), 2);
        assert_eq!(s.links.len(), 2);
        assert_eq!(s.links[0].bw_bps, 40_000_000);
        assert_eq!(s.links[0].prop_us, 10_000);
        assert_eq!(s.links[1].loss, 0.01);
        assert_eq!(s.links[1].queue, 50);
        assert_eq!(s.sessions.len(), 1);
        assert_eq!(
            s.sessions[0].traffic,
            TrafficDecl::Bulk { window: 220, seg: 1400 }
        );
        assert_eq!(s.sessions[0].port, 5000);
        assert_eq!(s.duration_ms, 30_000);
        assert_eq!(s.seed, 42);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "node A\niface A 10.0.0.1\nlink w A.0 C.0 1mbps 1ms\n";
        match parse(bad) {
            Err(ScenarioError::Line { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn fractional_rates_round_to_whole_bits() {
        assert_eq!(parse_rate("1.7mbps"), Some(1_700_000));
        assert_eq!(parse_rate("2mbps"), Some(2_000_000));
        assert_eq!(parse_rate("9600bps"), Some(9600));
        assert_eq!(parse_rate("oops"), None);
    }

    #[test]
    fn times_accept_three_suffixes_and_bare_ms() {
        assert_eq!(parse_time_us("10ms"), Some(10_000));
        assert_eq!(parse_time_us("30s"), Some(30_000_000));
        assert_eq!(parse_time_us("250us"), Some(250));
        assert_eq!(parse_time_us("5"), Some(5_000));
    }

    #[test]
    fn nat_and_param_lines() {
        let text = "\
node A
node B plain
iface A 10.0.0.1
iface A 192.168.1.2
iface B 10.0.0.2
nat A.1 5.5.5.5 drop_unknown_tcp
link w0 A.0 B.0 10mbps 5ms
session s A B cbr:rate=1mbps,size=500 port=7000 start=100 stop=2s
param nat_mode fake_handshake
param S 2
rule_at 500 Rf proto=udp max=200
duration 5s
";
        let s = parse(text).unwrap();
        assert!(!s.nodes[1].mpip);
        let nat = s.nodes[0].nats[1].as_ref().unwrap();
        assert_eq!(nat.outer, Ipv4Addr::new(5, 5, 5, 5));
        assert!(nat.drop_unknown_tcp);
        assert!(!nat.verify_udp);
        assert_eq!(s.params.nat_mode, NatMode::FakeHandshake);
        assert_eq!(s.params.weight_step, 2);
        assert_eq!(s.sessions[0].port, 7000);
        assert_eq!(s.sessions[0].start_ms, 100);
        assert_eq!(s.sessions[0].stop_ms, Some(2000));
        assert_eq!(s.rules[0].at_ms, 500);
        assert_eq!(s.rules[0].rule.priority, Priority::Responsive(1));
        assert_eq!(s.rules[0].rule.max_len, Some(200));
    }

    #[test]
    fn every_canned_scenario_parses() {
        for (name, text) in canned() {
            let s = parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(s.duration_ms > 0, "{name}");
        }
    }
}
