//! Address translation box sitting in front of one interface.
//!
//! Outbound packets get their source rewritten to the box's outer
//! address with a per-socket allocated port; inbound packets must match
//! an existing mapping or they die. With `drop_unknown_tcp` the box
//! additionally refuses tcp packets, both directions, whose flow never
//! produced a SYN through it, which is exactly what breaks naive
//! multipath spreading and what the fake handshake or udp encapsulation
//! work around.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use crate::tables::{Proto, Sock};

use super::packet::{Seg, SimPacket};

const PORT_BASE: u16 = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NatDrop {
    NoMapping,
    TcpUnknown,
    UdpUnknown,
}

impl NatDrop {
    pub fn reason(&self) -> &'static str {
        match self {
            NatDrop::NoMapping => "nat_no_mapping",
            NatDrop::TcpUnknown => "nat_tcp_unknown",
            NatDrop::UdpUnknown => "nat_udp_unknown",
        }
    }
}

#[derive(Debug)]
pub struct NatBox {
    pub outer_addr: Ipv4Addr,
    pub drop_unknown_tcp: bool,
    pub verify_udp: bool,
    map_out: BTreeMap<(Sock, Proto), u16>,
    map_in: BTreeMap<(u16, Proto), Sock>,
    /// (inner socket, remote socket) pairs that produced a SYN
    tcp_flows: BTreeSet<(Sock, Sock)>,
    udp_flows: BTreeSet<(Sock, Sock)>,
    next_port: u16,
}

impl NatBox {
    pub fn new(outer_addr: Ipv4Addr, drop_unknown_tcp: bool, verify_udp: bool) -> Self {
        NatBox {
            outer_addr,
            drop_unknown_tcp,
            verify_udp,
            map_out: BTreeMap::new(),
            map_in: BTreeMap::new(),
            tcp_flows: BTreeSet::new(),
            udp_flows: BTreeSet::new(),
            next_port: PORT_BASE,
        }
    }

    /// Translates a packet leaving the inner interface.
    pub fn outbound(&mut self, mut pkt: SimPacket) -> Result<SimPacket, NatDrop> {
        let proto = pkt.outer_proto();
        let inner = pkt.src;
        match proto {
            Proto::Tcp => {
                if matches!(pkt.seg, Seg::Syn) {
                    self.tcp_flows.insert((inner, pkt.dst));
                } else if self.drop_unknown_tcp && !self.tcp_flows.contains(&(inner, pkt.dst)) {
                    return Err(NatDrop::TcpUnknown);
                }
            }
            Proto::Udp => {
                self.udp_flows.insert((inner, pkt.dst));
            }
        }
        let port = match self.map_out.get(&(inner, proto)) {
            Some(p) => *p,
            None => {
                let p = self.next_port;
                self.next_port += 1;
                self.map_out.insert((inner, proto), p);
                self.map_in.insert((p, proto), inner);
                p
            }
        };
        pkt.src = (self.outer_addr, port);
        Ok(pkt)
    }

    /// Translates a packet arriving at the outer address.
    pub fn inbound(&mut self, mut pkt: SimPacket) -> Result<SimPacket, NatDrop> {
        let proto = pkt.outer_proto();
        if pkt.dst.0 != self.outer_addr {
            return Err(NatDrop::NoMapping);
        }
        let inner = match self.map_in.get(&(pkt.dst.1, proto)) {
            Some(s) => *s,
            None => return Err(NatDrop::NoMapping),
        };
        match proto {
            Proto::Tcp if self.drop_unknown_tcp => {
                if !self.tcp_flows.contains(&(inner, pkt.src)) {
                    return Err(NatDrop::TcpUnknown);
                }
            }
            Proto::Udp if self.verify_udp && !self.udp_flows.contains(&(inner, pkt.src)) => {
                return Err(NatDrop::UdpUnknown);
            }
            _ => {}
        }
        pkt.dst = inner;
        Ok(pkt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(src: Sock, dst: Sock, proto: Proto, seg: Seg) -> SimPacket {
        SimPacket {
            uid: 0,
            origin: 0,
            src,
            dst,
            proto,
            seg,
            payload_len: 0,
            cm: None,
            wrapped: false,
            created_us: 0,
        }
    }

    fn inner() -> Sock {
        (Ipv4Addr::new(192, 168, 1, 2), 4000)
    }

    fn server() -> Sock {
        (Ipv4Addr::new(20, 0, 0, 1), 80)
    }

    fn outer() -> Ipv4Addr {
        Ipv4Addr::new(5, 5, 5, 5)
    }

    #[test]
    fn outbound_then_reply_round_trips() {
        let mut nat = NatBox::new(outer(), false, false);
        let out = nat
            .outbound(pkt(inner(), server(), Proto::Udp, Seg::Dgram))
            .unwrap();
        assert_eq!(out.src, (outer(), PORT_BASE));
        assert_eq!(out.dst, server());

        let reply = nat
            .inbound(pkt(server(), out.src, Proto::Udp, Seg::Dgram))
            .unwrap();
        assert_eq!(reply.dst, inner());

        // same inner socket keeps the same outer port
        let again = nat
            .outbound(pkt(inner(), server(), Proto::Udp, Seg::Dgram))
            .unwrap();
        assert_eq!(again.src, (outer(), PORT_BASE));
    }

    #[test]
    fn unsolicited_inbound_dies() {
        let mut nat = NatBox::new(outer(), false, false);
        let r = nat.inbound(pkt(server(), (outer(), PORT_BASE), Proto::Udp, Seg::Dgram));
        assert_eq!(r.unwrap_err(), NatDrop::NoMapping);
        // and so does anything addressed past the outer address
        let r = nat.inbound(pkt(server(), inner(), Proto::Udp, Seg::Dgram));
        assert_eq!(r.unwrap_err(), NatDrop::NoMapping);
    }

    #[test]
    fn strict_tcp_wants_a_syn_first() {
        let mut nat = NatBox::new(outer(), true, false);
        let data = pkt(inner(), server(), Proto::Tcp, Seg::Data { seq: 1 });
        assert_eq!(nat.outbound(data.clone()).unwrap_err(), NatDrop::TcpUnknown);

        // the syn opens the flow, then everything passes both ways
        let syn = nat
            .outbound(pkt(inner(), server(), Proto::Tcp, Seg::Syn))
            .unwrap();
        let synack = nat
            .inbound(pkt(server(), syn.src, Proto::Tcp, Seg::SynAck))
            .unwrap();
        assert_eq!(synack.dst, inner());
        assert!(nat.outbound(data).is_ok());
    }

    #[test]
    fn strict_tcp_ignores_wrapped_packets() {
        let mut nat = NatBox::new(outer(), true, false);
        let data = pkt(inner(), server(), Proto::Tcp, Seg::Data { seq: 1 }).wrap_udp();
        // outer header says udp, so the tcp flow check never applies
        let out = nat.outbound(data).unwrap();
        assert_eq!(out.src.0, outer());
        let back = nat
            .inbound(pkt(server(), out.src, Proto::Tcp, Seg::Data { seq: 2 }).wrap_udp())
            .unwrap();
        assert_eq!(back.dst, inner());
    }

    #[test]
    fn udp_verification_gates_inbound_sources() {
        let mut nat = NatBox::new(outer(), false, true);
        let out = nat
            .outbound(pkt(inner(), server(), Proto::Udp, Seg::Dgram))
            .unwrap();
        // reply from the contacted server passes
        assert!(nat.inbound(pkt(server(), out.src, Proto::Udp, Seg::Dgram)).is_ok());
        // same port, different source host does not
        let stranger = (Ipv4Addr::new(9, 9, 9, 9), 443);
        assert_eq!(
            nat.inbound(pkt(stranger, out.src, Proto::Udp, Seg::Dgram))
                .unwrap_err(),
            NatDrop::UdpUnknown
        );
    }

    #[test]
    fn distinct_inner_sockets_get_distinct_ports() {
        let mut nat = NatBox::new(outer(), false, false);
        let a = nat
            .outbound(pkt(inner(), server(), Proto::Udp, Seg::Dgram))
            .unwrap();
        let other = (Ipv4Addr::new(192, 168, 1, 3), 4000);
        let b = nat
            .outbound(pkt(other, server(), Proto::Udp, Seg::Dgram))
            .unwrap();
        assert_ne!(a.src.1, b.src.1);
        assert_eq!(b.src.1, PORT_BASE + 1);
    }
}
