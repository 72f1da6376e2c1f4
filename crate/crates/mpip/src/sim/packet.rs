//! The unit the simulator moves around: one wire packet.
//!
//! Payload bytes are never materialized; packets carry lengths and
//! identities instead. `uid` names one wire emission, `origin` names
//! the logical payload, so duplicates made for probing or protection
//! share an origin while every copy stays individually traceable.

use std::net::Ipv4Addr;

use crate::tables::{Proto, Sock};
use crate::wire::ControlMessage;

pub const IP_HEADER: u32 = 20;
pub const TCP_HEADER: u32 = 20;
pub const UDP_HEADER: u32 = 8;
pub const MTU: u32 = 1500;
/// room the control block takes out of the payload budget
pub const CM_OVERHEAD: u32 = 25;

/// biggest transport payload that still fits the mtu with a control
/// block attached
pub fn max_payload(proto: Proto) -> u32 {
    let transport = match proto {
        Proto::Tcp => TCP_HEADER,
        Proto::Udp => UDP_HEADER,
    };
    MTU - IP_HEADER - transport - CM_OVERHEAD
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Seg {
    /// tcp payload segment, sequence counted in whole segments
    Data { seq: u64 },
    /// cumulative tcp acknowledgment
    Ack { cum: u64 },
    Syn,
    SynAck,
    /// final leg of a three-way handshake
    HsAck,
    /// udp datagram
    Dgram,
    /// heartbeat, zero payload
    Beat,
    /// bare control carrier, zero payload
    Note,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimPacket {
    pub uid: u64,
    pub origin: u64,
    pub src: Sock,
    pub dst: Sock,
    /// the session's transport protocol (inner protocol when wrapped)
    pub proto: Proto,
    pub seg: Seg,
    pub payload_len: u32,
    pub cm: Option<ControlMessage>,
    /// tcp packet encapsulated in an outer udp header
    pub wrapped: bool,
    /// when the logical payload came into being; copies inherit it
    pub created_us: u64,
}

impl SimPacket {
    /// Protocol as seen on the wire and by middleboxes.
    pub fn outer_proto(&self) -> Proto {
        if self.wrapped {
            Proto::Udp
        } else {
            self.proto
        }
    }

    pub fn wire_bytes(&self) -> u32 {
        let transport = match self.proto {
            Proto::Tcp => TCP_HEADER,
            Proto::Udp => UDP_HEADER,
        };
        let mut n = IP_HEADER + transport + self.payload_len;
        if self.cm.is_some() {
            n += CM_OVERHEAD;
        }
        if self.wrapped {
            n += UDP_HEADER;
        }
        n
    }

    pub fn wire_bits(&self) -> u64 {
        self.wire_bytes() as u64 * 8
    }

    /// Encapsulates a tcp packet in an outer udp header so NAT boxes
    /// treat it as a udp flow.
    pub fn wrap_udp(mut self) -> SimPacket {
        debug_assert_eq!(self.proto, Proto::Tcp);
        self.wrapped = true;
        self
    }

    /// Removes the outer udp header again.
    pub fn unwrap_udp(mut self) -> SimPacket {
        self.wrapped = false;
        self
    }
}

pub fn sock(addr: Ipv4Addr, port: u16) -> Sock {
    (addr, port)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt() -> SimPacket {
        SimPacket {
            uid: 1,
            origin: 1,
            src: (Ipv4Addr::new(10, 0, 0, 1), 4000),
            dst: (Ipv4Addr::new(10, 0, 0, 2), 80),
            proto: Proto::Tcp,
            seg: Seg::Data { seq: 5 },
            payload_len: 1400,
            cm: None,
            wrapped: false,
            created_us: 0,
        }
    }

    #[test]
    fn wire_size_accounts_for_each_layer() {
        let mut p = pkt();
        assert_eq!(p.wire_bytes(), 20 + 20 + 1400);
        p.cm = Some(ControlMessage::new(1, 1));
        assert_eq!(p.wire_bytes(), 20 + 20 + 1400 + 25);
        let wrapped = p.clone().wrap_udp();
        assert_eq!(wrapped.wire_bytes(), 20 + 8 + 20 + 1400 + 25);
        assert_eq!(wrapped.outer_proto(), Proto::Udp);
    }

    #[test]
    fn wrap_then_unwrap_restores_the_packet() {
        let mut p = pkt();
        p.cm = Some(ControlMessage::new(1, 1));
        let back = p.clone().wrap_udp().unwrap_udp();
        assert_eq!(back, p);
    }

    #[test]
    fn payload_budget_leaves_room_for_control_block() {
        assert_eq!(max_payload(Proto::Tcp), 1435);
        assert_eq!(max_payload(Proto::Udp), 1447);
        let mut p = pkt();
        p.payload_len = max_payload(Proto::Tcp);
        p.cm = Some(ControlMessage::new(1, 1));
        assert_eq!(p.wire_bytes(), MTU);
    }
}
