//! Control message (CM) block codec.
//!
//! Every multipath-enabled packet carries a fixed 25-byte CM block
//! appended after the transport payload. Wire layout, big-endian:
//!
//! ```text
//! byte  0        version (bits 7..6, always 01) | flags (bits 5..0)
//! bytes 1..=6    sender node id (48 bit)
//! bytes 7..=8    session id
//! byte  9        path id of the path this packet was sent on
//! byte  10       path id the delay feedback refers to (0 = none)
//! bytes 11..=14  sender-local send timestamp, ms, wraps
//! bytes 15..=18  smoothed one-way delay feedback, ms, signed
//! byte  19       number of addresses on the sender
//! bytes 20..=23  one advertised IPv4 address (senders rotate the list)
//! byte  24       xor of bytes 0..=23
//! ```

use std::net::Ipv4Addr;
use thiserror::Error;

pub const CM_LEN: usize = 25;
pub const CM_VERSION: u8 = 1;

/// node ids are 48-bit quantities (they come from MAC addresses)
pub const MAX_NODE_ID: u64 = (1 << 48) - 1;

pub const FLAG_ENABLE: u8 = 1 << 0;
pub const FLAG_ENABLED: u8 = 1 << 1;
pub const FLAG_HS: u8 = 1 << 2;
pub const FLAG_IP_CHANGE: u8 = 1 << 3;
pub const FLAG_HEARTBEAT: u8 = 1 << 4;
pub const FLAG_PROTECTED: u8 = 1 << 5;

/// mask of the bits in byte 0 that hold real flags
pub const FLAG_MASK: u8 = 0x3f;

pub type NodeId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlMessage {
    pub flags: u8,
    pub node_id: NodeId,
    pub session_id: u16,
    pub path_id: u8,
    pub feedback_path_id: u8,
    pub timestamp_ms: u32,
    pub path_delay_ms: i32,
    pub addr_count: u8,
    pub addr_slot: Ipv4Addr,
}

impl ControlMessage {
    pub fn new(node_id: NodeId, session_id: u16) -> Self {
        ControlMessage {
            flags: 0,
            node_id,
            session_id,
            path_id: 0,
            feedback_path_id: 0,
            timestamp_ms: 0,
            path_delay_ms: 0,
            addr_count: 0,
            addr_slot: Ipv4Addr::UNSPECIFIED,
        }
    }

    pub fn has(&self, flag: u8) -> bool {
        self.flags & flag != 0
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("control block truncated: {0} bytes, need {CM_LEN}")]
    Truncated(usize),
    #[error("control block checksum mismatch")]
    Corrupt,
    #[error("control block version bits invalid: {0:#04b}")]
    Malformed(u8),
}

fn xor_fold(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0, |acc, b| acc ^ b)
}

/// Packs a control message into its 25-byte wire form.
pub fn encode_cm(cm: &ControlMessage) -> [u8; CM_LEN] {
    debug_assert!(cm.node_id <= MAX_NODE_ID, "node id exceeds 48 bits");
    debug_assert!(cm.flags & !FLAG_MASK == 0, "flag bits outside 5..0");
    let mut out = [0u8; CM_LEN];
    out[0] = (CM_VERSION << 6) | (cm.flags & FLAG_MASK);
    out[1..7].copy_from_slice(&cm.node_id.to_be_bytes()[2..8]);
    out[7..9].copy_from_slice(&cm.session_id.to_be_bytes());
    out[9] = cm.path_id;
    out[10] = cm.feedback_path_id;
    out[11..15].copy_from_slice(&cm.timestamp_ms.to_be_bytes());
    out[15..19].copy_from_slice(&cm.path_delay_ms.to_be_bytes());
    out[19] = cm.addr_count;
    out[20..24].copy_from_slice(&cm.addr_slot.octets());
    out[24] = xor_fold(&out[..24]);
    out
}

/// Unpacks the control message sitting in the trailing 25 bytes of `block`.
///
/// Checks run in order: length, checksum, version. A corrupted version
/// byte therefore reports as `Corrupt`, not `Malformed`, because the
/// checksum already fails.
pub fn decode_cm(block: &[u8]) -> Result<ControlMessage, WireError> {
    if block.len() < CM_LEN {
        return Err(WireError::Truncated(block.len()));
    }
    let b = &block[block.len() - CM_LEN..];
    if xor_fold(&b[..24]) != b[24] {
        return Err(WireError::Corrupt);
    }
    let version = b[0] >> 6;
    if version != CM_VERSION {
        return Err(WireError::Malformed(version));
    }
    let mut id = [0u8; 8];
    id[2..8].copy_from_slice(&b[1..7]);
    Ok(ControlMessage {
        flags: b[0] & FLAG_MASK,
        node_id: u64::from_be_bytes(id),
        session_id: u16::from_be_bytes([b[7], b[8]]),
        path_id: b[9],
        feedback_path_id: b[10],
        timestamp_ms: u32::from_be_bytes([b[11], b[12], b[13], b[14]]),
        path_delay_ms: i32::from_be_bytes([b[15], b[16], b[17], b[18]]),
        addr_count: b[19],
        addr_slot: Ipv4Addr::new(b[20], b[21], b[22], b[23]),
    })
}
