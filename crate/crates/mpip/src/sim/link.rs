//! Point-to-point duplex links with a serializer and a bounded FIFO.
//!
//! Each direction owns an independent transmission pipeline: packets
//! wait in a drop-tail queue, serialize one at a time at the link rate,
//! then propagate for the configured delay. The queue is modeled as the
//! set of packets whose serialization has not finished, so occupancy
//! falls out of finish timestamps instead of extra events.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::packet::{SimPacket, MTU};

/// Why a link refused a packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkDrop {
    Down,
    QueueOverflow,
    Loss,
}

impl LinkDrop {
    pub fn reason(&self) -> &'static str {
        match self {
            LinkDrop::Down => "link_down",
            LinkDrop::QueueOverflow => "queue_overflow",
            LinkDrop::Loss => "loss",
        }
    }
}

#[derive(Debug)]
struct Direction {
    /// serialization finish times of packets still in the pipeline
    busy: VecDeque<u64>,
    rng: ChaCha12Rng,
}

#[derive(Debug)]
pub struct Link {
    /// (node index, interface index) endpoints
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub bw_bps: u64,
    pub prop_us: u64,
    pub loss: f64,
    pub queue_cap: usize,
    pub up: bool,
    dirs: [Direction; 2],
}

impl Link {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: (usize, usize),
        b: (usize, usize),
        bw_bps: u64,
        prop_us: u64,
        loss: f64,
        queue_cap: usize,
        rng_ab: ChaCha12Rng,
        rng_ba: ChaCha12Rng,
    ) -> Self {
        Link {
            a,
            b,
            bw_bps,
            prop_us,
            loss,
            queue_cap,
            up: true,
            dirs: [
                Direction { busy: VecDeque::new(), rng: rng_ab },
                Direction { busy: VecDeque::new(), rng: rng_ba },
            ],
        }
    }

    /// Direction index for a transmission entering at `from` endpoint.
    pub fn dir_from(&self, from: (usize, usize)) -> Option<usize> {
        if from == self.a {
            Some(0)
        } else if from == self.b {
            Some(1)
        } else {
            None
        }
    }

    pub fn far_end(&self, dir: usize) -> (usize, usize) {
        if dir == 0 {
            self.b
        } else {
            self.a
        }
    }

    /// Offers a packet to one direction. Returns the absolute delivery
    /// time at the far end, or why the packet died.
    pub fn ingress(&mut self, now_us: u64, dir: usize, pkt: &SimPacket) -> Result<u64, LinkDrop> {
        debug_assert!(pkt.wire_bytes() <= MTU, "wire packet exceeds mtu");
        if !self.up {
            return Err(LinkDrop::Down);
        }
        let d = &mut self.dirs[dir];
        while d.busy.front().is_some_and(|f| *f <= now_us) {
            d.busy.pop_front();
        }
        if d.busy.len() >= self.queue_cap {
            return Err(LinkDrop::QueueOverflow);
        }
        if self.loss > 0.0 && d.rng.gen::<f64>() < self.loss {
            return Err(LinkDrop::Loss);
        }
        let ser_us = ser_time_us(pkt.wire_bits(), self.bw_bps);
        let start = d.busy.back().copied().unwrap_or(0).max(now_us);
        let finish = start + ser_us;
        d.busy.push_back(finish);
        Ok(finish + self.prop_us)
    }

    pub fn set_up(&mut self, up: bool) {
        self.up = up;
        if !up {
            for d in &mut self.dirs {
                d.busy.clear();
            }
        }
    }

    /// Packets currently queued or serializing in one direction.
    pub fn occupancy(&self, now_us: u64, dir: usize) -> usize {
        self.dirs[dir].busy.iter().filter(|f| **f > now_us).count()
    }
}

/// Serialization time, rounded up to whole microseconds.
pub fn ser_time_us(bits: u64, bw_bps: u64) -> u64 {
    (bits * 1_000_000).div_ceil(bw_bps)
}
