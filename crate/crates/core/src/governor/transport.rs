//! Seeded, tick-driven simulated network.

use std::collections::BTreeMap;

use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wire::{decode, encode, Envelope, EnvelopeKind, GovernorId};

/// The two governors cannot reach each other while `start <= tick < end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub start: u64,
    pub end: u64,
    pub between: (GovernorId, GovernorId),
}

impl Partition {
    fn cuts(&self, tick: u64, a: &GovernorId, b: &GovernorId) -> bool {
        let (x, y) = &self.between;
        (self.start..self.end).contains(&tick) && ((x == a && y == b) || (x == b && y == a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportContract {
    pub seed: u64,
    /// Inclusive range of ticks a message spends in flight.
    pub latency: (u64, u64),
    pub drop_probability: f64,
    pub duplicate_probability: f64,
    /// Chance that a blob reply arrives with its bytes altered.
    pub corrupt_probability: f64,
    /// Ticks between retransmissions of an unacknowledged message.
    pub retry_interval: u64,
    pub partitions: Vec<Partition>,
}

impl Default for TransportContract {
    fn default() -> Self {
        TransportContract {
            seed: 0,
            latency: (1, 1),
            drop_probability: 0.0,
            duplicate_probability: 0.0,
            corrupt_probability: 0.0,
            retry_interval: 8,
            partitions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub partitioned: u64,
    pub duplicated: u64,
    pub corrupted: u64,
}

pub struct Network {
    contract: TransportContract,
    rng: ChaCha8Rng,
    in_flight: BTreeMap<(u64, u64), Vec<u8>>,
    sequence: u64,
    stats: NetworkStats,
}

impl Network {
    pub fn new(contract: TransportContract) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(contract.seed);
        Network { contract, rng, in_flight: BTreeMap::new(), sequence: 0, stats: NetworkStats::default() }
    }

    pub fn contract(&self) -> &TransportContract {
        &self.contract
    }

    pub fn stats(&self) -> NetworkStats {
        self.stats
    }

    pub fn is_idle(&self) -> bool {
        self.in_flight.is_empty()
    }

    pub fn partitioned(&self, tick: u64, a: &GovernorId, b: &GovernorId) -> bool {
        self.contract.partitions.iter().any(|p| p.cuts(tick, a, b))
    }

    pub fn send(&mut self, envelope: &Envelope, now: u64) {
        self.stats.sent += 1;
        if self.partitioned(now, &envelope.from, &envelope.to) {
            self.stats.partitioned += 1;
            return;
        }
        if self.rng.random::<f64>() < self.contract.drop_probability {
            self.stats.dropped += 1;
            return;
        }
        let copies = if self.rng.random::<f64>() < self.contract.duplicate_probability {
            self.stats.duplicated += 1;
            2
        } else {
            1
        };
        for _ in 0..copies {
            let mut envelope = envelope.clone();
            if envelope.kind == EnvelopeKind::BlobReply && self.rng.random::<f64>() < self.contract.corrupt_probability {
                self.stats.corrupted += 1;
                tamper(&mut envelope);
            }
            let (lo, hi) = self.contract.latency;
            let delay = self.rng.random_range(lo.max(1)..=hi.max(lo.max(1)));
            self.sequence += 1;
            self.in_flight.insert((now + delay, self.sequence), encode(&envelope));
        }
    }

    /// Envelopes arriving at `now`, in a deterministic order.
    pub fn arrivals(&mut self, now: u64) -> Vec<Envelope> {
        let later = self.in_flight.split_off(&(now + 1, 0));
        let due = std::mem::replace(&mut self.in_flight, later);
        let mut out = Vec::new();
        for frame in due.into_values() {
            let (envelope, _) = decode(&frame).expect("frames are produced by encode");
            if self.partitioned(now, &envelope.from, &envelope.to) {
                self.stats.partitioned += 1;
                continue;
            }
            self.stats.delivered += 1;
            out.push(envelope);
        }
        out
    }
}

fn tamper(envelope: &mut Envelope) {
    let engine = base64::engine::general_purpose::STANDARD;
    if let Some(serde_json::Value::String(text)) = envelope.payload.get_mut("bytes") {
        let mut bytes = engine.decode(text.as_bytes()).unwrap_or_default();
        match bytes.first_mut() {
            Some(b) => *b ^= 0xff,
            None => bytes.push(0),
        }
        *text = engine.encode(bytes);
    }
}
