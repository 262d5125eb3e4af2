//! Labelled, independently seeded random streams.
//!
//! Every stochastic consumer (data sampling, latent noise, view sampling,
//! parameter initialization) draws from its own ChaCha stream keyed by the
//! run seed and selected by a hash of the label, so extra draws on one
//! stream never shift another.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub type Stream = ChaCha8Rng;

pub const DATA: &str = "data";
pub const NOISE: &str = "noise";
pub const VIEWS: &str = "views";
pub const INIT: &str = "init";

fn label_hash(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn seeded_rng(seed: u64, label: &str) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(label));
    rng
}

/// Standard normal draws.
pub fn normal_vec(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Uniform draw in `[lo, hi]`; returns `lo` exactly for a degenerate range.
pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        // still consume a word so streams stay aligned across configs
        let _: f64 = rng.random();
        return lo;
    }
    lo + (hi - lo) * rng.random::<f64>()
}

/// Position of a stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl StreamState {
    pub fn capture(rng: &Stream) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Option<Stream> {
        let bytes: [u8; 32] = hex::decode(&self.seed).ok()?.try_into().ok()?;
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

/// The named streams a training run owns.
#[derive(Clone, Debug)]
pub struct Streams {
    streams: BTreeMap<String, Stream>,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let streams = [DATA, NOISE, VIEWS, INIT].into_iter().map(|l| (l.to_string(), seeded_rng(seed, l))).collect();
        Self { streams }
    }

    pub fn get(&mut self, label: &str) -> &mut Stream {
        self.streams.get_mut(label).unwrap_or_else(|| panic!("unknown stream `{label}`"))
    }

    pub fn capture(&self) -> BTreeMap<String, StreamState> {
        self.streams.iter().map(|(k, v)| (k.clone(), StreamState::capture(v))).collect()
    }

    pub fn restore(states: &BTreeMap<String, StreamState>) -> Option<Self> {
        let streams = states.iter().map(|(k, s)| Some((k.clone(), s.restore()?))).collect::<Option<_>>()?;
        Some(Self { streams })
    }
}
