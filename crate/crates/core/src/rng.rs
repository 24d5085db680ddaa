//! Keyed random substreams derived from one master seed.
//!
//! Every draw in a run comes from a stream keyed by `(purpose, a, b)`, e.g.
//! `(Gossip, round, fragment)` or `(LocalSgd, round, node)`. Changing the
//! number of fragments or the metrics cadence therefore never shifts the
//! randomness seen by unrelated parts of the simulation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Gossip = 1,
    LocalSgd = 2,
    Init = 3,
    Optimum = 4,
    Dataset = 5,
    TestSet = 6,
    Partition = 7,
    ConsensusStart = 8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Substreams {
    master: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Substreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, purpose: Purpose, a: u64, b: u64) -> Stream {
        let mut h = splitmix(self.master);
        h = splitmix(h ^ purpose as u64);
        h = splitmix(h ^ a);
        h = splitmix(h ^ b.rotate_left(32));
        ChaCha8Rng::seed_from_u64(h)
    }
}
