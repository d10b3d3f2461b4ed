//! Counter-based random streams.
//!
//! Every random quantity in a run is drawn from a ChaCha8 stream addressed
//! by `(master seed, domain, index)`. The 256-bit ChaCha key is expanded from
//! `(master, domain)` with SplitMix64, and `index` selects the 64-bit ChaCha
//! stream number. A replica therefore sees the same numbers no matter which
//! thread runs it or in which order replicas are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Domain tags keep the streams of different pipeline stages disjoint.
pub mod domain {
    pub const ENVIRONMENT: u64 = 0x454e_5649;
    pub const RHO: u64 = 0x5248_4f00;
    pub const RENEWAL: u64 = 0x5245_4e57;
    pub const MINUS: u64 = 0x4d49_4e55;
    pub const PLUS: u64 = 0x504c_5553;
    pub const CONDITIONAL_Z: u64 = 0x435a_0000;
    pub const PERMUTATION: u64 = 0x5045_524d;
    pub const SEQUENTIAL: u64 = 0x5345_5155;
    pub const TEST: u64 = 0x5445_5354;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamFactory {
    master: u64,
}

impl StreamFactory {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Stream `index` within `domain`.
    pub fn stream(&self, domain: u64, index: u64) -> Stream {
        let mut state = self.master ^ domain.rotate_left(32);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }

    /// A child factory, used when one stage needs a whole family of streams
    /// (e.g. one per sweep point).
    pub fn child(&self, domain: u64, index: u64) -> StreamFactory {
        let mut state = self.master ^ domain.rotate_left(17) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93);
        StreamFactory::new(splitmix64(&mut state))
    }
}
