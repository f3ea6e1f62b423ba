//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`), keyed by
//! `seed_from_u64(seed ^ domain)` and positioned with `set_stream(index)`. A
//! domain constant separates independent consumers; the stream index makes a
//! draw depend only on `(seed, index)` rather than on how many draws came
//! before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as Rng;

pub mod domain {
    pub const VIEWS: u64 = 0x7669_6577_7300_0001;
    pub const INIT: u64 = 0x696e_6974_0000_0002;
    pub const STAGE1: u64 = 0x7374_6731_0000_0003;
    pub const STAGE2: u64 = 0x7374_6732_0000_0004;
    pub const SYNTH: u64 = 0x7379_6e74_0000_0005;
    pub const KMEANS: u64 = 0x6b6d_6e73_0000_0006;
}

pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ domain);
    r.set_stream(index);
    r
}
