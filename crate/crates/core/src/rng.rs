//! Seeded random substreams.
//!
//! Every random draw in the pipeline comes from a ChaCha generator keyed by a
//! run seed, a named [`Stream`] and an index (step, episode, ...). Streams
//! never share state, so e.g. evaluation-time draws cannot perturb training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Sampling = 3,
    Synth = 4,
    Corrupt = 5,
    Eval = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with an index into a new 64-bit seed.
pub fn derive(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, index));
    rng.set_stream(stream as u64);
    rng
}
