use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of tags into an independent stream seed.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

// stream tags
pub const PERSON: u64 = 1;
pub const OUTFIT: u64 = 2;
pub const SAMPLE: u64 = 3;
pub const FACELESS: u64 = 4;
pub const DEGRADE: u64 = 5;
pub const INIT: u64 = 6;
pub const SAMPLER: u64 = 7;
