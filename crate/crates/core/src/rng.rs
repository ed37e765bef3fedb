use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// All stochastic code paths draw from this generator so a `u64` seed pins
/// every result bit-for-bit across platforms.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a parent seed and a tag.
pub fn substream(seed: u64, tag: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}
