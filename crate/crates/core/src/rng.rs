use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The single generator type used throughout; every stochastic component is
/// driven from an explicit seed.
pub type DnaRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DnaRng {
    ChaCha8Rng::seed_from_u64(seed)
}
