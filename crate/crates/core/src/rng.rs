use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator for an independent substream.
///
/// Substreams let callers derive per-item randomness (one comparison, one
/// bootstrap trial, one self-chat) that does not depend on processing order.
pub(crate) fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
