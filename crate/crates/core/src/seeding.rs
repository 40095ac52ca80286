//! Deterministic derivation of independent seeds from a run seed.

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`; distinct paths give unrelated seeds.
///
/// The accumulator is rotated before each part so the fold is not symmetric
/// (`derive(a, &[b]) != derive(b, &[a])`).
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc.rotate_left(23) ^ mix(p)))
}
