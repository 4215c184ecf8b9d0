//! Tensor storage and reverse-mode automatic differentiation.
//!
//! Everything downstream (paths, models, training) is built on the three
//! pieces here: immutable f64 [`Tensor`]s, the recording [`Tape`] with its
//! backward sweep, and [`gradient_check`] as the independent oracle that the
//! backward rules are measured against.

mod conv;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::{element_count, Tensor};

/// Derives an independent rng seed from a base seed and a stream index.
///
/// Used wherever one user-facing seed has to fan out into several
/// non-overlapping streams (per-sample noise lanes, per-epoch shuffles).
/// SplitMix64 finalizer; full avalanche, so adjacent streams are uncorrelated.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
