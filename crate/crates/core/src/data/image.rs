use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::profile::ProfileSpec;
use crate::autodiff::Tensor;

/// Channels, side length and tile size of a face card.
pub const CARD_CHANNELS: usize = 3;
pub const CARD_SIDE: usize = 16;
pub const CARD_TILE: usize = 4;

/// Default standard deviation of the per-pixel noise.
pub const CARD_NOISE: f64 = 0.1;

/// Smallest L2 distance between the noise-free cards of two different
/// profiles: one differing channel changes 8 of 16 pixels by 2 in each of
/// the 16 tiles, so the distance is `sqrt(16 · 8 · 4)`.
pub const CARD_SEPARATION: f64 = 22.627416997969522;

/// Entry `(row, col)` of the 16 × 16 Sylvester–Hadamard matrix.
fn hadamard(row: usize, col: usize) -> f64 {
    if (row & col).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Renders a profile as a `3 × 16 × 16` "face card".
///
/// Each channel repeats one 4 × 4 tile across the card: channel 0 encodes
/// the age class, channel 1 the gender and race pair, channel 2 the
/// emotion. Tiles are distinct rows of a Hadamard matrix (skipping the
/// constant row), so any two classes differ in exactly half the pixels.
/// Gaussian noise with standard deviation `noise`, drawn from `seed`, is
/// added on top; `noise = 0` gives the bare pattern.
pub fn synth_image(p: &ProfileSpec, seed: u64, noise: f64) -> Tensor {
    let codes = [
        p.age.index(),
        p.gender.index() * super::profile::Race::ALL.len() + p.race.index(),
        p.emotion.index(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let side = CARD_SIDE;
    Tensor::from_fn(&[CARD_CHANNELS, side, side], |i| {
        let ch = i / (side * side);
        let (y, x) = ((i / side) % side, i % side);
        let cell = (y % CARD_TILE) * CARD_TILE + x % CARD_TILE;
        let v = hadamard(codes[ch] + 1, cell);
        if noise > 0.0 {
            v + dist.sample(&mut rng)
        } else {
            v
        }
    })
}
