//! Deterministic random streams.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::math::{ln, sqrt};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `id` derived from `seed`; streams never overlap.
pub fn stream(seed: u64, id: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Uniform on the open interval (0, 1).
pub fn open01(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

pub fn gumbel(rng: &mut Rng) -> f64 {
    -ln(-ln(open01(rng)))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Circular complex Gaussian sample with total variance `var` (re, im).
pub fn complex_normal(rng: &mut Rng, var: f64) -> (f64, f64) {
    let s = sqrt(var / 2.0);
    (s * normal(rng), s * normal(rng))
}

/// Index drawn from a (not necessarily normalised) non-negative weight vector.
pub fn categorical(rng: &mut Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
