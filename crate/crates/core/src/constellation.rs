//! Square QAM constellations with Gray labels, and reference symbol
//! distributions (uniform and Maxwell-Boltzmann).

use alloc::vec::Vec;

use crate::autodiff::Tensor;
use crate::math::{exp, log2, sqrt};
use crate::{Error, Result};

/// Square M-QAM with unit average energy under the uniform distribution.
///
/// Symbol index `i` carries the label whose integer value is `i`; the first
/// `m/2` label bits (most significant first) select the in-phase level and the
/// remaining bits the quadrature level, each through a reflected Gray code.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    points: Vec<(f64, f64)>,
    bits: usize,
}

fn gray_decode(mut g: usize) -> usize {
    let mut b = 0;
    while g != 0 {
        b ^= g;
        g >>= 1;
    }
    b
}

impl Constellation {
    pub fn qam(order: usize) -> Result<Self> {
        if !matches!(order, 4 | 16 | 64 | 256) {
            return Err(Error::UnsupportedOrder(order));
        }
        let bits = order.trailing_zeros() as usize;
        let half = bits / 2;
        let side = 1usize << half;
        let norm = 1.0 / sqrt(2.0 * ((side * side - 1) as f64) / 3.0);
        let level = |g: usize| (2.0 * gray_decode(g) as f64 - (side as f64 - 1.0)) * norm;
        let mask = side - 1;
        let points = (0..order)
            .map(|i| (level(i >> half), level(i & mask)))
            .collect();
        Ok(Constellation { points, bits })
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    /// Bits per symbol, `log2(M)`.
    pub fn bits_per_symbol(&self) -> usize {
        self.bits
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn point(&self, i: usize) -> (f64, f64) {
        self.points[i]
    }

    /// Label bit `b` (0 = most significant) of symbol `i`.
    pub fn bit(&self, i: usize, b: usize) -> u8 {
        ((i >> (self.bits - 1 - b)) & 1) as u8
    }

    pub fn label(&self, i: usize) -> u32 {
        i as u32
    }

    pub fn energy(&self, i: usize) -> f64 {
        let (re, im) = self.points[i];
        re * re + im * im
    }

    pub fn energies(&self) -> Vec<f64> {
        (0..self.order()).map(|i| self.energy(i)).collect()
    }

    /// Points as an `[M, 2]` tensor.
    pub fn points_tensor(&self) -> Tensor {
        Tensor::complex(&self.points)
    }

    /// Index of the point nearest to `y`.
    pub fn nearest(&self, y: (f64, f64)) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &(re, im)) in self.points.iter().enumerate() {
            let d = (y.0 - re) * (y.0 - re) + (y.1 - im) * (y.1 - im);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Probability mass function over constellation indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolDistribution {
    probs: Vec<f64>,
}

impl SymbolDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput);
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("probabilities must sum to one"));
        }
        Ok(SymbolDistribution { probs })
    }

    /// Normalises arbitrary non-negative weights.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        let s: f64 = w.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::invalid("weights must have a positive finite sum"));
        }
        let mut probs: Vec<f64> = w.iter().map(|x| x / s).collect();
        // Fold the rounding residue into the largest entry.
        let resid = 1.0 - probs.iter().sum::<f64>();
        let imax = crate::autodiff::argmax(&probs);
        probs[imax] += resid;
        Self::new(probs)
    }

    pub fn uniform(m: usize) -> Self {
        SymbolDistribution {
            probs: alloc::vec![1.0 / m as f64; m],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy_bits(&self) -> f64 {
        entropy_bits(&self.probs)
    }

    pub fn mean_energy(&self, cst: &Constellation) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| p * cst.energy(i))
            .sum()
    }
}

/// Shannon entropy in bits of a probability vector.
pub fn entropy_bits(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * log2(x))
        .sum()
}

/// `p_i ∝ exp(-nu |c_i|^2)`.
pub fn mb_distribution(cst: &Constellation, nu: f64) -> Result<SymbolDistribution> {
    if !(nu >= 0.0) {
        return Err(Error::invalid("Maxwell-Boltzmann rate must be non-negative"));
    }
    let e = cst.energies();
    let e_min = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = e.iter().map(|&x| exp(-nu * (x - e_min))).collect();
    SymbolDistribution::from_weights(&w)
}

/// Lowest entropy reachable by Maxwell-Boltzmann shaping (uniform over the
/// innermost energy shell).
pub fn mb_entropy_floor(cst: &Constellation) -> f64 {
    let e = cst.energies();
    let e_min = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let n = e.iter().filter(|&&x| (x - e_min).abs() < 1e-12).count();
    log2(n as f64)
}

/// Maxwell-Boltzmann distribution with entropy `target_bits`, found by
/// bisection on the rate parameter.
pub fn match_entropy(cst: &Constellation, target_bits: f64) -> Result<SymbolDistribution> {
    let h_max = log2(cst.order() as f64);
    let h_min = mb_entropy_floor(cst);
    if !(target_bits >= h_min - 1e-12 && target_bits <= h_max + 1e-12) {
        return Err(Error::EntropyOutOfRange {
            target: target_bits,
            min: h_min,
            max: h_max,
        });
    }
    if target_bits >= h_max - 1e-12 {
        return Ok(SymbolDistribution::uniform(cst.order()));
    }
    let h = |nu: f64| mb_distribution(cst, nu).map(|d| d.entropy_bits());

    let mut hi = 1.0;
    while h(hi)? > target_bits {
        hi *= 2.0;
        if hi > 1e6 {
            // Target sits at the floor within rounding; the limit is the answer.
            return mb_distribution(cst, hi);
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let hm = h(mid)?;
        if (hm - target_bits).abs() < 1e-12 {
            return mb_distribution(cst, mid);
        }
        if hm > target_bits {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mb_distribution(cst, 0.5 * (lo + hi))
}

/// Rate parameter of the Maxwell-Boltzmann distribution with `target_bits`.
pub fn mb_rate_for_entropy(cst: &Constellation, target_bits: f64) -> Result<f64> {
    let d = match_entropy(cst, target_bits)?;
    // Invert p_i ∝ exp(-nu e_i) using the extreme energies.
    let e = cst.energies();
    let (imin, imax) = e.iter().enumerate().fold((0, 0), |(a, b), (i, &x)| {
        (if x < e[a] { i } else { a }, if x > e[b] { i } else { b })
    });
    if e[imax] == e[imin] {
        return Ok(0.0);
    }
    let p = d.probs();
    Ok(crate::math::ln(p[imin] / p[imax]) / (e[imax] - e[imin]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sixty_four_qam_geometry() {
        let c = Constellation::qam(64).unwrap();
        assert_eq!(c.bits_per_symbol(), 6);
        // Levels ±{1,3,5,7} scaled by 1/sqrt(42).
        let s = 1.0 / 42f64.sqrt();
        let mut re: Vec<f64> = c.points().iter().map(|p| (p.0 / s).round()).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        re.dedup();
        assert_eq!(re, [-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0]);
        let max_e = c.energies().into_iter().fold(0.0, f64::max);
        assert!((max_e - 49.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn qpsk_points() {
        let c = Constellation::qam(4).unwrap();
        let r = core::f64::consts::FRAC_1_SQRT_2;
        for &(a, b) in c.points() {
            assert!((a.abs() - r).abs() < 1e-15 && (b.abs() - r).abs() < 1e-15);
        }
    }

    #[test]
    fn unsupported_order() {
        assert_eq!(Constellation::qam(32), Err(Error::UnsupportedOrder(32)));
        assert!(Constellation::qam(8).is_err());
    }

    #[test]
    fn unit_energy_distinct_labels_and_gray_neighbours() {
        for m in [4, 16, 64, 256] {
            let c = Constellation::qam(m).unwrap();
            let mean: f64 = c.energies().iter().sum::<f64>() / m as f64;
            assert!((mean - 1.0).abs() < 1e-12, "M={m}: {mean}");

            let mut labels: Vec<u32> = (0..m).map(|i| c.label(i)).collect();
            labels.sort();
            labels.dedup();
            assert_eq!(labels.len(), m);

            let side = (m as f64).sqrt() as usize;
            let d = 2.0 / (2.0 * ((side * side - 1) as f64) / 3.0).sqrt();
            let mut pairs = 0;
            for i in 0..m {
                for j in (i + 1)..m {
                    let (a, b) = (c.point(i), c.point(j));
                    let same_q = (a.1 - b.1).abs() < 1e-9 && ((a.0 - b.0).abs() - d).abs() < 1e-9;
                    let same_i = (a.0 - b.0).abs() < 1e-9 && ((a.1 - b.1).abs() - d).abs() < 1e-9;
                    if same_q || same_i {
                        pairs += 1;
                        assert_eq!((c.label(i) ^ c.label(j)).count_ones(), 1, "M={m} {i} {j}");
                    }
                }
            }
            assert_eq!(pairs, 2 * side * (side - 1));
        }
    }

    #[test]
    fn mb_limits() {
        let c = Constellation::qam(64).unwrap();
        let u = mb_distribution(&c, 0.0).unwrap();
        assert!((u.entropy_bits() - 6.0).abs() < 1e-12);
        let tight = mb_distribution(&c, 400.0).unwrap();
        assert!((tight.entropy_bits() - 2.0).abs() < 1e-6);
        assert!(mb_distribution(&c, -1.0).is_err());
    }

    /// Entropy computed directly from the definition, independent of the
    /// library helpers.
    fn oracle_entropy(c: &Constellation, nu: f64) -> f64 {
        let w: Vec<f64> = c.points().iter().map(|(a, b)| libm::exp(-nu * (a * a + b * b))).collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| x / z).map(|p| -p * libm::log2(p)).sum()
    }

    #[test]
    fn match_entropy_hits_targets() {
        let c = Constellation::qam(64).unwrap();
        for target in [5.5, 5.0] {
            let nu = mb_rate_for_entropy(&c, target).unwrap();
            assert!((oracle_entropy(&c, nu) - target).abs() < 1e-6, "{target}");
            let d = match_entropy(&c, target).unwrap();
            assert!((d.entropy_bits() - target).abs() < 1e-6);
        }
        let full = match_entropy(&c, 6.0).unwrap();
        assert_eq!(full, SymbolDistribution::uniform(64));
        assert!(matches!(match_entropy(&c, 6.5), Err(Error::EntropyOutOfRange { .. })));
        assert!(matches!(match_entropy(&c, 1.5), Err(Error::EntropyOutOfRange { .. })));
    }

    #[test]
    fn mb_is_rotation_invariant() {
        let c = Constellation::qam(64).unwrap();
        let d = match_entropy(&c, 5.3).unwrap();
        for i in 0..64 {
            let (a, b) = c.point(i);
            // 90 degree rotation maps (a, b) to (-b, a).
            let j = c.nearest((-b, a));
            assert!((d.probs()[i] - d.probs()[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn distribution_validation() {
        assert!(SymbolDistribution::new(alloc::vec![0.5, 0.6]).is_err());
        assert!(SymbolDistribution::new(alloc::vec![-0.1, 1.1]).is_err());
        assert!(SymbolDistribution::new(alloc::vec![0.25; 4]).is_ok());
    }

    proptest! {
        #[test]
        fn match_entropy_inverts_entropy(target in 2.0f64..6.0) {
            let c = Constellation::qam(64).unwrap();
            let d = match_entropy(&c, target).unwrap();
            prop_assert!((d.entropy_bits() - target).abs() < 1e-6);
        }
    }
}
