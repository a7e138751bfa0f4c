//! First-order perturbative fiber channel and AWGN.
//!
//! Symbols live in unit-power coordinates. A launch power `P` enters only
//! through `γP` in the nonlinear terms and through the noise variance
//! `σ²_ASE / P`.
//!
//! For an output symbol `x_t` the model is
//!
//! ```text
//! y_t = x_t exp(jγP Σ_n (|x_{t-n}|² - 1) c_n)
//!     + jγP Σ_{(m,n)∈S} x_{t+m} x_{t+n} x*_{t+m+n} C_{m,n} + n_t
//! ```
//!
//! with `|m|, |n| ≤ N`. Triplets with `m = 0` or `n = 0` reduce to
//! `x_t |x_{t+k}|²` and are folded into the phase: `c_0 = C_{0,0}` and
//! `c_n = 2 C_{0,n}` for `n ≠ 0`. The additive set is
//! `S = {m ≠ 0, n ≠ 0, |m + n| ≤ N}`, so a guard of `N` symbols on each side
//! covers every index the sum touches.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use num_complex::Complex64;

use crate::autodiff::{BackwardRule, Tape, Tensor, Var};
use crate::math::{cos, dbm_to_watt, exp, integrate_complex, sin, sqrt, PI};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Planck constant, J s.
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Standard single-mode fiber link with one EDFA per span.
#[derive(Clone, Debug, PartialEq)]
pub struct FiberParams {
    /// Attenuation, dB/km.
    pub alpha_db_km: f64,
    /// Dispersion parameter D, ps/(nm km).
    pub dispersion_ps_nm_km: f64,
    /// Nonlinearity γ, 1/(W km).
    pub gamma: f64,
    pub span_km: f64,
    pub spans: usize,
    /// Split-step size cap, km.
    pub step_km: f64,
    pub wavelength_nm: f64,
    /// EDFA noise figure, dB.
    pub noise_figure_db: f64,
}

impl Default for FiberParams {
    fn default() -> Self {
        FiberParams {
            alpha_db_km: 0.2,
            dispersion_ps_nm_km: 17.0,
            gamma: 1.3,
            span_km: 205.0,
            spans: 1,
            step_km: 0.1,
            wavelength_nm: 1550.0,
            noise_figure_db: 5.0,
        }
    }
}

impl FiberParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_db_km >= 0.0
            && self.dispersion_ps_nm_km.is_finite()
            && self.gamma >= 0.0
            && self.span_km >= 0.0
            && self.spans >= 1
            && self.step_km > 0.0
            && self.wavelength_nm > 0.0
            && self.noise_figure_db.is_finite();
        if !ok {
            return Err(Error::invalid("non-physical fiber parameters"));
        }
        Ok(())
    }

    /// Field-power attenuation α in 1/km.
    pub fn alpha_per_km(&self) -> f64 {
        self.alpha_db_km / (10.0 * core::f64::consts::LOG10_E)
    }

    /// Group-velocity dispersion β₂ in ps²/km.
    pub fn beta2_ps2_km(&self) -> f64 {
        // c in nm/ps.
        let c = SPEED_OF_LIGHT * 1e-3;
        -self.dispersion_ps_nm_km * self.wavelength_nm * self.wavelength_nm / (2.0 * PI * c)
    }

    pub fn carrier_hz(&self) -> f64 {
        SPEED_OF_LIGHT / (self.wavelength_nm * 1e-9)
    }

    /// Span loss compensated by each amplifier, dB.
    pub fn span_gain_db(&self) -> f64 {
        self.alpha_db_km * self.span_km
    }

    /// Effective length `(1 - e^{-αL}) / α` of one span, km.
    pub fn effective_length_km(&self) -> f64 {
        let a = self.alpha_per_km();
        if a == 0.0 {
            self.span_km
        } else {
            (1.0 - exp(-a * self.span_km)) / a
        }
    }
}

/// One-sided ASE power spectral density per polarization of an amplifier,
/// `(NF/2) hν (G - 1)`, W/Hz.
pub fn ase_psd(gain_db: f64, noise_figure_db: f64, carrier_hz: f64) -> f64 {
    let g = crate::math::db_to_lin(gain_db);
    let nf = crate::math::db_to_lin(noise_figure_db);
    0.5 * nf * PLANCK * carrier_hz * (g - 1.0)
}

/// Accumulated ASE power in the symbol-rate bandwidth at the receiver, W.
pub fn ase_variance_watt(fiber: &FiberParams, baud_gbd: f64) -> f64 {
    let psd = ase_psd(fiber.span_gain_db(), fiber.noise_figure_db, fiber.carrier_hz());
    psd * baud_gbd * 1e9 * fiber.spans as f64
}

/// Pulse and truncation settings for the coefficient integral.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationConfig {
    pub baud_gbd: f64,
    /// Truncation half-width N.
    pub truncation: usize,
    /// Gaussian pulse width `T0 / T`.
    pub pulse_ratio: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            baud_gbd: 50.0,
            truncation: 16,
            // Matches the nonlinear interference of RRC pulses (roll-off 0.1)
            // in split-step simulation of the default link.
            pulse_ratio: 0.5,
        }
    }
}

/// Phase coefficients `c_n` and triplet coefficients `C_{m,n}`, normalised
/// so that `γ P_avg` multiplies them in unit-power coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationCoeffs {
    truncation: usize,
    gamma: f64,
    phase: Vec<Complex64>,
    triplet: Vec<Complex64>,
}

impl PerturbationCoeffs {
    /// Builds coefficients from the triplet table (row-major over
    /// `m, n ∈ [-N, N]`); phase coefficients are derived from it.
    pub fn from_triplets(truncation: usize, gamma: f64, triplet: Vec<Complex64>) -> Result<Self> {
        let w = 2 * truncation + 1;
        if truncation == 0 {
            return Err(Error::invalid("truncation must be at least 1"));
        }
        if triplet.len() != w * w {
            return Err(Error::ShapeMismatch {
                op: "coefficients",
                expected: vec![w, w],
                got: vec![triplet.len()],
            });
        }
        if triplet.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(Error::NonFinite { op: "coefficients" });
        }
        let n = truncation as isize;
        let at = |m: isize, k: isize| triplet[((m + n) as usize) * w + (k + n) as usize];
        let phase = (-n..=n)
            .map(|k| if k == 0 { at(0, 0) } else { at(0, k) + at(k, 0) })
            .collect();
        Ok(PerturbationCoeffs {
            truncation,
            gamma,
            phase,
            triplet,
        })
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `c_n` for `|n| ≤ N`.
    pub fn phase(&self, n: isize) -> Complex64 {
        self.phase[(n + self.truncation as isize) as usize]
    }

    /// `C_{m,n}` for `|m|, |n| ≤ N`.
    pub fn triplet(&self, m: isize, n: isize) -> Complex64 {
        let t = self.truncation as isize;
        let w = 2 * self.truncation + 1;
        self.triplet[((m + t) as usize) * w + (n + t) as usize]
    }

    pub fn triplet_table(&self) -> &[Complex64] {
        &self.triplet
    }

    /// Same coefficients with the table truncated to a smaller `N`.
    pub fn truncate(&self, truncation: usize) -> Result<Self> {
        if truncation > self.truncation {
            return Err(Error::invalid("cannot extend the truncation"));
        }
        let n = truncation as isize;
        let table = (-n..=n)
            .flat_map(|m| (-n..=n).map(move |k| (m, k)))
            .map(|(m, k)| self.triplet(m, k))
            .collect();
        Self::from_triplets(truncation, self.gamma, table)
    }
}

/// Integrand of `C_{m,n}` over distance for a Gaussian pulse of width `t0`,
/// after the closed-form time integral. `zacc` is the accumulated dispersion
/// distance and `z` the distance into the current span.
fn gaussian_integrand(m: f64, n: f64, t: f64, t0: f64, beta2: f64, alpha: f64, zacc: f64, z: f64) -> Complex64 {
    let a = Complex64::new(t0 * t0, -beta2 * zacc);
    let a_abs2 = a.norm_sqr();
    let big_a = 2.0 * t0 * t0 / a_abs2;
    let k = m + n;
    let e = Complex64::new(k * k * t * t * big_a / 4.0, 0.0)
        - (m * m + n * n) * t * t / (2.0 * a)
        - k * k * t * t / (2.0 * a.conj());
    let pre = exp(-alpha * z) * t0 * t / (sqrt(2.0 * PI) * sqrt(a_abs2));
    let mag = pre * exp(e.re);
    Complex64::new(mag * cos(e.im), mag * sin(e.im))
}

/// Coefficients from the first-order perturbation integral with Gaussian
/// pulses, evaluated with the time integral in closed form and adaptive
/// Gauss-Kronrod quadrature over distance.
pub fn compute_coeffs(fiber: &FiberParams, cfg: &PerturbationConfig) -> Result<PerturbationCoeffs> {
    fiber.validate()?;
    if cfg.truncation == 0 {
        return Err(Error::invalid("truncation must be at least 1"));
    }
    if !(cfg.baud_gbd > 0.0 && cfg.pulse_ratio > 0.0) {
        return Err(Error::invalid("baud rate and pulse width must be positive"));
    }
    let n = cfg.truncation as isize;
    let w = 2 * cfg.truncation + 1;
    let t = 1e3 / cfg.baud_gbd;
    let t0 = cfg.pulse_ratio * t;
    let beta2 = fiber.beta2_ps2_km();
    let alpha = fiber.alpha_per_km();
    let len = fiber.span_km;
    let mut table = vec![Complex64::new(0.0, 0.0); w * w];
    if len > 0.0 {
        let pieces = ((len / 5.0) as usize).max(1);
        let h = len / pieces as f64;
        let tol = 1e-11 * len;
        for m in -n..=n {
            for k in m..=n {
                let mut acc = Complex64::new(0.0, 0.0);
                for s in 0..fiber.spans {
                    let z0 = s as f64 * len;
                    for p in 0..pieces {
                        let (lo, hi) = (p as f64 * h, (p + 1) as f64 * h);
                        let f = |z: f64| {
                            let v = gaussian_integrand(m as f64, k as f64, t, t0, beta2, alpha, z0 + z, z);
                            (v.re, v.im)
                        };
                        let (re, im) = integrate_complex(f, lo, hi, tol / pieces as f64, 400);
                        acc += Complex64::new(re, im);
                    }
                }
                table[((m + n) as usize) * w + (k + n) as usize] = acc;
                table[((k + n) as usize) * w + (m + n) as usize] = acc;
            }
        }
    }
    PerturbationCoeffs::from_triplets(cfg.truncation, fiber.gamma, table)
}

/// Cyclic guard bookkeeping for a concatenated transmission stream.
///
/// The stream is extended by `guard` symbols on each side taken cyclically
/// from the opposite end, so every original symbol sees a full memory
/// window and the channel output has the length of the original stream.
#[derive(Clone, Debug, PartialEq)]
pub struct GuardMap {
    seq_lens: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
    guard: usize,
}

impl GuardMap {
    pub fn new(seq_lens: Vec<usize>, guard: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(seq_lens.len());
        let mut total = 0;
        for &l in &seq_lens {
            offsets.push(total);
            total += l;
        }
        if total == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(GuardMap {
            seq_lens,
            offsets,
            total,
            guard,
        })
    }

    pub fn guard(&self) -> usize {
        self.guard
    }

    /// Length of the concatenated stream without guard.
    pub fn stream_len(&self) -> usize {
        self.total
    }

    pub fn extended_len(&self) -> usize {
        self.total + 2 * self.guard
    }

    /// For each extended position, the stream position it copies.
    pub fn source_index(&self) -> Vec<usize> {
        let n = self.total as isize;
        (0..self.extended_len() as isize)
            .map(|e| (e - self.guard as isize).rem_euclid(n) as usize)
            .collect()
    }

    /// Extended positions that carry original symbols.
    pub fn retained(&self) -> Range<usize> {
        self.guard..self.guard + self.total
    }

    /// Extended position of symbol `t` of sequence `seq`.
    pub fn position(&self, seq: usize, t: usize) -> usize {
        self.guard + self.offsets[seq] + t
    }

    /// Splits a stream-ordered (guard-free) vector back into sequences.
    pub fn split<T: Clone>(&self, stream: &[T]) -> Vec<Vec<T>> {
        self.offsets
            .iter()
            .zip(&self.seq_lens)
            .map(|(&o, &l)| stream[o..o + l].to_vec())
            .collect()
    }
}

/// Concatenates sequences and adds a cyclic guard of `guard` symbols.
/// `memory` is the channel's one-sided memory, which the guard must cover.
pub fn concat_guard<T: Clone>(seqs: &[Vec<T>], guard: usize, memory: usize) -> Result<(Vec<T>, GuardMap)> {
    if guard < memory {
        return Err(Error::InsufficientGuard {
            len: guard,
            need: memory,
        });
    }
    let map = GuardMap::new(seqs.iter().map(Vec::len).collect(), guard)?;
    let stream: Vec<T> = seqs.iter().flatten().cloned().collect();
    let ext = map.source_index().into_iter().map(|i| stream[i].clone()).collect();
    Ok((ext, map))
}

/// Additive term list entry: `weight · x_{t+m} x_{t+n} x*_{t+m+n}`.
#[derive(Clone, Copy, Debug)]
struct Triplet {
    m: isize,
    n: isize,
    weight: Complex64,
}

#[derive(Debug)]
struct Kernel {
    memory: usize,
    /// `γP c_n`, indexed by `n + N`.
    phase: Vec<Complex64>,
    /// `jγP C_{m,n}` over `m ≤ n`, doubled off the diagonal.
    triplets: Vec<Triplet>,
}

impl Kernel {
    fn new(coeffs: &PerturbationCoeffs, gamma_p: f64) -> Self {
        let n = coeffs.truncation as isize;
        let phase = (-n..=n).map(|k| coeffs.phase(k) * gamma_p).collect();
        let mut triplets = Vec::new();
        let j = Complex64::new(0.0, gamma_p);
        for m in -n..=n {
            for k in m..=n {
                if m == 0 || k == 0 || (m + k).abs() > n {
                    continue;
                }
                let c = coeffs.triplet(m, k);
                if c.re == 0.0 && c.im == 0.0 {
                    continue;
                }
                let w = if m == k { 1.0 } else { 2.0 };
                triplets.push(Triplet { m, n: k, weight: j * c * w });
            }
        }
        Kernel {
            memory: coeffs.truncation,
            phase,
            triplets,
        }
    }

    /// Noise-free output for the interior of a guarded sequence.
    fn forward(&self, x: &[Complex64]) -> Vec<Complex64> {
        let g = self.memory as isize;
        let out_len = x.len() - 2 * self.memory;
        let mut y = Vec::with_capacity(out_len);
        for t in 0..out_len {
            let s = t as isize + g;
            y.push(self.rotation(x, s) * x[s as usize] + self.additive(x, s));
        }
        y
    }

    fn exponent(&self, x: &[Complex64], s: isize) -> Complex64 {
        let g = self.memory as isize;
        let mut phi = Complex64::new(0.0, 0.0);
        for (i, c) in self.phase.iter().enumerate() {
            let k = i as isize - g;
            phi += c * (x[(s - k) as usize].norm_sqr() - 1.0);
        }
        phi
    }

    /// `exp(j φ_t)`.
    fn rotation(&self, x: &[Complex64], s: isize) -> Complex64 {
        let phi = self.exponent(x, s);
        let mag = exp(-phi.im);
        Complex64::new(mag * cos(phi.re), mag * sin(phi.re))
    }

    fn additive(&self, x: &[Complex64], s: isize) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for tr in &self.triplets {
            let a = x[(s + tr.m) as usize];
            let b = x[(s + tr.n) as usize];
            let c = x[(s + tr.m + tr.n) as usize];
            acc += tr.weight * a * b * c.conj();
        }
        acc
    }

    /// Accumulates `∂L/∂x` (packed as `∂/∂re + j ∂/∂im`) from `∂L/∂y`.
    fn backward(&self, x: &[Complex64], gy: &[Complex64], gx: &mut [Complex64]) {
        let g = self.memory as isize;
        for (t, &gt) in gy.iter().enumerate() {
            let s = t as isize + g;
            let xs = x[s as usize];
            let e = self.rotation(x, s);
            gx[s as usize] += e.conj() * gt;
            // d y = x_s e j dφ; dφ = Σ_n γP c_n d|x_{s-n}|².
            let rho = gt.conj() * xs * e * Complex64::new(0.0, 1.0);
            for (i, c) in self.phase.iter().enumerate() {
                let k = i as isize - g;
                let idx = (s - k) as usize;
                let r = (rho * c).re;
                gx[idx] += 2.0 * r * x[idx];
            }
            for tr in &self.triplets {
                let (ia, ib, ic) = ((s + tr.m) as usize, (s + tr.n) as usize, (s + tr.m + tr.n) as usize);
                let (a, b, c) = (x[ia], x[ib], x[ic]);
                let w = tr.weight;
                gx[ia] += (w * b * c.conj()).conj() * gt;
                gx[ib] += (w * a * c.conj()).conj() * gt;
                gx[ic] += w * a * b * gt.conj();
            }
        }
    }
}

fn to_complex(t: &[f64]) -> Vec<Complex64> {
    t.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

fn from_complex(v: &[Complex64]) -> Vec<f64> {
    v.iter().flat_map(|c| [c.re, c.im]).collect()
}

struct PerturbativeRule(Arc<Kernel>);

impl BackwardRule for PerturbativeRule {
    fn name(&self) -> &'static str {
        "perturbative_channel"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool], input_grads: &mut [Tensor]) {
        if !needs[0] {
            return;
        }
        let x = to_complex(inputs[0].data());
        let gy = to_complex(grad.data());
        let mut gx = vec![Complex64::new(0.0, 0.0); x.len()];
        self.0.backward(&x, &gy, &mut gx);
        input_grads[0].add_assign(&from_complex(&gx));
    }
}

/// Perturbative channel at a fixed launch power.
#[derive(Clone, Debug)]
pub struct PerturbativeChannel {
    coeffs: PerturbationCoeffs,
    gamma_p: f64,
    noise_var: f64,
    kernel: Arc<Kernel>,
}

impl PerturbativeChannel {
    /// Channel with explicit `γP` (1/km·km = dimensionless after the
    /// coefficient normalisation) and unit-coordinate noise variance.
    pub fn with_gamma_p(coeffs: PerturbationCoeffs, gamma_p: f64, noise_var: f64) -> Result<Self> {
        if !(noise_var >= 0.0) || !gamma_p.is_finite() {
            return Err(Error::invalid("noise variance must be non-negative"));
        }
        let kernel = Arc::new(Kernel::new(&coeffs, gamma_p));
        Ok(PerturbativeChannel {
            coeffs,
            gamma_p,
            noise_var,
            kernel,
        })
    }

    /// Channel for a launch power in dBm with the link's ASE noise.
    pub fn new(coeffs: PerturbationCoeffs, fiber: &FiberParams, baud_gbd: f64, launch_dbm: f64) -> Result<Self> {
        let p = dbm_to_watt(launch_dbm);
        let gamma_p = coeffs.gamma() * p;
        let var = ase_variance_watt(fiber, baud_gbd) / p;
        Self::with_gamma_p(coeffs, gamma_p, var)
    }

    pub fn coeffs(&self) -> &PerturbationCoeffs {
        &self.coeffs
    }

    pub fn gamma_p(&self) -> f64 {
        self.gamma_p
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn memory(&self) -> usize {
        self.coeffs.truncation()
    }

    /// Noise-free output for a guarded sequence; the result is shorter by
    /// `2N`.
    pub fn propagate_noiseless(&self, x_ext: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
        let need = 2 * self.memory() + 1;
        if x_ext.len() < need {
            return Err(Error::InsufficientGuard {
                len: x_ext.len(),
                need,
            });
        }
        let x: Vec<Complex64> = x_ext.iter().map(|&(a, b)| Complex64::new(a, b)).collect();
        Ok(self.kernel.forward(&x).into_iter().map(|c| (c.re, c.im)).collect())
    }

    /// Noise-free output on the tape for a guarded `[n + 2N, 2]` input.
    pub fn propagate_noiseless_tape(&self, tape: &mut Tape, x_ext: Var) -> Result<Var> {
        let v = tape.value(x_ext);
        let need = 2 * self.memory() + 1;
        if v.rows() < need || v.cols() != 2 {
            return Err(Error::InsufficientGuard { len: v.rows(), need });
        }
        let x = to_complex(v.data());
        let y = self.kernel.forward(&x);
        let out = Tensor::new(&[y.len(), 2], from_complex(&y))?;
        tape.custom(&[x_ext], out, alloc::boxed::Box::new(PerturbativeRule(self.kernel.clone())))
    }
}

/// Channel seen by the trainer and the evaluator.
#[derive(Clone, Debug)]
pub enum ChannelModel {
    Awgn { noise_var: f64 },
    Perturbative(PerturbativeChannel),
}

/// Transmitted and received symbols of one channel use.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub x: Vec<(f64, f64)>,
    pub y: Vec<(f64, f64)>,
    pub noise: Vec<(f64, f64)>,
    pub noise_var: f64,
}

impl ChannelModel {
    /// AWGN with `SNR = 1/σ²` given in dB.
    pub fn awgn_snr_db(snr_db: f64) -> Self {
        ChannelModel::Awgn {
            noise_var: 1.0 / crate::math::db_to_lin(snr_db),
        }
    }

    pub fn memory(&self) -> usize {
        match self {
            ChannelModel::Awgn { .. } => 0,
            ChannelModel::Perturbative(p) => p.memory(),
        }
    }

    pub fn noise_var(&self) -> f64 {
        match self {
            ChannelModel::Awgn { noise_var } => *noise_var,
            ChannelModel::Perturbative(p) => p.noise_var(),
        }
    }

    fn noise(&self, n: usize, rng: &mut Rng) -> Vec<(f64, f64)> {
        let var = self.noise_var();
        (0..n).map(|_| rng::complex_normal(rng, var)).collect()
    }

    /// Sends a stream through the channel with a cyclic guard; the output
    /// has the stream's length.
    pub fn transmit(&self, x: &[(f64, f64)], rng: &mut Rng) -> Result<ChannelRealization> {
        if x.is_empty() {
            return Err(Error::EmptyInput);
        }
        let clean = match self {
            ChannelModel::Awgn { .. } => x.to_vec(),
            ChannelModel::Perturbative(p) => {
                let map = GuardMap::new(vec![x.len()], p.memory())?;
                let ext: Vec<(f64, f64)> = map.source_index().into_iter().map(|i| x[i]).collect();
                p.propagate_noiseless(&ext)?
            }
        };
        let noise = self.noise(x.len(), rng);
        let y = clean.iter().zip(&noise).map(|(a, b)| (a.0 + b.0, a.1 + b.1)).collect();
        Ok(ChannelRealization {
            x: x.to_vec(),
            y,
            noise,
            noise_var: self.noise_var(),
        })
    }

    /// Tape version of [`transmit`](Self::transmit) for an `[n, 2]` stream.
    /// Noise is a constant; the draw order matches the plain path.
    pub fn propagate(&self, tape: &mut Tape, x: Var, rng: &mut Rng) -> Result<Var> {
        let n = tape.value(x).rows();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let clean = match self {
            ChannelModel::Awgn { .. } => x,
            ChannelModel::Perturbative(p) => {
                let map = GuardMap::new(vec![n], p.memory())?;
                let ext = tape.gather_rows(x, &map.source_index())?;
                p.propagate_noiseless_tape(tape, ext)?
            }
        };
        let noise = self.noise(n, rng);
        let nv = tape.constant(Tensor::complex(&noise));
        tape.add(clean, nv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::constellation::Constellation;
    use rand::Rng as _;

    fn short_cfg(n: usize) -> PerturbationConfig {
        PerturbationConfig {
            truncation: n,
            ..Default::default()
        }
    }

    #[test]
    fn zero_length_gives_zero_coefficients() {
        let fiber = FiberParams {
            span_km: 0.0,
            ..Default::default()
        };
        let c = compute_coeffs(&fiber, &short_cfg(3)).unwrap();
        assert!(c.triplet_table().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn link_constants() {
        let f = FiberParams::default();
        assert!((f.beta2_ps2_km() + 21.68).abs() < 0.01);
        assert!((f.span_gain_db() - 41.0).abs() < 1e-12);
        // n_sp hν (G - 1) B with hand-evaluated constants.
        let hv = 6.62607015e-34 * 299792458.0 / 1550e-9;
        let want = 0.5 * 10f64.powf(0.5) * hv * (10f64.powf(4.1) - 1.0) * 50e9;
        assert!((ase_variance_watt(&f, 50.0) / want - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coefficient_structure() {
        let c = compute_coeffs(&FiberParams::default(), &short_cfg(16)).unwrap();
        let c0 = c.phase(0).norm();
        for n in 1..=16 {
            assert!(c.phase(n).norm() < c0);
            assert!((c.phase(n) - c.phase(-n)).norm() < 1e-12 * c0);
        }
        // Octave envelope decreases.
        let env = |lo: isize, hi: isize| (lo..hi).map(|n| c.phase(n).norm()).fold(0.0, f64::max);
        let octaves = [env(1, 2), env(2, 4), env(4, 8), env(8, 16)];
        for w in octaves.windows(2) {
            assert!(w[1] < w[0], "{octaves:?}");
        }
        for m in -16..=16 {
            for n in -16..=16 {
                assert_eq!(c.triplet(m, n), c.triplet(n, m));
                assert!((c.triplet(m, n) - c.triplet(-m, -n)).norm() < 1e-9 * c0);
            }
        }
    }

    /// Direct quadrature of the perturbation integral: dispersed pulses on a
    /// time grid with trapezoidal sums, composite Simpson in distance.
    fn oracle_coeffs(fiber: &FiberParams, cfg: &PerturbationConfig, nmax: isize) -> Vec<Vec<Complex64>> {
        let t = 1e3 / cfg.baud_gbd;
        let t0 = cfg.pulse_ratio * t;
        let q = 8usize;
        let dt = t / q as f64;
        let half = 140 * q as isize;
        let beta2 = fiber.beta2_ps2_km();
        let alpha = fiber.alpha_per_km();
        let steps = 2000;
        let h = fiber.span_km / steps as f64;
        let w = (2 * nmax + 1) as usize;
        let mut out = vec![vec![Complex64::new(0.0, 0.0); w]; w];
        for iz in 0..=steps {
            let z = iz as f64 * h;
            let simpson = if iz == 0 || iz == steps { 1.0 } else if iz % 2 == 1 { 4.0 } else { 2.0 };
            let a = Complex64::new(t0 * t0, -beta2 * z);
            let pulse = |i: isize| -> Complex64 {
                let tt = i as f64 * dt;
                Complex64::new(t0, 0.0) / a.sqrt() * (-(tt * tt) / (2.0 * a)).exp()
            };
            let span = half + 2 * nmax * q as isize;
            let g: Vec<Complex64> = (-span..=span).map(pulse).collect();
            let at = |i: isize| g[(i + span) as usize];
            for m in -nmax..=nmax {
                for n in -nmax..=nmax {
                    let k = m + n;
                    let mut s = Complex64::new(0.0, 0.0);
                    for i in -half..=half {
                        s += at(i).conj() * at(i - m * q as isize) * at(i - n * q as isize) * at(i - k * q as isize).conj();
                    }
                    let v = s * dt * (-alpha * z).exp() * simpson * h / 3.0;
                    out[(m + nmax) as usize][(n + nmax) as usize] += v;
                }
            }
        }
        // Normalise by pulse energy and average power.
        let norm = t / (t0 * t0 * PI);
        for row in &mut out {
            for v in row.iter_mut() {
                *v *= norm;
            }
        }
        out
    }

    #[test]
    fn coefficients_match_direct_quadrature() {
        let fiber = FiberParams::default();
        let cfg = short_cfg(4);
        let c = compute_coeffs(&fiber, &cfg).unwrap();
        let o = oracle_coeffs(&fiber, &cfg, 4);
        for m in -4..=4isize {
            for n in -4..=4isize {
                let want = o[(m + 4) as usize][(n + 4) as usize];
                let got = c.triplet(m, n);
                assert!((got - want).norm() <= 0.01 * want.norm(), "({m},{n}) {got} vs {want}");
            }
        }
    }

    fn qam_stream(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let cst = Constellation::qam(64).unwrap();
        let mut r = rng::seeded(seed);
        (0..n).map(|_| cst.point(r.random_range(0..64))).collect()
    }

    /// Channel forward pass evaluated with a full, unsymmetrised triplet sum.
    fn oracle_forward(x: &[(f64, f64)], c: &PerturbationCoeffs, gp: f64) -> Vec<Complex64> {
        let n = c.truncation() as isize;
        let len = x.len() as isize;
        let at = |i: isize| {
            let (a, b) = x[i.rem_euclid(len) as usize];
            Complex64::new(a, b)
        };
        (0..len)
            .map(|t| {
                let mut phi = Complex64::new(0.0, 0.0);
                for k in -n..=n {
                    phi += (at(t - k).norm_sqr() - 1.0) * c.phase(k);
                }
                let mut d = Complex64::new(0.0, 0.0);
                for m in -n..=n {
                    for k in -n..=n {
                        if m != 0 && k != 0 && (m + k).abs() <= n {
                            d += at(t + m) * at(t + k) * at(t + m + k).conj() * c.triplet(m, k);
                        }
                    }
                }
                at(t) * (Complex64::new(0.0, gp) * phi).exp() + Complex64::new(0.0, gp) * d
            })
            .collect()
    }

    #[test]
    fn nlin_variance_matches_oracle_coefficients() {
        let fiber = FiberParams::default();
        let cfg = short_cfg(6);
        let c = compute_coeffs(&fiber, &cfg).unwrap();
        let o = oracle_coeffs(&fiber, &cfg, 6);
        let table: Vec<Complex64> = o.into_iter().flatten().collect();
        let oc = PerturbationCoeffs::from_triplets(6, fiber.gamma, table).unwrap();
        let gp = fiber.gamma * dbm_to_watt(11.0);
        let x = qam_stream(20_000, 4);
        let ch = ChannelModel::Perturbative(PerturbativeChannel::with_gamma_p(c, gp, 0.0).unwrap());
        let y = ch.transmit(&x, &mut rng::seeded(0)).unwrap().y;
        let yo = oracle_forward(&x, &oc, gp);
        let var = |y: &mut dyn Iterator<Item = Complex64>| {
            let v: Vec<Complex64> = y.collect();
            v.iter().map(|d| d.norm_sqr()).sum::<f64>() / v.len() as f64
        };
        let lib = var(&mut y.iter().zip(&x).map(|(a, b)| Complex64::new(a.0 - b.0, a.1 - b.1)));
        let ora = var(&mut yo.iter().zip(&x).map(|(a, b)| a - Complex64::new(b.0, b.1)));
        assert!(lib > 0.0);
        assert!((lib / ora - 1.0).abs() < 0.05, "{lib} vs {ora}");
    }

    #[test]
    fn symmetric_sum_matches_full_sum() {
        let c = compute_coeffs(&FiberParams::default(), &short_cfg(5)).unwrap();
        let x = qam_stream(300, 1);
        let ch = ChannelModel::Perturbative(PerturbativeChannel::with_gamma_p(c.clone(), 0.05, 0.0).unwrap());
        let y = ch.transmit(&x, &mut rng::seeded(0)).unwrap().y;
        let yo = oracle_forward(&x, &c, 0.05);
        for (a, b) in y.iter().zip(&yo) {
            assert!((Complex64::new(a.0, a.1) - b).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_gamma_is_awgn() {
        let c = compute_coeffs(&FiberParams::default(), &short_cfg(3)).unwrap();
        let x = qam_stream(100, 2);
        let p = ChannelModel::Perturbative(PerturbativeChannel::with_gamma_p(c, 0.0, 0.01).unwrap());
        let a = ChannelModel::Awgn { noise_var: 0.01 };
        let yp = p.transmit(&x, &mut rng::seeded(5)).unwrap();
        let ya = a.transmit(&x, &mut rng::seeded(5)).unwrap();
        assert_eq!(yp.y, ya.y);
    }

    #[test]
    fn unit_modulus_input_has_no_phase_term() {
        let c = compute_coeffs(&FiberParams::default(), &short_cfg(4)).unwrap();
        let w = 9 * 9;
        // Keep only the phase part.
        let mut only_phase = vec![Complex64::new(0.0, 0.0); w];
        for k in -4..=4isize {
            only_phase[4 * 9 + (k + 4) as usize] = c.triplet(0, k);
            only_phase[(k + 4) as usize * 9 + 4] = c.triplet(k, 0);
        }
        let pc = PerturbationCoeffs::from_triplets(4, 1.3, only_phase).unwrap();
        let ch = ChannelModel::Perturbative(PerturbativeChannel::with_gamma_p(pc, 0.3, 0.0).unwrap());
        let pts = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
        let x: Vec<(f64, f64)> = (0..50).map(|i| pts[(i * 7) % 4]).collect();
        let y = ch.transmit(&x, &mut rng::seeded(0)).unwrap().y;
        assert_eq!(x, y);
    }

    #[test]
    fn zero_coefficients_give_identity_plus_noise() {
        let pc = PerturbationCoeffs::from_triplets(2, 1.3, vec![Complex64::new(0.0, 0.0); 25]).unwrap();
        let ch = ChannelModel::Perturbative(PerturbativeChannel::with_gamma_p(pc, 1.0, 0.02).unwrap());
        let x = qam_stream(64, 3);
        let r = ch.transmit(&x, &mut rng::seeded(9)).unwrap();
        for ((x, y), n) in r.x.iter().zip(&r.y).zip(&r.noise) {
            assert_eq!((x.0 + n.0, x.1 + n.1), *y);
        }
    }

    #[test]
    fn common_phase_rotates_output() {
        let c = compute_coeffs(&FiberParams::default(), &short_cfg(4)).unwrap();
        let ch = PerturbativeChannel::with_gamma_p(c, 0.2, 0.0).unwrap();
        let x = qam_stream(40, 6);
        let th = 0.7f64;
        let rot = Complex64::new(th.cos(), th.sin());
        let xr: Vec<(f64, f64)> = x
            .iter()
            .map(|&(a, b)| {
                let v = Complex64::new(a, b) * rot;
                (v.re, v.im)
            })
            .collect();
        let y = ch.propagate_noiseless(&x).unwrap();
        let yr = ch.propagate_noiseless(&xr).unwrap();
        for (a, b) in y.iter().zip(&yr) {
            let want = Complex64::new(a.0, a.1) * rot;
            assert!((want - Complex64::new(b.0, b.1)).norm() < 1e-12);
        }
    }

    #[test]
    fn channel_gradient_matches_finite_differences() {
        let c = compute_coeffs(&FiberParams::default(), &short_cfg(3)).unwrap();
        let ch = ChannelModel::Perturbative(PerturbativeChannel::with_gamma_p(c, 0.5, 0.0).unwrap());
        let x = Tensor::complex(&qam_stream(12, 8));
        let err = grad_check(
            |tape, v| {
                let y = ch.propagate(tape, v, &mut rng::seeded(0))?;
                let p = tape.abs2(y)?;
                tape.mean(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");

        // Phase-sensitive loss exercises the imaginary parts too.
        let w = Tensor::new(&[12, 2], (0..24).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect()).unwrap();
        let err = grad_check(
            |tape, v| {
                let y = ch.propagate(tape, v, &mut rng::seeded(0))?;
                let wv = tape.constant(w.clone());
                let p = tape.mul(y, wv)?;
                tape.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let c = compute_coeffs(&FiberParams::default(), &short_cfg(3)).unwrap();
        let ch = ChannelModel::Perturbative(PerturbativeChannel::new(c, &FiberParams::default(), 50.0, 9.0).unwrap());
        let x = qam_stream(30, 11);
        let plain = ch.transmit(&x, &mut rng::seeded(4)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::complex(&x));
        let y = ch.propagate(&mut tape, xv, &mut rng::seeded(4)).unwrap();
        for (i, p) in plain.y.iter().enumerate() {
            assert_eq!(tape.value(y).complex_at(i), *p);
        }
    }

    #[test]
    fn guard_bookkeeping() {
        let seqs = vec![vec![1, 2, 3, 4], vec![5, 6, 7]];
        let (ext, map) = concat_guard(&seqs, 2, 2).unwrap();
        assert_eq!(ext, vec![6, 7, 1, 2, 3, 4, 5, 6, 7, 1, 2]);
        assert_eq!(map.retained(), 2..9);
        // Last symbol of the first sequence has the second one as right context.
        let p = map.position(0, 3);
        assert_eq!(&ext[p + 1..p + 3], &[5, 6]);
        let inner: Vec<i32> = ext[map.retained()].to_vec();
        assert_eq!(map.split(&inner), seqs);

        let one = vec![(0..10).collect::<Vec<usize>>()];
        let (ext, map) = concat_guard(&one, 3, 3).unwrap();
        assert_eq!(map.retained().len(), 10);
        assert_eq!(&ext[..3], &[7, 8, 9]);
        assert!(matches!(concat_guard(&one, 2, 3), Err(Error::InsufficientGuard { .. })));
    }

    #[test]
    fn short_input_is_rejected() {
        let c = compute_coeffs(&FiberParams::default(), &short_cfg(3)).unwrap();
        let ch = PerturbativeChannel::with_gamma_p(c, 0.1, 0.0).unwrap();
        assert!(matches!(
            ch.propagate_noiseless(&[(1.0, 0.0); 6]),
            Err(Error::InsufficientGuard { .. })
        ));
    }
}
