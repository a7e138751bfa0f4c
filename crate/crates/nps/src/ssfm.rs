//! Split-step Fourier reference channel.
//!
//! Scalar NLSE `∂A/∂z = -α/2 A - jβ₂/2 ∂²A/∂t² + jγ|A|²A` on a periodic
//! time grid. Units: time in ps, frequency in THz, distance in km, power in W.
//! Blocks are processed cyclically, matching the cyclic guard of the
//! perturbative model.

use std::f64::consts::PI;
use std::sync::Arc;

use nps_core::channel::{ase_psd, FiberParams};
use nps_core::math::dbm_to_watt;
use nps_core::rng::{self, Rng};
use nps_core::trainer::Link;
use rand::Rng as _;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{NpsError, Result};

/// Sampling and multiplexing grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimGrid {
    pub baud_gbd: f64,
    /// Samples per symbol.
    pub oversampling: usize,
    pub rolloff: f64,
    /// Samples per processing block.
    pub fft_size: usize,
    pub channels: usize,
    pub spacing_ghz: f64,
}

impl Default for SimGrid {
    fn default() -> Self {
        SimGrid {
            baud_gbd: 50.0,
            oversampling: 4,
            rolloff: 0.1,
            fft_size: 1 << 16,
            channels: 1,
            spacing_ghz: 55.0,
        }
    }
}

impl SimGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.baud_gbd > 0.0 && (0.0..=1.0).contains(&self.rolloff)) {
            return Err(NpsError::config("grid: baud rate must be positive and roll-off in [0, 1]"));
        }
        if (self.oversampling as f64) < 2.0 * (1.0 + self.rolloff) {
            return Err(NpsError::config("grid: oversampling must be at least 2(1 + roll-off)"));
        }
        if self.channels == 0 || self.fft_size < self.oversampling {
            return Err(NpsError::config("grid: need at least one channel and one symbol per block"));
        }
        let edge = (self.channels as f64 - 1.0) / 2.0 * self.spacing_ghz + (1.0 + self.rolloff) * self.baud_gbd / 2.0;
        if edge > self.sample_rate_ghz() / 2.0 {
            return Err(NpsError::config("grid: WDM comb exceeds the simulation bandwidth"));
        }
        Ok(())
    }

    pub fn sample_rate_ghz(&self) -> f64 {
        self.baud_gbd * self.oversampling as f64
    }

    /// Symbols per processing block.
    pub fn block_symbols(&self) -> usize {
        self.fft_size / self.oversampling
    }
}

/// Complex baseband samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
    /// Optical carrier of the baseband origin.
    pub center_hz: f64,
}

impl Waveform {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> f64 {
        self.energy() / self.len() as f64
    }

    fn sample_rate_thz(&self) -> f64 {
        self.sample_rate_hz * 1e-12
    }
}

/// Forward/inverse transforms of one size; the inverse is normalised.
struct Transform {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    n: usize,
}

impl Transform {
    fn new(n: usize) -> Self {
        let mut p = FftPlanner::new();
        Transform {
            fwd: p.plan_fft_forward(n),
            inv: p.plan_fft_inverse(n),
            n,
        }
    }

    fn forward(&self, x: &mut [Complex64]) {
        self.fwd.process(x);
    }

    fn inverse(&self, x: &mut [Complex64]) {
        self.inv.process(x);
        let s = 1.0 / self.n as f64;
        x.iter_mut().for_each(|v| *v *= s);
    }
}

/// Angular frequency of each FFT bin, rad/ps.
pub fn angular_frequencies(n: usize, sample_rate_thz: f64) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let k = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
            2.0 * PI * k * sample_rate_thz / n as f64
        })
        .collect()
}

/// Raised-cosine spectrum normalised to one in the pass band; `f` in units
/// of the symbol rate.
fn raised_cosine(f: f64, beta: f64) -> f64 {
    let f = f.abs();
    let lo = (1.0 - beta) / 2.0;
    let hi = (1.0 + beta) / 2.0;
    if f <= lo {
        1.0
    } else if f <= hi {
        0.5 * (1.0 + (PI / beta * (f - lo)).cos())
    } else {
        0.0
    }
}

/// RRC transfer function on an `n`-bin grid at `oversampling` samples per
/// symbol, scaled so that transmit filter, matched filter and decimation
/// return the input symbols.
pub fn rrc_response(n: usize, oversampling: usize, rolloff: f64) -> Vec<f64> {
    let os = oversampling as f64;
    (0..n)
        .map(|k| {
            let k = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
            let f = k * os / n as f64;
            (os * raised_cosine(f, rolloff)).sqrt()
        })
        .collect()
}

/// Pulse-shapes each stream, shifts it to its WDM slot and sums. Every
/// channel carries `launch_dbm` for unit-power symbols; the first stream is
/// the centre channel.
pub fn shape_and_mux(streams: &[Vec<Complex64>], grid: &SimGrid, launch_dbm: f64, carrier_hz: f64) -> Result<Waveform> {
    grid.validate()?;
    let Some(first) = streams.first() else {
        return Err(NpsError::config("no symbol streams"));
    };
    if streams.len() != grid.channels || streams.iter().any(|s| s.len() != first.len()) || first.is_empty() {
        return Err(NpsError::config("streams must be non-empty, equal length and one per channel"));
    }
    let os = grid.oversampling;
    let n = first.len() * os;
    let tr = Transform::new(n);
    let h = rrc_response(n, os, grid.rolloff);
    let amp = (os as f64 * dbm_to_watt(launch_dbm)).sqrt();
    let bin_ghz = grid.sample_rate_ghz() / n as f64;
    let mut total = vec![Complex64::new(0.0, 0.0); n];
    for (c, s) in streams.iter().enumerate() {
        let mut u = vec![Complex64::new(0.0, 0.0); n];
        for (i, &v) in s.iter().enumerate() {
            u[i * os] = v * amp;
        }
        tr.forward(&mut u);
        let shift = (slot_offset(c) * grid.spacing_ghz / bin_ghz).round() as isize;
        for (k, v) in u.iter().enumerate() {
            let dst = (k as isize + shift).rem_euclid(n as isize) as usize;
            total[dst] += v * h[k];
        }
    }
    tr.inverse(&mut total);
    Ok(Waveform {
        samples: total,
        sample_rate_hz: grid.sample_rate_ghz() * 1e9,
        center_hz: carrier_hz,
    })
}

/// Slot of channel `c`: 0 for the first, then ±1, ±2, ...
fn slot_offset(c: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c % 2 == 1 {
        c.div_ceil(2) as f64
    } else {
        -((c / 2) as f64)
    }
}

/// Applies lossless dispersion over `length_km` (negative undoes it).
pub fn dispersion(wf: &mut Waveform, beta2_ps2_km: f64, length_km: f64) {
    let n = wf.len();
    let tr = Transform::new(n);
    let w = angular_frequencies(n, wf.sample_rate_thz());
    tr.forward(&mut wf.samples);
    for (v, &om) in wf.samples.iter_mut().zip(&w) {
        *v *= Complex64::from_polar(1.0, 0.5 * beta2_ps2_km * om * om * length_km);
    }
    tr.inverse(&mut wf.samples);
}

/// Step-size control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsfmConfig {
    /// Largest nonlinear phase per step, rad.
    pub max_phase_rad: f64,
    /// Step cap in km; `None` uses the fiber's step size.
    pub max_step_km: Option<f64>,
}

impl Default for SsfmConfig {
    fn default() -> Self {
        SsfmConfig {
            max_phase_rad: 1e-3,
            max_step_km: None,
        }
    }
}

/// Propagation statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SsfmStats {
    pub steps: usize,
    /// Largest nonlinear phase applied in one step.
    pub max_step_phase: f64,
}

/// Symmetric split-step propagation over `length_km` of fiber.
///
/// Each step applies half the dispersion, the nonlinear phase
/// `γ|A|²Δz_eff` with `Δz_eff = (1 - e^{-αΔz})/α`, the step's loss and the
/// second half of the dispersion. Adjacent half steps are merged. The step
/// is the smaller of the cap and `φ_max / (γ max|A|²)` with the peak power
/// taken from the previous nonlinear stage.
pub fn ssfm_propagate(wf: &mut Waveform, fiber: &FiberParams, length_km: f64, cfg: &SsfmConfig) -> Result<SsfmStats> {
    fiber.validate().map_err(NpsError::Core)?;
    if !(length_km >= 0.0 && cfg.max_phase_rad > 0.0) {
        return Err(NpsError::config("ssfm: length must be non-negative and phase limit positive"));
    }
    let cap = cfg.max_step_km.unwrap_or(fiber.step_km);
    if !(cap > 0.0) {
        return Err(NpsError::config("ssfm: step cap must be positive"));
    }
    let n = wf.len();
    if n == 0 || length_km == 0.0 {
        return Ok(SsfmStats {
            steps: 0,
            max_step_phase: 0.0,
        });
    }
    let tr = Transform::new(n);
    let w = angular_frequencies(n, wf.sample_rate_thz());
    let beta2 = fiber.beta2_ps2_km();
    let alpha = fiber.alpha_per_km();
    let gamma = fiber.gamma;
    let mut filter = vec![Complex64::new(1.0, 0.0); n];
    let mut filter_dz = f64::NAN;
    let mut set_filter = |filter: &mut Vec<Complex64>, dz: f64| {
        if dz != filter_dz {
            for (h, &om) in filter.iter_mut().zip(&w) {
                *h = Complex64::from_polar(1.0, 0.5 * beta2 * om * om * dz);
            }
            filter_dz = dz;
        }
    };
    let a = &mut wf.samples;
    let mut peak = a.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max);
    tr.forward(a);
    let mut z = 0.0;
    let mut pending = 0.0;
    let mut stats = SsfmStats {
        steps: 0,
        max_step_phase: 0.0,
    };
    while z < length_km {
        let mut dz = if gamma * peak > 0.0 {
            cap.min(cfg.max_phase_rad / (gamma * peak))
        } else {
            cap
        };
        let left = length_km - z;
        if dz >= left * (1.0 - 1e-12) {
            dz = left;
        }
        set_filter(&mut filter, pending + dz / 2.0);
        a.iter_mut().zip(&filter).for_each(|(v, h)| *v *= h);
        tr.inverse(a);
        let dz_eff = if alpha > 0.0 { -(-alpha * dz).exp_m1() / alpha } else { dz };
        let att = (-alpha * dz / 2.0).exp();
        let mut new_peak: f64 = 0.0;
        let mut step_phase: f64 = 0.0;
        for v in a.iter_mut() {
            let p = v.norm_sqr();
            let phi = gamma * p * dz_eff;
            step_phase = step_phase.max(phi);
            *v *= Complex64::from_polar(att, phi);
            new_peak = new_peak.max(p);
        }
        if a.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(NpsError::Runtime("ssfm: non-finite field, step too large".into()));
        }
        stats.max_step_phase = stats.max_step_phase.max(step_phase);
        peak = new_peak * att * att;
        tr.forward(a);
        pending = dz / 2.0;
        z += dz;
        stats.steps += 1;
    }
    set_filter(&mut filter, pending);
    a.iter_mut().zip(&filter).for_each(|(v, h)| *v *= h);
    tr.inverse(a);
    Ok(stats)
}

/// Amplifier with gain `gain_db` and circular ASE of PSD
/// `(NF/2) hν (G - 1)` over the full simulation bandwidth.
pub fn edfa(wf: &mut Waveform, gain_db: f64, noise_figure_db: f64, rng: &mut Rng) -> Result<()> {
    if !(gain_db >= 0.0) {
        return Err(NpsError::config("edfa: gain must be non-negative"));
    }
    let g = 10f64.powf(gain_db / 20.0);
    let psd = ase_psd(gain_db, noise_figure_db, wf.center_hz);
    let var = psd * wf.sample_rate_hz;
    for v in wf.samples.iter_mut() {
        *v *= g;
        if var > 0.0 {
            let (re, im) = rng::complex_normal(rng, var);
            *v += Complex64::new(re, im);
        }
    }
    Ok(())
}

/// Pilot insertion and phase recovery settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverConfig {
    /// One pilot every `pilot_period` transmitted symbols; 0 disables CPR.
    pub pilot_period: usize,
    /// Pilots on each side averaged into one pilot phase estimate.
    pub cpr_window: usize,
    pub pilot_seed: u64,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        ReceiverConfig {
            pilot_period: 40,
            cpr_window: 16,
            pilot_seed: 0x9170,
        }
    }
}

impl ReceiverConfig {
    /// Pilot symbols: unit-energy QPSK from a fixed seed.
    pub fn pilots(&self, count: usize) -> Vec<Complex64> {
        let mut r = rng::seeded(self.pilot_seed);
        let a = std::f64::consts::FRAC_1_SQRT_2;
        (0..count)
            .map(|_| {
                let q: u8 = r.random_range(0..4);
                Complex64::new(if q & 1 == 0 { a } else { -a }, if q & 2 == 0 { a } else { -a })
            })
            .collect()
    }

    /// Transmitted stream length carrying `data` symbols.
    pub fn stream_len(&self, data: usize) -> usize {
        if self.pilot_period == 0 {
            return data;
        }
        let per = self.pilot_period - 1;
        data + data.div_ceil(per)
    }

    /// Data symbols carried by a stream of `len` symbols.
    pub fn data_len(&self, len: usize) -> usize {
        if self.pilot_period == 0 {
            len
        } else {
            len - len.div_ceil(self.pilot_period)
        }
    }

    fn is_pilot(&self, pos: usize) -> bool {
        self.pilot_period > 0 && pos % self.pilot_period == 0
    }

    /// Interleaves pilots at positions `0, P, 2P, ...`.
    pub fn insert(&self, data: &[Complex64]) -> Vec<Complex64> {
        let len = self.stream_len(data.len());
        let pilots = self.pilots(len.div_ceil(self.pilot_period.max(1)));
        let mut d = data.iter();
        (0..len)
            .map(|i| {
                if self.is_pilot(i) {
                    pilots[i / self.pilot_period]
                } else {
                    *d.next().expect("stream length accounts for the data")
                }
            })
            .collect()
    }

    /// Data symbols of a stream.
    pub fn extract(&self, stream: &[Complex64]) -> Vec<Complex64> {
        stream
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.is_pilot(*i))
            .map(|(_, v)| *v)
            .collect()
    }

    /// Pilot-aided phase recovery in place: windowed pilot phase errors,
    /// unwrapped pilot to pilot and linearly interpolated.
    pub fn recover_phase(&self, z: &mut [Complex64]) -> Result<()> {
        if self.pilot_period == 0 {
            return Err(NpsError::config("phase recovery needs a non-zero pilot rate"));
        }
        let np = z.len().div_ceil(self.pilot_period);
        let pilots = self.pilots(np);
        let raw: Vec<Complex64> = (0..np).map(|j| z[j * self.pilot_period] * pilots[j].conj()).collect();
        let mut phase = Vec::with_capacity(np);
        for j in 0..np {
            let lo = j.saturating_sub(self.cpr_window);
            let hi = (j + self.cpr_window).min(np - 1);
            let s: Complex64 = raw[lo..=hi].iter().sum();
            let mut p = s.arg();
            if let Some(&prev) = phase.last() {
                let d: f64 = p - prev;
                p = prev + (d + PI).rem_euclid(2.0 * PI) - PI;
            }
            phase.push(p);
        }
        for (t, v) in z.iter_mut().enumerate() {
            let j = t / self.pilot_period;
            let u = (t % self.pilot_period) as f64 / self.pilot_period as f64;
            let p = if j + 1 < np {
                (1.0 - u) * phase[j] + u * phase[j + 1]
            } else {
                phase[j]
            };
            *v *= Complex64::from_polar(1.0, -p);
        }
        Ok(())
    }
}

/// Centre-channel receiver: dispersion compensation over `length_km`,
/// matched RRC filter, decimation and scaling to unit-power coordinates.
pub fn receive(wf: &Waveform, beta2_ps2_km: f64, length_km: f64, grid: &SimGrid, launch_dbm: f64) -> Result<Vec<Complex64>> {
    let os = grid.oversampling;
    let n = wf.len();
    if n == 0 || n % os != 0 {
        return Err(NpsError::config("waveform length must be a multiple of the oversampling"));
    }
    let tr = Transform::new(n);
    let w = angular_frequencies(n, wf.sample_rate_thz());
    let h = rrc_response(n, os, grid.rolloff);
    let mut a = wf.samples.clone();
    tr.forward(&mut a);
    for ((v, &om), &hk) in a.iter_mut().zip(&w).zip(&h) {
        *v *= Complex64::from_polar(hk, -0.5 * beta2_ps2_km * om * om * length_km);
    }
    tr.inverse(&mut a);
    let s = 1.0 / (os as f64 * dbm_to_watt(launch_dbm)).sqrt();
    Ok(a.iter().step_by(os).map(|v| v * s).collect())
}

/// Full SSFM link: pilots, shaping, spans of fiber with an EDFA after each,
/// receiver DSP. Neighbouring WDM channels carry random cyclic shifts of
/// the centre stream.
#[derive(Clone, Debug)]
pub struct SsfmLink {
    pub fiber: FiberParams,
    pub grid: SimGrid,
    pub ssfm: SsfmConfig,
    pub receiver: ReceiverConfig,
    pub launch_dbm: f64,
    /// Adds ASE at each amplifier.
    pub noise: bool,
}

impl SsfmLink {
    pub fn new(fiber: FiberParams, grid: SimGrid, launch_dbm: f64) -> Result<Self> {
        fiber.validate().map_err(NpsError::Core)?;
        grid.validate()?;
        Ok(SsfmLink {
            fiber,
            grid,
            ssfm: SsfmConfig::default(),
            receiver: ReceiverConfig::default(),
            launch_dbm,
            noise: true,
        })
    }

    /// One cyclic block of transmitted symbols (pilots included) to received
    /// symbols.
    pub fn transmit_block(&self, stream: &[Complex64], rng: &mut Rng) -> Result<Vec<Complex64>> {
        let mut streams = vec![stream.to_vec()];
        for _ in 1..self.grid.channels {
            let k = rng.random_range(0..stream.len());
            let mut s = stream.to_vec();
            s.rotate_left(k);
            streams.push(s);
        }
        let mut wf = shape_and_mux(&streams, &self.grid, self.launch_dbm, self.fiber.carrier_hz())?;
        for _ in 0..self.fiber.spans {
            ssfm_propagate(&mut wf, &self.fiber, self.fiber.span_km, &self.ssfm)?;
            if self.noise {
                edfa(&mut wf, self.fiber.span_gain_db(), self.fiber.noise_figure_db, rng)?;
            } else {
                let g = 10f64.powf(self.fiber.span_gain_db() / 20.0);
                wf.samples.iter_mut().for_each(|v| *v *= g);
            }
        }
        let total = self.fiber.span_km * self.fiber.spans as f64;
        let mut z = receive(&wf, self.fiber.beta2_ps2_km(), total, &self.grid, self.launch_dbm)?;
        if self.receiver.pilot_period > 0 {
            self.receiver.recover_phase(&mut z)?;
        }
        Ok(z)
    }

    /// Data symbols to received data symbols, block by block.
    pub fn transmit_symbols(&self, x: &[Complex64], rng: &mut Rng) -> Result<Vec<Complex64>> {
        let per_block = self.receiver.data_len(self.grid.block_symbols()).max(1);
        let mut out = Vec::with_capacity(x.len());
        for block in x.chunks(per_block) {
            let stream = self.receiver.insert(block);
            let z = self.transmit_block(&stream, rng)?;
            out.extend(self.receiver.extract(&z));
        }
        Ok(out)
    }
}

impl Link for SsfmLink {
    fn transmit(&self, x: &[(f64, f64)], rng: &mut Rng) -> nps_core::Result<Vec<(f64, f64)>> {
        let xs: Vec<Complex64> = x.iter().map(|&(a, b)| Complex64::new(a, b)).collect();
        let y = self
            .transmit_symbols(&xs, rng)
            .map_err(|e| nps_core::Error::InvalidParameter(e.to_string()))?;
        Ok(y.iter().map(|c| (c.re, c.im)).collect())
    }
}

/// `10 log10(E|x|² / E|y - x|²)`.
pub fn effective_snr_db(x: &[Complex64], y: &[Complex64]) -> f64 {
    let p: f64 = x.iter().map(|v| v.norm_sqr()).sum();
    let e: f64 = x.iter().zip(y).map(|(a, b)| (b - a).norm_sqr()).sum();
    10.0 * (p / e).log10()
}

/// EVM in dB relative to the reference power.
pub fn evm_db(x: &[Complex64], y: &[Complex64]) -> f64 {
    -effective_snr_db(x, y)
}
