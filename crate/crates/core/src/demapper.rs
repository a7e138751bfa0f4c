//! Mismatched Gaussian bit-wise demapper, binary cross entropy and the
//! bit-metric achievable rate.
//!
//! LLRs follow `LLR_i = ln P(b_i = 0 | y) - ln P(b_i = 1 | y)` and are clamped
//! to `±LLR_CLAMP`.
//!
//! Each symbol is demapped from its own received sample `y_t` only, so the
//! reported rate is a lower bound on the rate achievable with the whole
//! received sequence.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{BackwardRule, Tape, Tensor, Var};
use crate::constellation::{Constellation, SymbolDistribution};
use crate::math::{exp, ln, log_sum_exp, sigmoid, softplus, sqrt, LN_2};
use crate::{Error, Result};

pub const LLR_CLAMP: f64 = 40.0;
/// Floor of the estimated noise variance.
pub const NOISE_FLOOR: f64 = 1e-12;

/// Per-position symbol priors. Symbol `k` of a stream uses row
/// `k % period`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorTable {
    order: usize,
    rows: Vec<f64>,
}

impl PriorTable {
    pub fn new(order: usize, rows: Vec<f64>) -> Result<Self> {
        if order == 0 || rows.is_empty() || rows.len() % order != 0 {
            return Err(Error::invalid("prior table must hold whole rows"));
        }
        for row in rows.chunks(order) {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("prior rows must be probability vectors"));
            }
        }
        Ok(PriorTable { order, rows })
    }

    pub fn uniform(order: usize) -> Self {
        PriorTable {
            order,
            rows: vec![1.0 / order as f64; order],
        }
    }

    pub fn from_distribution(d: &SymbolDistribution) -> Self {
        PriorTable {
            order: d.len(),
            rows: d.probs().to_vec(),
        }
    }

    pub fn period(&self) -> usize {
        self.rows.len() / self.order
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let r = k % self.period();
        &self.rows[r * self.order..(r + 1) * self.order]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::matrix(self.period(), self.order, self.rows.clone()).expect("whole rows")
    }
}

/// LLRs of a block of received symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct LlrBlock {
    /// `n × m`, row-major.
    pub llrs: Vec<f64>,
    pub bits_per_symbol: usize,
    pub noise_var: f64,
    pub priors: PriorTable,
}

impl LlrBlock {
    pub fn symbol(&self, k: usize) -> &[f64] {
        &self.llrs[k * self.bits_per_symbol..(k + 1) * self.bits_per_symbol]
    }

    pub fn len(&self) -> usize {
        self.llrs.len() / self.bits_per_symbol
    }

    pub fn is_empty(&self) -> bool {
        self.llrs.is_empty()
    }
}

fn check_var(noise_var: f64) -> Result<()> {
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(Error::invalid("noise variance must be positive"));
    }
    Ok(())
}

/// Log-metrics `ln p_j - |y - q_j|² / σ²` for one received symbol.
fn metrics(y: (f64, f64), points: &[(f64, f64)], prior: &[f64], noise_var: f64, out: &mut [f64]) {
    for ((o, q), p) in out.iter_mut().zip(points).zip(prior) {
        let (dr, di) = (y.0 - q.0, y.1 - q.1);
        *o = if *p > 0.0 {
            ln(*p) - (dr * dr + di * di) / noise_var
        } else {
            f64::NEG_INFINITY
        };
    }
}

/// `(LLR, ln-sum over b=0, ln-sum over b=1)` of bit `i` from log-metrics.
fn bit_llr(cst: &Constellation, d: &[f64], i: usize) -> (f64, f64, f64) {
    let l0 = log_sum_exp((0..d.len()).filter(|&j| cst.bit(j, i) == 0).map(|j| d[j]));
    let l1 = log_sum_exp((0..d.len()).filter(|&j| cst.bit(j, i) == 1).map(|j| d[j]));
    let llr = match (l0 == f64::NEG_INFINITY, l1 == f64::NEG_INFINITY) {
        (true, true) => 0.0,
        (true, false) => -LLR_CLAMP,
        (false, true) => LLR_CLAMP,
        _ => (l0 - l1).clamp(-LLR_CLAMP, LLR_CLAMP),
    };
    (llr, l0, l1)
}

pub fn gaussian_llr(y: &[(f64, f64)], cst: &Constellation, priors: &PriorTable, noise_var: f64) -> Result<LlrBlock> {
    gaussian_llr_points(y, cst, cst.points(), priors, noise_var)
}

/// As [`gaussian_llr`] with explicit (e.g. rescaled) point positions.
pub fn gaussian_llr_points(
    y: &[(f64, f64)],
    cst: &Constellation,
    points: &[(f64, f64)],
    priors: &PriorTable,
    noise_var: f64,
) -> Result<LlrBlock> {
    check_var(noise_var)?;
    if priors.order != cst.order() || points.len() != cst.order() {
        return Err(Error::invalid("priors and constellation differ in order"));
    }
    let m = cst.bits_per_symbol();
    let mut llrs = Vec::with_capacity(y.len() * m);
    let mut d = vec![0.0; cst.order()];
    for (k, &yk) in y.iter().enumerate() {
        metrics(yk, points, priors.row(k), noise_var, &mut d);
        for i in 0..m {
            llrs.push(bit_llr(cst, &d, i).0);
        }
    }
    Ok(LlrBlock {
        llrs,
        bits_per_symbol: m,
        noise_var,
        priors: priors.clone(),
    })
}

/// `-log2 p̃(b | y)` for one bit given its LLR.
#[inline]
pub fn bit_cost(llr: f64, bit: u8) -> f64 {
    if bit == 0 {
        softplus(-llr) / LN_2
    } else {
        softplus(llr) / LN_2
    }
}

/// Per-symbol `Σ_i -log2 p̃(b_i | y)` for the transmitted symbols `labels`.
pub fn bce_per_symbol(llrs: &LlrBlock, cst: &Constellation, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != llrs.len() {
        return Err(Error::ShapeMismatch {
            op: "bce",
            expected: vec![llrs.len()],
            got: vec![labels.len()],
        });
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            llrs.symbol(k)
                .iter()
                .enumerate()
                .map(|(i, &l)| bit_cost(l, cst.bit(s, i)))
                .sum()
        })
        .collect())
}

/// Mean over symbols of `Σ_i -log2 p̃(b_i | y)`, in bits.
pub fn bce_loss(llrs: &LlrBlock, cst: &Constellation, labels: &[usize]) -> Result<f64> {
    let v = bce_per_symbol(llrs, cst, labels)?;
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// BCE from bit posteriors summed directly, without forming LLRs.
pub fn bce_from_posteriors(
    y: &[(f64, f64)],
    cst: &Constellation,
    priors: &PriorTable,
    noise_var: f64,
    labels: &[usize],
) -> Result<f64> {
    check_var(noise_var)?;
    if y.is_empty() || y.len() != labels.len() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    let mut w = vec![0.0; cst.order()];
    for (k, (&yk, &s)) in y.iter().zip(labels).enumerate() {
        metrics(yk, cst.points(), priors.row(k), noise_var, &mut w);
        let mx = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in w.iter_mut() {
            *v = exp(*v - mx);
        }
        let z: f64 = w.iter().sum();
        for i in 0..cst.bits_per_symbol() {
            let b = cst.bit(s, i);
            let num: f64 = (0..cst.order()).filter(|&j| cst.bit(j, i) == b).map(|j| w[j]).sum();
            total -= crate::math::log2(num / z);
        }
    }
    Ok(total / y.len() as f64)
}

struct BceRule {
    cst: Constellation,
    labels: Vec<usize>,
    noise_var: f64,
}

impl BackwardRule for BceRule {
    fn name(&self) -> &'static str {
        "gaussian_bce"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool], input_grads: &mut [Tensor]) {
        let (y, pts, pri) = (inputs[0], inputs[1], inputs[2]);
        let n = y.rows();
        let mo = self.cst.order();
        let m = self.cst.bits_per_symbol();
        let period = pri.rows();
        let points: Vec<(f64, f64)> = (0..mo).map(|j| pts.complex_at(j)).collect();
        let g0 = grad.item() / (n as f64 * LN_2);
        let mut d = vec![0.0; mo];
        let mut gd = vec![0.0; mo];
        for k in 0..n {
            let yk = y.complex_at(k);
            let prior = pri.row(k % period);
            metrics(yk, &points, prior, self.noise_var, &mut d);
            gd.fill(0.0);
            let s = self.labels[k];
            for i in 0..m {
                let (llr, l0, l1) = bit_llr(&self.cst, &d, i);
                if llr.abs() >= LLR_CLAMP || l0 == f64::NEG_INFINITY || l1 == f64::NEG_INFINITY {
                    continue;
                }
                // d(cost)/d(LLR) in nats.
                let dl = if self.cst.bit(s, i) == 0 { -sigmoid(-llr) } else { sigmoid(llr) };
                for j in 0..mo {
                    if d[j] == f64::NEG_INFINITY {
                        continue;
                    }
                    if self.cst.bit(j, i) == 0 {
                        gd[j] += dl * exp(d[j] - l0);
                    } else {
                        gd[j] -= dl * exp(d[j] - l1);
                    }
                }
            }
            for j in 0..mo {
                if gd[j] == 0.0 {
                    continue;
                }
                let g = gd[j] * g0;
                let (dr, di) = (yk.0 - points[j].0, yk.1 - points[j].1);
                let f = 2.0 * g / self.noise_var;
                if needs[0] {
                    let gy = input_grads[0].data_mut();
                    gy[2 * k] -= f * dr;
                    gy[2 * k + 1] -= f * di;
                }
                if needs[1] {
                    let gq = input_grads[1].data_mut();
                    gq[2 * j] += f * dr;
                    gq[2 * j + 1] += f * di;
                }
                if needs[2] && prior[j] > 0.0 {
                    input_grads[2].data_mut()[(k % period) * mo + j] += g / prior[j];
                }
            }
        }
    }
}

/// BCE on the tape, differentiable with respect to the received symbols
/// `y` (`[n, 2]`), the point positions `points` (`[M, 2]`) and the priors
/// (`[P, M]`, row `k % P` for symbol `k`). The noise variance is held fixed.
pub fn bce_loss_tape(
    tape: &mut Tape,
    y: Var,
    points: Var,
    priors: Var,
    cst: &Constellation,
    labels: &[usize],
    noise_var: f64,
) -> Result<Var> {
    check_var(noise_var)?;
    let (yv, pv, qv) = (tape.value(y), tape.value(points), tape.value(priors));
    if yv.cols() != 2 || yv.rows() != labels.len() || yv.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            expected: vec![labels.len(), 2],
            got: yv.shape().to_vec(),
        });
    }
    if pv.rows() != cst.order() || pv.cols() != 2 || qv.cols() != cst.order() {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            expected: vec![cst.order(), 2],
            got: pv.shape().to_vec(),
        });
    }
    let pts: Vec<(f64, f64)> = (0..cst.order()).map(|j| pv.complex_at(j)).collect();
    let period = qv.rows();
    let rows: Vec<f64> = qv.data().to_vec();
    let table = PriorTable {
        order: cst.order(),
        rows,
    };
    debug_assert_eq!(table.period(), period);
    let ys: Vec<(f64, f64)> = (0..yv.rows()).map(|k| yv.complex_at(k)).collect();
    let llrs = gaussian_llr_points(&ys, cst, &pts, &table, noise_var)?;
    let value = bce_loss(&llrs, cst, labels)?;
    let rule = BceRule {
        cst: cst.clone(),
        labels: labels.to_vec(),
        noise_var,
    };
    tape.custom(&[y, points, priors], Tensor::scalar(value), Box::new(rule))
}

/// `L̂ = BCE - Ĥ`, both in bits per symbol.
pub fn adjusted_loss(tape: &mut Tape, bce: Var, entropy: Var) -> Result<Var> {
    tape.sub(bce, entropy)
}

/// `σ² = mean |y - x|²`, floored at [`NOISE_FLOOR`].
pub fn estimate_noise_var(y: &[(f64, f64)], reference: &[(f64, f64)]) -> Result<f64> {
    if y.is_empty() || y.len() != reference.len() {
        return Err(Error::EmptyInput);
    }
    let s: f64 = y
        .iter()
        .zip(reference)
        .map(|(a, b)| (a.0 - b.0) * (a.0 - b.0) + (a.1 - b.1) * (a.1 - b.1))
        .sum();
    Ok((s / y.len() as f64).max(NOISE_FLOOR))
}

/// Bit-metric rate estimate for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AirReport {
    /// Entropy per symbol, bits.
    pub entropy: f64,
    /// BCE per symbol, bits.
    pub bce: f64,
    /// `max(0, entropy - bce)`, bits per 2D symbol.
    pub air: f64,
    pub air_stderr: f64,
    /// `R_t = Ĥ_t - BCE_t` per sequence position.
    pub per_step: Vec<f64>,
    pub launch_dbm: f64,
    pub length: usize,
}

/// Combines per-symbol entropy terms `-log2 p(x_t | past)` and per-symbol
/// BCE values, both in stream order `b * L + t`, into an [`AirReport`].
pub fn air_estimate(info_bits: &[f64], bce_bits: &[f64], length: usize, launch_dbm: f64) -> Result<AirReport> {
    if info_bits.is_empty() || length == 0 || info_bits.len() != bce_bits.len() || info_bits.len() % length != 0 {
        return Err(Error::invalid("entropy and BCE terms must cover whole sequences"));
    }
    let batch = info_bits.len() / length;
    let mut per_step = vec![0.0; length];
    let mut seq = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut acc = 0.0;
        for t in 0..length {
            let r = info_bits[b * length + t] - bce_bits[b * length + t];
            per_step[t] += r;
            acc += r;
        }
        seq.push(acc / length as f64);
    }
    for r in &mut per_step {
        *r /= batch as f64;
    }
    let n = info_bits.len() as f64;
    let entropy = info_bits.iter().sum::<f64>() / n;
    let bce = bce_bits.iter().sum::<f64>() / n;
    let mean = entropy - bce;
    let var = if batch > 1 {
        seq.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (batch as f64 - 1.0)
    } else {
        0.0
    };
    Ok(AirReport {
        entropy,
        bce,
        air: (entropy - bce).max(0.0),
        air_stderr: sqrt(var / batch as f64),
        per_step,
        launch_dbm,
        length,
    })
}
