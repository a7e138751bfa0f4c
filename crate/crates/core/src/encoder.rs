//! Autoregressive LSTM encoder over constellation indices.
//!
//! Row-vector convention throughout: a batch of inputs is a `[B, M]` matrix
//! and the cell computes `gates = x W_ih + h W_hh + b` with gate blocks
//! ordered input, forget, cell, output.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{argmax, matmul_nn, Tape, Tensor, Var};
use crate::constellation::Constellation;
use crate::math::{exp, ln, log_sum_exp, sigmoid, sqrt, tanh, LN_2};
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Constellation order M.
    pub order: usize,
    pub hidden: usize,
    /// Sequence length L.
    pub length: usize,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// Feed the relaxed sample instead of the hard one-hot to the next step.
    pub soft_feedback: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            order: 64,
            hidden: 256,
            length: 1,
            tau: 1.0,
            soft_feedback: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order < 2 || self.hidden == 0 || self.length == 0 {
            return Err(Error::invalid("order ≥ 2, hidden ≥ 1 and length ≥ 1 required"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// Names of the parameter tensors in the order used by
/// [`EncoderModel::tensors`].
pub const PARAM_NAMES: [&str; 5] = ["w_ih", "w_hh", "b", "w_out", "b_out"];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: [Tensor; 5],
}

/// Parameter handles bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl ParamVars {
    pub fn as_array(&self) -> [Var; 5] {
        [self.w_ih, self.w_hh, self.b, self.w_out, self.b_out]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

fn param_shapes(cfg: &EncoderConfig) -> [Vec<usize>; 5] {
    let (m, h) = (cfg.order, cfg.hidden);
    [
        vec![m, 4 * h],
        vec![h, 4 * h],
        vec![4 * h],
        vec![h, m],
        vec![m],
    ]
}

impl EncoderModel {
    /// Uniform initialisation on `±1/sqrt(hidden)`.
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        use rand::Rng as _;
        config.validate()?;
        let k = 1.0 / sqrt(config.hidden as f64);
        let params = param_shapes(&config).map(|s| {
            let n = s.iter().product();
            let data = (0..n).map(|_| rng.random_range(-k..k)).collect();
            Tensor::new(&s, data).expect("shape")
        });
        Ok(EncoderModel { config, params })
    }

    /// Model whose every parameter is zero; emits uniform conditionals.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let params = param_shapes(&config).map(|s| Tensor::zeros(&s));
        Ok(EncoderModel { config, params })
    }

    /// Zero recurrent weights and a head bias of `ln p`: every conditional
    /// equals the fixed marginal `p`.
    pub fn from_marginal(config: EncoderConfig, probs: &[f64]) -> Result<Self> {
        if probs.len() != config.order {
            return Err(Error::ShapeMismatch {
                op: "from_marginal",
                expected: vec![config.order],
                got: vec![probs.len()],
            });
        }
        let mut model = Self::zeros(config)?;
        for (b, &p) in model.params[4].data_mut().iter_mut().zip(probs) {
            // Far enough below any live logit that the softmax underflows to 0.
            *b = if p > 0.0 { ln(p) } else { -1e4 };
        }
        Ok(model)
    }

    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if tensors.len() != 5 {
            return Err(Error::invalid("expected five parameter tensors"));
        }
        for (t, s) in tensors.iter().zip(&shapes) {
            if t.shape() != s.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "from_tensors",
                    expected: s.clone(),
                    got: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "from_tensors" });
            }
        }
        let mut it = tensors.into_iter();
        let params = [(); 5].map(|_| it.next().expect("five"));
        Ok(EncoderModel { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        self.config.tau = tau;
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor; 5] {
        &self.params
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor; 5] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        let [a, b, c, d, e] = self.params.clone().map(|t| tape.leaf(t));
        ParamVars {
            w_ih: a,
            w_hh: b,
            b: c,
            w_out: d,
            b_out: e,
        }
    }

    /// Zero state for `batch` rows.
    pub fn start_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        let h = tape.constant(Tensor::zeros(&[batch, self.config.hidden]));
        let c = tape.constant(Tensor::zeros(&[batch, self.config.hidden]));
        LstmState { h, c }
    }

    /// Zero start token for `batch` rows.
    pub fn start_token(&self, tape: &mut Tape, batch: usize) -> Var {
        tape.constant(Tensor::zeros(&[batch, self.config.order]))
    }

    /// One recurrent step on the tape; returns the new state and `[B, M]` logits.
    pub fn lstm_step(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        state: LstmState,
        input: Var,
    ) -> Result<(LstmState, Var)> {
        let hid = self.config.hidden;
        let xi = tape.matmul(input, p.w_ih)?;
        let hh = tape.matmul(state.h, p.w_hh)?;
        let pre = tape.add(xi, hh)?;
        let gates = tape.add_row(pre, p.b)?;
        let i = tape.slice_cols(gates, 0, hid)?;
        let f = tape.slice_cols(gates, hid, hid)?;
        let g = tape.slice_cols(gates, 2 * hid, hid)?;
        let o = tape.slice_cols(gates, 3 * hid, hid)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        let lo = tape.matmul(h, p.w_out)?;
        let logits = tape.add_row(lo, p.b_out)?;
        Ok((LstmState { h, c }, logits))
    }

    /// Plain forward of one step for `batch` rows; updates `h`, `c` in place
    /// and returns `[B, M]` logits.
    pub fn step_plain(&self, h: &mut [f64], c: &mut [f64], input: &[f64], batch: usize) -> Vec<f64> {
        let (m, hid) = (self.config.order, self.config.hidden);
        let [w_ih, w_hh, b, w_out, b_out] = &self.params;
        let mut gates = Vec::with_capacity(batch * 4 * hid);
        for _ in 0..batch {
            gates.extend_from_slice(b.data());
        }
        matmul_nn(input, w_ih.data(), batch, m, 4 * hid, &mut gates);
        matmul_nn(h, w_hh.data(), batch, hid, 4 * hid, &mut gates);
        for r in 0..batch {
            let gr = &gates[r * 4 * hid..(r + 1) * 4 * hid];
            for k in 0..hid {
                let i = sigmoid(gr[k]);
                let f = sigmoid(gr[hid + k]);
                let g = tanh(gr[2 * hid + k]);
                let o = sigmoid(gr[3 * hid + k]);
                let cn = f * c[r * hid + k] + i * g;
                c[r * hid + k] = cn;
                h[r * hid + k] = o * tanh(cn);
            }
        }
        let mut logits = Vec::with_capacity(batch * m);
        for _ in 0..batch {
            logits.extend_from_slice(b_out.data());
        }
        matmul_nn(h, w_out.data(), batch, hid, m, &mut logits);
        logits
    }
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(logits.iter().cloned());
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = exp(l - lse);
    }
}

/// Relaxed sample `softmax((logits + noise) / tau)` for one row.
pub fn gumbel_softmax(logits: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let z: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
    let mut out = vec![0.0; z.len()];
    softmax_into(&z, &mut out);
    Ok(out)
}

/// Gumbel-softmax sample on the tape.
#[derive(Clone, Debug)]
pub struct GumbelSample {
    /// Relaxed `[B, M]` sample.
    pub soft: Var,
    /// One-hot of the argmax, carrying the gradient of `soft`.
    pub hard: Var,
    pub indices: Vec<usize>,
}

/// Draws one Gumbel-softmax sample per row of `logits` (`[B, M]`). Noise is
/// drawn row-major.
pub fn gumbel_softmax_sample(tape: &mut Tape, logits: Var, tau: f64, rng: &mut Rng) -> Result<GumbelSample> {
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let shape = tape.shape(logits).to_vec();
    let n: usize = shape.iter().product();
    let noise: Vec<f64> = (0..n).map(|_| rng::gumbel(rng)).collect();
    let g = tape.constant(Tensor::new(&shape, noise)?);
    let z = tape.add(logits, g)?;
    let z = tape.scale(z, 1.0 / tau)?;
    let soft = tape.softmax(z)?;
    let hard = tape.straight_through(soft)?;
    let m = tape.value(soft).cols();
    let indices = tape.value(soft).data().chunks(m).map(argmax).collect();
    Ok(GumbelSample { soft, hard, indices })
}

/// Sampled symbol sequences without gradient bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub batch: usize,
    pub length: usize,
    pub order: usize,
    /// Symbol of sequence `b` at step `t` at position `b * length + t`.
    pub indices: Vec<usize>,
    /// `p(x_t = i | past)` at `(b * length + t) * order + i`.
    pub cond_probs: Vec<f64>,
}

impl SampleBatch {
    pub fn symbol(&self, b: usize, t: usize) -> usize {
        self.indices[b * self.length + t]
    }

    pub fn conditional(&self, b: usize, t: usize) -> &[f64] {
        let k = (b * self.length + t) * self.order;
        &self.cond_probs[k..k + self.order]
    }

    /// Natural-log probability of sequence `b`.
    pub fn seq_log_prob(&self, b: usize) -> f64 {
        (0..self.length)
            .map(|t| ln(self.conditional(b, t)[self.symbol(b, t)]))
            .sum()
    }

    /// Per-position marginals averaged over the batch, `[L * M]`.
    pub fn marginals(&self) -> Vec<f64> {
        let (l, m) = (self.length, self.order);
        let mut out = vec![0.0; l * m];
        for b in 0..self.batch {
            for t in 0..l {
                for (o, p) in out[t * m..(t + 1) * m].iter_mut().zip(self.conditional(b, t)) {
                    *o += p;
                }
            }
        }
        for o in &mut out {
            *o /= self.batch as f64;
        }
        out
    }

    /// Mean energy `(1/L) Σ_t Σ_i p̂_t(i) |c_i|²` of the batch marginals.
    pub fn mean_energy(&self, cst: &Constellation) -> f64 {
        let e = cst.energies();
        let marg = self.marginals();
        marg.chunks(self.order)
            .map(|row| row.iter().zip(&e).map(|(p, e)| p * e).sum::<f64>())
            .sum::<f64>()
            / self.length as f64
    }
}

/// Tape rollout of a batch of sequences.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub plain: SampleBatch,
    /// Straight-through one-hots per step, `[B, M]` each.
    pub hard: Vec<Var>,
    /// Relaxed samples per step.
    pub soft: Vec<Var>,
    /// Conditional probabilities per step.
    pub probs: Vec<Var>,
    /// Conditional log-probabilities per step.
    pub log_probs: Vec<Var>,
}

/// Samples `batch` sequences of the configured length on the tape.
///
/// Step one feeds the zero start token from the zero state; later steps feed
/// the previous hard one-hot (or the relaxed sample with `soft_feedback`).
pub fn rollout(
    tape: &mut Tape,
    model: &EncoderModel,
    params: &ParamVars,
    batch: usize,
    tau: f64,
    rng: &mut Rng,
) -> Result<Rollout> {
    if batch == 0 {
        return Err(Error::EmptyInput);
    }
    let cfg = model.config();
    let (l, m) = (cfg.length, cfg.order);
    let mut state = model.start_state(tape, batch);
    let mut input = model.start_token(tape, batch);
    let mut out = Rollout {
        plain: SampleBatch {
            batch,
            length: l,
            order: m,
            indices: vec![0; batch * l],
            cond_probs: vec![0.0; batch * l * m],
        },
        hard: Vec::with_capacity(l),
        soft: Vec::with_capacity(l),
        probs: Vec::with_capacity(l),
        log_probs: Vec::with_capacity(l),
    };
    for t in 0..l {
        let (s, logits) = model.lstm_step(tape, params, state, input)?;
        state = s;
        let probs = tape.softmax(logits)?;
        let log_probs = tape.log_softmax(logits)?;
        let sample = gumbel_softmax_sample(tape, logits, tau, rng)?;
        let pv = tape.value(probs).data();
        for b in 0..batch {
            let k = b * l + t;
            out.plain.indices[k] = sample.indices[b];
            out.plain.cond_probs[k * m..(k + 1) * m].copy_from_slice(&pv[b * m..(b + 1) * m]);
        }
        input = if cfg.soft_feedback { sample.soft } else { sample.hard };
        out.hard.push(sample.hard);
        out.soft.push(sample.soft);
        out.probs.push(probs);
        out.log_probs.push(log_probs);
    }
    Ok(out)
}

impl Rollout {
    /// One-hots of all symbols as `[B * L, M]` in stream order `b * L + t`.
    pub fn stream_onehots(&self, tape: &mut Tape) -> Result<Var> {
        let (bsz, l) = (self.plain.batch, self.plain.length);
        let stacked = tape.concat_rows(&self.hard)?;
        if l == 1 {
            return Ok(stacked);
        }
        // Stacked rows are ordered t * B + b.
        let index: Vec<usize> = (0..bsz * l).map(|k| (k % l) * bsz + k / l).collect();
        tape.gather_rows(stacked, &index)
    }

    /// Per-position marginals `[L, M]`, averaged over the batch.
    pub fn marginals(&self, tape: &mut Tape) -> Result<Var> {
        let rows: Vec<Var> = self
            .probs
            .iter()
            .map(|&p| tape.mean_rows(p))
            .collect::<Result<_>>()?;
        tape.concat_rows(&rows)
    }

    /// Transmitted symbols `[B * L, 2]` in stream order, scaled by `scale`.
    pub fn symbols(&self, tape: &mut Tape, cst: &Constellation, scale: Var) -> Result<Var> {
        let onehots = self.stream_onehots(tape)?;
        let pts = tape.constant(cst.points_tensor());
        let x = tape.matmul(onehots, pts)?;
        tape.mul_scalar(x, scale)
    }

    /// Sum over steps of the batch-mean conditional entropy, in bits.
    pub fn expected_entropy(&self, tape: &mut Tape) -> Result<Var> {
        let p = tape.concat_rows(&self.probs)?;
        let lp = tape.concat_rows(&self.log_probs)?;
        let plp = tape.mul(p, lp)?;
        let s = tape.sum(plp)?;
        tape.scale(s, -1.0 / (self.plain.batch as f64 * LN_2))
    }
}

/// Scale factor enforcing unit mean energy:
/// `(1/L Σ_t Σ_i p̂_t(i) |c_i|²)^(-1/2)`, with `p̂_t` the batch-averaged
/// conditionals. Kept on the tape.
pub fn power_scale(tape: &mut Tape, rollout: &Rollout, cst: &Constellation) -> Result<Var> {
    if rollout.probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let p = tape.concat_rows(&rollout.probs)?;
    let e = tape.constant(Tensor::matrix(cst.order(), 1, cst.energies())?);
    let pe = tape.matmul(p, e)?;
    let energy = tape.mean(pe)?;
    if !(tape.value(energy).item() > 0.0) {
        return Err(Error::ZeroPower);
    }
    tape.powf(energy, -0.5)
}

/// Plain-path sampler: same recurrence and noise order as [`rollout`].
pub fn sample(model: &EncoderModel, batch: usize, rng: &mut Rng) -> Result<SampleBatch> {
    if batch == 0 {
        return Err(Error::EmptyInput);
    }
    let cfg = model.config();
    let (l, m, hid) = (cfg.length, cfg.order, cfg.hidden);
    let mut h = vec![0.0; batch * hid];
    let mut c = vec![0.0; batch * hid];
    let mut input = vec![0.0; batch * m];
    let mut out = SampleBatch {
        batch,
        length: l,
        order: m,
        indices: vec![0; batch * l],
        cond_probs: vec![0.0; batch * l * m],
    };
    let mut noise = vec![0.0; m];
    for t in 0..l {
        let logits = model.step_plain(&mut h, &mut c, &input, batch);
        for b in 0..batch {
            let row = &logits[b * m..(b + 1) * m];
            let k = b * l + t;
            softmax_into(row, &mut out.cond_probs[k * m..(k + 1) * m]);
            for g in noise.iter_mut() {
                *g = rng::gumbel(rng);
            }
            let soft = gumbel_softmax(row, &noise, cfg.tau)?;
            let idx = argmax(&soft);
            out.indices[k] = idx;
            let inp = &mut input[b * m..(b + 1) * m];
            if cfg.soft_feedback {
                inp.copy_from_slice(&soft);
            } else {
                inp.fill(0.0);
                inp[idx] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Conditional distributions for a known symbol sequence, one step at a
/// time; used by the distribution matcher.
#[derive(Clone, Debug)]
pub struct Context<'a> {
    model: &'a EncoderModel,
    h: Vec<f64>,
    c: Vec<f64>,
    probs: Vec<f64>,
}

impl<'a> Context<'a> {
    pub fn new(model: &'a EncoderModel) -> Self {
        let (m, hid) = (model.config.order, model.config.hidden);
        let mut ctx = Context {
            model,
            h: vec![0.0; hid],
            c: vec![0.0; hid],
            probs: vec![0.0; m],
        };
        ctx.feed(&vec![0.0; m]);
        ctx
    }

    fn feed(&mut self, input: &[f64]) {
        let logits = self.model.step_plain(&mut self.h, &mut self.c, input, 1);
        softmax_into(&logits, &mut self.probs);
    }

    /// `p(x_t | x_1..x_{t-1})` for the current step.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Commits symbol `s` and advances to the next step.
    pub fn advance(&mut self, s: usize) {
        let mut onehot = vec![0.0; self.model.config.order];
        onehot[s] = 1.0;
        self.feed(&onehot);
    }
}

/// Monte Carlo entropy estimate from sampled symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyEstimate {
    /// `Ĥ_t`: batch mean of `-log2 p(x_t | past)`, in bits.
    pub per_step: Vec<f64>,
    /// `Σ_t Ĥ_t`.
    pub total: f64,
    /// Standard error of `total`.
    pub stderr: f64,
}

impl EntropyEstimate {
    pub fn per_symbol(&self) -> f64 {
        self.total / self.per_step.len() as f64
    }
}

pub fn entropy_estimate(s: &SampleBatch) -> Result<EntropyEstimate> {
    if s.batch == 0 || s.length == 0 {
        return Err(Error::EmptyInput);
    }
    let mut per_step = vec![0.0; s.length];
    let mut seq = Vec::with_capacity(s.batch);
    for b in 0..s.batch {
        let mut acc = 0.0;
        for (t, ps) in per_step.iter_mut().enumerate() {
            let p = s.conditional(b, t)[s.symbol(b, t)];
            if !(p > 0.0) {
                return Err(Error::ZeroProbability { step: t });
            }
            let bits = -crate::math::log2(p);
            *ps += bits;
            acc += bits;
        }
        seq.push(acc);
    }
    for ps in &mut per_step {
        *ps /= s.batch as f64;
    }
    let total: f64 = per_step.iter().sum();
    let n = s.batch as f64;
    let var = if s.batch > 1 {
        seq.iter().map(|x| (x - total) * (x - total)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(EntropyEstimate {
        per_step,
        total,
        stderr: sqrt(var / n),
    })
}
