//! Training loop and Monte Carlo evaluation.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor};
use crate::channel::ChannelModel;
use crate::constellation::{Constellation, SymbolDistribution};
use crate::demapper::{self, air_estimate, AirReport, PriorTable};
use crate::encoder::{self, EncoderConfig, EncoderModel, SampleBatch};
use crate::math::{ln, log2, powf, sqrt};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Random stream ids derived from the run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SYMBOLS: u64 = 1;
    pub const NOISE: u64 = 2;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    /// Sequences per iteration.
    pub batch: usize,
    pub iterations: usize,
    pub adam: AdamConfig,
    /// `(fraction of iterations, factor)` learning-rate drops.
    pub lr_decay: Vec<(f64, f64)>,
    /// Final temperature of a geometric annealing schedule; `None` keeps
    /// `encoder.tau` fixed.
    pub tau_final: Option<f64>,
    pub seed: u64,
    /// Iterations between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            batch: 256,
            iterations: 20_000,
            adam: AdamConfig::default(),
            lr_decay: vec![(0.6, 0.3), (0.85, 0.3)],
            tau_final: None,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::invalid("invalid Adam settings"));
        }
        if self.lr_decay.iter().any(|&(f, k)| !(0.0..=1.0).contains(&f) || !(k > 0.0)) {
            return Err(Error::invalid("invalid learning-rate schedule"));
        }
        if let Some(t) = self.tau_final {
            if !(t > 0.0) {
                return Err(Error::invalid("temperature must be positive"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        let frac = iter as f64 / self.iterations.max(1) as f64;
        self.lr_decay
            .iter()
            .filter(|&&(f, _)| frac >= f)
            .fold(self.adam.lr, |lr, &(_, k)| lr * k)
    }

    pub fn tau_at(&self, iter: usize) -> f64 {
        match self.tau_final {
            None => self.encoder.tau,
            Some(end) if self.iterations > 1 => {
                let f = iter as f64 / (self.iterations - 1) as f64;
                self.encoder.tau * powf(end / self.encoder.tau, f)
            }
            Some(end) => end,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    /// `BCE - Ĥ` per symbol, bits.
    pub loss: f64,
    /// Sampled entropy per symbol, bits.
    pub entropy: f64,
    pub bce: f64,
    /// `max(0, entropy - bce)`.
    pub air: f64,
    pub grad_norm: f64,
    pub tau: f64,
    pub lr: f64,
    /// Seconds since the start of training, if a clock was supplied.
    pub wall_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

/// One optimisation run.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    cst: Constellation,
    channel: &'a ChannelModel,
    model: EncoderModel,
    adam: AdamState,
    sym_rng: Rng,
    noise_rng: Rng,
    iter: usize,
    log: TrainLog,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, channel: &'a ChannelModel) -> Result<Self> {
        cfg.validate()?;
        let cst = Constellation::qam(cfg.encoder.order)?;
        let model = EncoderModel::new(cfg.encoder.clone(), &mut rng::stream(cfg.seed, streams::INIT))?;
        Self::resume(cfg, channel, model, cst)
    }

    /// Starts from an existing model with fresh optimiser state.
    pub fn from_model(cfg: TrainConfig, channel: &'a ChannelModel, model: EncoderModel) -> Result<Self> {
        cfg.validate()?;
        let cst = Constellation::qam(model.config().order)?;
        Self::resume(cfg, channel, model, cst)
    }

    fn resume(cfg: TrainConfig, channel: &'a ChannelModel, model: EncoderModel, cst: Constellation) -> Result<Self> {
        let adam = AdamState::new(model.tensors());
        Ok(Trainer {
            sym_rng: rng::stream(cfg.seed, streams::SYMBOLS),
            noise_rng: rng::stream(cfg.seed, streams::NOISE),
            cfg,
            cst,
            channel,
            model,
            adam,
            iter: 0,
            log: TrainLog::default(),
        })
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn into_parts(self) -> (EncoderModel, TrainLog) {
        (self.model, self.log)
    }

    /// One iteration: rollout, power scaling, channel, demapper, adjusted
    /// loss, backward pass and Adam update.
    pub fn step(&mut self) -> Result<LogEntry> {
        let it = self.iter;
        let tau = self.cfg.tau_at(it);
        let lr = self.cfg.lr_at(it);
        let l = self.cfg.encoder.length;

        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape);
        let ro = encoder::rollout(&mut tape, &self.model, &params, self.cfg.batch, tau, &mut self.sym_rng)?;
        let scale = encoder::power_scale(&mut tape, &ro, &self.cst)?;
        let x = ro.symbols(&mut tape, &self.cst, scale)?;
        let y = self.channel.propagate(&mut tape, x, &mut self.noise_rng)?;

        let xv = complex_rows(tape.value(x));
        let yv = complex_rows(tape.value(y));
        let var = demapper::estimate_noise_var(&yv, &xv)?;

        let pts = tape.constant(self.cst.points_tensor());
        let pts = tape.mul_scalar(pts, scale)?;
        let priors = ro.marginals(&mut tape)?;
        let bce = demapper::bce_loss_tape(&mut tape, y, pts, priors, &self.cst, &ro.plain.indices, var)?;
        let h = ro.expected_entropy(&mut tape)?;
        let h = tape.scale(h, 1.0 / l as f64)?;
        let loss = demapper::adjusted_loss(&mut tape, bce, h)?;

        let loss_v = tape.value(loss).item();
        if !loss_v.is_finite() {
            return Err(Error::Divergence(it));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = params.as_array().iter().map(|&v| grads.wrt(v)).collect();
        let grad_norm = sqrt(g.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>());
        let adam_cfg = AdamConfig { lr, ..self.cfg.adam };
        adam_step(self.model.tensors_mut(), &g, &mut self.adam, &adam_cfg).map_err(|e| match e {
            Error::NonFiniteGradient(_) => Error::Divergence(it),
            e => e,
        })?;

        let entropy = encoder::entropy_estimate(&ro.plain)?.per_symbol();
        let bce_v = tape.value(bce).item();
        let entry = LogEntry {
            iter: it,
            loss: loss_v,
            entropy,
            bce: bce_v,
            air: (entropy - bce_v).max(0.0),
            grad_norm,
            tau,
            lr,
            wall_s: None,
        };
        self.iter += 1;
        Ok(entry)
    }

    /// Runs the configured number of iterations.
    pub fn run(&mut self, hooks: &mut TrainHooks<'_>) -> Result<()> {
        let t0 = hooks.clock.as_ref().map(|c| c());
        while self.iter < self.cfg.iterations {
            let mut e = self.step()?;
            if let (Some(c), Some(t0)) = (hooks.clock.as_ref(), t0) {
                e.wall_s = Some(c() - t0);
            }
            self.log.entries.push(e);
            let done = self.iter;
            let every = self.cfg.checkpoint_every;
            if every > 0 && done % every == 0 && done < self.cfg.iterations {
                if let Some(cb) = hooks.checkpoint.as_mut() {
                    cb(done, &self.model, &self.log)?;
                }
            }
        }
        if let Some(t) = self.cfg.tau_final {
            self.model.set_tau(t)?;
        }
        Ok(())
    }
}

type CheckpointFn<'h> = dyn FnMut(usize, &EncoderModel, &TrainLog) -> Result<()> + 'h;

/// Optional callbacks for [`train`].
#[derive(Default)]
pub struct TrainHooks<'h> {
    /// Monotone clock in seconds.
    pub clock: Option<&'h dyn Fn() -> f64>,
    /// Called with the completed iteration count at the checkpoint cadence.
    pub checkpoint: Option<&'h mut CheckpointFn<'h>>,
}

/// Trains a fresh model; `iterations = 0` returns the initialised model.
pub fn train(cfg: TrainConfig, channel: &ChannelModel, hooks: &mut TrainHooks<'_>) -> Result<(EncoderModel, TrainLog)> {
    let mut t = Trainer::new(cfg, channel)?;
    t.run(hooks)?;
    Ok(t.into_parts())
}

fn complex_rows(t: &Tensor) -> Vec<(f64, f64)> {
    (0..t.rows()).map(|i| t.complex_at(i)).collect()
}

/// Channel used for evaluation: maps unit-power symbols to received symbols
/// in the same coordinates.
pub trait Link {
    fn transmit(&self, x: &[(f64, f64)], rng: &mut Rng) -> Result<Vec<(f64, f64)>>;
}

impl Link for ChannelModel {
    fn transmit(&self, x: &[(f64, f64)], rng: &mut Rng) -> Result<Vec<(f64, f64)>> {
        ChannelModel::transmit(self, x, rng).map(|r| r.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Total sequences.
    pub sequences: usize,
    /// Sequences per channel use.
    pub chunk: usize,
    pub seed: u64,
    pub launch_dbm: f64,
}

/// Symbols of one evaluation chunk with their information content.
struct Chunk {
    indices: Vec<usize>,
    /// `-log2 p(x_t | past)` per symbol.
    info: Vec<f64>,
    /// Per-position priors `[L, M]`.
    priors: Vec<f64>,
    length: usize,
}

fn chunk_from_samples(s: &SampleBatch) -> Chunk {
    let info = s
        .indices
        .iter()
        .enumerate()
        .map(|(k, &i)| -log2(s.cond_probs[k * s.order + i]))
        .collect();
    Chunk {
        indices: s.indices.clone(),
        info,
        priors: s.marginals(),
        length: s.length,
    }
}

fn evaluate_chunks<F>(cst: &Constellation, link: &dyn Link, cfg: &EvalConfig, mut draw: F) -> Result<AirReport>
where
    F: FnMut(usize, &mut Rng) -> Result<Chunk>,
{
    if cfg.sequences == 0 || cfg.chunk == 0 {
        return Err(Error::EmptyInput);
    }
    let mut sym_rng = rng::stream(cfg.seed, streams::SYMBOLS);
    let mut noise_rng = rng::stream(cfg.seed, streams::NOISE);
    let e = cst.energies();
    let mut info_all = Vec::new();
    let mut bce_all = Vec::new();
    let mut length = 1;
    let mut left = cfg.sequences;
    while left > 0 {
        let b = left.min(cfg.chunk);
        left -= b;
        let c = draw(b, &mut sym_rng)?;
        length = c.length;
        let m = cst.order();
        let energy = c
            .priors
            .chunks(m)
            .map(|row| row.iter().zip(&e).map(|(p, e)| p * e).sum::<f64>())
            .sum::<f64>()
            / c.length as f64;
        if !(energy > 0.0) {
            return Err(Error::ZeroPower);
        }
        let scale = 1.0 / sqrt(energy);
        let x: Vec<(f64, f64)> = c
            .indices
            .iter()
            .map(|&i| {
                let p = cst.point(i);
                (scale * p.0, scale * p.1)
            })
            .collect();
        let y = link.transmit(&x, &mut noise_rng)?;
        let var = demapper::estimate_noise_var(&y, &x)?;
        let pts: Vec<(f64, f64)> = cst.points().iter().map(|p| (scale * p.0, scale * p.1)).collect();
        let table = PriorTable::new(m, c.priors)?;
        let llrs = demapper::gaussian_llr_points(&y, cst, &pts, &table, var)?;
        bce_all.extend(demapper::bce_per_symbol(&llrs, cst, &c.indices)?);
        info_all.extend(c.info);
    }
    air_estimate(&info_all, &bce_all, length, cfg.launch_dbm)
}

/// No-gradient Monte Carlo AIR of an encoder over `link`.
pub fn evaluate(model: &EncoderModel, link: &dyn Link, cfg: &EvalConfig) -> Result<AirReport> {
    let cst = Constellation::qam(model.config().order)?;
    evaluate_chunks(&cst, link, cfg, |b, r| Ok(chunk_from_samples(&encoder::sample(model, b, r)?)))
}

/// AIR of i.i.d. symbols from a fixed distribution. Symbols are drawn by
/// Gumbel-max with the same noise order as [`encoder::sample`], so a model
/// whose conditionals equal `dist` sees identical symbols.
pub fn evaluate_iid(dist: &SymbolDistribution, cst: &Constellation, link: &dyn Link, cfg: &EvalConfig) -> Result<AirReport> {
    if dist.len() != cst.order() {
        return Err(Error::invalid("distribution and constellation differ in order"));
    }
    let m = cst.order();
    let logp: Vec<f64> = dist.probs().iter().map(|&p| if p > 0.0 { ln(p) } else { f64::NEG_INFINITY }).collect();
    evaluate_chunks(cst, link, cfg, |b, r| {
        let mut indices = Vec::with_capacity(b);
        let mut info = Vec::with_capacity(b);
        for _ in 0..b {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, lp) in logp.iter().enumerate() {
                let v = lp + rng::gumbel(r);
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            indices.push(best);
            info.push(-log2(dist.probs()[best]));
        }
        let priors = dist.probs().to_vec();
        debug_assert_eq!(priors.len(), m);
        Ok(Chunk {
            indices,
            info,
            priors,
            length: 1,
        })
    })
}
