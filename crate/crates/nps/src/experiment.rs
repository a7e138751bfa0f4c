//! Experiment runners behind the `nps` subcommands.
//!
//! Every command writes into one output directory:
//!
//! - `manifest.toml`: the resolved configuration plus a `[run]` table;
//! - `results.csv`, `baseline.csv` or `dm.csv`;
//! - `models/model_p{P}_L{L}.json` checkpoints and `logs/` training logs;
//! - `coeffs.txt` when the perturbative channel is used;
//! - `results.svg` when plotting is requested.
//!
//! CSV files contain no timing information, so identical configurations
//! produce byte-identical tables. Wall-clock times go to `logs/wall_*.csv`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use nps_core::channel::{ase_variance_watt, compute_coeffs, ChannelModel, PerturbationCoeffs, PerturbativeChannel};
use nps_core::constellation::{match_entropy, Constellation, SymbolDistribution};
use nps_core::encoder::{EncoderConfig, EncoderModel};
use nps_core::math::db_to_lin;
use nps_core::matcher::{rate_loss, Matcher};
use nps_core::rng::{self, Rng};
use nps_core::trainer::{evaluate, evaluate_iid, EvalConfig, Link, TrainHooks, TrainLog, Trainer};
use rand::Rng as _;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{Backend, ExperimentConfig, RunSection};
use crate::frame;
use crate::plot;
use crate::records::{self, BaselineRow, DmRow, ResultRow, CSV_SCHEMA};
use crate::ssfm::SsfmLink;
use crate::{NpsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Train,
    Eval,
    SweepPower,
    SweepLength,
    Baseline,
    DmTest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::SweepPower => "sweep-power",
            Command::SweepLength => "sweep-length",
            Command::Baseline => "baseline",
            Command::DmTest => "dm-test",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint: Option<PathBuf>,
    /// Directory with `model_p{P}_L{L}.json` checkpoints for `baseline`.
    pub models: Option<PathBuf>,
    pub plot: bool,
}

/// Channel used for evaluation.
pub enum EvalLink {
    Model(ChannelModel),
    Ssfm(Box<SsfmLink>),
}

impl Link for EvalLink {
    fn transmit(&self, x: &[(f64, f64)], rng: &mut Rng) -> nps_core::Result<Vec<(f64, f64)>> {
        match self {
            EvalLink::Model(m) => Link::transmit(m, x, rng),
            EvalLink::Ssfm(s) => Link::transmit(s.as_ref(), x, rng),
        }
    }
}

/// File stem shared by checkpoints and logs of one (power, L) pair.
pub fn run_name(power_dbm: f64, length: usize) -> String {
    format!("p{power_dbm}_L{length}")
}

pub fn checkpoint_path(dir: &Path, power_dbm: f64, length: usize) -> PathBuf {
    dir.join(format!("model_{}.json", run_name(power_dbm, length)))
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    coeffs: OnceLock<PerturbationCoeffs>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Experiment {
            cfg,
            coeffs: OnceLock::new(),
        })
    }

    pub fn coeffs(&self) -> Result<&PerturbationCoeffs> {
        if let Some(c) = self.coeffs.get() {
            return Ok(c);
        }
        let pc = &self.cfg.perturbation;
        let c = match &pc.coeffs_file {
            Some(f) => records::read_coeffs(Path::new(f))?.truncate(pc.truncation)?,
            None => compute_coeffs(&self.cfg.fiber.to_core(), &self.cfg.perturbation_core())?,
        };
        Ok(self.coeffs.get_or_init(|| c))
    }

    /// Differentiable channel for training at `power_dbm`.
    pub fn training_channel(&self, power_dbm: f64) -> Result<ChannelModel> {
        let fiber = self.cfg.fiber.to_core();
        let baud = self.cfg.grid.baud_gbd;
        match self.cfg.experiment.channel {
            Backend::Awgn => Ok(ChannelModel::Awgn {
                noise_var: ase_variance_watt(&fiber, baud) / (1e-3 * db_to_lin(power_dbm)),
            }),
            Backend::Perturbative => Ok(ChannelModel::Perturbative(PerturbativeChannel::new(
                self.coeffs()?.clone(),
                &fiber,
                baud,
                power_dbm,
            )?)),
            Backend::Ssfm => Err(NpsError::config(
                "the split-step channel is evaluation only; train with channel = \"perturbative\" or \"awgn\"",
            )),
        }
    }

    pub fn eval_link(&self, power_dbm: f64) -> Result<EvalLink> {
        match self.cfg.experiment.channel {
            Backend::Ssfm => {
                let mut link = SsfmLink::new(self.cfg.fiber.to_core(), self.cfg.grid.clone(), power_dbm)?;
                link.ssfm = self.cfg.ssfm.clone();
                link.receiver = self.cfg.receiver.clone();
                Ok(EvalLink::Ssfm(Box::new(link)))
            }
            _ => Ok(EvalLink::Model(self.training_channel(power_dbm)?)),
        }
    }

    pub fn eval_config(&self, power_dbm: f64, length: usize) -> EvalConfig {
        EvalConfig {
            sequences: (self.cfg.eval.symbols / length).max(1),
            chunk: (self.cfg.eval.chunk_symbols / length).max(1),
            seed: self.cfg.experiment.seed,
            launch_dbm: power_dbm,
        }
    }

    /// Trains one encoder. With `out` set, checkpoints and logs are written
    /// below it; a failed run still leaves its last state and log behind.
    pub fn train(&self, power_dbm: f64, length: usize, out: Option<&Path>) -> Result<(EncoderModel, TrainLog)> {
        let channel = self.training_channel(power_dbm)?;
        let seed = self.cfg.experiment.seed;
        let tc = self.cfg.train.to_core(length, seed);
        let mut trainer = Trainer::new(tc, &channel)?;
        let meta = |iteration| CheckpointMeta {
            iteration,
            launch_dbm: Some(power_dbm),
            seed: Some(seed),
        };
        let models = out.map(|o| o.join("models"));
        let start = Instant::now();
        let clock = move || start.elapsed().as_secs_f64();
        let mut save_ckpt = |it: usize, model: &EncoderModel, _: &TrainLog| -> nps_core::Result<()> {
            match &models {
                Some(dir) => checkpoint::save(&checkpoint_path(dir, power_dbm, length), model, &meta(it))
                    .map_err(|e| nps_core::Error::InvalidParameter(e.to_string())),
                None => Ok(()),
            }
        };
        let mut hooks = TrainHooks {
            clock: Some(&clock),
            checkpoint: Some(&mut save_ckpt),
        };
        let result = trainer.run(&mut hooks);
        drop(hooks);
        if let Some(o) = out {
            let name = run_name(power_dbm, length);
            let logs = o.join("logs");
            records::write_train_log(
                &logs.join(format!("trainlog_{name}.csv")),
                Some(&logs.join(format!("wall_{name}.csv"))),
                trainer.log(),
            )?;
            let models = o.join("models");
            let path = match result {
                Ok(()) => checkpoint_path(&models, power_dbm, length),
                Err(_) => models.join(format!("model_{name}_failed.json")),
            };
            checkpoint::save(&path, trainer.model(), &meta(trainer.iteration()))?;
        }
        result?;
        Ok(trainer.into_parts())
    }

    pub fn evaluate_model(&self, model: &EncoderModel, power_dbm: f64) -> Result<ResultRow> {
        let link = self.eval_link(power_dbm)?;
        let r = evaluate(model, &link, &self.eval_config(power_dbm, model.config().length))?;
        Ok(ResultRow::from_report(&r, self.cfg.experiment.seed))
    }

    pub fn evaluate_distribution(&self, dist: &SymbolDistribution, power_dbm: f64) -> Result<ResultRow> {
        let cst = Constellation::qam(dist.len())?;
        let link = self.eval_link(power_dbm)?;
        let r = evaluate_iid(dist, &cst, &link, &self.eval_config(power_dbm, 1))?;
        Ok(ResultRow::from_report(&r, self.cfg.experiment.seed))
    }

    fn grid(&self) -> Vec<(f64, usize)> {
        let e = &self.cfg.experiment;
        e.power_dbm
            .iter()
            .flat_map(|&p| e.lengths.iter().map(move |&l| (p, l)))
            .collect()
    }

    fn train_grid(&self, out: &Path) -> Result<Vec<ResultRow>> {
        let jobs = self.grid();
        par_map(&jobs, self.cfg.experiment.workers, |&(p, l)| {
            let (model, _) = self.train(p, l, Some(out))?;
            let row = self.evaluate_model(&model, p)?;
            eprintln!("trained {}: AIR {:.4} bits/2D, H {:.4}", run_name(p, l), row.air, row.entropy_bits);
            Ok(row)
        })
    }

    fn manifest(&self, command: Command, opts: &RunOptions) -> ExperimentConfig {
        let mut cfg = self.cfg.clone();
        cfg.run = Some(RunSection {
            command: command.name().into(),
            version: env!("CARGO_PKG_VERSION").into(),
            csv_schema: CSV_SCHEMA,
            checkpoint: opts.checkpoint.as_ref().map(|p| p.display().to_string()),
            models: opts.models.as_ref().map(|p| p.display().to_string()),
        });
        cfg
    }

    /// Runs `command`, writing all artifacts below `out`.
    pub fn run(&self, command: Command, opts: &RunOptions, out: &Path) -> Result<()> {
        let checkpoint = match (command, &opts.checkpoint) {
            (Command::Eval, None) => return Err(NpsError::config("eval needs --checkpoint")),
            (Command::Train | Command::SweepLength | Command::Baseline, Some(_)) => {
                return Err(NpsError::config(format!("{} does not take --checkpoint", command.name())))
            }
            (_, Some(p)) => Some(checkpoint::load(p)?),
            (_, None) => None,
        };
        if command == Command::SweepLength && self.cfg.experiment.power_dbm.len() != 1 {
            return Err(NpsError::config("sweep-length runs at a single launch power"));
        }
        if matches!(command, Command::Train | Command::SweepLength) {
            self.training_channel(self.cfg.experiment.power_dbm[0])?;
        }
        for dir in [out.to_path_buf(), out.join("models"), out.join("logs")] {
            fs::create_dir_all(&dir).map_err(|e| NpsError::io(&dir, e))?;
        }
        let manifest = out.join("manifest.toml");
        fs::write(&manifest, self.manifest(command, opts).to_toml()).map_err(|e| NpsError::io(&manifest, e))?;
        if self.cfg.experiment.channel == Backend::Perturbative {
            records::write_coeffs(&out.join("coeffs.txt"), self.coeffs()?)?;
        }

        let powers = self.cfg.experiment.power_dbm.clone();
        let workers = self.cfg.experiment.workers;
        let results = out.join("results.csv");
        match command {
            Command::Train | Command::SweepLength => {
                let rows = self.train_grid(out)?;
                records::write_csv(&results, &rows)?;
                self.maybe_plot(opts, out, &rows)?;
            }
            Command::Eval | Command::SweepPower => {
                let model = match checkpoint {
                    Some((m, _)) => m,
                    None => EncoderModel::zeros(EncoderConfig {
                        order: self.cfg.train.order,
                        hidden: 1,
                        length: 1,
                        ..EncoderConfig::default()
                    })?,
                };
                let rows = par_map(&powers, workers, |&p| self.evaluate_model(&model, p))?;
                records::write_csv(&results, &rows)?;
                self.maybe_plot(opts, out, &rows)?;
            }
            Command::Baseline => {
                let models = opts.models.clone().unwrap_or_else(|| out.join("models"));
                let groups = par_map(&powers, workers, |&p| self.baseline_at(p, &models))?;
                let rows: Vec<BaselineRow> = groups.into_iter().flatten().collect();
                records::write_csv(&out.join("baseline.csv"), &rows)?;
            }
            Command::DmTest => {
                let model = match checkpoint {
                    Some((m, _)) => m,
                    None => self.dm_default_model()?,
                };
                self.dm_test(&model, out)?;
            }
        }
        Ok(())
    }

    fn maybe_plot(&self, opts: &RunOptions, out: &Path, rows: &[ResultRow]) -> Result<()> {
        if !opts.plot {
            return Ok(());
        }
        let path = out.join("results.svg");
        let svg = plot::air_plot(rows);
        fs::write(&path, svg).map_err(|e| NpsError::io(&path, e))
    }

    /// Uniform, entropy-matched Maxwell-Boltzmann and the available NPS
    /// models at one launch power, all on the same noise realisations.
    pub fn baseline_at(&self, power_dbm: f64, models: &Path) -> Result<Vec<BaselineRow>> {
        let order = self.cfg.train.order;
        let cst = Constellation::qam(order)?;
        let mut rows = vec![BaselineRow::new(
            "uniform",
            &self.evaluate_distribution(&SymbolDistribution::uniform(order), power_dbm)?,
        )];
        let mut nps = Vec::new();
        let l1 = checkpoint_path(models, power_dbm, 1);
        let l1_row = if l1.exists() {
            let (m, _) = checkpoint::load(&l1)?;
            Some(self.evaluate_model(&m, power_dbm)?)
        } else {
            None
        };
        let target = match (self.cfg.baseline.entropy_target, &l1_row) {
            (Some(h), _) => h,
            (None, Some(r)) => r.entropy_bits,
            (None, None) => {
                return Err(NpsError::config(format!(
                    "baseline needs {} or baseline.entropy_target",
                    l1.display()
                )))
            }
        };
        let mb = match_entropy(&cst, target)?;
        rows.push(BaselineRow::new("mb", &self.evaluate_distribution(&mb, power_dbm)?));
        if let Some(r) = l1_row {
            nps.push(r);
        }
        if let Some(l) = longest_model(models, power_dbm)? {
            let (m, _) = checkpoint::load(&checkpoint_path(models, power_dbm, l))?;
            nps.push(self.evaluate_model(&m, power_dbm)?);
        }
        rows.extend(nps.iter().map(|r| BaselineRow::new("nps", r)));
        Ok(rows)
    }

    fn dm_default_model(&self) -> Result<EncoderModel> {
        let order = self.cfg.train.order;
        let cfg = EncoderConfig {
            order,
            hidden: 1,
            length: 1,
            ..EncoderConfig::default()
        };
        match self.cfg.dm.entropy_target {
            Some(h) => {
                let d = match_entropy(&Constellation::qam(order)?, h)?;
                Ok(EncoderModel::from_marginal(cfg, d.probs())?)
            }
            None => Ok(EncoderModel::zeros(cfg)?),
        }
    }

    /// Round trip of random frames through the framed matcher and the rate
    /// loss at `dm.block_len`.
    pub fn dm_test(&self, model: &EncoderModel, out: &Path) -> Result<DmRow> {
        let dm = &self.cfg.dm;
        let seed = self.cfg.experiment.seed;
        let mut r = rng::stream(seed, 0xd0);
        let mut roundtrip_ok = true;
        let mut sample = None;
        let mut capacity = 0;
        for _ in 0..dm.blocks {
            capacity = Matcher::new(model, dm.block_len)?.capacity();
            let bits: Vec<u8> = (0..capacity).map(|_| r.random_range(0..2u8)).collect();
            let f = frame::encode(model, &bits, dm.block_len)?;
            let bytes = f.to_bytes();
            let back = frame::decode(model, &frame::Frame::from_bytes(&bytes)?)?;
            roundtrip_ok &= back == bits;
            sample.get_or_insert(bytes);
        }
        let rl = rate_loss(model, dm.block_len, dm.blocks, seed)?;
        let row = DmRow {
            block_len: dm.block_len,
            blocks: dm.blocks,
            capacity_bits: capacity,
            rate_bits: rl.rate,
            entropy_bits: rl.entropy,
            rate_loss: rl.loss,
            rate_loss_stderr: rl.stderr,
            roundtrip_ok,
        };
        records::write_csv(&out.join("dm.csv"), std::slice::from_ref(&row))?;
        if let Some(bytes) = sample {
            let p = out.join("dm_sample.npdm");
            fs::write(&p, bytes).map_err(|e| NpsError::io(&p, e))?;
        }
        if !roundtrip_ok {
            return Err(NpsError::Runtime("distribution matcher round trip failed".into()));
        }
        Ok(row)
    }
}

/// Largest `L > 1` with a checkpoint for `power_dbm` in `dir`.
fn longest_model(dir: &Path, power_dbm: f64) -> Result<Option<usize>> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(None);
    };
    let prefix = format!("model_p{power_dbm}_L");
    let mut best = None;
    for e in entries {
        let e = e.map_err(|err| NpsError::io(dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(l) = name
            .strip_prefix(&prefix)
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            if l > 1 && best.is_none_or(|b| l > b) {
                best = Some(l);
            }
        }
    }
    Ok(best)
}

/// Applies `f` to every item on up to `workers` threads; results keep the
/// input order and the first error in that order is returned.
pub fn par_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every item processed"))
        .collect()
}
