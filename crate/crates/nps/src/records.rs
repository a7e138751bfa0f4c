//! CSV result tables, training logs, coefficient tables and waveform dumps.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nps_core::channel::PerturbationCoeffs;
use nps_core::demapper::AirReport;
use nps_core::trainer::TrainLog;
use rustfft::num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ssfm::Waveform;
use crate::{NpsError, Result};

/// Version of every CSV layout below; bumped on any column change.
pub const CSV_SCHEMA: u32 = 1;

pub const RESULT_COLUMNS: [&str; 7] = [
    "power_dBm",
    "L",
    "entropy_bits",
    "bce_bits",
    "air_bits_per_2D",
    "air_stderr",
    "seed",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    #[serde(rename = "power_dBm")]
    pub power_dbm: f64,
    #[serde(rename = "L")]
    pub length: usize,
    pub entropy_bits: f64,
    pub bce_bits: f64,
    #[serde(rename = "air_bits_per_2D")]
    pub air: f64,
    pub air_stderr: f64,
    pub seed: u64,
}

impl ResultRow {
    pub fn from_report(r: &AirReport, seed: u64) -> Self {
        ResultRow {
            power_dbm: r.launch_dbm,
            length: r.length,
            entropy_bits: r.entropy,
            bce_bits: r.bce,
            air: r.air,
            air_stderr: r.air_stderr,
            seed,
        }
    }
}

/// Result row tagged with the transmission scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub scheme: String,
    #[serde(rename = "power_dBm")]
    pub power_dbm: f64,
    #[serde(rename = "L")]
    pub length: usize,
    pub entropy_bits: f64,
    pub bce_bits: f64,
    #[serde(rename = "air_bits_per_2D")]
    pub air: f64,
    pub air_stderr: f64,
    pub seed: u64,
}

impl BaselineRow {
    pub fn new(scheme: &str, r: &ResultRow) -> Self {
        BaselineRow {
            scheme: scheme.into(),
            power_dbm: r.power_dbm,
            length: r.length,
            entropy_bits: r.entropy_bits,
            bce_bits: r.bce_bits,
            air: r.air,
            air_stderr: r.air_stderr,
            seed: r.seed,
        }
    }
}

pub const BASELINE_COLUMNS: [&str; 8] = [
    "scheme",
    "power_dBm",
    "L",
    "entropy_bits",
    "bce_bits",
    "air_bits_per_2D",
    "air_stderr",
    "seed",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmRow {
    pub block_len: usize,
    pub blocks: usize,
    pub capacity_bits: usize,
    pub rate_bits: f64,
    pub entropy_bits: f64,
    pub rate_loss: f64,
    pub rate_loss_stderr: f64,
    pub roundtrip_ok: bool,
}

pub const DM_COLUMNS: [&str; 8] = [
    "block_len",
    "blocks",
    "capacity_bits",
    "rate_bits",
    "entropy_bits",
    "rate_loss",
    "rate_loss_stderr",
    "roundtrip_ok",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub entropy: f64,
    pub bce: f64,
    pub air: f64,
    pub grad_norm: f64,
    pub tau: f64,
    pub lr: f64,
}

pub const LOG_COLUMNS: [&str; 8] = ["iter", "loss", "entropy", "bce", "air", "grad_norm", "tau", "lr"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallRow {
    pub iter: usize,
    pub wall_s: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| NpsError::io(path, e))
}

/// Reads a CSV whose header must equal `columns` exactly.
pub fn read_csv<T: DeserializeOwned>(path: &Path, columns: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    if header != columns {
        return Err(NpsError::format(path, format!("unexpected columns {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> NpsError {
    NpsError::format(path, e.to_string())
}

/// Writes the deterministic training log and, separately, wall-clock times.
pub fn write_train_log(path: &Path, wall_path: Option<&Path>, log: &TrainLog) -> Result<()> {
    let rows: Vec<LogRow> = log
        .entries
        .iter()
        .map(|e| LogRow {
            iter: e.iter,
            loss: e.loss,
            entropy: e.entropy,
            bce: e.bce,
            air: e.air,
            grad_norm: e.grad_norm,
            tau: e.tau,
            lr: e.lr,
        })
        .collect();
    write_csv(path, &rows)?;
    if let Some(wp) = wall_path {
        let wall: Vec<WallRow> = log
            .entries
            .iter()
            .filter_map(|e| e.wall_s.map(|w| WallRow { iter: e.iter, wall_s: w }))
            .collect();
        write_csv(wp, &wall)?;
    }
    Ok(())
}

/// Plain-text coefficient table: `truncation`/`gamma` header lines, then one
/// `m n re im` line per triplet coefficient.
pub fn write_coeffs(path: &Path, c: &PerturbationCoeffs) -> Result<()> {
    let n = c.truncation() as isize;
    let mut s = String::from("# nps perturbation coefficients v1\n");
    s += &format!("truncation {}\ngamma {:?}\n# m n re im\n", c.truncation(), c.gamma());
    for m in -n..=n {
        for k in -n..=n {
            let v = c.triplet(m, k);
            s += &format!("{m} {k} {:?} {:?}\n", v.re, v.im);
        }
    }
    fs::write(path, s).map_err(|e| NpsError::io(path, e))
}

pub fn read_coeffs(path: &Path) -> Result<PerturbationCoeffs> {
    let f = fs::File::open(path).map_err(|e| NpsError::io(path, e))?;
    let bad = |m: &str| NpsError::format(path, m.to_string());
    let mut truncation = None;
    let mut gamma = None;
    let mut table = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| NpsError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["truncation", v] => truncation = Some(v.parse::<usize>().map_err(|_| bad("truncation"))?),
            ["gamma", v] => gamma = Some(v.parse::<f64>().map_err(|_| bad("gamma"))?),
            [m, k, re, im] => {
                let n = truncation.ok_or_else(|| bad("table before header"))? as isize;
                let w = 2 * n + 1;
                let (m, k): (isize, isize) = (m.parse().map_err(|_| bad("m"))?, k.parse().map_err(|_| bad("n"))?);
                if (m + n) * w + (k + n) != table.len() as isize {
                    return Err(bad("table rows out of order"));
                }
                table.push(Complex64::new(re.parse().map_err(|_| bad("re"))?, im.parse().map_err(|_| bad("im"))?));
            }
            _ => return Err(bad("unrecognised line")),
        }
    }
    let (Some(n), Some(g)) = (truncation, gamma) else {
        return Err(bad("missing header"));
    };
    Ok(PerturbationCoeffs::from_triplets(n, g, table)?)
}

const WAVE_MAGIC: &str = "NPSWAVE 1";

/// Text header (sample rate, centre frequency, sample count) terminated by
/// `end`, then interleaved little-endian `f64` real/imaginary pairs.
pub fn write_waveform(path: &Path, wf: &Waveform) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| NpsError::io(path, e))?;
    let header = format!(
        "{WAVE_MAGIC}\nsample_rate_hz {:?}\ncenter_hz {:?}\nsamples {}\nend\n",
        wf.sample_rate_hz,
        wf.center_hz,
        wf.len()
    );
    let mut buf = header.into_bytes();
    buf.reserve(16 * wf.len());
    for v in &wf.samples {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    f.write_all(&buf).map_err(|e| NpsError::io(path, e))
}

pub fn read_waveform(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| NpsError::io(path, e))?;
    let bad = |m: &str| NpsError::format(path, m.to_string());
    let mut pos = 0;
    let mut fields = std::collections::BTreeMap::new();
    let mut first = true;
    loop {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))? + pos;
        let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("header not UTF-8"))?;
        pos = end + 1;
        if first {
            if line != WAVE_MAGIC {
                return Err(bad("missing magic"));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let (k, v) = line.split_once(' ').ok_or_else(|| bad("header line"))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| bad(&format!("missing {k}")));
    let fs_hz: f64 = get("sample_rate_hz")?.parse().map_err(|_| bad("sample_rate_hz"))?;
    let fc: f64 = get("center_hz")?.parse().map_err(|_| bad("center_hz"))?;
    let n: usize = get("samples")?.parse().map_err(|_| bad("samples"))?;
    let body = &bytes[pos..];
    if body.len() != 16 * n {
        return Err(bad("sample count mismatch"));
    }
    let samples = body
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
            )
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate_hz: fs_hz,
        center_hz: fc,
    })
}
