use std::fs;

use nps::checkpoint::{self, CheckpointMeta};
use nps::config::{Backend, ExperimentConfig};
use nps::frame::{self, Frame};
use nps::records::{self, BaselineRow, ResultRow, BASELINE_COLUMNS, RESULT_COLUMNS};
use nps::ssfm::Waveform;
use nps_core::channel::{compute_coeffs, FiberParams, PerturbationConfig};
use nps_core::encoder::{EncoderConfig, EncoderModel};
use nps_core::rng;
use rustfft::num_complex::Complex64;

fn small_model(length: usize, seed: u64) -> EncoderModel {
    let cfg = EncoderConfig {
        order: 16,
        hidden: 6,
        length,
        tau: 0.7,
        soft_feedback: false,
    };
    EncoderModel::new(cfg, &mut rng::seeded(seed)).unwrap()
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let model = small_model(4, 3);
    let meta = CheckpointMeta {
        iteration: 17,
        launch_dbm: Some(-1.5),
        seed: Some(9),
    };
    checkpoint::save(&path, &model, &meta).unwrap();
    let (back, meta2) = checkpoint::load(&path).unwrap();
    assert_eq!(meta, meta2);
    assert_eq!(back.config(), model.config());
    for (a, b) in model.tensors().iter().zip(back.tensors()) {
        assert_eq!(a.shape(), b.shape());
        let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }
    assert_eq!(checkpoint::model_hash(&model), checkpoint::model_hash(&back));
}

#[test]
fn checkpoint_rejects_tampering() {
    let model = small_model(1, 1);
    let text = checkpoint::to_json(&model, &CheckpointMeta::default());
    let p = std::path::Path::new("x.json");
    assert!(checkpoint::from_json(&text.replace("nps-checkpoint", "other"), p).is_err());
    assert!(checkpoint::from_json(&text.replace("\"w_hh\"", "\"w_xx\""), p).is_err());
    assert!(checkpoint::from_json(&text[..text.len() - 3], p).is_err());
}

#[test]
fn model_hash_tracks_parameters() {
    let a = small_model(2, 1);
    let mut b = a.clone();
    assert_eq!(checkpoint::model_hash(&a), checkpoint::model_hash(&b));
    b.tensors_mut()[4].data_mut()[0] += 1e-12;
    assert_ne!(checkpoint::model_hash(&a), checkpoint::model_hash(&b));
    assert_eq!(checkpoint::hex(&[0x00, 0xab, 0x7f]), "00ab7f");
}

#[test]
fn frame_roundtrip_and_checks() {
    let model = small_model(3, 5);
    let bits: Vec<u8> = (0..300).map(|i| ((i * 7 + i / 3) % 2) as u8).collect();
    let f = frame::encode(&model, &bits, 100).unwrap();
    assert_eq!(f.symbols.len(), 100);
    assert_eq!(f.bits_per_symbol, 4);
    let bytes = f.to_bytes();
    assert_eq!(&bytes[..4], b"NPDM");
    assert_eq!(bytes.len(), 52 + 100);
    let g = Frame::from_bytes(&bytes).unwrap();
    assert_eq!(f, g);
    assert_eq!(frame::decode(&model, &g).unwrap(), bits);

    let other = small_model(3, 6);
    assert!(frame::decode(&other, &g).is_err());
    let mut short = bytes.clone();
    short.pop();
    assert!(Frame::from_bytes(&short).is_err());
    let mut ver = bytes.clone();
    ver[4] = 9;
    assert!(Frame::from_bytes(&ver).is_err());
}

#[test]
fn frame_rejects_overlong_input() {
    let model = small_model(1, 2);
    let f = frame::encode(&model, &[], 10).unwrap();
    let too_many = vec![1u8; f.capacity as usize + 1];
    assert!(frame::encode(&model, &too_many, 10).is_err());
}

#[test]
fn coefficient_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    let cfg = PerturbationConfig {
        truncation: 4,
        ..PerturbationConfig::default()
    };
    let c = compute_coeffs(&FiberParams::default(), &cfg).unwrap();
    records::write_coeffs(&path, &c).unwrap();
    assert_eq!(records::read_coeffs(&path).unwrap(), c);
    fs::write(&path, "truncation 1\ngamma 1.0\n1 1 0 0\n").unwrap();
    assert!(records::read_coeffs(&path).is_err());
}

#[test]
fn waveform_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let wf = Waveform {
        samples: (0..37).map(|k| Complex64::new(k as f64 * 0.1, -1.0 / (k as f64 + 1.0))).collect(),
        sample_rate_hz: 200e9,
        center_hz: 193.4e12,
    };
    records::write_waveform(&path, &wf).unwrap();
    let back = records::read_waveform(&path).unwrap();
    assert_eq!(back.samples, wf.samples);
    assert_eq!(back.sample_rate_hz, wf.sample_rate_hz);
    assert_eq!(back.center_hz, wf.center_hz);
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 1);
    fs::write(&path, bytes).unwrap();
    assert!(records::read_waveform(&path).is_err());
}

#[test]
fn result_tables_have_fixed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let row = ResultRow {
        power_dbm: 9.0,
        length: 16,
        entropy_bits: 5.5,
        bce_bits: 0.7,
        air: 4.8,
        air_stderr: 0.01,
        seed: 3,
    };
    records::write_csv(&path, &[row.clone()]).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), RESULT_COLUMNS.join(","));
    let back: Vec<ResultRow> = records::read_csv(&path, &RESULT_COLUMNS).unwrap();
    assert_eq!(back, vec![row.clone()]);
    assert!(records::read_csv::<ResultRow>(&path, &BASELINE_COLUMNS).is_err());

    let b = BaselineRow::new("mb", &row);
    records::write_csv(&path, &[b.clone()]).unwrap();
    let back: Vec<BaselineRow> = records::read_csv(&path, &BASELINE_COLUMNS).unwrap();
    assert_eq!(back, vec![b]);
}

#[test]
fn config_defaults_roundtrip_through_toml() {
    let cfg = ExperimentConfig::default();
    let text = cfg.to_toml();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    let partial = ExperimentConfig::from_toml("[experiment]\nchannel = \"ssfm\"\npower_dbm = [1.0, 2.0]\n").unwrap();
    assert_eq!(partial.experiment.channel, Backend::Ssfm);
    assert_eq!(partial.train, cfg.train);
}

#[test]
fn config_rejects_bad_input() {
    for bad in [
        "[experiment]\nunknown = 1\n",
        "[nonsense]\n",
        "[experiment]\nlengths = []\n",
        "[train]\norder = 32\n",
        "[grid]\noversampling = 1\n",
        "[experiment]\nchannel = \"optical\"\n",
    ] {
        let e = ExperimentConfig::from_toml(bad).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{bad}");
    }
}
