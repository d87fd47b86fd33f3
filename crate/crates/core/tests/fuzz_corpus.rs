//! Replays the checked-in fuzz corpus through the same checks the fuzz
//! targets make, so the seeds stay valid as the formats evolve. Seeds named
//! `reject_*` are malformed on purpose and must be refused.

use std::fs;
use std::path::PathBuf;

use skipcond::harness::{parse_cifar10, ExperimentConfig, CIFAR_RECORD_LEN};
use skipcond::linalg::io::{decode_matrices, encode_matrices, matrix_from_csv, matrix_to_csv};
use skipcond::vitcore::{decode_checkpoint, encode_checkpoint, ConvMixerParams, ModelParams};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn matrix_stream_seeds() {
    for (name, bytes) in seeds("matrix_stream") {
        if name.starts_with("reject_") {
            assert!(decode_matrices(&bytes).is_err(), "{name}");
            continue;
        }
        let ms = decode_matrices(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(encode_matrices(&ms), bytes, "{name}");
    }
}

#[test]
fn matrix_csv_seeds() {
    for (name, bytes) in seeds("matrix_csv") {
        if name.starts_with("reject_") {
            assert!(matrix_from_csv(std::str::from_utf8(&bytes).unwrap()).is_err(), "{name}");
            continue;
        }
        let m = matrix_from_csv(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(matrix_from_csv(&matrix_to_csv(&m)).unwrap(), m, "{name}");
    }
}

#[test]
fn cifar_seeds() {
    for (name, bytes) in seeds("cifar10_records") {
        let s = parse_cifar10(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(s.len() * CIFAR_RECORD_LEN, bytes.len());
    }
}

#[test]
fn config_seeds() {
    for (name, bytes) in seeds("experiment_config") {
        let cfg = ExperimentConfig::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}

#[test]
fn checkpoint_seeds() {
    let mut loaded = 0;
    for (name, bytes) in seeds("checkpoint") {
        let ck = decode_checkpoint(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(encode_checkpoint(&ck), bytes, "{name}");
        if let Ok(m) = ModelParams::from_checkpoint(&ck) {
            assert_eq!(encode_checkpoint(&m.to_checkpoint()), bytes);
            loaded += 1;
        }
        if let Ok(m) = ConvMixerParams::from_checkpoint(&ck) {
            assert_eq!(encode_checkpoint(&m.to_checkpoint()), bytes);
            loaded += 1;
        }
    }
    assert_eq!(loaded, 2);
}
