mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sain::checkpoint::{Checkpoint, CheckpointError};
use sain::cli::{self, CliError, Overrides, SplitSelector, CHECKPOINT_FILE, LOG_FILE, MANIFEST_FILE, TIMING_FILE};
use sain::manifest::RunManifest;

fn sain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sain")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Train once and return (tempdir, manifest path, checkpoint path).
fn trained(model: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_synthetic(dir.path(), model, 40, 30, 12, 21);
    let s = cli::cmd_train(&manifest, &Overrides::default()).unwrap();
    (dir, manifest, s.checkpoint)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_synthetic(dir.path(), "sain", 40, 30, 12, 20);
    let o = sain(&["train", s(&manifest)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("checkpoint="));
    let out = dir.path().join("out_sain");
    for f in [CHECKPOINT_FILE, LOG_FILE, MANIFEST_FILE, TIMING_FILE] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(out.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(!log.contains("seconds"));

    let resolved = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    let text = std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap();
    assert!(text.contains("batch_norm_momentum") && text.contains("decay_embeddings"));
    assert_eq!(resolved.model_config.dim, 8);
    assert_eq!(resolved.train.max_epochs, 3);
    assert!(resolved.dataset.is_absolute());
}

#[test]
fn flags_override_manifest_values() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_synthetic(dir.path(), "sain", 40, 30, 12, 22);
    let out = dir.path().join("elsewhere");
    let o = sain(&[
        "train",
        s(&manifest),
        "--max-epochs",
        "1",
        "--model",
        "biasedmf",
        "--output-dir",
        s(&out),
        "--top-k",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(out.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
    let resolved = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(resolved.train.max_epochs, 1);
    assert_eq!(resolved.model_config.top_k, 2);
    assert_eq!(resolved.model, sain::train::ModelKind::Biasedmf);
}

#[test]
fn missing_ratings_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_synthetic(dir.path(), "sain", 40, 30, 12, 23);
    std::fs::remove_file(dir.path().join("ratings.tsv")).unwrap();
    let o = sain(&["train", s(&manifest)]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error category=io message="), "{err}");
}

#[test]
fn malformed_manifest_is_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("run.toml");
    std::fs::write(&manifest, "dataset = \"d.toml\"\nmodel = \"sain\"\noutput_dir = \"o\"\nbogus = 1\n").unwrap();
    let o = sain(&["train", s(&manifest)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("error category=parse"));
}

#[test]
fn invalid_config_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_synthetic(dir.path(), "sain", 40, 30, 12, 24);
    let o = sain(&["train", s(&manifest), "--patience", "0"]);
    assert_eq!(o.status.code(), Some(10));
    assert!(stderr(&o).starts_with("error category=config"));
}

#[test]
fn evaluate_prints_metrics_and_writes_report() {
    let (_dir, _manifest, ckpt) = trained("sain");
    let o = sain(&["evaluate", s(&ckpt), "--split", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let fields: Vec<&str> = line.trim().split(' ').collect();
    assert_eq!(fields.len(), 3);
    assert!(fields[0].starts_with("RMSE=") && fields[1].starts_with("MAE=") && fields[2].starts_with("N="));
    let report = std::fs::read_to_string(ckpt.parent().unwrap().join("eval_test.json")).unwrap();
    assert!(report.contains("\"content_rmse\"") && report.contains("\"split\": \"test\""));
    let again = sain(&["evaluate", s(&ckpt), "--split", "test"]);
    assert_eq!(stdout(&again), line);
}

#[test]
fn validation_and_test_are_disjoint_tenths() {
    let (_dir, _manifest, ckpt) = trained("biasedmf");
    let c = Checkpoint::load(&ckpt).unwrap();
    let split = cli::checkpoint_split(&c).unwrap();
    let n = split.train.len() + split.validation.len() + split.test.len();
    assert_eq!(split.validation.len(), (n as f64 * 0.1).round() as usize);
    let val = cli::cmd_evaluate(&ckpt, SplitSelector::Validation, None).unwrap();
    let test = cli::cmd_evaluate(&ckpt, SplitSelector::Test, None).unwrap();
    assert_eq!(val.n, split.validation.len());
    assert_eq!(test.n, split.test.len());
    let key = |i: &sain::data::Interaction| (i.user, i.item, i.timestamp);
    let val_keys: std::collections::HashSet<_> = split.validation.iter().map(key).collect();
    assert!(split.test.iter().all(|i| !val_keys.contains(&key(i))));
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let (_dir, _manifest, ckpt) = trained("sain");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&ckpt, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&ckpt), Err(CheckpointError::Checksum)));
    let o = sain(&["evaluate", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(9));
    assert!(stderr(&o).starts_with("error category=checkpoint"));

    std::fs::write(&ckpt, b"not a checkpoint at all, clearly").unwrap();
    assert!(matches!(Checkpoint::load(&ckpt), Err(CheckpointError::BadMagic)));
}

#[test]
fn changed_data_is_manifest_drift() {
    let (dir, _manifest, ckpt) = trained("sain");
    let ratings = dir.path().join("ratings.tsv");
    let text = std::fs::read_to_string(&ratings).unwrap();
    let first = text.lines().next().unwrap();
    let mut cols: Vec<&str> = first.split('\t').collect();
    let new_rating = if cols[2] == "5" { "4" } else { "5" };
    cols[2] = new_rating;
    let edited = text.replacen(first, &cols.join("\t"), 1);
    std::fs::write(&ratings, edited).unwrap();
    match cli::cmd_evaluate(&ckpt, SplitSelector::Test, None) {
        Err(e @ CliError::ManifestDrift(_)) => {
            assert_eq!(e.category(), "manifest-drift");
            assert!(e.to_string().starts_with("manifest drift"));
        }
        other => panic!("expected drift, got {other:?}"),
    }
    let o = sain(&["evaluate", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(7));
}

#[test]
fn predict_prints_clipped_score_and_gates() {
    let (_dir, _manifest, ckpt) = trained("sain");
    let o = sain(&["predict", s(&ckpt), "u3", "i4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|kv| kv.split_once('=').unwrap().1.parse().unwrap())
        .collect();
    assert_eq!(vals.len(), 3);
    assert!((1.0..=5.0).contains(&vals[0]));
    assert!(vals[1] > 0.0 && vals[1] < 1.0 && vals[2] > 0.0 && vals[2] < 1.0);
    assert_eq!(stdout(&sain(&["predict", s(&ckpt), "u3", "i4"])), line);
}

#[test]
fn predict_names_unknown_sides() {
    let (_dir, _manifest, ckpt) = trained("biasedmf");
    let o = sain(&["predict", s(&ckpt), "ghost", "i4"]);
    assert_eq!(o.status.code(), Some(8));
    let err = stderr(&o);
    assert!(err.contains("user \"ghost\"") && !err.contains("item"));
    let both = stderr(&sain(&["predict", s(&ckpt), "ghost", "phantom"]));
    assert!(both.contains("user \"ghost\"") && both.contains("item \"phantom\""));
    let ok = sain(&["predict", s(&ckpt), "u1", "i7"]);
    assert!(ok.status.success());
    let score: f64 = stdout(&ok).trim().strip_prefix("score=").unwrap().parse().unwrap();
    assert!((1.0..=5.0).contains(&score));
}

#[test]
fn attention_writes_one_square_csv_per_head() {
    let (dir, _manifest, ckpt) = trained("sain");
    let out = dir.path().join("attn");
    let o = sain(&["attention", s(&ckpt), "u0", "i1", "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let listing = stdout(&o);
    let files: Vec<&str> = listing.lines().collect();
    assert_eq!(files.len(), 2);
    for f in files {
        let text = std::fs::read_to_string(f).unwrap();
        let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
        assert_eq!(rows[0][1..], ["gender", "occupation", "genre", "tags"]);
        assert_eq!(rows.len(), 5);
        for r in &rows[1..] {
            assert_eq!(r.len(), 5);
            let sum: f64 = r[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn sweep_writes_csv_and_caption() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_synthetic(dir.path(), "sain", 40, 30, 12, 25);
    let o = sain(&["sweep-k", s(&manifest), "--k", "1,4", "--max-epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out_sain");
    let csv = std::fs::read_to_string(out.join(cli::SWEEP_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("k,test_rmse,test_mae\n1,"));
    let md = std::fs::read_to_string(out.join("sweep_k.md")).unwrap();
    assert!(md.contains("Changes in performance while varying K"));
}

#[test]
fn gradcheck_command_reports_max_error() {
    let o = sain(&["gradcheck", "--seeds", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.contains("failed=0") && line.contains("max_rel_error="));
}
