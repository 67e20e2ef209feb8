//! Commands behind the `sain` binary. Each returns data; printing and exit
//! codes are left to `main`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{split_by_time, split_dataset, DataError, Dataset, DatasetSplit};
use crate::gradcheck::{self, GradCheckError, GradCheckReport};
use crate::manifest::{ManifestError, RunManifest};
use crate::model::{ModelError, ModelShape};
use crate::train::{
    self, attention_csv, evaluate, export_attention, log_csv, sub_seed, sweep_csv, EvalReport, ModelKind,
    SweepRow, TrainError,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TIMING_FILE: &str = "timing.json";
pub const SWEEP_FILE: &str = "sweep_k.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error("manifest drift: {0}")]
    ManifestDrift(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl CliError {
    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Manifest(ManifestError::Io { .. }) => "io",
            CliError::Manifest(ManifestError::Parse { .. }) => "parse",
            CliError::Data(e) => match e {
                DataError::Io { .. } => "io",
                DataError::TooSmall => "shape",
                _ => "parse",
            },
            CliError::Model(e) | CliError::Train(TrainError::Model(e)) => model_category(e),
            CliError::Train(TrainError::Divergence { .. }) => "divergence",
            CliError::Train(TrainError::Config(_)) | CliError::Config(_) => "config",
            CliError::Train(TrainError::EmptySet) => "shape",
            CliError::Checkpoint(CheckpointError::Io { .. }) => "io",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::GradCheck(_) => "gradient",
            CliError::ManifestDrift(_) => "manifest-drift",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "io" => 3,
            "parse" => 4,
            "shape" => 5,
            "divergence" => 6,
            "manifest-drift" => 7,
            "entity" => 8,
            "checkpoint" => 9,
            "config" => 10,
            "gradient" => 11,
            _ => 1,
        }
    }

    /// `error category=<c> message=<one line>`
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error category={} message={msg}", self.category())
    }
}

fn model_category(e: &ModelError) -> &'static str {
    match e {
        ModelError::UnknownEntity(_) => "entity",
        ModelError::Config(_) => "config",
        ModelError::NonFinite(_) => "divergence",
        _ => "shape",
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Command-line values that replace manifest values when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<ModelKind>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub dim: Option<usize>,
    pub top_k: Option<usize>,
    pub dropout: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, m: &mut RunManifest) {
        fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *dst = v.clone();
            }
        }
        set(&mut m.model, &self.model);
        if let Some(dir) = &self.output_dir {
            m.output_dir = std::path::absolute(dir).unwrap_or_else(|_| dir.clone());
        }
        set(&mut m.train.seed, &self.seed);
        set(&mut m.train.max_epochs, &self.max_epochs);
        set(&mut m.train.batch_size, &self.batch_size);
        set(&mut m.train.patience, &self.patience);
        set(&mut m.train.lr, &self.lr);
        set(&mut m.train.weight_decay, &self.weight_decay);
        set(&mut m.model_config.dim, &self.dim);
        set(&mut m.model_config.top_k, &self.top_k);
        set(&mut m.model_config.dropout, &self.dropout);
    }
}

/// Load the run manifest, apply overrides and validate.
pub fn load_manifest(path: &Path, overrides: &Overrides) -> Result<RunManifest, CliError> {
    let mut m = RunManifest::load(path)?;
    overrides.apply(&mut m);
    m.validate().map_err(CliError::Config)?;
    Ok(m)
}

/// Dataset and the split derived from the manifest seed.
pub fn prepare(manifest: &RunManifest) -> Result<(Dataset, DatasetSplit), CliError> {
    let data = Dataset::load(&manifest.dataset)?;
    let seed = sub_seed(manifest.train.seed, "split");
    let split = if manifest.split_by_time {
        split_by_time(&data.ratings.interactions, seed)?
    } else {
        split_dataset(&data.ratings.interactions, seed)?
    };
    Ok((data, split))
}

#[derive(Debug, Clone, Serialize)]
struct Timing {
    command: &'static str,
    seconds: f64,
}

fn write_timing(dir: &Path, command: &'static str, start: Instant) -> Result<(), CliError> {
    let t = Timing {
        command,
        seconds: start.elapsed().as_secs_f64(),
    };
    write(&dir.join(TIMING_FILE), serde_json::to_string_pretty(&t).expect("timing serializes"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_rmse: f64,
}

/// Train per manifest; writes checkpoint, log, resolved manifest and timing.
pub fn cmd_train(manifest_path: &Path, overrides: &Overrides) -> Result<TrainSummary, CliError> {
    let start = Instant::now();
    let manifest = load_manifest(manifest_path, overrides)?;
    let (data, split) = prepare(&manifest)?;
    let shape = ModelShape::from_dataset(&data);
    let out = train::train(
        manifest.model,
        &shape,
        &data.features,
        &split,
        &manifest.model_config,
        &manifest.train,
    )?;

    let dir = manifest.output_dir.clone();
    create_dir(&dir)?;
    let ckpt = Checkpoint {
        manifest: manifest.clone(),
        fingerprint: data.fingerprint(),
        best_epoch: out.best_epoch,
        users: data.ratings.users.clone(),
        items: data.ratings.items.clone(),
        vocab: data.vocab.clone(),
        features: data.features.clone(),
        model: out.model,
        adam: out.optimizer.states,
    };
    let checkpoint = dir.join(CHECKPOINT_FILE);
    ckpt.save(&checkpoint)?;
    write(&dir.join(LOG_FILE), log_csv(&out.log))?;
    write(&dir.join(MANIFEST_FILE), manifest.to_toml())?;
    write_timing(&dir, "train", start)?;
    Ok(TrainSummary {
        output_dir: dir,
        checkpoint,
        best_epoch: out.best_epoch,
        epochs_run: out.log.len(),
        best_val_rmse: out.log[out.best_epoch - 1].val_rmse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSelector {
    Train,
    Validation,
    Test,
}

impl SplitSelector {
    pub fn name(self) -> &'static str {
        match self {
            SplitSelector::Train => "train",
            SplitSelector::Validation => "validation",
            SplitSelector::Test => "test",
        }
    }

    pub fn select(self, split: &DatasetSplit) -> &[crate::data::Interaction] {
        match self {
            SplitSelector::Train => &split.train,
            SplitSelector::Validation => &split.validation,
            SplitSelector::Test => &split.test,
        }
    }
}

impl std::str::FromStr for SplitSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitSelector::Train),
            "validation" | "val" => Ok(SplitSelector::Validation),
            "test" => Ok(SplitSelector::Test),
            other => Err(format!("unknown split {other:?} (expected train, validation or test)")),
        }
    }
}

/// Rebuild the checkpoint's split from its stored manifest, refusing data
/// that no longer matches the training fingerprint.
pub fn checkpoint_split(ckpt: &Checkpoint) -> Result<DatasetSplit, CliError> {
    let (data, split) = prepare(&ckpt.manifest)?;
    let found = data.fingerprint();
    if found != ckpt.fingerprint {
        return Err(CliError::ManifestDrift(format!(
            "dataset {} has fingerprint {found}, checkpoint expects {}",
            ckpt.manifest.dataset.display(),
            ckpt.fingerprint
        )));
    }
    Ok(split)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationFile {
    pub checkpoint: PathBuf,
    pub split: &'static str,
    pub model: ModelKind,
    pub best_epoch: usize,
    pub report: EvalReport,
}

/// Evaluate a checkpoint on one split; the full report goes to `out`, or
/// next to the checkpoint as `eval_<split>.json`.
pub fn cmd_evaluate(checkpoint: &Path, selector: SplitSelector, out: Option<&Path>) -> Result<EvalReport, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let split = checkpoint_split(&ckpt)?;
    let report = evaluate(&ckpt.model, &ckpt.features, selector.select(&split))?;
    let file = EvaluationFile {
        checkpoint: checkpoint.to_path_buf(),
        split: selector.name(),
        model: ckpt.model.kind(),
        best_epoch: ckpt.best_epoch,
        report,
    };
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}.json", selector.name())),
    };
    write(&path, serde_json::to_string_pretty(&file).expect("report serializes") + "\n")?;
    Ok(report)
}

/// Map raw user/item ids to checkpoint indices, naming every unknown side.
pub fn resolve_pair(ckpt: &Checkpoint, user: &str, item: &str) -> Result<(usize, usize), CliError> {
    let u = ckpt.users.get(user);
    let i = ckpt.items.get(item);
    match (u, i) {
        (Some(u), Some(i)) => Ok((u, i)),
        _ => {
            let mut missing = Vec::new();
            if u.is_none() {
                missing.push(format!("user {user:?}"));
            }
            if i.is_none() {
                missing.push(format!("item {item:?}"));
            }
            Err(ModelError::UnknownEntity(format!("{} not in checkpoint vocabulary", missing.join(" and "))).into())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Clipped combined score.
    pub score: f64,
    /// User and item CF gate values; SAIN only.
    pub gates: Option<(f64, f64)>,
}

pub fn cmd_predict(checkpoint: &Path, user: &str, item: &str) -> Result<Prediction, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (u, i) = resolve_pair(&ckpt, user, item)?;
    let (score, gates) = ckpt.model.predict(&ckpt.features, u, i)?;
    Ok(Prediction { score, gates })
}

/// Write `attention_head<h>.csv` per head into `out_dir`.
pub fn cmd_attention(checkpoint: &Path, user: &str, item: &str, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (u, i) = resolve_pair(&ckpt, user, item)?;
    let maps = export_attention(&ckpt.model, &ckpt.features, u, i)?;
    create_dir(out_dir)?;
    maps.heads
        .iter()
        .enumerate()
        .map(|(h, w)| {
            let path = out_dir.join(format!("attention_head{h}.csv"));
            write(&path, attention_csv(&maps.labels, w))?;
            Ok(path)
        })
        .collect()
}

/// Train one SAIN model per K on the manifest's split. Writes
/// `sweep_k.csv` and a captioned markdown table to the output directory.
/// An empty `ks` means `[2, 4, 8, m + n]`.
pub fn cmd_sweep(
    manifest_path: &Path,
    overrides: &Overrides,
    ks: &[usize],
    repeats: usize,
) -> Result<(PathBuf, Vec<SweepRow>), CliError> {
    let start = Instant::now();
    let mut manifest = load_manifest(manifest_path, overrides)?;
    manifest.model = ModelKind::Sain;
    let (data, split) = prepare(&manifest)?;
    let shape = ModelShape::from_dataset(&data);
    let ks = if ks.is_empty() {
        let mut v = vec![2, 4, 8, shape.seq_len()];
        v.sort_unstable();
        v.dedup();
        v
    } else {
        ks.to_vec()
    };
    let rows = train::sweep_top_k(
        &shape,
        &data.features,
        &split,
        &manifest.model_config,
        &manifest.train,
        &ks,
        repeats,
    )?;
    let dir = manifest.output_dir.clone();
    create_dir(&dir)?;
    let csv = dir.join(SWEEP_FILE);
    write(&csv, sweep_csv(&rows))?;
    write(&dir.join("sweep_k.md"), sweep_markdown(&rows))?;
    write(&dir.join(MANIFEST_FILE), manifest.to_toml())?;
    write_timing(&dir, "sweep-k", start)?;
    Ok((csv, rows))
}

fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut out = String::from("| K | test RMSE | test MAE |\n|---|---|---|\n");
    for r in rows {
        out.push_str(&format!("| {} | {:.4} | {:.4} |\n", r.k, r.test_rmse, r.test_mae));
    }
    if let Some(best) = rows.iter().min_by(|a, b| a.test_rmse.total_cmp(&b.test_rmse)) {
        out.push_str(&format!(
            "\nChanges in performance while varying K. Lowest test RMSE in this run: K = {} \
             (the reference setup reports K = 8 as best).\n",
            best.k
        ));
    }
    out
}

/// Run the finite-difference certification over `seeds` seeds.
pub fn cmd_gradcheck(seeds: usize) -> Result<Vec<GradCheckReport>, CliError> {
    Ok(gradcheck::certify(seeds)?)
}
