use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentConfig, FileSink, HookTracking, MetricSink, Trainer};
use crate::error::{Error, Result};
use crate::metrics::ReferenceModel;
use crate::nn::{ModelConfig, ParamVec, Precision, Real, Transformer};
use crate::optim::RngCursors;
use crate::task::Dataset;

pub const MANIFEST: &str = "manifest.json";
pub const DATASET: &str = "dataset.bin";
pub const METRICS_DIR: &str = "metrics";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const FINAL_MODEL_DIR: &str = "final-model";
const STATE_FILE: &str = "state.json";
const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    /// Reached the target accuracy.
    Stopped,
    /// Ran `max_epochs` without reaching the target.
    Exhausted,
    Failed,
}

/// Everything needed to reproduce a run on the same build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub program: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub dataset_sha256: String,
    pub environment: BTreeMap<String, String>,
    /// Values of the implementation choices the configuration does not name.
    pub decisions: BTreeMap<String, String>,
    pub status: RunStatus,
    pub epochs_completed: u64,
    pub stop_epoch: Option<u64>,
    pub final_test_accuracy: Option<f64>,
    pub error: Option<String>,
}

fn decisions() -> BTreeMap<String, String> {
    [
        ("rng", "ChaCha8 streams keyed by SHA-256(master_seed, label, indices)"),
        (
            "init",
            "embeddings U(-1,1); linear U(+-1/sqrt(fan_in)); LayerNorm gain 1, bias 0",
        ),
        (
            "architecture",
            "pre-LN, ReLU, mean pool over both positions, linear decoder, no final LayerNorm",
        ),
        ("weight_decay_scope", "all parameters"),
        ("lr_schedule", "cosine per epoch, clamped at lr_min after total_epochs"),
        ("partial_batch", "kept"),
        ("dropout_stream", "keyed by global optimizer step"),
        ("epoch_gradient", "mean of train-mode batch gradients, f64 accumulation"),
        ("stop_rule", "test subsample >= target, confirmed on the full test set"),
        (
            "hessian_probe",
            "eval-mode f64 gradients, forward difference, eps = 1e-4/|v|",
        ),
        (
            "counterfactual",
            "K shuffled epochs from the pre-epoch snapshot with real AdamW steps",
        ),
        (
            "hook_cadence",
            "fires after epoch 1 and every epoch divisible by the cadence",
        ),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn environment(precision: Precision) -> BTreeMap<String, String> {
    [
        ("os", std::env::consts::OS),
        ("arch", std::env::consts::ARCH),
        ("family", std::env::consts::FAMILY),
        ("precision", precision.as_str()),
        ("endianness", "little (all binary files)"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        read_json(&run_dir.join(MANIFEST))
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        write_json(&run_dir.join(MANIFEST), self)
    }
}

/// Contents of `checkpoints/<epoch>/state.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointState {
    pub epoch: u64,
    pub cursors: RngCursors,
    pub adam_t: u64,
    pub precision: Precision,
    pub tracking: HookTracking,
    pub has_prev_grad: bool,
    /// Byte length of each metric stream when the checkpoint was taken.
    pub metric_lengths: BTreeMap<String, u64>,
    /// SHA-256 of each binary file in the checkpoint directory.
    pub files: BTreeMap<String, String>,
}

fn checkpoint_dir(run_dir: &Path, epoch: u64) -> PathBuf {
    run_dir.join(CHECKPOINTS_DIR).join(epoch.to_string())
}

fn write_checkpoint<T: Real>(run_dir: &Path, trainer: &Trainer<T>, sink: &mut FileSink) -> Result<()> {
    let epoch = trainer.epochs_completed();
    let dir = checkpoint_dir(run_dir, epoch);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut blobs: Vec<(&str, Vec<u8>)> = vec![
        ("params.bin", trainer.state.params.to_le_bytes()),
        ("adam_m.bin", trainer.state.adam.m.to_le_bytes()),
        ("adam_v.bin", trainer.state.adam.v.to_le_bytes()),
    ];
    if let Some(g) = &trainer.prev_grad {
        blobs.push(("prev_grad.bin", g.to_le_bytes()));
    }
    let mut files = BTreeMap::new();
    for (name, bytes) in &blobs {
        write_file(&dir.join(name), bytes)?;
        files.insert(name.to_string(), sha256_hex(bytes));
    }
    let state = CheckpointState {
        epoch,
        cursors: trainer.state.cursors,
        adam_t: trainer.state.adam.t,
        precision: T::PRECISION,
        tracking: trainer.tracking.clone(),
        has_prev_grad: trainer.prev_grad.is_some(),
        metric_lengths: sink.lengths()?,
        files,
    };
    write_json(&dir.join(STATE_FILE), &state)
}

/// Reads and checksum-verifies a checkpoint's state file.
pub fn read_checkpoint_state(run_dir: &Path, epoch: u64) -> Result<CheckpointState> {
    let dir = checkpoint_dir(run_dir, epoch);
    let state: CheckpointState = read_json(&dir.join(STATE_FILE))?;
    if state.epoch != epoch {
        return Err(Error::format(
            dir.join(STATE_FILE),
            format!("records epoch {}, expected {epoch}", state.epoch),
        ));
    }
    for (name, want) in &state.files {
        let path = dir.join(name);
        let got = sha256_hex(&read_file(&path)?);
        if &got != want {
            return Err(Error::format(
                path,
                format!("checksum mismatch: expected {want}, found {got}"),
            ));
        }
    }
    Ok(state)
}

fn verified_blob(run_dir: &Path, epoch: u64, state: &CheckpointState, name: &str) -> Result<Vec<u8>> {
    let path = checkpoint_dir(run_dir, epoch).join(name);
    if !state.files.contains_key(name) {
        return Err(Error::format(&path, "not listed in the checkpoint state"));
    }
    read_file(&path)
}

fn restore<T: Real>(run_dir: &Path, epoch: u64, trainer: &mut Trainer<T>) -> Result<CheckpointState> {
    let state = read_checkpoint_state(run_dir, epoch)?;
    if state.precision != T::PRECISION {
        return Err(Error::Input(
            "checkpoint precision differs from the configuration".into(),
        ));
    }
    let layout = Arc::clone(trainer.model.layout());
    let load = |name: &str| -> Result<ParamVec<T>> {
        let bytes = verified_blob(run_dir, epoch, &state, name)?;
        ParamVec::from_le_bytes(Arc::clone(&layout), &bytes)
    };
    trainer.state.params = load("params.bin")?;
    trainer.state.adam.m = load("adam_m.bin")?;
    trainer.state.adam.v = load("adam_v.bin")?;
    trainer.state.adam.t = state.adam_t;
    trainer.state.cursors = state.cursors;
    trainer.tracking = state.tracking.clone();
    trainer.prev_grad = if state.has_prev_grad {
        let bytes = verified_blob(run_dir, epoch, &state, "prev_grad.bin")?;
        Some(ParamVec::<f64>::from_le_bytes(Arc::clone(&layout), &bytes)?)
    } else {
        None
    };
    Ok(state)
}

/// Model description stored next to final parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FinalModel {
    model: ModelConfig,
    epoch: u64,
    params_sha256: String,
}

fn write_final_model<T: Real>(run_dir: &Path, trainer: &Trainer<T>) -> Result<()> {
    let dir = run_dir.join(FINAL_MODEL_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let bytes = trainer.state.params.to_le_bytes();
    write_file(&dir.join("params.bin"), &bytes)?;
    write_json(
        &dir.join(MODEL_FILE),
        &FinalModel {
            model: trainer.cfg.model.clone(),
            epoch: trainer.epochs_completed(),
            params_sha256: sha256_hex(&bytes),
        },
    )
}

/// Loads final parameters from a run directory or its `final-model`
/// directory as an f64 reference.
pub fn load_reference(path: &Path) -> Result<ReferenceModel> {
    let dir = if path.join(FINAL_MODEL_DIR).is_dir() {
        path.join(FINAL_MODEL_DIR)
    } else {
        path.to_path_buf()
    };
    let info: FinalModel = read_json(&dir.join(MODEL_FILE))?;
    let bytes = read_file(&dir.join("params.bin"))?;
    if sha256_hex(&bytes) != info.params_sha256 {
        return Err(Error::format(dir.join("params.bin"), "checksum mismatch"));
    }
    let layout = Arc::clone(Transformer::new(info.model.clone())?.layout());
    let params = match info.model.precision {
        Precision::F32 => ParamVec::<f32>::from_le_bytes(layout, &bytes)?.to_f64(),
        Precision::F64 => ParamVec::<f64>::from_le_bytes(layout, &bytes)?,
    };
    Ok(ReferenceModel {
        params,
        config: info.model,
        source: dir.display().to_string(),
    })
}

/// Summary returned by [`run_experiment`] and [`resume`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub status: RunStatus,
    pub epochs_completed: u64,
    pub stop_epoch: Option<u64>,
    pub final_test_accuracy: f64,
}

fn drive<T: Real>(
    run_dir: &Path,
    mut trainer: Trainer<T>,
    mut sink: FileSink,
    mut manifest: RunManifest,
) -> Result<RunOutcome> {
    let every = trainer.cfg.checkpoint_every;
    if every > 0 && trainer.epochs_completed() == 0 {
        write_checkpoint(run_dir, &trainer, &mut sink)?;
    }
    let mut stop_epoch = None;
    let result = (|| -> Result<()> {
        while trainer.epochs_completed() < trainer.cfg.max_epochs {
            let report = trainer.run_epoch(&mut sink)?;
            if every > 0 && report.epoch % every == 0 {
                write_checkpoint(run_dir, &trainer, &mut sink)?;
            }
            if report.reached_target {
                stop_epoch = Some(report.epoch);
                break;
            }
        }
        Ok(())
    })();
    sink.flush()?;
    manifest.epochs_completed = trainer.epochs_completed();
    if let Err(err) = result {
        manifest.status = RunStatus::Failed;
        manifest.error = Some(err.to_string());
        manifest.save(run_dir)?;
        return Err(err);
    }
    let final_acc = trainer.full_test_accuracy()?;
    write_final_model(run_dir, &trainer)?;
    manifest.status = if stop_epoch.is_some() {
        RunStatus::Stopped
    } else {
        RunStatus::Exhausted
    };
    manifest.stop_epoch = stop_epoch;
    manifest.final_test_accuracy = Some(final_acc);
    manifest.save(run_dir)?;
    Ok(RunOutcome {
        run_dir: run_dir.to_path_buf(),
        status: manifest.status,
        epochs_completed: trainer.epochs_completed(),
        stop_epoch,
        final_test_accuracy: final_acc,
    })
}

fn reference_for(cfg: &ExperimentConfig) -> Result<Option<ReferenceModel>> {
    cfg.reference.as_deref().map(load_reference).transpose()
}

/// Creates `cfg.output_dir` and trains to completion. Refuses to write
/// into a directory that already holds a run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let run_dir = cfg.output_dir.clone();
    if run_dir.join(MANIFEST).exists() {
        return Err(Error::Input(format!(
            "{} already contains a run (use resume, or choose another output directory)",
            run_dir.display()
        )));
    }
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let data = Arc::new(crate::task::generate_dataset(&cfg.task)?);
    data.save(&run_dir.join(DATASET))?;
    let reference = reference_for(cfg)?;
    let manifest = RunManifest {
        program: "ordlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        dataset_sha256: sha256_hex(&data.to_bytes()),
        environment: environment(cfg.model.precision),
        decisions: decisions(),
        status: RunStatus::Running,
        epochs_completed: 0,
        stop_epoch: None,
        final_test_accuracy: None,
        error: None,
    };
    manifest.save(&run_dir)?;
    let sink = FileSink::create(&run_dir.join(METRICS_DIR))?;
    match cfg.model.precision {
        Precision::F32 => drive(
            &run_dir,
            Trainer::<f32>::with_dataset(cfg.clone(), data, reference)?,
            sink,
            manifest,
        ),
        Precision::F64 => drive(
            &run_dir,
            Trainer::<f64>::with_dataset(cfg.clone(), data, reference)?,
            sink,
            manifest,
        ),
    }
}

/// Epochs of every checkpoint in a run, ascending.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<u64>> {
    let dir = run_dir.join(CHECKPOINTS_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<u64> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok())
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Continues a run from checkpoint `epoch` (the latest when `None`).
/// `config` may override instrumentation-free settings such as
/// `max_epochs`; any change to the trajectory is rejected as drift.
pub fn resume(run_dir: &Path, epoch: Option<u64>, config: Option<ExperimentConfig>) -> Result<RunOutcome> {
    let mut manifest = RunManifest::load(run_dir)?;
    let cfg = match config {
        Some(c) => {
            let drift = c.drift_from(&manifest.config);
            if !drift.is_empty() {
                return Err(Error::Config(drift));
            }
            c
        }
        None => manifest.config.clone(),
    };
    cfg.validate()?;
    let epoch = match epoch {
        Some(e) => e,
        None => *list_checkpoints(run_dir)?
            .last()
            .ok_or_else(|| Error::Input(format!("{} has no checkpoints", run_dir.display())))?,
    };
    let data_path = run_dir.join(DATASET);
    let data = Dataset::load(&data_path)?;
    if sha256_hex(&data.to_bytes()) != manifest.dataset_sha256 {
        return Err(Error::format(data_path, "dataset checksum differs from the manifest"));
    }
    let data = Arc::new(data);
    let reference = reference_for(&cfg)?;
    let sink = FileSink::create(&run_dir.join(METRICS_DIR))?;

    manifest.config = cfg.clone();
    manifest.status = RunStatus::Running;
    manifest.stop_epoch = None;
    manifest.final_test_accuracy = None;
    manifest.error = None;

    fn go<T: Real>(
        run_dir: &Path,
        epoch: u64,
        mut trainer: Trainer<T>,
        mut sink: FileSink,
        manifest: RunManifest,
    ) -> Result<RunOutcome> {
        let state = restore(run_dir, epoch, &mut trainer)?;
        sink.truncate_to(&state.metric_lengths)?;
        // later checkpoints belong to the abandoned continuation
        for later in list_checkpoints(run_dir)?.into_iter().filter(|&e| e > epoch) {
            let dir = checkpoint_dir(run_dir, later);
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let final_dir = run_dir.join(FINAL_MODEL_DIR);
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
        }
        manifest.save(run_dir)?;
        drive(run_dir, trainer, sink, manifest)
    }

    match cfg.model.precision {
        Precision::F32 => go(
            run_dir,
            epoch,
            Trainer::<f32>::with_dataset(cfg, data, reference)?,
            sink,
            manifest,
        ),
        Precision::F64 => go(
            run_dir,
            epoch,
            Trainer::<f64>::with_dataset(cfg, data, reference)?,
            sink,
            manifest,
        ),
    }
}
