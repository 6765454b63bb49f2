//! Executes a configured run: backbone pretraining (cached), continual
//! training with a checkpoint after every task or every few batches, and
//! the final metrics and record documents.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use l2p_core::harness::{self, ContinualLearner};
use l2p_core::{
    average_accuracy, forgetting, weights, AccuracyMatrix, Backbone, FrozenProbe, GaussianStream, Generator, Learner,
    PretrainReport, ProbeConfig, RehearsalBuffer, Sample, TaskStream,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method, SettingConfig};
use crate::error::{Error, Result};
use crate::record::{versions, Histogram, Metrics, RunRecord, TaskSummary};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Present in a run directory until the run finishes.
pub const PARTIAL_MARKER: &str = "PARTIAL";
pub const METRICS_FILE: &str = "metrics.json";
pub const RECORD_FILE: &str = "record.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    L2p(Learner),
    FtseqFrozen(FrozenProbe),
}

impl Model {
    fn learner(&self) -> &dyn ContinualLearner {
        match self {
            Model::L2p(l) => l,
            Model::FtseqFrozen(p) => p,
        }
    }

    fn pool_size(&self) -> usize {
        match self {
            Model::L2p(l) => l.pool().config().size,
            Model::FtseqFrozen(_) => 0,
        }
    }

    fn top_n(&self) -> usize {
        match self {
            Model::L2p(l) => l.pool().config().top_n,
            Model::FtseqFrozen(_) => 0,
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config_digest: String,
    pub config: ExperimentConfig,
    /// Tasks finished, or batches consumed on a boundary-free stream.
    pub cursor: usize,
    pub model: Model,
    pub buffer: Option<RehearsalBuffer>,
    pub matrix: AccuracyMatrix,
    pub tasks: Vec<TaskSummary>,
    pub histogram: Vec<Vec<u64>>,
    /// Per-segment loss totals on boundary-free streams.
    pub loss_sums: Vec<f64>,
    pub pretrain: PretrainReport,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop once the cursor reaches this value, leaving the run partial.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Finished(Box<RunRecord>),
    Stopped { checkpoint: PathBuf },
}

impl Outcome {
    pub fn record(&self) -> Option<&RunRecord> {
        match self {
            Outcome::Finished(r) => Some(r),
            Outcome::Stopped { .. } => None,
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// Loads the pretrained backbone for `config` from the output root's cache,
/// pretraining and caching it first if needed.
pub fn pretrained_backbone(config: &ExperimentConfig) -> Result<(Backbone, PretrainReport)> {
    let dir = config.out_dir.join("cache");
    let key = &config.backbone_digest()[..16];
    let wpath = dir.join(format!("backbone-{key}.l2pw"));
    let rpath = dir.join(format!("backbone-{key}.json"));
    let expected = config.effective_backbone();
    if wpath.exists() && rpath.exists() {
        let mut bb = weights::load_weights(&wpath, Some(&expected))?;
        bb.set_frozen(true);
        return Ok((bb, read_json(&rpath)?));
    }
    let gen = Generator::new(config.effective_generator())?;
    let data = gen.pretrain_set(config.pretrain_samples_per_class)?;
    let forbidden: BTreeSet<usize> = gen.config().stream_classes().into_iter().collect();
    let mut bb = Backbone::new(expected, config.seed)?;
    let report = bb.pretrain(&data, &config.effective_pretrain(), Some(&forbidden))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    weights::save_weights(&bb, &wpath)?;
    write_json(&rpath, &report)?;
    Ok((bb, report))
}

fn method_label(config: &ExperimentConfig) -> String {
    let name = config.run_name();
    let start = config.name.len() + 1;
    let end = name.rfind("-s").unwrap_or(name.len());
    name[start..end].to_string()
}

enum Stream {
    Tasks(TaskStream),
    Gaussian { stream: GaussianStream, test: Vec<Sample> },
}

fn build_stream(config: &ExperimentConfig) -> Result<Stream> {
    let gen = Generator::new(config.effective_generator())?;
    Ok(match config.effective_setting() {
        SettingConfig::ClassIncremental(c) => Stream::Tasks(TaskStream::class_incremental(&gen, &c)?),
        SettingConfig::DomainIncremental(c) => Stream::Tasks(TaskStream::domain_incremental(&gen, &c)?),
        SettingConfig::TaskAgnostic(c) => {
            let stream = GaussianStream::new(&gen, &c)?;
            let test = stream.test_set()?;
            Stream::Gaussian { stream, test }
        }
    })
}

fn num_classes(stream: &Stream) -> usize {
    match stream {
        Stream::Tasks(s) => s.num_classes(),
        Stream::Gaussian { stream, .. } => stream.num_classes(),
    }
}

fn fresh_checkpoint(config: &ExperimentConfig, stream: &Stream) -> Result<Checkpoint> {
    let (backbone, pretrain) = pretrained_backbone(config)?;
    let classes = num_classes(stream);
    let lc = config.effective_learner();
    let model = match config.method {
        Method::L2p => Model::L2p(Learner::new(lc.clone(), backbone, classes)?),
        Method::FtseqFrozen => {
            let pc = ProbeConfig {
                lr: lc.lr,
                batch_size: lc.batch_size,
                epochs: lc.epochs,
                train_mask: lc.train_mask,
                seed: lc.seed,
            };
            Model::FtseqFrozen(FrozenProbe::new(pc, backbone, classes)?)
        }
    };
    let buffer = (config.method == Method::L2p && lc.rehearsal_per_class > 0)
        .then(|| RehearsalBuffer::new(lc.rehearsal_per_class));
    let (tasks, histogram, loss_sums) = match stream {
        Stream::Tasks(_) => (Vec::new(), Vec::new(), Vec::new()),
        Stream::Gaussian { .. } => {
            let s = config.histogram_segments;
            (
                vec![TaskSummary { steps: 0, epoch_losses: Vec::new() }; s],
                vec![vec![0; model.pool_size()]; s],
                vec![0.0; s],
            )
        }
    };
    Ok(Checkpoint {
        format: CHECKPOINT_FORMAT,
        config_digest: config.digest(),
        config: config.clone(),
        cursor: 0,
        model,
        buffer,
        matrix: AccuracyMatrix::new(),
        tasks,
        histogram,
        loss_sums,
        pretrain,
        elapsed_secs: 0.0,
    })
}

/// Starts `config` from scratch in `config.run_dir()`.
pub fn run(config: &ExperimentConfig, options: &RunOptions) -> Result<Outcome> {
    config.validate()?;
    let dir = config.run_dir();
    fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(&dir, e))?;
    for stale in [METRICS_FILE, RECORD_FILE] {
        let _ = fs::remove_file(dir.join(stale));
    }
    mark_partial(&dir, "running")?;
    write_atomic(&dir.join("config.toml"), config.to_toml().as_bytes())?;
    let started = Instant::now();
    let result = build_stream(config).and_then(|stream| {
        let ck = fresh_checkpoint(config, &stream)?;
        drive(ck, &stream, &dir, options, started)
    });
    finish(&dir, result)
}

/// Continues from a checkpoint file, inside the run directory holding it.
/// With `config`, the checkpoint must have been written for that config.
pub fn resume(checkpoint: &Path, config: Option<&ExperimentConfig>, options: &RunOptions) -> Result<Outcome> {
    let ck: Checkpoint = read_json(checkpoint)?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::Config(format!(
            "{}: checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})",
            checkpoint.display(),
            ck.format
        )));
    }
    let actual = config.unwrap_or(&ck.config).digest();
    if actual != ck.config_digest {
        return Err(Error::DigestMismatch { path: checkpoint.to_path_buf(), recorded: ck.config_digest, actual });
    }
    let dir = checkpoint
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| Error::Config(format!("{} is not inside a run directory", checkpoint.display())))?
        .to_path_buf();
    mark_partial(&dir, "running")?;
    let started = Instant::now();
    let result = build_stream(&ck.config).and_then(|stream| drive(ck, &stream, &dir, options, started));
    finish(&dir, result)
}

fn mark_partial(dir: &Path, status: &str) -> Result<()> {
    let path = dir.join(PARTIAL_MARKER);
    fs::write(&path, format!("{status}\n")).map_err(|e| Error::io(&path, e))
}

fn finish(dir: &Path, result: Result<Outcome>) -> Result<Outcome> {
    match &result {
        Ok(Outcome::Finished(_)) => {
            let path = dir.join(PARTIAL_MARKER);
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Outcome::Stopped { checkpoint }) => mark_partial(dir, &format!("stopped; resume from {}", checkpoint.display()))?,
        Err(e) => mark_partial(dir, &format!("failed: {e}"))?,
    }
    result
}

fn save(ck: &Checkpoint, dir: &Path, label: String, previous: &mut Option<PathBuf>) -> Result<PathBuf> {
    let path = dir.join(CHECKPOINT_DIR).join(format!("{label}.json"));
    let bytes = serde_json::to_vec(ck).map_err(|e| Error::json(&path, e))?;
    write_atomic(&path, &bytes)?;
    if let Some(old) = previous.take() {
        if !ck.config.keep_checkpoints && old != path {
            let _ = fs::remove_file(old);
        }
    }
    *previous = Some(path.clone());
    Ok(path)
}

fn drive(mut ck: Checkpoint, stream: &Stream, dir: &Path, options: &RunOptions, started: Instant) -> Result<Outcome> {
    let base_elapsed = ck.elapsed_secs;
    let mut previous = None;
    let stop = |cursor: usize| options.stop_after.is_some_and(|s| cursor >= s);
    match stream {
        Stream::Tasks(s) => {
            for t in ck.cursor..s.tasks().len() {
                let data = &s.tasks()[t].train;
                let report = match (&mut ck.model, &mut ck.buffer) {
                    (Model::L2p(l), Some(buf)) => l.train_task_with_rehearsal(data, t, buf)?,
                    (Model::L2p(l), None) => l.train_task(data, t)?,
                    (Model::FtseqFrozen(p), _) => p.train_task(data, t)?,
                };
                ck.matrix.push_row(harness::evaluate_row(ck.model.learner(), s, t)?)?;
                ck.tasks.push(TaskSummary { steps: report.steps, epoch_losses: report.epoch_losses });
                ck.histogram.push(report.selection_counts);
                ck.cursor = t + 1;
                ck.elapsed_secs = base_elapsed + started.elapsed().as_secs_f64();
                let path = save(&ck, dir, format!("task-{:03}", ck.cursor), &mut previous)?;
                if stop(ck.cursor) && ck.cursor < s.tasks().len() {
                    return Ok(Outcome::Stopped { checkpoint: path });
                }
            }
        }
        Stream::Gaussian { stream: s, .. } => {
            let segments = ck.histogram.len();
            let every = ck.config.checkpoint_every;
            for step in ck.cursor..s.len() {
                let batch = s.batch(step)?;
                let refs: Vec<&Sample> = batch.iter().collect();
                let seg = step * segments / s.len();
                match &mut ck.model {
                    Model::L2p(l) => {
                        let report = l.train_step(&refs)?;
                        for sel in &report.selections {
                            for &i in &sel.indices {
                                ck.histogram[seg][i] += 1;
                            }
                        }
                        ck.loss_sums[seg] += report.loss;
                    }
                    Model::FtseqFrozen(p) => p.train_batch(&refs)?,
                }
                ck.tasks[seg].steps += 1;
                ck.cursor = step + 1;
                if ck.cursor.is_multiple_of(every) || ck.cursor == s.len() {
                    ck.elapsed_secs = base_elapsed + started.elapsed().as_secs_f64();
                    let path = save(&ck, dir, format!("step-{:06}", ck.cursor), &mut previous)?;
                    if stop(ck.cursor) && ck.cursor < s.len() {
                        return Ok(Outcome::Stopped { checkpoint: path });
                    }
                }
            }
        }
    }

    let metrics = final_metrics(&ck, stream)?;
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    let record = RunRecord {
        run: ck.config.run_name(),
        metrics,
        pretrain: ck.pretrain.clone(),
        wall_clock_secs: base_elapsed + started.elapsed().as_secs_f64(),
        versions: versions(),
    };
    write_json(&dir.join(RECORD_FILE), &record)?;
    Ok(Outcome::Finished(Box::new(record)))
}

fn final_metrics(ck: &Checkpoint, stream: &Stream) -> Result<Metrics> {
    let (matrix, final_accuracy, fgt, tasks) = match stream {
        Stream::Tasks(_) => (
            Some(ck.matrix.clone()),
            average_accuracy(&ck.matrix)?,
            Some(forgetting(&ck.matrix, false)?),
            ck.tasks.clone(),
        ),
        Stream::Gaussian { test, .. } => {
            let tasks = ck
                .tasks
                .iter()
                .zip(&ck.loss_sums)
                .map(|(t, &sum)| TaskSummary {
                    steps: t.steps,
                    epoch_losses: match &ck.model {
                        Model::L2p(_) if t.steps > 0 => vec![sum / t.steps as f64],
                        _ => Vec::new(),
                    },
                })
                .collect();
            (None, harness::accuracy(ck.model.learner(), test)?, None, tasks)
        }
    };
    Ok(Metrics {
        config_digest: ck.config_digest.clone(),
        setting: ck.config.setting.setting(),
        method: method_label(&ck.config),
        accuracy_matrix: matrix,
        final_accuracy,
        forgetting: fgt,
        tasks,
        histogram: Histogram { top_n: ck.model.top_n(), rows: ck.histogram.clone() },
    })
}

/// Reads a histogram from a record or a metrics document.
pub fn load_histogram(path: &Path) -> Result<Histogram> {
    let value: serde_json::Value = read_json(path)?;
    let metrics = value.get("metrics").cloned().unwrap_or(value);
    let m: Metrics = serde_json::from_value(metrics).map_err(|e| Error::json(path, e))?;
    Ok(m.histogram)
}
