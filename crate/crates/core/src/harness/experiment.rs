//! Pretrain, warm-up and stream driver with on-disk artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::data::generate_base_dataset;
use super::metrics::{summarize, BatchRecord, RunMetrics};
use super::stream::build_stream;
use crate::adaptation::{Adapter, StepReport};
use crate::backbone::{pretrain_source, warmup_experts, PretrainReport, ToyViT, WarmupReport};
use crate::error::{Error, Result};
use crate::sodd::DomainRegistry;
use crate::spectral::ImageSample;

pub const METRICS_FILE: &str = "metrics.json";
pub const STEP_LOG_FILE: &str = "steps.jsonl";
pub const VISITS_FILE: &str = "visits.csv";
pub const CHECKPOINT_FILE: &str = "model.xpmo";
pub const CONFIG_FILE: &str = "config.resolved.toml";

/// A frozen source model with its warm-up registry.
#[derive(Clone, Debug)]
pub struct SourceModel {
    pub model: ToyViT,
    pub registry: DomainRegistry,
    pub pretrain: Option<PretrainReport>,
    pub warmup: Option<WarmupReport>,
}

/// Labeled source training and validation sets.
pub fn source_datasets(cfg: &ExperimentConfig) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    Ok((
        generate_base_dataset(&cfg.train_spec())?,
        generate_base_dataset(&cfg.validation_spec())?,
    ))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads an `XPMO` checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(ToyViT, Option<DomainRegistry>)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    ToyViT::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn same_architecture(a: &crate::backbone::ToyViTConfig, b: &crate::backbone::ToyViTConfig) -> bool {
    let mut a = a.clone();
    a.seed = b.seed;
    &a == b
}

/// Fresh model trained on the source data, backbone frozen.
pub fn pretrain_stage(cfg: &ExperimentConfig) -> Result<(ToyViT, PretrainReport)> {
    let (train, val) = source_datasets(cfg)?;
    let mut model = ToyViT::new(cfg.model.clone())?;
    let report = pretrain_source(&mut model, &train, &val, &cfg.train_config())?;
    Ok((model, report))
}

/// Expert warm-up and registry calibration on the source data.
pub fn warmup_stage(cfg: &ExperimentConfig, model: &mut ToyViT) -> Result<(DomainRegistry, WarmupReport)> {
    let (train, val) = source_datasets(cfg)?;
    warmup_experts(
        model,
        &train,
        &val,
        &cfg.warmup_config(),
        &cfg.spectral,
        &cfg.sodd,
        cfg.adapt.batch_size,
    )
}

/// Loads `output.checkpoint_in` when set and runs whatever stages it is
/// missing: pretraining for an untrained model, warm-up for a model
/// without a registry.
pub fn prepare_source(cfg: &ExperimentConfig) -> Result<SourceModel> {
    let (mut model, registry, mut pretrain) = match &cfg.output.checkpoint_in {
        Some(path) => {
            let (model, registry) = load_checkpoint(path)?;
            if !same_architecture(&model.config, &cfg.model) {
                return Err(Error::Config(format!(
                    "checkpoint {} has a different model configuration",
                    path.display()
                )));
            }
            (model, registry, None)
        }
        None => {
            if !cfg.pretrain.enabled {
                return Err(Error::Config(
                    "no checkpoint_in given and pretraining is disabled".into(),
                ));
            }
            (ToyViT::new(cfg.model.clone())?, None, None)
        }
    };
    if !model.backbone_frozen {
        if !cfg.pretrain.enabled {
            return Err(Error::Config("checkpoint is not pretrained and pretraining is disabled".into()));
        }
        let (train, val) = source_datasets(cfg)?;
        pretrain = Some(pretrain_source(&mut model, &train, &val, &cfg.train_config())?);
    }
    let (registry, warmup) = match registry {
        Some(r) => (r, None),
        None => {
            let (r, w) = warmup_stage(cfg, &mut model)?;
            (r, Some(w))
        }
    };
    Ok(SourceModel {
        model,
        registry,
        pretrain,
        warmup,
    })
}

#[derive(Clone, Debug)]
pub struct StreamOutcome {
    pub metrics: RunMetrics,
    pub steps: Vec<StepReport>,
    /// Final adapter state; `None` for the source baseline.
    pub adapter: Option<Adapter>,
}

impl StreamOutcome {
    pub fn checkpoint_bytes(&self, source: &SourceModel) -> Vec<u8> {
        match &self.adapter {
            Some(a) => a.model.to_bytes(Some(&a.registry)),
            None => source.model.to_bytes(Some(&source.registry)),
        }
    }
}

fn count_errors(predictions: &[usize], labels: &[usize]) -> usize {
    predictions.iter().zip(labels).filter(|(p, l)| p != l).count()
}

struct Sink {
    dir: PathBuf,
    log: fs::File,
}

impl Sink {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log: fs::File::create(dir.join(STEP_LOG_FILE))?,
        })
    }

    fn step(&mut self, report: &StepReport) -> Result<()> {
        writeln!(self.log, "{}", report.to_json_line()?)?;
        Ok(())
    }

    fn checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        self.log.flush()?;
        write_atomic(&self.dir.join(CHECKPOINT_FILE), bytes)
    }
}

/// Runs the configured method over the stream. Learners see unlabeled
/// batches; errors are scored against the hidden labels. With `out`, the
/// step log is streamed and a checkpoint is rewritten atomically after
/// every domain visit.
pub fn run_stream(cfg: &ExperimentConfig, source: &SourceModel, out: Option<&Path>) -> Result<StreamOutcome> {
    let stream = build_stream(&cfg.stream)?;
    let names: Vec<String> = cfg.stream.domains.iter().map(|d| d.label()).collect();
    let mut sink = out.map(Sink::open).transpose()?;
    let mut records = Vec::with_capacity(stream.len());
    let mut steps = Vec::with_capacity(stream.len());
    let mut adapter = match cfg.method {
        Method::Expamoe => Some(Adapter::new(
            source.model.clone(),
            source.registry.clone(),
            cfg.adapt.clone(),
            cfg.spectral,
        )?),
        Method::Source => None,
    };
    let method = match cfg.method {
        Method::Expamoe => "expamoe",
        Method::Source => "source",
    };
    for (i, batch) in stream.iter().enumerate() {
        let inputs = batch.unlabeled();
        let labels = batch.labels();
        let mut report = match adapter.as_mut() {
            Some(a) => a.ctta_step(&inputs)?,
            None => {
                let predictions = source.model.backbone_forward(&inputs)?.predictions();
                StepReport {
                    step: i,
                    domain_id: 0,
                    sodd_domain: 0,
                    is_new: false,
                    pass_count: 0,
                    loss: 0.0,
                    updated: false,
                    predictions,
                    error_if_labeled: None,
                }
            }
        };
        let errors = count_errors(&report.predictions, &labels);
        report.error_if_labeled = Some(errors as f64 / labels.len() as f64);
        records.push(BatchRecord {
            round: batch.round,
            domain: batch.domain,
            assigned: report.domain_id,
            is_new: report.is_new,
            errors,
            samples: labels.len(),
        });
        if let Some(s) = sink.as_mut() {
            s.step(&report)?;
            if batch.index + 1 == cfg.stream.batches_per_domain {
                let bytes = match &adapter {
                    Some(a) => a.model.to_bytes(Some(&a.registry)),
                    None => source.model.to_bytes(Some(&source.registry)),
                };
                s.checkpoint(&bytes)?;
            }
        }
        steps.push(report);
    }
    let spawned = adapter.as_ref().map_or(0, Adapter::spawned);
    Ok(StreamOutcome {
        metrics: summarize(method, &names, &records, spawned),
        steps,
        adapter,
    })
}

/// Everything a finished experiment reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub pretrain: Option<PretrainReport>,
    pub warmup: Option<WarmupReport>,
    pub metrics: RunMetrics,
}

/// Source preparation, stream, and artifacts under `output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dir = cfg.output.dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        write_atomic(&d.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    }
    let source = prepare_source(cfg)?;
    let outcome = run_stream(cfg, &source, dir)?;
    let report = ExperimentReport {
        pretrain: source.pretrain.clone(),
        warmup: source.warmup.clone(),
        metrics: outcome.metrics.clone(),
    };
    if let Some(d) = dir {
        write_atomic(&d.join(CHECKPOINT_FILE), &outcome.checkpoint_bytes(&source))?;
        write_atomic(&d.join(METRICS_FILE), serde_json::to_string_pretty(&report)?.as_bytes())?;
        write_atomic(&d.join(VISITS_FILE), outcome.metrics.to_csv().as_bytes())?;
    }
    Ok(report)
}

/// Convenience for `run_experiment` from a config path.
pub fn run_experiment_file(path: &Path, overrides: &[String]) -> Result<ExperimentReport> {
    run_experiment(&ExperimentConfig::load(path, overrides)?)
}
