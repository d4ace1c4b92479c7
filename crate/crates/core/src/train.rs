//! Optimization loop, metrics log, checkpoint schedule and the paired
//! with/without mask-loss ablation.
//!
//! Every random choice in a run is a pure function of `(seed, epoch, batch
//! position)`, so the state saved in a checkpoint is enough to continue a
//! run exactly where it stopped.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::activation::{attention_in_mask, predicted_pam};
use crate::augment::{derive_seed, AugmentationConfig};
use crate::checkpoint::{self, Checkpoint};
use crate::dataset::{write_atomic, Dataset, DatasetConfig, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, ScoreTable};
use crate::losses::{batch_loss_and_gradients, softmax, Example, LossBreakdown, MaskReduction};
use crate::mask::{MaskTargetMode, DEFAULT_MIN_EXTENT};
use crate::network::{build_model, forward_traced, LocOutput, ModelParams, ModelSpec};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const MOMENTUM: f64 = 0.9;

const INIT_STREAM: u64 = 0x494e_4954;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Momentum,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    #[default]
    Full,
    Compact,
}

/// Training hyperparameters. Read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub lambda_mask: f64,
    pub mask_loss_reduction: MaskReduction,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Write `checkpoint-<step>.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Evaluate on the validation split every this many epochs; 0 disables.
    pub eval_every: u64,
    pub image_size: usize,
    pub model: ModelSize,
    pub loc_output: LocOutput,
    pub mask_target: MaskTargetMode,
    pub min_extent: f64,
    pub augment: bool,
    /// Stop after this many optimizer steps in total, if set.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 12,
            epochs: 10,
            lambda_mask: 1.0,
            mask_loss_reduction: MaskReduction::Mean,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 1,
            image_size: 448,
            model: ModelSize::Full,
            loc_output: LocOutput::Linear,
            mask_target: MaskTargetMode::Soft,
            min_extent: DEFAULT_MIN_EXTENT,
            augment: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for the synthetic benchmark on a single CPU core.
    ///
    /// The heatmap there is only 4×4, so a mean-reduced mask loss is two
    /// orders of magnitude below the classification loss and barely steers
    /// anything. The summed squared error is used instead.
    pub fn synthetic() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 30,
            mask_loss_reduction: MaskReduction::Sum,
            image_size: 128,
            model: ModelSize::Compact,
            ..TrainConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<TrainConfig> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.lambda_mask.is_finite() && self.lambda_mask >= 0.0) {
            return bad(format!("lambda_mask must be finite and >= 0, got {}", self.lambda_mask));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.min_extent.is_finite() && self.min_extent >= 0.0) {
            return bad(format!("min_extent must be finite and >= 0, got {}", self.min_extent));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(crate::network::BACKBONE_STRIDE) {
            return bad(format!("image_size must be a positive multiple of 32, got {}", self.image_size));
        }
        Ok(())
    }

    pub fn model_spec(&self, num_classes: usize) -> ModelSpec {
        let mut spec = match self.model {
            ModelSize::Full => ModelSpec::full(num_classes),
            ModelSize::Compact => ModelSpec::compact(num_classes),
        };
        spec.loc_output = self.loc_output;
        spec
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            image_size: self.image_size,
            min_extent: self.min_extent,
            mask_target: self.mask_target,
            augmentation: AugmentationConfig::default(),
        }
    }

    /// Fields that must agree between a checkpoint and the run resuming it.
    fn same_trajectory(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            epochs: 1,
            checkpoint_every: 0,
            eval_every: 0,
            max_steps: None,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum OptimizerState {
    Adam { m: ModelParams, v: ModelParams, t: u64 },
    Momentum { velocity: ModelParams },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Adam => OptimizerState::Adam {
                m: params.zeros_like(),
                v: params.zeros_like(),
                t: 0,
            },
            OptimizerKind::Momentum => OptimizerState::Momentum {
                velocity: params.zeros_like(),
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Adam { .. } => OptimizerKind::Adam,
            OptimizerState::Momentum { .. } => OptimizerKind::Momentum,
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, learning_rate: f64) {
        match self {
            OptimizerState::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                let tensors = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut());
                for (((p, g), m), v) in tensors {
                    for (((p, &g), m), v) in p.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
                    }
                }
            }
            OptimizerState::Momentum { velocity } => {
                let tensors = params.tensors_mut().into_iter().zip(grads.tensors()).zip(velocity.tensors_mut());
                for ((p, g), vel) in tensors {
                    for ((p, &g), vel) in p.iter_mut().zip(g.data).zip(vel.iter_mut()) {
                        *vel = MOMENTUM * *vel + g;
                        *p -= learning_rate * *vel;
                    }
                }
            }
        }
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Current epoch (0-based).
    pub epoch: u64,
    /// Batches of the current epoch already consumed.
    pub batch_cursor: u64,
    pub best_val_map: Option<f64>,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig, num_classes: usize) -> Result<TrainState> {
        let params = build_model(&config.model_spec(num_classes), derive_seed(&[config.seed, INIT_STREAM]))?;
        let optimizer = OptimizerState::new(config.optimizer, &params);
        Ok(TrainState {
            params,
            optimizer,
            step: 0,
            epoch: 0,
            batch_cursor: 0,
            best_val_map: None,
        })
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum MetricRecord {
    Step {
        step: u64,
        epoch: u64,
        l_cls: f64,
        l_mask: f64,
        total: f64,
        lambda_mask: f64,
    },
    Eval {
        step: u64,
        epoch: u64,
        val_map: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        mean_attention_in_mask: Option<f64>,
    },
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("finite metrics serialize")
    }
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: "metrics".into(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Append-only metrics sink; every record is flushed as it is written.
struct MetricsSink {
    file: Option<File>,
    records: Vec<MetricRecord>,
}

impl MetricsSink {
    fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", record.to_line())
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        self.records.push(record);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<MetricRecord>,
}

/// A training run over a loaded dataset, optionally persisted under `out_dir`.
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    out_dir: Option<PathBuf>,
    state: TrainState,
    sink: MetricsSink,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset, out_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        check_dataset(&config, dataset)?;
        let state = TrainState::fresh(&config, dataset.num_classes())?;
        let file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(METRICS_FILE);
                Some(File::create(&path).map_err(|e| Error::io(&path, e))?)
            }
            None => None,
        };
        Ok(Trainer {
            config,
            dataset,
            out_dir: out_dir.map(Path::to_path_buf),
            state,
            sink: MetricsSink {
                file,
                records: Vec::new(),
            },
        })
    }

    /// Continues the run stored in `out_dir`: restores the checkpoint and
    /// truncates the metrics log to the records it had seen.
    pub fn resume(config: TrainConfig, dataset: &'a Dataset, out_dir: &Path, checkpoint_path: &Path) -> Result<Self> {
        config.validate()?;
        check_dataset(&config, dataset)?;
        let ckpt = checkpoint::load(checkpoint_path)?;
        if !config.same_trajectory(&ckpt.config) {
            return Err(Error::Config(format!(
                "{} was written with a different configuration",
                checkpoint_path.display()
            )));
        }
        if ckpt.label_names != dataset.label_space.names() {
            return Err(Error::Config("checkpoint label space differs from the manifest".into()));
        }
        let metrics_path = out_dir.join(METRICS_FILE);
        let text = std::fs::read_to_string(&metrics_path).unwrap_or_default();
        let mut records = parse_metrics(&text).unwrap_or_default();
        if records.len() < ckpt.log_len as usize {
            return Err(Error::Checkpoint(format!(
                "{} has {} records but the checkpoint expects {}",
                metrics_path.display(),
                records.len(),
                ckpt.log_len
            )));
        }
        records.truncate(ckpt.log_len as usize);
        let body: String = records.iter().map(|r| r.to_line() + "\n").collect();
        write_atomic(&metrics_path, body.as_bytes())?;
        let file = OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        Ok(Trainer {
            config,
            dataset,
            out_dir: Some(out_dir.to_path_buf()),
            state: ckpt.state,
            sink: MetricsSink {
                file: Some(file),
                records,
            },
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &[MetricRecord] {
        &self.sink.records
    }

    /// Runs until the configured epoch count or step limit is reached.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let c = self.config.clone();
        'epochs: while self.state.epoch < c.epochs {
            let mut batches = self.dataset.batches(Split::Train, c.batch_size, c.seed, self.state.epoch)?;
            if !c.augment {
                batches = batches.without_augmentation();
            }
            batches.skip_batches(self.state.batch_cursor as usize);
            for batch in batches {
                if c.max_steps.is_some_and(|m| self.state.step >= m) {
                    break 'epochs;
                }
                let examples: Vec<Example<'_>> = batch
                    .images
                    .iter()
                    .zip(&batch.labels)
                    .zip(&batch.targets)
                    .map(|((image, &label), target)| Example {
                        image,
                        label,
                        target: target.as_ref().expect("training samples carry person evidence"),
                    })
                    .collect();
                let result =
                    batch_loss_and_gradients(&self.state.params, &examples, c.lambda_mask, c.mask_loss_reduction);
                let (loss, grads) = match result {
                    Err(Error::NonFiniteLogits) => (LossBreakdown::new(f64::NAN, f64::NAN, c.lambda_mask), self.state.params.zeros_like()),
                    other => other?,
                };
                if !loss.is_finite() {
                    log::error!("non-finite loss at step {}: batch {:?}", self.state.step, batch.indices);
                    return Err(Error::NonFiniteLoss {
                        step: self.state.step,
                        indices: batch.indices,
                    });
                }
                self.state.optimizer.step(&mut self.state.params, &grads, c.learning_rate);
                self.state.step += 1;
                self.state.batch_cursor += 1;
                self.sink.push(step_record(&self.state, &loss))?;
                if c.checkpoint_every > 0 && self.state.step.is_multiple_of(c.checkpoint_every) {
                    self.save(&format!("checkpoint-{}.ckpt", self.state.step))?;
                    self.save(LAST_CHECKPOINT)?;
                }
            }
            self.state.epoch += 1;
            self.state.batch_cursor = 0;
            log::info!("epoch {} done at step {}", self.state.epoch, self.state.step);
            if c.eval_every > 0 && self.state.epoch.is_multiple_of(c.eval_every) && !self.dataset.split_indices(Split::Val).is_empty()
            {
                let report = evaluate_split(&self.state.params, self.dataset, Split::Val, true)?;
                self.sink.push(MetricRecord::Eval {
                    step: self.state.step,
                    epoch: self.state.epoch,
                    val_map: report.map,
                    mean_attention_in_mask: report.mean_attention_in_mask,
                })?;
                if self.state.best_val_map.is_none_or(|b| report.map > b) {
                    self.state.best_val_map = Some(report.map);
                    self.save(BEST_CHECKPOINT)?;
                }
            }
        }
        self.save(LAST_CHECKPOINT)?;
        Ok(TrainOutcome {
            state: self.state,
            log: self.sink.records,
        })
    }

    fn save(&self, name: &str) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        checkpoint::save(
            &dir.join(name),
            &Checkpoint {
                state: self.state.clone(),
                config: self.config.clone(),
                label_names: self.dataset.label_space.names().to_vec(),
                log_len: self.sink.records.len() as u64,
            },
        )
    }
}

fn step_record(state: &TrainState, loss: &LossBreakdown) -> MetricRecord {
    MetricRecord::Step {
        step: state.step,
        epoch: state.epoch,
        l_cls: loss.l_cls,
        l_mask: loss.l_mask,
        total: loss.total,
        lambda_mask: loss.lambda_mask,
    }
}

fn check_dataset(config: &TrainConfig, dataset: &Dataset) -> Result<()> {
    if dataset.config.image_size != config.image_size {
        return Err(Error::Config(format!(
            "dataset was loaded at {} pixels but the config asks for {}",
            dataset.config.image_size, config.image_size
        )));
    }
    Ok(())
}

/// Trains one run in memory.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    Trainer::new(config.clone(), dataset, None)?.run()
}

/// Class probabilities for every sample of a split, in manifest order.
pub fn score_split(params: &ModelParams, dataset: &Dataset, split: Split) -> Result<(ScoreTable, Vec<usize>)> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let c = params.num_classes();
    let mut scores = Array2::zeros((indices.len(), c));
    let mut labels = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        let s = &dataset.samples[i];
        let (out, _) = forward_traced(params, &s.sample.pixels)?;
        let p = softmax(out.logits.as_slice().expect("contiguous"));
        scores.row_mut(row).assign(&ndarray::Array1::from(p));
        labels.push(s.sample.label);
    }
    Ok((ScoreTable::new(scores, labels)?, indices))
}

/// Per-class AP and mAP over a split. With `attention`, also the mean share
/// of predicted-class activation inside the person mask, over samples that
/// have one.
pub fn evaluate_split(params: &ModelParams, dataset: &Dataset, split: Split, attention: bool) -> Result<EvalReport> {
    let (table, indices) = score_split(params, dataset, split)?;
    let mut report = evaluate(&table)?;
    if attention {
        report.mean_attention_in_mask = mean_attention(params, dataset, &indices)?;
    }
    Ok(report)
}

/// Mean `attention_in_mask` of the predicted-class map over the given samples
/// that carry person evidence.
pub fn mean_attention(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &i in indices {
        let Some(target) = dataset.target(i) else {
            continue;
        };
        let (out, _) = forward_traced(params, &dataset.samples[i].sample.pixels)?;
        let map = predicted_pam(params, &out)?;
        sum += attention_in_mask(&map, &target)?;
        n += 1;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub lambda_mask: f64,
    pub test_map: f64,
    pub test_attention_in_mask: Option<f64>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    /// `with - without` mask loss.
    pub map_delta: f64,
    pub attention_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub per_seed: Vec<SeedDelta>,
    pub mean_map_without: f64,
    pub mean_map_with: f64,
    pub mean_attention_without: Option<f64>,
    pub mean_attention_with: Option<f64>,
    pub mean_map_delta: f64,
    pub mean_attention_delta: Option<f64>,
}

/// Trains every seed with the mask loss off (`lambda_mask = 0`) and on
/// (`lambda_mask = 1`), all else equal, and compares them on the test split.
pub fn ablation(config: &TrainConfig, dataset: &Dataset, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let mut runs = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        for lambda_mask in [0.0, 1.0] {
            let cfg = TrainConfig {
                seed,
                lambda_mask,
                eval_every: 0,
                ..config.clone()
            };
            let outcome = train(&cfg, dataset)?;
            let report = evaluate_split(&outcome.state.params, dataset, Split::Test, true)?;
            log::info!(
                "seed {seed} lambda {lambda_mask}: test mAP {:.4}, attention {:?}",
                report.map,
                report.mean_attention_in_mask
            );
            runs.push(AblationRun {
                seed,
                lambda_mask,
                test_map: report.map,
                test_attention_in_mask: report.mean_attention_in_mask,
                config: cfg,
            });
        }
    }
    Ok(summarize_ablation(runs))
}

/// Pairs runs by seed (`lambda_mask == 0` against the other) and averages.
pub fn summarize_ablation(runs: Vec<AblationRun>) -> AblationReport {
    let mut per_seed = Vec::new();
    for without in runs.iter().filter(|r| r.lambda_mask == 0.0) {
        if let Some(with) = runs.iter().find(|r| r.seed == without.seed && r.lambda_mask != 0.0) {
            per_seed.push(SeedDelta {
                seed: without.seed,
                map_delta: with.test_map - without.test_map,
                attention_delta: with
                    .test_attention_in_mask
                    .zip(without.test_attention_in_mask)
                    .map(|(a, b)| a - b),
            });
        }
    }
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let side = |on: bool| runs.iter().filter(move |r| (r.lambda_mask != 0.0) == on);
    let opt_mean = |on: bool| {
        let v: Option<Vec<f64>> = side(on).map(|r| r.test_attention_in_mask).collect();
        v.and_then(|v| mean(&mut v.into_iter()))
    };
    AblationReport {
        mean_map_without: mean(&mut side(false).map(|r| r.test_map)).unwrap_or(f64::NAN),
        mean_map_with: mean(&mut side(true).map(|r| r.test_map)).unwrap_or(f64::NAN),
        mean_attention_without: opt_mean(false),
        mean_attention_with: opt_mean(true),
        mean_map_delta: mean(&mut per_seed.iter().map(|d| d.map_delta)).unwrap_or(f64::NAN),
        mean_attention_delta: per_seed
            .iter()
            .map(|d| d.attention_delta)
            .collect::<Option<Vec<f64>>>()
            .and_then(|v| mean(&mut v.into_iter())),
        per_seed,
        runs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuzz_seeds_parse() {
        for text in [
            include_str!("../../../fuzz/corpus/train_config_parse/empty.toml"),
            include_str!("../../../fuzz/corpus/train_config_parse/momentum.toml"),
            include_str!("../../../fuzz/corpus/train_config_parse/synthetic.toml"),
        ] {
            TrainConfig::from_toml_str(text).unwrap();
        }
    }

    #[test]
    fn shipped_synthetic_config_matches_preset() {
        let c = TrainConfig::from_toml_str(include_str!("../../../configs/synthetic.toml")).unwrap();
        assert_eq!(c, TrainConfig::synthetic());
    }

    #[test]
    fn config_defaults_and_overrides() {
        let c = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.learning_rate, 1e-5);
        assert_eq!(c.batch_size, 12);
        let c = TrainConfig::from_toml_str("learning_rate = 0.001\noptimizer = \"momentum\"\nmax_steps = 5\n").unwrap();
        assert_eq!(c.optimizer, OptimizerKind::Momentum);
        assert_eq!(c.max_steps, Some(5));
    }

    #[test]
    fn config_rejects_bad_input() {
        for bad in [
            "epochs = 0",
            "batch_size = 0",
            "learning_rate = -1.0",
            "image_size = 100",
            "unknown_key = 1",
            "optimizer = \"sgd\"",
            "learning_rate = nan",
        ] {
            assert!(TrainConfig::from_toml_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn config_round_trips() {
        let c = TrainConfig {
            max_steps: Some(3),
            ..TrainConfig::synthetic()
        };
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let spec = ModelSpec::compact(2);
        let mut p = build_model(&spec, 1).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.fc_bias[0] = 3.0;
        g.fc_bias[1] = -0.5;
        let mut opt = OptimizerState::new(OptimizerKind::Adam, &p);
        opt.step(&mut p, &g, 0.01);
        assert!((before.fc_bias[0] - p.fc_bias[0] - 0.01).abs() < 1e-9);
        assert!((p.fc_bias[1] - before.fc_bias[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.fc_weight, before.fc_weight);
    }

    #[test]
    fn momentum_accumulates() {
        let spec = ModelSpec::compact(2);
        let mut p = ModelParams::zeros(&spec).unwrap();
        let mut g = p.zeros_like();
        g.fc_bias[0] = 1.0;
        let mut opt = OptimizerState::new(OptimizerKind::Momentum, &p);
        opt.step(&mut p, &g, 0.1);
        opt.step(&mut p, &g, 0.1);
        assert!((p.fc_bias[0] + 0.1 * (1.0 + 1.9)).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let spec = ModelSpec::compact(3);
        let mut p = build_model(&spec, 2).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.add_scaled(&before, 1.0);
        for kind in [OptimizerKind::Adam, OptimizerKind::Momentum] {
            let mut opt = OptimizerState::new(kind, &p);
            opt.step(&mut p, &g, 0.0);
            assert_eq!(p, before);
        }
    }

    #[test]
    fn metric_records_round_trip() {
        let recs = vec![
            MetricRecord::Step {
                step: 1,
                epoch: 0,
                l_cls: 1.25,
                l_mask: 0.5,
                total: 1.75,
                lambda_mask: 1.0,
            },
            MetricRecord::Eval {
                step: 1,
                epoch: 1,
                val_map: 0.5,
                mean_attention_in_mask: None,
            },
        ];
        let text: String = recs.iter().map(|r| r.to_line() + "\n").collect();
        assert_eq!(parse_metrics(&text).unwrap(), recs);
    }

    proptest::proptest! {
        // Resume rewrites the kept prefix of the log, so every value must
        // survive a text round trip bit for bit.
        #[test]
        fn metric_values_round_trip_exactly(
            l_cls in 0.0f64..1e3,
            l_mask in 0.0f64..1e6,
            lambda_mask in 0.0f64..10.0,
        ) {
            let rec = MetricRecord::Step { step: 3, epoch: 1, l_cls, l_mask, total: l_cls + lambda_mask * l_mask, lambda_mask };
            let line = rec.to_line();
            let back = parse_metrics(&line).unwrap();
            proptest::prop_assert_eq!(&back[0], &rec);
            proptest::prop_assert_eq!(back[0].to_line(), line);
        }
    }

    #[test]
    fn ablation_summary_pairs_by_seed() {
        let run = |seed, lambda_mask, test_map, att| AblationRun {
            seed,
            lambda_mask,
            test_map,
            test_attention_in_mask: Some(att),
            config: TrainConfig::default(),
        };
        let r = summarize_ablation(vec![
            run(1, 0.0, 0.5, 0.2),
            run(1, 1.0, 0.7, 0.6),
            run(2, 1.0, 0.4, 0.5),
            run(2, 0.0, 0.6, 0.3),
        ]);
        assert_eq!(r.per_seed.len(), 2);
        assert!((r.mean_map_delta - 0.0).abs() < 1e-12);
        assert!((r.mean_attention_delta.unwrap() - 0.3).abs() < 1e-12);
        assert!((r.mean_map_with - 0.55).abs() < 1e-12);
    }
}
