//! The two training phases and evaluation.
//!
//! Phase-I trains the whole network on the long-tailed split. Phase-II keeps
//! the extractor frozen and fine-tunes only the classifier on class-balanced
//! batches of cached pooled features, optionally with synthesized tail
//! samples.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_batch, rank_all, split_head_tail, AugmentSource, HeadTailSplit};
use crate::cam::FeatureCache;
use crate::config::ExperimentConfig;
use crate::data::{derive_seed, to_model_input, Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::Metrics;
use crate::nn::{backward, forward, sgd_step, Classifier, ModelParams, OptimState};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;
const STREAM_INIT: u64 = 1;
const STREAM_PHASE1: u64 = 2;
const STREAM_PHASE2: u64 = 3;

/// One line of a run's event log. `seq` is a logical clock, so logs of
/// identical runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    pub phase: String,
    pub arm: String,
    /// Epoch (Phase-I) or iteration (Phase-II).
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous event.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    pub val_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_tail_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub events: Vec<RunEvent>,
}

impl RunRecord {
    fn push(&mut self, mut e: RunEvent) {
        e.seq = self.events.last().map_or(0, |p| p.seq + 1);
        self.events.push(e);
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { events })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn load(path: &Path, producer: &'static str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                producer,
            });
        }
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid("path", "no file name"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.partial"));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predict every sample of `dataset` and score against its labels.
pub fn evaluate(params: &ModelParams<f32>, dataset: &Dataset, train_counts: &[usize]) -> Result<Metrics> {
    let pooled = pooled_features(params, dataset)?;
    evaluate_classifier(&params.fc, &pooled, &dataset.labels, train_counts)
}

/// Global-average-pooled features `[N, K]` of the frozen extractor.
pub fn pooled_features(params: &ModelParams<f32>, dataset: &Dataset) -> Result<Tensor<f32>> {
    let mut rows = Vec::with_capacity(dataset.len() * params.arch.feature_channels());
    for start in (0..dataset.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(dataset.len());
        let out = forward(params, &to_model_input(&dataset.images.slice_rows(start, end)?))?;
        rows.extend_from_slice(out.pooled.data());
    }
    Tensor::new(vec![dataset.len(), params.arch.feature_channels()], rows)
}

pub fn evaluate_classifier(
    fc: &Classifier<f32>,
    pooled: &Tensor<f32>,
    labels: &[usize],
    train_counts: &[usize],
) -> Result<Metrics> {
    let logits = fc.logits(pooled)?;
    let predicted: Vec<usize> = (0..logits.dim(0)).map(|i| argmax(logits.row(i))).collect();
    Metrics::from_predictions(&predicted, labels, train_counts)
}

/// Random crop after zero padding, then a horizontal flip with probability
/// one half, applied independently to every image of `[N, C, H, W]`.
pub fn augment_inputs(batch: &mut Tensor<f32>, pad: usize, flip: bool, rng: &mut impl Rng) {
    let (c, h, w) = (batch.dim(1), batch.dim(2), batch.dim(3));
    let mut scratch = vec![0.0f32; c * h * w];
    for i in 0..batch.dim(0) {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let mirror = flip && rng.gen_bool(0.5);
        let img = batch.row_mut(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = x as isize + dx;
                    let sx = if mirror { w as isize - 1 - sx0 } else { sx0 };
                    scratch[(ch * h + y) * w + x] = if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx) {
                        img[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        img.copy_from_slice(&scratch);
    }
}

pub struct Phase1Outcome {
    pub params: ModelParams<f32>,
    pub record: RunRecord,
    pub metrics: Metrics,
}

/// Directory layout of one experiment under `output.dir`.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.output_dir.clone(),
        }
    }
    pub fn phase1(&self) -> PathBuf {
        self.root.join("phase1")
    }
    pub fn phase1_checkpoint(&self) -> PathBuf {
        self.phase1().join("checkpoint")
    }
    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn phase2(&self, arm: &str) -> PathBuf {
        self.root.join("phase2").join(arm)
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

pub const RUN_LOG: &str = "run.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const BATCH_DUMP: &str = "batches.jsonl";

/// Train every parameter on the long-tailed training split, evaluating on
/// the test split after each epoch. The checkpoint in `out/checkpoint` is
/// rewritten after every finite epoch, so a divergence leaves the last good
/// one in place.
pub fn train_phase1(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    train: &Dataset,
    test: &Dataset,
    out: &Path,
) -> Result<Phase1Outcome> {
    cfg.validate()?;
    let arch = cfg.arch();
    if manifest.n_classes() != arch.n_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, config asks for {}",
            manifest.n_classes(),
            arch.n_classes
        )));
    }
    let p1 = &cfg.phase1;
    let loss = cfg.loss_config(&manifest.counts);
    loss.validate(arch.n_classes)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, STREAM_INIT]));
    let mut params = ModelParams::<f32>::init(&arch, &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, STREAM_PHASE1]));
    let mut state = OptimState::new(&params, p1.base_lr, p1.momentum, p1.weight_decay);
    let mut record = RunRecord::default();
    let checkpoint = out.join("checkpoint");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = None;
    for epoch in 0..p1.epochs {
        state.learning_rate = crate::nn::lr_schedule(epoch, p1.base_lr, p1.decay_every, p1.factor);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(p1.batch_size) {
            let (mut batch, labels) = gather(train, chunk)?;
            augment_inputs(&mut batch, p1.pad, p1.flip, &mut rng);
            let step = backward(&params, &batch, &labels, &loss, None)
                .and_then(|(value, grads)| sgd_step(&mut params, &grads, &mut state).map(|_| value));
            let value = step.map_err(|e| diverged(epoch, &checkpoint, e))?;
            loss_sum += value as f64 * labels.len() as f64;
            seen += labels.len();
        }
        if !params.validate().is_ok_and(|_| params.fc.weight.is_finite()) {
            return Err(diverged(epoch, &checkpoint, Error::numerical("phase1", "parameters are not finite")));
        }
        let m = evaluate(&params, test, &manifest.counts)?;
        params.save_checkpoint(&checkpoint)?;
        info!("phase1 epoch {epoch}: loss {:.4} acc {:.4}", loss_sum / seen as f64, m.overall);
        record.push(RunEvent {
            seq: 0,
            phase: "phase1".into(),
            arm: cfg.loss.as_str().into(),
            step: epoch,
            lr: state.learning_rate,
            train_loss: Some(loss_sum / seen as f64),
            val_accuracy: m.overall,
            val_tail_accuracy: m.tail_accuracy(),
            checkpoint: Some("checkpoint".into()),
        });
        metrics = Some(m);
    }
    record.save(&out.join(RUN_LOG))?;
    let metrics = metrics.expect("at least one epoch");
    write_atomic(&out.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    Ok(Phase1Outcome { params, record, metrics })
}

fn diverged(epoch: usize, checkpoint: &Path, cause: Error) -> Error {
    match cause {
        Error::Numerical { context, detail } => Error::Numerical {
            context,
            detail: format!(
                "{detail}; training diverged in epoch {epoch}, last good checkpoint kept at {}",
                checkpoint.display()
            ),
        },
        other => other,
    }
}

fn gather(data: &Dataset, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let per = data.images.len() / data.len();
    let mut buf = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        buf.extend(data.images.row(i).iter().map(|&v| 2.0 * v - 1.0));
    }
    let mut shape = data.images.shape().to_vec();
    shape[0] = idx.len();
    Ok((Tensor::new(shape, buf)?, idx.iter().map(|&i| data.labels[i]).collect()))
}

pub struct Phase2Outcome {
    /// Parameters after the last iteration.
    pub last: ModelParams<f32>,
    /// Parameters at the evaluation with the highest overall accuracy.
    pub best: ModelParams<f32>,
    pub best_iteration: usize,
    pub initial_metrics: Metrics,
    pub last_metrics: Metrics,
    pub best_metrics: Metrics,
    pub split: HeadTailSplit,
    pub record: RunRecord,
    pub skipped: usize,
    pub fallbacks: usize,
}

/// Fine-tune only the classifier of `params` on class-balanced batches built
/// from `cache`. `cache` must come from exactly these parameters.
pub fn finetune_phase2(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    params: &ModelParams<f32>,
    cache: &FeatureCache,
    test: &Dataset,
    out: Option<&Path>,
) -> Result<Phase2Outcome> {
    cfg.validate()?;
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::Fingerprint(format!(
            "feature cache was built from checkpoint {} but phase2 was given {}; rerun cache-features",
            &cache.fingerprint[..12.min(cache.fingerprint.len())],
            &params.fingerprint()[..12]
        )));
    }
    let p2 = &cfg.phase2;
    let arm = cfg.phase2_arm();
    let split = split_head_tail(&manifest.counts, p2.h_r)?;
    let ranking = rank_all(cache, &split, p2.augment.n_f)?;
    let source = AugmentSource::new(cache, p2.augment.tau_s, p2.augment.tau_g)?;
    let test_pooled = pooled_features(params, test)?;
    let counts = &manifest.counts;
    let loss = LossConfig::cross_entropy();

    let mut fc = params.fc.clone();
    let mut state = OptimState::new(&fc, p2.lr, p2.momentum, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, STREAM_PHASE2, p2.augment.n_a as u64]));
    let mut record = RunRecord::default();
    let initial_metrics = evaluate_classifier(&fc, &test_pooled, &test.labels, counts)?;
    let event = |step: usize, train_loss: Option<f64>, m: &Metrics| RunEvent {
        seq: 0,
        phase: "phase2".into(),
        arm: arm.into(),
        step,
        lr: p2.lr,
        train_loss,
        val_accuracy: m.overall,
        val_tail_accuracy: m.tail_accuracy(),
        checkpoint: None,
    };
    record.push(event(0, None, &initial_metrics));
    let mut best = (initial_metrics.clone(), fc.clone(), 0usize);
    let mut last_metrics = initial_metrics.clone();
    let (mut skipped, mut fallbacks) = (0, 0);
    let (mut loss_sum, mut loss_n) = (0.0f64, 0usize);
    let mut dump = String::new();
    for it in 1..=p2.iterations {
        let batch = build_batch(&source, &split, &ranking, &p2.augment, &mut rng)?;
        if p2.dump_batches {
            dump.push_str(&batch.provenance_jsonl(it)?);
        }
        skipped += batch.skipped;
        fallbacks += batch.fallbacks;
        let (x, y) = batch.to_tensors()?;
        let (value, dlogits) = loss.evaluate(&fc.logits(&x)?, &y, None)?;
        if !value.is_finite() {
            return Err(Error::numerical("phase2", format!("loss is not finite at iteration {it}")));
        }
        let (grads, _) = fc.backward(&x, &dlogits)?;
        sgd_step(&mut fc, &grads, &mut state)?;
        loss_sum += value as f64;
        loss_n += 1;
        if it % p2.eval_every == 0 || it == p2.iterations {
            let m = evaluate_classifier(&fc, &test_pooled, &test.labels, counts)?;
            record.push(event(it, Some(loss_sum / loss_n as f64), &m));
            (loss_sum, loss_n) = (0.0, 0);
            if m.overall > best.0.overall {
                best = (m.clone(), fc.clone(), it);
            }
            last_metrics = m;
        }
    }
    let with_fc = |fc: Classifier<f32>| ModelParams {
        fc,
        ..params.clone()
    };
    let outcome = Phase2Outcome {
        last: with_fc(fc),
        best: with_fc(best.1),
        best_iteration: best.2,
        initial_metrics,
        last_metrics,
        best_metrics: best.0,
        split,
        record,
        skipped,
        fallbacks,
    };
    if let Some(dir) = out {
        outcome.last.save_checkpoint(&dir.join("checkpoint_last"))?;
        outcome.best.save_checkpoint(&dir.join("checkpoint_best"))?;
        outcome.record.save(&dir.join(RUN_LOG))?;
        if p2.dump_batches {
            write_atomic(&dir.join(BATCH_DUMP), dump.as_bytes())?;
        }
        let summary = serde_json::json!({
            "arm": arm,
            "best_iteration": outcome.best_iteration,
            "skipped_syntheses": outcome.skipped,
            "mask_fallbacks": outcome.fallbacks,
            "split": outcome.split,
            "initial": outcome.initial_metrics,
            "last": outcome.last_metrics,
            "best": outcome.best_metrics,
        });
        write_atomic(&dir.join(METRICS_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    }
    Ok(outcome)
}
