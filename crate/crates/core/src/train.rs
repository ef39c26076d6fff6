//! Training loop, evaluation and metric logs.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, step_decay, AdamState, Mode};
use crate::cpl::{count_distinct_stats, DistinctStats, DistinctTally};
use crate::data::{batch_iter, Dataset, LabeledSample};
use crate::error::{Error, Result};
use crate::geometry::{augment, AugmentParams, PointCloud};
use crate::network::{
    argmax, instance_accuracy, mean_iou, shape_iou, vote_scores, ModelConfig, NetworkParams, Task, VOTE_SCALE,
};

/// Optimization recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub augment: AugmentParams,
    pub seed: u64,
}

impl TrainConfig {
    pub fn classification(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 16,
            lr: 0.001,
            lr_decay: 0.7,
            decay_every: 23,
            augment: AugmentParams::classification(),
            seed,
        }
    }

    pub fn segmentation(epochs: usize, seed: u64) -> Self {
        Self {
            augment: AugmentParams::segmentation(),
            ..Self::classification(epochs, seed)
        }
    }

    pub fn for_task(task: Task, epochs: usize, seed: u64) -> Self {
        match task {
            Task::Classify => Self::classification(epochs, seed),
            Task::Segment => Self::segmentation(epochs, seed),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay(epoch, self.lr, self.lr_decay, self.decay_every)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr) || !positive(self.lr_decay) || self.decay_every == 0 {
            return Err(Error::config("lr, lr_decay and decay_every must be positive"));
        }
        self.augment.validate().map_err(|e| Error::config(e.to_string()))
    }
}

/// One row of the per-epoch metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Test accuracy (classification) or instance mIoU (segmentation).
    pub test_metric: f64,
    /// Distinct critical points over all training clouds of the epoch.
    pub mprime: Option<DistinctStats>,
}

/// Distinct-center statistics of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub mprime: DistinctStats,
    /// Smallest cloud in the batch.
    pub min_points: usize,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,test_metric,mprime_mean,mprime_max,mprime_min";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{},{}", self.epoch, self.lr, self.train_loss, self.test_metric);
        match &self.mprime {
            Some(m) => {
                let _ = write!(s, ",{},{},{}", m.mean, m.max, m.min);
            }
            None => s.push_str(",,,"),
        }
        s
    }
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub struct TrainOutcome {
    pub params: NetworkParams<f32>,
    pub adam: AdamState<f32>,
    pub log: Vec<EpochLog>,
    pub steps: Vec<StepRecord>,
}

fn labels_of(samples: &[&LabeledSample], task: Task) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut shape = Vec::with_capacity(samples.len());
    let mut rows = Vec::new();
    for s in samples {
        let c = s
            .shape_label
            .ok_or_else(|| Error::Data("sample without shape label".into()))?;
        shape.push(c);
        if task == Task::Segment {
            let p = s
                .part_labels
                .as_ref()
                .ok_or_else(|| Error::Data("segmentation sample without part labels".into()))?;
            rows.extend_from_slice(p);
        }
    }
    Ok((shape, rows))
}

/// Checks that the dataset fits the model's label ranges.
pub fn check_dataset(config: &ModelConfig, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let all = ds.train.iter().chain(&ds.test);
    for s in all {
        match config.task {
            Task::Classify => {
                if s.shape_label.is_some_and(|c| c >= config.class_count) {
                    return Err(Error::Data(format!(
                        "shape label beyond the model's {} classes",
                        config.class_count
                    )));
                }
            }
            Task::Segment => {
                if s.shape_label.is_some_and(|c| c >= config.object_classes) {
                    return Err(Error::Data("object class beyond object_classes".into()));
                }
                let parts = s
                    .part_labels
                    .as_ref()
                    .ok_or_else(|| Error::Data("segmentation sample without part labels".into()))?;
                if parts.iter().any(|&p| p >= config.class_count) {
                    return Err(Error::Data(format!("part label beyond {} parts", config.class_count)));
                }
            }
        }
        if s.cloud.len() < config.k {
            return Err(Error::Data(format!(
                "cloud of {} points is smaller than k = {}",
                s.cloud.len(),
                config.k
            )));
        }
    }
    Ok(())
}

/// Trains from scratch. Every random draw (initialization, shuffling,
/// augmentation, dropout) comes from one generator seeded by
/// `train.seed`, so equal inputs give bit-identical outcomes.
///
/// `on_epoch` sees every log row as soon as it is complete.
pub fn train(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    ds: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    config.validate()?;
    check_dataset(config, ds)?;
    if ds.train.is_empty() && train_cfg.epochs > 0 {
        return Err(Error::Data("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut params = NetworkParams::<f32>::init(config, &mut rng)?;
    let mut adam = AdamState::new(params.shapes(), train_cfg.lr);
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut steps = Vec::new();
    let parts = ds.parts_per_class();

    for epoch in 0..train_cfg.epochs {
        let lr = train_cfg.lr_at(epoch);
        adam.lr = lr;
        let mut tally = DistinctTally::default();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (step, batch) in batch_iter(ds.train.len(), train_cfg.batch_size, true, &mut rng)?
            .into_iter()
            .enumerate()
        {
            let samples: Vec<&LabeledSample> = batch.iter().map(|&i| &ds.train[i]).collect();
            let clouds: Vec<PointCloud> = samples
                .iter()
                .map(|s| augment(&s.cloud, &train_cfg.augment, &mut rng))
                .collect::<Result<_>>()?;
            let refs: Vec<&PointCloud> = clouds.iter().collect();
            let (shape, part_rows) = labels_of(&samples, config.task)?;
            let mut pass = match config.task {
                Task::Classify => params.forward_classify(&refs, Mode::Train, &mut rng)?,
                Task::Segment => params.forward_segment(&refs, &shape, Mode::Train, &mut rng)?,
            };
            let targets = if config.task == Task::Classify {
                &shape
            } else {
                &part_rows
            };
            let loss = pass.loss(targets)?;
            let value = pass.tape.value(loss)[[0, 0]] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value} at epoch {epoch}, step {step}")));
            }
            pass.tape.backward(loss)?;
            let grads = params.grads(&pass);
            params.apply_bn_updates(&pass);
            adam_step(params.tensors_mut(), &grads, &mut adam)?;
            if !pass.cpl.is_empty() {
                tally.add(&pass.cpl);
                steps.push(StepRecord {
                    epoch,
                    step,
                    mprime: count_distinct_stats(&pass.cpl)?,
                    min_points: refs.iter().map(|c| c.len()).min().unwrap(),
                });
            }
            loss_sum += value * samples.len() as f64;
            seen += samples.len();
        }
        let test_metric = match config.task {
            Task::Classify => evaluate_classification(&params, &ds.test, train_cfg.batch_size)?.accuracy,
            Task::Segment => evaluate_segmentation(&params, &ds.test, &parts, train_cfg.batch_size)?.miou,
        };
        let row = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            test_metric,
            mprime: tally.stats(),
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainOutcome {
        params,
        adam,
        log,
        steps,
    })
}

/// Classification results on a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEval {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// One probability row per sample.
    pub probabilities: Vec<Vec<f64>>,
}

/// Plain eval-mode classification, batched.
pub fn evaluate_classification(
    params: &NetworkParams<f32>,
    samples: &[LabeledSample],
    batch_size: usize,
) -> Result<ClassEval> {
    let mut probabilities = Vec::with_capacity(samples.len());
    // Eval passes consume no randomness.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PointCloud> = chunk.iter().map(|s| &s.cloud).collect();
        let pass = params.forward_classify(&refs, Mode::Eval, &mut rng)?;
        probabilities.extend(pass.probabilities().rows().into_iter().map(|r| r.to_vec()));
    }
    finish_class_eval(samples, probabilities)
}

fn finish_class_eval(samples: &[LabeledSample], probabilities: Vec<Vec<f64>>) -> Result<ClassEval> {
    let predictions: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let accuracy = if samples.is_empty() {
        0.0
    } else {
        let (truth, _) = labels_of(&samples.iter().collect::<Vec<_>>(), Task::Classify)?;
        instance_accuracy(&predictions, &truth)?
    };
    Ok(ClassEval {
        accuracy,
        predictions,
        probabilities,
    })
}

/// Generator for the voting copies of sample `index`. Independent of
/// evaluation order, so parallel evaluation matches sequential.
pub fn vote_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Voted class probabilities of one sample.
pub fn vote_sample(
    params: &NetworkParams<f32>,
    sample: &LabeledSample,
    votes: usize,
    seed: u64,
    index: usize,
) -> Result<Vec<f64>> {
    let scores = vote_scores(&sample.cloud, params, votes, VOTE_SCALE, &mut vote_rng(seed, index))?;
    Ok(scores.mean_axis(ndarray::Axis(0)).unwrap().to_vec())
}

/// Classification with test-time voting.
pub fn evaluate_classification_voted(
    params: &NetworkParams<f32>,
    samples: &[LabeledSample],
    votes: usize,
    seed: u64,
) -> Result<ClassEval> {
    let probabilities = samples
        .iter()
        .enumerate()
        .map(|(i, s)| vote_sample(params, s, votes, seed, i))
        .collect::<Result<Vec<_>>>()?;
    finish_class_eval(samples, probabilities)
}

/// Assembles a [`ClassEval`] from precomputed probability rows.
pub fn class_eval_from(samples: &[LabeledSample], probabilities: Vec<Vec<f64>>) -> Result<ClassEval> {
    finish_class_eval(samples, probabilities)
}

/// Segmentation results on a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct SegEval {
    pub miou: f64,
    pub shape_ious: Vec<f64>,
    /// Predicted part per point, per sample.
    pub predictions: Vec<Vec<usize>>,
}

/// Per-point argmax restricted to the parts of the sample's object class,
/// as in the usual part segmentation evaluation.
pub fn evaluate_segmentation(
    params: &NetworkParams<f32>,
    samples: &[LabeledSample],
    parts_per_class: &[Vec<usize>],
    batch_size: usize,
) -> Result<SegEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut predictions = Vec::with_capacity(samples.len());
    let mut shape_ious = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let (shape, _) = labels_of(&refs, Task::Segment)?;
        let clouds: Vec<&PointCloud> = chunk.iter().map(|s| &s.cloud).collect();
        let pass = params.forward_segment(&clouds, &shape, Mode::Eval, &mut rng)?;
        let probs = pass.probabilities();
        for (b, s) in chunk.iter().enumerate() {
            let allowed = parts_per_class
                .get(shape[b])
                .ok_or_else(|| Error::Data(format!("no part list for class {}", shape[b])))?;
            let pred = restricted_argmax(&probs, pass.cloud_rows(b), allowed);
            shape_ious.push(shape_iou(&pred, s.part_labels.as_ref().unwrap(), allowed)?);
            predictions.push(pred);
        }
    }
    let miou = if shape_ious.is_empty() {
        0.0
    } else {
        mean_iou(&shape_ious)?
    };
    Ok(SegEval {
        miou,
        shape_ious,
        predictions,
    })
}

/// Row-wise argmax over the `allowed` columns only.
pub fn restricted_argmax(probs: &ndarray::Array2<f64>, rows: std::ops::Range<usize>, allowed: &[usize]) -> Vec<usize> {
    rows.map(|r| {
        let scores: Vec<f64> = allowed.iter().map(|&p| probs[[r, p]]).collect();
        allowed[argmax(&scores)]
    })
    .collect()
}

/// Draws a fresh seed from a generator, for deriving independent runs.
pub fn derive_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.random()
}
