//! Stratified k-fold training and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{EetError, Result};
use crate::layout::Feature4D;
use crate::model::{forward, loss_and_gradients, predict, EetConfig, EetParams};
use crate::optim::{Adam, Schedule};
use crate::params::ParamSet;
use crate::rng;

/// Inputs and labels held in memory for training.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub inputs: Vec<Feature4D>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(inputs: Vec<Feature4D>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(EetError::contract(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Per-feature z-scoring fitted on training data. A feature is one
/// (band, row, col) cell pooled over samples and seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(inputs: &[Feature4D]) -> Result<Self> {
        let first = inputs
            .first()
            .ok_or_else(|| EetError::contract("cannot standardize an empty set"))?;
        let shape = first.shape();
        let width = shape[1] * shape[2] * shape[3];
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut count = 0usize;
        for x in inputs {
            if x.shape() != shape {
                return Err(EetError::Shape {
                    op: "standardize",
                    left: shape.to_vec(),
                    right: x.shape().to_vec(),
                });
            }
            for slice in x.values().chunks(width) {
                for (k, &v) in slice.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                count += 1;
            }
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n - m * m).max(0.0).sqrt();
                // Constant cells (unassigned grid positions) are only centred.
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &Feature4D) -> Result<Feature4D> {
        let [t, s, v, h] = x.shape();
        if s * v * h != self.mean.len() {
            return Err(EetError::contract(
                "standardizer fitted on a different feature shape",
            ));
        }
        let values = x
            .values()
            .chunks(self.mean.len())
            .flat_map(|slice| {
                slice
                    .iter()
                    .zip(self.mean.iter().zip(&self.scale))
                    .map(|(x, (m, sd))| (x - m) / sd)
            })
            .collect();
        Feature4D::new(t, s, v, h, values)
    }

    pub fn apply_all(&self, data: &LabeledSet) -> Result<LabeledSet> {
        let inputs = data
            .inputs
            .iter()
            .map(|x| self.apply(x))
            .collect::<Result<_>>()?;
        LabeledSet::new(inputs, data.labels.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Indices grouped by class, each group shuffled, concatenated in class order.
fn stratified_order(labels: &[usize], seed: u64, label: &str) -> Vec<usize> {
    let mut rng = rng::stream(seed, label);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut order = Vec::with_capacity(labels.len());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        order.extend(members);
    }
    order
}

/// Label-stratified `k`-fold partition. Dealing the class-ordered shuffle
/// round-robin keeps fold sizes within one of each other overall and per class.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(EetError::contract("k-fold needs k >= 2"));
    }
    if labels.len() < k {
        return Err(EetError::contract(format!(
            "{} samples cannot fill {k} folds",
            labels.len()
        )));
    }
    let order = stratified_order(labels, seed, "folds");
    let mut tests = vec![Vec::new(); k];
    for (pos, &i) in order.iter().enumerate() {
        tests[pos % k].push(i);
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..labels.len())
                .filter(|i| test.binary_search(i).is_err())
                .collect();
            Fold { train, test }
        })
        .collect())
}

/// One stratified train/test split with `train_fraction` of each class in training.
pub fn holdout_split(labels: &[usize], train_fraction: f64, seed: u64) -> Result<Fold> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(EetError::contract("train fraction must be in (0, 1)"));
    }
    let mut rng = rng::stream(seed, "holdout");
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let cut = (members.len() as f64 * train_fraction).round() as usize;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(EetError::contract("holdout split leaves an empty side"));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Fold { train, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitMode {
    KFold(usize),
    /// Single stratified split with this fraction used for training.
    Holdout(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub split: SplitMode,
    pub seed: u64,
    /// Z-score features with statistics of each fold's training part.
    pub standardize: bool,
    /// Train folds concurrently. Per-fold results are unchanged.
    #[serde(skip)]
    pub parallel_folds: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            schedule: Schedule::default(),
            split: SplitMode::KFold(5),
            seed: 0,
            standardize: true,
            parallel_folds: false,
        }
    }
}

/// Parameters, optimizer state and schedule position of one training run.
pub struct Trainer {
    pub params: EetParams,
    adam: Adam,
    schedule: Schedule,
    batch_size: usize,
    shuffle: rand_chacha::ChaCha8Rng,
    epoch: usize,
    fold: usize,
}

/// Summary of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub lr: f64,
    pub mean_loss: f64,
    pub accuracy: f64,
}

impl Trainer {
    pub fn new(
        config: &EetConfig,
        schedule: Schedule,
        batch_size: usize,
        seed: u64,
        fold: usize,
    ) -> Result<Self> {
        schedule.validate()?;
        if batch_size == 0 {
            return Err(EetError::config("batch size must be positive"));
        }
        let params =
            EetParams::init_with_seed(config, rng::derive_seed(seed, &format!("fold{fold}/init")))?;
        let adam = Adam::new(params.params());
        Ok(Self {
            params,
            adam,
            schedule,
            batch_size,
            shuffle: rng::stream(seed, &format!("fold{fold}/shuffle")),
            epoch: 0,
            fold,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over `data` in shuffled mini-batches; each batch applies the
    /// mean gradient once.
    pub fn train_epoch(&mut self, data: &LabeledSet) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(EetError::contract("cannot train on an empty set"));
        }
        let lr = self.schedule.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut total_loss = 0.0;
        let mut correct = 0;
        let mut last_grad_norm = 0.0;
        for batch in order.chunks(self.batch_size) {
            let mut sum: Option<ParamSet> = None;
            for &i in batch {
                let step = loss_and_gradients(&self.params, &data.inputs[i], data.labels[i]);
                let (loss, logits, grads) = match step {
                    Ok(v) => v,
                    Err(EetError::NonFinite { .. }) => {
                        return Err(self.diverged(lr, last_grad_norm))
                    }
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    return Err(self.diverged(lr, last_grad_norm));
                }
                total_loss += loss;
                correct += usize::from(predict(&logits) == data.labels[i]);
                match &mut sum {
                    Some(acc) => acc.add_scaled(&grads, 1.0)?,
                    None => sum = Some(grads),
                }
            }
            let mut mean = sum.expect("batches are non-empty");
            for (_, t) in mean.iter_mut() {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v /= batch.len() as f64);
            }
            last_grad_norm = mean.global_norm();
            if !last_grad_norm.is_finite() {
                return Err(self.diverged(lr, last_grad_norm));
            }
            self.adam.step(self.params.params_mut(), &mean, lr)?;
        }
        self.epoch += 1;
        Ok(EpochStats {
            lr,
            mean_loss: total_loss / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        })
    }

    fn diverged(&self, lr: f64, grad_norm: f64) -> EetError {
        EetError::Diverged {
            fold: self.fold,
            epoch: self.epoch,
            lr,
            grad_norm,
        }
    }
}

/// Fraction of `data` classified correctly.
pub fn accuracy(params: &EetParams, data: &LabeledSet) -> Result<f64> {
    if data.is_empty() {
        return Err(EetError::contract("accuracy of an empty set"));
    }
    let mut correct = 0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        correct += usize::from(predict(&forward(params, x)?) == y);
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean training loss of each epoch.
    pub train_loss: Vec<f64>,
}

/// Cross-validation outcome. `std_accuracy` is the population standard
/// deviation of the per-fold test accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config: EetConfig,
    pub options: TrainOptions,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// `(mean, population std)` of `values`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl CvReport {
    pub fn from_folds(config: EetConfig, options: TrainOptions, folds: Vec<FoldReport>) -> Self {
        let accs: Vec<f64> = folds.iter().map(|f| f.test_accuracy).collect();
        let (mean, std) = mean_std(&accs);
        Self {
            seed: options.seed,
            config,
            options,
            folds,
            mean_accuracy: mean,
            std_accuracy: std,
        }
    }

    /// True when the stored mean/std agree with the per-fold values to 1e-12.
    pub fn is_consistent(&self) -> bool {
        let accs: Vec<f64> = self.folds.iter().map(|f| f.test_accuracy).collect();
        let (mean, std) = mean_std(&accs);
        (mean - self.mean_accuracy).abs() <= 1e-12 && (std - self.std_accuracy).abs() <= 1e-12
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EetError::Parse(format!("cv report: {e}")))
    }

    /// `fold,train_size,test_size,train_accuracy,test_accuracy`, one row per fold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,train_size,test_size,train_accuracy,test_accuracy\n");
        for f in &self.folds {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                f.fold, f.train_size, f.test_size, f.train_accuracy, f.test_accuracy
            );
        }
        out
    }
}

fn run_fold(
    config: &EetConfig,
    data: &LabeledSet,
    opts: &TrainOptions,
    k: usize,
    fold: &Fold,
) -> Result<(FoldReport, Checkpoint)> {
    let mut train = data.subset(&fold.train);
    let mut test = data.subset(&fold.test);
    let standardizer = if opts.standardize {
        let z = Standardizer::fit(&train.inputs)?;
        train = z.apply_all(&train)?;
        test = z.apply_all(&test)?;
        Some(z)
    } else {
        None
    };
    let mut trainer = Trainer::new(config, opts.schedule.clone(), opts.batch_size, opts.seed, k)?;
    let mut curve = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        curve.push(trainer.train_epoch(&train)?.mean_loss);
    }
    let report = FoldReport {
        fold: k,
        train_size: train.len(),
        test_size: test.len(),
        train_accuracy: accuracy(&trainer.params, &train)?,
        test_accuracy: accuracy(&trainer.params, &test)?,
        train_loss: curve,
    };
    Ok((
        report,
        Checkpoint {
            model: trainer.params,
            standardizer,
        },
    ))
}

/// Trains one model per fold from a fold-specific seed and reports test accuracy.
pub fn train(config: &EetConfig, data: &LabeledSet, opts: &TrainOptions) -> Result<CvReport> {
    train_with_models(config, data, opts).map(|(report, _)| report)
}

/// As [`train`], also returning each fold's final model.
pub fn train_with_models(
    config: &EetConfig,
    data: &LabeledSet,
    opts: &TrainOptions,
) -> Result<(CvReport, Vec<Checkpoint>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(EetError::contract("dataset is empty"));
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= config.classes) {
        return Err(EetError::contract(format!(
            "label {bad} outside 0..{}",
            config.classes
        )));
    }
    let folds = match opts.split {
        SplitMode::KFold(k) => kfold_split(&data.labels, k, opts.seed)?,
        SplitMode::Holdout(frac) => vec![holdout_split(&data.labels, frac, opts.seed)?],
    };
    let results: Vec<(FoldReport, Checkpoint)> = if opts.parallel_folds {
        folds
            .par_iter()
            .enumerate()
            .map(|(k, f)| run_fold(config, data, opts, k, f))
            .collect::<Result<_>>()?
    } else {
        folds
            .iter()
            .enumerate()
            .map(|(k, f)| run_fold(config, data, opts, k, f))
            .collect::<Result<_>>()?
    };
    let (reports, models) = results.into_iter().unzip();
    Ok((
        CvReport::from_folds(config.clone(), opts.clone(), reports),
        models,
    ))
}
