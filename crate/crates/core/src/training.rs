//! Loss, target normalization, Adam, the plateau schedule and the epoch loop.

use std::time::Instant;

use eqgat_autodiff::{finite_difference_check, GradCheckReport, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MoleculeRecord, TrainConfig};
use crate::error::{EqgatError, Result};
use crate::model::{Model, Prepared};
use crate::params::{Bound, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// A prepared molecule with its raw (unnormalized) target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub prepared: Prepared,
    pub target: f64,
}

/// Builds graphs once per molecule and extracts the named target.
pub fn prepare_samples(model: &Model, records: &[MoleculeRecord], target: &str) -> Result<Vec<Sample>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let value = *r
                .targets
                .get(target)
                .ok_or_else(|| EqgatError::Dataset(format!("molecule {i} has no target `{target}`")))?;
            Ok(Sample {
                prepared: model.prepare(&r.cloud)?,
                target: value,
            })
        })
        .collect()
}

pub fn mae_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(EqgatError::Dataset(format!(
            "mae needs equal non-empty inputs, got {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// `z = (y - mean) / mad`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetNormalizer {
    pub mean: f64,
    pub mad: f64,
}

impl TargetNormalizer {
    pub fn identity() -> Self {
        Self { mean: 0.0, mad: 1.0 }
    }

    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(EqgatError::Dataset("cannot fit a normalizer to no targets".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mad = values.iter().map(|y| (y - mean).abs()).sum::<f64>() / n;
        if !(mad > 0.0) || !mad.is_finite() {
            return Err(EqgatError::Dataset(format!(
                "targets have mean absolute deviation {mad}; normalization needs spread"
            )));
        }
        Ok(Self { mean, mad })
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.mad
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.mad + self.mean
    }
}

/// Bias-corrected Adam over every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.values().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Every gradient is checked before any parameter moves.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(EqgatError::Shape {
                what: "adam gradient list".into(),
                expected: vec![self.m.len()],
                actual: vec![grads.len()],
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(EqgatError::Shape {
                    what: format!("gradient of `{name}`"),
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(EqgatError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.values_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// validations without a strict improvement on the best value so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Records one validation and returns whether `lr` was reduced.
    pub fn observe(&mut self, metric: f64, lr: &mut f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.bad = 0;
            return false;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            *lr *= self.factor;
            self.bad = 0;
            return true;
        }
        false
    }
}

/// `|f(x) - z|` for one molecule and normalized target `z`.
pub fn molecule_loss(model: &Model, tape: &mut Tape, p: &Bound, sample: &Prepared, z: f64) -> Result<Var> {
    let out = model.forward(tape, p, sample)?;
    let diff = tape.shift(out.prediction, -z)?;
    Ok(tape.abs(diff)?)
}

/// Loss and parameter gradients for one molecule.
pub fn loss_and_gradients(model: &Model, sample: &Sample, normalizer: &TargetNormalizer) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let loss = molecule_loss(
        model,
        &mut tape,
        &p,
        &sample.prepared,
        normalizer.normalize(sample.target),
    )?;
    let value = tape.value(loss).item().expect("scalar loss");
    let mut grads = tape.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.params().values())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// Mean loss and mean gradient over a batch. Molecules run in parallel; the
/// reduction runs in batch order, so the result does not depend on threading.
pub fn batch_gradients(model: &Model, batch: &[&Sample], normalizer: &TargetNormalizer) -> Result<(f64, Vec<Tensor>)> {
    let per_molecule: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|s| loss_and_gradients(model, s, normalizer))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_molecule.into_iter();
    let (mut loss, mut total) = iter.next().ok_or_else(|| EqgatError::Dataset("empty batch".into()))?;
    for (l, grads) in iter {
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for t in &mut total {
        t.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    Ok((loss * scale, total))
}

/// Central-difference check of `|f(x) - target|` against the tape gradient, over
/// every parameter of `model`.
pub fn loss_gradcheck(
    model: &Model,
    prepared: &Prepared,
    target: f64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let leaves: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .map(|(name, t)| (name.to_string(), t.clone()))
        .collect();
    finite_difference_check(
        |tape: &mut Tape, vars: &[Var]| {
            let p = Bound::from_vars(vars.to_vec());
            molecule_loss(model, tape, &p, prepared, target)
        },
        &leaves,
        step,
        tolerance,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mae_normalized: f64,
    pub mae_original_units: f64,
}

/// MAE of denormalized predictions against raw targets.
pub fn evaluate(model: &Model, samples: &[Sample], normalizer: &TargetNormalizer) -> Result<Evaluation> {
    let preds: Vec<f64> = samples
        .par_iter()
        .map(|s| model.predict_prepared(&s.prepared))
        .collect::<Result<_>>()?;
    let original: Vec<f64> = preds.iter().map(|&z| normalizer.denormalize(z)).collect();
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let normalized: Vec<f64> = targets.iter().map(|&y| normalizer.normalize(y)).collect();
    Ok(Evaluation {
        mae_normalized: mae_loss(&preds, &normalized)?,
        mae_original_units: mae_loss(&original, &targets)?,
    })
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub mae_normalized: f64,
    pub mae_original_units: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub normalizer: TargetNormalizer,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val: Evaluation,
    pub epochs_run: usize,
    pub steps: u64,
    pub final_lr: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// validation epoch.
///
/// The train split is reshuffled every epoch. The reported train MAE is the
/// mean loss over the epoch's batches at the parameters each batch saw.
/// `on_record` receives every log line as it is produced.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    seed: u64,
    mut on_record: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(EqgatError::Dataset(
            "train and validation splits must be non-empty".into(),
        ));
    }
    let targets: Vec<f64> = train_set.iter().map(|s| s.target).collect();
    let normalizer = TargetNormalizer::fit(&targets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(model.params(), config.lr);
    let mut plateau = Plateau::new(config.lr_patience, config.lr_decay);
    let start = Instant::now();

    let mut best: Option<(usize, Evaluation, ParamStore)> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let lr = adam.lr;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(model, &batch, &normalizer)?;
            loss_sum += loss * batch.len() as f64;
            adam.step(model.params_mut(), &grads)?;
        }
        let train_mae = loss_sum / train_set.len() as f64;
        let val = evaluate(model, val_set, &normalizer)?;
        let wall = start.elapsed().as_secs_f64();
        for (split, norm, orig) in [
            ("train", train_mae, train_mae * normalizer.mad),
            ("val", val.mae_normalized, val.mae_original_units),
        ] {
            let record = EpochRecord {
                epoch,
                split: split.into(),
                mae_normalized: norm,
                mae_original_units: orig,
                lr,
                wall_seconds: wall,
            };
            on_record(&record)?;
            history.push(record);
        }

        let improved = best
            .as_ref()
            .is_none_or(|(_, b, _)| val.mae_normalized < b.mae_normalized);
        if improved {
            best = Some((epoch, val, model.params().clone()));
        }
        plateau.observe(val.mae_normalized, &mut adam.lr);
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= config.early_stopping_patience {
            break;
        }
    }

    let (best_epoch, best_val, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    Ok(TrainOutcome {
        normalizer,
        best_epoch,
        best_val,
        epochs_run,
        steps: adam.steps(),
        final_lr: adam.lr,
        history,
    })
}
