//! Optimization: binary cross-entropy, Adam with step decay, mini-batch
//! training, the train/test split and the classification metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{decide, ArnnModel, Segment, DEFAULT_DROPOUT};
use crate::numerics::{Matrix, Rng};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub epochs: usize,
    pub dropout_p: f64,
    pub seed: u64,
    /// Fraction of the dataset used for training.
    pub split: f64,
    /// Print per-batch losses to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            lr0: 1e-3,
            decay_factor: 0.1,
            decay_every: 10,
            epochs: 30,
            dropout_p: DEFAULT_DROPOUT,
            seed: 0,
            split: 0.75,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Param(format!("learning rate must be finite and non-negative, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Param(format!("decay factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Param("batch size and decay interval must be at least 1".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Param(format!("split must be in (0, 1), got {}", self.split)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Param(format!("dropout probability must be in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }
}

/// Step-decayed learning rate: `lr0 · decay^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * config.decay_factor.powi((epoch / config.decay_every) as i32)
}

/// Binary cross-entropy of one prediction, with `prob` clamped away from 0 and 1.
pub fn bce_loss(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `∂ BCE / ∂ logit` for a sigmoid output.
pub fn bce_grad_logit(prob: f64, label: u8) -> f64 {
    prob - f64::from(label)
}

pub fn bce_batch(pairs: &[(f64, u8)]) -> f64 {
    pairs.iter().map(|&(p, y)| bce_loss(p, y)).sum::<f64>() / pairs.len() as f64
}

/// First and second moment estimates for every model tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &ArnnModel) -> Self {
        let zeros = || model.params().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }

    /// One bias-corrected Adam update from the accumulated gradients. Gradients are left untouched.
    pub fn step(&mut self, model: &mut ArnnModel, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, m), v) in model.params_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let w = p.value.data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Confusion counts and the derived micro-averaged scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    /// Scores from counts; precision, recall and F1 are 0 when undefined.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            tp,
            fp,
            fn_,
            tn,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            f1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (label, pred) in pairs {
            match (label, pred) {
                (1, 1) => tp += 1,
                (0, 1) => fp += 1,
                (1, 0) => fn_ += 1,
                _ => tn += 1,
            }
        }
        Metrics::from_counts(tp, fp, fn_, tn)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: u8,
    pub prob: f64,
    pub pred: u8,
}

/// Eval-mode predictions at threshold 0.5.
pub fn predict_all(model: &ArnnModel, set: &[Segment]) -> Result<Vec<Prediction>> {
    let mut rng = Rng::seed(0);
    set.iter()
        .map(|seg| {
            let prob = model.forward(&seg.data, false, &mut rng)?.prob;
            Ok(Prediction {
                id: seg.id.clone(),
                label: seg.label,
                prob,
                pred: decide(prob, 0.5),
            })
        })
        .collect()
}

pub fn evaluate(model: &ArnnModel, test: &[Segment]) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::data("<test set>", None, "cannot evaluate on an empty set"));
    }
    let preds = predict_all(model, test)?;
    Ok(Metrics::from_pairs(preds.iter().map(|p| (p.label, p.pred))))
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Segment>,
    pub test: Vec<Segment>,
    pub warning: Option<String>,
}

/// Seeded shuffle, then the first `N − ⌊(1 − split)·N⌋` segments train and the rest test.
pub fn split_train_test(dataset: &[Segment], split: f64, seed: u64) -> Result<Split> {
    if dataset.is_empty() {
        return Err(Error::data("<dataset>", None, "cannot split an empty dataset"));
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Param(format!("split must be in (0, 1), got {split}")));
    }
    let n = dataset.len();
    let n_test = ((1.0 - split) * n as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    Rng::seed(seed).shuffle(&mut order);
    let (train_idx, test_idx) = order.split_at(n - n_test);
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
    let warning = (n_test == 0).then(|| {
        format!("dataset of {n} segment(s) leaves no test segments at split {split}")
    });
    Ok(Split {
        train: pick(train_idx),
        test: pick(test_idx),
        warning,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// `None` when the test set is empty.
    pub test: Option<Metrics>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// `epoch,lr,train_loss,test_accuracy,test_f1`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,test_accuracy,test_f1\n");
        for r in &self.epochs {
            let (acc, f1) = r
                .test
                .map(|m| (m.accuracy.to_string(), m.f1.to_string()))
                .unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", r.epoch, r.lr, r.train_loss, acc, f1).expect("string write");
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

fn check_segments(model: &ArnnModel, set: &[Segment], which: &str) -> Result<()> {
    let want = (model.config.c, model.config.n);
    for (i, seg) in set.iter().enumerate() {
        if seg.data.shape() != want {
            return Err(Error::Config(format!(
                "{which} segment {i} ({}) has shape {:?}, model expects {want:?}",
                seg.id,
                seg.data.shape()
            )));
        }
        if seg.label > 1 {
            return Err(Error::Config(format!("{which} segment {i} has label {}", seg.label)));
        }
    }
    Ok(())
}

/// Accumulates the mean-loss gradient of `batch` into the model and returns the per-example losses.
pub fn accumulate_batch(model: &mut ArnnModel, batch: &[&Segment], training: bool, rng: &mut Rng) -> Result<Vec<f64>> {
    let scale = 1.0 / batch.len() as f64;
    let mut losses = Vec::with_capacity(batch.len());
    for seg in batch {
        let fwd = model.forward_recorded(&seg.data, training, rng)?;
        losses.push(bce_loss(fwd.prob, seg.label));
        model.backward(&fwd, scale * bce_grad_logit(fwd.prob, seg.label))?;
    }
    Ok(losses)
}

/// Mini-batch Adam training. The model's dropout probability is taken from `config`.
pub fn train(model: &mut ArnnModel, train_set: &[Segment], test_set: &[Segment], config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("<train set>", None, "no training segments"));
    }
    check_segments(model, train_set, "train")?;
    check_segments(model, test_set, "test")?;
    model.config.dropout_p = config.dropout_p;

    let mut rng = Rng::seed(config.seed);
    let mut adam = AdamState::new(model);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Segment> = chunk.iter().map(|&i| &train_set[i]).collect();
            model.zero_grads();
            let losses = accumulate_batch(model, &batch, true, &mut rng)?;
            adam.step(model, lr);
            let sum: f64 = losses.iter().sum();
            if config.verbose {
                eprintln!("epoch {epoch} batch {b}: loss {:.6}", sum / losses.len() as f64);
            }
            total += sum;
        }
        let test = if test_set.is_empty() {
            None
        } else {
            Some(evaluate(model, test_set)?)
        };
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: total / train_set.len() as f64,
            test,
        });
    }
    model.zero_grads();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bce_examples() {
        assert_abs_diff_eq!(bce_loss(0.5, 1), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(bce_loss(1.0 - 1e-12, 1) < 1.1e-12);
        assert!(bce_loss(1.0, 0).is_finite());
        assert_abs_diff_eq!(bce_batch(&[(0.9, 1), (0.2, 0)]), 0.164252, epsilon = 1e-5);
        assert_abs_diff_eq!(bce_grad_logit(0.8, 0), 0.8);
    }

    #[test]
    fn bce_logit_gradient_matches_finite_difference() {
        let logit: f64 = 0.37;
        let f = |z: f64| bce_loss(1.0 / (1.0 + (-z).exp()), 1);
        let fd = (f(logit + 1e-6) - f(logit - 1e-6)) / 2e-6;
        let p = 1.0 / (1.0 + (-logit).exp());
        assert_abs_diff_eq!(bce_grad_logit(p, 1), fd, epsilon = 1e-8);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_abs_diff_eq!(lr_at(0, &cfg), 1e-3, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at(10, &cfg), 1e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at(29, &cfg), 1e-5, epsilon = 1e-18);
        for e in 1..60 {
            assert!(lr_at(e, &cfg) <= lr_at(e - 1, &cfg));
            if e % 10 != 0 {
                assert_eq!(lr_at(e, &cfg), lr_at(e - 1, &cfg));
            } else {
                assert!(lr_at(e, &cfg) < lr_at(e - 1, &cfg));
            }
        }
    }

    fn tiny_model() -> ArnnModel {
        ArnnModel::new(ModelConfig::new(2, 8, 2, 2, 0.0).unwrap(), 3)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut model = tiny_model();
        let before = model.head_b.value[(0, 0)];
        model.head_b.grad[(0, 0)] = -3.7;
        let mut adam = AdamState::new(&model);
        adam.step(&mut model, 1e-3);
        let delta = model.head_b.value[(0, 0)] - before;
        assert!((delta - 1e-3).abs() < 1e-6 * 1e-3 + 1e-11, "{delta}");
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut model = tiny_model();
        let before = model.clone();
        let mut adam = AdamState::new(&model);
        adam.step(&mut model, 1e-3);
        assert_eq!(model, before);
    }

    #[test]
    fn adam_two_steps_match_scalar_reference() {
        let mut model = tiny_model();
        let w0 = model.head_w.value[(0, 1)];
        let g = 0.25;
        let mut adam = AdamState::new(&model);
        for _ in 0..2 {
            model.zero_grads();
            model.head_w.grad[(0, 1)] = g;
            adam.step(&mut model, 0.01);
        }
        // scalar reference
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, w0);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert_abs_diff_eq!(model.head_w.value[(0, 1)], w, epsilon = 1e-15);
    }

    #[test]
    fn metrics_from_confusion() {
        let m = Metrics::from_counts(2, 1, 1, 6);
        assert_abs_diff_eq!(m.accuracy, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(m.precision, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.recall, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.f1, 2.0 / 3.0, epsilon = 1e-15);
        let perfect = Metrics::from_pairs([(1, 1), (0, 0), (1, 1)]);
        assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));
    }

    fn segments(n: usize) -> Vec<Segment> {
        (0..n)
            .map(|i| Segment::new(format!("s{i}"), Matrix::filled(1, 4, i as f64), (i % 2) as u8))
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let data = segments(100);
        let s = split_train_test(&data, 0.75, 9).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (75, 25));
        assert!(s.warning.is_none());
        let mut ids: Vec<_> = s.train.iter().chain(&s.test).map(|x| x.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        let again = split_train_test(&data, 0.75, 9).unwrap();
        assert_eq!(again.train, s.train);

        let one = split_train_test(&segments(1), 0.75, 1).unwrap();
        assert_eq!((one.train.len(), one.test.len()), (1, 0));
        assert!(one.warning.is_some());
        assert!(split_train_test(&[], 0.75, 1).is_err());
    }

    #[test]
    fn evaluate_rejects_empty() {
        assert!(matches!(evaluate(&tiny_model(), &[]), Err(Error::Data { .. })));
    }

    #[test]
    fn batch_gradient_is_mean_of_example_gradients() {
        let mut model = tiny_model();
        let mut rng = Rng::seed(4);
        let data: Vec<Segment> = (0..4)
            .map(|i| Segment::new(format!("{i}"), Matrix::uniform(2, 8, 1.0, &mut rng), (i % 2) as u8))
            .collect();
        let refs: Vec<&Segment> = data.iter().collect();
        model.zero_grads();
        accumulate_batch(&mut model, &refs, false, &mut rng).unwrap();
        let batch: Vec<Matrix> = model.params().map(|p| p.grad.clone()).collect();

        let mut mean: Vec<Matrix> = model.params().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        for seg in &data {
            model.zero_grads();
            accumulate_batch(&mut model, &[seg], false, &mut rng).unwrap();
            for (acc, p) in mean.iter_mut().zip(model.params()) {
                acc.add_assign(&p.grad.scale(0.25)).unwrap();
            }
        }
        for (a, b) in batch.iter().zip(&mean) {
            assert!(a.max_abs_diff(b) < 1e-10);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_fixed_point() {
        let mut model = tiny_model();
        let before = model.clone();
        let mut rng = Rng::seed(5);
        let data: Vec<Segment> = (0..6)
            .map(|i| Segment::new(format!("{i}"), Matrix::uniform(2, 8, 1.0, &mut rng), (i % 2) as u8))
            .collect();
        let cfg = TrainConfig {
            lr0: 0.0,
            epochs: 3,
            dropout_p: 0.0,
            ..TrainConfig::default()
        };
        let log = train(&mut model, &data, &data[..2], &cfg).unwrap();
        assert_eq!(model.cell, before.cell);
        assert_eq!(model.head_w, before.head_w);
        let losses: Vec<f64> = log.epochs.iter().map(|e| e.train_loss).collect();
        assert!(losses.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-15), "{losses:?}");
    }

    #[test]
    fn train_rejects_misshapen_segment() {
        let mut model = tiny_model();
        let mut data = vec![Segment::new("ok", Matrix::zeros(2, 8), 0); 3];
        data.push(Segment::new("bad", Matrix::zeros(2, 6), 1));
        let err = train(&mut model, &data, &[], &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("segment 3"), "{err}");
    }

    #[test]
    fn log_csv_layout() {
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 0,
                lr: 0.001,
                train_loss: 0.5,
                test: Some(Metrics::from_counts(1, 0, 0, 1)),
            }],
        };
        assert_eq!(log.to_csv(), "epoch,lr,train_loss,test_accuracy,test_f1\n0,0.001,0.5,1,1\n");
    }
}
