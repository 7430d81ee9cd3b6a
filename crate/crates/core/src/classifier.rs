//! Linear multinomial (softmax) classifiers trained by mini-batch gradient
//! descent with momentum and held-out early stopping.
//!
//! The same machinery backs the part appearance models, the root object
//! scorer and the viewpoint classifier.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;

/// Which model a classifier plays in the curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassifierRole {
    A0,
    A1,
    A2,
    A3,
    Root,
    Viewpoint,
}

impl ClassifierRole {
    pub fn code(self) -> u8 {
        match self {
            ClassifierRole::A0 => 0,
            ClassifierRole::A1 => 1,
            ClassifierRole::A2 => 2,
            ClassifierRole::A3 => 3,
            ClassifierRole::Root => 4,
            ClassifierRole::Viewpoint => 5,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ClassifierRole::A0,
            1 => ClassifierRole::A1,
            2 => ClassifierRole::A2,
            3 => ClassifierRole::A3,
            4 => ClassifierRole::Root,
            5 => ClassifierRole::Viewpoint,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub l2_penalty: f64,
    /// Number of held-out evaluations without improvement before stopping.
    pub early_stop_patience: usize,
    /// Iterations between held-out evaluations.
    pub eval_interval: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            max_iterations: 1000,
            batch_size: 32,
            l2_penalty: 1e-4,
            early_stop_patience: 5,
            eval_interval: 50,
            momentum: 0.99,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("train.learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size must be > 0"));
        }
        if !(self.l2_penalty >= 0.0) {
            return Err(Error::invalid("train.l2_penalty must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train.momentum must be in [0,1)"));
        }
        if self.eval_interval == 0 {
            return Err(Error::invalid("train.eval_interval must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: FeatureVector,
    pub label: usize,
}

impl Sample {
    pub fn new(features: FeatureVector, label: usize) -> Self {
        Sample { features, label }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartClassifier {
    pub role: ClassifierRole,
    pub class_count: usize,
    pub dim: usize,
    pub has_background_class: bool,
    /// Row-major `class_count x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Loss curve and stopping point of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Held-out loss at each evaluation.
    pub holdout_curve: Vec<f64>,
    /// Training loss at each evaluation.
    pub train_curve: Vec<f64>,
    pub iterations: usize,
}

/// A weighted example used inside a mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct WeightedExample<'a> {
    pub features: &'a [f64],
    pub label: usize,
    pub weight: f64,
}

impl PartClassifier {
    pub fn zeros(role: ClassifierRole, class_count: usize, dim: usize, has_background_class: bool) -> Self {
        PartClassifier {
            role,
            class_count,
            dim,
            has_background_class,
            weights: vec![0.0; class_count * dim],
            bias: vec![0.0; class_count],
        }
    }

    /// Number of foreground classes (parts, viewpoints or the object class).
    pub fn part_count(&self) -> usize {
        self.class_count - self.has_background_class as usize
    }

    pub fn background_class(&self) -> Option<usize> {
        self.has_background_class.then_some(self.class_count - 1)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.class_count)
            .map(|k| {
                let row = &self.weights[k * self.dim..(k + 1) * self.dim];
                self.bias[k] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn score(&self, f: &FeatureVector) -> Result<Vec<f64>> {
        if f.len() != self.dim {
            return Err(Error::invalid(format!(
                "feature has {} entries, classifier expects {}",
                f.len(),
                self.dim
            )));
        }
        Ok(softmax(&self.logits(&f.0)))
    }

    /// Weighted mean cross-entropy plus `l2/2 * ||W||^2`, with its gradient
    /// laid out as `[weights..., bias...]`.
    pub fn loss_and_gradient(&self, batch: &[WeightedExample], l2: f64) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.weights.len() + self.bias.len()];
        let total: f64 = batch.iter().map(|e| e.weight).sum();
        let mut loss = 0.0;
        if total > 0.0 {
            for e in batch {
                let p = softmax(&self.logits(e.features));
                let w = e.weight / total;
                loss -= w * p[e.label].max(f64::MIN_POSITIVE).ln();
                for k in 0..self.class_count {
                    let g = w * (p[k] - (k == e.label) as u8 as f64);
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut grad[k * self.dim..(k + 1) * self.dim];
                    for (gi, xi) in row.iter_mut().zip(e.features) {
                        *gi += g * xi;
                    }
                    grad[self.weights.len() + k] += g;
                }
            }
        }
        if l2 > 0.0 {
            loss += 0.5 * l2 * self.weights.iter().map(|w| w * w).sum::<f64>();
            for (g, w) in grad.iter_mut().zip(&self.weights) {
                *g += l2 * w;
            }
        }
        (loss, grad)
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }

    pub fn set_parameters(&mut self, p: &[f64]) {
        let n = self.weights.len();
        self.weights.copy_from_slice(&p[..n]);
        self.bias.copy_from_slice(&p[n..]);
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Shape of the classifier to train.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierSpec {
    pub role: ClassifierRole,
    pub class_count: usize,
    pub has_background_class: bool,
}

impl ClassifierSpec {
    pub fn parts(role: ClassifierRole, parts: usize, with_background: bool) -> Self {
        ClassifierSpec {
            role,
            class_count: parts + with_background as usize,
            has_background_class: with_background,
        }
    }

    pub fn root() -> Self {
        ClassifierSpec {
            role: ClassifierRole::Root,
            class_count: 2,
            has_background_class: true,
        }
    }
}

pub fn train_classifier(samples: &[Sample], spec: ClassifierSpec, cfg: &TrainConfig) -> Result<PartClassifier> {
    train_classifier_traced(samples, spec, cfg).map(|(c, _)| c)
}

/// Train from zero weights. Identical samples are merged into one weighted
/// example, so duplicating a data set reproduces the same run exactly.
pub fn train_classifier_traced(
    samples: &[Sample],
    spec: ClassifierSpec,
    cfg: &TrainConfig,
) -> Result<(PartClassifier, TrainReport)> {
    train_classifier_from(samples, spec, cfg, None)
}

/// As [`train_classifier_traced`], starting from `init` when given.
pub fn train_classifier_from(
    samples: &[Sample],
    spec: ClassifierSpec,
    cfg: &TrainConfig,
    init: Option<&PartClassifier>,
) -> Result<(PartClassifier, TrainReport)> {
    cfg.validate()?;
    if spec.class_count < 2 {
        return Err(Error::invalid("a classifier needs at least two classes"));
    }
    let dim = samples
        .first()
        .map(|s| s.features.len())
        .ok_or_else(|| Error::invalid("no training samples"))?;
    let mut per_class = vec![0usize; spec.class_count];
    for s in samples {
        if s.label >= spec.class_count {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                s.label, spec.class_count
            )));
        }
        if s.features.len() != dim {
            return Err(Error::invalid("inconsistent feature dimensions"));
        }
        per_class[s.label] += 1;
    }
    if let Some(k) = per_class.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {k} has no training samples")));
    }

    // merge duplicates: (label, feature bits) -> multiplicity
    let mut unique: Vec<(usize, usize, f64)> = Vec::new();
    let mut index: HashMap<(usize, Vec<u64>), usize> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        let key = (s.label, s.features.0.iter().map(|v| v.to_bits()).collect());
        match index.get(&key) {
            Some(&u) => unique[u].2 += 1.0,
            None => {
                index.insert(key, unique.len());
                unique.push((i, s.label, 1.0));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train_idx = Vec::new();
    let mut hold_idx = Vec::new();
    for k in 0..spec.class_count {
        let mut members: Vec<usize> = (0..unique.len()).filter(|&u| unique[u].1 == k).collect();
        members.shuffle(&mut rng);
        let n_hold = members.len() / 5;
        hold_idx.extend_from_slice(&members[..n_hold]);
        train_idx.extend_from_slice(&members[n_hold..]);
    }
    let example = |u: usize| WeightedExample {
        features: &samples[unique[u].0].features.0,
        label: unique[u].1,
        weight: unique[u].2,
    };
    let train_set: Vec<WeightedExample> = train_idx.iter().map(|&u| example(u)).collect();
    let hold_set: Vec<WeightedExample> = hold_idx.iter().map(|&u| example(u)).collect();

    let start = match init {
        Some(c) if c.class_count == spec.class_count && c.dim == dim => {
            let mut c = c.clone();
            c.role = spec.role;
            c.has_background_class = spec.has_background_class;
            c
        }
        Some(_) => return Err(Error::invalid("warm-start classifier has the wrong shape")),
        None => PartClassifier::zeros(spec.role, spec.class_count, dim, spec.has_background_class),
    };
    let mut clf = start.clone();
    let initial_loss = clf.loss_and_gradient(&train_set, cfg.l2_penalty).0;
    let mut velocity = vec![0.0; clf.weights.len() + clf.bias.len()];
    let mut params = clf.parameters();

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0usize;
    let mut holdout_curve = Vec::new();
    let mut train_curve = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut iterations = 0;
    let batch_size = cfg.batch_size.min(train_set.len());
    let mut batch: Vec<WeightedExample> = Vec::with_capacity(batch_size);
    while iterations < cfg.max_iterations {
        batch.clear();
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train_set[order[cursor]]);
            cursor += 1;
        }
        let (_, grad) = clf.loss_and_gradient(&batch, cfg.l2_penalty);
        for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *p += *v;
        }
        clf.set_parameters(&params);
        iterations += 1;

        if iterations % cfg.eval_interval == 0 {
            train_curve.push(clf.loss_and_gradient(&train_set, cfg.l2_penalty).0);
            if !hold_set.is_empty() {
                let h = clf.loss_and_gradient(&hold_set, 0.0).0;
                holdout_curve.push(h);
                if best.as_ref().is_none_or(|(b, _)| h < *b) {
                    best = Some((h, params.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.early_stop_patience {
                        break;
                    }
                }
            }
        }
    }
    if let Some((_, p)) = best {
        clf.set_parameters(&p);
    }
    let mut final_loss = clf.loss_and_gradient(&train_set, cfg.l2_penalty).0;
    if !(final_loss <= initial_loss) {
        clf = start;
        final_loss = initial_loss;
    }
    Ok((
        clf,
        TrainReport {
            initial_loss,
            final_loss,
            holdout_curve,
            train_curve,
            iterations,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fv(v: Vec<f64>) -> FeatureVector {
        FeatureVector(v)
    }

    fn separable(seed: u64, n: usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let center = if label == 0 { [2.0, 0.0, 1.0] } else { [-2.0, 0.5, 1.0] };
                let x: Vec<f64> = center.iter().map(|c| c + rng.gen_range(-0.5..0.5)).collect();
                Sample::new(fv(x), label)
            })
            .collect()
    }

    fn spec2() -> ClassifierSpec {
        ClassifierSpec::parts(ClassifierRole::A1, 2, false)
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let data = separable(1, 80);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        let (clf, rep) = train_classifier_traced(&data, spec2(), &cfg).unwrap();
        assert!(rep.final_loss <= rep.initial_loss);
        let correct = data
            .iter()
            .filter(|s| {
                let p = clf.score(&s.features).unwrap();
                (p[1] > p[0]) as usize == s.label
            })
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn default_protocol_lowers_loss() {
        let data = separable(2, 60);
        let (_, rep) = train_classifier_traced(&data, spec2(), &TrainConfig::default()).unwrap();
        assert!(rep.final_loss <= rep.initial_loss);
        assert!((rep.initial_loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_data_identical_run() {
        let data = separable(3, 40);
        let doubled: Vec<Sample> = data.iter().chain(&data).cloned().collect();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            seed: 9,
            ..Default::default()
        };
        let (a, ra) = train_classifier_traced(&data, spec2(), &cfg).unwrap();
        let (b, rb) = train_classifier_traced(&doubled, spec2(), &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_given_seed() {
        let data = separable(4, 30);
        let cfg = TrainConfig::default();
        assert_eq!(
            train_classifier(&data, spec2(), &cfg).unwrap(),
            train_classifier(&data, spec2(), &cfg).unwrap()
        );
    }

    #[test]
    fn warm_start_never_ends_worse() {
        let data = separable(5, 40);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        let first = train_classifier(&data, spec2(), &cfg).unwrap();
        let (again, rep) = train_classifier_from(&data, spec2(), &cfg, Some(&first)).unwrap();
        assert!(rep.final_loss <= rep.initial_loss);
        // a cold start begins at ln 2
        assert!(rep.initial_loss < 0.1 * 2f64.ln());
        assert_eq!(again.class_count, 2);
        let wrong = PartClassifier::zeros(ClassifierRole::A1, 3, 3, false);
        assert!(train_classifier_from(&data, spec2(), &cfg, Some(&wrong)).is_err());
    }

    #[test]
    fn empty_class_rejected() {
        let data = vec![Sample::new(fv(vec![1.0]), 0)];
        assert!(matches!(
            train_classifier(&data, spec2(), &TrainConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
        let bad = vec![Sample::new(fv(vec![1.0]), 0), Sample::new(fv(vec![1.0]), 5)];
        assert!(train_classifier(&bad, spec2(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn score_examples() {
        let clf = PartClassifier::zeros(ClassifierRole::A1, 4, 3, false);
        let p = clf.score(&fv(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(clf.score(&fv(vec![1.0])).is_err());

        let mut two = PartClassifier::zeros(ClassifierRole::A1, 2, 1, false);
        two.weights = vec![1.0, 0.0];
        let p = two.score(&fv(vec![2.0])).unwrap();
        assert!((p[0] - 0.880797).abs() < 1e-6);
        assert!((p[0] - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);

        let mut shifted = two.clone();
        shifted.bias = vec![7.5, 7.5];
        let q = shifted.score(&fv(vec![2.0])).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut clf = PartClassifier::zeros(ClassifierRole::A2, 3, 5, true);
        let p: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        clf.set_parameters(&p);
        let feats: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let batch: Vec<WeightedExample> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| WeightedExample {
                features: f,
                label: i % 3,
                weight: 1.0 + i as f64,
            })
            .collect();
        let (_, g) = clf.loss_and_gradient(&batch, 0.01);
        let h = 1e-5;
        for i in 0..p.len() {
            let mut a = clf.clone();
            let mut b = clf.clone();
            let mut pa = p.clone();
            let mut pb = p.clone();
            pa[i] += h;
            pb[i] -= h;
            a.set_parameters(&pa);
            b.set_parameters(&pb);
            let fd = (a.loss_and_gradient(&batch, 0.01).0 - b.loss_and_gradient(&batch, 0.01).0) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-6));
        }
    }
}
