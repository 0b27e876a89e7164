//! Risk detection: map windowed CRS features to a hallucination
//! probability, train the built-in detectors, and export per-head prior
//! weights for the steering blend.
//!
//! Two trainable kinds are built in: L2-regularized logistic regression
//! (the default; importances are absolute weights) and gradient-boosted
//! decision stumps with a logistic objective (importances are total split
//! gain). A third kind marks models loaded from files produced elsewhere;
//! they reuse the same parameter forms.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crs::FeatureLayout;
use crate::error::{Error, Result};

const DETECTOR_FORMAT: &str = "ctxsteer-detector";
const DETECTOR_VERSION: u32 = 1;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Provenance of a risk model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Logistic,
    BoostedStumps,
    ExternalLoaded,
}

/// One decision stump: goes left when `feature <= threshold`. Leaf values
/// already include the shrinkage factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left: f64,
    pub right: f64,
    pub gain: f64,
}

/// Parameter forms shared by all model kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum ModelParams {
    Linear { weights: Vec<f64>, intercept: f64 },
    Stumps { base_score: f64, stumps: Vec<Stump> },
}

/// Feature-layout identity a model was trained against. Loading refuses
/// files whose fingerprint disagrees with the live configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutFingerprint {
    pub num_layers: usize,
    pub num_heads: usize,
    pub windows: Vec<usize>,
    pub version: u32,
}

impl LayoutFingerprint {
    pub fn of(layout: &FeatureLayout) -> Self {
        Self {
            num_layers: layout.num_layers,
            num_heads: layout.num_heads,
            windows: layout.windows.clone(),
            version: DETECTOR_VERSION,
        }
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            windows: self.windows.clone(),
        }
    }
}

/// Nonnegative per-head weights in [0, 1], min-max normalized per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPrior {
    pub weights: Vec<Vec<f64>>,
}

impl HeadPrior {
    pub fn zeros(num_layers: usize, num_heads: usize) -> Self {
        Self {
            weights: vec![vec![0.0; num_heads]; num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_heads(&self) -> usize {
        self.weights.first().map_or(0, |r| r.len())
    }
}

/// A trained (or loaded) risk model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    pub kind: ModelKind,
    pub fingerprint: LayoutFingerprint,
    pub params: ModelParams,
    /// Classification threshold tau tuned on the validation split.
    pub threshold: Option<f64>,
}

impl RiskModel {
    /// Deterministic probability in [0, 1] for one feature vector.
    pub fn predict_risk(&self, features: &[f64]) -> Result<f64> {
        let expected = self.fingerprint.layout().len();
        if features.len() != expected {
            return Err(Error::LayoutMismatch(format!(
                "feature vector has {} entries, model expects {}",
                features.len(),
                expected
            )));
        }
        let score = match &self.params {
            ModelParams::Linear { weights, intercept } => {
                if weights.len() != expected {
                    return Err(Error::State(
                        "model parameters do not cover the feature layout".into(),
                    ));
                }
                let mut z = *intercept;
                for (w, x) in weights.iter().zip(features.iter()) {
                    z += w * x;
                }
                z
            }
            ModelParams::Stumps { base_score, stumps } => {
                let mut z = *base_score;
                for s in stumps {
                    z += if features[s.feature] <= s.threshold {
                        s.left
                    } else {
                        s.right
                    };
                }
                z
            }
        };
        Ok(sigmoid(score))
    }

    /// Aggregate per-feature importances into per-(layer, head) weights:
    /// absolute weight for linear models, total split gain for stumps, then
    /// min-max to [0, 1] within each layer (constant layers become zeros).
    pub fn export_prior(&self) -> Result<HeadPrior> {
        let layout = self.fingerprint.layout();
        let importances: Vec<f64> = match &self.params {
            ModelParams::Linear { weights, .. } => {
                if weights.len() != layout.len() {
                    return Err(Error::State(
                        "cannot export a prior from an untrained model".into(),
                    ));
                }
                weights.iter().map(|w| w.abs()).collect()
            }
            ModelParams::Stumps { stumps, .. } => {
                let mut imp = vec![0.0; layout.len()];
                for s in stumps {
                    if s.feature >= imp.len() {
                        return Err(Error::State(
                            "stump references a feature outside the layout".into(),
                        ));
                    }
                    imp[s.feature] += s.gain;
                }
                imp
            }
        };

        let mut prior = vec![vec![0.0; layout.num_heads]; layout.num_layers];
        for (l, row) in prior.iter_mut().enumerate() {
            for (h, slot) in row.iter_mut().enumerate() {
                *slot = layout
                    .head_feature_indices(l, h)
                    .iter()
                    .map(|&i| importances[i])
                    .sum();
            }
        }
        for row in prior.iter_mut() {
            let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max > min {
                for v in row.iter_mut() {
                    *v = (*v - min) / (max - min);
                }
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(HeadPrior { weights: prior })
    }

    // ---- serialization --------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    /// Load and verify the layout fingerprint against the live
    /// configuration; mismatches are refused.
    pub fn load(path: &Path, expected: &LayoutFingerprint) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file), expected)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct FileView<'a> {
            format: &'a str,
            #[serde(flatten)]
            model: &'a RiskModel,
        }
        serde_json::to_writer_pretty(
            &mut w,
            &FileView {
                format: DETECTOR_FORMAT,
                model: self,
            },
        )?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R, expected: &LayoutFingerprint) -> Result<Self> {
        #[derive(Deserialize)]
        struct FileView {
            format: String,
            #[serde(flatten)]
            model: RiskModel,
        }
        let view: FileView = serde_json::from_reader(r)?;
        if view.format != DETECTOR_FORMAT {
            return Err(Error::Config(format!(
                "not a detector file (format {:?})",
                view.format
            )));
        }
        if &view.model.fingerprint != expected {
            return Err(Error::Config(format!(
                "detector fingerprint {:?} does not match the live configuration {:?}",
                view.model.fingerprint, expected
            )));
        }
        Ok(view.model)
    }
}

/// One labeled sample: the feature vector captured at a risk step plus its
/// binary label (hallucination = positive).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: bool,
}

/// All risk-step samples of one episode; episodes never cross partitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledEpisode {
    pub episode_id: u64,
    pub samples: Vec<LabeledSample>,
}

impl LabeledEpisode {
    /// Episode stratum for splitting: positive if any step is positive.
    pub fn is_positive(&self) -> bool {
        self.samples.iter().any(|s| s.label)
    }
}

/// Episode indices per partition, split 70/10/20 with no id crossing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified 70/10/20 split by episode id: both classes are shuffled
/// separately (seeded) so each partition sees both at desk scale.
pub fn split_episodes(episodes: &[LabeledEpisode], seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in [false, true] {
        let mut idx: Vec<usize> = episodes
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_positive() == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = n / 10;
        let n_test = n / 5;
        split.val.extend(&idx[..n_val]);
        split.test.extend(&idx[n_val..n_val + n_test]);
        split.train.extend(&idx[n_val + n_test..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Detector training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: TrainKind,
    pub learning_rate: f64,
    /// Epochs for logistic regression, boosting rounds for stumps.
    pub iterations: usize,
    /// Heavy-ball momentum for the full-batch logistic updates.
    pub momentum: f64,
    pub l2: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainKind {
    Logistic,
    BoostedStumps,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: TrainKind::Logistic,
            learning_rate: 0.02,
            iterations: 400,
            momentum: 0.9,
            l2: 1e-4,
            seed: 17,
        }
    }
}

/// Result of training: the model, validation AUROC, and the split used
/// (the test partition stays untouched for harness metrics).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RiskModel,
    pub validation_auroc: f64,
    pub split: Split,
}

/// Train the default detector on the train partition and score it on the
/// validation partition. Deterministic given the seed.
pub fn train_default(
    episodes: &[LabeledEpisode],
    layout: &FeatureLayout,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if episodes.is_empty() {
        return Err(Error::Training("no labeled episodes".into()));
    }
    let dim = layout.len();
    for e in episodes {
        for s in &e.samples {
            if s.features.len() != dim {
                return Err(Error::LayoutMismatch(format!(
                    "episode {} has a {}-dim sample, layout expects {}",
                    e.episode_id,
                    s.features.len(),
                    dim
                )));
            }
        }
    }
    let split = split_episodes(episodes, config.seed);
    let gather = |idx: &[usize]| -> (Vec<&[f64]>, Vec<bool>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &i in idx {
            for s in &episodes[i].samples {
                xs.push(s.features.as_slice());
                ys.push(s.label);
            }
        }
        (xs, ys)
    };
    let (train_x, train_y) = gather(&split.train);
    if train_y.iter().all(|&y| y) || train_y.iter().all(|&y| !y) {
        return Err(Error::Training(
            "training split contains a single class".into(),
        ));
    }

    let params = match config.kind {
        TrainKind::Logistic => train_logistic(&train_x, &train_y, dim, config),
        TrainKind::BoostedStumps => train_stumps(&train_x, &train_y, dim, config),
    };
    let model = RiskModel {
        kind: match config.kind {
            TrainKind::Logistic => ModelKind::Logistic,
            TrainKind::BoostedStumps => ModelKind::BoostedStumps,
        },
        fingerprint: LayoutFingerprint::of(layout),
        params,
        threshold: None,
    };

    let (val_x, val_y) = gather(&split.val);
    let scores: Vec<f64> = val_x
        .iter()
        .map(|x| model.predict_risk(x))
        .collect::<Result<_>>()?;
    let validation_auroc = auroc(&scores, &val_y)?;

    Ok(TrainOutcome {
        model,
        validation_auroc,
        split,
    })
}

/// Full-batch Adam on the regularized logistic loss. The windowed CRS
/// features share a large common level (the sequence-length drift), which
/// makes plain gradient descent hopelessly ill-conditioned; per-coordinate
/// step normalization fixes that without touching the features themselves.
fn train_logistic(xs: &[&[f64]], ys: &[bool], dim: usize, cfg: &TrainConfig) -> ModelParams {
    const BETA2: f64 = 0.999;
    const ADAM_EPS: f64 = 1e-8;
    let beta1 = cfg.momentum;
    let n = xs.len() as f64;
    let mut weights = vec![0.0f64; dim];
    let mut intercept = 0.0f64;
    let mut grad = vec![0.0f64; dim];
    let mut m = vec![0.0f64; dim + 1];
    let mut v = vec![0.0f64; dim + 1];
    for it in 1..=cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (x, &y) in xs.iter().zip(ys.iter()) {
            let mut z = intercept;
            for (w, xi) in weights.iter().zip(x.iter()) {
                z += w * xi;
            }
            let err = sigmoid(z) - if y { 1.0 } else { 0.0 };
            for (g, xi) in grad.iter_mut().zip(x.iter()) {
                *g += err * xi;
            }
            grad_b += err;
        }
        let bc1 = 1.0 - beta1.powi(it as i32);
        let bc2 = 1.0 - BETA2.powi(it as i32);
        let mut update = |slot: usize, g: f64, param: &mut f64| {
            m[slot] = beta1 * m[slot] + (1.0 - beta1) * g;
            v[slot] = BETA2 * v[slot] + (1.0 - BETA2) * g * g;
            let mhat = m[slot] / bc1;
            let vhat = v[slot] / bc2;
            *param -= cfg.learning_rate * mhat / (vhat.sqrt() + ADAM_EPS);
        };
        for i in 0..dim {
            let g = grad[i] / n + cfg.l2 * weights[i];
            let mut w = weights[i];
            update(i, g, &mut w);
            weights[i] = w;
        }
        update(dim, grad_b / n, &mut intercept);
    }
    ModelParams::Linear { weights, intercept }
}

fn train_stumps(xs: &[&[f64]], ys: &[bool], dim: usize, cfg: &TrainConfig) -> ModelParams {
    let n = xs.len();
    let pos = ys.iter().filter(|&&y| y).count() as f64;
    let base_score = ((pos / n as f64).clamp(1e-6, 1.0 - 1e-6) / (1.0 - (pos / n as f64).clamp(1e-6, 1.0 - 1e-6))).ln();

    // Presorted sample order per feature, reused every round.
    let order: Vec<Vec<u32>> = (0..dim)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| {
                xs[a as usize][f]
                    .partial_cmp(&xs[b as usize][f])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            idx
        })
        .collect();

    let mut scores = vec![base_score; n];
    let mut stumps = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut grad = vec![0.0f64; n];
        let mut hess = vec![0.0f64; n];
        let mut g_total = 0.0;
        let mut h_total = 0.0;
        for i in 0..n {
            let p = sigmoid(scores[i]);
            grad[i] = p - if ys[i] { 1.0 } else { 0.0 };
            hess[i] = (p * (1.0 - p)).max(1e-12);
            g_total += grad[i];
            h_total += hess[i];
        }
        let lambda = cfg.l2.max(1e-6);
        let root_obj = g_total * g_total / (h_total + lambda);

        let mut best: Option<(f64, usize, f64, f64, f64)> = None; // gain, feature, threshold, gl, hl
        for f in 0..dim {
            let ord = &order[f];
            let mut gl = 0.0;
            let mut hl = 0.0;
            for w in 0..n - 1 {
                let i = ord[w] as usize;
                gl += grad[i];
                hl += hess[i];
                let xi = xs[i][f];
                let xj = xs[ord[w + 1] as usize][f];
                if xi == xj {
                    continue;
                }
                let gr = g_total - gl;
                let hr = h_total - hl;
                let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - root_obj;
                let better = match &best {
                    None => gain > 1e-12,
                    Some((bg, bf, _, _, _)) => {
                        gain > *bg + 1e-12 || (gain > *bg - 1e-12 && f < *bf && gain > 1e-12)
                    }
                };
                if better {
                    best = Some((gain, f, 0.5 * (xi + xj), gl, hl));
                }
            }
        }
        let Some((gain, feature, threshold, gl, hl)) = best else {
            break; // nothing left to split on
        };
        let gr = g_total - gl;
        let hr = h_total - hl;
        let left = -cfg.learning_rate * gl / (hl + lambda);
        let right = -cfg.learning_rate * gr / (hr + lambda);
        for i in 0..n {
            scores[i] += if xs[i][feature] <= threshold { left } else { right };
        }
        stumps.push(Stump {
            feature,
            threshold,
            left,
            right,
            gain,
        });
    }
    ModelParams::Stumps { base_score, stumps }
}

/// Rank-based AUROC with midrank tie handling (hallucination = positive).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract("scores and labels must align".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "AUROC undefined with a single class".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks are 1-based; ties share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let n_pos = n_pos as f64;
    let n_neg = n_neg as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Threshold maximizing F1 over the grid of observed scores.
///
/// F1 is piecewise constant between observed scores; among optimal runs the
/// widest interval wins and its midpoint is returned. If the widest optimal
/// interval is unbounded below (all-positive is optimal), the smallest
/// observed optimal score is returned.
pub fn best_f1_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Contract("scores and labels must align".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Metric(
            "threshold tuning undefined with a single class".into(),
        ));
    }
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
    uniq.dedup();

    let f1_at = |tau: f64| -> f64 {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&s, &y) in scores.iter().zip(labels.iter()) {
            let pred = s >= tau;
            match (pred, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
        }
    };

    let f1s: Vec<f64> = uniq.iter().map(|&t| f1_at(t)).collect();
    let best = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let optimal: Vec<bool> = f1s.iter().map(|&f| f == best).collect();

    // Maximal runs of consecutive optimal candidates; run [i, j] covers the
    // tau interval (uniq[i-1], uniq[j]].
    let mut best_run: Option<(bool, f64, usize, usize)> = None; // unbounded, width, i, j
    let mut i = 0;
    while i < uniq.len() {
        if !optimal[i] {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < uniq.len() && optimal[j + 1] {
            j += 1;
        }
        let unbounded = i == 0;
        let width = if unbounded {
            f64::INFINITY
        } else {
            uniq[j] - uniq[i - 1]
        };
        let replace = match &best_run {
            None => true,
            Some((u, w, _, _)) => (unbounded && !u) || (unbounded == *u && width > *w),
        };
        if replace {
            best_run = Some((unbounded, width, i, j));
        }
        i = j + 1;
    }
    let (unbounded, _, i, j) = best_run.expect("at least one candidate is optimal");
    Ok(if unbounded {
        uniq[i]
    } else {
        0.5 * (uniq[i - 1] + uniq[j])
    })
}

/// Tune tau on validation episodes (maximize F1) and return it.
pub fn tune_threshold(model: &RiskModel, validation: &[&LabeledEpisode]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for e in validation {
        for s in &e.samples {
            scores.push(model.predict_risk(&s.features)?);
            labels.push(s.label);
        }
    }
    best_f1_threshold(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_layout() -> FeatureLayout {
        FeatureLayout {
            num_layers: 2,
            num_heads: 2,
            windows: vec![2],
        }
    }

    fn linear_model(weights: Vec<f64>, intercept: f64) -> RiskModel {
        RiskModel {
            kind: ModelKind::Logistic,
            fingerprint: LayoutFingerprint::of(&tiny_layout()),
            params: ModelParams::Linear { weights, intercept },
            threshold: None,
        }
    }

    #[test]
    fn zero_model_predicts_half() {
        let layout = tiny_layout();
        let m = linear_model(vec![0.0; layout.len()], 0.0);
        let p = m.predict_risk(&vec![1.0; layout.len()]).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn large_negative_intercept() {
        let layout = tiny_layout();
        let m = linear_model(vec![0.0; layout.len()], -20.0);
        let p = m.predict_risk(&vec![0.0; layout.len()]).unwrap();
        assert!((p - 2.0611536181902037e-9).abs() < 1e-18);
    }

    #[test]
    fn prediction_in_unit_interval() {
        let layout = tiny_layout();
        let m = linear_model((0..layout.len()).map(|i| i as f64 - 3.0).collect(), 0.7);
        for scale in [-100.0, -1.0, 0.0, 1.0, 100.0] {
            let x: Vec<f64> = (0..layout.len()).map(|i| scale * (i as f64 + 1.0)).collect();
            let p = m.predict_risk(&x).unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn layout_mismatch_rejected() {
        let m = linear_model(vec![0.0; tiny_layout().len()], 0.0);
        assert!(matches!(
            m.predict_risk(&[0.0, 1.0]),
            Err(Error::LayoutMismatch(_))
        ));
    }

    fn make_episodes(n_per_class: usize, separable: bool, seed: u64) -> Vec<LabeledEpisode> {
        use rand::Rng;
        let layout = tiny_layout();
        let dim = layout.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for i in 0..2 * n_per_class {
            let label = i % 2 == 0;
            let samples = (0..4)
                .map(|_| {
                    let mut features = vec![0.0; dim];
                    for f in features.iter_mut() {
                        *f = rng.random::<f64>() - 0.5;
                    }
                    if separable {
                        features[0] += if label { 2.0 } else { -2.0 };
                        features[3] += if label { 1.0 } else { -1.0 };
                    }
                    LabeledSample { features, label }
                })
                .collect();
            out.push(LabeledEpisode {
                episode_id: i as u64,
                samples,
            });
        }
        out
    }

    #[test]
    fn separable_data_trains_well() {
        let episodes = make_episodes(60, true, 3);
        let out = train_default(&episodes, &tiny_layout(), &TrainConfig::default()).unwrap();
        assert!(
            out.validation_auroc >= 0.99,
            "AUROC {}",
            out.validation_auroc
        );
    }

    #[test]
    fn shuffled_labels_are_chance_level() {
        use rand::Rng;
        let mut episodes = make_episodes(100, true, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // reassign labels at random, breaking the feature-label link
        for e in episodes.iter_mut() {
            let label = rng.random::<bool>();
            for s in e.samples.iter_mut() {
                s.label = label;
            }
        }
        let out = train_default(&episodes, &tiny_layout(), &TrainConfig::default()).unwrap();
        assert!(
            (0.4..=0.6).contains(&out.validation_auroc),
            "AUROC {}",
            out.validation_auroc
        );
    }

    #[test]
    fn stumps_train_on_separable_data() {
        let episodes = make_episodes(60, true, 7);
        let cfg = TrainConfig {
            kind: TrainKind::BoostedStumps,
            iterations: 40,
            learning_rate: 0.3,
            ..Default::default()
        };
        let out = train_default(&episodes, &tiny_layout(), &cfg).unwrap();
        assert!(
            out.validation_auroc >= 0.99,
            "AUROC {}",
            out.validation_auroc
        );
        match &out.model.params {
            ModelParams::Stumps { stumps, .. } => assert!(!stumps.is_empty()),
            _ => panic!("expected stump parameters"),
        }
    }

    #[test]
    fn single_class_training_rejected() {
        let mut episodes = make_episodes(20, true, 9);
        for e in episodes.iter_mut() {
            for s in e.samples.iter_mut() {
                s.label = false;
            }
        }
        assert!(matches!(
            train_default(&episodes, &tiny_layout(), &TrainConfig::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn split_hygiene() {
        let episodes = make_episodes(50, true, 11);
        let split = split_episodes(&episodes, 1);
        let mut seen = std::collections::HashSet::new();
        for part in [&split.train, &split.val, &split.test] {
            for &i in part {
                assert!(seen.insert(i), "episode {i} crosses partitions");
            }
        }
        assert_eq!(seen.len(), episodes.len());
        assert_eq!(split.val.len(), 10);
        assert_eq!(split.test.len(), 20);
        assert_eq!(split.train.len(), 70);
        // deterministic
        assert_eq!(split, split_episodes(&episodes, 1));
        // both classes everywhere (stratified)
        for part in [&split.train, &split.val, &split.test] {
            assert!(part.iter().any(|&i| episodes[i].is_positive()));
            assert!(part.iter().any(|&i| !episodes[i].is_positive()));
        }
    }

    #[test]
    fn prior_single_support() {
        let layout = tiny_layout();
        let mut weights = vec![0.0; layout.len()];
        for i in layout.head_feature_indices(1, 1) {
            weights[i] = if i % 2 == 0 { 0.5 } else { -0.25 };
        }
        let m = linear_model(weights, 0.0);
        let prior = m.export_prior().unwrap();
        assert_eq!(prior.weights[1][1], 1.0);
        assert_eq!(prior.weights[1][0], 0.0);
        assert_eq!(prior.weights[0], vec![0.0, 0.0]);
    }

    #[test]
    fn prior_zero_model() {
        let m = linear_model(vec![0.0; tiny_layout().len()], 0.0);
        let prior = m.export_prior().unwrap();
        assert!(prior.weights.iter().flatten().all(|&w| w == 0.0));
    }

    #[test]
    fn prior_min_max() {
        let layout = tiny_layout();
        let mut weights = vec![0.0; layout.len()];
        // head (0,0) total importance 2, head (0,1) total importance 6
        let idx0 = layout.head_feature_indices(0, 0);
        let idx1 = layout.head_feature_indices(0, 1);
        weights[idx0[0]] = 2.0;
        weights[idx1[0]] = 6.0;
        let m = linear_model(weights, 0.0);
        let prior = m.export_prior().unwrap();
        assert_eq!(prior.weights[0][0], 0.0);
        assert_eq!(prior.weights[0][1], 1.0);
    }

    #[test]
    fn untrained_model_prior_rejected() {
        let m = linear_model(vec![], 0.0);
        assert!(matches!(m.export_prior(), Err(Error::State(_))));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(
            auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            auroc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(),
            0.0
        );
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn threshold_examples() {
        // perfectly separated -> midpoint of the optimal interval
        let tau = best_f1_threshold(&[0.1, 0.9], &[false, true]).unwrap();
        assert!((tau - 0.5).abs() < 1e-12);

        // all-positive optimal -> tau = min score
        let tau = best_f1_threshold(&[0.2, 0.4, 0.6], &[true, true, true]);
        assert!(tau.is_err()); // single class is rejected
        // the negative outscores a positive, so no cut separates: predicting
        // everything positive maximizes F1 and tau falls back to min score
        let tau = best_f1_threshold(&[0.5, 0.3, 0.7], &[false, true, true]).unwrap();
        assert_eq!(tau, 0.3);

        // one unique score
        let tau = best_f1_threshold(&[0.3, 0.3, 0.3], &[true, false, true]).unwrap();
        assert_eq!(tau, 0.3);
    }

    #[test]
    fn serialization_round_trip_and_fingerprint_check() {
        let layout = tiny_layout();
        let mut m = linear_model(vec![0.25; layout.len()], -1.0);
        m.threshold = Some(0.4);
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let expected = LayoutFingerprint::of(&layout);
        let loaded = RiskModel::read(buf.as_slice(), &expected).unwrap();
        assert_eq!(m, loaded);

        let other = LayoutFingerprint {
            num_layers: 3,
            ..expected
        };
        assert!(matches!(
            RiskModel::read(buf.as_slice(), &other),
            Err(Error::Config(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            // AUROC is invariant under strictly monotone transforms.
            #[test]
            fn auroc_monotone_invariance(
                scores in prop::collection::vec(-5.0f64..5.0, 4..40),
                flips in prop::collection::vec(any::<bool>(), 4..40),
            ) {
                let n = scores.len().min(flips.len());
                let scores = &scores[..n];
                let labels = &flips[..n];
                prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
                let base = auroc(scores, labels).unwrap();
                let transformed: Vec<f64> = scores.iter().map(|s| (0.3 * s).exp() + 1.0).collect();
                let t = auroc(&transformed, labels).unwrap();
                prop_assert!((base - t).abs() < 1e-12);
            }

            // Identical inputs produce identical predictions.
            #[test]
            fn prediction_deterministic(x in prop::collection::vec(-3.0f64..3.0, 12)) {
                let m = linear_model((0..12).map(|i| (i as f64) * 0.1 - 0.5).collect(), 0.3);
                let a = m.predict_risk(&x).unwrap();
                let b = m.predict_risk(&x).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
