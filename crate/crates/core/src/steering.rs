//! Per-layer head selection and bias emission.
//!
//! At each risk step with a positive gain, every layer in the configured
//! range ranks its heads by a blend of the live signal (per-layer z-scored
//! CRS, negatives clamped, min-max normalized) and the static prior, keeps
//! the top K, renormalizes the kept weights to a simplex, and emits a bias
//! of `gain * weight` per head on the context keys.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crs::{live_head_scores, CrsHistory};
use crate::detector::HeadPrior;
use crate::error::{Error, Result};
use crate::model::{BiasEntry, BiasPlan};

/// How heads are chosen within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Blend live z-scored CRS with the static prior (the real policy).
    CrsBlend,
    /// Same budget and gain on a uniformly random head subset, re-drawn per
    /// risk step from a dedicated seeded stream (baseline).
    RandomHeads { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringParams {
    /// Half-open layer interval [start, end) acted on.
    pub layer_start: usize,
    pub layer_end: usize,
    /// Head budget K per layer (clamped to the head count).
    pub keep_per_layer: usize,
    /// Blend weight lambda on the live term, in [0, 1].
    pub blend: f64,
    pub selection: SelectionMode,
}

impl SteeringParams {
    /// Defaults: mid-to-upper layer range, K = 16, lambda = 0.3.
    pub fn defaults_for(num_layers: usize) -> Self {
        Self {
            layer_start: num_layers / 2,
            layer_end: num_layers,
            keep_per_layer: 16,
            blend: 0.3,
            selection: SelectionMode::CrsBlend,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.layer_start >= self.layer_end || self.layer_end > num_layers {
            return Err(Error::Config(format!(
                "layer range [{}, {}) invalid for {} layers",
                self.layer_start, self.layer_end, num_layers
            )));
        }
        if self.keep_per_layer == 0 {
            return Err(Error::Config("keep_per_layer must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Config(format!(
                "blend must be in [0, 1], got {}",
                self.blend
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> std::ops::Range<usize> {
        self.layer_start..self.layer_end
    }
}

/// Selected heads with simplex weights for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    /// (head, weight) pairs sorted by head index; weights sum to 1.
    pub heads: Vec<HeadWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeight {
    pub head: usize,
    pub weight: f64,
}

/// The per-risk-step steering decision: the gain plus per-layer selections.
/// An empty `layers` list means no intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub gain: f64,
    pub layers: Vec<LayerSelection>,
}

impl SteeringPlan {
    pub fn empty() -> Self {
        Self {
            gain: 0.0,
            layers: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Clamp negatives to zero and min-max normalize to [0, 1]; a constant
/// vector (including all-clamped) normalizes to zeros so the prior decides.
pub fn clamp_normalize(zscores: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = zscores.iter().map(|&z| z.max(0.0)).collect();
    let min = clamped.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = clamped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        clamped.iter().map(|&z| (z - min) / (max - min)).collect()
    } else {
        vec![0.0; zscores.len()]
    }
}

/// Blend the normalized live term with the prior row.
pub fn blend_scores(live01: &[f64], prior_row: &[f64], blend: f64) -> Vec<f64> {
    live01
        .iter()
        .zip(prior_row.iter())
        .map(|(&l, &p)| blend * l + (1.0 - blend) * p)
        .collect()
}

/// Indices of the `k` largest scores, ties broken by lower index; the
/// result is sorted ascending by head index.
pub fn top_k_heads(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = idx.into_iter().take(k.min(scores.len())).collect();
    kept.sort_unstable();
    kept
}

/// Build a layer's selection from blended scores: top K, renormalized.
/// Returns None when every blended score is zero (no evidence, no bias).
pub fn select_layer(scores: &[f64], layer: usize, k: usize) -> Option<LayerSelection> {
    let kept = top_k_heads(scores, k);
    let total: f64 = kept.iter().map(|&h| scores[h]).sum();
    if total <= 0.0 {
        return None;
    }
    Some(LayerSelection {
        layer,
        heads: kept
            .into_iter()
            .map(|h| HeadWeight {
                head: h,
                weight: scores[h] / total,
            })
            .collect(),
    })
}

/// Head selection for one risk step.
///
/// A zero gain short-circuits to the empty plan (no intervention). The
/// random-heads mode keeps the same budget and gain but draws the subset
/// uniformly, with uniform weights.
pub fn select_heads(
    history: &CrsHistory,
    prior: &HeadPrior,
    params: &SteeringParams,
    gain: f64,
) -> Result<SteeringPlan> {
    if gain < 0.0 || !gain.is_finite() {
        return Err(Error::Contract(format!(
            "gain must be finite and nonnegative, got {gain}"
        )));
    }
    let (num_layers, num_heads) = (history.num_layers(), history.num_heads());
    params.validate(num_layers)?;
    if prior.num_layers() != num_layers || prior.num_heads() != num_heads {
        return Err(Error::Contract(format!(
            "prior is {}x{} but the history is {}x{}",
            prior.num_layers(),
            prior.num_heads(),
            num_layers,
            num_heads
        )));
    }
    if gain == 0.0 {
        return Ok(SteeringPlan::empty());
    }

    let k = params.keep_per_layer.min(num_heads);
    let mut layers = Vec::new();
    match params.selection {
        SelectionMode::CrsBlend => {
            for layer in params.layers() {
                let z = live_head_scores(history, layer)?;
                let live = clamp_normalize(&z);
                let blended = blend_scores(&live, &prior.weights[layer], params.blend);
                if let Some(sel) = select_layer(&blended, layer, k) {
                    layers.push(sel);
                }
            }
        }
        SelectionMode::RandomHeads { seed } => {
            // Keyed by the number of recorded risk steps so the draw changes
            // per step but stays deterministic and off the sampling stream.
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (history.len() as u64).wrapping_mul(0x9e3779b97f4a7c15));
            for layer in params.layers() {
                let mut heads: Vec<usize> = (0..num_heads).collect();
                heads.shuffle(&mut rng);
                let mut kept: Vec<usize> = heads.into_iter().take(k).collect();
                kept.sort_unstable();
                let w = 1.0 / kept.len() as f64;
                layers.push(LayerSelection {
                    layer,
                    heads: kept
                        .into_iter()
                        .map(|head| HeadWeight { head, weight: w })
                        .collect(),
                });
            }
        }
    }

    Ok(SteeringPlan { gain, layers })
}

/// Turn a plan into the bias actually handed to the model:
/// b(layer, head) = gain * weight, applied to the first `context_len` keys.
pub fn plan_to_bias(plan: &SteeringPlan, context_len: usize) -> BiasPlan {
    if plan.is_empty() {
        return BiasPlan::empty();
    }
    let mut entries = Vec::new();
    for sel in &plan.layers {
        for hw in &sel.heads {
            entries.push(BiasEntry {
                layer: sel.layer,
                head: hw.head,
                magnitude: plan.gain * hw.weight,
            });
        }
    }
    BiasPlan {
        context_len,
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history_with_latest(rows: Vec<Vec<f64>>) -> CrsHistory {
        let mut h = CrsHistory::new(rows.len(), rows[0].len(), vec![4]).unwrap();
        h.record(&rows).unwrap();
        h
    }

    fn params(num_layers: usize, k: usize, blend: f64) -> SteeringParams {
        SteeringParams {
            layer_start: 0,
            layer_end: num_layers,
            keep_per_layer: k,
            blend,
            selection: SelectionMode::CrsBlend,
        }
    }

    #[test]
    fn zero_gain_is_empty_plan() {
        let h = history_with_latest(vec![vec![1.0, 2.0], vec![0.5, 0.1]]);
        let prior = HeadPrior::zeros(2, 2);
        let plan = select_heads(&h, &prior, &params(2, 2, 0.3), 0.0).unwrap();
        assert!(plan.is_empty());
        assert!(plan_to_bias(&plan, 4).is_empty());
    }

    #[test]
    fn blend_zero_follows_prior() {
        let h = history_with_latest(vec![vec![5.0, -5.0, 0.0, 1.0]]);
        let prior = HeadPrior {
            weights: vec![vec![0.1, 0.9, 0.4, 0.0]],
        };
        let p = SteeringParams {
            layer_start: 0,
            layer_end: 1,
            keep_per_layer: 2,
            blend: 0.0,
            selection: SelectionMode::CrsBlend,
        };
        let plan = select_heads(&h, &prior, &p, 0.8).unwrap();
        let heads: Vec<usize> = plan.layers[0].heads.iter().map(|hw| hw.head).collect();
        assert_eq!(heads, vec![1, 2]);
    }

    #[test]
    fn blend_one_selects_and_renormalizes_live() {
        // normalized live term [1.0, 0.5, 0.0, 0.25], K = 2 ->
        // heads {0, 1} with weights {2/3, 1/3}
        let live = [1.0, 0.5, 0.0, 0.25];
        let blended = blend_scores(&live, &[0.0; 4], 1.0);
        let sel = select_layer(&blended, 0, 2).unwrap();
        assert_eq!(sel.heads.len(), 2);
        assert_eq!(sel.heads[0].head, 0);
        assert_eq!(sel.heads[1].head, 1);
        assert!((sel.heads[0].weight - 2.0 / 3.0).abs() < 1e-12);
        assert!((sel.heads[1].weight - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_scores_skip_layer() {
        let h = history_with_latest(vec![vec![1.0, 1.0, 1.0]]);
        // constant live values z-score to zeros; zero prior leaves nothing
        let prior = HeadPrior::zeros(1, 3);
        let p = SteeringParams {
            layer_start: 0,
            layer_end: 1,
            keep_per_layer: 2,
            blend: 0.5,
            selection: SelectionMode::CrsBlend,
        };
        let plan = select_heads(&h, &prior, &p, 1.0).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn budget_is_min_k_h() {
        let h = history_with_latest(vec![vec![0.1, 0.2, 0.3, 0.4]]);
        let prior = HeadPrior {
            weights: vec![vec![0.5; 4]],
        };
        let p = SteeringParams {
            layer_start: 0,
            layer_end: 1,
            keep_per_layer: 16,
            blend: 0.3,
            selection: SelectionMode::CrsBlend,
        };
        let plan = select_heads(&h, &prior, &p, 1.0).unwrap();
        assert_eq!(plan.layers[0].heads.len(), 4);
    }

    #[test]
    fn ties_break_by_head_index() {
        let scores = [0.5, 0.7, 0.5, 0.7, 0.1];
        assert_eq!(top_k_heads(&scores, 3), vec![0, 1, 3]);
    }

    #[test]
    fn plan_to_bias_scales_weights() {
        let plan = SteeringPlan {
            gain: 0.5,
            layers: vec![LayerSelection {
                layer: 2,
                heads: vec![
                    HeadWeight { head: 0, weight: 0.75 },
                    HeadWeight { head: 3, weight: 0.25 },
                ],
            }],
        };
        let bias = plan_to_bias(&plan, 6);
        assert_eq!(bias.context_len, 6);
        assert_eq!(bias.entries.len(), 2);
        assert!((bias.entries[0].magnitude - 0.375).abs() < 1e-15);
        assert!((bias.entries[1].magnitude - 0.125).abs() < 1e-15);
        // per-layer bias mass equals the gain
        let mass: f64 = bias.entries.iter().map(|e| e.magnitude).sum();
        assert!((mass - plan.gain).abs() < 1e-12);
    }

    #[test]
    fn random_heads_deterministic_and_budgeted() {
        let mut h = CrsHistory::new(2, 4, vec![4]).unwrap();
        h.record(&vec![vec![0.0; 4]; 2]).unwrap();
        let prior = HeadPrior::zeros(2, 4);
        let p = SteeringParams {
            layer_start: 1,
            layer_end: 2,
            keep_per_layer: 2,
            blend: 0.3,
            selection: SelectionMode::RandomHeads { seed: 42 },
        };
        let a = select_heads(&h, &prior, &p, 0.7).unwrap();
        let b = select_heads(&h, &prior, &p, 0.7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers[0].heads.len(), 2);
        for hw in &a.layers[0].heads {
            assert!((hw.weight - 0.5).abs() < 1e-15);
        }
        // a new risk step re-draws the subset eventually
        h.record(&vec![vec![0.0; 4]; 2]).unwrap();
        let c = select_heads(&h, &prior, &p, 0.7).unwrap();
        let _ = c; // may or may not differ for one step; determinism is the contract
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let h = history_with_latest(vec![vec![0.0, 1.0], vec![2.0, 3.0]]);
        let prior = HeadPrior::zeros(3, 2);
        assert!(select_heads(&h, &prior, &params(2, 2, 0.3), 1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            // Selection order is invariant under positive affine transforms
            // of a layer's live values, and kept weights form a simplex.
            #[test]
            fn affine_invariance_and_simplex(
                vals in prop::collection::vec(-4.0f64..4.0, 4..9),
                a in 0.05f64..20.0,
                c in -5.0f64..5.0,
                k in 1usize..6,
                blend in 0.0f64..=1.0,
            ) {
                let n = vals.len();
                let prior_row: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).fract()).collect();
                let prior = HeadPrior { weights: vec![prior_row] };
                let p = SteeringParams {
                    layer_start: 0,
                    layer_end: 1,
                    keep_per_layer: k,
                    blend,
                    selection: SelectionMode::CrsBlend,
                };
                let h1 = history_with_latest(vec![vals.clone()]);
                let shifted: Vec<f64> = vals.iter().map(|v| a * v + c).collect();
                let h2 = history_with_latest(vec![shifted]);
                let p1 = select_heads(&h1, &prior, &p, 0.9).unwrap();
                let p2 = select_heads(&h2, &prior, &p, 0.9).unwrap();
                prop_assert_eq!(p1.layers.len(), p2.layers.len());
                for (l1, l2) in p1.layers.iter().zip(p2.layers.iter()) {
                    let h1: Vec<usize> = l1.heads.iter().map(|hw| hw.head).collect();
                    let h2: Vec<usize> = l2.heads.iter().map(|hw| hw.head).collect();
                    prop_assert_eq!(h1, h2);
                    prop_assert_eq!(l1.heads.len(), k.min(n));
                    let sum: f64 = l1.heads.iter().map(|hw| hw.weight).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                    prop_assert!(l1.heads.iter().all(|hw| hw.weight >= 0.0));
                }
            }
        }
    }
}
