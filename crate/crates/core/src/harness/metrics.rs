//! Grounding metrics over generated token sequences.
//!
//! A generated token is *covered* when it sits inside at least one n-gram
//! (n in the configured range, default 3..=5) that occurs contiguously in
//! the context. Context overlap is the covered fraction; unsupported spans
//! are maximal uncovered runs, reported per 100 generated tokens. The
//! episode-level hallucination verdict checks the value the model settles
//! on (its last complete recitation cycle) against the context-supported
//! value set from task construction.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::task::SyntheticTask;
use crate::orchestrator::RunTrace;

/// Default n-gram match range.
pub const NGRAM_RANGE: (usize, usize) = (3, 5);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub hallucinated: bool,
    /// Unsupported spans per 100 generated tokens.
    pub span_density: f64,
    /// Fraction of generated tokens covered by a context-matching n-gram.
    pub context_overlap: f64,
    pub generated_len: usize,
}

/// Per-token coverage flags for `generated` against `context`.
pub fn ngram_coverage(
    generated: &[u32],
    context: &[u32],
    n_min: usize,
    n_max: usize,
) -> Vec<bool> {
    let mut covered = vec![false; generated.len()];
    for n in n_min..=n_max {
        if n == 0 || n > context.len() || n > generated.len() {
            continue;
        }
        let bank: HashSet<&[u32]> = context.windows(n).collect();
        for (start, w) in generated.windows(n).enumerate() {
            if bank.contains(w) {
                for c in covered.iter_mut().skip(start).take(n) {
                    *c = true;
                }
            }
        }
    }
    covered
}

/// Number of maximal uncovered runs.
pub fn unsupported_spans(covered: &[bool]) -> usize {
    let mut spans = 0;
    let mut in_span = false;
    for &c in covered {
        if !c && !in_span {
            spans += 1;
        }
        in_span = !c;
    }
    spans
}

/// The value the episode settles on: the value emitted most often across
/// complete recitation cycles, ties going to the most recent occurrence.
/// Falls back to the first tokens when no full cycle fits.
pub fn settled_value(generated: &[u32], value_len: usize) -> Vec<u32> {
    let cycle = value_len + 1;
    let complete = generated.len() / cycle;
    if complete == 0 {
        return generated[..generated.len().min(value_len)].to_vec();
    }
    let values: Vec<&[u32]> = (0..complete)
        .map(|i| &generated[i * cycle..i * cycle + value_len])
        .collect();
    let mut best = 0usize;
    let mut best_count = 0usize;
    for (i, v) in values.iter().enumerate() {
        let count = values.iter().filter(|w| *w == v).count();
        if count >= best_count {
            best = i;
            best_count = count;
        }
    }
    values[best].to_vec()
}

/// Compute all episode metrics for one trace against its task.
pub fn compute_metrics(
    trace: &RunTrace,
    task: &SyntheticTask,
    ngram: (usize, usize),
) -> Result<EpisodeMetrics> {
    if ngram.0 == 0 || ngram.0 > ngram.1 {
        return Err(Error::Config(format!(
            "invalid n-gram range [{}, {}]",
            ngram.0, ngram.1
        )));
    }
    let generated = trace.generated_tokens();
    if generated.is_empty() {
        return Err(Error::Contract("trace has no generated tokens".into()));
    }
    let covered = ngram_coverage(&generated, &task.context, ngram.0, ngram.1);
    let len = generated.len() as f64;
    let context_overlap = covered.iter().filter(|&&c| c).count() as f64 / len;
    let span_density = unsupported_spans(&covered) as f64 / len * 100.0;
    let value = settled_value(&generated, task.gold_value.len());
    let hallucinated = !task.context_values.iter().any(|v| *v == value);
    Ok(EpisodeMetrics {
        hallucinated,
        span_density,
        context_overlap,
        generated_len: generated.len(),
    })
}

pub fn hallucination_rate(metrics: &[EpisodeMetrics]) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    metrics.iter().filter(|m| m.hallucinated).count() as f64 / metrics.len() as f64
}

pub fn mean_context_overlap(metrics: &[EpisodeMetrics]) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    metrics.iter().map(|m| m.context_overlap).sum::<f64>() / metrics.len() as f64
}

pub fn mean_span_density(metrics: &[EpisodeMetrics]) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    metrics.iter().map(|m| m.span_density).sum::<f64>() / metrics.len() as f64
}

/// Absolute reduction in hallucination rate: baseline minus steered.
pub fn mitigation_rate(baseline: &[EpisodeMetrics], steered: &[EpisodeMetrics]) -> Result<f64> {
    if baseline.is_empty() || steered.is_empty() {
        return Err(Error::Metric("mitigation rate needs episodes".into()));
    }
    if baseline.len() != steered.len() {
        return Err(Error::Contract(
            "baseline and steered episode lists must be paired".into(),
        ));
    }
    Ok(hallucination_rate(baseline) - hallucination_rate(steered))
}

/// Paired bootstrap percentile interval for the mitigation rate.
pub fn bootstrap_mitigation_ci(
    baseline: &[EpisodeMetrics],
    steered: &[EpisodeMetrics],
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if baseline.len() != steered.len() || baseline.is_empty() {
        return Err(Error::Contract("bootstrap needs paired episodes".into()));
    }
    if !(0.0 < confidence && confidence < 1.0) {
        return Err(Error::Config("confidence must be in (0, 1)".into()));
    }
    let n = baseline.len();
    let diffs: Vec<f64> = baseline
        .iter()
        .zip(steered.iter())
        .map(|(b, s)| (b.hallucinated as u8 as f64) - (s.hallucinated as u8 as f64))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += diffs[rng.random_range(0..n)];
        }
        stats.push(sum / n as f64);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - confidence) / 2.0;
    let pick = |p: f64| {
        let pos = p * (stats.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        stats[lo] + (stats[hi] - stats[lo]) * frac
    };
    Ok((pick(alpha), pick(1.0 - alpha)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics_for(generated: &[u32], context: &[u32], value_len: usize) -> EpisodeMetrics {
        let covered = ngram_coverage(generated, context, 3, 5);
        let len = generated.len() as f64;
        let value = settled_value(generated, value_len);
        EpisodeMetrics {
            hallucinated: !context
                .windows(value_len)
                .any(|w| w == value.as_slice()),
            span_density: unsupported_spans(&covered) as f64 / len * 100.0,
            context_overlap: covered.iter().filter(|&&c| c).count() as f64 / len,
            generated_len: generated.len(),
        }
    }

    #[test]
    fn verbatim_substring_is_fully_covered() {
        let context: Vec<u32> = vec![5, 6, 7, 8, 9, 10, 11, 12];
        let generated: Vec<u32> = context[1..7].to_vec(); // length 6 >= 5
        let m = metrics_for(&generated, &context, 3);
        assert_eq!(m.context_overlap, 1.0);
        assert_eq!(m.span_density, 0.0);
    }

    #[test]
    fn disjoint_output_has_zero_overlap() {
        let context: Vec<u32> = vec![5, 6, 7, 8, 9];
        let generated: Vec<u32> = vec![20, 21, 22, 23, 24, 25];
        let covered = ngram_coverage(&generated, &context, 3, 5);
        assert!(covered.iter().all(|&c| !c));
        let m = metrics_for(&generated, &context, 3);
        assert_eq!(m.context_overlap, 0.0);
    }

    #[test]
    fn one_span_in_twenty_tokens() {
        // 20 generated tokens, a single unsupported 4-token island:
        // SD = 1 / 20 * 100 = 5.0
        let context: Vec<u32> = (0..30).collect();
        let mut generated: Vec<u32> = (0..20).collect();
        for (i, g) in generated.iter_mut().enumerate().take(12).skip(8) {
            *g = 100 + i as u32;
        }
        let covered = ngram_coverage(&generated, &context, 3, 5);
        assert_eq!(unsupported_spans(&covered), 1);
        let m = metrics_for(&generated, &context, 3);
        assert!((m.span_density - 5.0).abs() < 1e-12);
        assert!((m.context_overlap - 16.0 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn short_output_convention() {
        let context: Vec<u32> = (0..10).collect();
        let generated: Vec<u32> = vec![3, 4]; // shorter than the minimum n-gram
        let covered = ngram_coverage(&generated, &context, 3, 5);
        assert!(covered.iter().all(|&c| !c));
        assert_eq!(unsupported_spans(&covered), 1);
    }

    #[test]
    fn settled_value_is_modal_cycle() {
        // cycles of 3 tokens (value_len 2 + separator); [10,11] appears
        // twice, [12,13] once
        let generated = vec![10, 11, 0, 12, 13, 0, 10, 11, 0];
        assert_eq!(settled_value(&generated, 2), vec![10, 11]);
        // tie between [10,11] and [12,13] goes to the most recent
        let tied = vec![10, 11, 0, 12, 13, 0];
        assert_eq!(settled_value(&tied, 2), vec![12, 13]);
        let short = vec![10, 11];
        assert_eq!(settled_value(&short, 4), vec![10, 11]);
    }

    #[test]
    fn coverage_implies_no_spans() {
        let covered = vec![true; 12];
        assert_eq!(unsupported_spans(&covered), 0);
        let mixed = vec![true, false, false, true, false, true];
        assert_eq!(unsupported_spans(&mixed), 2);
    }

    fn fake(hallucinated: bool) -> EpisodeMetrics {
        EpisodeMetrics {
            hallucinated,
            span_density: 0.0,
            context_overlap: 1.0,
            generated_len: 10,
        }
    }

    #[test]
    fn mitigation_rate_arithmetic() {
        let same: Vec<EpisodeMetrics> = (0..10).map(|i| fake(i % 2 == 0)).collect();
        assert_eq!(mitigation_rate(&same, &same).unwrap(), 0.0);

        let baseline: Vec<EpisodeMetrics> = (0..200).map(|i| fake(i < 40)).collect();
        let steered: Vec<EpisodeMetrics> = (0..200).map(|i| fake(i < 28)).collect();
        let m = mitigation_rate(&baseline, &steered).unwrap();
        assert!((m - 0.06).abs() < 1e-12);

        assert!(mitigation_rate(&[], &[]).is_err());
    }

    #[test]
    fn bootstrap_interval_brackets_effect() {
        let baseline: Vec<EpisodeMetrics> = (0..300).map(|i| fake(i % 2 == 0)).collect();
        let steered: Vec<EpisodeMetrics> = (0..300).map(|i| fake(i % 10 == 0)).collect();
        let (lo, hi) = bootstrap_mitigation_ci(&baseline, &steered, 1000, 0.95, 7).unwrap();
        let point = mitigation_rate(&baseline, &steered).unwrap();
        assert!(lo <= point && point <= hi);
        assert!(lo > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn metric_ranges(
                generated in prop::collection::vec(0u32..12, 1..40),
                context in prop::collection::vec(0u32..12, 3..40),
            ) {
                let covered = ngram_coverage(&generated, &context, 3, 5);
                let len = generated.len() as f64;
                let co = covered.iter().filter(|&&c| c).count() as f64 / len;
                let sd = unsupported_spans(&covered) as f64 / len * 100.0;
                prop_assert!((0.0..=1.0).contains(&co));
                prop_assert!(sd >= 0.0);
                if (co - 1.0).abs() < 1e-12 {
                    prop_assert_eq!(unsupported_spans(&covered), 0);
                }
            }
        }
    }
}
