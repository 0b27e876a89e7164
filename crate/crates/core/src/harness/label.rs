//! Turn baseline traces into labeled detector-training episodes.
//!
//! Labels come from the synthetic oracle. The default broadcasts the
//! episode verdict to every risk step; the step-level variant marks only
//! risk steps whose emitted token is uncovered by any context-matching
//! n-gram.

use serde::{Deserialize, Serialize};

use crate::detector::{LabeledEpisode, LabeledSample};
use crate::error::{Error, Result};
use crate::harness::metrics::{compute_metrics, ngram_coverage};
use crate::harness::task::SyntheticTask;
use crate::orchestrator::RunTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelGranularity {
    /// Episode verdict broadcast to all risk steps (default).
    Episode,
    /// Risk step labeled by whether its own token is unsupported.
    Step,
}

/// Build labeled episodes from aligned (trace, task) pairs. Traces must
/// have been recorded with `record_features` enabled.
pub fn label_episodes(
    traces: &[RunTrace],
    tasks: &[SyntheticTask],
    granularity: LabelGranularity,
    ngram: (usize, usize),
) -> Result<Vec<LabeledEpisode>> {
    if traces.len() != tasks.len() {
        return Err(Error::Contract(format!(
            "{} traces but {} tasks",
            traces.len(),
            tasks.len()
        )));
    }
    let mut out = Vec::with_capacity(traces.len());
    for (trace, task) in traces.iter().zip(tasks.iter()) {
        if trace.context_tokens != task.context || trace.question_tokens != task.question {
            return Err(Error::Contract(format!(
                "trace and task {} are misaligned",
                task.id
            )));
        }
        let episode_label = compute_metrics(trace, task, ngram)?.hallucinated;
        let generated = trace.generated_tokens();
        let covered = ngram_coverage(&generated, &task.context, ngram.0, ngram.1);
        let mut samples = Vec::new();
        for step in &trace.steps {
            let Some(risk) = &step.risk else { continue };
            let features = risk.features.clone().ok_or_else(|| {
                Error::State(format!(
                    "trace for task {} has no recorded features (re-run with record_features)",
                    task.id
                ))
            })?;
            let label = match granularity {
                LabelGranularity::Episode => episode_label,
                LabelGranularity::Step => !covered[step.step - 1],
            };
            samples.push(LabeledSample { features, label });
        }
        out.push(LabeledEpisode {
            episode_id: task.id,
            samples,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::task::{build_plant, desk_model_config, generate_tasks, PlantParams};
    use crate::orchestrator::{run_episode, EpisodeSetup, LoopConfig, RiskSource};

    fn baseline_traces(count: usize) -> (Vec<RunTrace>, Vec<SyntheticTask>) {
        let plant = build_plant(&desk_model_config(21), &PlantParams::default(), 0.9).unwrap();
        let tasks = generate_tasks(&plant, 4, count).unwrap();
        let mut cfg = LoopConfig::defaults_for(plant.config());
        cfg.mitigation_enabled = false;
        cfg.record_features = true;
        cfg.risk = RiskSource::Heuristic;
        cfg.max_answer_tokens = 20;
        let traces = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut c = cfg.clone();
                c.seed = i as u64;
                run_episode(
                    &EpisodeSetup {
                        model: &plant,
                        context: &t.context,
                        question: &t.question,
                        detector: None,
                        prior: None,
                    },
                    &c,
                )
                .unwrap()
            })
            .collect();
        (traces, tasks)
    }

    #[test]
    fn broadcast_labels_are_uniform() {
        let (traces, tasks) = baseline_traces(6);
        let episodes =
            label_episodes(&traces, &tasks, LabelGranularity::Episode, (3, 5)).unwrap();
        assert_eq!(episodes.len(), 6);
        for (e, trace) in episodes.iter().zip(traces.iter()) {
            assert_eq!(e.samples.len(), trace.risk_records().count());
            let first = e.samples[0].label;
            assert!(e.samples.iter().all(|s| s.label == first));
        }
    }

    #[test]
    fn step_labels_follow_coverage() {
        let (traces, tasks) = baseline_traces(4);
        let episodes = label_episodes(&traces, &tasks, LabelGranularity::Step, (3, 5)).unwrap();
        for ((e, trace), task) in episodes.iter().zip(traces.iter()).zip(tasks.iter()) {
            let generated = trace.generated_tokens();
            let covered = ngram_coverage(&generated, &task.context, 3, 5);
            for (sample, step) in e.samples.iter().zip(trace.steps.iter()) {
                assert_eq!(sample.label, !covered[step.step - 1]);
            }
        }
    }

    #[test]
    fn misalignment_is_rejected() {
        let (traces, mut tasks) = baseline_traces(3);
        tasks.swap(0, 1);
        assert!(label_episodes(&traces, &tasks, LabelGranularity::Episode, (3, 5)).is_err());
    }

    #[test]
    fn missing_features_are_rejected() {
        let (mut traces, tasks) = baseline_traces(2);
        for step in traces[0].steps.iter_mut() {
            if let Some(r) = step.risk.as_mut() {
                r.features = None;
            }
        }
        assert!(matches!(
            label_episodes(&traces, &tasks, LabelGranularity::Episode, (3, 5)),
            Err(Error::State(_))
        ));
    }
}
