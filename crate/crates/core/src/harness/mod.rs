//! Synthetic task generation, grounding metrics, training-data labeling,
//! and ablation sweeps — the desk-scale benchmark around the control loop.

pub mod ablate;
pub mod label;
pub mod metrics;
pub mod task;

pub use ablate::{run_ablation, write_ablation_csv, AblationRow, ABLATION_CSV_HEADER};
pub use label::{label_episodes, LabelGranularity};
pub use metrics::{
    bootstrap_mitigation_ci, compute_metrics, hallucination_rate, mean_context_overlap,
    mean_span_density, mitigation_rate, EpisodeMetrics, NGRAM_RANGE,
};
pub use task::{
    build_plant, desk_model_config, generate_tasks, PlantParams, SyntheticTask, TaskParams,
};

use crate::detector::{HeadPrior, RiskModel};
use crate::error::Result;
use crate::model::Model;
use crate::orchestrator::{derive_seed, run_episode, EpisodeSetup, LoopConfig, RunTrace};

/// The batch config for one task: per-episode seed derived from the batch
/// seed and the task id, so pairings and replays stay aligned.
pub fn config_for_task(base: &LoopConfig, task: &SyntheticTask) -> LoopConfig {
    let mut cfg = base.clone();
    cfg.seed = derive_seed(base.seed, task.id);
    cfg
}

/// Run one trace per task under the given config.
pub fn run_batch(
    plant: &Model,
    tasks: &[SyntheticTask],
    base: &LoopConfig,
    detector: Option<&RiskModel>,
    prior: Option<&HeadPrior>,
) -> Result<Vec<RunTrace>> {
    tasks
        .iter()
        .map(|task| {
            let cfg = config_for_task(base, task);
            run_episode(
                &EpisodeSetup {
                    model: plant,
                    context: &task.context,
                    question: &task.question,
                    detector,
                    prior,
                },
                &cfg,
            )
        })
        .collect()
}

/// Metrics for a batch of traces aligned with their tasks.
pub fn compute_batch_metrics(
    traces: &[RunTrace],
    tasks: &[SyntheticTask],
    ngram: (usize, usize),
) -> Result<Vec<EpisodeMetrics>> {
    traces
        .iter()
        .zip(tasks.iter())
        .map(|(trace, task)| compute_metrics(trace, task, ngram))
        .collect()
}

/// Paired baseline/steered traces for every task (identical seeds).
pub struct PairedBatch {
    pub baseline: Vec<RunTrace>,
    pub steered: Vec<RunTrace>,
}

pub fn run_paired_batch(
    plant: &Model,
    tasks: &[SyntheticTask],
    base: &LoopConfig,
    detector: Option<&RiskModel>,
    prior: Option<&HeadPrior>,
) -> Result<PairedBatch> {
    let mut baseline_cfg = base.clone();
    baseline_cfg.mitigation_enabled = false;
    let mut steered_cfg = base.clone();
    steered_cfg.mitigation_enabled = true;
    Ok(PairedBatch {
        baseline: run_batch(plant, tasks, &baseline_cfg, detector, prior)?,
        steered: run_batch(plant, tasks, &steered_cfg, detector, prior)?,
    })
}
