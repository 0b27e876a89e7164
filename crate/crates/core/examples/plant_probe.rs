//! Scratch probe for plant behavior (hallucination rates, detector quality,
//! steering effect). Not part of the deliverable surface.

use ctxsteer::detector::{train_default, tune_threshold, TrainConfig};
use ctxsteer::harness::{
    build_plant, compute_batch_metrics, desk_model_config, generate_tasks, hallucination_rate,
    label_episodes, mean_context_overlap, mean_span_density, mitigation_rate, run_batch,
    run_paired_batch, LabelGranularity, PlantParams, NGRAM_RANGE,
};
use ctxsteer::orchestrator::{LoopConfig, RiskSource};

fn main() {
    let model_cfg = desk_model_config(42);
    let plant_params = PlantParams::default();

    let mut base = LoopConfig::defaults_for(&model_cfg);
    base.risk = RiskSource::Heuristic;
    base.mitigation_enabled = false;
    base.seed = 7;

    // 1. pressure sweep, baseline hallucination rates
    println!("== pressure sweep (200 tasks each) ==");
    let pressures = [0.0, 0.25, 0.5, 0.75, 1.0];
    for &p in &pressures {
        let plant = build_plant(&model_cfg, &plant_params, p).unwrap();
        let head = plant.plant().unwrap();
        let tasks = generate_tasks(&plant, 1000, 200).unwrap();
        let traces = run_batch(&plant, &tasks, &base, None, None).unwrap();
        let metrics = compute_batch_metrics(&traces, &tasks, NGRAM_RANGE).unwrap();
        println!(
            "pressure {:4.2}: halluc {:5.3}  co {:5.3}  sd {:6.3}  gate(center={:.4}, width={:.4})",
            p,
            hallucination_rate(&metrics),
            mean_context_overlap(&metrics),
            mean_span_density(&metrics),
            head.gate_center,
            head.gate_width,
        );
    }

    // 2. detector training at the operating pressure
    println!("== detector at pressure 0.75 (1000 episodes) ==");
    let mut all_episodes = Vec::new();
    let mut gen_cfg = base.clone();
    gen_cfg.record_features = true;
    {
        let plant = build_plant(&model_cfg, &plant_params, 0.75).unwrap();
        let tasks = generate_tasks(&plant, 1000, 1000).unwrap();
        let traces = run_batch(&plant, &tasks, &gen_cfg, None, None).unwrap();
        let eps =
            label_episodes(&traces, &tasks, LabelGranularity::Episode, NGRAM_RANGE).unwrap();

        // oracle ceiling: rank episodes by the true gate signal
        let copy_heads = plant.plant().unwrap().copy_heads.clone();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (trace, e) in traces.iter().zip(eps.iter()) {
            let ctx = trace.context_tokens.len();
            let q = trace.question_tokens.len();
            let rels: Vec<f64> = trace
                .risk_records()
                .map(|r| {
                    let c: f64 = copy_heads
                        .iter()
                        .map(|&(l, h)| 1.0 / (1.0 + (-r.crs[l][h]).exp()))
                        .sum::<f64>()
                        / copy_heads.len() as f64;
                    let n = (ctx + q + r.step - 1) as f64;
                    let u = ctx as f64 / n;
                    (c / (1.0 - c)).ln() - (u / (1.0 - u)).ln()
                })
                .collect();
            scores.push(-rels.iter().sum::<f64>() / rels.len() as f64);
            labels.push(e.is_positive());
        }
        let oracle = ctxsteer::detector::auroc(&scores, &labels).unwrap();
        println!("oracle (episode mean -rel) AUROC: {oracle:.4}");
        all_episodes.extend(eps);
    }
    let n_pos = all_episodes.iter().filter(|e| e.is_positive()).count();
    println!(
        "episodes: {} ({} positive, {} negative)",
        all_episodes.len(),
        n_pos,
        all_episodes.len() - n_pos
    );
    let layout = gen_cfg.feature_layout(&model_cfg);
    let t0 = std::time::Instant::now();
    let outcome = train_default(&all_episodes, &layout, &TrainConfig::default()).unwrap();
    println!(
        "validation AUROC: {:.4}  (train time {:?})",
        outcome.validation_auroc,
        t0.elapsed()
    );
    let val_eps: Vec<&_> = outcome.split.val.iter().map(|&i| &all_episodes[i]).collect();
    let tau = tune_threshold(&outcome.model, &val_eps).unwrap();
    println!("tuned tau: {tau:.4}");

    // 3. steering at pressure 0.75
    println!("== paired eval at pressure 0.75 (200 tasks) ==");
    let plant = build_plant(&model_cfg, &plant_params, 0.75).unwrap();
    let tasks = generate_tasks(&plant, 77, 200).unwrap();
    let prior = outcome.model.export_prior().unwrap();
    let mut eval_cfg = LoopConfig::defaults_for(&model_cfg);
    eval_cfg.risk = RiskSource::Detector;
    eval_cfg.controller.target = tau;
    eval_cfg.seed = 9;
    let mut detector = outcome.model.clone();
    detector.threshold = Some(tau);
    let t0 = std::time::Instant::now();
    let paired = run_paired_batch(&plant, &tasks, &eval_cfg, Some(&detector), Some(&prior)).unwrap();
    let bm = compute_batch_metrics(&paired.baseline, &tasks, NGRAM_RANGE).unwrap();
    let sm = compute_batch_metrics(&paired.steered, &tasks, NGRAM_RANGE).unwrap();
    println!(
        "baseline: halluc {:.3} co {:.3} sd {:.3}",
        hallucination_rate(&bm),
        mean_context_overlap(&bm),
        mean_span_density(&bm)
    );
    println!(
        "steered:  halluc {:.3} co {:.3} sd {:.3}",
        hallucination_rate(&sm),
        mean_context_overlap(&sm),
        mean_span_density(&sm)
    );
    println!(
        "mitigation: {:.3}  ({} pairs in {:?})",
        mitigation_rate(&bm, &sm).unwrap(),
        tasks.len(),
        t0.elapsed()
    );

    // gain diagnostics on steered runs
    let mut max_gain: f64 = 0.0;
    let mut risk_sum = 0.0;
    let mut risk_n = 0usize;
    for t in &paired.steered {
        for r in t.risk_records() {
            if let Some(c) = &r.controller {
                max_gain = max_gain.max(c.gain);
            }
            if let Some(p) = r.risk {
                risk_sum += p;
                risk_n += 1;
            }
        }
    }
    println!("max gain seen: {max_gain:.4}, mean risk {:.4}", risk_sum / risk_n as f64);

    // 4. relative-reliance variance decomposition on baseline traces
    let copy_heads = plant.plant().unwrap().copy_heads.clone();
    let rel_of = |trace: &ctxsteer::orchestrator::RunTrace| -> Vec<f64> {
        let ctx = trace.context_tokens.len();
        let q = trace.question_tokens.len();
        trace
            .risk_records()
            .map(|r| {
                let c: f64 = copy_heads
                    .iter()
                    .map(|&(l, h)| {
                        let crs = r.crs[l][h];
                        1.0 / (1.0 + (-crs).exp())
                    })
                    .sum::<f64>()
                    / copy_heads.len() as f64;
                let n = (ctx + q + r.step - 1) as f64;
                let u = ctx as f64 / n;
                (c / (1.0 - c)).ln() - (u / (1.0 - u)).ln()
            })
            .collect()
    };
    let per_episode: Vec<Vec<f64>> = paired.baseline.iter().map(rel_of).collect();
    let ep_means: Vec<f64> = per_episode
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let grand = ep_means.iter().sum::<f64>() / ep_means.len() as f64;
    let between = (ep_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>()
        / ep_means.len() as f64)
        .sqrt();
    let within = (per_episode
        .iter()
        .zip(ep_means.iter())
        .map(|(v, m)| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
        .sum::<f64>()
        / per_episode.len() as f64)
        .sqrt();
    println!(
        "rel stats: grand mean {grand:.3}, between-episode std {between:.3}, within-episode std {within:.3}, gate(center={:.3}, width={:.3})",
        plant.plant().unwrap().gate_center,
        plant.plant().unwrap().gate_width
    );
    // steered rel shift at late steps
    let late = |traces: &[ctxsteer::orchestrator::RunTrace]| -> f64 {
        let vals: Vec<f64> = traces
            .iter()
            .map(rel_of)
            .filter(|v| v.len() >= 5)
            .map(|v| v[v.len() - 5..].iter().sum::<f64>() / 5.0)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    println!(
        "late-step rel: baseline {:.3}, steered {:.3}",
        late(&paired.baseline),
        late(&paired.steered)
    );
}
