//! Synthetic grounding tasks and the plant that fails on them.
//!
//! A task embeds key = value facts in the context and asks for one key;
//! the expected answer recites the asked value cyclically ("v1 v2 v3 v4 ;
//! v1 v2 v3 v4 ; ..."), giving the controller a horizon to act on. The
//! plant carries a seeded memory of conflicting key -> value associations;
//! its readout mixes the memorized value into the output with a weight
//! gated by pressure and by how much context attention its copy heads have
//! lost (see [`crate::model::PlantHead`]).

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PlantHead};
use crate::orchestrator::derive_seed;

/// Token ids with fixed structural meaning.
pub const SEP: u32 = 0;
pub const EQUALS: u32 = 1;
pub const QUERY: u32 = 2;
/// First key token; keys occupy [KEY_BASE, KEY_BASE + num_keys).
pub const KEY_BASE: u32 = 3;

/// Task-shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub num_keys: usize,
    pub value_len: usize,
    pub min_facts: usize,
    pub max_facts: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        // A fixed fact count keeps the context length constant, so the
        // sequence-length component of raw CRS is a common drift instead of
        // per-episode feature noise.
        Self {
            num_keys: 8,
            value_len: 3,
            min_facts: 4,
            max_facts: 4,
        }
    }
}

impl TaskParams {
    pub fn value_base(&self) -> u32 {
        KEY_BASE + self.num_keys as u32
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.num_keys < 2 || self.value_len == 0 {
            return Err(Error::Config("need >= 2 keys and a positive value length".into()));
        }
        if self.min_facts < 1 || self.min_facts > self.max_facts || self.max_facts > self.num_keys {
            return Err(Error::Config(format!(
                "fact range [{}, {}] invalid for {} keys",
                self.min_facts, self.max_facts, self.num_keys
            )));
        }
        let values = model.vocab_size as i64 - self.value_base() as i64;
        if values < 8 {
            return Err(Error::Config(format!(
                "vocabulary of {} leaves only {} value tokens",
                model.vocab_size, values
            )));
        }
        Ok(())
    }

    fn fact_len(&self) -> usize {
        // key = v1 .. vn ;
        2 + self.value_len + 1
    }

    pub fn max_context_len(&self) -> usize {
        self.max_facts * self.fact_len()
    }
}

/// One synthetic grounding episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: u64,
    pub pressure: f64,
    pub context: Vec<u32>,
    pub question: Vec<u32>,
    pub asked_key: u32,
    pub gold_value: Vec<u32>,
    /// All value sequences present in the context (the supported set).
    pub context_values: Vec<Vec<u32>>,
    /// Plausible but unsupported values the plant is pulled toward.
    pub distractors: Vec<Vec<u32>>,
}

/// Plant construction knobs beyond the backbone config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub task: TaskParams,
    /// Copy heads drawn per upper-half layer.
    pub copy_heads_per_layer: usize,
    /// Token-level noise floor routed through the attention pointer.
    pub noise: f64,
    /// Probe prompts used to place the gate.
    pub calibration_probes: usize,
    /// Gate width as a fraction of the probe spread; the probe spread mixes
    /// between- and within-episode variation and the between component is
    /// the one the gate should resolve.
    pub gate_width_scale: f64,
    /// Lower bound on the gate width (relative-CRS units).
    pub min_gate_width: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            task: TaskParams::default(),
            copy_heads_per_layer: 2,
            noise: 0.005,
            calibration_probes: 48,
            gate_width_scale: 0.5,
            min_gate_width: 0.10,
        }
    }
}

/// Desk-scale backbone defaults used by the CLI and the test harness.
pub fn desk_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        num_heads: 8,
        head_dim: 4,
        vocab_size: 64,
        max_seq_len: 128,
        seed,
    }
}

fn sample_value(rng: &mut ChaCha8Rng, params: &TaskParams, vocab: usize) -> Vec<u32> {
    let lo = params.value_base();
    let hi = vocab as u32;
    (0..params.value_len)
        .map(|_| rng.random_range(lo..hi))
        .collect()
}

/// Build a plant at the given pressure: seeded backbone, seeded memory,
/// seeded copy-head subset, and a gate calibrated on probe prompts so the
/// attention-dependent mixture sits in its responsive region.
pub fn build_plant(
    model_config: &ModelConfig,
    plant_params: &PlantParams,
    pressure: f64,
) -> Result<Model> {
    plant_params.task.validate(model_config)?;
    if !(0.0..=1.0).contains(&pressure) {
        return Err(Error::Config(format!(
            "pressure must be in [0, 1], got {pressure}"
        )));
    }
    let task = &plant_params.task;
    let mut model = Model::new(model_config.clone())?;

    // Memorized associations, one per key.
    let mut mem_rng = ChaCha8Rng::seed_from_u64(derive_seed(model_config.seed, 0x4d454d));
    let mut memory = BTreeMap::new();
    for i in 0..task.num_keys {
        let key = KEY_BASE + i as u32;
        memory.insert(key, sample_value(&mut mem_rng, task, model_config.vocab_size));
    }

    // Copy heads: a proper seeded subset of the upper-half layers.
    let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(model_config.seed, 0xc0bb));
    let per_layer = plant_params.copy_heads_per_layer.min(model_config.num_heads);
    let mut copy_heads = Vec::new();
    for layer in model_config.num_layers / 2..model_config.num_layers {
        let mut heads: Vec<usize> = (0..model_config.num_heads).collect();
        heads.shuffle(&mut head_rng);
        let mut kept: Vec<usize> = heads.into_iter().take(per_layer).collect();
        kept.sort_unstable();
        copy_heads.extend(kept.into_iter().map(|h| (layer, h)));
    }

    let mut plant = PlantHead {
        pressure,
        memory,
        value_len: task.value_len,
        min_facts: task.min_facts,
        max_facts: task.max_facts,
        separator: SEP,
        equals: EQUALS,
        query_marker: QUERY,
        copy_heads,
        gate_center: 0.5,
        gate_width: 1.0,
        noise: plant_params.noise,
    };

    // Two-phase gate calibration against this backbone's actual attention.
    // Phase 1: teacher-forced recitation probes (grounded and memorized)
    // give a provisional center. Phase 2: free-running pilot rollouts under
    // the provisional gate sample the signal in the live regime, which is
    // what the final gate must resolve.
    model.set_plant(plant.clone())?;
    let probe_seed = derive_seed(model_config.seed, 0xca11b);
    let mut teacher = Vec::new();
    for i in 0..plant_params.calibration_probes {
        let t = generate_task_inner(&model, probe_seed, i as u64, pressure)?;
        let recite = if i % 2 == 0 {
            t.gold_value.clone()
        } else {
            model.plant().unwrap().memory[&t.asked_key].clone()
        };
        let mut cycle = recite;
        cycle.push(SEP);
        let mut prefix: Vec<u32> = t.context.clone();
        prefix.extend_from_slice(&t.question);
        for _ in 0..3 {
            if let Some(rel) = model.probe_relative_reliance(&prefix)? {
                teacher.push(rel);
            }
            prefix.extend_from_slice(&cycle);
        }
    }
    let (center, spread) = location_scale(&teacher)?;
    plant.gate_center = center;
    plant.gate_width = (plant_params.gate_width_scale * spread).max(plant_params.min_gate_width);
    model.set_plant(plant.clone())?;

    let live = pilot_reliance_samples(&model, probe_seed, plant_params)?;
    let (center, spread) = location_scale(&live)?;
    plant.gate_center = center;
    plant.gate_width = (plant_params.gate_width_scale * spread).max(plant_params.min_gate_width);
    model.set_plant(plant)?;
    Ok(model)
}

fn location_scale(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::State("plant calibration produced no samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let std = (samples.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / samples.len() as f64)
        .sqrt();
    Ok((median, std))
}

/// Free-running seeded rollouts under the current gate; returns the gate
/// signal sampled at every step.
fn pilot_reliance_samples(
    model: &Model,
    seed: u64,
    plant_params: &PlantParams,
) -> Result<Vec<f64>> {
    let head = model.plant().expect("plant set").clone();
    let pressure = head.pressure;
    let pilots = (plant_params.calibration_probes / 2).max(8);
    let pilot_len = 48usize;
    let mut samples = Vec::new();
    for i in 0..pilots {
        let t = generate_task_inner(model, derive_seed(seed, 0xf1107), i as u64, pressure)?;
        let mut prefix: Vec<u32> = t.context.clone();
        prefix.extend_from_slice(&t.question);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xf1108 + i as u64));
        for _ in 0..pilot_len {
            if prefix.len() >= model.config().max_seq_len {
                break;
            }
            let out = model.decode_step(&prefix, None, true)?;
            let snap = out.snapshot.expect("capture requested");
            samples.push(Model::relative_reliance(&head, &snap.probs, t.context.len()));
            // categorical draw at unit temperature
            let mut probs: Vec<f64> = out.logits.clone();
            crate::model::softmax_in_place(&mut probs);
            let u: f64 = rng.random::<f64>();
            let mut acc = 0.0;
            let mut tok = (probs.len() - 1) as u32;
            for (v, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = v as u32;
                    break;
                }
            }
            prefix.push(tok);
        }
    }
    Ok(samples)
}

fn generate_task_inner(
    plant: &Model,
    seed: u64,
    index: u64,
    pressure: f64,
) -> Result<SyntheticTask> {
    let head = plant
        .plant()
        .ok_or_else(|| Error::State("task generation requires a plant model".into()))?;
    let vocab = plant.config().vocab_size;
    let keys: Vec<u32> = head.memory.keys().cloned().collect();
    let params = TaskParams {
        num_keys: keys.len(),
        value_len: head.value_len,
        min_facts: head.min_facts.min(keys.len()),
        max_facts: head.max_facts.min(keys.len()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
    let n_facts = rng.random_range(params.min_facts..=params.max_facts);
    let mut pool = keys.clone();
    pool.shuffle(&mut rng);
    let fact_keys: Vec<u32> = pool.into_iter().take(n_facts).collect();
    let asked_idx = rng.random_range(0..n_facts);
    let asked_key = fact_keys[asked_idx];
    let forbidden = head.memory.get(&asked_key).cloned().unwrap_or_default();

    let mut values: Vec<Vec<u32>> = Vec::with_capacity(n_facts);
    for _ in 0..n_facts {
        loop {
            let v = sample_value(&mut rng, &params, vocab);
            if v != forbidden && !values.contains(&v) {
                values.push(v);
                break;
            }
        }
    }

    let mut context = Vec::with_capacity(n_facts * params.fact_len());
    for (k, v) in fact_keys.iter().zip(values.iter()) {
        context.push(*k);
        context.push(EQUALS);
        context.extend_from_slice(v);
        context.push(SEP);
    }
    let question = vec![QUERY, asked_key];
    let gold_value = values[asked_idx].clone();

    Ok(SyntheticTask {
        id: index,
        pressure,
        context,
        question,
        asked_key,
        gold_value,
        context_values: values,
        distractors: vec![forbidden],
    })
}

/// Deterministic task list for a plant. The plant's memory supplies the
/// distractor (memorized) value for each asked key; fact values are drawn
/// so the distractor never appears in the context.
pub fn generate_tasks(plant: &Model, seed: u64, count: usize) -> Result<Vec<SyntheticTask>> {
    if count == 0 {
        return Err(Error::Config("task count must be >= 1".into()));
    }
    let pressure = plant
        .plant()
        .ok_or_else(|| Error::State("task generation requires a plant model".into()))?
        .pressure;
    (0..count as u64)
        .map(|i| generate_task_inner(plant, seed, i, pressure))
        .collect()
}
