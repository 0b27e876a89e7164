//! A small deterministic causal multi-head decoder.
//!
//! The model is the plant the control loop acts on: it exposes the last
//! query row's attention per (layer, head) for reading, and accepts a
//! pre-softmax additive bias on context-key logits for writing. Blocks are
//! standard pre-norm decoder blocks (multi-head attention + 2-layer MLP)
//! with absolute position embeddings; all math runs in f64.
//!
//! An optional [`PlantHead`] replaces the unembedding readout with a
//! retrieval-vs-memorized mixture whose memorized weight is gated by the
//! live context-attention mass of designated copy heads. This is what gives
//! the synthetic task a controllable hallucination failure mode: starve the
//! copy heads of context attention and the memorized association wins.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;
const LOGIT_FLOOR: f64 = 1e-300;

/// Dimensions and seed of a toy decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::Config(format!(
                "num_layers must be >= 2, got {}",
                self.num_layers
            )));
        }
        if self.num_heads < 2 {
            return Err(Error::Config(format!(
                "num_heads must be >= 2, got {}",
                self.num_heads
            )));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("head_dim must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }
}

/// Index bookkeeping for the prompt partition at one decode step.
///
/// Key positions are 0-based: context keys occupy `[0, context_len)`,
/// followed by the question and the `generated_len` tokens produced so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub context_len: usize,
    pub question_len: usize,
    pub generated_len: usize,
}

impl PromptLayout {
    pub fn new(context_len: usize, question_len: usize, generated_len: usize) -> Result<Self> {
        if context_len == 0 {
            return Err(Error::Contract(
                "prompt layout requires at least one context key".into(),
            ));
        }
        Ok(Self {
            context_len,
            question_len,
            generated_len,
        })
    }

    /// Total number of key positions visible to the current query.
    pub fn key_count(&self) -> usize {
        self.context_len + self.question_len + self.generated_len
    }

    pub fn context_keys(&self) -> Range<usize> {
        0..self.context_len
    }
}

/// Nonnegative pre-softmax bias magnitudes for selected heads, applied to
/// the first `context_len` key positions of the last query row only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPlan {
    pub context_len: usize,
    pub entries: Vec<BiasEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEntry {
    pub layer: usize,
    pub head: usize,
    pub magnitude: f64,
}

impl BiasPlan {
    pub fn empty() -> Self {
        Self {
            context_len: 0,
            entries: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn validate(&self, config: &ModelConfig, prefix_len: usize) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        if self.context_len == 0 {
            return Err(Error::Contract(
                "bias plan has entries but no context keys".into(),
            ));
        }
        if self.context_len > prefix_len {
            return Err(Error::Contract(format!(
                "bias touches key positions [0, {}) outside the {} available keys",
                self.context_len, prefix_len
            )));
        }
        for e in &self.entries {
            if e.layer >= config.num_layers || e.head >= config.num_heads {
                return Err(Error::Contract(format!(
                    "bias entry addresses head ({}, {}) outside a {}x{} model",
                    e.layer, e.head, config.num_layers, config.num_heads
                )));
            }
            if !e.magnitude.is_finite() || e.magnitude < 0.0 {
                return Err(Error::Contract(format!(
                    "bias magnitude must be finite and nonnegative, got {}",
                    e.magnitude
                )));
            }
        }
        Ok(())
    }
}

/// Last-query-row attention state for every (layer, head) at one step.
///
/// `pre_bias_logits` is the row before any plan was applied,
/// `post_bias_logits` after, and `probs` the softmax of the post-bias row
/// (what the model actually used on this forward pass).
#[derive(Debug, Clone)]
pub struct AttentionSnapshot {
    pub step: usize,
    pub key_count: usize,
    pub pre_bias_logits: Vec<Vec<Vec<f64>>>,
    pub post_bias_logits: Vec<Vec<Vec<f64>>>,
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl AttentionSnapshot {
    pub fn probs(&self, layer: usize, head: usize) -> &[f64] {
        &self.probs[layer][head]
    }
}

/// Output of one forward pass: next-token logits and, when requested, the
/// attention snapshot taken on the same pass.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub snapshot: Option<AttentionSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NormWeights {
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl NormWeights {
    fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockWeights {
    attn_norm: NormWeights,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ffn_norm: NormWeights,
    ffn_in: Vec<f64>,
    ffn_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Weights {
    token_embedding: Vec<f64>,
    position_embedding: Vec<f64>,
    blocks: Vec<BlockWeights>,
    final_norm: NormWeights,
    unembedding: Vec<f64>,
}

/// Readout head that turns the backbone into a grounding-vs-memorization
/// plant. See the module docs; built by the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantHead {
    /// Strength of the parametric pull, in [0, 1]. This is the exact ceiling
    /// of the memorized-mixture weight, reached at full context starvation.
    pub pressure: f64,
    /// Memorized key -> value associations (the model's "parametric
    /// knowledge"); conflicts with the prompt context by construction.
    pub memory: BTreeMap<u32, Vec<u32>>,
    pub value_len: usize,
    /// Facts per generated task (the task family is part of the plant).
    pub min_facts: usize,
    pub max_facts: usize,
    pub separator: u32,
    pub equals: u32,
    pub query_marker: u32,
    /// Heads whose context-attention mass gates the memorized mixture.
    pub copy_heads: Vec<(usize, usize)>,
    /// Gate location in relative-CRS units (copy-head context-mass logit
    /// minus the uniform-attention logit, which removes the mechanical
    /// sequence-length drift). Calibrated against the backbone at build.
    pub gate_center: f64,
    /// Gate steepness (sigmoid width in relative-CRS units).
    pub gate_width: f64,
    /// Token-level noise floor routed through the attention pointer.
    pub noise: f64,
}

/// A toy causal decoder with optional plant readout.
///
/// Weights are immutable after construction and safe to share across
/// threads; each decode stream owns its own prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    plant: Option<PlantHead>,
}

fn sample_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid stddev");
    (0..rows * cols).map(|_| dist.sample(rng)).collect()
}

impl Model {
    /// Build a model with seeded Gaussian weights (std 1/sqrt(fan-in)).
    /// Identical configs produce bit-identical models.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let token_embedding = sample_matrix(&mut rng, config.vocab_size, d, d);
        let position_embedding = sample_matrix(&mut rng, config.max_seq_len, d, d);
        let blocks = (0..config.num_layers)
            .map(|_| BlockWeights {
                attn_norm: NormWeights::identity(d),
                wq: sample_matrix(&mut rng, d, d, d),
                wk: sample_matrix(&mut rng, d, d, d),
                wv: sample_matrix(&mut rng, d, d, d),
                wo: sample_matrix(&mut rng, d, d, d),
                ffn_norm: NormWeights::identity(d),
                ffn_in: sample_matrix(&mut rng, d, 4 * d, d),
                ffn_out: sample_matrix(&mut rng, 4 * d, d, 4 * d),
            })
            .collect();
        let final_norm = NormWeights::identity(d);
        let unembedding = sample_matrix(&mut rng, d, config.vocab_size, d);
        Ok(Self {
            config,
            weights: Weights {
                token_embedding,
                position_embedding,
                blocks,
                final_norm,
                unembedding,
            },
            plant: None,
        })
    }

    pub fn with_plant(config: ModelConfig, plant: PlantHead) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.set_plant(plant)?;
        Ok(model)
    }

    pub fn set_plant(&mut self, plant: PlantHead) -> Result<()> {
        if !(0.0..=1.0).contains(&plant.pressure) {
            return Err(Error::Config(format!(
                "plant pressure must be in [0, 1], got {}",
                plant.pressure
            )));
        }
        if plant.gate_width <= 0.0 || plant.value_len == 0 {
            return Err(Error::Config("invalid plant gate parameters".into()));
        }
        for &(l, h) in &plant.copy_heads {
            if l >= self.config.num_layers || h >= self.config.num_heads {
                return Err(Error::Config(format!(
                    "plant copy head ({l}, {h}) outside the model"
                )));
            }
        }
        self.plant = Some(plant);
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plant(&self) -> Option<&PlantHead> {
        self.plant.as_ref()
    }

    /// One forward pass over `prefix`, returning next-token logits and an
    /// optional snapshot of the last query row taken on the same pass.
    ///
    /// If `bias` is present, the selected heads' context-key logits on the
    /// last query row are shifted before softmax; nothing else is touched.
    pub fn decode_step(
        &self,
        prefix: &[u32],
        bias: Option<&BiasPlan>,
        capture_attention: bool,
    ) -> Result<StepOutput> {
        self.forward(prefix, bias, capture_attention, None)
    }

    #[doc(hidden)]
    /// Full per-row attention of one head (test hook for the causality
    /// invariant). Row `i` has exactly `i + 1` entries: attention to
    /// positions beyond the query index is structurally zero.
    pub fn attention_rows(&self, prefix: &[u32], layer: usize, head: usize) -> Result<Vec<Vec<f64>>> {
        let mut rows = vec![Vec::new(); prefix.len()];
        self.forward(prefix, None, false, Some((layer, head, &mut rows)))?;
        Ok(rows)
    }

    fn forward(
        &self,
        prefix: &[u32],
        bias: Option<&BiasPlan>,
        capture_attention: bool,
        mut row_probe: Option<(usize, usize, &mut Vec<Vec<f64>>)>,
    ) -> Result<StepOutput> {
        let cfg = &self.config;
        let n = prefix.len();
        if n == 0 {
            return Err(Error::Contract("decode_step requires a nonempty prefix".into()));
        }
        if n > cfg.max_seq_len {
            return Err(Error::SequenceLength(format!(
                "prefix length {} exceeds max_seq_len {}",
                n, cfg.max_seq_len
            )));
        }
        for &t in prefix {
            if t as usize >= cfg.vocab_size {
                return Err(Error::Contract(format!(
                    "token id {} outside vocabulary of size {}",
                    t, cfg.vocab_size
                )));
            }
        }
        if let Some(plan) = bias {
            plan.validate(cfg, n)?;
        }

        let d = cfg.d_model();
        let hd = cfg.head_dim;
        let n_heads = cfg.num_heads;
        let scale = 1.0 / (hd as f64).sqrt();

        // Per-head bias magnitudes for O(1) lookup.
        let mut bias_by_head = vec![None::<f64>; cfg.num_layers * n_heads];
        let mut bias_ctx = 0usize;
        if let Some(plan) = bias {
            bias_ctx = plan.context_len;
            for e in &plan.entries {
                bias_by_head[e.layer * n_heads + e.head] = Some(e.magnitude);
            }
        }

        // Embeddings.
        let mut x = vec![0.0f64; n * d];
        for (i, &tok) in prefix.iter().enumerate() {
            let emb = &self.weights.token_embedding[tok as usize * d..(tok as usize + 1) * d];
            let pos = &self.weights.position_embedding[i * d..(i + 1) * d];
            for c in 0..d {
                x[i * d + c] = emb[c] + pos[c];
            }
        }

        // Last-row probs for every head are kept even without capture: the
        // plant readout consumes its copy heads' rows each step.
        let mut last_probs: Vec<Vec<Vec<f64>>> =
            vec![vec![Vec::new(); n_heads]; cfg.num_layers];
        let mut pre_logits: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut post_logits: Vec<Vec<Vec<f64>>> = Vec::new();
        if capture_attention {
            pre_logits = vec![vec![Vec::new(); n_heads]; cfg.num_layers];
            post_logits = vec![vec![Vec::new(); n_heads]; cfg.num_layers];
        }

        let mut normed = vec![0.0f64; n * d];
        let mut q = vec![0.0f64; n * d];
        let mut k = vec![0.0f64; n * d];
        let mut v = vec![0.0f64; n * d];
        let mut attn = vec![0.0f64; n * d];
        let mut proj = vec![0.0f64; n * d];
        let mut mid = vec![0.0f64; n * 4 * d];
        let mut row = vec![0.0f64; n];

        for (layer, block) in self.weights.blocks.iter().enumerate() {
            layer_norm_rows(&x, n, d, &block.attn_norm, &mut normed);
            matmul_rows(&normed, n, d, &block.wq, d, &mut q);
            matmul_rows(&normed, n, d, &block.wk, d, &mut k);
            matmul_rows(&normed, n, d, &block.wv, d, &mut v);
            attn.iter_mut().for_each(|a| *a = 0.0);

            for head in 0..n_heads {
                let off = head * hd;
                for i in 0..n {
                    let qi = &q[i * d + off..i * d + off + hd];
                    for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                        let kj = &k[j * d + off..j * d + off + hd];
                        let mut dot = 0.0;
                        for c in 0..hd {
                            dot += qi[c] * kj[c];
                        }
                        *slot = dot * scale;
                    }
                    let visible = &mut row[..i + 1];
                    if i == n - 1 {
                        if capture_attention {
                            pre_logits[layer][head] = visible.to_vec();
                        }
                        if let Some(b) = bias_by_head[layer * n_heads + head] {
                            for slot in visible.iter_mut().take(bias_ctx) {
                                *slot += b;
                            }
                        }
                        if capture_attention {
                            post_logits[layer][head] = visible.to_vec();
                        }
                    }
                    softmax_in_place(visible);
                    if i == n - 1 {
                        last_probs[layer][head] = visible.to_vec();
                    }
                    if let Some((pl, ph, rows)) = row_probe.as_mut() {
                        if *pl == layer && *ph == head {
                            rows[i] = visible.to_vec();
                        }
                    }
                    let out = i * d + off;
                    for (j, &p) in visible.iter().enumerate() {
                        let vj = &v[j * d + off..j * d + off + hd];
                        for c in 0..hd {
                            attn[out + c] += p * vj[c];
                        }
                    }
                }
            }

            matmul_rows(&attn, n, d, &block.wo, d, &mut proj);
            for (xi, pi) in x.iter_mut().zip(proj.iter()) {
                *xi += pi;
            }

            layer_norm_rows(&x, n, d, &block.ffn_norm, &mut normed);
            matmul_rows(&normed, n, d, &block.ffn_in, 4 * d, &mut mid);
            mid.iter_mut().for_each(|m| {
                if *m < 0.0 {
                    *m = 0.0;
                }
            });
            matmul_rows(&mid, n, 4 * d, &block.ffn_out, d, &mut proj);
            for (xi, pi) in x.iter_mut().zip(proj.iter()) {
                *xi += pi;
            }
        }

        let logits = match self.plant_distribution(prefix, &last_probs) {
            Some(dist) => dist.iter().map(|p| (p + LOGIT_FLOOR).ln()).collect(),
            None => {
                // Plain LM readout: final norm + unembedding on the last position.
                let mut h_last = vec![0.0f64; d];
                layer_norm_rows(
                    &x[(n - 1) * d..n * d],
                    1,
                    d,
                    &self.weights.final_norm,
                    &mut h_last,
                );
                let mut logits = vec![0.0f64; cfg.vocab_size];
                for c in 0..d {
                    let hc = h_last[c];
                    let wrow = &self.weights.unembedding[c * cfg.vocab_size..(c + 1) * cfg.vocab_size];
                    for (o, w) in wrow.iter().enumerate() {
                        logits[o] += hc * w;
                    }
                }
                logits
            }
        };

        let snapshot = if capture_attention {
            Some(AttentionSnapshot {
                step: 0,
                key_count: n,
                pre_bias_logits: pre_logits,
                post_bias_logits: post_logits,
                probs: last_probs,
            })
        } else {
            None
        };

        Ok(StepOutput { logits, snapshot })
    }

    /// Mean context-attention mass of the plant's copy heads over the first
    /// `context_len` keys of the last query row.
    fn copy_head_context_mass(
        plant: &PlantHead,
        last_probs: &[Vec<Vec<f64>>],
        context_len: usize,
    ) -> f64 {
        let mut c = 0.0;
        for &(l, h) in &plant.copy_heads {
            c += last_probs[l][h][..context_len].iter().sum::<f64>();
        }
        c / plant.copy_heads.len() as f64
    }

    /// Copy-head context-attention logit relative to uniform attention:
    /// logit(context mass) - logit(|C| / keys). A pre-softmax bias of b on
    /// all context keys of a head shifts its term by exactly +b, and the
    /// uniform reference removes the mechanical drift from the growing
    /// answer, so this is the signal the gate listens to.
    pub(crate) fn relative_reliance(plant: &PlantHead, last_probs: &[Vec<Vec<f64>>], context_len: usize) -> f64 {
        let n = last_probs[plant.copy_heads[0].0][plant.copy_heads[0].1].len();
        let c = Self::copy_head_context_mass(plant, last_probs, context_len)
            .clamp(1e-9, 1.0 - 1e-9);
        let u = (context_len as f64 / n as f64).clamp(1e-9, 1.0 - 1e-9);
        (c / (1.0 - c)).ln() - (u / (1.0 - u)).ln()
    }

    fn plant_distribution(
        &self,
        prefix: &[u32],
        last_probs: &[Vec<Vec<f64>>],
    ) -> Option<Vec<f64>> {
        let plant = self.plant.as_ref()?;
        // The question never appears inside the context, so the first marker
        // is the real one even if generated junk repeats it later.
        let qpos = prefix.iter().position(|&t| t == plant.query_marker)?;
        if qpos == 0 || qpos + 1 >= prefix.len() {
            return None;
        }
        let asked = prefix[qpos + 1];
        let context = &prefix[..qpos];
        let generated = &prefix[qpos + 2..];
        let cycle = plant.value_len + 1;
        let slot = generated.len() % cycle;

        let rel = Self::relative_reliance(plant, last_probs, qpos);
        let g = plant.pressure * sigmoid((plant.gate_center - rel) / plant.gate_width);

        // Attention pointer: copy distribution over the tokens the copy
        // heads actually look at.
        let mut pointer = vec![0.0f64; self.config.vocab_size];
        for &(l, h) in &plant.copy_heads {
            for (i, &p) in last_probs[l][h].iter().enumerate() {
                pointer[prefix[i] as usize] += p;
            }
        }
        let inv = 1.0 / plant.copy_heads.len() as f64;
        pointer.iter_mut().for_each(|p| *p *= inv);

        let target = |value: &[u32]| -> u32 {
            if slot < plant.value_len {
                value[slot]
            } else {
                plant.separator
            }
        };
        let gold = find_fact_value(context, asked, plant.equals, plant.value_len);
        let mem = plant.memory.get(&asked).map(|v| v.as_slice());

        // Within a cycle the plant continues whichever source the cycle
        // started from (an LM committing to a span); the memorized-vs-context
        // decision is taken once per cycle, at slot 0.
        let partial = &generated[generated.len() - slot..];
        let matches = |v: Option<&[u32]>| -> bool {
            slot > 0 && v.is_some_and(|v| partial == &v[..slot.min(plant.value_len)])
        };
        let gold_match = matches(gold);
        let mem_match = matches(mem);

        let mut dist = vec![0.0f64; self.config.vocab_size];
        let mut emit = |value: Option<&[u32]>, weight: f64| match value {
            Some(v) => {
                dist[target(v) as usize] += weight * (1.0 - plant.noise);
                for (d, p) in dist.iter_mut().zip(pointer.iter()) {
                    *d += weight * plant.noise * p;
                }
            }
            None => {
                for (d, p) in dist.iter_mut().zip(pointer.iter()) {
                    *d += weight * p;
                }
            }
        };
        if gold_match && !mem_match {
            emit(gold, 1.0);
        } else if mem_match && !gold_match {
            emit(mem, 1.0);
        } else {
            emit(gold, 1.0 - g);
            emit(mem, g);
        }
        Some(dist)
    }

    /// The gate signal (relative reliance of the copy heads) for a given
    /// prefix; used during plant calibration.
    pub fn probe_relative_reliance(&self, prefix: &[u32]) -> Result<Option<f64>> {
        let plant = match &self.plant {
            Some(p) => p.clone(),
            None => return Ok(None),
        };
        let out = self.decode_step(prefix, None, true)?;
        let snap = out.snapshot.expect("capture requested");
        let qpos = match prefix.iter().position(|&t| t == plant.query_marker) {
            Some(p) if p > 0 => p,
            _ => return Ok(None),
        };
        Ok(Some(Self::relative_reliance(&plant, &snap.probs, qpos)))
    }

    // ---- serialization ------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let doc = ModelFile::from_model(self);
        serde_json::to_writer(&mut w, &doc)?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let doc: ModelFile = serde_json::from_reader(r)?;
        doc.into_model()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn find_fact_value<'a>(
    context: &'a [u32],
    key: u32,
    equals: u32,
    value_len: usize,
) -> Option<&'a [u32]> {
    let mut i = 0;
    while i + 1 < context.len() {
        if context[i] == key && context[i + 1] == equals && i + 2 + value_len <= context.len() {
            return Some(&context[i + 2..i + 2 + value_len]);
        }
        i += 1;
    }
    None
}

/// Numerically stable softmax, normalizing in place.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

fn layer_norm_rows(input: &[f64], n: usize, d: usize, norm: &NormWeights, out: &mut [f64]) {
    for i in 0..n {
        let row = &input[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        let orow = &mut out[i * d..(i + 1) * d];
        for c in 0..d {
            orow[c] = norm.gamma[c] * (row[c] - mean) * inv + norm.beta[c];
        }
    }
}

/// out[n x d_out] = input[n x d_in] * w[d_in x d_out], row-major.
fn matmul_rows(input: &[f64], n: usize, d_in: usize, w: &[f64], d_out: usize, out: &mut [f64]) {
    out[..n * d_out].iter_mut().for_each(|o| *o = 0.0);
    for i in 0..n {
        let irow = &input[i * d_in..(i + 1) * d_in];
        let orow = &mut out[i * d_out..(i + 1) * d_out];
        for (c, &xi) in irow.iter().enumerate() {
            let wrow = &w[c * d_out..(c + 1) * d_out];
            for (o, &wv) in wrow.iter().enumerate() {
                orow[o] += xi * wv;
            }
        }
    }
}

// ---- model file format ------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Self-describing on-disk form: config, plant, and flattened weight arrays
/// with declared shapes. JSON f64 round-trips are bit-exact.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    config: ModelConfig,
    plant: Option<PlantHead>,
    tensors: Vec<TensorEntry>,
}

const MODEL_FORMAT: &str = "ctxsteer-model";
const MODEL_VERSION: u32 = 1;

impl ModelFile {
    fn from_model(model: &Model) -> Self {
        let cfg = &model.config;
        let d = cfg.d_model();
        let w = &model.weights;
        let mut tensors = vec![
            tensor("token_embedding", vec![cfg.vocab_size, d], &w.token_embedding),
            tensor(
                "position_embedding",
                vec![cfg.max_seq_len, d],
                &w.position_embedding,
            ),
        ];
        for (i, b) in w.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            tensors.push(tensor(&format!("{p}.attn_norm.gamma"), vec![d], &b.attn_norm.gamma));
            tensors.push(tensor(&format!("{p}.attn_norm.beta"), vec![d], &b.attn_norm.beta));
            tensors.push(tensor(&format!("{p}.wq"), vec![d, d], &b.wq));
            tensors.push(tensor(&format!("{p}.wk"), vec![d, d], &b.wk));
            tensors.push(tensor(&format!("{p}.wv"), vec![d, d], &b.wv));
            tensors.push(tensor(&format!("{p}.wo"), vec![d, d], &b.wo));
            tensors.push(tensor(&format!("{p}.ffn_norm.gamma"), vec![d], &b.ffn_norm.gamma));
            tensors.push(tensor(&format!("{p}.ffn_norm.beta"), vec![d], &b.ffn_norm.beta));
            tensors.push(tensor(&format!("{p}.ffn_in"), vec![d, 4 * d], &b.ffn_in));
            tensors.push(tensor(&format!("{p}.ffn_out"), vec![4 * d, d], &b.ffn_out));
        }
        tensors.push(tensor("final_norm.gamma", vec![d], &w.final_norm.gamma));
        tensors.push(tensor("final_norm.beta", vec![d], &w.final_norm.beta));
        tensors.push(tensor("unembedding", vec![d, cfg.vocab_size], &w.unembedding));
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            config: cfg.clone(),
            plant: model.plant.clone(),
            tensors,
        }
    }

    fn into_model(self) -> Result<Model> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Config(format!(
                "not a model file (format {:?})",
                self.format
            )));
        }
        if self.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported model file version {}",
                self.version
            )));
        }
        self.config.validate()?;
        let cfg = self.config.clone();
        let d = cfg.d_model();
        let mut by_name: BTreeMap<String, TensorEntry> = self
            .tensors
            .into_iter()
            .map(|t| (t.name.clone(), t))
            .collect();
        let mut take = |name: &str, shape: Vec<usize>| -> Result<Vec<f64>> {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Config(format!("model file missing tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            let len: usize = shape.iter().product();
            if t.data.len() != len {
                return Err(Error::Config(format!(
                    "tensor {name} has {} values, expected {}",
                    t.data.len(),
                    len
                )));
            }
            Ok(t.data)
        };

        let token_embedding = take("token_embedding", vec![cfg.vocab_size, d])?;
        let position_embedding = take("position_embedding", vec![cfg.max_seq_len, d])?;
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let p = format!("blocks.{i}");
            blocks.push(BlockWeights {
                attn_norm: NormWeights {
                    gamma: take(&format!("{p}.attn_norm.gamma"), vec![d])?,
                    beta: take(&format!("{p}.attn_norm.beta"), vec![d])?,
                },
                wq: take(&format!("{p}.wq"), vec![d, d])?,
                wk: take(&format!("{p}.wk"), vec![d, d])?,
                wv: take(&format!("{p}.wv"), vec![d, d])?,
                wo: take(&format!("{p}.wo"), vec![d, d])?,
                ffn_norm: NormWeights {
                    gamma: take(&format!("{p}.ffn_norm.gamma"), vec![d])?,
                    beta: take(&format!("{p}.ffn_norm.beta"), vec![d])?,
                },
                ffn_in: take(&format!("{p}.ffn_in"), vec![d, 4 * d])?,
                ffn_out: take(&format!("{p}.ffn_out"), vec![4 * d, d])?,
            });
        }
        let final_norm = NormWeights {
            gamma: take("final_norm.gamma", vec![d])?,
            beta: take("final_norm.beta", vec![d])?,
        };
        let unembedding = take("unembedding", vec![d, cfg.vocab_size])?;
        let mut model = Model {
            config: cfg,
            weights: Weights {
                token_embedding,
                position_embedding,
                blocks,
                final_norm,
                unembedding,
            },
            plant: None,
        };
        if let Some(plant) = self.plant {
            model.set_plant(plant)?;
        }
        Ok(model)
    }
}

fn tensor(name: &str, shape: Vec<usize>, data: &[f64]) -> TensorEntry {
    TensorEntry {
        name: name.to_string(),
        shape,
        data: data.to_vec(),
    }
}

/// A single decode stream: owns its token prefix and counts forward passes.
pub struct DecodeStream<'m> {
    model: &'m Model,
    tokens: Vec<u32>,
    forward_passes: u64,
}

impl<'m> DecodeStream<'m> {
    pub fn new(model: &'m Model, prompt: Vec<u32>) -> Self {
        Self {
            model,
            tokens: prompt,
            forward_passes: 0,
        }
    }

    pub fn step(&mut self, bias: Option<&BiasPlan>, capture_attention: bool) -> Result<StepOutput> {
        let out = self.model.decode_step(&self.tokens, bias, capture_attention)?;
        self.forward_passes += 1;
        Ok(out)
    }

    pub fn push_token(&mut self, token: u32) {
        self.tokens.push(token);
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn forward_passes(&self) -> u64 {
        self.forward_passes
    }
}
