//! Context-reliance scoring and windowed feature assembly.
//!
//! For each head, the score is the logit of the attention mass the last
//! query row places on context keys, clipped away from {0, 1}. Histories
//! are kept per head in logit space; the feature vector concatenates
//! (mean, std, last-minus-first) triples over the configured windows in
//! ascending window order, all (layer, head) pairs row-major within a
//! window. No dataset-wide standardization is ever applied.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionSnapshot, PromptLayout};

/// Clip width for the logit transform.
pub const CRS_EPSILON: f64 = 1e-6;

/// Total attention mass on context keys, in [0, 1].
pub fn context_mass(
    snapshot: &AttentionSnapshot,
    layout: &PromptLayout,
    layer: usize,
    head: usize,
) -> Result<f64> {
    if layout.context_len == 0 {
        return Err(Error::Contract(
            "context mass undefined without context keys".into(),
        ));
    }
    let probs = snapshot.probs(layer, head);
    if layout.context_len > probs.len() {
        return Err(Error::Contract(format!(
            "layout claims {} context keys but the snapshot row has {}",
            layout.context_len,
            probs.len()
        )));
    }
    Ok(probs[layout.context_keys()].iter().sum())
}

/// Logit of the clipped context mass: log(p / (1 - p)) after clipping
/// p into [epsilon, 1 - epsilon].
pub fn crs_logit(p_ctx: f64, epsilon: f64) -> Result<f64> {
    if !(-1e-9..=1.0 + 1e-9).contains(&p_ctx) {
        return Err(Error::Contract(format!(
            "context mass {p_ctx} outside [0, 1]"
        )));
    }
    // Clip the complement separately: at the boundaries this keeps the
    // ratio exactly (1 - eps) / eps instead of picking up the rounding
    // residue of 1 - (1 - eps).
    let p = p_ctx.clamp(epsilon, 1.0 - epsilon);
    let q = (1.0 - p_ctx).clamp(epsilon, 1.0 - epsilon);
    Ok((p / q).ln())
}

/// Fixed-capacity append-only window over a per-head score stream.
#[derive(Debug, Clone)]
struct RingBuffer {
    data: Vec<f64>,
    head: usize,
    len: usize,
}

impl RingBuffer {
    fn new(capacity: usize) -> Self {
        Self {
            data: vec![0.0; capacity],
            head: 0,
            len: 0,
        }
    }

    fn push(&mut self, value: f64) {
        self.data[self.head] = value;
        self.head = (self.head + 1) % self.data.len();
        if self.len < self.data.len() {
            self.len += 1;
        }
    }

    /// Most recent `count` values in chronological order.
    fn tail(&self, count: usize) -> Vec<f64> {
        let take = count.min(self.len);
        let cap = self.data.len();
        (0..take)
            .map(|i| self.data[(self.head + cap - take + i) % cap])
            .collect()
    }

    fn latest(&self) -> Option<f64> {
        if self.len == 0 {
            None
        } else {
            let cap = self.data.len();
            Some(self.data[(self.head + cap - 1) % cap])
        }
    }
}

/// Per-head ring buffers of CRS logits plus the window set.
#[derive(Debug, Clone)]
pub struct CrsHistory {
    num_layers: usize,
    num_heads: usize,
    windows: Vec<usize>,
    buffers: Vec<RingBuffer>,
    steps: usize,
}

impl CrsHistory {
    pub fn new(num_layers: usize, num_heads: usize, windows: Vec<usize>) -> Result<Self> {
        if windows.is_empty() || windows.iter().any(|&w| w == 0) {
            return Err(Error::Config("window set must be nonempty and positive".into()));
        }
        if windows.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config("window set must be strictly ascending".into()));
        }
        if num_layers == 0 || num_heads == 0 {
            return Err(Error::Config("history needs at least one head".into()));
        }
        let cap = *windows.last().unwrap();
        Ok(Self {
            num_layers,
            num_heads,
            windows,
            buffers: (0..num_layers * num_heads)
                .map(|_| RingBuffer::new(cap))
                .collect(),
            steps: 0,
        })
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            windows: self.windows.clone(),
        }
    }

    pub fn windows(&self) -> &[usize] {
        &self.windows
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    /// Number of risk steps recorded so far.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    /// Append one CRS value per head; `values` is indexed [layer][head].
    pub fn record(&mut self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != self.num_layers
            || values.iter().any(|row| row.len() != self.num_heads)
        {
            return Err(Error::Contract(format!(
                "record expects a {}x{} matrix",
                self.num_layers, self.num_heads
            )));
        }
        for (l, row) in values.iter().enumerate() {
            for (h, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Contract(format!(
                        "non-finite CRS value at ({l}, {h})"
                    )));
                }
                self.buffers[l * self.num_heads + h].push(v);
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Compute CRS for every head of a snapshot and append it, returning the
    /// recorded matrix.
    pub fn record_snapshot(
        &mut self,
        snapshot: &AttentionSnapshot,
        layout: &PromptLayout,
    ) -> Result<Vec<Vec<f64>>> {
        let mut matrix = vec![vec![0.0; self.num_heads]; self.num_layers];
        for (l, row) in matrix.iter_mut().enumerate() {
            for (h, slot) in row.iter_mut().enumerate() {
                let mass = context_mass(snapshot, layout, l, h)?;
                *slot = crs_logit(mass, CRS_EPSILON)?;
            }
        }
        self.record(&matrix)?;
        Ok(matrix)
    }

    pub fn latest(&self, layer: usize, head: usize) -> Option<f64> {
        self.buffers[layer * self.num_heads + head].latest()
    }

    /// Most recent `min(window, available)` values, chronological.
    pub fn window_values(&self, layer: usize, head: usize, window: usize) -> Vec<f64> {
        self.buffers[layer * self.num_heads + head].tail(window)
    }
}

/// Mean, population std, and last-minus-first delta over the most recent
/// `min(window, available)` entries. A single entry yields (x, 0, 0).
pub fn window_features(
    history: &CrsHistory,
    layer: usize,
    head: usize,
    window: usize,
) -> Result<(f64, f64, f64)> {
    let values = history.window_values(layer, head, window);
    if values.is_empty() {
        return Err(Error::InsufficientHistory(format!(
            "no CRS entries for head ({layer}, {head})"
        )));
    }
    Ok(window_stats(&values))
}

/// Canonical window statistics: two-pass mean/std in chronological order.
pub fn window_stats(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let delta = values[values.len() - 1] - values[0];
    (mean, var.sqrt(), delta)
}

/// Statistic slot within a head's window triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stat {
    Mean,
    Std,
    Delta,
}

impl Stat {
    pub fn index(self) -> usize {
        match self {
            Stat::Mean => 0,
            Stat::Std => 1,
            Stat::Delta => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => Stat::Mean,
            1 => Stat::Std,
            _ => Stat::Delta,
        }
    }
}

/// Bijective map between feature indices and (stat, window, layer, head).
///
/// Layout: windows ascending; within a window all (layer, head) pairs
/// row-major with layer outer; per head the (mean, std, delta) triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub num_layers: usize,
    pub num_heads: usize,
    pub windows: Vec<usize>,
}

impl FeatureLayout {
    pub fn len(&self) -> usize {
        3 * self.windows.len() * self.num_layers * self.num_heads
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, stat: Stat, window_idx: usize, layer: usize, head: usize) -> usize {
        ((window_idx * self.num_layers + layer) * self.num_heads + head) * 3 + stat.index()
    }

    pub fn describe(&self, index: usize) -> (Stat, usize, usize, usize) {
        let stat = Stat::from_index(index % 3);
        let rest = index / 3;
        let head = rest % self.num_heads;
        let rest = rest / self.num_heads;
        let layer = rest % self.num_layers;
        let window_idx = rest / self.num_layers;
        (stat, window_idx, layer, head)
    }

    /// Feature indices belonging to one head, across all stats and windows.
    pub fn head_feature_indices(&self, layer: usize, head: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(3 * self.windows.len());
        for w in 0..self.windows.len() {
            for s in [Stat::Mean, Stat::Std, Stat::Delta] {
                out.push(self.index_of(s, w, layer, head));
            }
        }
        out
    }
}

/// Assemble the full windowed feature vector from a history.
pub fn assemble_features(history: &CrsHistory) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::InsufficientHistory(
            "cannot assemble features from an empty history".into(),
        ));
    }
    let layout = history.layout();
    let mut out = vec![0.0; layout.len()];
    for (wi, &w) in history.windows().iter().enumerate() {
        for l in 0..history.num_layers() {
            for h in 0..history.num_heads() {
                let (mean, std, delta) = window_features(history, l, h, w)?;
                out[layout.index_of(Stat::Mean, wi, l, h)] = mean;
                out[layout.index_of(Stat::Std, wi, l, h)] = std;
                out[layout.index_of(Stat::Delta, wi, l, h)] = delta;
            }
        }
    }
    Ok(out)
}

/// Latest CRS per head in one layer, z-scored across the layer's heads
/// (population std). Zero variance yields all zeros.
pub fn live_head_scores(history: &CrsHistory, layer: usize) -> Result<Vec<f64>> {
    let h = history.num_heads();
    let mut values = Vec::with_capacity(h);
    for head in 0..h {
        match history.latest(layer, head) {
            Some(v) => values.push(v),
            None => {
                return Err(Error::InsufficientHistory(format!(
                    "no CRS entries for head ({layer}, {head})"
                )))
            }
        }
    }
    Ok(zscore(&values))
}

/// Population z-score with a zero-variance guard.
pub fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return vec![0.0; values.len()];
    }
    let std = var.sqrt();
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Write the per-run [layer, head, step] CRS logit tensor as columnar text.
///
/// `series` is one [layer][head] matrix per risk step, `steps` the matching
/// step indices.
pub fn write_crs_dump<W: Write>(mut w: W, series: &[Vec<Vec<f64>>], steps: &[usize]) -> Result<()> {
    if series.len() != steps.len() {
        return Err(Error::Contract("series and step indices must align".into()));
    }
    writeln!(w, "step,layer,head,crs_logit")?;
    for (matrix, &t) in series.iter().zip(steps.iter()) {
        for (l, row) in matrix.iter().enumerate() {
            for (h, v) in row.iter().enumerate() {
                writeln!(w, "{t},{l},{h},{v}")?;
            }
        }
    }
    Ok(())
}

/// Per-head summary statistics (mean, std, quantiles) over a CRS series.
pub fn write_crs_summary<W: Write>(mut w: W, series: &[Vec<Vec<f64>>]) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Contract("cannot summarize an empty series".into()));
    }
    let num_layers = series[0].len();
    let num_heads = series[0][0].len();
    writeln!(w, "layer,head,count,mean,std,min,q25,median,q75,max")?;
    for l in 0..num_layers {
        for h in 0..num_heads {
            let mut vals: Vec<f64> = series.iter().map(|m| m[l][h]).collect();
            let (mean, std, _) = window_stats(&vals);
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = |p: f64| quantile_sorted(&vals, p);
            writeln!(
                w,
                "{l},{h},{},{mean},{std},{},{},{},{},{}",
                vals.len(),
                vals[0],
                q(0.25),
                q(0.5),
                q(0.75),
                vals[vals.len() - 1],
            )?;
        }
    }
    Ok(())
}

/// Linear-interpolated quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
