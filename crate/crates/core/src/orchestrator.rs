//! The decoding-time loop: decode, observe, decide, actuate with one-step
//! lag, and record everything needed to replay the decision path offline.
//!
//! Per generated token exactly one forward pass runs. At risk steps
//! (t mod cadence == 0) the attention snapshot is read on that same pass,
//! CRS histories update, the detector produces a risk, the controller
//! updates the gain, and head selection emits a bias plan that is applied
//! on the next step's forward pass. Everything is seeded and bit-exactly
//! reproducible.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{controller_step, ControllerParams, ControllerState, ControllerStep};
use crate::crs::{assemble_features, CrsHistory, FeatureLayout};
use crate::detector::{HeadPrior, RiskModel};
use crate::error::{Error, Result};
use crate::model::{BiasPlan, DecodeStream, Model, ModelConfig, PromptLayout};
use crate::steering::{plan_to_bias, select_heads, SteeringParams, SteeringPlan};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Token sampling policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SamplingMode {
    Greedy,
    Categorical { temperature: f64 },
}

/// Gain law at risk steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ControlMode {
    /// The full PID-gated log-gain.
    Pid,
    /// Ablation: EMA + hysteresis gate switching a fixed gain on and off,
    /// no integral action and no slew.
    ThresholdGate { gain: f64 },
}

/// Where the per-step risk comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum RiskSource {
    /// A trained detector (must be supplied to `run_episode`).
    Detector,
    /// Classifier-free heuristic: each head's latest CRS is z-scored against
    /// its own trailing window; risk = sigmoid(-mean z).
    Heuristic,
    /// A constant risk (testing and forced-gain experiments).
    Fixed { value: f64 },
}

/// Full configuration of one episode run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Risk/selection cadence k: risk steps are t with t mod k == 0.
    pub cadence: usize,
    /// Maximum generated tokens per episode.
    pub max_answer_tokens: usize,
    pub sampling: SamplingMode,
    pub windows: Vec<usize>,
    pub controller: ControllerParams,
    pub steering: SteeringParams,
    pub control: ControlMode,
    pub risk: RiskSource,
    pub mitigation_enabled: bool,
    /// Keep a computed plan active until the next risk step instead of
    /// clearing it after its single lagged application.
    pub hold_plan_between_risk_steps: bool,
    /// Serialize feature vectors into risk records (training data runs).
    pub record_features: bool,
    pub seed: u64,
}

impl LoopConfig {
    pub fn defaults_for(model: &ModelConfig) -> Self {
        Self {
            cadence: 1,
            max_answer_tokens: 64,
            sampling: SamplingMode::Categorical { temperature: 1.0 },
            windows: vec![4, 8, 16],
            controller: ControllerParams::default(),
            steering: SteeringParams::defaults_for(model.num_layers),
            control: ControlMode::Pid,
            risk: RiskSource::Detector,
            mitigation_enabled: true,
            hold_plan_between_risk_steps: false,
            record_features: false,
            seed: 0,
        }
    }

    pub fn feature_layout(&self, model: &ModelConfig) -> FeatureLayout {
        FeatureLayout {
            num_layers: model.num_layers,
            num_heads: model.num_heads,
            windows: self.windows.clone(),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.cadence == 0 {
            return Err(Error::Config("cadence must be >= 1".into()));
        }
        if self.max_answer_tokens == 0 {
            return Err(Error::Config("max_answer_tokens must be >= 1".into()));
        }
        if let SamplingMode::Categorical { temperature } = self.sampling {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
        }
        if let ControlMode::ThresholdGate { gain } = self.control {
            if !(gain >= 0.0 && gain.is_finite()) {
                return Err(Error::Config("gate gain must be nonnegative".into()));
            }
        }
        if let RiskSource::Fixed { value } = self.risk {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Config(format!(
                    "fixed risk must be in [0, 1], got {value}"
                )));
            }
        }
        if self.windows.is_empty() || self.windows.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(
                "windows must be nonempty and strictly ascending".into(),
            ));
        }
        self.controller.validate()?;
        self.steering.validate(model.num_layers)?;
        Ok(())
    }
}

/// Stable hash over every parameter except the mitigation flag, so a
/// baseline/steered pair shares one fingerprint.
pub fn config_fingerprint(model: &ModelConfig, config: &LoopConfig) -> String {
    #[derive(Serialize)]
    struct View<'a> {
        model: &'a ModelConfig,
        config: &'a LoopConfig,
    }
    let mut canonical = config.clone();
    canonical.mitigation_enabled = false;
    let json = serde_json::to_vec(&View {
        model,
        config: &canonical,
    })
    .expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// SplitMix64 seed derivation for independent per-episode streams.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Everything recorded at a risk step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRecord {
    pub step: usize,
    /// Latest CRS logit per head, [layer][head].
    pub crs: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub features: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub controller: Option<ControllerStep>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub plan: Option<SteeringPlan>,
}

/// One generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub step: usize,
    pub token: u32,
    pub risk_step: bool,
    /// Risk step whose plan was actuated on this step's forward pass.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bias_applied_from: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub risk: Option<RiskRecord>,
}

/// Complete record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub seed: u64,
    pub mitigation_enabled: bool,
    pub model_config: ModelConfig,
    pub config: LoopConfig,
    pub context_tokens: Vec<u32>,
    pub question_tokens: Vec<u32>,
    pub steps: Vec<TokenRecord>,
    pub forward_passes: u64,
    pub truncated: bool,
}

impl RunTrace {
    pub fn generated_tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn risk_records(&self) -> impl Iterator<Item = &RiskRecord> {
        self.steps.iter().filter_map(|s| s.risk.as_ref())
    }

    /// Per-risk-step CRS matrices with their step indices (dump source).
    pub fn crs_series(&self) -> (Vec<Vec<Vec<f64>>>, Vec<usize>) {
        let mut series = Vec::new();
        let mut steps = Vec::new();
        for r in self.risk_records() {
            series.push(r.crs.clone());
            steps.push(r.step);
        }
        (series, steps)
    }
}

/// Immutable inputs shared by an episode run.
#[derive(Clone, Copy)]
pub struct EpisodeSetup<'a> {
    pub model: &'a Model,
    pub context: &'a [u32],
    pub question: &'a [u32],
    pub detector: Option<&'a RiskModel>,
    pub prior: Option<&'a HeadPrior>,
}

/// The gain law shared by live runs and offline replay, so replay is
/// bit-exact by construction.
struct ControlLaw<'a> {
    mode: ControlMode,
    params: &'a ControllerParams,
}

impl ControlLaw<'_> {
    fn step(&self, state: &ControllerState, risk: f64) -> Result<(ControllerState, ControllerStep)> {
        match self.mode {
            ControlMode::Pid => controller_step(state, risk, self.params),
            ControlMode::ThresholdGate { gain } => {
                if !(0.0..=1.0).contains(&risk) {
                    return Err(Error::Contract(format!(
                        "risk must be in [0, 1], got {risk}"
                    )));
                }
                let p = self.params;
                let smoothed = p.ema * state.smoothed_risk + (1.0 - p.ema) * risk;
                let mut error = smoothed - p.target;
                if error.abs() <= p.hysteresis {
                    error = 0.0;
                }
                // hysteresis switch: on above the band, off below, hold inside
                let on = if error > 0.0 {
                    true
                } else if error < 0.0 {
                    false
                } else {
                    state.gain > 0.0
                };
                let out = if on { gain.min(p.rho_max) } else { 0.0 };
                let next = ControllerState {
                    smoothed_risk: smoothed,
                    integral: 0.0,
                    gain: out,
                };
                let record = ControllerStep {
                    risk,
                    smoothed,
                    error,
                    p_term: 0.0,
                    i_term: 0.0,
                    d_term: 0.0,
                    gain_raw: out,
                    gain: out,
                };
                Ok((next, record))
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Classifier-free risk: how far each head's latest CRS sits below its own
/// trailing window, averaged over heads.
pub fn heuristic_risk(history: &CrsHistory) -> f64 {
    let window = *history.windows().last().expect("windows nonempty");
    let mut sum = 0.0;
    let mut count = 0usize;
    for layer in 0..history.num_layers() {
        for head in 0..history.num_heads() {
            let values = history.window_values(layer, head, window);
            if values.is_empty() {
                continue;
            }
            let latest = values[values.len() - 1];
            let (mean, std, _) = crate::crs::window_stats(&values);
            let z = if std > 0.0 { (latest - mean) / std } else { 0.0 };
            sum += z;
            count += 1;
        }
    }
    let mean_z = if count > 0 { sum / count as f64 } else { 0.0 };
    sigmoid(-mean_z)
}

fn sample_token(logits: &[f64], mode: SamplingMode, rng: &mut ChaCha8Rng) -> u32 {
    match mode {
        SamplingMode::Greedy => {
            let mut best = 0usize;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best as u32
        }
        SamplingMode::Categorical { temperature } => {
            let mut probs: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            crate::model::softmax_in_place(&mut probs);
            let u: f64 = rng.random::<f64>();
            let mut acc = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i as u32;
                }
            }
            (probs.len() - 1) as u32
        }
    }
}

/// Run one episode and produce its complete trace.
pub fn run_episode(setup: &EpisodeSetup, config: &LoopConfig) -> Result<RunTrace> {
    let model_config = setup.model.config();
    config.validate(model_config)?;
    if setup.context.is_empty() {
        return Err(Error::Contract("episode requires a nonempty context".into()));
    }
    let layout_fp = config.feature_layout(model_config);
    if matches!(config.risk, RiskSource::Detector) {
        let det = setup.detector.ok_or_else(|| {
            Error::Config("risk source is a detector but none was supplied".into())
        })?;
        if det.fingerprint.layout() != layout_fp {
            return Err(Error::LayoutMismatch(format!(
                "detector expects {:?}, run is configured for {:?}",
                det.fingerprint.layout(),
                layout_fp
            )));
        }
    }
    let zero_prior;
    let prior = match setup.prior {
        Some(p) => {
            if p.num_layers() != model_config.num_layers || p.num_heads() != model_config.num_heads
            {
                return Err(Error::Contract("prior dimensions do not match the model".into()));
            }
            p
        }
        None => {
            zero_prior = HeadPrior::zeros(model_config.num_layers, model_config.num_heads);
            &zero_prior
        }
    };

    let context_len = setup.context.len();
    let question_len = setup.question.len();
    let mut prompt = Vec::with_capacity(context_len + question_len);
    prompt.extend_from_slice(setup.context);
    prompt.extend_from_slice(setup.question);

    let mut stream = DecodeStream::new(setup.model, prompt);
    let mut history = CrsHistory::new(
        model_config.num_layers,
        model_config.num_heads,
        config.windows.clone(),
    )?;
    let law = ControlLaw {
        mode: config.control,
        params: &config.controller,
    };
    let mut controller_state = ControllerState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pending: Option<(BiasPlan, usize)> = None;
    let mut steps: Vec<TokenRecord> = Vec::with_capacity(config.max_answer_tokens);
    let mut truncated = false;

    for t in 1..=config.max_answer_tokens {
        if stream.len() > model_config.max_seq_len {
            truncated = true;
            break;
        }
        let risk_step = t % config.cadence == 0;

        let apply = match &pending {
            Some((plan, s)) if config.hold_plan_between_risk_steps || t == s + 1 => {
                Some((plan.clone(), *s))
            }
            _ => None,
        };
        let out = match &apply {
            Some((plan, _)) => stream.step(Some(plan), risk_step)?,
            None => stream.step(None, risk_step)?,
        };
        if apply.is_some() && !config.hold_plan_between_risk_steps {
            pending = None;
        }

        let mut risk_record = None;
        if risk_step {
            let snapshot = out.snapshot.as_ref().expect("captured at risk step");
            let layout = PromptLayout::new(context_len, question_len, t - 1)?;
            let crs = history.record_snapshot(snapshot, &layout)?;
            let features = assemble_features(&history)?;
            let risk = match config.risk {
                RiskSource::Fixed { value } => value,
                RiskSource::Heuristic => heuristic_risk(&history),
                RiskSource::Detector => setup
                    .detector
                    .expect("validated above")
                    .predict_risk(&features)?,
            };
            let mut controller_record = None;
            let mut plan_record = None;
            if config.mitigation_enabled {
                let (next, rec) = law.step(&controller_state, risk)?;
                controller_state = next;
                let plan = select_heads(&history, prior, &config.steering, controller_state.gain)?;
                pending = if plan.is_empty() {
                    None
                } else {
                    Some((plan_to_bias(&plan, context_len), t))
                };
                controller_record = Some(rec);
                plan_record = Some(plan);
            }
            risk_record = Some(RiskRecord {
                step: t,
                crs,
                features: config.record_features.then_some(features),
                risk: Some(risk),
                controller: controller_record,
                plan: plan_record,
            });
        }

        let token = sample_token(&out.logits, config.sampling, &mut rng);
        stream.push_token(token);
        steps.push(TokenRecord {
            step: t,
            token,
            risk_step,
            bias_applied_from: apply.as_ref().map(|(_, s)| *s),
            risk: risk_record,
        });
    }

    Ok(RunTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        config_fingerprint: config_fingerprint(model_config, config),
        seed: config.seed,
        mitigation_enabled: config.mitigation_enabled,
        model_config: model_config.clone(),
        config: config.clone(),
        context_tokens: setup.context.to_vec(),
        question_tokens: setup.question.to_vec(),
        steps,
        forward_passes: stream.forward_passes(),
        truncated,
    })
}

/// Run the same episode twice with identical seeds: mitigation disabled
/// (baseline) and enabled (steered).
pub fn run_paired(setup: &EpisodeSetup, config: &LoopConfig) -> Result<(RunTrace, RunTrace)> {
    let mut baseline_cfg = config.clone();
    baseline_cfg.mitigation_enabled = false;
    let mut steered_cfg = config.clone();
    steered_cfg.mitigation_enabled = true;
    let baseline = run_episode(setup, &baseline_cfg)?;
    let steered = run_episode(setup, &steered_cfg)?;
    Ok((baseline, steered))
}

// ---- trace files --------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum TraceLine {
    Header {
        schema_version: u32,
        config_fingerprint: String,
        seed: u64,
        mitigation_enabled: bool,
        model_config: ModelConfig,
        config: LoopConfig,
        context_tokens: Vec<u32>,
        question_tokens: Vec<u32>,
    },
    Step(TokenRecord),
    End {
        forward_passes: u64,
        truncated: bool,
    },
}

/// Write a trace as JSON lines: header first, one line per generated token,
/// then the end record.
pub fn write_trace<W: Write>(mut w: W, trace: &RunTrace) -> Result<()> {
    let header = TraceLine::Header {
        schema_version: trace.schema_version,
        config_fingerprint: trace.config_fingerprint.clone(),
        seed: trace.seed,
        mitigation_enabled: trace.mitigation_enabled,
        model_config: trace.model_config.clone(),
        config: trace.config.clone(),
        context_tokens: trace.context_tokens.clone(),
        question_tokens: trace.question_tokens.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for step in &trace.steps {
        serde_json::to_writer(&mut w, &TraceLine::Step(step.clone()))?;
        w.write_all(b"\n")?;
    }
    serde_json::to_writer(
        &mut w,
        &TraceLine::End {
            forward_passes: trace.forward_passes,
            truncated: trace.truncated,
        },
    )?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<RunTrace> {
    let mut trace: Option<RunTrace> = None;
    let mut ended = false;
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line)?;
        match parsed {
            TraceLine::Header {
                schema_version,
                config_fingerprint,
                seed,
                mitigation_enabled,
                model_config,
                config,
                context_tokens,
                question_tokens,
            } => {
                if trace.is_some() {
                    return Err(Error::TraceFormat("duplicate header line".into()));
                }
                if schema_version != TRACE_SCHEMA_VERSION {
                    return Err(Error::TraceFormat(format!(
                        "unsupported trace schema version {schema_version}"
                    )));
                }
                trace = Some(RunTrace {
                    schema_version,
                    config_fingerprint,
                    seed,
                    mitigation_enabled,
                    model_config,
                    config,
                    context_tokens,
                    question_tokens,
                    steps: Vec::new(),
                    forward_passes: 0,
                    truncated: false,
                });
            }
            TraceLine::Step(step) => match trace.as_mut() {
                Some(t) => t.steps.push(step),
                None => return Err(Error::TraceFormat("step before header".into())),
            },
            TraceLine::End {
                forward_passes,
                truncated,
            } => match trace.as_mut() {
                Some(t) => {
                    t.forward_passes = forward_passes;
                    t.truncated = truncated;
                    ended = true;
                }
                None => return Err(Error::TraceFormat("end before header".into())),
            },
        }
    }
    let trace = trace.ok_or_else(|| Error::TraceFormat("empty trace file".into()))?;
    if !ended {
        return Err(Error::TraceFormat("trace file is missing its end record".into()));
    }
    Ok(trace)
}

pub fn save_trace(path: &Path, trace: &RunTrace) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trace(std::io::BufWriter::new(file), trace)
}

pub fn load_trace(path: &Path) -> Result<RunTrace> {
    let file = std::fs::File::open(path)?;
    read_trace(std::io::BufReader::new(file))
}

/// Outcome of replaying a trace's controller decisions offline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub risk_steps: usize,
    pub exact: bool,
    pub max_abs_diff: f64,
}

/// Re-run the gain law over the recorded risk sequence and compare against
/// the recorded gains. A faithful trace replays bit-exactly.
pub fn replay_controller(trace: &RunTrace) -> Result<ReplayReport> {
    let law = ControlLaw {
        mode: trace.config.control,
        params: &trace.config.controller,
    };
    let mut state = ControllerState::default();
    let mut risk_steps = 0usize;
    let mut max_abs_diff = 0.0f64;
    let mut exact = true;
    for record in trace.risk_records() {
        let (Some(risk), Some(recorded)) = (record.risk, record.controller.as_ref()) else {
            continue;
        };
        let (next, replayed) = law.step(&state, risk)?;
        state = next;
        risk_steps += 1;
        let diff = (replayed.gain - recorded.gain).abs();
        max_abs_diff = max_abs_diff.max(diff);
        if replayed.gain.to_bits() != recorded.gain.to_bits() {
            exact = false;
        }
    }
    Ok(ReplayReport {
        risk_steps,
        exact,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::rise_time;

    fn test_model() -> Model {
        Model::new(ModelConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 4,
            vocab_size: 24,
            max_seq_len: 64,
            seed: 11,
        })
        .unwrap()
    }

    fn setup<'a>(model: &'a Model, context: &'a [u32], question: &'a [u32]) -> EpisodeSetup<'a> {
        EpisodeSetup {
            model,
            context,
            question,
            detector: None,
            prior: None,
        }
    }

    fn base_config(model: &Model, risk: RiskSource) -> LoopConfig {
        let mut cfg = LoopConfig::defaults_for(model.config());
        cfg.max_answer_tokens = 16;
        cfg.risk = risk;
        cfg.seed = 99;
        cfg
    }

    const CTX: [u32; 6] = [1, 2, 3, 4, 5, 6];
    const Q: [u32; 2] = [7, 8];

    #[test]
    fn forced_zero_risk_matches_disabled_mitigation() {
        let model = test_model();
        let s = setup(&model, &CTX, &Q);
        let cfg = base_config(&model, RiskSource::Fixed { value: 0.0 });
        let (baseline, steered) = run_paired(&s, &cfg).unwrap();
        assert_eq!(baseline.generated_tokens(), steered.generated_tokens());
        assert!(steered
            .risk_records()
            .all(|r| r.plan.as_ref().is_some_and(|p| p.is_empty())));
    }

    #[test]
    fn cadence_controls_risk_records() {
        let model = test_model();
        let s = setup(&model, &CTX, &Q);
        let mut cfg = base_config(&model, RiskSource::Fixed { value: 0.5 });
        cfg.cadence = 4;
        let trace = run_episode(&s, &cfg).unwrap();
        for step in &trace.steps {
            assert_eq!(step.risk_step, step.step % 4 == 0);
            assert_eq!(step.risk.is_some(), step.step % 4 == 0);
        }
        let risk_steps: Vec<usize> = trace.risk_records().map(|r| r.step).collect();
        assert_eq!(risk_steps, vec![4, 8, 12, 16]);
    }

    #[test]
    fn forced_max_risk_matches_standalone_controller() {
        let model = test_model();
        let s = setup(&model, &CTX, &Q);
        let mut cfg = base_config(&model, RiskSource::Fixed { value: 1.0 });
        cfg.max_answer_tokens = 40;
        let trace = run_episode(&s, &cfg).unwrap();
        let mut state = ControllerState::default();
        for record in trace.risk_records() {
            let (next, rec) = controller_step(&state, 1.0, &cfg.controller).unwrap();
            state = next;
            let recorded = record.controller.as_ref().unwrap();
            assert_eq!(rec.gain.to_bits(), recorded.gain.to_bits());
            assert_eq!(rec.i_term.to_bits(), recorded.i_term.to_bits());
        }
    }

    #[test]
    fn one_step_lag_audit() {
        let model = test_model();
        let s = setup(&model, &CTX, &Q);
        for cadence in [1usize, 2, 4] {
            let mut cfg = base_config(&model, RiskSource::Fixed { value: 1.0 });
            cfg.cadence = cadence;
            cfg.max_answer_tokens = 30;
            let trace = run_episode(&s, &cfg).unwrap();
            for step in &trace.steps {
                if let Some(r) = &step.risk {
                    let nonempty = r.plan.as_ref().is_some_and(|p| !p.is_empty());
                    if nonempty && step.step < trace.steps.len() {
                        let next = &trace.steps[step.step]; // steps are 1-based
                        assert_eq!(
                            next.bias_applied_from,
                            Some(step.step),
                            "plan from {} must actuate at {} (cadence {})",
                            step.step,
                            step.step + 1,
                            cadence
                        );
                    }
                }
                if let Some(from) = step.bias_applied_from {
                    assert_eq!(from + 1, step.step, "lag must be exactly one step");
                }
            }
        }
    }

    #[test]
    fn forward_passes_equal_generated_tokens() {
        let model = test_model();
        let s = setup(&model, &CTX, &Q);
        let cfg = base_config(&model, RiskSource::Heuristic);
        let trace = run_episode(&s, &cfg).unwrap();
        assert_eq!(trace.forward_passes, trace.steps.len() as u64);
    }

    #[test]
    fn paired_runs_share_fingerprint() {
        let model = test_model();
        let s = setup(&model, &CTX, &Q);
        let cfg = base_config(&model, RiskSource::Fixed { value: 0.9 });
        let (baseline, steered) = run_paired(&s, &cfg).unwrap();
        assert_eq!(baseline.config_fingerprint, steered.config_fingerprint);
        assert!(!baseline.mitigation_enabled);
        assert!(steered.mitigation_enabled);
        // config differences do change the fingerprint
        let mut other = cfg.clone();
        other.cadence = 2;
        assert_ne!(
            config_fingerprint(model.config(), &cfg),
            config_fingerprint(model.config(), &other)
        );
    }

    #[test]
    fn determinism_bit_identical_traces() {
        let model = test_model();
        let s = setup(&model, &CTX, &Q);
        let cfg = base_config(&model, RiskSource::Fixed { value: 1.0 });
        let a = run_episode(&s, &cfg).unwrap();
        let b = run_episode(&s, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_round_trip_and_replay() {
        let model = test_model();
        let s = setup(&model, &CTX, &Q);
        let mut cfg = base_config(&model, RiskSource::Fixed { value: 1.0 });
        cfg.max_answer_tokens = rise_time(&cfg.controller) as usize + 5;
        cfg.record_features = true;
        let trace = run_episode(&s, &cfg).unwrap();

        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        let loaded = read_trace(buf.as_slice()).unwrap();
        assert_eq!(trace, loaded);

        let report = replay_controller(&loaded).unwrap();
        assert!(report.risk_steps > 0);
        assert!(report.exact, "replay diverged by {}", report.max_abs_diff);
    }

    #[test]
    fn truncation_is_recorded_not_fatal() {
        let model = test_model();
        let long_ctx: Vec<u32> = (0..20).map(|i| (i % 16) as u32).collect();
        let s = setup(&model, &long_ctx, &Q);
        let mut cfg = base_config(&model, RiskSource::Heuristic);
        cfg.max_answer_tokens = 100; // prompt 22 + 100 > max_seq_len 64
        let trace = run_episode(&s, &cfg).unwrap();
        assert!(trace.truncated);
        assert!(trace.steps.len() < 100);
        assert_eq!(trace.forward_passes, trace.steps.len() as u64);
    }

    #[test]
    fn hold_plan_keeps_bias_between_risk_steps() {
        let model = test_model();
        let s = setup(&model, &CTX, &Q);
        let mut cfg = base_config(&model, RiskSource::Fixed { value: 1.0 });
        cfg.cadence = 4;
        cfg.max_answer_tokens = 24;
        cfg.hold_plan_between_risk_steps = true;
        let trace = run_episode(&s, &cfg).unwrap();
        // find the first risk step with a nonempty plan
        let first = trace
            .risk_records()
            .find(|r| r.plan.as_ref().is_some_and(|p| !p.is_empty()))
            .map(|r| r.step);
        if let Some(s0) = first {
            for step in &trace.steps {
                if step.step > s0 && step.step <= s0 + 4 {
                    assert_eq!(step.bias_applied_from, Some(s0.max(step.step.saturating_sub(4))));
                }
            }
        }
    }

    #[test]
    fn detector_source_requires_detector() {
        let model = test_model();
        let s = setup(&model, &CTX, &Q);
        let cfg = base_config(&model, RiskSource::Detector);
        assert!(matches!(run_episode(&s, &cfg), Err(Error::Config(_))));
    }
}
