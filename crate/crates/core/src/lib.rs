//! Closed-loop attention steering for a toy causal decoder.
//!
//! The crate wires together a measurement -> decision -> actuation loop
//! around a small deterministic transformer:
//!
//! - [`model`]: the plant — a causal multi-head decoder exposing the last
//!   query row's attention and accepting a pre-softmax context-key bias.
//! - [`crs`]: context-reliance scoring per head, ring-buffered histories,
//!   and windowed feature assembly.
//! - [`detector`]: risk models (logistic / boosted stumps) mapping features
//!   to a hallucination probability, plus the exported per-head prior.
//! - [`controller`]: the PID-gated log-gain with EMA smoothing, hysteresis,
//!   conditional anti-windup, saturation, and log-space slew limiting.
//! - [`steering`]: per-layer head selection blending live scores with the
//!   static prior, emitting the bias plan actuated with one-step lag.
//! - [`orchestrator`]: the decoding loop with cadence-k risk steps and
//!   full step-level traces.
//! - [`harness`]: synthetic grounding tasks, grounding metrics, episode
//!   labeling, and ablation sweeps.

pub mod controller;
pub mod crs;
pub mod detector;
pub mod error;
pub mod harness;
pub mod model;
pub mod orchestrator;
pub mod steering;

pub use error::{Error, Result};
