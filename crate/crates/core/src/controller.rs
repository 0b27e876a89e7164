//! PID-gated log-gain controller.
//!
//! One update per risk step: EMA-smooth the raw risk, zero the error inside
//! the hysteresis dead-band, form P/I/D with a conditional integral freeze
//! (no accumulation while pinned at a bound with the error pushing further
//! out), clip the raw gain to [0, rho_max], then slew-limit the move in
//! log(rho + eps) space.
//!
//! When the slew clip is not binding, the output is assigned the raw target
//! directly — algebraically identical to exp(log(rho_raw + eps)) - eps but
//! exact in f64, which keeps the equality-based freeze conditions
//! (rho = 0, rho = rho_max) and the quiescence invariant exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Controller gains and limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    /// Risk target tau; normally the detector's tuned threshold.
    pub target: f64,
    /// Hysteresis half-width h: |error| <= h is treated as zero.
    pub hysteresis: f64,
    /// EMA factor beta in [0, 1).
    pub ema: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Gain cap rho_max.
    pub rho_max: f64,
    /// Log-space slew limit per risk step.
    pub slew: f64,
    /// Offset eps inside the log-space slew (floor of the log coordinate).
    pub slew_epsilon: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            target: 0.5,
            hysteresis: 0.01,
            ema: 0.8,
            kp: 0.8,
            ki: 0.2,
            kd: 0.0,
            rho_max: 1.0,
            slew: 0.20,
            slew_epsilon: 1e-3,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.target && self.target < 1.0) {
            return Err(Error::Config(format!(
                "target must be in (0, 1), got {}",
                self.target
            )));
        }
        if self.hysteresis < 0.0 {
            return Err(Error::Config("hysteresis must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::Config(format!(
                "ema factor must be in [0, 1), got {}",
                self.ema
            )));
        }
        if self.rho_max <= 0.0 {
            return Err(Error::Config("rho_max must be positive".into()));
        }
        if self.slew <= 0.0 {
            return Err(Error::Config("slew limit must be positive".into()));
        }
        if !(self.slew_epsilon > 0.0 && self.slew_epsilon <= 1e-2) {
            return Err(Error::Config(format!(
                "slew epsilon must be in (0, 1e-2], got {}",
                self.slew_epsilon
            )));
        }
        Ok(())
    }
}

/// Controller state carried across risk steps: smoothed risk, integral
/// accumulator, and current log-gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub smoothed_risk: f64,
    pub integral: f64,
    pub gain: f64,
}

impl Default for ControllerState {
    fn default() -> Self {
        Self {
            smoothed_risk: 0.0,
            integral: 0.0,
            gain: 0.0,
        }
    }
}

/// Full internals of one controller update, recorded in run traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerStep {
    pub risk: f64,
    pub smoothed: f64,
    pub error: f64,
    pub p_term: f64,
    pub i_term: f64,
    pub d_term: f64,
    pub gain_raw: f64,
    pub gain: f64,
}

/// One controller update. Pure function of (state, risk, params).
pub fn controller_step(
    state: &ControllerState,
    risk: f64,
    params: &ControllerParams,
) -> Result<(ControllerState, ControllerStep)> {
    if !(0.0..=1.0).contains(&risk) {
        return Err(Error::Contract(format!(
            "risk must be in [0, 1], got {risk}"
        )));
    }

    let smoothed = params.ema * state.smoothed_risk + (1.0 - params.ema) * risk;
    let mut error = smoothed - params.target;
    if error.abs() <= params.hysteresis {
        error = 0.0;
    }

    let p_term = params.kp * error;
    let frozen = (state.gain == 0.0 && error < 0.0)
        || (state.gain == params.rho_max && error > 0.0);
    let integral = if frozen {
        state.integral
    } else {
        state.integral + params.ki * error
    };
    let d_term = params.kd * (smoothed - state.smoothed_risk);

    let gain_raw = (p_term + integral + d_term).clamp(0.0, params.rho_max);

    let eps = params.slew_epsilon;
    let l_prev = (state.gain + eps).ln();
    let l_raw = (gain_raw + eps).ln();
    let delta = (l_raw - l_prev).clamp(-params.slew, params.slew);
    let gain = if delta == l_raw - l_prev {
        gain_raw
    } else {
        ((l_prev + delta).exp() - eps).clamp(0.0, params.rho_max)
    };

    let next = ControllerState {
        smoothed_risk: smoothed,
        integral,
        gain,
    };
    let record = ControllerStep {
        risk,
        smoothed,
        error,
        p_term,
        i_term: integral,
        d_term,
        gain_raw,
        gain,
    };
    Ok((next, record))
}

/// Minimum number of risk steps for the gain to travel 0 -> rho_max under
/// saturated demand: ceil((log(rho_max + eps) - log(eps)) / slew).
pub fn rise_time(params: &ControllerParams) -> u64 {
    let eps = params.slew_epsilon;
    let span = (params.rho_max + eps).ln() - eps.ln();
    (span / params.slew).ceil() as u64
}
