//! Day-ahead forecasts of request rate and carbon intensity.
//!
//! Load uses a seasonal-naive base (the value one day earlier) plus an
//! AR(1) correction on the de-seasonalized residuals, refit by least
//! squares at every forecast:
//!
//! ```text
//! r_t   = y_t - y_{t-24}
//! phi   = sum r_t r_{t-1} / sum r_{t-1}^2
//! y^_{T+k} = y_{T+k-24} + phi^(k+1) * r_{T-1},   k = 0..h-1, clipped at 0
//! ```
//!
//! Carbon intensity uses plain seasonal persistence. Both predictors are
//! immutable values; [`Predictor::observe`] returns the updated state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::carbon::CarbonIntensitySeries;
use crate::workload::RateTrace;

/// Steps per season (hours per day).
pub const PERIOD: usize = 24;
pub const DEFAULT_HORIZON: usize = 24;
/// Load forecasts need three full days of history.
pub const MIN_LOAD_HISTORY: usize = 3 * PERIOD;
pub const MIN_CI_HISTORY: usize = PERIOD;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("need at least {need} history points, have {have}")]
    InsufficientHistory { need: usize, have: usize },
    #[error("horizon must be between 1 and {PERIOD}, got {0}")]
    BadHorizon(usize),
    #[error("observation must be finite and non-negative, got {0}")]
    BadObservation(f64),
    #[error("prediction and truth lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, PredictError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    /// Time of the first forecast value.
    pub origin_time: f64,
    pub step: f64,
    pub horizon: usize,
    pub values: Vec<f64>,
    pub method: String,
}

pub trait Predictor: Sized {
    /// New state with `observation` appended to the history.
    fn observe(&self, observation: f64) -> Result<Self>;
    fn forecast(&self, horizon: usize) -> Result<Forecast>;
}

/// Least-squares AR(1) coefficient through the origin; 0 when undetermined.
pub fn fit_ar1(residuals: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for w in residuals.windows(2) {
        num += w[1] * w[0];
        den += w[0] * w[0];
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn check_horizon(horizon: usize) -> Result<()> {
    if horizon == 0 || horizon > PERIOD {
        return Err(PredictError::BadHorizon(horizon));
    }
    Ok(())
}

/// Value one season earlier for each of the next `horizon` steps.
pub fn seasonal_naive(history: &[f64], horizon: usize) -> Result<Vec<f64>> {
    check_horizon(horizon)?;
    if history.len() < PERIOD {
        return Err(PredictError::InsufficientHistory { need: PERIOD, have: history.len() });
    }
    let t = history.len();
    Ok((0..horizon).map(|k| history[t + k - PERIOD]).collect())
}

/// Seasonal-naive plus AR(1) residual correction; returns (values, phi).
pub fn seasonal_ar(history: &[f64], horizon: usize) -> Result<(Vec<f64>, f64)> {
    check_horizon(horizon)?;
    if history.len() < MIN_LOAD_HISTORY {
        return Err(PredictError::InsufficientHistory { need: MIN_LOAD_HISTORY, have: history.len() });
    }
    let residuals: Vec<f64> = (PERIOD..history.len()).map(|t| history[t] - history[t - PERIOD]).collect();
    let phi = fit_ar1(&residuals);
    let last = *residuals.last().expect("non-empty");
    let base = seasonal_naive(history, horizon)?;
    let mut weight = 1.0;
    let values = base
        .into_iter()
        .map(|b| {
            weight *= phi;
            (b + weight * last).max(0.0)
        })
        .collect();
    Ok((values, phi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadPredictor {
    pub start_time: f64,
    pub step: f64,
    pub history: Vec<f64>,
}

impl LoadPredictor {
    pub fn new(history: &RateTrace) -> Self {
        Self { start_time: history.start_time, step: history.step, history: history.rates.clone() }
    }

    pub fn next_time(&self) -> f64 {
        self.start_time + self.history.len() as f64 * self.step
    }

    pub fn phi(&self) -> Result<f64> {
        Ok(seasonal_ar(&self.history, 1)?.1)
    }
}

impl Predictor for LoadPredictor {
    fn observe(&self, observation: f64) -> Result<Self> {
        if !(observation.is_finite() && observation >= 0.0) {
            return Err(PredictError::BadObservation(observation));
        }
        let mut next = self.clone();
        next.history.push(observation);
        Ok(next)
    }

    fn forecast(&self, horizon: usize) -> Result<Forecast> {
        let (values, _) = seasonal_ar(&self.history, horizon)?;
        Ok(Forecast {
            origin_time: self.next_time(),
            step: self.step,
            horizon,
            values,
            method: "seasonal-ar1".into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiPredictor {
    pub start_time: f64,
    pub step: f64,
    pub history: Vec<f64>,
}

impl CiPredictor {
    pub fn new(history: &CarbonIntensitySeries) -> Self {
        Self { start_time: history.start_time, step: history.step.value(), history: history.raw() }
    }

    pub fn next_time(&self) -> f64 {
        self.start_time + self.history.len() as f64 * self.step
    }
}

impl Predictor for CiPredictor {
    fn observe(&self, observation: f64) -> Result<Self> {
        if !(observation.is_finite() && observation >= 0.0) {
            return Err(PredictError::BadObservation(observation));
        }
        let mut next = self.clone();
        next.history.push(observation);
        Ok(next)
    }

    fn forecast(&self, horizon: usize) -> Result<Forecast> {
        if self.history.len() < MIN_CI_HISTORY {
            return Err(PredictError::InsufficientHistory { need: MIN_CI_HISTORY, have: self.history.len() });
        }
        Ok(Forecast {
            origin_time: self.next_time(),
            step: self.step,
            horizon,
            values: seasonal_naive(&self.history, horizon)?,
            method: "seasonal-persistence".into(),
        })
    }
}

pub fn forecast_load(history: &RateTrace, horizon: usize) -> Result<Forecast> {
    LoadPredictor::new(history).forecast(horizon)
}

pub fn forecast_ci(history: &CarbonIntensitySeries, horizon: usize) -> Result<Forecast> {
    CiPredictor::new(history).forecast(horizon)
}

pub fn step_update<P: Predictor>(state: &P, observation: f64) -> Result<P> {
    state.observe(observation)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    /// `None` when every truth value was zero.
    pub percent: Option<f64>,
    /// Points skipped because the truth value was zero.
    pub excluded: usize,
}

/// Mean absolute percentage error over points with non-zero truth.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<Mape> {
    if pred.len() != truth.len() {
        return Err(PredictError::LengthMismatch(pred.len(), truth.len()));
    }
    let (mut sum, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        if *t == 0.0 {
            excluded += 1;
            continue;
        }
        sum += ((p - t) / t).abs();
        used += 1;
    }
    if excluded > 0 {
        log::warn!("MAPE: excluded {excluded} point(s) with zero truth");
    }
    Ok(Mape { percent: (used > 0).then(|| sum / used as f64 * 100.0), excluded })
}
