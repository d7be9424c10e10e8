//! Day-long serving simulation with the cache planner in the loop.
//!
//! A run replays synthetic (or loaded) traffic hour by hour. At every resize
//! boundary the controller picks a cache size: a fixed size, or in adaptive
//! mode the first window (or the whole horizon) of a [`planner::solve_exact`]
//! plan built from 24-hour rate and carbon-intensity forecasts. Each request
//! goes through the real [`CacheState`], gets a TTFT/TPOT drawn from the
//! profile cell at the true rate and the effective cache size, and is charged
//! carbon with the true intensity of its hour.
//!
//! Enlarging the cache does not help at once: the effective size seen by the
//! latency model ramps linearly from the old to the new size over `ramp_s`.
//! Shrinking takes effect immediately.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::carbon::{self, CarbonBreakdown, CarbonParams, GramsPerKwh, Kwh, Seconds, Terabytes};
use crate::kvcache::{self, CacheState, Policy, ScoreKind};
use crate::par::{self, Exec};
use crate::perfmodel::{self, ModelScale, PerfError, ProfileCell, ProfileGrid, SloSpec, SynthConfig};
use crate::planner::{self, Carryover, PlanError, PlanningInstance, Window};
use crate::predictors::{self, CiPredictor, LoadPredictor, PredictError, Predictor};
use crate::workload::{self, CiPattern, RatePattern, RateTrace, Request, TaskKind, TraceError, WorkloadConfig, WorkloadError};

const HOUR: f64 = 3_600.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("runs were made on different workloads ({0} vs {1})")]
    WorkloadMismatch(String, String),
    #[error("hour {hour}: {source}")]
    Planning { hour: usize, source: PlanError },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Profile(#[from] PerfError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Carbon(#[from] carbon::CarbonError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io { path: path.display().to_string(), source }
}

/// How the cache size is chosen. Parses from `adaptive`, `full`, `none` or `fixed:<TB>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PlannerMode {
    Fixed(u32),
    FullCache,
    NoCache,
    #[default]
    Adaptive,
}

impl fmt::Display for PlannerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlannerMode::Fixed(s) => write!(f, "fixed:{s}"),
            PlannerMode::FullCache => f.write_str("full"),
            PlannerMode::NoCache => f.write_str("none"),
            PlannerMode::Adaptive => f.write_str("adaptive"),
        }
    }
}

impl FromStr for PlannerMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "adaptive" => Ok(PlannerMode::Adaptive),
            "full" | "full_cache" => Ok(PlannerMode::FullCache),
            "none" | "no_cache" => Ok(PlannerMode::NoCache),
            other => other
                .strip_prefix("fixed:")
                .and_then(|v| v.parse().ok())
                .map(PlannerMode::Fixed)
                .ok_or_else(|| format!("unknown mode `{s}` (expected adaptive, full, none or fixed:<TB>)")),
        }
    }
}

impl TryFrom<String> for PlannerMode {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<PlannerMode> for String {
    fn from(m: PlannerMode) -> String {
        m.to_string()
    }
}

/// Which part of each adaptive plan is applied before re-planning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanApplication {
    /// Re-plan at every resize boundary and apply only the first window.
    #[default]
    FirstStep,
    /// Apply a plan window by window until it runs out, then re-plan.
    WholePlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    /// Seasonal forecasts from observed history.
    #[default]
    Predicted,
    /// The true future rates and intensities.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RateSource {
    Pattern(RatePattern),
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CiSource {
    /// A named grid, see [`workload::ci_pattern`].
    Grid(String),
    Pattern(CiPattern),
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub label: String,
    pub task: TaskKind,
    pub model: ModelScale,
    /// Defaults to the task/model preset.
    pub workload: Option<WorkloadConfig>,
    pub rate: RateSource,
    pub ci: CiSource,
    pub carbon: CarbonParams,
    /// Defaults to the task/model preset.
    pub slo: Option<SloSpec>,
    /// Profile CSV; a synthetic profile is calibrated when absent.
    pub profile: Option<PathBuf>,
    pub mode: PlannerMode,
    pub apply: PlanApplication,
    pub forecast: ForecastMode,
    pub resize_interval_s: f64,
    pub ramp_s: f64,
    pub policy: Policy,
    pub seed: u64,
    pub sim_hours: usize,
    /// Trace hours before the simulated span, used as forecaster history.
    pub history_hours: usize,
    pub horizon_hours: usize,
    /// Prompts replayed into the cache before the first simulated hour.
    pub warmup_prompts: usize,
    /// Count requests already served in the run toward each plan's SLO target.
    pub slo_carryover: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            label: "adaptive".into(),
            task: TaskKind::MultiTurn,
            model: ModelScale::Large,
            workload: None,
            rate: RateSource::Pattern(RatePattern::diurnal(1.0)),
            ci: CiSource::Grid("CISO".into()),
            carbon: CarbonParams::default(),
            slo: None,
            profile: None,
            mode: PlannerMode::Adaptive,
            apply: PlanApplication::FirstStep,
            forecast: ForecastMode::Predicted,
            resize_interval_s: HOUR,
            ramp_s: HOUR,
            policy: Policy::Lcs,
            seed: 0,
            sim_hours: 24,
            history_hours: 72,
            horizon_hours: predictors::DEFAULT_HORIZON,
            warmup_prompts: 20_000,
            slo_carryover: false,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        let hours = self.resize_interval_s / HOUR;
        if !(hours >= 1.0 && hours.fract() == 0.0) {
            return bad("resize_interval_s must be a positive whole number of hours");
        }
        if !(self.ramp_s.is_finite() && self.ramp_s >= 0.0) {
            return bad("ramp_s must be non-negative");
        }
        if self.sim_hours == 0 {
            return bad("sim_hours must be positive");
        }
        if self.horizon_hours == 0 || self.horizon_hours > predictors::DEFAULT_HORIZON {
            return bad("horizon_hours must lie in 1..=24");
        }
        if self.mode == PlannerMode::Adaptive
            && self.forecast == ForecastMode::Predicted
            && self.history_hours < predictors::MIN_LOAD_HISTORY
        {
            return Err(SimError::Config(format!(
                "predicted forecasts need history_hours >= {}",
                predictors::MIN_LOAD_HISTORY
            )));
        }
        if let Some(slo) = &self.slo {
            slo.validate()?;
        }
        self.carbon.validate()?;
        Ok(())
    }

    pub fn slo_spec(&self) -> SloSpec {
        self.slo.unwrap_or_else(|| SloSpec::preset(self.task, self.model))
    }

    pub fn workload_config(&self) -> WorkloadConfig {
        let w = self.workload.clone().unwrap_or_else(|| SynthConfig::preset(self.task, self.model).workload);
        w.with_seed(self.seed)
    }

    fn interval_hours(&self) -> usize {
        (self.resize_interval_s / HOUR).round() as usize
    }

    fn total_hours(&self) -> usize {
        self.history_hours + self.sim_hours + self.horizon_hours
    }
}

/// The profile a config asks for: its CSV, or a freshly calibrated synthetic grid.
pub fn resolve_profile(config: &SimulationConfig) -> Result<ProfileGrid> {
    let slo = config.slo_spec();
    Ok(match &config.profile {
        Some(path) => perfmodel::load_profile(path, slo)?,
        None => {
            let mut synth = SynthConfig::preset(config.task, config.model);
            synth.slo = slo;
            perfmodel::synth_profile(&synth)?
        }
    })
}

/// Hourly rates and intensities covering history, the simulated span and the last horizon.
fn resolve_traces(config: &SimulationConfig) -> Result<(RateTrace, Vec<f64>)> {
    let total = config.total_hours();
    let rates = match &config.rate {
        RateSource::Pattern(p) => p.hourly(0.0, total, config.seed),
        RateSource::File { path } => {
            let t = workload::load_rate_trace(path)?;
            if t.step != HOUR || t.len() < total {
                return Err(SimError::Config(format!(
                    "{}: need at least {total} hourly rows, found {} at step {} s",
                    path.display(),
                    t.len(),
                    t.step
                )));
            }
            t.slice(0, total)?
        }
    };
    let ci = match &config.ci {
        CiSource::Grid(label) => workload::ci_pattern(label)
            .ok_or_else(|| SimError::Config(format!("unknown grid `{label}`")))?
            .hourly(rates.start_time, total)
            .raw(),
        CiSource::Pattern(p) => p.hourly(rates.start_time, total).raw(),
        CiSource::File { path } => {
            let s = workload::load_ci_trace(path)?;
            if s.step.value() != HOUR || s.len() < total {
                return Err(SimError::Config(format!(
                    "{}: need at least {total} hourly rows, found {}",
                    path.display(),
                    s.len()
                )));
            }
            s.raw()[..total].to_vec()
        }
    };
    Ok((rates, ci))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival: f64,
    pub input_tokens: u64,
    pub hit_tokens: u64,
    pub ttft: f64,
    pub tpot: f64,
    pub size_tb: u32,
    pub effective_size_tb: f64,
    pub carbon: CarbonBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub hour: usize,
    pub start: f64,
    pub size_tb: u32,
    pub ci: f64,
    pub rate: f64,
    /// Planned rate for the window starting here, when a plan was made.
    pub predicted_rate: Option<f64>,
    pub requests: u64,
    pub ttft_attainment: Option<f64>,
    pub tpot_attainment: Option<f64>,
    pub token_hit_rate: Option<f64>,
    pub carbon_g: f64,
    pub plan_feasible: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub label: String,
    pub mode: PlannerMode,
    pub task: TaskKind,
    pub model: ModelScale,
    pub policy: Policy,
    pub seed: u64,
    pub workload_fingerprint: String,
    pub requests: u64,
    pub carbon: CarbonBreakdown,
    pub carbon_per_request_g: f64,
    pub p90_ttft_s: f64,
    pub p90_tpot_s: f64,
    pub ttft_attainment: f64,
    pub tpot_attainment: f64,
    pub slo: SloSpec,
    /// Both attainments reach `rho`.
    pub slo_met: bool,
    pub token_hit_rate: f64,
    pub mean_size_tb: f64,
    pub size_timeline: Vec<u32>,
    /// Decisions where no plan met the SLO and the largest size was used.
    pub infeasible_plans: usize,
    /// Forecast or true rates above the profiled maximum, clamped to it.
    pub rate_clamps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub summary: SimulationSummary,
    pub requests: Vec<RequestRecord>,
    pub windows: Vec<WindowRecord>,
    /// Seconds spent in each planner call.
    pub planner_wall_times: Vec<f64>,
}

impl SimulationReport {
    /// Write `requests.jsonl`, `windows.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("requests.jsonl");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&p).map_err(io_err(&p))?);
        for r in &self.requests {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(io_err(&p))?;
        }
        w.flush().map_err(io_err(&p))?;
        let p = dir.join("windows.csv");
        let mut w = csv::Writer::from_path(&p)?;
        for r in &self.windows {
            w.serialize(r)?;
        }
        w.flush().map_err(io_err(&p))?;
        let p = dir.join("summary.json");
        std::fs::write(&p, self.summary_json()?).map_err(io_err(&p))?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)? + "\n")
    }
}

pub fn read_summary(path: &Path) -> Result<SimulationSummary> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// SHA-256 over the simulated requests' identity, timing and token counts.
pub fn fingerprint(requests: &[Request]) -> String {
    let mut h = Sha256::new();
    for r in requests {
        h.update(r.id.to_le_bytes());
        h.update(r.arrival.to_bits().to_le_bytes());
        h.update(r.lineage_id.to_le_bytes());
        h.update(r.turn_index.to_le_bytes());
        h.update(r.context_tokens.to_le_bytes());
        h.update(r.new_tokens.to_le_bytes());
        h.update(r.output_tokens.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Two-point latency draw with `P[X <= threshold] = attainment` and `E[X] = mean`.
///
/// The low point sits halfway below the largest value that still lets the
/// high point clear the threshold. If no such split exists, attainment is
/// kept and the mean is given up.
pub fn two_point(mean: f64, attainment: f64, threshold: f64, u: f64) -> f64 {
    let p = attainment.clamp(0.0, 1.0);
    if p >= 1.0 {
        return mean.min(threshold);
    }
    let above = threshold * (1.0 + 1e-9) + f64::MIN_POSITIVE;
    if p <= 0.0 {
        return mean.max(above);
    }
    let slack = mean - (1.0 - p) * threshold;
    let (low, high) = if slack > 0.0 {
        let low = (threshold.min(slack / p)) / 2.0;
        (low, (mean - p * low) / (1.0 - p))
    } else {
        (0.0, (mean / (1.0 - p)).max(above))
    };
    if u < p {
        low
    } else {
        high
    }
}

#[derive(Debug, Clone, Copy)]
struct Ramp {
    from: f64,
    to: f64,
    start: f64,
    duration: f64,
}

impl Ramp {
    fn fixed(size: f64) -> Self {
        Self { from: size, to: size, start: 0.0, duration: 0.0 }
    }

    fn at(&self, t: f64) -> f64 {
        if self.to <= self.from || self.duration == 0.0 {
            return self.to;
        }
        let f = ((t - self.start) / self.duration).clamp(0.0, 1.0);
        self.from + (self.to - self.from) * f
    }
}

struct Decision {
    size: u32,
    predicted_rate: Option<f64>,
    feasible: Option<bool>,
}

/// Size controller: fixed sizes or the planner on forecasts.
struct Controller<'a> {
    config: &'a SimulationConfig,
    grid: &'a ProfileGrid,
    slo: SloSpec,
    rates: &'a RateTrace,
    ci: &'a [f64],
    load: LoadPredictor,
    pending: std::collections::VecDeque<u32>,
    wall_times: Vec<f64>,
    infeasible: usize,
    rate_clamps: usize,
}

impl Controller<'_> {
    fn decide(&mut self, hour: usize, carry: Carryover) -> Result<Decision> {
        let fixed = |size| Decision { size, predicted_rate: None, feasible: None };
        match self.config.mode {
            PlannerMode::Fixed(s) => return Ok(fixed(s)),
            PlannerMode::FullCache => return Ok(fixed(self.grid.max_size())),
            PlannerMode::NoCache => return Ok(fixed(self.grid.sizes()[0])),
            PlannerMode::Adaptive => {}
        }
        if let Some(size) = self.pending.pop_front() {
            return Ok(fixed(size));
        }
        let abs = self.config.history_hours + hour;
        let horizon = self.config.horizon_hours;
        let (rate_f, ci_f) = match self.config.forecast {
            ForecastMode::Oracle => (self.rates.rates[abs..abs + horizon].to_vec(), self.ci[abs..abs + horizon].to_vec()),
            ForecastMode::Predicted => {
                let ci = CiPredictor { start_time: self.rates.start_time, step: HOUR, history: self.ci[..abs].to_vec() };
                (self.load.forecast(horizon)?.values, ci.forecast(horizon)?.values)
            }
        };
        let step = self.config.interval_hours();
        let max_rate = self.grid.max_rate();
        let mut windows = Vec::new();
        for k in (0..horizon).step_by(step) {
            let hours = (k + step).min(horizon) - k;
            let mean = |v: &[f64]| v[k..k + hours].iter().map(|x| x.max(0.0)).sum::<f64>() / hours as f64;
            let mut rate = mean(&rate_f);
            if rate > max_rate {
                rate = max_rate;
                self.rate_clamps += 1;
            }
            let duration = hours as f64 * HOUR;
            windows.push(Window { duration, rate, ci: mean(&ci_f), requests: (rate * duration).round() as u64 });
        }
        let predicted_rate = Some(windows[0].rate);
        if windows.iter().all(|w| w.requests == 0) && carry.requests == 0 {
            return Ok(Decision { size: self.grid.sizes()[0], predicted_rate, feasible: Some(true) });
        }
        let instance = PlanningInstance {
            windows,
            size_candidates: self.grid.sizes().to_vec(),
            grid: self.grid.clone(),
            slo: self.slo,
            carbon: self.config.carbon,
            carryover: if self.config.slo_carryover { carry } else { Carryover::default() },
        };
        let (plan, wall) = planner::solve_timed(&instance).map_err(|source| SimError::Planning { hour, source })?;
        self.wall_times.push(wall);
        if !plan.feasible {
            self.infeasible += 1;
            log::info!("hour {hour}: no plan meets the SLO, using the largest size");
            return Ok(Decision { size: self.grid.max_size(), predicted_rate, feasible: Some(false) });
        }
        if self.config.apply == PlanApplication::WholePlan {
            self.pending.extend(&plan.size_per_window[1..]);
        }
        Ok(Decision { size: plan.size_per_window[0], predicted_rate, feasible: Some(true) })
    }

    fn observe(&mut self, realized_rate: f64) -> Result<()> {
        if self.config.mode == PlannerMode::Adaptive && self.config.forecast == ForecastMode::Predicted {
            self.load = self.load.observe(realized_rate)?;
        }
        Ok(())
    }
}

/// Planning instance over the first `horizon_hours` simulated hours, built
/// from the true traces (rates above the profile are clamped).
pub fn oracle_instance(config: &SimulationConfig, grid: &ProfileGrid) -> Result<PlanningInstance> {
    config.validate()?;
    let slo = config.slo_spec();
    let grid = grid.clone().with_slo(slo)?;
    let (rates, ci) = resolve_traces(config)?;
    let h0 = config.history_hours;
    let step = config.interval_hours();
    let horizon = config.horizon_hours;
    let windows = (0..horizon)
        .step_by(step)
        .map(|k| {
            let hours = (k + step).min(horizon) - k;
            let span = h0 + k..h0 + k + hours;
            let rate = (rates.rates[span.clone()].iter().sum::<f64>() / hours as f64).min(grid.max_rate());
            let duration = hours as f64 * HOUR;
            Window {
                duration,
                rate,
                ci: ci[span].iter().sum::<f64>() / hours as f64,
                requests: (rate * duration).round() as u64,
            }
        })
        .collect();
    Ok(PlanningInstance {
        windows,
        size_candidates: grid.sizes().to_vec(),
        grid,
        slo,
        carbon: config.carbon,
        carryover: Carryover::default(),
    })
}

/// Resolve the profile and run.
pub fn run_simulation(config: &SimulationConfig) -> Result<SimulationReport> {
    let grid = resolve_profile(config)?;
    run_with_profile(config, &grid)
}

pub fn run_with_profile(config: &SimulationConfig, grid: &ProfileGrid) -> Result<SimulationReport> {
    config.validate()?;
    let slo = config.slo_spec();
    let grid = grid.clone().with_slo(slo)?;
    if let PlannerMode::Fixed(s) = config.mode {
        grid.size_index(s)?;
    }
    let wl = config.workload_config();
    wl.validate()?;
    let (rates, ci) = resolve_traces(config)?;
    let h0 = config.history_hours;
    let t0 = rates.start_time + h0 as f64 * HOUR;

    // Enough history to hold the warm-up prompts at the recent mean rate.
    let recent = &rates.rates[h0.saturating_sub(24)..h0.max(1).min(rates.len())];
    let recent_rate = recent.iter().sum::<f64>() / recent.len().max(1) as f64;
    let warm_hours = if config.warmup_prompts == 0 {
        0
    } else {
        ((config.warmup_prompts as f64 / (recent_rate.max(1e-9) * HOUR)).ceil() as usize + 1).min(h0)
    };
    let stream = workload::generate(&wl, &rates.slice(h0 - warm_hours, h0 + config.sim_hours)?)?;
    let first = stream.0.partition_point(|r| r.arrival < t0);
    let warm = &stream.0[first.saturating_sub(config.warmup_prompts)..first];
    let requests = &stream.0[first..];

    let mut ctl = Controller {
        config,
        grid: &grid,
        slo,
        rates: &rates,
        ci: &ci,
        load: LoadPredictor { start_time: rates.start_time, step: HOUR, history: rates.rates[..h0].to_vec() },
        pending: Default::default(),
        wall_times: Vec::new(),
        infeasible: 0,
        rate_clamps: 0,
    };
    let interval = config.interval_hours();
    let first_decision = ctl.decide(0, Carryover::default())?;
    let mut size = first_decision.size;
    let mut pending_decision = Some(first_decision);
    let mut cache = CacheState::with_capacity_tb(size, wl.bytes_per_token, wl.context_window, config.policy, ScoreKind::from(wl.task));
    for r in warm {
        cache.lookup(r, r.arrival);
        let _ = cache.insert(r, r.arrival);
    }
    cache.reset_stats();
    let mut ramp = Ramp::fixed(size as f64);

    let max_rate = grid.max_rate();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11_da7a);
    let mut records = Vec::with_capacity(requests.len());
    let mut windows = Vec::with_capacity(config.sim_hours);
    let mut carry = Carryover::default();
    let mut next = 0usize;
    for hour in 0..config.sim_hours {
        let start = t0 + hour as f64 * HOUR;
        let abs = h0 + hour;
        if hour > 0 && hour % interval == 0 {
            let d = ctl.decide(hour, carry)?;
            if d.size != size {
                cache.resize(d.size, start);
                let now_eff = ramp.at(start);
                ramp = Ramp { from: now_eff, to: d.size as f64, start, duration: config.ramp_s };
                size = d.size;
            }
            pending_decision = Some(d);
        }
        let decision = pending_decision.take();
        let mut true_rate = rates.rates[abs];
        if true_rate > max_rate {
            true_rate = max_rate;
            ctl.rate_clamps += 1;
        }
        let hour_ci = ci[abs];
        let end = start + HOUR;
        let (mut n, mut ok_ttft, mut ok_tpot, mut hit_tok, mut in_tok, mut carbon_g) = (0u64, 0u64, 0u64, 0u64, 0u64, 0.0);
        while next < requests.len() && requests[next].arrival < end {
            let r = &requests[next];
            next += 1;
            let t = r.arrival;
            let eff = ramp.at(t);
            let cell: ProfileCell = grid.lookup_fractional(eff, true_rate)?;
            let hit = cache.lookup(r, t);
            let _ = cache.insert(r, t);
            // Common random numbers: the draw depends only on seed and request id.
            rng.set_word_pos(r.id as u128 * 4);
            let (u1, u2): (f64, f64) = (rng.random(), rng.random());
            let ttft = two_point(cell.mean_ttft, cell.ttft_attainment, slo.ttft_threshold, u1);
            let tpot = two_point(cell.mean_tpot, cell.tpot_attainment, slo.tpot_threshold, u2);
            let c = carbon::total_carbon(
                Kwh::from_watt_seconds(cell.mean_power, ttft),
                GramsPerKwh(hour_ci),
                Terabytes(size as f64),
                Seconds(ttft),
                &config.carbon,
            )?;
            n += 1;
            ok_ttft += (ttft <= slo.ttft_threshold) as u64;
            ok_tpot += (tpot <= slo.tpot_threshold) as u64;
            hit_tok += hit;
            in_tok += r.input_tokens();
            carbon_g += c.total.value();
            records.push(RequestRecord {
                id: r.id,
                arrival: t,
                input_tokens: r.input_tokens(),
                hit_tokens: hit,
                ttft,
                tpot,
                size_tb: size,
                effective_size_tb: eff,
                carbon: c,
            });
        }
        carry.requests += n;
        carry.ttft_attained += ok_ttft;
        carry.tpot_attained += ok_tpot;
        let frac = |k: u64| (n > 0).then(|| k as f64 / n as f64);
        windows.push(WindowRecord {
            hour,
            start,
            size_tb: size,
            ci: hour_ci,
            rate: rates.rates[abs],
            predicted_rate: decision.as_ref().and_then(|d| d.predicted_rate),
            requests: n,
            ttft_attainment: frac(ok_ttft),
            tpot_attainment: frac(ok_tpot),
            token_hit_rate: (in_tok > 0).then(|| hit_tok as f64 / in_tok as f64),
            carbon_g,
            plan_feasible: decision.and_then(|d| d.feasible),
        });
        ctl.observe(n as f64 / HOUR)?;
    }

    let summary = summarize(config, slo, requests, &records, &windows, &cache, &ctl);
    Ok(SimulationReport { summary, requests: records, windows, planner_wall_times: ctl.wall_times })
}

/// Nearest-rank quantile `q` of `values`.
pub fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let rank = planner::required_count(q, values.len() as u64).max(1) as usize;
    values[rank - 1]
}

fn summarize(
    config: &SimulationConfig,
    slo: SloSpec,
    requests: &[Request],
    records: &[RequestRecord],
    windows: &[WindowRecord],
    cache: &CacheState,
    ctl: &Controller<'_>,
) -> SimulationSummary {
    let n = records.len() as u64;
    let carbon: CarbonBreakdown = records.iter().map(|r| r.carbon).sum();
    let ok_ttft = records.iter().filter(|r| r.ttft <= slo.ttft_threshold).count() as u64;
    let ok_tpot = records.iter().filter(|r| r.tpot <= slo.tpot_threshold).count() as u64;
    let need = planner::required_count(slo.rho, n);
    let frac = |k: u64| if n == 0 { 1.0 } else { k as f64 / n as f64 };
    let sizes: Vec<u32> = windows.iter().map(|w| w.size_tb).collect();
    SimulationSummary {
        label: config.label.clone(),
        mode: config.mode,
        task: config.task,
        model: config.model,
        policy: config.policy,
        seed: config.seed,
        workload_fingerprint: fingerprint(requests),
        requests: n,
        carbon_per_request_g: if n == 0 { 0.0 } else { carbon.total.value() / n as f64 },
        carbon,
        p90_ttft_s: nearest_rank(&mut records.iter().map(|r| r.ttft).collect::<Vec<_>>(), 0.9),
        p90_tpot_s: nearest_rank(&mut records.iter().map(|r| r.tpot).collect::<Vec<_>>(), 0.9),
        ttft_attainment: frac(ok_ttft),
        tpot_attainment: frac(ok_tpot),
        slo,
        slo_met: ok_ttft >= need && ok_tpot >= need,
        token_hit_rate: kvcache::token_hit_rate(&cache.stats()).unwrap_or(0.0),
        mean_size_tb: sizes.iter().map(|&s| s as f64).sum::<f64>() / sizes.len().max(1) as f64,
        size_timeline: sizes,
        infeasible_plans: ctl.infeasible,
        rate_clamps: ctl.rate_clamps,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub a: String,
    pub b: String,
    /// Total carbon of `b` over total carbon of `a`.
    pub carbon_ratio: f64,
    /// `1 - carbon_ratio`.
    pub savings: f64,
    pub ttft_attainment_delta: f64,
    pub tpot_attainment_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pairs: Vec<PairComparison>,
    pub size_timelines: Vec<(String, Vec<u32>)>,
    /// Runs whose attainment fell below `rho` for either metric.
    pub slo_violated: Vec<String>,
}

/// Every pair `(a, b)` with `a` listed before `b`.
pub fn compare_runs(runs: &[SimulationSummary]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(SimError::Config("comparison needs at least two runs".into()));
    }
    for r in &runs[1..] {
        if r.workload_fingerprint != runs[0].workload_fingerprint {
            return Err(SimError::WorkloadMismatch(runs[0].label.clone(), r.label.clone()));
        }
    }
    let mut pairs = Vec::new();
    for (i, a) in runs.iter().enumerate() {
        for b in &runs[i + 1..] {
            let ratio = b.carbon.total.value() / a.carbon.total.value();
            pairs.push(PairComparison {
                a: a.label.clone(),
                b: b.label.clone(),
                carbon_ratio: ratio,
                savings: 1.0 - ratio,
                ttft_attainment_delta: b.ttft_attainment - a.ttft_attainment,
                tpot_attainment_delta: b.tpot_attainment - a.tpot_attainment,
            });
        }
    }
    Ok(Comparison {
        pairs,
        size_timelines: runs.iter().map(|r| (r.label.clone(), r.size_timeline.clone())).collect(),
        slo_violated: runs.iter().filter(|r| !r.slo_met).map(|r| r.label.clone()).collect(),
    })
}

/// Carbon saved by `candidate` relative to `baseline`, as a fraction of the baseline.
pub fn relative_savings(candidate: &SimulationSummary, baseline: &SimulationSummary) -> f64 {
    1.0 - candidate.carbon.total.value() / baseline.carbon.total.value()
}

/// Adaptive runs for both tasks on the 70B model under four grids, on a
/// diurnal day whose peak pushes the uncached system past its SLO.
pub fn default_scenarios() -> Vec<SimulationConfig> {
    let mut out = Vec::new();
    for (task, mean) in [(TaskKind::MultiTurn, 1.0), (TaskKind::DocComp, 0.2)] {
        for grid in ["FR", "ES", "CISO", "MISO"] {
            out.push(SimulationConfig {
                label: format!("{task}-70b-{grid}"),
                task,
                rate: RateSource::Pattern(RatePattern::diurnal(mean)),
                ci: CiSource::Grid(grid.into()),
                ..SimulationConfig::default()
            });
        }
    }
    out
}

/// Multi-turn traffic at a constant 1.5 rps under a CISO-shaped day.
pub fn fixed_rate_scenario() -> SimulationConfig {
    SimulationConfig {
        label: "fixed-rate".into(),
        rate: RateSource::Pattern(RatePattern::Constant { rps: 1.5 }),
        ci: CiSource::Grid("CISO".into()),
        ..SimulationConfig::default()
    }
}

/// Run independent configs against one profile, in input order.
pub fn run_batch(configs: &[SimulationConfig], grid: &ProfileGrid, exec: Exec) -> Vec<Result<SimulationReport>> {
    par::map(exec, configs, |c| run_with_profile(c, grid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyBenchConfig {
    pub task: TaskKind,
    pub model: ModelScale,
    pub zipf_alpha: f64,
    pub requests: usize,
    /// Arrival rate; defaults to the task's calibration rate.
    pub rate: Option<f64>,
    pub sizes: Vec<u32>,
    pub policies: Vec<Policy>,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for PolicyBenchConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::DocComp,
            model: ModelScale::Large,
            zipf_alpha: 0.7,
            requests: 20_000,
            rate: None,
            sizes: vec![1, 2, 4, 8, 16],
            policies: Policy::ALL.to_vec(),
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBenchRow {
    pub policy: Policy,
    pub size_tb: u32,
    pub token_hit_rate: f64,
}

/// Token hit rate of each policy at each capacity, replaying one shared stream.
pub fn policy_bench(config: &PolicyBenchConfig) -> Result<Vec<PolicyBenchRow>> {
    if config.requests == 0 || config.sizes.is_empty() || config.policies.is_empty() {
        return Err(SimError::Config("policy bench needs requests, sizes and policies".into()));
    }
    let synth = SynthConfig::preset(config.task, config.model);
    let mut wl = match config.task {
        TaskKind::MultiTurn => WorkloadConfig::multiturn(),
        TaskKind::DocComp => WorkloadConfig::doccomp(config.zipf_alpha),
    }
    .with_seed(config.seed);
    wl.bytes_per_token = config.model.bytes_per_token();
    let rate = config.rate.unwrap_or(synth.calibration_rate);
    // Poisson counts fluctuate; give the trace headroom and cut to size.
    let trace = RateTrace::constant(0.0, config.requests as f64 / rate * 1.2 + HOUR, rate)?;
    let mut stream = workload::generate(&wl, &trace)?.0;
    if stream.len() < config.requests {
        return Err(SimError::Config(format!("generated only {} requests", stream.len())));
    }
    stream.truncate(config.requests);
    let cases: Vec<(Policy, u32)> =
        config.policies.iter().flat_map(|&p| config.sizes.iter().map(move |&s| (p, s))).collect();
    let kind = ScoreKind::from(wl.task);
    Ok(par::map(config.exec, &cases, |&(policy, size_tb)| {
        let cap = Terabytes(size_tb as f64).to_bytes();
        let stats = kvcache::replay(&stream, cap, wl.bytes_per_token, wl.context_window, policy, kind, 0);
        PolicyBenchRow { policy, size_tb, token_hit_rate: kvcache::token_hit_rate(&stats).unwrap_or(0.0) }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_matches_mean_and_attainment() {
        for &(mean, p, th) in &[(1.7, 0.93, 2.5), (3.0, 0.4, 2.5), (0.5, 0.99, 2.5), (2.4, 0.6, 2.5), (0.1, 0.8, 0.2)] {
            let low = two_point(mean, p, th, 0.0);
            let high = two_point(mean, p, th, 0.999_999);
            assert!(low <= th && high > th, "{mean} {p}: {low} {high}");
            assert!((p * low + (1.0 - p) * high - mean).abs() < 1e-12 * mean.max(1.0));
        }
        assert_eq!(two_point(1.0, 1.0, 2.5, 0.7), 1.0);
        assert!(two_point(1.0, 0.0, 2.5, 0.1) > 2.5);
        // Mean too small for the requested miss share: attainment wins.
        assert!(two_point(0.1, 0.5, 2.5, 0.9) > 2.5);
    }

    #[test]
    fn mode_parsing_round_trips() {
        for m in [PlannerMode::Adaptive, PlannerMode::FullCache, PlannerMode::NoCache, PlannerMode::Fixed(4)] {
            assert_eq!(m.to_string().parse::<PlannerMode>().unwrap(), m);
        }
        assert!("fixed:x".parse::<PlannerMode>().is_err());
    }

    #[test]
    fn ramp_only_on_growth() {
        let up = Ramp { from: 2.0, to: 6.0, start: 100.0, duration: 100.0 };
        assert_eq!(up.at(100.0), 2.0);
        assert_eq!(up.at(150.0), 4.0);
        assert_eq!(up.at(500.0), 6.0);
        let down = Ramp { from: 6.0, to: 2.0, start: 100.0, duration: 100.0 };
        assert_eq!(down.at(100.0), 2.0);
    }

    #[test]
    fn nearest_rank_quantile() {
        let mut v: Vec<f64> = (1..=10).map(|x| x as f64).collect();
        assert_eq!(nearest_rank(&mut v, 0.9), 9.0);
        let mut v = vec![5.0];
        assert_eq!(nearest_rank(&mut v, 0.9), 5.0);
    }

    #[test]
    fn config_validation() {
        let mut c = SimulationConfig { resize_interval_s: 1800.0, ..Default::default() };
        assert!(c.validate().is_err());
        c.resize_interval_s = 7200.0;
        c.validate().unwrap();
        c.history_hours = 24;
        assert!(c.validate().is_err());
        c.forecast = ForecastMode::Oracle;
        c.validate().unwrap();
    }
}
