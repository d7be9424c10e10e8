//! Performance profiles: latency, power and SLO attainment per (cache size, request rate).
//!
//! A [`ProfileGrid`] stands in for an offline profiling sweep. Grids are
//! loaded from CSV or generated by [`synth_profile`], which replays a
//! calibration stream through the LCS cache to get the steady-state token
//! hit fraction `h(size)` and then applies a simple service/queue model:
//!
//! ```text
//! service(size)    = fixed + base_prefill * (1 - h) + kv_load * h
//! util(size, rate) = min(rate * service / slots, max_util)
//! ttft(size, rate) = service + queue_coeff * service * util / (1 - util)
//! tpot(size, rate) = tpot_base * (1 + interference * util)
//! power            = idle + (peak - idle) * util
//! ```
//!
//! Per-request latencies are treated as log-normal around the mean with a
//! fixed coefficient of variation to get p90 and attainment.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::carbon::Kwh;
use crate::kvcache::{self, Policy, ScoreKind};
use crate::par::{self, Exec};
use crate::workload::{self, RateTrace, TaskKind, WorkloadConfig};

pub const PROFILE_HEADER: [&str; 9] = [
    "size_tb",
    "rate_rps",
    "mean_ttft_s",
    "p90_ttft_s",
    "mean_tpot_s",
    "p90_tpot_s",
    "mean_power_w",
    "ttft_attainment",
    "tpot_attainment",
];

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("cache size {0} TB is not in the profile")]
    UnknownSize(u32),
    #[error("rate {rate} rps exceeds profiled capacity ({max} rps)")]
    RateExceedsCapacity { rate: f64, max: f64 },
    #[error("invalid rate {0}")]
    BadRate(f64),
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error("profile has no cell for size {size} TB, rate {rate} rps")]
    MissingCell { size: u32, rate: f64 },
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: u64, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Workload(#[from] workload::WorkloadError),
}

pub type Result<T> = std::result::Result<T, PerfError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ModelScale {
    /// 70B-parameter class.
    #[default]
    #[serde(rename = "70b")]
    Large,
    /// 8B-parameter class.
    #[serde(rename = "8b")]
    Small,
}

impl ModelScale {
    /// Largest cache size offered to the planner, TB.
    pub fn max_cache_tb(self) -> u32 {
        match self {
            ModelScale::Large => 16,
            ModelScale::Small => 8,
        }
    }

    /// KV-cache bytes per token.
    pub fn bytes_per_token(self) -> u64 {
        match self {
            ModelScale::Large => 300_000,
            ModelScale::Small => 131_072,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloSpec {
    pub ttft_threshold: f64,
    pub tpot_threshold: f64,
    pub rho: f64,
}

impl SloSpec {
    pub const DEFAULT_RHO: f64 = 0.9;

    pub fn preset(task: TaskKind, model: ModelScale) -> Self {
        let (ttft, tpot) = match (task, model) {
            (TaskKind::MultiTurn, ModelScale::Large) => (2.5, 0.2),
            (TaskKind::DocComp, ModelScale::Large) => (15.0, 0.2),
            (TaskKind::MultiTurn, ModelScale::Small) => (0.5, 0.15),
            (TaskKind::DocComp, ModelScale::Small) => (2.5, 0.15),
        };
        Self { ttft_threshold: ttft, tpot_threshold: tpot, rho: Self::DEFAULT_RHO }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ttft_threshold > 0.0 && self.tpot_threshold > 0.0) {
            return Err(PerfError::Invalid("SLO thresholds must be positive".into()));
        }
        if !(self.rho >= 0.0 && self.rho <= 1.0) {
            return Err(PerfError::Invalid(format!("rho {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

impl Default for SloSpec {
    fn default() -> Self {
        Self::preset(TaskKind::MultiTurn, ModelScale::Large)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileCell {
    pub mean_ttft: f64,
    pub p90_ttft: f64,
    pub mean_tpot: f64,
    pub p90_tpot: f64,
    pub mean_power: f64,
    pub ttft_attainment: f64,
    pub tpot_attainment: f64,
}

impl ProfileCell {
    fn fields(&self) -> [f64; 7] {
        [
            self.mean_ttft,
            self.p90_ttft,
            self.mean_tpot,
            self.p90_tpot,
            self.mean_power,
            self.ttft_attainment,
            self.tpot_attainment,
        ]
    }

    fn from_fields(f: [f64; 7]) -> Self {
        Self {
            mean_ttft: f[0],
            p90_ttft: f[1],
            mean_tpot: f[2],
            p90_tpot: f[3],
            mean_power: f[4],
            ttft_attainment: f[5],
            tpot_attainment: f[6],
        }
    }

    /// Field-wise `(1 - t) * a + t * b`.
    pub fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let (fa, fb) = (a.fields(), b.fields());
        Self::from_fields(std::array::from_fn(|i| fa[i] + (fb[i] - fa[i]) * t))
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let f = self.fields();
        if f[..5].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("latency and power must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.ttft_attainment) || !(0.0..=1.0).contains(&self.tpot_attainment) {
            return Err("attainment must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Prefill energy attributed to one request: mean power over its TTFT.
pub fn per_request_energy(cell: &ProfileCell) -> Kwh {
    Kwh::from_watt_seconds(cell.mean_power, cell.mean_ttft)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileGrid {
    sizes: Vec<u32>,
    rates: Vec<f64>,
    /// Row-major, one row per size.
    cells: Vec<ProfileCell>,
    slo: SloSpec,
}

impl ProfileGrid {
    pub fn new(sizes: Vec<u32>, rates: Vec<f64>, cells: Vec<ProfileCell>, slo: SloSpec) -> Result<Self> {
        if sizes.is_empty() || rates.is_empty() {
            return Err(PerfError::Invalid("profile needs at least one size and one rate".into()));
        }
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PerfError::Invalid("sizes must be strictly ascending".into()));
        }
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PerfError::Invalid("rates must be finite, non-negative and strictly ascending".into()));
        }
        if cells.len() != sizes.len() * rates.len() {
            return Err(PerfError::Invalid(format!(
                "expected {} cells, found {}",
                sizes.len() * rates.len(),
                cells.len()
            )));
        }
        for (i, c) in cells.iter().enumerate() {
            c.validate().map_err(|m| {
                PerfError::Invalid(format!("size {} rate {}: {m}", sizes[i / rates.len()], rates[i % rates.len()]))
            })?;
        }
        slo.validate()?;
        Ok(Self { sizes, rates, cells, slo })
    }

    pub fn sizes(&self) -> &[u32] {
        &self.sizes
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn slo(&self) -> SloSpec {
        self.slo
    }

    pub fn with_slo(mut self, slo: SloSpec) -> Result<Self> {
        slo.validate()?;
        self.slo = slo;
        Ok(self)
    }

    pub fn max_rate(&self) -> f64 {
        *self.rates.last().expect("non-empty")
    }

    pub fn max_size(&self) -> u32 {
        *self.sizes.last().expect("non-empty")
    }

    pub fn cell(&self, size_index: usize, rate_index: usize) -> &ProfileCell {
        &self.cells[size_index * self.rates.len() + rate_index]
    }

    pub fn size_index(&self, size_tb: u32) -> Result<usize> {
        self.sizes.binary_search(&size_tb).map_err(|_| PerfError::UnknownSize(size_tb))
    }

    fn row(&self, i: usize, rate: f64) -> Result<ProfileCell> {
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(PerfError::BadRate(rate));
        }
        let max = self.max_rate();
        if rate > max {
            return Err(PerfError::RateExceedsCapacity { rate, max });
        }
        let j = self.rates.partition_point(|&r| r < rate);
        if j < self.rates.len() && self.rates[j] == rate {
            return Ok(*self.cell(i, j));
        }
        if j == 0 {
            // Below the first profiled rate: use the lowest column.
            return Ok(*self.cell(i, 0));
        }
        let (r0, r1) = (self.rates[j - 1], self.rates[j]);
        Ok(ProfileCell::lerp(self.cell(i, j - 1), self.cell(i, j), (rate - r0) / (r1 - r0)))
    }

    /// Exact size row, linear interpolation in rate.
    pub fn lookup(&self, size_tb: u32, rate: f64) -> Result<ProfileCell> {
        self.row(self.size_index(size_tb)?, rate)
    }

    /// Like [`lookup`](Self::lookup) but for a fractional size between two
    /// profiled rows, used while an enlarged cache is still warming up.
    pub fn lookup_fractional(&self, size_tb: f64, rate: f64) -> Result<ProfileCell> {
        let lo = self.sizes[0] as f64;
        let hi = self.max_size() as f64;
        if !(size_tb >= lo && size_tb <= hi) {
            return Err(PerfError::Invalid(format!("size {size_tb} outside [{lo}, {hi}]")));
        }
        let j = self.sizes.partition_point(|&s| (s as f64) < size_tb);
        if self.sizes[j] as f64 == size_tb {
            return self.row(j, rate);
        }
        let (s0, s1) = (self.sizes[j - 1] as f64, self.sizes[j] as f64);
        let a = self.row(j - 1, rate)?;
        let b = self.row(j, rate)?;
        Ok(ProfileCell::lerp(&a, &b, (size_tb - s0) / (s1 - s0)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = PROFILE_HEADER.join(",");
        out.push('\n');
        for (i, &s) in self.sizes.iter().enumerate() {
            for (j, &r) in self.rates.iter().enumerate() {
                let _ = write!(out, "{s},{r}");
                for v in self.cell(i, j).fields() {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_csv(text: &str, slo: SloSpec, path: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows: Vec<(u32, f64, ProfileCell)> = Vec::new();
        let parse_err = |line: u64, message: String| PerfError::Parse { path: path.to_string(), line, message };
        for (n, rec) in rdr.records().enumerate() {
            let line = n as u64 + 1;
            let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
            if n == 0 {
                if rec.iter().ne(PROFILE_HEADER.iter().copied()) {
                    return Err(parse_err(line, format!("expected header `{}`", PROFILE_HEADER.join(","))));
                }
                continue;
            }
            if rec.len() != PROFILE_HEADER.len() {
                return Err(parse_err(line, format!("expected {} columns, found {}", PROFILE_HEADER.len(), rec.len())));
            }
            let size: u32 = rec[0]
                .parse()
                .map_err(|_| parse_err(line, format!("column size_tb: bad integer `{}`", &rec[0])))?;
            let mut vals = [0.0f64; 8];
            for (k, v) in vals.iter_mut().enumerate() {
                let raw = &rec[k + 1];
                *v = raw
                    .parse()
                    .ok()
                    .filter(|x: &f64| x.is_finite())
                    .ok_or_else(|| parse_err(line, format!("column {}: bad number `{raw}`", PROFILE_HEADER[k + 1])))?;
            }
            let cell = ProfileCell::from_fields(std::array::from_fn(|k| vals[k + 1]));
            rows.push((size, vals[0], cell));
        }
        if rows.is_empty() {
            return Err(PerfError::Parse { path: path.to_string(), line: 1, message: "no profile rows".into() });
        }
        let mut sizes: Vec<u32> = rows.iter().map(|r| r.0).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let mut rates: Vec<f64> = rows.iter().map(|r| r.1).collect();
        rates.sort_by(f64::total_cmp);
        rates.dedup();
        let mut cells: Vec<Option<ProfileCell>> = vec![None; sizes.len() * rates.len()];
        for (size, rate, cell) in rows {
            let i = sizes.binary_search(&size).expect("collected");
            let j = rates.binary_search_by(|r| r.total_cmp(&rate)).expect("collected");
            let slot = &mut cells[i * rates.len() + j];
            if slot.is_some() {
                return Err(PerfError::Invalid(format!("duplicate cell for size {size} TB, rate {rate} rps")));
            }
            *slot = Some(cell);
        }
        let mut complete = Vec::with_capacity(cells.len());
        for (k, c) in cells.into_iter().enumerate() {
            let (size, rate) = (sizes[k / rates.len()], rates[k % rates.len()]);
            complete.push(c.ok_or(PerfError::MissingCell { size, rate })?);
        }
        Self::new(sizes, rates, complete, slo)
    }
}

pub fn save_profile(grid: &ProfileGrid, path: &Path) -> Result<()> {
    std::fs::write(path, grid.to_csv()).map_err(|source| PerfError::Io { path: path.display().to_string(), source })
}

pub fn load_profile(path: &Path, slo: SloSpec) -> Result<ProfileGrid> {
    let text =
        std::fs::read_to_string(path).map_err(|source| PerfError::Io { path: path.display().to_string(), source })?;
    ProfileGrid::from_csv(&text, slo, &path.display().to_string())
}

/// Parameters of the synthetic profiler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub workload: WorkloadConfig,
    pub model: ModelScale,
    pub sizes: Vec<u32>,
    pub rates: Vec<f64>,
    pub slo: SloSpec,
    /// Per-request latency that caching cannot remove (scheduling, first
    /// decode step), seconds.
    pub fixed_s: f64,
    /// Mean cacheable prefill time of a request with nothing cached, seconds.
    pub base_prefill_s: f64,
    /// Time to load a fully cached context, seconds.
    pub kv_load_s: f64,
    /// Concurrent prefill capacity.
    pub slots: f64,
    pub queue_coeff: f64,
    pub max_utilization: f64,
    pub ttft_cv: f64,
    pub tpot_base_s: f64,
    pub tpot_interference: f64,
    pub tpot_cv: f64,
    pub idle_power_w: f64,
    pub peak_power_w: f64,
    /// Arrival rate of the calibration stream used to measure hit fractions.
    pub calibration_rate: f64,
    pub calibration_hours: f64,
    /// Share of calibration requests used only to warm the cache.
    pub calibration_warmup: f64,
    pub exec: Exec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::preset(TaskKind::MultiTurn, ModelScale::Large)
    }
}

impl SynthConfig {
    pub fn preset(task: TaskKind, model: ModelScale) -> Self {
        let mut workload = match task {
            TaskKind::MultiTurn => WorkloadConfig::multiturn(),
            TaskKind::DocComp => WorkloadConfig::doccomp(0.7),
        };
        workload.bytes_per_token = model.bytes_per_token();
        let scale = match model {
            ModelScale::Large => 1.0,
            ModelScale::Small => 0.2,
        };
        let (fixed, base_prefill, rates, calibration_rate): (f64, f64, Vec<f64>, f64) = match task {
            TaskKind::MultiTurn => (0.4, 0.6, (1..=8).map(|k| k as f64 * 0.25).collect(), 1.0),
            TaskKind::DocComp => (1.0, 4.0, (1..=8).map(|k| k as f64 * 0.05).collect(), 0.2),
        };
        let rates = rates.into_iter().map(|r| r / scale).collect();
        Self {
            workload,
            model,
            sizes: (0..=model.max_cache_tb()).collect(),
            rates,
            slo: SloSpec::preset(task, model),
            fixed_s: fixed * scale,
            base_prefill_s: base_prefill * scale,
            kv_load_s: 0.03 * scale,
            slots: 3.0,
            queue_coeff: 1.0,
            max_utilization: 0.97,
            ttft_cv: 0.6,
            tpot_base_s: 0.08 * if model == ModelScale::Small { 0.75 } else { 1.0 },
            tpot_interference: 0.8,
            tpot_cv: 0.3,
            idle_power_w: 400.0,
            peak_power_w: 1400.0,
            calibration_rate: calibration_rate / scale,
            calibration_hours: 24.0,
            calibration_warmup: 0.3,
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.workload.validate()?;
        self.slo.validate()?;
        let positive = [
            ("base_prefill_s", self.base_prefill_s),
            ("slots", self.slots),
            ("tpot_base_s", self.tpot_base_s),
            ("calibration_rate", self.calibration_rate),
            ("calibration_hours", self.calibration_hours),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PerfError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("kv_load_s", self.kv_load_s),
            ("fixed_s", self.fixed_s),
            ("queue_coeff", self.queue_coeff),
            ("ttft_cv", self.ttft_cv),
            ("tpot_interference", self.tpot_interference),
            ("tpot_cv", self.tpot_cv),
            ("idle_power_w", self.idle_power_w),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PerfError::Invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.kv_load_s > self.base_prefill_s {
            return Err(PerfError::Invalid("kv_load_s must not exceed base_prefill_s".into()));
        }
        if self.peak_power_w < self.idle_power_w {
            return Err(PerfError::Invalid("peak_power_w below idle_power_w".into()));
        }
        if !(self.max_utilization > 0.0 && self.max_utilization < 1.0) {
            return Err(PerfError::Invalid("max_utilization must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.calibration_warmup) {
            return Err(PerfError::Invalid("calibration_warmup must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Steady-state token hit fraction per cache size under LCS, made
/// non-decreasing in size.
pub fn hit_curve(config: &SynthConfig) -> Result<Vec<f64>> {
    let w = &config.workload;
    let trace = RateTrace::constant(0.0, config.calibration_hours * 3600.0, config.calibration_rate)?;
    let stream = workload::generate(w, &trace)?;
    let warmup = (stream.len() as f64 * config.calibration_warmup) as usize;
    let kind = ScoreKind::from(w.task);
    let raw = par::map(config.exec, &config.sizes, |&s| {
        let cap = crate::carbon::Terabytes(s as f64).to_bytes();
        let stats = kvcache::replay(&stream.0, cap, w.bytes_per_token, w.context_window, Policy::Lcs, kind, warmup);
        kvcache::token_hit_rate(&stats).unwrap_or(0.0)
    });
    let mut best = 0.0f64;
    Ok(raw
        .into_iter()
        .map(|h| {
            best = best.max(h);
            best
        })
        .collect())
}

/// Log-normal with the given mean and coefficient of variation:
/// (P[X <= threshold], 90th percentile).
fn lognormal_stats(mean: f64, cv: f64, threshold: f64) -> (f64, f64) {
    if cv == 0.0 {
        return (if mean <= threshold { 1.0 } else { 0.0 }, mean);
    }
    let sigma2 = (1.0 + cv * cv).ln();
    let sigma = sigma2.sqrt();
    let mu = mean.ln() - sigma2 / 2.0;
    let std = Normal::standard();
    let attained = std.cdf((threshold.ln() - mu) / sigma);
    let p90 = (mu + sigma * std.inverse_cdf(0.9)).exp();
    (attained, p90)
}

/// Cell of the synthetic model for a given hit fraction and rate.
pub fn model_cell(config: &SynthConfig, hit: f64, rate: f64) -> ProfileCell {
    let service = config.fixed_s + config.base_prefill_s * (1.0 - hit) + config.kv_load_s * hit;
    let util = (rate * service / config.slots).min(config.max_utilization);
    let mean_ttft = service + config.queue_coeff * service * util / (1.0 - util);
    let mean_tpot = config.tpot_base_s * (1.0 + config.tpot_interference * util);
    let (ttft_attainment, p90_ttft) = lognormal_stats(mean_ttft, config.ttft_cv, config.slo.ttft_threshold);
    let (tpot_attainment, p90_tpot) = lognormal_stats(mean_tpot, config.tpot_cv, config.slo.tpot_threshold);
    ProfileCell {
        mean_ttft,
        p90_ttft,
        mean_tpot,
        p90_tpot,
        mean_power: config.idle_power_w + (config.peak_power_w - config.idle_power_w) * util,
        ttft_attainment,
        tpot_attainment,
    }
}

/// Build a profile from a measured hit curve (one value per size).
pub fn profile_from_hits(config: &SynthConfig, hits: &[f64]) -> Result<ProfileGrid> {
    if hits.len() != config.sizes.len() {
        return Err(PerfError::Invalid("hit curve length differs from size list".into()));
    }
    let cells = hits
        .iter()
        .flat_map(|&h| config.rates.iter().map(move |&r| model_cell(config, h, r)))
        .collect();
    ProfileGrid::new(config.sizes.clone(), config.rates.clone(), cells, config.slo)
}

pub fn synth_profile(config: &SynthConfig) -> Result<ProfileGrid> {
    config.validate()?;
    let hits = hit_curve(config)?;
    log::debug!("calibrated hit curve: {hits:?}");
    profile_from_hits(config, &hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cell(v: f64) -> ProfileCell {
        ProfileCell {
            mean_ttft: v,
            p90_ttft: 2.0 * v,
            mean_tpot: v / 10.0,
            p90_tpot: v / 5.0,
            mean_power: 100.0 * v,
            ttft_attainment: 1.0 / (1.0 + v),
            tpot_attainment: 1.0 / (1.0 + v / 2.0),
        }
    }

    fn small_grid() -> ProfileGrid {
        let sizes = vec![0, 1, 2];
        let rates = vec![0.5, 1.0, 2.0];
        let cells = (0..9).map(|k| cell(1.0 + k as f64)).collect();
        ProfileGrid::new(sizes, rates, cells, SloSpec::default()).unwrap()
    }

    #[test]
    fn lookup_grid_points_and_midpoints() {
        let g = small_grid();
        assert_eq!(g.lookup(1, 1.0).unwrap(), cell(5.0));
        let mid = g.lookup(1, 1.5).unwrap();
        let (a, b) = (cell(5.0), cell(6.0));
        for (m, (x, y)) in mid.fields().iter().zip(a.fields().iter().zip(b.fields())) {
            assert!((m - (x + y) / 2.0).abs() < 1e-12);
        }
        assert!(matches!(g.lookup(1, 2.5), Err(PerfError::RateExceedsCapacity { .. })));
        assert!(matches!(g.lookup(3, 1.0), Err(PerfError::UnknownSize(3))));
    }

    #[test]
    fn fractional_lookup_blends_rows() {
        let g = small_grid();
        let c = g.lookup_fractional(0.25, 1.0).unwrap();
        assert!((c.mean_ttft - (2.0 * 0.75 + 5.0 * 0.25)).abs() < 1e-12);
        assert_eq!(g.lookup_fractional(2.0, 1.0).unwrap(), cell(8.0));
    }

    #[test]
    fn energy_examples() {
        let mut c = cell(1.0);
        c.mean_power = 0.0;
        assert_eq!(per_request_energy(&c).value(), 0.0);
        c.mean_power = 700.0;
        c.mean_ttft = 1.7;
        assert!((per_request_energy(&c).value() - 1190.0 / 3_600_000.0).abs() < 1e-18);
        assert!((per_request_energy(&c).value() - 3.306e-4).abs() < 1e-7);
        c.mean_ttft = 0.2;
        assert!((per_request_energy(&c).value() - 3.889e-5).abs() < 1e-8);
    }

    #[test]
    fn slo_presets() {
        let s = SloSpec::preset(TaskKind::DocComp, ModelScale::Large);
        assert_eq!((s.ttft_threshold, s.tpot_threshold, s.rho), (15.0, 0.2, 0.9));
        let s = SloSpec::preset(TaskKind::MultiTurn, ModelScale::Small);
        assert_eq!((s.ttft_threshold, s.tpot_threshold), (0.5, 0.15));
        let s = SloSpec::preset(TaskKind::DocComp, ModelScale::Small);
        assert_eq!((s.ttft_threshold, s.tpot_threshold), (2.5, 0.15));
        assert!(SloSpec { rho: 1.5, ..s }.validate().is_err());
    }

    #[test]
    fn csv_round_trip_is_byte_stable() {
        let g = small_grid();
        let text = g.to_csv();
        let back = ProfileGrid::from_csv(&text, g.slo(), "mem").unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_csv(), text);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        save_profile(&g, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        save_profile(&load_profile(&p, g.slo()).unwrap(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn csv_hole_and_bad_number() {
        let text = small_grid().to_csv();
        let holed: String = text.lines().filter(|l| !l.starts_with("1,2,")).map(|l| format!("{l}\n")).collect();
        match ProfileGrid::from_csv(&holed, SloSpec::default(), "h") {
            Err(PerfError::MissingCell { size, rate }) => assert_eq!((size, rate), (1, 2.0)),
            other => panic!("{other:?}"),
        }
        let bad = text.replacen("0,0.5,1,", "0,0.5,x1,", 1);
        let err = ProfileGrid::from_csv(&bad, SloSpec::default(), "b").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("mean_ttft_s"), "{err}");
    }

    #[test]
    fn lognormal_matches_closed_form() {
        // CV 0 degenerates to a point mass.
        assert_eq!(lognormal_stats(1.0, 0.0, 2.0), (1.0, 1.0));
        // Median equals threshold -> attainment 1/2.
        let cv: f64 = 0.6;
        let sigma2 = (1.0 + cv * cv).ln();
        let median = 2.0 * (-sigma2 / 2.0).exp();
        let (a, _) = lognormal_stats(2.0, cv, median);
        assert!((a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn model_cell_limits() {
        let cfg = SynthConfig::default();
        let full = model_cell(&cfg, 1.0, 0.0);
        assert!((full.mean_ttft - (cfg.fixed_s + cfg.kv_load_s)).abs() < 1e-12);
        assert_eq!(full.mean_power, cfg.idle_power_w);
        // Reference anchor: no cache at the middle rate.
        let mid = cfg.rates[cfg.rates.len() / 2];
        let c = model_cell(&cfg, 0.0, mid);
        assert!((c.mean_ttft - 1.7).abs() <= 0.2, "{}", c.mean_ttft);
    }

    proptest! {
        #[test]
        fn interpolation_sandwich(r in 0.5f64..2.0, i in 0usize..3) {
            let g = small_grid();
            let c = g.row(i, r).unwrap();
            let j = g.rates().partition_point(|&x| x < r).max(1);
            let (a, b) = (g.cell(i, j - 1).fields(), g.cell(i, j).fields());
            for (k, v) in c.fields().iter().enumerate() {
                let (lo, hi) = (a[k].min(b[k]), a[k].max(b[k]));
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }

        #[test]
        fn model_is_monotone(h1 in 0.0f64..1.0, dh in 0.0f64..0.5, r1 in 0.0f64..2.0, dr in 0.0f64..1.0) {
            let cfg = SynthConfig::default();
            let h2 = (h1 + dh).min(1.0);
            let base = model_cell(&cfg, h1, r1);
            let more_hits = model_cell(&cfg, h2, r1);
            let more_load = model_cell(&cfg, h1, r1 + dr);
            prop_assert!(more_hits.mean_ttft <= base.mean_ttft + 1e-12);
            prop_assert!(more_hits.ttft_attainment >= base.ttft_attainment - 1e-12);
            prop_assert!(more_hits.tpot_attainment >= base.tpot_attainment - 1e-12);
            prop_assert!(more_hits.mean_power <= base.mean_power + 1e-9);
            prop_assert!(more_load.mean_ttft >= base.mean_ttft - 1e-12);
            prop_assert!(more_load.ttft_attainment <= base.ttft_attainment + 1e-12);
            prop_assert!(more_load.mean_power >= base.mean_power - 1e-9);
        }
    }
}
