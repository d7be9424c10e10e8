//! Rate and carbon-intensity trace files, plus synthetic daily patterns.
//!
//! Both file formats are two-column CSV with a fixed header, one row per
//! step, timestamps strictly increasing at a constant step.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RateTrace;
use crate::carbon::{CarbonIntensitySeries, GramsPerKwh, Seconds};

pub const RATE_HEADER: [&str; 2] = ["epoch_seconds", "requests_per_second"];
pub const CI_HEADER: [&str; 2] = ["epoch_seconds", "gco2e_per_kwh"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: u64, message: String },
    #[error("{path}: file has no data rows")]
    Empty { path: String },
}

fn parse_two_column(path: &Path, header: [&str; 2], what: &str) -> Result<(f64, f64, Vec<f64>), TraceError> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| TraceError::Io { path: name.clone(), source: e })?;
    parse_reader(file, &name, header, what)
}

fn parse_reader<R: std::io::Read>(
    input: R,
    name: &str,
    header: [&str; 2],
    what: &str,
) -> Result<(f64, f64, Vec<f64>), TraceError> {
    let err = |line: u64, message: String| TraceError::Parse { path: name.to_string(), line, message };
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut records = rdr.records();

    match records.next() {
        None => return Err(TraceError::Empty { path: name.to_string() }),
        Some(Err(e)) => return Err(err(1, e.to_string())),
        Some(Ok(h)) => {
            if h.len() != 2 || h.get(0) != Some(header[0]) || h.get(1) != Some(header[1]) {
                return Err(err(1, format!("expected header `{},{}`", header[0], header[1])));
            }
        }
    }

    let mut times = Vec::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 2 {
            return Err(err(line, format!("expected 2 fields, found {}", rec.len())));
        }
        let t: f64 = rec[0].parse().map_err(|_| err(line, format!("bad timestamp `{}`", &rec[0])))?;
        let v: f64 = rec[1].parse().map_err(|_| err(line, format!("bad {what} `{}`", &rec[1])))?;
        if !t.is_finite() {
            return Err(err(line, format!("bad timestamp `{}`", &rec[0])));
        }
        if !v.is_finite() || v < 0.0 {
            return Err(err(line, format!("{what} must be a non-negative number, got `{}`", &rec[1])));
        }
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(err(line, format!("timestamp {t} does not increase (previous {prev})")));
            }
        }
        times.push(t);
        values.push(v);
    }
    if values.is_empty() {
        return Err(TraceError::Empty { path: name.to_string() });
    }
    let step = if times.len() > 1 { times[1] - times[0] } else { 3_600.0 };
    for (i, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - step).abs() > 1e-6 * step {
            // header is line 1, first data row line 2
            return Err(err(i as u64 + 3, format!("irregular step {} (expected {step})", w[1] - w[0])));
        }
    }
    Ok((times[0], step, values))
}

/// Read a `epoch_seconds,requests_per_second` file.
pub fn load_rate_trace(path: impl AsRef<Path>) -> Result<RateTrace, TraceError> {
    let path = path.as_ref();
    let (start, step, values) = parse_two_column(path, RATE_HEADER, "rate")?;
    RateTrace::new(start, step, values).map_err(|e| TraceError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

/// Read a `epoch_seconds,gco2e_per_kwh` file.
pub fn load_ci_trace(path: impl AsRef<Path>) -> Result<CarbonIntensitySeries, TraceError> {
    let path = path.as_ref();
    let (start, step, values) = parse_two_column(path, CI_HEADER, "carbon intensity")?;
    CarbonIntensitySeries::new(start, Seconds(step), values.into_iter().map(GramsPerKwh).collect()).map_err(|e| {
        TraceError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        }
    })
}

fn write_two_column(path: &Path, header: [&str; 2], start: f64, step: f64, values: &[f64]) -> Result<(), TraceError> {
    let name = path.display().to_string();
    let io = |e: std::io::Error| TraceError::Io { path: name.clone(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    w.write_record(header).map_err(|e| io(e.into()))?;
    for (i, v) in values.iter().enumerate() {
        let t = start + step * i as f64;
        w.write_record([t.to_string(), v.to_string()]).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

pub fn save_rate_trace(trace: &RateTrace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    write_two_column(path.as_ref(), RATE_HEADER, trace.start_time, trace.step, &trace.rates)
}

pub fn save_ci_trace(series: &CarbonIntensitySeries, path: impl AsRef<Path>) -> Result<(), TraceError> {
    write_two_column(path.as_ref(), CI_HEADER, series.start_time, series.step.0, &series.raw())
}

/// Synthetic hourly request-rate shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RatePattern {
    /// Same rate every hour.
    Constant { rps: f64 },
    /// Sinusoidal day, peak at `peak_hour`, with multiplicative AR(1) noise.
    Diurnal {
        mean_rps: f64,
        /// Relative half-swing: rates span mean*(1 - a) .. mean*(1 + a).
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_peak_hour")]
        peak_hour: f64,
        /// Standard deviation of the multiplicative noise.
        #[serde(default = "default_noise")]
        noise: f64,
        /// Hour-to-hour noise autocorrelation.
        #[serde(default = "default_noise_phi")]
        noise_phi: f64,
    },
}

fn default_amplitude() -> f64 {
    0.5
}
fn default_peak_hour() -> f64 {
    14.0
}
fn default_noise() -> f64 {
    0.05
}
fn default_noise_phi() -> f64 {
    0.5
}

impl RatePattern {
    pub fn diurnal(mean_rps: f64) -> Self {
        RatePattern::Diurnal {
            mean_rps,
            amplitude: default_amplitude(),
            peak_hour: default_peak_hour(),
            noise: default_noise(),
            noise_phi: default_noise_phi(),
        }
    }

    /// `hours` hourly rates starting at midnight of `start_time`'s day.
    pub fn hourly(&self, start_time: f64, hours: usize, seed: u64) -> RateTrace {
        let rates = match *self {
            RatePattern::Constant { rps } => vec![rps.max(0.0); hours],
            RatePattern::Diurnal {
                mean_rps,
                amplitude,
                peak_hour,
                noise,
                noise_phi,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_da7a);
                let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
                let mut eps = 0.0;
                (0..hours)
                    .map(|h| {
                        let hour = (h % 24) as f64;
                        let base = mean_rps * (1.0 + amplitude * (std::f64::consts::TAU * (hour - peak_hour) / 24.0).cos());
                        eps = noise_phi * eps + normal.sample(&mut rng);
                        (base * (1.0 + eps)).max(0.0)
                    })
                    .collect()
            }
        };
        RateTrace::hourly(start_time, rates).expect("non-empty, non-negative rates")
    }
}

/// Synthetic hourly carbon-intensity shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CiPattern {
    Flat { value: f64 },
    /// Smooth day with a single trough and a single peak.
    Daily {
        trough: f64,
        trough_hour: f64,
        peak: f64,
        peak_hour: f64,
    },
}

impl CiPattern {
    fn value_at(&self, hour_of_day: f64) -> f64 {
        match *self {
            CiPattern::Flat { value } => value,
            CiPattern::Daily {
                trough,
                trough_hour,
                peak,
                peak_hour,
            } => {
                let rise = (peak_hour - trough_hour).rem_euclid(24.0);
                let fall = 24.0 - rise;
                let since_trough = (hour_of_day - trough_hour).rem_euclid(24.0);
                let swing = peak - trough;
                let half_cos = |x: f64| (1.0 - (std::f64::consts::PI * x).cos()) / 2.0;
                if since_trough <= rise {
                    trough + swing * half_cos(since_trough / rise)
                } else {
                    peak - swing * half_cos((since_trough - rise) / fall)
                }
            }
        }
    }

    pub fn hourly(&self, start_time: f64, hours: usize) -> CarbonIntensitySeries {
        let values: Vec<f64> = (0..hours).map(|h| self.value_at((h % 24) as f64)).collect();
        CarbonIntensitySeries::hourly(start_time, &values).expect("non-negative pattern")
    }
}

/// Named grid presets: flat grid averages (FR 33, ES 124, MISO 485) and a
/// CISO-like day that bottoms out at 37 at 07:00 and peaks at 232 at 20:00.
pub fn ci_pattern(label: &str) -> Option<CiPattern> {
    match label.to_ascii_uppercase().as_str() {
        "FR" => Some(CiPattern::Flat { value: 33.0 }),
        "ES" => Some(CiPattern::Flat { value: 124.0 }),
        "MISO" => Some(CiPattern::Flat { value: 485.0 }),
        "CISO" => Some(CiPattern::Daily {
            trough: 37.0,
            trough_hour: 7.0,
            peak: 232.0,
            peak_hour: 20.0,
        }),
        other => other
            .strip_prefix("FLAT:")
            .and_then(|v| v.parse().ok())
            .map(|value| CiPattern::Flat { value }),
    }
}
