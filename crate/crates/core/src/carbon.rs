//! Carbon accounting for a serving platform with an elastically sized cache.
//!
//! Every quantity is held in one canonical unit so that kilogram/gram and
//! hour/year mixups cannot happen silently:
//!
//! | quantity          | unit          | type              |
//! |-------------------|---------------|-------------------|
//! | carbon mass       | gCO2e         | [`Grams`]         |
//! | energy            | kWh           | [`Kwh`]           |
//! | carbon intensity  | gCO2e/kWh     | [`GramsPerKwh`]   |
//! | time              | seconds       | [`Seconds`]       |
//! | storage           | TB (10^12 B)  | [`Terabytes`]     |
//!
//! Total carbon over an interval is operational carbon (energy times grid
//! intensity) plus the embodied carbon of each hardware component amortized
//! by the fraction of its lifetime that the interval covers. The cache is
//! special: its embodied share also scales with the allocated capacity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seconds in one year, using 365.25-day years.
pub const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;

/// Default hardware lifetime in years.
pub const DEFAULT_LIFETIME_YEARS: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CarbonError {
    #[error("{quantity} must be non-negative and finite, got {value}")]
    Negative { quantity: &'static str, value: f64 },
    #[error("{quantity} must be positive and finite, got {value}")]
    NonPositive { quantity: &'static str, value: f64 },
    #[error("carbon-intensity series must not be empty")]
    EmptySeries,
}

pub type Result<T> = std::result::Result<T, CarbonError>;

fn non_negative(quantity: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(CarbonError::Negative { quantity, value })
    }
}

fn positive(quantity: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(CarbonError::NonPositive { quantity, value })
    }
}

macro_rules! unit {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub f64);

        impl $name {
            pub const ZERO: Self = Self(0.0);

            #[inline]
            pub fn value(self) -> f64 {
                self.0
            }
        }

        impl std::ops::Add for $name {
            type Output = Self;
            fn add(self, rhs: Self) -> Self {
                Self(self.0 + rhs.0)
            }
        }

        impl std::ops::AddAssign for $name {
            fn add_assign(&mut self, rhs: Self) {
                self.0 += rhs.0;
            }
        }

        impl std::iter::Sum for $name {
            fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
                iter.fold(Self::ZERO, |a, b| a + b)
            }
        }
    };
}

unit!(
    /// Carbon mass in grams of CO2-equivalent.
    Grams
);
unit!(
    /// Energy in kilowatt-hours.
    Kwh
);
unit!(
    /// Grid carbon intensity in gCO2e per kWh.
    GramsPerKwh
);
unit!(
    /// Duration in seconds.
    Seconds
);
unit!(
    /// Storage capacity in terabytes (10^12 bytes).
    Terabytes
);

impl Grams {
    pub fn from_kg(kg: f64) -> Self {
        Self(kg * 1_000.0)
    }

    pub fn as_kg(self) -> f64 {
        self.0 / 1_000.0
    }
}

impl Kwh {
    /// Energy of `watts` sustained for `seconds`.
    pub fn from_watt_seconds(watts: f64, seconds: f64) -> Self {
        Self(watts * seconds / 3.6e6)
    }
}

impl Seconds {
    pub fn from_hours(hours: f64) -> Self {
        Self(hours * 3_600.0)
    }

    pub fn from_years(years: f64) -> Self {
        Self(years * SECONDS_PER_YEAR)
    }

    pub fn as_years(self) -> f64 {
        self.0 / SECONDS_PER_YEAR
    }
}

impl Terabytes {
    pub const BYTES_PER_TB: f64 = 1e12;

    pub fn from_bytes(bytes: u64) -> Self {
        Self(bytes as f64 / Self::BYTES_PER_TB)
    }

    pub fn to_bytes(self) -> u64 {
        (self.0 * Self::BYTES_PER_TB).round() as u64
    }
}

/// Hardware lifetimes, one per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lifetimes {
    pub gpu: Seconds,
    pub cpu: Seconds,
    pub mem: Seconds,
    pub ssd: Seconds,
}

impl Lifetimes {
    pub fn uniform(lifetime: Seconds) -> Self {
        Self {
            gpu: lifetime,
            cpu: lifetime,
            mem: lifetime,
            ssd: lifetime,
        }
    }
}

impl Default for Lifetimes {
    fn default() -> Self {
        Self::uniform(Seconds::from_years(DEFAULT_LIFETIME_YEARS))
    }
}

/// Embodied-carbon inventory of the serving platform.
///
/// Defaults describe a 4-GPU inference server: CPU 9.3 kg, GPUs 106.4 kg,
/// 512 GB DRAM 30.8 kg, and SSD at 30 kg per TB (480 kg for 16 TB).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarbonParams {
    pub embodied_gpu: Grams,
    pub embodied_cpu: Grams,
    pub embodied_mem: Grams,
    /// Embodied carbon per TB of allocated SSD, in gCO2e/TB.
    pub ssd_unit: Grams,
    pub lifetimes: Lifetimes,
}

impl Default for CarbonParams {
    fn default() -> Self {
        Self {
            embodied_gpu: Grams::from_kg(106.4),
            embodied_cpu: Grams::from_kg(9.3),
            embodied_mem: Grams::from_kg(30.8),
            ssd_unit: Grams::from_kg(30.0),
            lifetimes: Lifetimes::default(),
        }
    }
}

impl CarbonParams {
    pub fn validate(&self) -> Result<()> {
        non_negative("embodied_gpu", self.embodied_gpu.0)?;
        non_negative("embodied_cpu", self.embodied_cpu.0)?;
        non_negative("embodied_mem", self.embodied_mem.0)?;
        non_negative("ssd_unit", self.ssd_unit.0)?;
        positive("lifetime_gpu", self.lifetimes.gpu.0)?;
        positive("lifetime_cpu", self.lifetimes.cpu.0)?;
        positive("lifetime_mem", self.lifetimes.mem.0)?;
        positive("lifetime_ssd", self.lifetimes.ssd.0)?;
        Ok(())
    }

    pub fn with_ssd_unit_kg_per_tb(mut self, kg: f64) -> Self {
        self.ssd_unit = Grams::from_kg(kg);
        self
    }

    pub fn with_ssd_lifetime_years(mut self, years: f64) -> Self {
        self.lifetimes.ssd = Seconds::from_years(years);
        self
    }

    /// GPU + CPU + memory embodied carbon, i.e. everything except the cache.
    pub fn other_embodied_total(&self) -> Grams {
        self.embodied_gpu + self.embodied_cpu + self.embodied_mem
    }

    /// Amortization rate of the non-cache components in gCO2e per second.
    pub fn other_embodied_rate(&self) -> f64 {
        self.embodied_gpu.0 / self.lifetimes.gpu.0
            + self.embodied_cpu.0 / self.lifetimes.cpu.0
            + self.embodied_mem.0 / self.lifetimes.mem.0
    }
}

/// Hourly (or other fixed-step) grid carbon intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarbonIntensitySeries {
    pub start_time: f64,
    pub step: Seconds,
    pub values: Vec<GramsPerKwh>,
}

impl CarbonIntensitySeries {
    pub fn new(start_time: f64, step: Seconds, values: Vec<GramsPerKwh>) -> Result<Self> {
        if values.is_empty() {
            return Err(CarbonError::EmptySeries);
        }
        positive("step", step.0)?;
        for v in &values {
            non_negative("carbon intensity", v.0)?;
        }
        Ok(Self {
            start_time,
            step,
            values,
        })
    }

    pub fn hourly(start_time: f64, values: &[f64]) -> Result<Self> {
        Self::new(
            start_time,
            Seconds(3_600.0),
            values.iter().copied().map(GramsPerKwh).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.step.0 * self.values.len() as f64
    }

    /// Intensity in effect at `time`; clamps to the first/last value outside the series.
    pub fn at(&self, time: f64) -> GramsPerKwh {
        let idx = ((time - self.start_time) / self.step.0).floor();
        let idx = if idx < 0.0 { 0 } else { idx as usize };
        self.values[idx.min(self.values.len() - 1)]
    }

    pub fn raw(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.0).collect()
    }
}

/// Per-interval decomposition of total carbon.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CarbonBreakdown {
    pub operational: Grams,
    pub cache_embodied: Grams,
    pub other_embodied: Grams,
    pub total: Grams,
}

impl CarbonBreakdown {
    pub fn new(operational: Grams, cache_embodied: Grams, other_embodied: Grams) -> Self {
        Self {
            operational,
            cache_embodied,
            other_embodied,
            total: operational + cache_embodied + other_embodied,
        }
    }

    /// Every component multiplied by `factor` (e.g. a request count).
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            Grams(self.operational.0 * factor),
            Grams(self.cache_embodied.0 * factor),
            Grams(self.other_embodied.0 * factor),
        )
    }

    pub fn embodied(&self) -> Grams {
        self.cache_embodied + self.other_embodied
    }
}

impl std::ops::Add for CarbonBreakdown {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            operational: self.operational + rhs.operational,
            cache_embodied: self.cache_embodied + rhs.cache_embodied,
            other_embodied: self.other_embodied + rhs.other_embodied,
            total: self.total + rhs.total,
        }
    }
}

impl std::ops::AddAssign for CarbonBreakdown {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for CarbonBreakdown {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Energy times grid intensity.
pub fn operational_carbon(energy: Kwh, ci: GramsPerKwh) -> Result<Grams> {
    let e = non_negative("energy", energy.0)?;
    let ci = non_negative("carbon intensity", ci.0)?;
    Ok(Grams(e * ci))
}

/// Embodied carbon attributed to `duration` of use over a `lifetime`.
pub fn amortized_embodied(duration: Seconds, lifetime: Seconds, embodied: Grams) -> Result<Grams> {
    let d = non_negative("duration", duration.0)?;
    let lt = positive("lifetime", lifetime.0)?;
    let c = non_negative("embodied carbon", embodied.0)?;
    Ok(Grams(d / lt * c))
}

/// Embodied carbon of `alloc` TB of cache storage held for `duration`.
pub fn cache_embodied(alloc: Terabytes, duration: Seconds, params: &CarbonParams) -> Result<Grams> {
    let alloc = non_negative("cache allocation", alloc.0)?;
    let per_tb = amortized_embodied(duration, params.lifetimes.ssd, params.ssd_unit)?;
    Ok(Grams(alloc * per_tb.0))
}

/// Embodied carbon of the GPUs, CPU and memory over `duration`.
pub fn other_embodied(duration: Seconds, params: &CarbonParams) -> Result<Grams> {
    let lt = &params.lifetimes;
    Ok(amortized_embodied(duration, lt.gpu, params.embodied_gpu)?
        + amortized_embodied(duration, lt.cpu, params.embodied_cpu)?
        + amortized_embodied(duration, lt.mem, params.embodied_mem)?)
}

/// Operational plus cache-embodied plus other-embodied carbon for one interval.
pub fn total_carbon(
    energy: Kwh,
    ci: GramsPerKwh,
    alloc: Terabytes,
    duration: Seconds,
    params: &CarbonParams,
) -> Result<CarbonBreakdown> {
    Ok(CarbonBreakdown::new(
        operational_carbon(energy, ci)?,
        cache_embodied(alloc, duration, params)?,
        other_embodied(duration, params)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FIVE_YEARS: f64 = 157_788_000.0;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn five_years_in_seconds() {
        assert_eq!(Seconds::from_years(5.0).0, FIVE_YEARS);
        assert_eq!(Lifetimes::default().ssd.0, FIVE_YEARS);
    }

    #[test]
    fn operational_examples() {
        assert_eq!(operational_carbon(Kwh(0.0), GramsPerKwh(485.0)).unwrap(), Grams(0.0));
        assert!(rel_close(
            operational_carbon(Kwh(0.7), GramsPerKwh(124.0)).unwrap().0,
            86.8,
            1e-12
        ));
        assert_eq!(operational_carbon(Kwh(1.0), GramsPerKwh(33.0)).unwrap(), Grams(33.0));
    }

    #[test]
    fn operational_rejects_negative() {
        assert!(operational_carbon(Kwh(-1.0), GramsPerKwh(10.0)).is_err());
        assert!(operational_carbon(Kwh(1.0), GramsPerKwh(-10.0)).is_err());
        assert!(operational_carbon(Kwh(f64::NAN), GramsPerKwh(10.0)).is_err());
    }

    #[test]
    fn amortized_examples() {
        let lt = Seconds(FIVE_YEARS);
        assert_eq!(amortized_embodied(Seconds(0.0), lt, Grams(480_000.0)).unwrap().0, 0.0);
        assert_eq!(amortized_embodied(lt, lt, Grams(480_000.0)).unwrap().0, 480_000.0);
        // 146500 * 3600 / 157788000, worked by hand: 527_400_000 / 157_788_000
        let v = amortized_embodied(Seconds(3600.0), lt, Grams(146_500.0)).unwrap().0;
        assert!(rel_close(v, 527_400_000.0 / 157_788_000.0, 1e-12));
        assert!((v - 3.3425).abs() < 1e-4);
    }

    #[test]
    fn amortized_rejects_bad_lifetime() {
        assert!(amortized_embodied(Seconds(1.0), Seconds(0.0), Grams(1.0)).is_err());
        assert!(amortized_embodied(Seconds(1.0), Seconds(-5.0), Grams(1.0)).is_err());
    }

    #[test]
    fn cache_embodied_examples() {
        let p = CarbonParams::default();
        assert_eq!(cache_embodied(Terabytes(0.0), Seconds(3600.0), &p).unwrap().0, 0.0);
        let v = cache_embodied(Terabytes(16.0), Seconds(3600.0), &p).unwrap().0;
        assert!(rel_close(v, 16.0 * 3600.0 * 30_000.0 / FIVE_YEARS, 1e-12));
        assert!((v - 10.952).abs() < 1e-3);
        let full = cache_embodied(Terabytes(1.0), Seconds(FIVE_YEARS), &p).unwrap().0;
        assert!(rel_close(full, 30_000.0, 1e-12));
    }

    #[test]
    fn total_examples() {
        let p = CarbonParams::default();
        let zero = total_carbon(Kwh(0.0), GramsPerKwh(300.0), Terabytes(0.0), Seconds(0.0), &p).unwrap();
        assert_eq!(zero, CarbonBreakdown::default());

        let b = total_carbon(Kwh(0.7), GramsPerKwh(124.0), Terabytes(16.0), Seconds(3600.0), &p).unwrap();
        assert!(rel_close(b.operational.0, 86.8, 1e-12));
        assert!((b.cache_embodied.0 - 10.952).abs() < 1e-3);
        assert!((b.other_embodied.0 - 3.3425).abs() < 1e-4);
        assert!((b.total.0 - 101.09).abs() < 1e-2);

        let fr = total_carbon(Kwh(0.7), GramsPerKwh(33.0), Terabytes(16.0), Seconds(3600.0), &p).unwrap();
        assert!(rel_close(fr.operational.0, 23.1, 1e-12));
        assert!((fr.total.0 - 37.39).abs() < 1e-2);
        // low-CI regime: embodied share rises
        assert!(fr.embodied().0 / fr.total.0 > b.embodied().0 / b.total.0);
    }

    #[test]
    fn series_validation_and_lookup() {
        assert!(CarbonIntensitySeries::hourly(0.0, &[]).is_err());
        assert!(CarbonIntensitySeries::hourly(0.0, &[1.0, -1.0]).is_err());
        let s = CarbonIntensitySeries::hourly(100.0, &[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(s.at(0.0).0, 10.0);
        assert_eq!(s.at(3_700.0).0, 20.0);
        assert_eq!(s.at(1e9).0, 30.0);
        assert_eq!(s.end_time(), 100.0 + 3.0 * 3600.0);
    }

    proptest! {
        #[test]
        fn operational_is_linear(a in 0.0f64..1e3, b in 0.0f64..1e3, ci in 0.0f64..1e3) {
            let lhs = operational_carbon(Kwh(a + b), GramsPerKwh(ci)).unwrap().0;
            let rhs = operational_carbon(Kwh(a), GramsPerKwh(ci)).unwrap().0
                + operational_carbon(Kwh(b), GramsPerKwh(ci)).unwrap().0;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }

        #[test]
        fn breakdown_sums(e in 0.0f64..10.0, ci in 0.0f64..800.0, alloc in 0.0f64..16.0, d in 0.0f64..1e6) {
            let b = total_carbon(Kwh(e), GramsPerKwh(ci), Terabytes(alloc), Seconds(d), &CarbonParams::default()).unwrap();
            let sum = b.operational.0 + b.cache_embodied.0 + b.other_embodied.0;
            prop_assert_eq!(b.total.0, sum);
            prop_assert!(b.operational.0 >= 0.0 && b.cache_embodied.0 >= 0.0 && b.other_embodied.0 >= 0.0);
        }

        #[test]
        fn total_is_monotone(
            e in 0.0f64..10.0, ci in 0.0f64..800.0, alloc in 0.0f64..16.0, d in 0.0f64..1e6,
            de in 0.0f64..1.0, dci in 0.0f64..50.0, dalloc in 0.0f64..2.0, dd in 0.0f64..1e4,
        ) {
            let p = CarbonParams::default();
            let base = total_carbon(Kwh(e), GramsPerKwh(ci), Terabytes(alloc), Seconds(d), &p).unwrap().total.0;
            for (e2, ci2, a2, d2) in [(e + de, ci, alloc, d), (e, ci + dci, alloc, d), (e, ci, alloc + dalloc, d), (e, ci, alloc, d + dd)] {
                let t = total_carbon(Kwh(e2), GramsPerKwh(ci2), Terabytes(a2), Seconds(d2), &p).unwrap().total.0;
                prop_assert!(t >= base);
            }
        }

        #[test]
        fn hours_and_seconds_agree(hours in 0.0f64..1e4, alloc in 0.0f64..16.0) {
            // Same physical quantities expressed via different constructors.
            let p = CarbonParams::default();
            let a = cache_embodied(Terabytes(alloc), Seconds::from_hours(hours), &p).unwrap().0;
            let b = alloc * (hours / (DEFAULT_LIFETIME_YEARS * 365.25 * 24.0)) * p.ssd_unit.0;
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300) + 1e-300);
        }
    }
}
