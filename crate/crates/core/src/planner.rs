//! SLO-constrained cache-size planning.
//!
//! Given per-window forecasts, pick one cache size per window so that total
//! predicted carbon is minimal while at least `ceil(rho * N)` requests meet
//! the TTFT threshold and, separately, the TPOT threshold.
//!
//! [`solve_exact`] is a forward dynamic program over Pareto labels
//! `(ttft attained, tpot attained, carbon)`, with attained counts capped at
//! the requirement. A label is dropped only when another label at the same
//! window is no worse in both counts, no worse in carbon, and (on a carbon
//! tie) is lexicographically earlier, so the lexicographically smallest
//! optimal size vector always survives. [`brute_force_solve`] enumerates
//! every vector and is the test oracle. [`knapsack_reduce`] maps 0/1
//! knapsack decisions onto planning instances.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::carbon::{self, CarbonBreakdown, CarbonParams, GramsPerKwh, Lifetimes, Seconds, Terabytes};
use crate::par::{self, Exec};
use crate::perfmodel::{self, PerfError, ProfileCell, ProfileGrid, SloSpec};

/// Largest search space [`brute_force_solve`] accepts.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid planning instance: {0}")]
    Invalid(String),
    #[error("brute force over {0} plans exceeds the limit of {BRUTE_FORCE_LIMIT}")]
    TooLarge(u128),
    #[error("window {window}: {source}")]
    Profile { window: usize, source: PerfError },
    #[error(transparent)]
    Carbon(#[from] carbon::CarbonError),
}

pub type Result<T> = std::result::Result<T, PlanError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    /// Seconds.
    pub duration: f64,
    /// Predicted requests per second.
    pub rate: f64,
    /// Predicted carbon intensity, gCO2e/kWh.
    pub ci: f64,
    /// Requests expected in the window.
    pub requests: u64,
}

/// Requests already served earlier in the horizon and how many met each SLO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Carryover {
    pub requests: u64,
    pub ttft_attained: u64,
    pub tpot_attained: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningInstance {
    pub windows: Vec<Window>,
    pub size_candidates: Vec<u32>,
    pub grid: ProfileGrid,
    pub slo: SloSpec,
    pub carbon: CarbonParams,
    #[serde(default)]
    pub carryover: Carryover,
}

impl PlanningInstance {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(PlanError::Invalid("no windows".into()));
        }
        if self.size_candidates.is_empty() {
            return Err(PlanError::Invalid("no size candidates".into()));
        }
        if self.size_candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PlanError::Invalid("size candidates must be strictly ascending".into()));
        }
        for &s in &self.size_candidates {
            self.grid
                .size_index(s)
                .map_err(|e| PlanError::Invalid(format!("candidate {s} TB: {e}")))?;
        }
        for (i, w) in self.windows.iter().enumerate() {
            if !(w.duration.is_finite() && w.duration > 0.0) {
                return Err(PlanError::Invalid(format!("window {i}: duration must be positive")));
            }
            if !(w.ci.is_finite() && w.ci >= 0.0) {
                return Err(PlanError::Invalid(format!("window {i}: carbon intensity must be non-negative")));
            }
        }
        if self.total_requests() == 0 {
            return Err(PlanError::Invalid("no requests to plan for".into()));
        }
        self.slo.validate().map_err(|e| PlanError::Invalid(e.to_string()))?;
        self.carbon.validate()?;
        if self.carryover.ttft_attained > self.carryover.requests
            || self.carryover.tpot_attained > self.carryover.requests
        {
            return Err(PlanError::Invalid("carryover attained exceeds carried requests".into()));
        }
        Ok(())
    }

    pub fn total_requests(&self) -> u64 {
        self.carryover.requests + self.windows.iter().map(|w| w.requests).sum::<u64>()
    }

    /// Attained counts still needed from the planned windows: (ttft, tpot).
    pub fn required(&self) -> (u64, u64) {
        let need = required_count(self.slo.rho, self.total_requests());
        (
            need.saturating_sub(self.carryover.ttft_attained),
            need.saturating_sub(self.carryover.tpot_attained),
        )
    }

    fn cell(&self, window: usize, size: u32) -> Result<ProfileCell> {
        self.grid
            .lookup(size, self.windows[window].rate)
            .map_err(|source| PlanError::Profile { window, source })
    }
}

/// `ceil(rho * n)`, snapping products within 1e-9 of an integer first so that
/// float noise in `rho` does not add a request.
pub fn required_count(rho: f64, n: u64) -> u64 {
    let v = rho * n as f64;
    let r = v.round();
    if (v - r).abs() <= 1e-9 * v.abs().max(1.0) {
        r as u64
    } else {
        v.ceil() as u64
    }
}

/// Predicted carbon of serving the window's requests at `size`, by component.
pub fn window_breakdown(instance: &PlanningInstance, window: usize, size: u32) -> Result<CarbonBreakdown> {
    let w = &instance.windows[window];
    if w.requests == 0 {
        return Ok(CarbonBreakdown::default());
    }
    let cell = instance.cell(window, size)?;
    let per_request = carbon::total_carbon(
        perfmodel::per_request_energy(&cell),
        GramsPerKwh(w.ci),
        Terabytes(size as f64),
        Seconds(cell.mean_ttft),
        &instance.carbon,
    )?;
    Ok(per_request.scaled(w.requests as f64))
}

pub fn window_carbon(instance: &PlanningInstance, window: usize, size: u32) -> Result<f64> {
    Ok(window_breakdown(instance, window, size)?.total.value())
}

/// (TTFT, TPOT) attained counts, each rounded half away from zero.
pub fn window_attained(instance: &PlanningInstance, window: usize, size: u32) -> Result<(u64, u64)> {
    let n = instance.windows[window].requests;
    if n == 0 {
        return Ok((0, 0));
    }
    let cell = instance.cell(window, size)?;
    let n = n as f64;
    Ok(((n * cell.ttft_attainment).round() as u64, (n * cell.tpot_attainment).round() as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachePlan {
    pub size_per_window: Vec<u32>,
    pub predicted_carbon: f64,
    pub predicted_ttft_attained: u64,
    pub predicted_tpot_attained: u64,
    pub required_ttft: u64,
    pub required_tpot: u64,
    pub feasible: bool,
}

/// Per-window carbon and attainment tables, indexed `[window][size index]`.
#[derive(Debug, Clone)]
struct Tables {
    carbon: Vec<Vec<f64>>,
    ttft: Vec<Vec<u64>>,
    tpot: Vec<Vec<u64>>,
}

impl Tables {
    fn build(instance: &PlanningInstance) -> Result<Self> {
        instance.validate()?;
        let (mut carbon, mut ttft, mut tpot) = (Vec::new(), Vec::new(), Vec::new());
        for w in 0..instance.windows.len() {
            let mut c = Vec::with_capacity(instance.size_candidates.len());
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for &s in &instance.size_candidates {
                c.push(window_carbon(instance, w, s)?);
                let (x, y) = window_attained(instance, w, s)?;
                a.push(x);
                b.push(y);
            }
            carbon.push(c);
            ttft.push(a);
            tpot.push(b);
        }
        Ok(Self { carbon, ttft, tpot })
    }

    fn evaluate(&self, choice: &[usize]) -> (f64, u64, u64) {
        let mut c = 0.0;
        let (mut x, mut y) = (0, 0);
        for (w, &k) in choice.iter().enumerate() {
            c += self.carbon[w][k];
            x += self.ttft[w][k];
            y += self.tpot[w][k];
        }
        (c, x, y)
    }

    /// Per window: most TTFT attained, then most TPOT, then least carbon, then smallest size.
    fn max_attainment_choice(&self) -> Vec<usize> {
        (0..self.carbon.len())
            .map(|w| {
                (0..self.carbon[w].len())
                    .min_by(|&a, &b| {
                        self.ttft[w][b]
                            .cmp(&self.ttft[w][a])
                            .then(self.tpot[w][b].cmp(&self.tpot[w][a]))
                            .then(self.carbon[w][a].total_cmp(&self.carbon[w][b]))
                            .then(a.cmp(&b))
                    })
                    .expect("non-empty sizes")
            })
            .collect()
    }

    /// A cheap feasible plan's carbon, used as a pruning bound; infinite when none is found.
    /// Starts from the max-attainment choice and applies the best carbon-saving single-window
    /// change that keeps both requirements until none is left.
    fn incumbent(&self, rx: u64, ry: u64) -> f64 {
        let mut choice = self.max_attainment_choice();
        let (mut c, mut x, mut y) = self.evaluate(&choice);
        if x < rx || y < ry {
            return f64::INFINITY;
        }
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for (w, &cur) in choice.iter().enumerate() {
                for k in 0..self.carbon[w].len() {
                    let dc = self.carbon[w][k] - self.carbon[w][cur];
                    let nx = x + self.ttft[w][k] - self.ttft[w][cur];
                    let ny = y + self.tpot[w][k] - self.tpot[w][cur];
                    if dc < 0.0 && nx >= rx && ny >= ry && best.is_none_or(|(b, _, _)| dc < b) {
                        best = Some((dc, w, k));
                    }
                }
            }
            let Some((_, w, k)) = best else { break };
            x = x + self.ttft[w][k] - self.ttft[w][choice[w]];
            y = y + self.tpot[w][k] - self.tpot[w][choice[w]];
            choice[w] = k;
            c = self.evaluate(&choice).0;
        }
        c
    }
}

fn make_plan(instance: &PlanningInstance, tables: &Tables, choice: &[usize], feasible: bool) -> CachePlan {
    let (c, x, y) = tables.evaluate(choice);
    let (rx, ry) = instance.required();
    CachePlan {
        size_per_window: choice.iter().map(|&k| instance.size_candidates[k]).collect(),
        predicted_carbon: c,
        predicted_ttft_attained: x,
        predicted_tpot_attained: y,
        required_ttft: rx,
        required_tpot: ry,
        feasible,
    }
}

#[derive(Debug, Clone, Copy)]
struct Label {
    x: u64,
    y: u64,
    carbon: f64,
    parent: u32,
    size: u16,
}

pub fn solve_exact(instance: &PlanningInstance) -> Result<CachePlan> {
    let tables = Tables::build(instance)?;
    let (rx, ry) = instance.required();
    let n_windows = instance.windows.len();
    let n_sizes = instance.size_candidates.len();

    // Most that the remaining windows can still add, per metric.
    let mut rest_x = vec![0u64; n_windows + 1];
    let mut rest_y = vec![0u64; n_windows + 1];
    for w in (0..n_windows).rev() {
        rest_x[w] = rest_x[w + 1] + tables.ttft[w].iter().max().copied().unwrap_or(0);
        rest_y[w] = rest_y[w + 1] + tables.tpot[w].iter().max().copied().unwrap_or(0);
    }
    if rest_x[0] < rx || rest_y[0] < ry {
        let choice = tables.max_attainment_choice();
        return Ok(make_plan(instance, &tables, &choice, false));
    }

    // Least carbon the remaining windows can add, and a feasible plan to beat.
    let mut rest_c = vec![0.0f64; n_windows + 1];
    for w in (0..n_windows).rev() {
        rest_c[w] = rest_c[w + 1] + tables.carbon[w].iter().copied().fold(f64::INFINITY, f64::min);
    }
    // Slack so rounding never cuts a label tied with the incumbent.
    let bound = {
        let b = tables.incumbent(rx, ry);
        b + b.abs() * 1e-9 + 1e-12
    };

    // Per stage, each survivor's (parent rank, size index).
    let mut stages: Vec<Vec<(u32, u16)>> = Vec::with_capacity(n_windows);
    let mut frontier = vec![Label { x: 0, y: 0, carbon: 0.0, parent: 0, size: 0 }];
    for w in 0..n_windows {
        // Generated in (parent rank, size) order, so index order is lexicographic order.
        let mut next = Vec::with_capacity(frontier.len() * n_sizes);
        for (p, l) in frontier.iter().enumerate() {
            for k in 0..n_sizes {
                let x = (l.x + tables.ttft[w][k]).min(rx);
                let y = (l.y + tables.tpot[w][k]).min(ry);
                let carbon = l.carbon + tables.carbon[w][k];
                if x + rest_x[w + 1] < rx || y + rest_y[w + 1] < ry || carbon + rest_c[w + 1] > bound {
                    continue;
                }
                next.push(Label { x, y, carbon, parent: p as u32, size: k as u16 });
            }
        }
        frontier = prune(next);
        stages.push(frontier.iter().map(|l| (l.parent, l.size)).collect());
    }

    let best = frontier
        .iter()
        .enumerate()
        .filter(|(_, l)| l.x >= rx && l.y >= ry)
        .min_by(|(i, a), (j, b)| a.carbon.total_cmp(&b.carbon).then(i.cmp(j)));
    let Some((mut idx, _)) = best else {
        let choice = tables.max_attainment_choice();
        return Ok(make_plan(instance, &tables, &choice, false));
    };
    let mut choice = vec![0usize; n_windows];
    for w in (0..n_windows).rev() {
        let (parent, size) = stages[w][idx];
        choice[w] = size as usize;
        idx = parent as usize;
    }
    Ok(make_plan(instance, &tables, &choice, true))
}

/// Drop dominated labels, keeping survivors in their original (lexicographic) order.
fn prune(labels: Vec<Label>) -> Vec<Label> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[a].carbon.total_cmp(&labels[b].carbon).then(a.cmp(&b)));
    // Staircase of kept (x -> y); y strictly decreases as x increases.
    let mut stairs: BTreeMap<u64, u64> = BTreeMap::new();
    let mut keep = vec![false; labels.len()];
    for i in order {
        let l = &labels[i];
        if stairs.range(l.x..).next().is_some_and(|(_, &y)| y >= l.y) {
            continue;
        }
        keep[i] = true;
        let dominated: Vec<u64> = stairs.range(..=l.x).rev().take_while(|(_, &y)| y <= l.y).map(|(&x, _)| x).collect();
        for x in dominated {
            stairs.remove(&x);
        }
        stairs.insert(l.x, l.y);
    }
    labels.into_iter().zip(keep).filter_map(|(l, k)| k.then_some(l)).collect()
}

/// Exhaustive search over every size vector; the oracle for [`solve_exact`].
pub fn brute_force_solve(instance: &PlanningInstance, exec: Exec) -> Result<CachePlan> {
    let n_windows = instance.windows.len();
    let n_sizes = instance.size_candidates.len() as u128;
    let space = n_sizes.checked_pow(n_windows as u32).unwrap_or(u128::MAX);
    if space > BRUTE_FORCE_LIMIT {
        return Err(PlanError::TooLarge(space));
    }
    let tables = Tables::build(instance)?;
    let (rx, ry) = instance.required();
    let decode = |mut code: u64| -> Vec<usize> {
        let mut v = vec![0usize; n_windows];
        for w in (0..n_windows).rev() {
            v[w] = (code % n_sizes as u64) as usize;
            code /= n_sizes as u64;
        }
        v
    };
    let space = space as u64;
    let chunks = 64u64.min(space);
    let per = space.div_ceil(chunks);
    let best = par::map_range(exec, chunks as usize, |c| {
        let mut best: Option<(f64, u64)> = None;
        for code in (c as u64 * per)..((c as u64 + 1) * per).min(space) {
            let (carbon, x, y) = tables.evaluate(&decode(code));
            if x >= rx && y >= ry && best.is_none_or(|(b, _)| carbon < b) {
                best = Some((carbon, code));
            }
        }
        best
    })
    .into_iter()
    .flatten()
    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(match best {
        Some((_, code)) => make_plan(instance, &tables, &decode(code), true),
        None => make_plan(instance, &tables, &tables.max_attainment_choice(), false),
    })
}

/// Re-evaluate a size vector from scratch: (carbon, ttft attained, tpot attained).
pub fn evaluate_plan(instance: &PlanningInstance, sizes: &[u32]) -> Result<(f64, u64, u64)> {
    if sizes.len() != instance.windows.len() {
        return Err(PlanError::Invalid("plan length differs from window count".into()));
    }
    let mut total = 0.0;
    let (mut x, mut y) = (0, 0);
    for (w, &s) in sizes.iter().enumerate() {
        total += window_carbon(instance, w, s)?;
        let (a, b) = window_attained(instance, w, s)?;
        x += a;
        y += b;
    }
    Ok((total, x, y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub size_tb: u32,
    pub rate: f64,
    pub ci: f64,
    pub requests: u64,
    pub carbon: CarbonBreakdown,
    pub ttft_attained: u64,
    pub tpot_attained: u64,
}

/// JSON-ready plan with per-window detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanExport {
    pub plan: CachePlan,
    pub windows: Vec<WindowPlan>,
    pub solver_wall_time_s: f64,
}

pub fn export_plan(instance: &PlanningInstance, plan: &CachePlan, wall_time_s: f64) -> Result<PlanExport> {
    let mut windows = Vec::with_capacity(plan.size_per_window.len());
    for (w, &s) in plan.size_per_window.iter().enumerate() {
        let (a, b) = window_attained(instance, w, s)?;
        let win = instance.windows[w];
        windows.push(WindowPlan {
            size_tb: s,
            rate: win.rate,
            ci: win.ci,
            requests: win.requests,
            carbon: window_breakdown(instance, w, s)?,
            ttft_attained: a,
            tpot_attained: b,
        });
    }
    Ok(PlanExport { plan: plan.clone(), windows, solver_wall_time_s: wall_time_s })
}

/// Solve and time in one call.
pub fn solve_timed(instance: &PlanningInstance) -> Result<(CachePlan, f64)> {
    let t0 = Instant::now();
    let plan = solve_exact(instance)?;
    Ok((plan, t0.elapsed().as_secs_f64()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnapsackInstance {
    pub weights: Vec<u64>,
    pub values: Vec<u64>,
    pub budget: u64,
    pub target: u64,
}

impl KnapsackInstance {
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.values.len() {
            return Err(PlanError::Invalid("knapsack needs equally many weights and values".into()));
        }
        if self.weights.iter().chain(&self.values).any(|&v| v == 0) || self.budget == 0 || self.target == 0 {
            return Err(PlanError::Invalid("knapsack numbers must be positive".into()));
        }
        Ok(())
    }

    /// Exhaustive decision: is there a subset with weight <= budget and value >= target?
    pub fn brute_force(&self) -> bool {
        let m = self.weights.len();
        assert!(m < 32, "brute force limited to 31 items");
        (0u32..1 << m).any(|mask| {
            let (mut w, mut v) = (0, 0);
            for k in 0..m {
                if mask >> k & 1 == 1 {
                    w += self.weights[k];
                    v += self.values[k];
                }
            }
            w <= self.budget && v >= self.target
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnapsackReduction {
    pub instance: PlanningInstance,
    /// Carbon budget the plan must stay within.
    pub budget: f64,
}

impl KnapsackReduction {
    /// Whether some feasible plan stays within the budget, given the optimal plan.
    pub fn accepts(&self, optimal: &CachePlan) -> bool {
        optimal.feasible && optimal.predicted_carbon <= self.budget * (1.0 + 1e-9)
    }
}

/// One window per item with `v_k` requests; size 1 serves all of them within
/// SLO at carbon exactly `w_k`, size 0 serves none at zero carbon, and
/// `rho = V / sum(v)`. A target above the total value yields an instance no
/// plan can satisfy.
pub fn knapsack_reduce(k: &KnapsackInstance) -> Result<KnapsackReduction> {
    k.validate()?;
    let m = k.weights.len();
    let total: u64 = k.values.iter().sum();
    let trivially_infeasible = k.target > total;
    let rates: Vec<f64> = (1..=m).map(|r| r as f64).collect();
    let idle = ProfileCell {
        mean_ttft: 1.0,
        p90_ttft: 1.0,
        mean_tpot: 1.0,
        p90_tpot: 1.0,
        mean_power: 0.0,
        ttft_attainment: 0.0,
        tpot_attainment: 0.0,
    };
    let mut cells = vec![idle; m];
    for i in 0..m {
        let t = k.weights[i] as f64 / k.values[i] as f64;
        let a = if trivially_infeasible { 0.0 } else { 1.0 };
        cells.push(ProfileCell {
            mean_ttft: t,
            p90_ttft: t,
            mean_tpot: t,
            p90_tpot: t,
            mean_power: 0.0,
            ttft_attainment: a,
            tpot_attainment: a,
        });
    }
    let rho = if trivially_infeasible { 1.0 } else { k.target as f64 / total as f64 };
    let slo = SloSpec { ttft_threshold: 1.0, tpot_threshold: 1.0, rho };
    let grid = ProfileGrid::new(vec![0, 1], rates.clone(), cells, slo).map_err(|e| PlanError::Invalid(e.to_string()))?;
    let one_second = Seconds(1.0);
    let carbon = CarbonParams {
        embodied_gpu: carbon::Grams(0.0),
        embodied_cpu: carbon::Grams(0.0),
        embodied_mem: carbon::Grams(0.0),
        ssd_unit: carbon::Grams(1.0),
        lifetimes: Lifetimes { ssd: one_second, ..Lifetimes::default() },
    };
    let windows = (0..m)
        .map(|i| Window { duration: 3600.0, rate: rates[i], ci: 0.0, requests: k.values[i] })
        .collect();
    Ok(KnapsackReduction {
        instance: PlanningInstance {
            windows,
            size_candidates: vec![0, 1],
            grid,
            slo,
            carbon,
            carryover: Carryover::default(),
        },
        budget: k.budget as f64,
    })
}
