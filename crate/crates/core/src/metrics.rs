//! Kaplan–Meier, Aalen–Johansen, IPCW Brier score and the integrated Brier
//! score up to the quartiles of the observed event times.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ped::SurvivalRecord;

/// Right-continuous step function with jumps at `times`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub initial: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => self.initial,
            i => self.values[i - 1],
        }
    }

    /// Limit from the left, `f(t−)`.
    pub fn left_limit(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s < t) {
            0 => self.initial,
            i => self.values[i - 1],
        }
    }
}

/// Distinct sorted times with event and at-risk counts.
fn risk_table(times: &[f64], events: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = Vec::new();
    let mut at_risk = times.len();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut d = 0;
        let mut m = 0;
        while i < order.len() && times[order[i]] == t {
            d += usize::from(events[order[i]]);
            m += 1;
            i += 1;
        }
        out.push((t, d, at_risk));
        at_risk -= m;
    }
    out
}

/// Product-limit estimator from times and event flags.
pub fn kaplan_meier_from(times: &[f64], events: &[bool]) -> StepFunction {
    let mut s = 1.0;
    let mut out = StepFunction {
        initial: 1.0,
        times: Vec::new(),
        values: Vec::new(),
    };
    for (t, d, n) in risk_table(times, events) {
        if d > 0 {
            s *= 1.0 - d as f64 / n as f64;
            out.times.push(t);
            out.values.push(s);
        }
    }
    out
}

/// All-cause Kaplan–Meier curve of `records`.
pub fn kaplan_meier(records: &[SurvivalRecord]) -> StepFunction {
    let times: Vec<f64> = records.iter().map(|r| r.exit).collect();
    let events: Vec<bool> = records.iter().map(SurvivalRecord::is_event).collect();
    kaplan_meier_from(&times, &events)
}

/// Kaplan–Meier estimate of the censoring distribution `G`.
pub fn censoring_km(times: &[f64], causes: &[usize]) -> StepFunction {
    let censored: Vec<bool> = causes.iter().map(|&c| c == 0).collect();
    kaplan_meier_from(times, &censored)
}

/// Aalen–Johansen cumulative incidence of `cause` (1-based).
pub fn aalen_johansen(times: &[f64], causes: &[usize], cause: usize) -> StepFunction {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut s = 1.0;
    let mut cif = 0.0;
    let mut out = StepFunction {
        initial: 0.0,
        times: Vec::new(),
        values: Vec::new(),
    };
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut d_all, mut d_k, mut m) = (0usize, 0usize, 0usize);
        while i < order.len() && times[order[i]] == t {
            let c = causes[order[i]];
            d_all += usize::from(c != 0);
            d_k += usize::from(c == cause);
            m += 1;
            i += 1;
        }
        if d_k > 0 {
            cif += s * d_k as f64 / at_risk as f64;
            out.times.push(t);
            out.values.push(cif);
        }
        s *= 1.0 - d_all as f64 / at_risk as f64;
        at_risk -= m;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrierScore {
    pub score: f64,
    /// Terms dropped because the censoring weight was zero.
    pub dropped: usize,
}

/// IPCW Brier score at `tau` given a precomputed censoring curve.
///
/// `survival[i]` is the predicted probability that subject `i` is free of
/// the target event at `tau`: `S_i(τ)` in the single-risk case, `1 − CIF_k`
/// for cause `k`. Subjects with a competing event before `tau` are weighted
/// like event subjects and compared against the target `0 ≠ k`.
pub fn brier_with(
    times: &[f64],
    causes: &[usize],
    survival: &[f64],
    tau: f64,
    cause: Option<usize>,
    g: &StepFunction,
) -> BrierScore {
    let n = times.len();
    let g_tau = g.at(tau);
    let mut total = 0.0;
    let mut dropped = 0;
    for i in 0..n {
        let s = survival[i];
        let (residual, weight) = if times[i] > tau {
            ((1.0 - s).powi(2), g_tau)
        } else if causes[i] == 0 {
            continue;
        } else {
            let target_hit = cause.is_none_or(|k| causes[i] == k);
            let r = if target_hit { s * s } else { (1.0 - s).powi(2) };
            (r, g.left_limit(times[i]))
        };
        if weight > 0.0 {
            total += residual / weight;
        } else {
            dropped += 1;
        }
    }
    BrierScore {
        score: total / n as f64,
        dropped,
    }
}

/// IPCW Brier score with the censoring curve fitted on the same records.
pub fn brier(
    times: &[f64],
    causes: &[usize],
    survival: &[f64],
    tau: f64,
    cause: Option<usize>,
) -> Result<BrierScore> {
    if times.is_empty() || times.len() != causes.len() || times.len() != survival.len() {
        return Err(Error::InvalidConfig("brier inputs must be non-empty and aligned".into()));
    }
    let g = censoring_km(times, causes);
    Ok(brier_with(times, causes, survival, tau, cause, &g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ibs_q25: f64,
    pub ibs_q50: f64,
    pub ibs_q75: f64,
    pub quartiles: [f64; 3],
    /// Pointwise Brier score at each quartile.
    pub brier_at_quartiles: [f64; 3],
    /// `(τ, BS(τ))` on the integration grid.
    pub brier_series: Vec<(f64, f64)>,
    pub n_events: usize,
    pub dropped_terms: usize,
}

impl EvalResult {
    pub fn ibs(&self) -> [f64; 3] {
        [self.ibs_q25, self.ibs_q50, self.ibs_q75]
    }
}

/// Lower empirical quartiles `x_(⌈q·n⌉)` of uncensored event times.
pub fn event_quartiles(times: &[f64], causes: &[usize]) -> Result<[f64; 3]> {
    let mut ev: Vec<f64> = times
        .iter()
        .zip(causes)
        .filter(|(_, &c)| c != 0)
        .map(|(&t, _)| t)
        .collect();
    if ev.len() < 4 {
        return Err(Error::InsufficientEvents {
            needed: 4,
            found: ev.len(),
        });
    }
    ev.sort_by(f64::total_cmp);
    let n = ev.len();
    let q = |num: usize| ev[(num * n).div_ceil(4).clamp(1, n) - 1];
    Ok([q(1), q(2), q(3)])
}

/// Minimum number of grid points on `[0, q]` for each quartile.
pub const MIN_GRID_POINTS: usize = 50;

/// Integration grid: 0, event times up to the largest quartile, the
/// quartiles, and an even grid of [`MIN_GRID_POINTS`] points on each `[0, q]`.
pub fn integration_grid(times: &[f64], causes: &[usize], quartiles: &[f64; 3]) -> Vec<f64> {
    let q_max = quartiles[2];
    let mut grid = vec![0.0];
    grid.extend(
        times
            .iter()
            .zip(causes)
            .filter(|(&t, &c)| c != 0 && t <= q_max)
            .map(|(&t, _)| t),
    );
    grid.extend_from_slice(quartiles);
    for &q in quartiles {
        let m = MIN_GRID_POINTS - 1;
        grid.extend((0..=m).map(|i| q * i as f64 / m as f64));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// `(1/q) ∫_0^q f` by the trapezoid rule on the grid points `≤ q`.
pub fn trapezoid_mean(series: &[(f64, f64)], q: f64) -> f64 {
    if q <= 0.0 {
        return series.first().map_or(0.0, |p| p.1);
    }
    let mut area = 0.0;
    for w in series.windows(2) {
        let (t0, f0) = w[0];
        let (t1, f1) = w[1];
        if t1 > q {
            break;
        }
        area += 0.5 * (f0 + f1) * (t1 - t0);
    }
    area / q
}

/// IBS up to each quartile of the observed event times.
///
/// `predict(i, τ)` returns the predicted target-free probability of test
/// subject `i` at `τ` (see [`brier_with`]).
pub fn ibs_at_quartiles<F>(
    times: &[f64],
    causes: &[usize],
    cause: Option<usize>,
    predict: F,
) -> Result<EvalResult>
where
    F: Fn(usize, f64) -> f64 + Sync,
{
    if times.len() != causes.len() {
        return Err(Error::InvalidConfig("times and causes differ in length".into()));
    }
    let quartiles = event_quartiles(times, causes)?;
    let grid = integration_grid(times, causes, &quartiles);
    let g = censoring_km(times, causes);
    let n = times.len();
    let scores: Vec<BrierScore> = grid
        .par_iter()
        .map(|&tau| {
            let s: Vec<f64> = (0..n).map(|i| predict(i, tau)).collect();
            brier_with(times, causes, &s, tau, cause, &g)
        })
        .collect();
    let series: Vec<(f64, f64)> = grid.iter().zip(&scores).map(|(&t, b)| (t, b.score)).collect();
    let dropped = scores.iter().map(|b| b.dropped).sum();
    if dropped > 0 {
        log::warn!("{dropped} Brier terms dropped for zero censoring weight");
    }
    let at = |q: f64| {
        series
            .iter()
            .find(|(t, _)| *t == q)
            .map(|p| p.1)
            .expect("quartile on grid")
    };
    Ok(EvalResult {
        ibs_q25: trapezoid_mean(&series, quartiles[0]),
        ibs_q50: trapezoid_mean(&series, quartiles[1]),
        ibs_q75: trapezoid_mean(&series, quartiles[2]),
        quartiles,
        brier_at_quartiles: [at(quartiles[0]), at(quartiles[1]), at(quartiles[2])],
        brier_series: series,
        n_events: causes.iter().filter(|&&c| c != 0).count(),
        dropped_terms: dropped,
    })
}
