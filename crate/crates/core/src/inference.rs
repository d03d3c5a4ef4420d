//! Survival curves and cumulative incidence functions from piecewise
//! constant hazards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HazardModel, Term};
use crate::ped::{to_ped_named, CutPoints, SurvivalRecord};

/// Piecewise-constant all-cause hazard with exact integration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub cuts: CutPoints,
    pub hazards: Vec<f64>,
    /// `H(κ_j)` for `j = 0..=J`.
    cumulative: Vec<f64>,
}

fn check_hazards(hazards: &[f64], cuts: &CutPoints) -> Result<()> {
    if hazards.len() != cuts.n_intervals() {
        return Err(Error::SchemaMismatch(format!(
            "{} hazards for {} intervals",
            hazards.len(),
            cuts.n_intervals()
        )));
    }
    for (j, &h) in hazards.iter().enumerate() {
        if !h.is_finite() {
            return Err(Error::NonFiniteHazard { row: j });
        }
        if h < 0.0 {
            return Err(Error::NegativeHazard {
                interval: j + 1,
                value: h,
            });
        }
    }
    Ok(())
}

fn cumulative(hazards: &[f64], cuts: &CutPoints) -> Vec<f64> {
    let mut out = Vec::with_capacity(hazards.len() + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for (j, h) in hazards.iter().enumerate() {
        acc += h * cuts.width(j + 1);
        out.push(acc);
    }
    out
}

/// Interval containing `t` (1-based, clamped to `1..=J`) and whether `t`
/// lies beyond the last cut.
fn locate(cuts: &CutPoints, t: f64) -> (usize, bool) {
    let k = cuts.as_slice();
    let j = k.partition_point(|&c| c < t).clamp(1, cuts.n_intervals());
    (j, t > cuts.horizon())
}

pub fn survival_curve(hazards: &[f64], cuts: &CutPoints) -> Result<SurvivalCurve> {
    check_hazards(hazards, cuts)?;
    Ok(SurvivalCurve {
        cuts: cuts.clone(),
        hazards: hazards.to_vec(),
        cumulative: cumulative(hazards, cuts),
    })
}

impl SurvivalCurve {
    pub fn cumulative_hazard(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let (j, _) = locate(&self.cuts, t);
        self.cumulative[j - 1] + self.hazards[j - 1] * (t - self.cuts.kappa(j - 1))
    }

    /// `S(t)`; the last interval's hazard is carried beyond the horizon.
    pub fn survival(&self, t: f64) -> f64 {
        (-self.cumulative_hazard(t)).exp()
    }

    pub fn evaluate(&self, times: &[f64]) -> Vec<f64> {
        let beyond = times.iter().filter(|&&t| t > self.cuts.horizon()).count();
        if beyond > 0 {
            log::warn!("{beyond} time points beyond the last cut; hazard extrapolated as constant");
        }
        times.iter().map(|&t| self.survival(t)).collect()
    }
}

/// Cause-specific hazards with all-cause survival and per-cause CIFs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CifSet {
    pub cuts: CutPoints,
    /// `h_{jk}` indexed `[cause][interval]`.
    pub hazards: Vec<Vec<f64>>,
    total: SurvivalCurve,
    /// `CIF_k(κ_j)`, `[cause][j]` for `j = 0..=J`.
    at_cuts: Vec<Vec<f64>>,
}

pub fn cifs(cause_hazards: &[Vec<f64>], cuts: &CutPoints) -> Result<CifSet> {
    if cause_hazards.is_empty() {
        return Err(Error::InvalidSpec("at least one cause is required".into()));
    }
    for h in cause_hazards {
        check_hazards(h, cuts)?;
    }
    let j_n = cuts.n_intervals();
    let total_h: Vec<f64> = (0..j_n)
        .map(|j| cause_hazards.iter().map(|h| h[j]).sum())
        .collect();
    let total = survival_curve(&total_h, cuts)?;
    let at_cuts = cause_hazards
        .iter()
        .map(|h| {
            let mut acc = 0.0;
            let mut out = vec![0.0];
            for j in 0..j_n {
                acc += increment(h[j], total_h[j], total.cumulative[j], cuts.width(j + 1));
                out.push(acc.min(1.0));
            }
            out
        })
        .collect();
    Ok(CifSet {
        cuts: cuts.clone(),
        hazards: cause_hazards.to_vec(),
        total,
        at_cuts,
    })
}

/// `S(start) · (h_k / h_·) · (1 − exp(−h_· Δ))`; zero when `h_· = 0`.
#[inline]
fn increment(h_k: f64, h_all: f64, cum_start: f64, delta: f64) -> f64 {
    if h_all == 0.0 {
        return 0.0;
    }
    (-cum_start).exp() * (h_k / h_all) * -(-h_all * delta).exp_m1()
}

impl CifSet {
    pub fn n_causes(&self) -> usize {
        self.hazards.len()
    }

    pub fn survival_curve(&self) -> &SurvivalCurve {
        &self.total
    }

    pub fn survival(&self, t: f64) -> f64 {
        self.total.survival(t)
    }

    /// `CIF_k(t)` for a 1-based cause.
    pub fn cif(&self, cause: usize, t: f64) -> Result<f64> {
        if cause == 0 || cause > self.n_causes() {
            return Err(Error::CauseOutOfRange {
                cause,
                n_causes: self.n_causes(),
            });
        }
        if t <= 0.0 {
            return Ok(0.0);
        }
        let (j, _) = locate(&self.cuts, t);
        let start = self.cuts.kappa(j - 1);
        let h_all = self.total.hazards[j - 1];
        let k = cause - 1;
        // rounding can push a saturated CIF a few ulps past 1
        let v = self.at_cuts[k][j - 1]
            + increment(self.hazards[k][j - 1], h_all, self.total.cumulative[j - 1], t - start);
        Ok(v.min(1.0))
    }

    pub fn cif_at_cuts(&self, cause: usize) -> &[f64] {
        &self.at_cuts[cause - 1]
    }
}

/// Predicted hazards for one subject, `[cause][interval]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectHazards {
    pub id: String,
    pub hazards: Vec<Vec<f64>>,
}

impl SubjectHazards {
    pub fn all_cause(&self) -> Vec<f64> {
        let j_n = self.hazards[0].len();
        (0..j_n).map(|j| self.hazards.iter().map(|h| h[j]).sum()).collect()
    }

    pub fn survival(&self, cuts: &CutPoints) -> Result<SurvivalCurve> {
        survival_curve(&self.all_cause(), cuts)
    }

    pub fn cifs(&self, cuts: &CutPoints) -> Result<CifSet> {
        cifs(&self.hazards, cuts)
    }
}

/// `h_{jk} = exp(log-hazard)` for every interval and cause of each record.
/// Entry times and outcomes of the records are ignored.
pub fn predict_hazards(model: &HazardModel, records: &[SurvivalRecord]) -> Result<Vec<SubjectHazards>> {
    let horizon = model.cuts.horizon();
    let pseudo: Vec<SurvivalRecord> = records
        .iter()
        .map(|r| SurvivalRecord {
            id: r.id.clone(),
            entry: 0.0,
            exit: horizon,
            cause: 0,
            features: r.features.clone(),
            cluster: r.cluster.clone(),
        })
        .collect();
    let ped = to_ped_named(&pseudo, &model.cuts, model.feature_names.clone())?;
    let design = model.build_design(&ped)?;
    let log_h = model.log_hazards(&design)?;
    let j_n = model.cuts.n_intervals();
    let mut out: Vec<SubjectHazards> = records
        .iter()
        .map(|r| SubjectHazards {
            id: r.id.clone(),
            hazards: vec![vec![0.0; j_n]; model.n_causes],
        })
        .collect();
    let rows = if model.n_causes >= 2 {
        crate::ped::expand_competing_risks(&ped, model.n_causes)?.rows
    } else {
        ped.rows
    };
    for (r, row) in rows.iter().enumerate() {
        let h = log_h[r].exp();
        if !h.is_finite() {
            return Err(Error::NonFiniteHazard { row: r });
        }
        let k = design.cause[r];
        out[row.subject].hazards[k][row.interval - 1] = h;
    }
    Ok(out)
}

/// Fitted contribution of a one-dimensional term (`Linear`, `Smooth`,
/// `SmoothTime`) evaluated on `grid`.
pub fn term_effect(model: &HazardModel, term: usize, cause: usize, grid: &[f64]) -> Result<Vec<f64>> {
    let coef = model.term_coefficients(term, cause)?;
    let t = &model.terms[term].term;
    let basis = match t {
        Term::Linear { .. } => return Ok(grid.iter().map(|x| x * coef[0]).collect()),
        Term::Smooth { basis, .. } | Term::SmoothTime { basis } => basis,
        _ => {
            return Err(Error::InvalidSpec(format!(
                "term {} is not one-dimensional",
                t.label()
            )))
        }
    };
    Ok(grid
        .iter()
        .map(|&x| {
            let (b, _) = basis.evaluate(x);
            b.iter().zip(&coef).map(|(a, c)| a * c).sum()
        })
        .collect())
}
