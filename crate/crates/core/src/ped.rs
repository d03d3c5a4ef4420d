//! Piecewise exponential data (PED) transformation.
//!
//! Raw survival records are split along a grid of cut points into one row per
//! interval in which the subject was at risk. Each row carries a pseudo-Poisson
//! status, the time at risk (entering models as a log offset) and the
//! interval's representative time `t_j = κ_j`. Intervals are half-open,
//! `(κ_{j-1}, κ_j]`, so an event exactly at `κ_j` belongs to interval `j`.
//!
//! Left truncation and start–stop records (recurrent events with repeated ids)
//! are handled through the `entry` time: a subject enters the risk set in the
//! first interval whose upper cut lies strictly after `entry`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation: `(entry, exit]` with cause `0` for censoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub id: String,
    pub entry: f64,
    pub exit: f64,
    pub cause: usize,
    pub features: Vec<f64>,
    pub cluster: Option<String>,
}

impl SurvivalRecord {
    pub fn new(id: impl Into<String>, exit: f64, cause: usize, features: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            entry: 0.0,
            exit,
            cause,
            features,
            cluster: None,
        }
    }

    pub fn with_entry(mut self, entry: f64) -> Self {
        self.entry = entry;
        self
    }

    pub fn with_cluster(mut self, cluster: impl Into<String>) -> Self {
        self.cluster = Some(cluster.into());
        self
    }

    pub fn is_event(&self) -> bool {
        self.cause > 0
    }

    fn validate(&self, index: usize, n_features: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord { index, reason };
        if !self.entry.is_finite() || !self.exit.is_finite() {
            return Err(bad("entry and exit must be finite".into()));
        }
        if self.entry < 0.0 {
            return Err(bad(format!("entry {} is negative", self.entry)));
        }
        if self.exit <= self.entry {
            return Err(bad(format!(
                "exit {} must exceed entry {}",
                self.exit, self.entry
            )));
        }
        if self.features.len() != n_features {
            return Err(bad(format!(
                "expected {} features, found {}",
                n_features,
                self.features.len()
            )));
        }
        Ok(())
    }
}

/// Records together with the names of their feature columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub records: Vec<SurvivalRecord>,
}

impl Dataset {
    pub fn new(feature_names: Vec<String>, records: Vec<SurvivalRecord>) -> Self {
        Self {
            feature_names,
            records,
        }
    }

    /// Largest cause label present (the dataset-level number of risks).
    pub fn n_causes(&self) -> usize {
        self.records.iter().map(|r| r.cause).max().unwrap_or(0).max(1)
    }

    pub fn to_ped(&self, cuts: &CutPoints) -> Result<PedFrame> {
        to_ped_named(&self.records, cuts, self.feature_names.clone())
    }

    /// Reorders feature columns to `names`; extra columns are dropped.
    pub fn select_features(&self, names: &[String]) -> Result<Dataset> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.feature_names
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| Error::UnknownFeature(n.clone()))
            })
            .collect::<Result<_>>()?;
        let records = self
            .records
            .iter()
            .map(|r| SurvivalRecord {
                features: idx.iter().map(|&i| r.features[i]).collect(),
                ..r.clone()
            })
            .collect();
        Ok(Dataset {
            feature_names: names.to_vec(),
            records,
        })
    }
}

/// Strictly increasing cut points starting at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CutPoints(Vec<f64>);

impl CutPoints {
    pub fn new(kappa: Vec<f64>) -> Result<Self> {
        if kappa.len() < 2 {
            return Err(Error::InvalidCuts(
                "at least one interval (two cut points) is required".into(),
            ));
        }
        if kappa[0] != 0.0 {
            return Err(Error::InvalidCuts(format!(
                "first cut must be 0, found {}",
                kappa[0]
            )));
        }
        if kappa.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidCuts("cut points must be finite".into()));
        }
        if kappa.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidCuts("cut points must be strictly increasing".into()));
        }
        Ok(Self(kappa))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Number of intervals `J`.
    pub fn n_intervals(&self) -> usize {
        self.0.len() - 1
    }

    /// Upper boundary `κ_J`.
    pub fn horizon(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// `κ_j` for `j` in `0..=J`.
    pub fn kappa(&self, j: usize) -> f64 {
        self.0[j]
    }

    pub fn width(&self, j: usize) -> f64 {
        self.0[j] - self.0[j - 1]
    }

    /// Interval `j` (1-based) with `t ∈ (κ_{j-1}, κ_j]`, or `None` for
    /// `t <= 0` and `t > κ_J`.
    pub fn interval_of(&self, t: f64) -> Option<usize> {
        if t <= 0.0 || t > self.horizon() {
            return None;
        }
        Some(self.0.partition_point(|&k| k < t))
    }
}

impl TryFrom<Vec<f64>> for CutPoints {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        CutPoints::new(v)
    }
}

impl From<CutPoints> for Vec<f64> {
    fn from(c: CutPoints) -> Self {
        c.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutStrategy {
    /// Every distinct event time becomes a cut.
    EventTimes,
    /// `J` lower empirical quantiles of the event times.
    Quantiles(usize),
}

impl std::str::FromStr for CutStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "event_times" => Ok(CutStrategy::EventTimes),
            _ => {
                let n = s
                    .strip_prefix("quantiles:")
                    .or_else(|| s.strip_prefix("quantiles="))
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n > 0)
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "unknown cut strategy `{s}` (expected event_times or quantiles:J)"
                        ))
                    })?;
                Ok(CutStrategy::Quantiles(n))
            }
        }
    }
}

/// Lower empirical quantiles `x_(⌈q·n⌉)` at `q = j/J`, deduplicated.
fn lower_quantiles(sorted: &[f64], n_quantiles: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut out: Vec<f64> = (1..=n_quantiles)
        .map(|j| {
            let idx = (j * n).div_ceil(n_quantiles).clamp(1, n);
            sorted[idx - 1]
        })
        .collect();
    out.dedup();
    out
}

pub fn make_cut_points(
    records: &[SurvivalRecord],
    strategy: CutStrategy,
    max_intervals: usize,
) -> Result<CutPoints> {
    let mut times: Vec<f64> = records
        .iter()
        .filter(|r| r.is_event())
        .map(|r| r.exit)
        .collect();
    if times.is_empty() {
        return Err(Error::NoEvents);
    }
    if max_intervals == 0 {
        return Err(Error::InvalidConfig("max_intervals must be positive".into()));
    }
    times.sort_by(f64::total_cmp);

    let inner = match strategy {
        CutStrategy::EventTimes => {
            let mut unique = times.clone();
            unique.dedup();
            if unique.len() > max_intervals {
                lower_quantiles(&times, max_intervals)
            } else {
                unique
            }
        }
        CutStrategy::Quantiles(j) => {
            if j == 0 {
                return Err(Error::InvalidConfig("quantile count must be positive".into()));
            }
            lower_quantiles(&times, j.min(max_intervals))
        }
    };

    let mut kappa = Vec::with_capacity(inner.len() + 1);
    kappa.push(0.0);
    kappa.extend(inner);
    CutPoints::new(kappa)
}

/// Subject-level information shared by all of its PED rows. One per input
/// record, so recurrent-event records with a repeated id yield several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Cause after administrative censoring at `κ_J`.
    pub cause: usize,
    pub entry: f64,
    pub exit: f64,
    pub features: Vec<f64>,
    pub cluster: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedRow {
    /// Index into [`PedFrame::subjects`].
    pub subject: usize,
    /// 1-based interval index `j`.
    pub interval: usize,
    pub status: u8,
    pub exposure: f64,
    pub offset: f64,
    pub tj: f64,
    /// Cause `k` for rows of a competing-risks expanded frame.
    pub cause: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedFrame {
    pub rows: Vec<PedRow>,
    pub subjects: Vec<Subject>,
    pub cuts: CutPoints,
    pub n_causes: usize,
    pub feature_names: Vec<String>,
    /// Records whose exit exceeded `κ_J` and were censored there.
    pub admin_censored: usize,
    /// Records that entered at or after `κ_J` and produced no rows.
    pub dropped: usize,
}

impl PedFrame {
    pub fn is_expanded(&self) -> bool {
        self.rows.first().is_some_and(|r| r.cause.is_some())
    }

    pub fn n_events(&self) -> usize {
        self.rows.iter().map(|r| r.status as usize).sum()
    }

    /// Cause of a row: the expansion label, or `1` in single-risk frames.
    pub fn row_cause(&self, row: &PedRow) -> usize {
        row.cause.unwrap_or(1)
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    /// Sub-frame holding only the given subjects (indices into `subjects`),
    /// re-indexed in the given order.
    pub fn select_subjects(&self, keep: &[usize]) -> PedFrame {
        let mut remap = vec![usize::MAX; self.subjects.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let mut rows_by_subject: Vec<Vec<&PedRow>> = vec![Vec::new(); keep.len()];
        for row in &self.rows {
            let new = remap[row.subject];
            if new != usize::MAX {
                rows_by_subject[new].push(row);
            }
        }
        let rows = rows_by_subject
            .into_iter()
            .enumerate()
            .flat_map(|(new, rs)| {
                rs.into_iter().map(move |r| PedRow {
                    subject: new,
                    ..r.clone()
                })
            })
            .collect();
        PedFrame {
            rows,
            subjects: keep.iter().map(|&i| self.subjects[i].clone()).collect(),
            cuts: self.cuts.clone(),
            n_causes: self.n_causes,
            feature_names: self.feature_names.clone(),
            admin_censored: 0,
            dropped: 0,
        }
    }
}

/// Transform records with generic feature names `x1..xP`.
pub fn to_ped(records: &[SurvivalRecord], cuts: &CutPoints) -> Result<PedFrame> {
    let p = records.first().map_or(0, |r| r.features.len());
    let names = (1..=p).map(|i| format!("x{i}")).collect();
    to_ped_named(records, cuts, names)
}

pub fn to_ped_named(
    records: &[SurvivalRecord],
    cuts: &CutPoints,
    feature_names: Vec<String>,
) -> Result<PedFrame> {
    let p = feature_names.len();
    let kappa = cuts.as_slice();
    let horizon = cuts.horizon();
    let n_causes = records.iter().map(|r| r.cause).max().unwrap_or(0).max(1);

    let mut rows = Vec::new();
    let mut subjects = Vec::with_capacity(records.len());
    let mut admin_censored = 0;
    let mut dropped = 0;

    for (index, rec) in records.iter().enumerate() {
        rec.validate(index, p)?;
        if rec.entry >= horizon {
            dropped += 1;
            continue;
        }
        let (exit, cause) = if rec.exit > horizon {
            admin_censored += 1;
            (horizon, 0)
        } else {
            (rec.exit, rec.cause)
        };
        // first interval with κ_j > entry
        let first = kappa.partition_point(|&k| k <= rec.entry);
        // interval with exit ∈ (κ_{b-1}, κ_b]
        let last = kappa.partition_point(|&k| k < exit);

        let subject = subjects.len();
        for j in first..=last {
            let exposure = exit.min(kappa[j]) - rec.entry.max(kappa[j - 1]);
            debug_assert!(exposure > 0.0);
            rows.push(PedRow {
                subject,
                interval: j,
                status: u8::from(j == last && cause > 0),
                exposure,
                offset: exposure.ln(),
                tj: kappa[j],
                cause: None,
            });
        }
        subjects.push(Subject {
            id: rec.id.clone(),
            cause,
            entry: rec.entry,
            exit,
            features: rec.features.clone(),
            cluster: rec.cluster.clone(),
        });
    }

    if admin_censored > 0 {
        log::warn!("{admin_censored} records exceeded the last cut point and were censored there");
    }

    Ok(PedFrame {
        rows,
        subjects,
        cuts: cuts.clone(),
        n_causes,
        feature_names,
        admin_censored,
        dropped,
    })
}

/// Replicate every row once per cause; the status of replica `k` is set only
/// when the subject's event was of cause `k`.
pub fn expand_competing_risks(ped: &PedFrame, n_causes: usize) -> Result<PedFrame> {
    if n_causes < 2 {
        return Err(Error::InvalidConfig(format!(
            "competing-risks expansion needs at least 2 causes, got {n_causes}"
        )));
    }
    if ped.is_expanded() {
        return Err(Error::InvalidConfig("frame is already expanded".into()));
    }
    if let Some(s) = ped.subjects.iter().find(|s| s.cause > n_causes) {
        return Err(Error::CauseOutOfRange {
            cause: s.cause,
            n_causes,
        });
    }
    let mut rows = Vec::with_capacity(ped.rows.len() * n_causes);
    for row in &ped.rows {
        let event_cause = ped.subjects[row.subject].cause;
        for k in 1..=n_causes {
            rows.push(PedRow {
                status: u8::from(row.status == 1 && event_cause == k),
                cause: Some(k),
                ..row.clone()
            });
        }
    }
    Ok(PedFrame {
        rows,
        n_causes,
        ..ped.clone()
    })
}
