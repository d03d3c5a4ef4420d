//! Survival data from known log-hazards by exact inversion of a piecewise
//! constant cumulative hazard.
//!
//! Each subject draws from its own counter-based stream
//! (`ChaCha8` with stream id = subject index), so datasets are reproducible
//! given `(seed, index)` regardless of how the work is split.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{cifs, survival_curve, CifSet};
use crate::ped::{CutPoints, Dataset, SurvivalRecord};

pub const SCENARIO_VERSION: u32 = 1;
pub const DEFAULT_GRID_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// `sin(π x)`
    Sine,
    /// `exp(−x²)`
    Bump,
    /// `x²`
    Square,
}

impl Shape {
    fn apply(self, x: f64) -> f64 {
        match self {
            Shape::Sine => (std::f64::consts::PI * x).sin(),
            Shape::Bump => (-x * x).exp(),
            Shape::Square => x * x,
        }
    }
}

/// One additive piece of a log-hazard. Feature indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Effect {
    Constant { value: f64 },
    Linear { feature: usize, coef: f64 },
    Interaction { a: usize, b: usize, coef: f64 },
    Shape { feature: usize, shape: Shape, coef: f64 },
    /// `coef · log t`, a Weibull-type baseline.
    LogTime { coef: f64 },
    /// `coef · t · x_feature`, a time-varying effect.
    TimeInteraction { feature: usize, coef: f64 },
    /// `coefs[x_feature]` for an integer-coded group feature.
    Group { feature: usize, coefs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LogHazard {
    pub effects: Vec<Effect>,
}

impl LogHazard {
    pub fn new(effects: Vec<Effect>) -> Self {
        Self { effects }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(vec![Effect::Constant { value }])
    }

    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        self.effects
            .iter()
            .map(|e| match e {
                Effect::Constant { value } => *value,
                Effect::Linear { feature, coef } => coef * x[*feature],
                Effect::Interaction { a, b, coef } => coef * x[*a] * x[*b],
                Effect::Shape {
                    feature,
                    shape,
                    coef,
                } => coef * shape.apply(x[*feature]),
                Effect::LogTime { coef } => coef * t.ln(),
                Effect::TimeInteraction { feature, coef } => coef * t * x[*feature],
                Effect::Group { feature, coefs } => coefs[x[*feature] as usize],
            })
            .sum()
    }

    fn max_feature(&self) -> Option<usize> {
        self.effects
            .iter()
            .filter_map(|e| match e {
                Effect::Linear { feature, .. }
                | Effect::Shape { feature, .. }
                | Effect::TimeInteraction { feature, .. }
                | Effect::Group { feature, .. } => Some(*feature),
                Effect::Interaction { a, b, .. } => Some(*a.max(b)),
                _ => None,
            })
            .max()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureDist {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
    /// Integer codes `0..levels`, uniformly.
    Categorical { levels: usize },
}

impl FeatureDist {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            FeatureDist::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            FeatureDist::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            FeatureDist::Categorical { levels } => rng.random_range(0..*levels) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub count: usize,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub version: u32,
    pub feature_names: Vec<String>,
    pub features: Vec<FeatureDist>,
    /// One log-hazard per cause.
    pub causes: Vec<LogHazard>,
    pub n_subjects: usize,
    /// Rate of independent exponential censoring (0 disables it).
    pub censoring_rate: f64,
    pub t_max: f64,
    #[serde(default)]
    pub clusters: Option<ClusterSpec>,
    pub grid_steps: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("scenario {}: {m}", self.name)));
        if !(self.t_max > 0.0) {
            return bad("t_max must be positive");
        }
        if self.causes.is_empty() {
            return bad("at least one cause is required");
        }
        if self.features.len() != self.feature_names.len() {
            return bad("feature names and distributions differ in length");
        }
        if !(self.censoring_rate >= 0.0 && self.censoring_rate.is_finite()) {
            return bad("censoring rate must be finite and non-negative");
        }
        if self.grid_steps == 0 {
            return bad("grid needs at least one step");
        }
        if let Some(c) = &self.clusters {
            if c.count == 0 || !(c.sd >= 0.0) {
                return bad("clusters need a positive count and non-negative sd");
            }
        }
        for h in &self.causes {
            if h.max_feature().is_some_and(|f| f >= self.features.len()) {
                return bad("log-hazard refers to a missing feature");
            }
        }
        Ok(())
    }

    pub fn n_causes(&self) -> usize {
        self.causes.len()
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.t_max, self.grid_steps)
    }

    pub fn with_subjects(mut self, n: usize) -> Self {
        self.n_subjects = n;
        self
    }

    /// Looks up a named scenario from the built-in library.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "cr_v1" => Ok(cr_v1()),
            "mixed_v1" => Ok(mixed_v1()),
            "latent_v1" => Ok(latent_v1()),
            "single_v1" => Ok(single_v1()),
            _ => Err(Error::InvalidConfig(format!(
                "unknown scenario `{name}` (expected one of {})",
                SCENARIOS.join(", ")
            ))),
        }
    }
}

pub const SCENARIOS: [&str; 4] = ["single_v1", "cr_v1", "mixed_v1", "latent_v1"];

pub fn uniform_grid(t_max: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|m| t_max * m as f64 / steps as f64).collect()
}

fn uniform_features(p: usize) -> (Vec<String>, Vec<FeatureDist>) {
    (
        (1..=p).map(|i| format!("x{i}")).collect(),
        vec![FeatureDist::Uniform { lo: -1.0, hi: 1.0 }; p],
    )
}

fn lin(feature: usize, coef: f64) -> Effect {
    Effect::Linear { feature, coef }
}

fn cr_cause_one() -> LogHazard {
    LogHazard::new(vec![
        Effect::Constant { value: -2.2 },
        Effect::LogTime { coef: 0.3 },
        lin(0, 0.5),
        lin(1, -0.6),
        lin(2, 0.4),
        lin(3, 0.3),
        lin(4, -0.4),
        Effect::Interaction {
            a: 0,
            b: 1,
            coef: 2.0,
        },
        Effect::Interaction {
            a: 2,
            b: 4,
            coef: -1.6,
        },
        Effect::Shape {
            feature: 3,
            shape: Shape::Sine,
            coef: 0.8,
        },
    ])
}

/// Single risk with non-linear main effects only.
pub fn single_v1() -> Scenario {
    let (feature_names, features) = uniform_features(3);
    Scenario {
        name: "single_v1".into(),
        version: SCENARIO_VERSION,
        feature_names,
        features,
        causes: vec![LogHazard::new(vec![
            Effect::Constant { value: -1.5 },
            Effect::LogTime { coef: 0.2 },
            lin(0, 0.8),
            Effect::Shape {
                feature: 1,
                shape: Shape::Sine,
                coef: 0.7,
            },
            Effect::Shape {
                feature: 2,
                shape: Shape::Square,
                coef: 1.0,
            },
        ])],
        n_subjects: 1000,
        censoring_rate: 0.12,
        t_max: 10.0,
        clusters: None,
        grid_steps: DEFAULT_GRID_STEPS,
    }
}

/// Two competing causes: cause 1 depends on five features through linear,
/// interaction and sine terms, cause 2 on three features with one
/// interaction.
pub fn cr_v1() -> Scenario {
    let (feature_names, features) = uniform_features(5);
    Scenario {
        name: "cr_v1".into(),
        version: SCENARIO_VERSION,
        feature_names,
        features,
        causes: vec![
            cr_cause_one(),
            LogHazard::new(vec![
                Effect::Constant { value: -2.6 },
                lin(0, 0.6),
                lin(1, 0.5),
                lin(2, -0.4),
                Effect::Interaction {
                    a: 1,
                    b: 2,
                    coef: 1.2,
                },
            ]),
        ],
        n_subjects: 2000,
        censoring_rate: 0.08,
        t_max: 10.0,
        clusters: None,
        grid_steps: DEFAULT_GRID_STEPS,
    }
}

/// Cause-1 structure of `cr_v1` as a single risk plus 60 cluster
/// intercepts with standard deviation 1.5.
pub fn mixed_v1() -> Scenario {
    let (feature_names, features) = uniform_features(5);
    Scenario {
        name: "mixed_v1".into(),
        version: SCENARIO_VERSION,
        feature_names,
        features,
        causes: vec![cr_cause_one()],
        n_subjects: 3000,
        censoring_rate: 0.03,
        t_max: 10.0,
        clusters: Some(ClusterSpec { count: 60, sd: 1.5 }),
        grid_steps: DEFAULT_GRID_STEPS,
    }
}

/// Three tabular features plus a five-level group feature whose effects
/// range from −0.5 to 0.75.
pub fn latent_v1() -> Scenario {
    let (mut feature_names, mut features) = uniform_features(3);
    feature_names.push("group".into());
    features.push(FeatureDist::Categorical { levels: 5 });
    Scenario {
        name: "latent_v1".into(),
        version: SCENARIO_VERSION,
        feature_names,
        features,
        causes: vec![LogHazard::new(vec![
            Effect::Constant { value: -1.8 },
            Effect::LogTime { coef: 0.2 },
            lin(0, 0.6),
            Effect::Shape {
                feature: 1,
                shape: Shape::Sine,
                coef: 0.6,
            },
            lin(2, -0.5),
            Effect::Group {
                feature: 3,
                coefs: vec![-0.5, -0.1875, 0.125, 0.4375, 0.75],
            },
        ])],
        n_subjects: 1000,
        censoring_rate: 0.065,
        t_max: 10.0,
        clusters: None,
        grid_steps: DEFAULT_GRID_STEPS,
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid[0] != 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidConfig(
            "simulation grid must start at 0 and increase strictly".into(),
        ));
    }
    Ok(())
}

/// Per-step hazards `exp(ρ(t_m))` at the right endpoint of each grid step.
fn step_hazards<F: Fn(f64) -> f64>(rho: F, grid: &[f64]) -> Result<Vec<f64>> {
    grid[1..]
        .iter()
        .map(|&t| {
            let r = rho(t);
            if r.is_nan() || r == f64::INFINITY {
                Err(Error::NonFiniteLogHazard(format!("rho({t}) = {r}")))
            } else {
                Ok(r.exp())
            }
        })
        .collect()
}

/// Inverts `H(T) = E` for `E ~ Exp(1)`. Returns the step index and time, or
/// `None` if the cumulative hazard never reaches `E` on the grid.
fn invert<R: Rng>(total: &[f64], grid: &[f64], rng: &mut R) -> Option<(usize, f64)> {
    let e: f64 = Exp1.sample(rng);
    let mut cum = 0.0;
    for (m, &h) in total.iter().enumerate() {
        let step = h * (grid[m + 1] - grid[m]);
        if cum + step >= e && h > 0.0 {
            let t = grid[m] + (e - cum) / h;
            return Some((m, t.min(grid[m + 1])));
        }
        cum += step;
    }
    None
}

/// Draws an event time from `h(t) = exp(ρ(t))`, piecewise constant on
/// `grid`. Returns `(time, event)`; without an event by the end of the grid
/// the subject is censored at the last grid point.
pub fn sample_survival_time<F, R>(rho: F, grid: &[f64], rng: &mut R) -> Result<(f64, bool)>
where
    F: Fn(f64) -> f64,
    R: Rng,
{
    check_grid(grid)?;
    let h = step_hazards(rho, grid)?;
    Ok(match invert(&h, grid, rng) {
        Some((_, t)) => (t, true),
        None => (*grid.last().unwrap(), false),
    })
}

/// Competing-risks draw: time from the all-cause hazard, cause chosen with
/// probability `h_k / h_·` in the event step. Cause 0 means censored at the
/// end of the grid.
pub fn sample_competing<R: Rng>(
    rhos: &[&dyn Fn(f64) -> f64],
    grid: &[f64],
    rng: &mut R,
) -> Result<(f64, usize)> {
    check_grid(grid)?;
    if rhos.len() < 2 {
        return Err(Error::InvalidConfig("competing risks need at least two causes".into()));
    }
    let per_cause: Vec<Vec<f64>> = rhos
        .iter()
        .map(|r| step_hazards(r, grid))
        .collect::<Result<_>>()?;
    Ok(draw_with_cause(&per_cause, grid, rng))
}

fn draw_with_cause<R: Rng>(per_cause: &[Vec<f64>], grid: &[f64], rng: &mut R) -> (f64, usize) {
    let steps = grid.len() - 1;
    let total: Vec<f64> = (0..steps)
        .map(|m| per_cause.iter().map(|h| h[m]).sum())
        .collect();
    match invert(&total, grid, rng) {
        None => (grid[steps], 0),
        Some((m, t)) => {
            let u: f64 = rng.random::<f64>() * total[m];
            let mut acc = 0.0;
            let mut cause = per_cause.len();
            for (k, h) in per_cause.iter().enumerate() {
                acc += h[m];
                if u < acc {
                    cause = k + 1;
                    break;
                }
            }
            (t, cause)
        }
    }
}

/// True per-subject hazards on the simulation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub grid: CutPoints,
    /// `[subject][cause][step]`
    pub hazards: Vec<Vec<Vec<f64>>>,
    /// True cluster effects, by cluster index.
    pub cluster_effects: Vec<f64>,
}

impl GroundTruth {
    pub fn cifs(&self, subject: usize) -> Result<CifSet> {
        cifs(&self.hazards[subject], &self.grid)
    }

    pub fn survival(&self, subject: usize, t: f64) -> Result<f64> {
        let all: Vec<f64> = (0..self.grid.n_intervals())
            .map(|m| self.hazards[subject].iter().map(|h| h[m]).sum())
            .collect();
        Ok(survival_curve(&all, &self.grid)?.survival(t))
    }

    pub fn select(&self, subjects: std::ops::Range<usize>) -> Self {
        Self {
            grid: self.grid.clone(),
            hazards: self.hazards[subjects].to_vec(),
            cluster_effects: self.cluster_effects.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

impl SimulatedData {
    /// Splits subjects `[0, n)` and `[n, N)`.
    pub fn split_at(&self, n: usize) -> (SimulatedData, SimulatedData) {
        let total = self.dataset.records.len();
        let part = |r: std::ops::Range<usize>| SimulatedData {
            dataset: Dataset {
                feature_names: self.dataset.feature_names.clone(),
                records: self.dataset.records[r.clone()].to_vec(),
            },
            truth: self.truth.select(r),
        };
        (part(0..n), part(n..total))
    }
}

/// Draws `scenario.n_subjects` records and the matching ground truth.
pub fn make_scenario_dataset(scenario: &Scenario, seed: u64) -> Result<SimulatedData> {
    scenario.validate()?;
    let grid = scenario.grid();
    let cluster_effects: Vec<f64> = match &scenario.clusters {
        None => Vec::new(),
        Some(c) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::MAX);
            (0..c.count)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c.sd * z
                })
                .collect()
        }
    };
    let subjects: Vec<(SurvivalRecord, Vec<Vec<f64>>)> = (0..scenario.n_subjects)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let x: Vec<f64> = scenario.features.iter().map(|d| d.sample(&mut rng)).collect();
            let cluster = scenario.clusters.map(|c| i % c.count);
            let b = cluster.map_or(0.0, |v| cluster_effects[v]);
            let hazards: Vec<Vec<f64>> = scenario
                .causes
                .iter()
                .map(|h| step_hazards(|t| h.eval(&x, t) + b, &grid))
                .collect::<Result<_>>()?;
            let (t, cause) = draw_with_cause(&hazards, &grid, &mut rng);
            let (t, cause) = if scenario.censoring_rate > 0.0 {
                let c: f64 = Exp1.sample(&mut rng);
                let c = c / scenario.censoring_rate;
                if c < t {
                    (c, 0)
                } else {
                    (t, cause)
                }
            } else {
                (t, cause)
            };
            let mut rec = SurvivalRecord::new(format!("{i:06}"), t, cause, x);
            if let Some(v) = cluster {
                rec = rec.with_cluster(format!("g{v:02}"));
            }
            Ok((rec, hazards))
        })
        .collect::<Result<_>>()?;
    let (records, hazards): (Vec<_>, Vec<_>) = subjects.into_iter().unzip();
    Ok(SimulatedData {
        dataset: Dataset {
            feature_names: scenario.feature_names.clone(),
            records,
        },
        truth: GroundTruth {
            grid: CutPoints::new(grid)?,
            hazards,
            cluster_effects,
        },
    })
}
