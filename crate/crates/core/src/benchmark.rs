//! Replicated simulate → fit → evaluate comparison of Kaplan–Meier, PAMM,
//! DeepPAMM and the true data-generating hazards.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{predict_hazards, CifSet};
use crate::metrics::{aalen_johansen, ibs_at_quartiles, kaplan_meier_from, EvalResult, StepFunction};
use crate::model::{BasisOptions, CutSpec, DeepSpec, HazardModel, ModelSpec, TermSpec};
use crate::ped::{make_cut_points, to_ped_named, SurvivalRecord};
use crate::simulate::{make_scenario_dataset, FeatureDist, Scenario, SimulatedData};
use crate::train::{tune, TrainConfig};

fn default_reps() -> usize {
    25
}
fn default_n() -> usize {
    1000
}
fn default_cause() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub scenario: String,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default = "default_n")]
    pub n_train: usize,
    #[serde(default = "default_n")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
    /// Cause whose CIF is scored in competing-risks scenarios.
    #[serde(default = "default_cause")]
    pub cause: usize,
    #[serde(default)]
    pub cuts: CutSpec,
    /// Structured terms; defaults to intercept, smooth time, one smooth per
    /// continuous feature and a random effect when the scenario is clustered.
    #[serde(default)]
    pub terms: Option<Vec<TermSpec>>,
    #[serde(default)]
    pub deep: DeepSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_true")]
    pub include_deep: bool,
}

impl BenchmarkConfig {
    pub fn new(scenario: &str) -> Self {
        Self {
            scenario: scenario.to_string(),
            n_reps: default_reps(),
            n_train: default_n(),
            n_test: default_n(),
            seed: 0,
            cause: 1,
            cuts: CutSpec::default(),
            terms: None,
            deep: DeepSpec::default(),
            train: TrainConfig::default(),
            include_deep: true,
        }
    }

    pub fn model_spec(&self, scenario: &Scenario) -> ModelSpec {
        let terms = self.terms.clone().unwrap_or_else(|| default_terms(scenario));
        let mut spec = ModelSpec::new(terms).with_causes(scenario.n_causes());
        spec.cuts = self.cuts;
        spec.deep = Some(self.deep.clone());
        spec
    }
}

pub fn default_terms(scenario: &Scenario) -> Vec<TermSpec> {
    let mut terms = vec![
        TermSpec::Intercept,
        TermSpec::SmoothTime {
            basis: BasisOptions::default(),
            psi: 1.0,
        },
    ];
    for (name, dist) in scenario.feature_names.iter().zip(&scenario.features) {
        if !matches!(dist, FeatureDist::Categorical { .. }) {
            terms.push(TermSpec::Smooth {
                feature: name.clone(),
                basis: BasisOptions::default(),
                psi: 1.0,
            });
        }
    }
    if scenario.clusters.is_some() {
        terms.push(TermSpec::RandomEffect);
    }
    terms
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "KM")]
    Km,
    #[serde(rename = "PAMM")]
    Pamm,
    #[serde(rename = "DeepPAMM")]
    DeepPamm,
    Optimal,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Km, Method::Pamm, Method::DeepPamm, Method::Optimal];

    pub fn label(self) -> &'static str {
        match self {
            Method::Km => "KM",
            Method::Pamm => "PAMM",
            Method::DeepPamm => "DeepPAMM",
            Method::Optimal => "Optimal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub result: std::result::Result<EvalResult, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub outcomes: Vec<MethodOutcome>,
    /// Correlation of estimated and true cluster effects (PAMM fit).
    pub re_correlation: Option<f64>,
}

impl ReplicateResult {
    pub fn failed(&self) -> bool {
        self.outcomes.iter().any(|o| o.result.is_err())
    }

    pub fn ibs(&self, method: Method) -> Option<[f64; 3]> {
        self.outcomes
            .iter()
            .find(|o| o.method == method)
            .and_then(|o| o.result.as_ref().ok())
            .map(EvalResult::ibs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    /// Mean and sample sd of the IBS at Q25, Q50, Q75 (probability scale).
    pub mean: [f64; 3],
    pub sd: [f64; 3],
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub config: BenchmarkConfig,
    pub replicates: Vec<ReplicateResult>,
    pub summary: Vec<SummaryRow>,
}

pub fn replicate_seed(master: u64, replicate: usize) -> u64 {
    master.wrapping_add((replicate as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs all replicates in the current rayon pool; results are ordered by
/// replicate index.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkResult> {
    let scenario = Scenario::named(&config.scenario)?;
    config.train.validate()?;
    if config.n_reps == 0 || config.n_train < 10 || config.n_test < 10 {
        return Err(Error::InvalidConfig(
            "benchmark needs at least one replicate and 10 train/test subjects".into(),
        ));
    }
    if config.cause == 0 || config.cause > scenario.n_causes() {
        return Err(Error::CauseOutOfRange {
            cause: config.cause,
            n_causes: scenario.n_causes(),
        });
    }
    let replicates: Vec<ReplicateResult> = (0..config.n_reps)
        .into_par_iter()
        .map(|r| run_replicate(config, &scenario, r))
        .collect();
    let summary = summarize(&replicates, config.include_deep);
    Ok(BenchmarkResult {
        config: config.clone(),
        replicates,
        summary,
    })
}

fn run_replicate(config: &BenchmarkConfig, scenario: &Scenario, replicate: usize) -> ReplicateResult {
    let seed = replicate_seed(config.seed, replicate);
    let failed = |msg: String| ReplicateResult {
        replicate,
        seed,
        outcomes: Method::ALL
            .iter()
            .map(|&m| MethodOutcome {
                method: m,
                result: Err(msg.clone()),
            })
            .collect(),
        re_correlation: None,
    };
    let sim = match make_scenario_dataset(
        &scenario.clone().with_subjects(config.n_train + config.n_test),
        seed,
    ) {
        Ok(s) => s,
        Err(e) => return failed(e.to_string()),
    };
    let (train, test) = sim.split_at(config.n_train);
    match evaluate_replicate(config, scenario, &train, &test, seed) {
        Ok((outcomes, re_correlation)) => ReplicateResult {
            replicate,
            seed,
            outcomes,
            re_correlation,
        },
        Err(e) => failed(e.to_string()),
    }
}

fn target(sets: &CifSet, cause: Option<usize>, tau: f64) -> f64 {
    match cause {
        None => sets.survival(tau),
        Some(k) => 1.0 - sets.cif(k, tau).unwrap_or(f64::NAN),
    }
}

fn evaluate_model(
    model: &HazardModel,
    test: &[SurvivalRecord],
    times: &[f64],
    causes: &[usize],
    cause: Option<usize>,
) -> Result<EvalResult> {
    let sets: Vec<CifSet> = predict_hazards(model, test)?
        .iter()
        .map(|h| h.cifs(&model.cuts))
        .collect::<Result<_>>()?;
    ibs_at_quartiles(times, causes, cause, |i, tau| target(&sets[i], cause, tau))
}

type ReplicateOutcome = (Vec<MethodOutcome>, Option<f64>);

fn evaluate_replicate(
    config: &BenchmarkConfig,
    scenario: &Scenario,
    train: &SimulatedData,
    test: &SimulatedData,
    seed: u64,
) -> Result<ReplicateOutcome> {
    let spec = config.model_spec(scenario);
    let cuts = make_cut_points(&train.dataset.records, spec.cuts.strategy, spec.cuts.max_intervals)?;
    let ped = to_ped_named(&train.dataset.records, &cuts, train.dataset.feature_names.clone())?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed;

    let records = &test.dataset.records;
    let times: Vec<f64> = records.iter().map(|r| r.exit).collect();
    let causes: Vec<usize> = records.iter().map(|r| r.cause).collect();
    let cause = (scenario.n_causes() > 1).then_some(config.cause);

    let mut outcomes = Vec::with_capacity(4);

    let train_times: Vec<f64> = train.dataset.records.iter().map(|r| r.exit).collect();
    let train_causes: Vec<usize> = train.dataset.records.iter().map(|r| r.cause).collect();
    let km: StepFunction = match cause {
        None => kaplan_meier_from(&train_times, &train_causes.iter().map(|&c| c != 0).collect::<Vec<_>>()),
        Some(k) => aalen_johansen(&train_times, &train_causes, k),
    };
    let km_result = ibs_at_quartiles(&times, &causes, cause, |_, tau| match cause {
        None => km.at(tau),
        Some(_) => 1.0 - km.at(tau),
    });
    outcomes.push(MethodOutcome {
        method: Method::Km,
        result: km_result.map_err(|e| e.to_string()),
    });

    let mut re_correlation = None;
    let pamm = tune(&ped, &spec.pamm_only(), &train_cfg);
    outcomes.push(MethodOutcome {
        method: Method::Pamm,
        result: pamm
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|(m, _)| {
                if !train.truth.cluster_effects.is_empty() {
                    re_correlation = random_effect_correlation(m, &train.truth.cluster_effects);
                }
                evaluate_model(m, records, &times, &causes, cause).map_err(|e| e.to_string())
            }),
    });

    if config.include_deep {
        let deep = tune(&ped, &spec, &train_cfg);
        outcomes.push(MethodOutcome {
            method: Method::DeepPamm,
            result: deep
                .map_err(|e| e.to_string())
                .and_then(|(m, _)| evaluate_model(&m, records, &times, &causes, cause).map_err(|e| e.to_string())),
        });
    }

    let truth_sets: Vec<CifSet> = (0..records.len())
        .map(|i| test.truth.cifs(i))
        .collect::<Result<_>>()?;
    outcomes.push(MethodOutcome {
        method: Method::Optimal,
        result: ibs_at_quartiles(&times, &causes, cause, |i, tau| target(&truth_sets[i], cause, tau))
            .map_err(|e| e.to_string()),
    });
    Ok((outcomes, re_correlation))
}

/// Pearson correlation between fitted cluster effects (cluster ids of the
/// form `g<index>`) and the true effects.
pub fn random_effect_correlation(model: &HazardModel, truth: &[f64]) -> Option<f64> {
    let est = model.random_effects(1).ok()?;
    let pairs: Vec<(f64, f64)> = est
        .iter()
        .filter_map(|(level, b)| {
            let idx: usize = level.strip_prefix('g')?.parse().ok()?;
            truth.get(idx).map(|&t| (*b, t))
        })
        .collect();
    pearson(&pairs)
}

pub fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    if pairs.len() < 3 {
        return None;
    }
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn summarize(replicates: &[ReplicateResult], include_deep: bool) -> Vec<SummaryRow> {
    Method::ALL
        .iter()
        .filter(|&&m| include_deep || m != Method::DeepPamm)
        .map(|&method| {
            let values: Vec<[f64; 3]> = replicates.iter().filter_map(|r| r.ibs(method)).collect();
            let n = values.len();
            let mut mean = [f64::NAN; 3];
            let mut sd = [f64::NAN; 3];
            for q in 0..3 {
                if n == 0 {
                    continue;
                }
                let m = values.iter().map(|v| v[q]).sum::<f64>() / n as f64;
                mean[q] = m;
                sd[q] = if n > 1 {
                    (values.iter().map(|v| (v[q] - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
            }
            SummaryRow {
                method,
                mean,
                sd,
                n_ok: n,
            }
        })
        .collect()
}

const QUARTILES: [&str; 3] = ["Q25", "Q50", "Q75"];

impl BenchmarkResult {
    pub fn n_failed(&self) -> usize {
        self.replicates.iter().filter(|r| r.failed()).count()
    }

    pub fn failure_rate(&self) -> f64 {
        self.n_failed() as f64 / self.replicates.len().max(1) as f64
    }

    pub fn row(&self, method: Method) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method)
    }

    /// Long format with full precision: `method,quartile,mean,sd,n_ok`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("method,quartile,mean,sd,n_ok\n");
        for row in &self.summary {
            for q in 0..3 {
                let _ = writeln!(
                    s,
                    "{},{},{:e},{:e},{}",
                    row.method.label(),
                    QUARTILES[q],
                    row.mean[q],
                    row.sd[q],
                    row.n_ok
                );
            }
        }
        s
    }

    /// Wide table on the ×100 scale: `mean (sd)` with one decimal.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("method,Q25,Q50,Q75\n");
        for row in &self.summary {
            let cells: Vec<String> = (0..3)
                .map(|q| format!("{:.1} ({:.1})", 100.0 * row.mean[q], 100.0 * row.sd[q]))
                .collect();
            let _ = writeln!(s, "{},{}", row.method.label(), cells.join(","));
        }
        s
    }

    /// One row per replicate and method.
    pub fn replicates_csv(&self) -> String {
        let mut s = String::from("replicate,seed,method,ibs_q25,ibs_q50,ibs_q75,re_correlation,error\n");
        for r in &self.replicates {
            let re = r.re_correlation.map(|c| format!("{c:e}")).unwrap_or_default();
            for o in &r.outcomes {
                let (vals, err) = match &o.result {
                    Ok(e) => (
                        e.ibs().map(|v| format!("{v:e}")).join(","),
                        String::new(),
                    ),
                    Err(msg) => (",,".to_string(), msg.replace([',', '\n'], " ")),
                };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    r.replicate,
                    r.seed,
                    o.method.label(),
                    vals,
                    re,
                    err
                );
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("table.csv"), self.table_csv())?;
        std::fs::write(dir.join("replicates.csv"), self.replicates_csv())?;
        Ok(())
    }
}
