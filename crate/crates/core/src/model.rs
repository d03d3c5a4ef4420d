//! Additive log-hazard predictor.
//!
//! The log-hazard of row `(i, j)` and cause `k` is
//! `B_ij · w_k + Σ_u ζ_{ij,u} γ_{k,u}`: a structured part built from
//! intercept, linear, spline, tensor and random-effect columns, plus an
//! optional feed-forward head whose latents `ζ` feed a cause-specific linear
//! map `γ_k`. Without a deep head the model is a plain PAMM.
//!
//! In proportional-hazards mode the latents depend on subject features only
//! and are computed once per subject, then shared by all of its rows. In
//! non-proportional mode the interval time `t_j` is an extra network input and
//! latents are computed per `(subject, interval)`.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deep::{Activation, Mlp, MlpCache};
use crate::error::{Error, Result};
use crate::ped::{expand_competing_risks, CutPoints, CutStrategy, PedFrame};
use crate::spline::{
    check_tensor_margins, tensor_basis_into, tensor_penalty, BasisSpec, PenaltyMatrix, SumToZero,
    DEFAULT_DEGREE, DEFAULT_N_BASIS, DEFAULT_PENALTY_ORDER,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;

fn default_n_basis() -> usize {
    DEFAULT_N_BASIS
}
fn default_degree() -> usize {
    DEFAULT_DEGREE
}
fn default_penalty_order() -> usize {
    DEFAULT_PENALTY_ORDER
}
fn default_psi() -> f64 {
    1.0
}
fn default_widths() -> Vec<usize> {
    vec![64, 32, 8]
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisOptions {
    #[serde(default = "default_n_basis")]
    pub n_basis: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_penalty_order")]
    pub penalty_order: usize,
    #[serde(default)]
    pub cyclic: bool,
    /// Domain bounds; taken from the training data when absent.
    #[serde(default)]
    pub lo: Option<f64>,
    #[serde(default)]
    pub hi: Option<f64>,
}

impl Default for BasisOptions {
    fn default() -> Self {
        Self {
            n_basis: DEFAULT_N_BASIS,
            degree: DEFAULT_DEGREE,
            penalty_order: DEFAULT_PENALTY_ORDER,
            cyclic: false,
            lo: None,
            hi: None,
        }
    }
}

impl BasisOptions {
    pub fn cyclic(lo: f64, hi: f64) -> Self {
        Self {
            cyclic: true,
            lo: Some(lo),
            hi: Some(hi),
            ..Self::default()
        }
    }

    pub fn with_n_basis(mut self, n_basis: usize) -> Self {
        self.n_basis = n_basis;
        self
    }

    fn build(&self, data_lo: f64, data_hi: f64) -> Result<BasisSpec> {
        let lo = self.lo.unwrap_or(data_lo);
        let hi = self.hi.unwrap_or(data_hi);
        let spec = if self.cyclic {
            BasisSpec::cyclic(self.n_basis, self.degree, lo, hi)?
        } else {
            BasisSpec::bspline(self.n_basis, self.degree, lo, hi)?
        };
        spec.with_penalty_order(self.penalty_order)
    }
}

/// User-facing description of one structured term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TermSpec {
    Intercept,
    /// One unpenalised coefficient per interval (classic PEM baseline).
    IntervalFactor,
    Linear {
        feature: String,
    },
    Smooth {
        feature: String,
        #[serde(default)]
        basis: BasisOptions,
        #[serde(default = "default_psi")]
        psi: f64,
    },
    /// Smooth log-baseline `f_0(t_j)`.
    SmoothTime {
        #[serde(default)]
        basis: BasisOptions,
        #[serde(default = "default_psi")]
        psi: f64,
    },
    Tensor {
        features: [String; 2],
        #[serde(default)]
        basis: [BasisOptions; 2],
        #[serde(default = "default_psi")]
        psi: f64,
    },
    /// Ridge-penalised cluster intercepts.
    RandomEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepSpec {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Feature columns fed to the network; all features when absent.
    #[serde(default)]
    pub inputs: Option<Vec<String>>,
    /// Feed `t_j` to the network as well.
    #[serde(default)]
    pub non_proportional: bool,
    /// One trunk with `K` output maps, or one trunk per cause.
    #[serde(default = "default_true")]
    pub shared_trunk: bool,
}

impl Default for DeepSpec {
    fn default() -> Self {
        Self {
            widths: default_widths(),
            activation: Activation::Relu,
            inputs: None,
            non_proportional: false,
            shared_trunk: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutSpec {
    pub strategy: CutStrategy,
    #[serde(default = "default_max_intervals")]
    pub max_intervals: usize,
}

fn default_max_intervals() -> usize {
    100
}

impl Default for CutSpec {
    fn default() -> Self {
        Self {
            strategy: CutStrategy::Quantiles(20),
            max_intervals: default_max_intervals(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Number of competing causes; inferred from the data when absent.
    #[serde(default)]
    pub n_causes: Option<usize>,
    pub terms: Vec<TermSpec>,
    #[serde(default)]
    pub deep: Option<DeepSpec>,
    #[serde(default)]
    pub cuts: CutSpec,
}

impl ModelSpec {
    pub fn new(terms: Vec<TermSpec>) -> Self {
        Self {
            n_causes: None,
            terms,
            deep: None,
            cuts: CutSpec::default(),
        }
    }

    pub fn with_deep(mut self, deep: DeepSpec) -> Self {
        self.deep = Some(deep);
        self
    }

    pub fn with_causes(mut self, n_causes: usize) -> Self {
        self.n_causes = Some(n_causes);
        self
    }

    /// The same specification without a deep head.
    pub fn pamm_only(&self) -> Self {
        Self {
            deep: None,
            ..self.clone()
        }
    }
}

/// A fitted structured term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    Intercept,
    IntervalFactor {
        n_intervals: usize,
    },
    Linear {
        feature: String,
    },
    Smooth {
        feature: String,
        basis: BasisSpec,
    },
    SmoothTime {
        basis: BasisSpec,
    },
    Tensor {
        features: [String; 2],
        bases: [BasisSpec; 2],
    },
    RandomEffect {
        levels: Vec<String>,
    },
}

impl Term {
    fn raw_dim(&self) -> usize {
        match self {
            Term::Intercept | Term::Linear { .. } => 1,
            Term::IntervalFactor { n_intervals } => *n_intervals,
            Term::Smooth { basis, .. } | Term::SmoothTime { basis } => basis.dim(),
            Term::Tensor { bases, .. } => bases[0].dim() * bases[1].dim(),
            Term::RandomEffect { levels } => levels.len(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Term::Intercept => "intercept".into(),
            Term::IntervalFactor { .. } => "interval".into(),
            Term::Linear { feature } => feature.clone(),
            Term::Smooth { feature, .. } => format!("s({feature})"),
            Term::SmoothTime { .. } => "s(t)".into(),
            Term::Tensor { features, .. } => format!("te({},{})", features[0], features[1]),
            Term::RandomEffect { .. } => "re(cluster)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredTerm {
    pub term: Term,
    /// Per-term smoothing strength, multiplied by the shared scale.
    pub psi: f64,
    pub constraint: Option<SumToZero>,
}

impl StructuredTerm {
    pub fn n_columns(&self) -> usize {
        match &self.constraint {
            Some(c) => c.reduced_dim(),
            None => self.term.raw_dim(),
        }
    }

    /// Penalty matrix in coefficient space, if the term is penalised.
    pub fn penalty(&self) -> Result<Option<PenaltyMatrix>> {
        let raw = match &self.term {
            Term::Smooth { basis, .. } | Term::SmoothTime { basis } => basis.penalty()?,
            Term::Tensor { bases, .. } => tensor_penalty(&bases[0].penalty()?, &bases[1].penalty()?),
            Term::RandomEffect { levels } => return Ok(Some(PenaltyMatrix::identity(levels.len()))),
            _ => return Ok(None),
        };
        Ok(Some(match &self.constraint {
            Some(c) => c.reduce_penalty(&raw),
            None => raw,
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyStrengths {
    pub psi_scale: f64,
    pub lambda_re: f64,
    pub weight_decay: f64,
}

impl Default for PenaltyStrengths {
    fn default() -> Self {
        Self {
            psi_scale: 1.0,
            lambda_re: 1.0,
            weight_decay: 1e-4,
        }
    }
}

/// A penalised coefficient block `[start, start + len)` of every cause.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub term: usize,
    pub start: usize,
    pub matrix: PenaltyMatrix,
    pub strength: f64,
}

impl PenaltyBlock {
    pub fn len(&self) -> usize {
        self.matrix.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepHead {
    pub inputs: Vec<String>,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub non_proportional: bool,
    pub time_scale: f64,
    pub trunks: Vec<Mlp>,
    /// `γ_k`, one row of length `U` per cause.
    pub gamma: Vec<Vec<f64>>,
}

impl DeepHead {
    pub fn n_inputs(&self) -> usize {
        self.inputs.len() + usize::from(self.non_proportional)
    }

    pub fn latent_dim(&self) -> usize {
        self.trunks[0].n_outputs()
    }

    pub fn trunk_of(&self, cause: usize) -> usize {
        if self.trunks.len() == 1 {
            0
        } else {
            cause
        }
    }

    pub fn n_params(&self) -> usize {
        self.trunks.iter().map(Mlp::n_params).sum::<usize>()
            + self.gamma.iter().map(Vec::len).sum::<usize>()
    }

    /// Standardised network input for a subject (plus scaled `t_j` in
    /// non-proportional mode).
    fn prepare(&self, features: &[f64], index: &[usize], tj: f64, out: &mut Vec<f64>) {
        for (c, &i) in index.iter().enumerate() {
            out.push((features[i] - self.input_shift[c]) / self.input_scale[c]);
        }
        if self.non_proportional {
            out.push(tj / self.time_scale);
        }
    }

    /// Latent representations, one `n × U` matrix per trunk.
    pub fn forward_latent(&self, inputs: &[f64], n: usize) -> Result<Vec<MlpCache>> {
        if inputs.len() != n * self.n_inputs() {
            return Err(Error::SchemaMismatch(format!(
                "deep head expects {} inputs per row",
                self.n_inputs()
            )));
        }
        Ok(self.trunks.iter().map(|t| t.forward(inputs, n)).collect())
    }
}

/// Design for one PED frame: structured columns, offsets, responses and the
/// row-to-latent mapping used by the deep head.
#[derive(Debug, Clone)]
pub struct Design {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major `n_rows × n_cols`.
    pub x: Vec<f64>,
    pub offset: Vec<f64>,
    pub exposure: Vec<f64>,
    pub status: Vec<f64>,
    /// 0-based cause of every row.
    pub cause: Vec<usize>,
    pub subject: Vec<usize>,
    pub latent_of_row: Vec<usize>,
    pub n_latent: usize,
    /// Row-major `n_latent × n_inputs` deep inputs (empty without a head).
    pub latent_input: Vec<f64>,
    pub clamped: usize,
    pub unseen_clusters: usize,
}

impl Design {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.x[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn latent_input_row(&self, l: usize) -> &[f64] {
        let d = self.latent_input.len() / self.n_latent.max(1);
        &self.latent_input[l * d..(l + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardModel {
    pub format_version: u32,
    pub cuts: CutPoints,
    pub n_causes: usize,
    pub feature_names: Vec<String>,
    pub terms: Vec<StructuredTerm>,
    /// `w_k`, one row per cause.
    pub weights: Vec<Vec<f64>>,
    pub deep: Option<DeepHead>,
    pub penalties: PenaltyStrengths,
}

fn feature_range(ped: &PedFrame, idx: usize) -> (f64, f64) {
    ped.subjects.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s.features[idx]), hi.max(s.features[idx]))
    })
}

impl HazardModel {
    /// Builds an untrained model for the given frame: basis domains, random
    /// effect levels and identifiability constraints come from `ped`; hidden
    /// layers are randomly initialised from `seed` and `γ` starts at zero.
    pub fn initialize(spec: &ModelSpec, ped: &PedFrame, seed: u64) -> Result<Self> {
        let n_causes = spec.n_causes.unwrap_or(ped.n_causes).max(1);
        if ped.subjects.is_empty() {
            return Err(Error::InvalidSpec("cannot initialise a model on an empty frame".into()));
        }
        if spec.terms.is_empty() && spec.deep.is_none() {
            return Err(Error::InvalidSpec("model has no terms".into()));
        }
        let mut terms = Vec::with_capacity(spec.terms.len());
        for t in &spec.terms {
            let (term, psi) = match t {
                TermSpec::Intercept => (Term::Intercept, 0.0),
                TermSpec::IntervalFactor => (
                    Term::IntervalFactor {
                        n_intervals: ped.cuts.n_intervals(),
                    },
                    0.0,
                ),
                TermSpec::Linear { feature } => {
                    ped.feature_index(feature)?;
                    (
                        Term::Linear {
                            feature: feature.clone(),
                        },
                        0.0,
                    )
                }
                TermSpec::Smooth {
                    feature,
                    basis,
                    psi,
                } => {
                    let (lo, hi) = feature_range(ped, ped.feature_index(feature)?);
                    let basis = basis.build(lo, hi)?;
                    (
                        Term::Smooth {
                            feature: feature.clone(),
                            basis,
                        },
                        *psi,
                    )
                }
                TermSpec::SmoothTime { basis, psi } => (
                    Term::SmoothTime {
                        basis: basis.build(0.0, ped.cuts.horizon())?,
                    },
                    *psi,
                ),
                TermSpec::Tensor {
                    features,
                    basis,
                    psi,
                } => {
                    let mut bases = Vec::with_capacity(2);
                    for (f, b) in features.iter().zip(basis) {
                        let (lo, hi) = feature_range(ped, ped.feature_index(f)?);
                        bases.push(b.build(lo, hi)?);
                    }
                    let bases: [BasisSpec; 2] = bases.try_into().expect("two margins");
                    check_tensor_margins(&bases[0], &bases[1])?;
                    (
                        Term::Tensor {
                            features: features.clone(),
                            bases,
                        },
                        *psi,
                    )
                }
                TermSpec::RandomEffect => {
                    let levels: BTreeSet<&String> =
                        ped.subjects.iter().filter_map(|s| s.cluster.as_ref()).collect();
                    if levels.is_empty() {
                        return Err(Error::InvalidSpec(
                            "random effect requested but no cluster ids present".into(),
                        ));
                    }
                    (
                        Term::RandomEffect {
                            levels: levels.into_iter().cloned().collect(),
                        },
                        0.0,
                    )
                }
            };
            if !(psi >= 0.0 && psi.is_finite()) {
                return Err(Error::InvalidSpec(format!("psi must be non-negative, got {psi}")));
            }
            terms.push(StructuredTerm {
                term,
                psi,
                constraint: None,
            });
        }
        if terms
            .iter()
            .filter(|t| matches!(t.term, Term::RandomEffect { .. }))
            .count()
            > 1
        {
            return Err(Error::InvalidSpec("at most one random-effect term".into()));
        }

        let mut model = Self {
            format_version: MODEL_FORMAT_VERSION,
            cuts: ped.cuts.clone(),
            n_causes,
            feature_names: ped.feature_names.clone(),
            terms,
            weights: Vec::new(),
            deep: None,
            penalties: PenaltyStrengths::default(),
        };

        let has_baseline = model
            .terms
            .iter()
            .any(|t| matches!(t.term, Term::Intercept | Term::IntervalFactor { .. }));
        if has_baseline {
            model.absorb_constraints(ped)?;
        }

        let n_cols = model.n_columns();
        let (events, exposure) = ped.rows.iter().fold((0.0, 0.0), |(d, e), r| {
            (d + f64::from(r.status), e + r.exposure)
        });
        let exposure = if ped.is_expanded() {
            exposure / n_causes as f64
        } else {
            exposure
        };
        let base = ((events.max(0.5) / n_causes as f64) / exposure).ln();
        let mut w = vec![0.0; n_cols];
        let mut col = 0;
        for t in &model.terms {
            match t.term {
                Term::Intercept => w[col] = base,
                Term::IntervalFactor { n_intervals } => {
                    w[col..col + n_intervals].fill(base);
                }
                _ => {}
            }
            col += t.n_columns();
        }
        if !model.terms.iter().any(|t| {
            matches!(t.term, Term::Intercept | Term::IntervalFactor { .. })
        }) {
            // nothing carries the baseline
        }
        model.weights = vec![w; n_causes];

        if let Some(ds) = &spec.deep {
            model.deep = Some(Self::init_deep(ds, ped, n_causes, seed)?);
        }
        Ok(model)
    }

    fn init_deep(spec: &DeepSpec, ped: &PedFrame, n_causes: usize, seed: u64) -> Result<DeepHead> {
        if spec.widths.is_empty() || spec.widths.contains(&0) {
            return Err(Error::InvalidSpec("deep widths must be non-empty and positive".into()));
        }
        let inputs = spec
            .inputs
            .clone()
            .unwrap_or_else(|| ped.feature_names.clone());
        if inputs.is_empty() && !spec.non_proportional {
            return Err(Error::InvalidSpec("deep head has no inputs".into()));
        }
        let mut shift = Vec::with_capacity(inputs.len());
        let mut scale = Vec::with_capacity(inputs.len());
        let n = ped.subjects.len() as f64;
        for name in &inputs {
            let idx = ped.feature_index(name)?;
            let mean = ped.subjects.iter().map(|s| s.features[idx]).sum::<f64>() / n;
            let var = ped
                .subjects
                .iter()
                .map(|s| (s.features[idx] - mean).powi(2))
                .sum::<f64>()
                / n;
            shift.push(mean);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        let n_in = inputs.len() + usize::from(spec.non_proportional);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_trunks = if spec.shared_trunk { 1 } else { n_causes };
        let trunks = (0..n_trunks)
            .map(|_| Mlp::new(n_in, &spec.widths, spec.activation, &mut rng))
            .collect();
        let u = *spec.widths.last().unwrap();
        Ok(DeepHead {
            inputs,
            input_shift: shift,
            input_scale: scale,
            non_proportional: spec.non_proportional,
            time_scale: ped.cuts.horizon(),
            trunks,
            gamma: vec![vec![0.0; u]; n_causes],
        })
    }

    fn absorb_constraints(&mut self, ped: &PedFrame) -> Result<()> {
        let feature_idx = self.feature_indices(ped)?;
        for (ti, term) in self.terms.iter_mut().enumerate() {
            if !matches!(
                term.term,
                Term::Smooth { .. } | Term::SmoothTime { .. } | Term::Tensor { .. }
            ) {
                continue;
            }
            let dim = term.term.raw_dim();
            let mut sums = vec![0.0; dim];
            let mut buf = vec![0.0; dim];
            let mut last: Option<(usize, usize)> = None;
            for row in &ped.rows {
                if last == Some((row.subject, row.interval)) {
                    continue;
                }
                last = Some((row.subject, row.interval));
                let s = &ped.subjects[row.subject];
                fill_raw(&term.term, &feature_idx[ti], &s.features, row.tj, &mut buf);
                for (a, b) in sums.iter_mut().zip(&buf) {
                    *a += b;
                }
            }
            term.constraint = Some(SumToZero::new(&sums)?);
        }
        Ok(())
    }

    fn feature_indices(&self, ped: &PedFrame) -> Result<Vec<Vec<usize>>> {
        self.terms
            .iter()
            .map(|t| match &t.term {
                Term::Linear { feature } | Term::Smooth { feature, .. } => {
                    Ok(vec![ped.feature_index(feature)?])
                }
                Term::Tensor { features, .. } => Ok(vec![
                    ped.feature_index(&features[0])?,
                    ped.feature_index(&features[1])?,
                ]),
                _ => Ok(Vec::new()),
            })
            .collect()
    }

    pub fn n_columns(&self) -> usize {
        self.terms.iter().map(StructuredTerm::n_columns).sum()
    }

    /// Column offset of every term.
    pub fn term_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.terms
            .iter()
            .map(|t| {
                let o = off;
                off += t.n_columns();
                o
            })
            .collect()
    }

    pub fn has_deep(&self) -> bool {
        self.deep.is_some()
    }

    /// Penalised coefficient blocks with strengths taken from `strengths`.
    pub fn penalty_blocks(&self, strengths: &PenaltyStrengths) -> Result<Vec<PenaltyBlock>> {
        let offsets = self.term_offsets();
        let mut blocks = Vec::new();
        for (i, t) in self.terms.iter().enumerate() {
            if let Some(matrix) = t.penalty()? {
                let strength = match t.term {
                    Term::RandomEffect { .. } => strengths.lambda_re,
                    _ => strengths.psi_scale * t.psi,
                };
                blocks.push(PenaltyBlock {
                    term: i,
                    start: offsets[i],
                    matrix,
                    strength,
                });
            }
        }
        Ok(blocks)
    }

    /// Structured design rows, offsets and deep inputs for a PED frame.
    /// Single-risk frames are expanded automatically for multi-cause models.
    pub fn build_design(&self, ped: &PedFrame) -> Result<Design> {
        if ped.feature_names != self.feature_names {
            return Err(Error::SchemaMismatch(format!(
                "model features {:?} but data has {:?}",
                self.feature_names, ped.feature_names
            )));
        }
        let expanded;
        let ped = if self.n_causes >= 2 && !ped.is_expanded() {
            expanded = expand_competing_risks(ped, self.n_causes)?;
            &expanded
        } else {
            if self.n_causes == 1 && ped.is_expanded() {
                return Err(Error::SchemaMismatch(
                    "single-risk model cannot use an expanded frame".into(),
                ));
            }
            ped
        };
        if ped.cuts != self.cuts {
            return Err(Error::SchemaMismatch("frame uses different cut points".into()));
        }
        for (i, s) in ped.subjects.iter().enumerate() {
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidRecord {
                    index: i,
                    reason: "non-finite feature".into(),
                });
            }
        }

        let feature_idx = self.feature_indices(ped)?;
        let n_rows = ped.rows.len();
        let n_cols = self.n_columns();
        let mut x = vec![0.0; n_rows * n_cols];
        let mut clamped = 0;
        let mut unseen_clusters = 0;
        let re_lookup: Vec<Option<HashMap<&str, usize>>> = self
            .terms
            .iter()
            .map(|t| match &t.term {
                Term::RandomEffect { levels } => Some(
                    levels
                        .iter()
                        .enumerate()
                        .map(|(i, l)| (l.as_str(), i))
                        .collect(),
                ),
                _ => None,
            })
            .collect();

        let mut raw = Vec::new();
        let mut prev: Option<(usize, usize)> = None;
        for (r, row) in ped.rows.iter().enumerate() {
            let key = (row.subject, row.interval);
            if prev == Some(key) {
                let (head, tail) = x.split_at_mut(r * n_cols);
                tail[..n_cols].copy_from_slice(&head[(r - 1) * n_cols..]);
                continue;
            }
            prev = Some(key);
            let s = &ped.subjects[row.subject];
            let out = &mut x[r * n_cols..(r + 1) * n_cols];
            let mut col = 0;
            for (ti, term) in self.terms.iter().enumerate() {
                let width = term.n_columns();
                let dst = &mut out[col..col + width];
                match &term.term {
                    Term::Intercept => dst[0] = 1.0,
                    Term::IntervalFactor { .. } => dst[row.interval - 1] = 1.0,
                    Term::Linear { .. } => dst[0] = s.features[feature_idx[ti][0]],
                    Term::RandomEffect { .. } => {
                        let lookup = re_lookup[ti].as_ref().unwrap();
                        match s.cluster.as_deref().and_then(|c| lookup.get(c)) {
                            Some(&level) => dst[level] = 1.0,
                            None => unseen_clusters += 1,
                        }
                    }
                    _ => {
                        raw.resize(term.term.raw_dim(), 0.0);
                        clamped += fill_raw(&term.term, &feature_idx[ti], &s.features, row.tj, &mut raw);
                        match &term.constraint {
                            Some(c) => dst.copy_from_slice(&c.reduce(&raw)),
                            None => dst.copy_from_slice(&raw),
                        }
                    }
                }
                col += width;
            }
        }

        let mut cause = Vec::with_capacity(n_rows);
        for row in &ped.rows {
            let k = ped.row_cause(row);
            if k == 0 || k > self.n_causes {
                return Err(Error::CauseOutOfRange {
                    cause: k,
                    n_causes: self.n_causes,
                });
            }
            cause.push(k - 1);
        }

        let (latent_of_row, n_latent, latent_input) = match &self.deep {
            None => (vec![0; n_rows], 0, Vec::new()),
            Some(deep) => {
                let idx: Vec<usize> = deep
                    .inputs
                    .iter()
                    .map(|n| ped.feature_index(n))
                    .collect::<Result<_>>()?;
                let mut inputs = Vec::new();
                if deep.non_proportional {
                    let mut map: HashMap<(usize, usize), usize> = HashMap::new();
                    let mut of_row = Vec::with_capacity(n_rows);
                    for row in &ped.rows {
                        let next = map.len();
                        let l = *map.entry((row.subject, row.interval)).or_insert_with(|| {
                            let s = &ped.subjects[row.subject];
                            deep.prepare(&s.features, &idx, row.tj, &mut inputs);
                            next
                        });
                        of_row.push(l);
                    }
                    (of_row, map.len(), inputs)
                } else {
                    for s in &ped.subjects {
                        deep.prepare(&s.features, &idx, 0.0, &mut inputs);
                    }
                    (
                        ped.rows.iter().map(|r| r.subject).collect(),
                        ped.subjects.len(),
                        inputs,
                    )
                }
            }
        };

        if clamped > 0 {
            log::warn!("{clamped} basis evaluations clamped to the basis domain");
        }
        if unseen_clusters > 0 {
            log::warn!("{unseen_clusters} rows belong to clusters unseen in training");
        }

        Ok(Design {
            n_rows,
            n_cols,
            x,
            offset: ped.rows.iter().map(|r| r.offset).collect(),
            exposure: ped.rows.iter().map(|r| r.exposure).collect(),
            status: ped.rows.iter().map(|r| f64::from(r.status)).collect(),
            cause,
            subject: ped.rows.iter().map(|r| r.subject).collect(),
            latent_of_row,
            n_latent,
            latent_input,
            clamped,
            unseen_clusters,
        })
    }

    fn check_cause(&self, cause: usize) -> Result<()> {
        if cause == 0 || cause > self.n_causes {
            return Err(Error::CauseOutOfRange {
                cause,
                n_causes: self.n_causes,
            });
        }
        Ok(())
    }

    /// Deep forward pass over the design's latent inputs (one cache per trunk).
    pub fn deep_forward(&self, design: &Design) -> Result<Option<Vec<MlpCache>>> {
        match &self.deep {
            None => Ok(None),
            Some(d) => d.forward_latent(&design.latent_input, design.n_latent).map(Some),
        }
    }

    /// `B_ij · w_k` per row.
    pub fn structured_part(&self, design: &Design) -> Vec<f64> {
        (0..design.n_rows)
            .map(|r| dot(design.row(r), &self.weights[design.cause[r]]))
            .collect()
    }

    /// `Σ_u ζ_{ij,u} γ_{k,u}` per row (zeros without a deep head).
    pub fn deep_part(&self, design: &Design) -> Result<Vec<f64>> {
        let Some(caches) = self.deep_forward(design)? else {
            return Ok(vec![0.0; design.n_rows]);
        };
        Ok(self.deep_part_from(design, &caches))
    }

    pub(crate) fn deep_part_from(&self, design: &Design, caches: &[MlpCache]) -> Vec<f64> {
        let deep = self.deep.as_ref().expect("deep head present");
        let u = deep.latent_dim();
        (0..design.n_rows)
            .map(|r| {
                let k = design.cause[r];
                let z = caches[deep.trunk_of(k)].output();
                let l = design.latent_of_row[r];
                dot(&z[l * u..(l + 1) * u], &deep.gamma[k])
            })
            .collect()
    }

    /// Log-hazard per design row: structured part plus deep part.
    pub fn log_hazards(&self, design: &Design) -> Result<Vec<f64>> {
        let s = self.structured_part(design);
        let d = self.deep_part(design)?;
        Ok(s.iter().zip(&d).map(|(a, b)| a + b).collect())
    }

    /// Latents broadcast to PED rows for the trunk serving `cause`.
    pub fn row_latents(&self, design: &Design, cause: usize) -> Result<Vec<Vec<f64>>> {
        self.check_cause(cause)?;
        let deep = self
            .deep
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("model has no deep head".into()))?;
        let caches = deep.forward_latent(&design.latent_input, design.n_latent)?;
        let z = caches[deep.trunk_of(cause - 1)].output();
        let u = deep.latent_dim();
        Ok(design
            .latent_of_row
            .iter()
            .map(|&l| z[l * u..(l + 1) * u].to_vec())
            .collect())
    }

    /// Log-hazard of a single design row for cause `k` (1-based).
    pub fn log_hazard(
        &self,
        design_row: &[f64],
        deep_input: Option<&[f64]>,
        cause: usize,
    ) -> Result<f64> {
        self.check_cause(cause)?;
        if design_row.len() != self.n_columns() {
            return Err(Error::SchemaMismatch(format!(
                "design row has {} columns, model expects {}",
                design_row.len(),
                self.n_columns()
            )));
        }
        let structured = dot(design_row, &self.weights[cause - 1]);
        let deep = match (&self.deep, deep_input) {
            (None, _) => 0.0,
            (Some(d), Some(input)) => {
                let caches = d.forward_latent(input, 1)?;
                dot(caches[d.trunk_of(cause - 1)].output(), &d.gamma[cause - 1])
            }
            (Some(_), None) => {
                return Err(Error::SchemaMismatch("deep input required".into()));
            }
        };
        Ok(structured + deep)
    }

    pub fn n_structured_params(&self) -> usize {
        self.n_causes * self.n_columns()
    }

    pub fn n_params(&self) -> usize {
        self.n_structured_params() + self.deep.as_ref().map_or(0, DeepHead::n_params)
    }

    /// Flat parameter vector: `w_1..w_K`, then every trunk's layers, then
    /// `γ_1..γ_K`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for w in &self.weights {
            p.extend_from_slice(w);
        }
        if let Some(d) = &self.deep {
            for t in &d.trunks {
                t.write_params(&mut p);
            }
            for g in &d.gamma {
                p.extend_from_slice(g);
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter length mismatch");
        let q = self.n_columns();
        for (k, w) in self.weights.iter_mut().enumerate() {
            w.copy_from_slice(&p[k * q..(k + 1) * q]);
        }
        let mut off = self.n_structured_params();
        if let Some(d) = &mut self.deep {
            for t in &mut d.trunks {
                off += t.read_params(&p[off..]);
            }
            for g in &mut d.gamma {
                let u = g.len();
                g.copy_from_slice(&p[off..off + u]);
                off += u;
            }
        }
    }

    /// Positions of deep weights subject to weight decay (biases excluded).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_structured_params()];
        if let Some(d) = &self.deep {
            for t in &d.trunks {
                t.weight_mask(&mut mask);
            }
            for g in &d.gamma {
                mask.extend(std::iter::repeat_n(true, g.len()));
            }
        }
        mask
    }

    /// Coefficients of a term for a cause, mapped back to the raw basis
    /// (undoing the identifiability reparameterisation).
    pub fn term_coefficients(&self, term: usize, cause: usize) -> Result<Vec<f64>> {
        self.check_cause(cause)?;
        let t = self
            .terms
            .get(term)
            .ok_or_else(|| Error::InvalidSpec(format!("no term {term}")))?;
        let off = self.term_offsets()[term];
        let w = &self.weights[cause - 1][off..off + t.n_columns()];
        Ok(match &t.constraint {
            Some(c) => c.expand(w),
            None => w.to_vec(),
        })
    }

    /// Random-effect estimates keyed by cluster level.
    pub fn random_effects(&self, cause: usize) -> Result<Vec<(String, f64)>> {
        for (i, t) in self.terms.iter().enumerate() {
            if let Term::RandomEffect { levels } = &t.term {
                let coef = self.term_coefficients(i, cause)?;
                return Ok(levels.iter().cloned().zip(coef).collect());
            }
        }
        Err(Error::InvalidSpec("model has no random-effect term".into()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidSpec(format!(
                "unsupported model format {}",
                self.format_version
            )));
        }
        for t in &self.terms {
            match &t.term {
                Term::Smooth { basis, .. } | Term::SmoothTime { basis } => basis.validate()?,
                Term::Tensor { bases, .. } => check_tensor_margins(&bases[0], &bases[1])?,
                _ => {}
            }
        }
        let q = self.n_columns();
        if self.weights.len() != self.n_causes || self.weights.iter().any(|w| w.len() != q) {
            return Err(Error::InvalidSpec("weight blocks do not match terms".into()));
        }
        if let Some(d) = &self.deep {
            if d.gamma.len() != self.n_causes
                || d.gamma.iter().any(|g| g.len() != d.latent_dim())
                || !(d.trunks.len() == 1 || d.trunks.len() == self.n_causes)
            {
                return Err(Error::InvalidSpec("deep head shape mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Raw (unconstrained) basis evaluation of a spline term; returns clamp count.
fn fill_raw(term: &Term, idx: &[usize], features: &[f64], tj: f64, out: &mut [f64]) -> usize {
    match term {
        Term::Smooth { basis, .. } => usize::from(basis.evaluate_into(features[idx[0]], out)),
        Term::SmoothTime { basis } => usize::from(basis.evaluate_into(tj, out)),
        Term::Tensor { bases, .. } => {
            tensor_basis_into(&bases[0], &bases[1], features[idx[0]], features[idx[1]], out)
        }
        _ => unreachable!("fill_raw called on a non-spline term"),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
