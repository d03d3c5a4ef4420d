//! Penalised Poisson fitting.
//!
//! The structured coefficients are updated by penalised Newton steps (the
//! Poisson log-link Hessian is block diagonal across causes), the deep head
//! by Adam on the same objective. Fitting starts with a full Newton solve of
//! the structured part with `γ = 0`, i.e. a plain PAMM fit, so the deep part
//! only has to explain what the structured terms leave over.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, Design, HazardModel, ModelSpec, PenaltyBlock, PenaltyStrengths};
use crate::ped::PedFrame;

fn default_lr() -> f64 {
    1e-2
}
fn default_max_epochs() -> usize {
    500
}
fn default_patience() -> usize {
    25
}
fn default_validation_fraction() -> f64 {
    0.2
}
fn default_one() -> f64 {
    1.0
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_newton_iter() -> usize {
    100
}
fn default_newton_tol() -> f64 {
    1e-12
}
fn default_refresh() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperGrid {
    #[serde(default)]
    pub psi_scale: Vec<f64>,
    #[serde(default)]
    pub lambda_re: Vec<f64>,
    #[serde(default)]
    pub learning_rate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Rows per mini-batch; full batch up to 65536 rows, else 4096.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Shared scale multiplying each smooth term's own strength.
    #[serde(default = "default_one")]
    pub psi_scale: f64,
    #[serde(default = "default_one")]
    pub lambda_re: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub grid: Option<HyperGrid>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_newton_iter")]
    pub newton_max_iter: usize,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    /// Epochs between Hessian refreshes of the structured block.
    #[serde(default = "default_refresh")]
    pub hessian_refresh: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        for (name, v) in [
            ("psi_scale", self.psi_scale),
            ("lambda_re", self.lambda_re),
            ("weight_decay", self.weight_decay),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive".into());
        }
        if let Some(g) = &self.grid {
            for v in g.psi_scale.iter().chain(&g.lambda_re).chain(&g.learning_rate) {
                if !(*v >= 0.0 && v.is_finite()) {
                    return bad(format!("grid values must be finite and non-negative, got {v}"));
                }
            }
        }
        Ok(())
    }

    pub fn strengths(&self) -> PenaltyStrengths {
        PenaltyStrengths {
            psi_scale: self.psi_scale,
            lambda_re: self.lambda_re,
            weight_decay: self.weight_decay,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub psi_scale: f64,
    pub lambda_re: f64,
    pub learning_rate: f64,
    /// Validation Poisson NLL, `None` when the fit failed.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub newton_iterations: usize,
    pub converged: bool,
    pub psi_scale: f64,
    pub lambda_re: f64,
    pub learning_rate: f64,
    pub n_train_subjects: usize,
    pub n_val_subjects: usize,
    pub grid: Vec<GridPoint>,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:e},{:e}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s
    }
}

/// `−Σ (δ log h − h t)` for explicit per-row status, hazard and exposure.
pub fn poisson_nll_terms(status: &[f64], hazard: &[f64], exposure: &[f64]) -> Result<f64> {
    let mut nll = 0.0;
    for (r, ((&d, &h), &t)) in status.iter().zip(hazard).zip(exposure).enumerate() {
        if !h.is_finite() || h < 0.0 {
            return Err(Error::NonFiniteHazard { row: r });
        }
        let log_term = if d > 0.0 { d * h.ln() } else { 0.0 };
        nll -= log_term - h * t;
    }
    if !nll.is_finite() {
        return Err(Error::NonFiniteLogHazard("negative log-likelihood".into()));
    }
    Ok(nll)
}

fn nll_from_log_hazard(design: &Design, log_h: &[f64]) -> Result<f64> {
    let mut nll = 0.0;
    for r in 0..design.n_rows {
        let mu = (log_h[r] + design.offset[r]).exp();
        if !mu.is_finite() || !log_h[r].is_finite() {
            return Err(Error::NonFiniteHazard { row: r });
        }
        nll += mu - design.status[r] * log_h[r];
    }
    Ok(nll)
}

/// Poisson negative log-likelihood of `model` on a PED frame.
pub fn poisson_nll(ped: &PedFrame, model: &HazardModel) -> Result<f64> {
    let design = model.build_design(ped)?;
    nll_from_log_hazard(&design, &model.log_hazards(&design)?)
}

fn structured_penalty(model: &HazardModel, blocks: &[PenaltyBlock]) -> f64 {
    model
        .weights
        .iter()
        .map(|w| {
            blocks
                .iter()
                .filter(|b| b.strength > 0.0)
                .map(|b| b.strength * b.matrix.quad_form(&w[b.start..b.start + b.len()]))
                .sum::<f64>()
        })
        .sum()
}

fn decay_penalty(model: &HazardModel, wd: f64) -> f64 {
    if wd == 0.0 || model.deep.is_none() {
        return 0.0;
    }
    model
        .params()
        .iter()
        .zip(model.decay_mask())
        .filter(|(_, m)| *m)
        .map(|(p, _)| p * p)
        .sum::<f64>()
        * wd
}

fn objective_on(model: &HazardModel, design: &Design, strengths: &PenaltyStrengths) -> Result<f64> {
    let blocks = model.penalty_blocks(strengths)?;
    let nll = nll_from_log_hazard(design, &model.log_hazards(design)?)?;
    Ok(nll + structured_penalty(model, &blocks) + decay_penalty(model, strengths.weight_decay))
}

/// NLL + smoothing penalties + random-effect ridge + deep weight decay,
/// using the strengths in `config`.
pub fn penalized_objective(ped: &PedFrame, model: &HazardModel, config: &TrainConfig) -> Result<f64> {
    let design = model.build_design(ped)?;
    objective_on(model, &design, &config.strengths())
}

/// Exact gradient of [`penalized_objective`] in the layout of
/// [`HazardModel::params`].
pub fn gradient(ped: &PedFrame, model: &HazardModel, config: &TrainConfig) -> Result<Vec<f64>> {
    let design = model.build_design(ped)?;
    gradient_on(model, &design, &config.strengths())
}

fn gradient_on(model: &HazardModel, design: &Design, strengths: &PenaltyStrengths) -> Result<Vec<f64>> {
    let blocks = model.penalty_blocks(strengths)?;
    let spart = model.structured_part(design);
    let dpart = model.deep_part(design)?;
    let q = model.n_columns();
    let mut grad = vec![0.0; model.n_params()];
    for r in 0..design.n_rows {
        let eta = spart[r] + dpart[r];
        let mu = (eta + design.offset[r]).exp();
        if !mu.is_finite() {
            return Err(Error::NonFiniteHazard { row: r });
        }
        let g = mu - design.status[r];
        let k = design.cause[r];
        for (acc, x) in grad[k * q..(k + 1) * q].iter_mut().zip(design.row(r)) {
            *acc += g * x;
        }
    }
    for (k, w) in model.weights.iter().enumerate() {
        add_penalty_gradient(&blocks, w, &mut grad[k * q..(k + 1) * q]);
    }
    if model.deep.is_some() {
        let all = Batch::all(design);
        let (_, dg) = deep_batch_gradient(model, design, &all, &spart, 1.0, strengths.weight_decay)?;
        grad[model.n_structured_params()..].copy_from_slice(&dg);
    }
    Ok(grad)
}

fn add_penalty_gradient(blocks: &[PenaltyBlock], w: &[f64], out: &mut [f64]) {
    for b in blocks.iter().filter(|b| b.strength > 0.0) {
        let pw = b.matrix.apply(&w[b.start..b.start + b.len()]);
        for (o, v) in out[b.start..b.start + b.len()].iter_mut().zip(pw) {
            *o += 2.0 * b.strength * v;
        }
    }
}

/// Rows of a mini-batch together with the latents they use.
struct Batch {
    rows: Vec<usize>,
    latents: Vec<usize>,
    local: Vec<usize>,
}

impl Batch {
    fn all(design: &Design) -> Self {
        Self {
            rows: (0..design.n_rows).collect(),
            latents: (0..design.n_latent).collect(),
            local: design.latent_of_row.clone(),
        }
    }

    fn from_rows(design: &Design, rows: Vec<usize>) -> Self {
        let mut slot = vec![usize::MAX; design.n_latent];
        let mut latents = Vec::new();
        let local = rows
            .iter()
            .map(|&r| {
                let l = design.latent_of_row[r];
                if slot[l] == usize::MAX {
                    slot[l] = latents.len();
                    latents.push(l);
                }
                slot[l]
            })
            .collect();
        Self {
            rows,
            latents,
            local,
        }
    }
}

/// Loss and gradient with respect to the deep parameters on a batch, with
/// the structured part held fixed. The data term is multiplied by `scale`.
fn deep_batch_gradient(
    model: &HazardModel,
    design: &Design,
    batch: &Batch,
    spart: &[f64],
    scale: f64,
    weight_decay: f64,
) -> Result<(f64, Vec<f64>)> {
    let deep = model.deep.as_ref().expect("deep head");
    let d_in = deep.n_inputs();
    let mut inputs = Vec::with_capacity(batch.latents.len() * d_in);
    for &l in &batch.latents {
        inputs.extend_from_slice(design.latent_input_row(l));
    }
    let n = batch.latents.len();
    let caches = deep.forward_latent(&inputs, n)?;
    let u = deep.latent_dim();
    let mut d_z: Vec<Vec<f64>> = caches.iter().map(|_| vec![0.0; n * u]).collect();
    let mut d_gamma: Vec<Vec<f64>> = deep.gamma.iter().map(|g| vec![0.0; g.len()]).collect();
    let mut loss = 0.0;
    for (i, &r) in batch.rows.iter().enumerate() {
        let k = design.cause[r];
        let t = deep.trunk_of(k);
        let l = batch.local[i];
        let z = &caches[t].output()[l * u..(l + 1) * u];
        let eta = spart[r] + dot(z, &deep.gamma[k]);
        let mu = (eta + design.offset[r]).exp();
        if !mu.is_finite() {
            return Err(Error::NonFiniteHazard { row: r });
        }
        loss += mu - design.status[r] * eta;
        let g = scale * (mu - design.status[r]);
        for (dg, zv) in d_gamma[k].iter_mut().zip(z) {
            *dg += g * zv;
        }
        for (dz, gv) in d_z[t][l * u..(l + 1) * u].iter_mut().zip(&deep.gamma[k]) {
            *dz += g * gv;
        }
    }
    loss *= scale;
    let mut grad = Vec::with_capacity(deep.n_params());
    for (t, trunk) in deep.trunks.iter().enumerate() {
        let mut g = vec![0.0; trunk.n_params()];
        trunk.backward(&caches[t], &d_z[t], &mut g);
        grad.extend(g);
    }
    for g in d_gamma {
        grad.extend(g);
    }
    if weight_decay > 0.0 {
        let params = model.params();
        let mask = model.decay_mask();
        let off = model.n_structured_params();
        for (i, g) in grad.iter_mut().enumerate() {
            if mask[off + i] {
                let p = params[off + i];
                *g += 2.0 * weight_decay * p;
                loss += weight_decay * p * p;
            }
        }
    }
    Ok((loss, grad))
}

/// Newton machinery for the structured block of each cause.
struct StructuredSolver {
    blocks: Vec<PenaltyBlock>,
    factors: Vec<Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>>,
}

impl StructuredSolver {
    fn new(model: &HazardModel, strengths: &PenaltyStrengths) -> Result<Self> {
        Ok(Self {
            blocks: model.penalty_blocks(strengths)?,
            factors: vec![None; model.n_causes],
        })
    }

    /// Structured-only penalised objective given a fixed deep contribution.
    fn objective(&self, model: &HazardModel, design: &Design, dpart: &[f64]) -> f64 {
        let mut nll = 0.0;
        for r in 0..design.n_rows {
            let eta = dot(design.row(r), &model.weights[design.cause[r]]) + dpart[r];
            nll += (eta + design.offset[r]).exp() - design.status[r] * eta;
        }
        nll + structured_penalty(model, &self.blocks)
    }

    /// Gradient (and optionally Hessian) per cause.
    fn derivatives(
        &self,
        model: &HazardModel,
        design: &Design,
        dpart: &[f64],
        hessian: bool,
    ) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
        let q = model.n_columns();
        let k_n = model.n_causes;
        let mut grads = vec![DVector::zeros(q); k_n];
        let mut hess = if hessian {
            vec![DMatrix::zeros(q, q); k_n]
        } else {
            Vec::new()
        };
        let mut nz = Vec::with_capacity(q);
        for r in 0..design.n_rows {
            let k = design.cause[r];
            let x = design.row(r);
            let eta = dot(x, &model.weights[k]) + dpart[r];
            let mu = (eta + design.offset[r]).exp();
            let g = mu - design.status[r];
            nz.clear();
            nz.extend((0..q).filter(|&c| x[c] != 0.0));
            let gk = &mut grads[k];
            for &c in &nz {
                gk[c] += g * x[c];
            }
            if hessian {
                let h = &mut hess[k];
                for &a in &nz {
                    let xa = mu * x[a];
                    for &b in &nz {
                        if b >= a {
                            h[(a, b)] += xa * x[b];
                        }
                    }
                }
            }
        }
        for (k, w) in model.weights.iter().enumerate() {
            add_penalty_gradient(&self.blocks, w, grads[k].as_mut_slice());
            if hessian {
                let h = &mut hess[k];
                for b in self.blocks.iter().filter(|b| b.strength > 0.0) {
                    for i in 0..b.len() {
                        for j in i..b.len() {
                            h[(b.start + i, b.start + j)] += 2.0 * b.strength * b.matrix.get(i, j);
                        }
                    }
                }
                h.fill_lower_triangle_with_upper_triangle();
            }
        }
        (grads, hess)
    }

    fn refresh(&mut self, hess: Vec<DMatrix<f64>>) {
        self.factors = hess
            .into_iter()
            .map(|h| {
                let scale = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
                let mut ridge = 0.0;
                for _ in 0..12 {
                    let mut m = h.clone();
                    for i in 0..m.nrows() {
                        m[(i, i)] += ridge;
                    }
                    if let Some(c) = m.cholesky() {
                        return Some(c);
                    }
                    ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 10.0 };
                }
                None
            })
            .collect();
    }

    /// One damped Newton step; returns the new objective and whether the
    /// step reduced it.
    fn step(
        &mut self,
        model: &mut HazardModel,
        design: &Design,
        dpart: &[f64],
        refresh: bool,
    ) -> Result<(f64, f64, bool)> {
        let old = self.objective(model, design, dpart);
        if !old.is_finite() {
            return Err(Error::NonFiniteLogHazard("structured objective".into()));
        }
        let (grads, hess) = self.derivatives(model, design, dpart, refresh || self.factors[0].is_none());
        if !hess.is_empty() {
            self.refresh(hess);
        }
        let dirs: Vec<DVector<f64>> = grads
            .iter()
            .zip(&self.factors)
            .map(|(g, f)| match f {
                Some(c) => c.solve(g),
                None => g * 1e-3,
            })
            .collect();
        let saved = model.weights.clone();
        let mut alpha = 1.0;
        for _ in 0..40 {
            for (k, w) in model.weights.iter_mut().enumerate() {
                for (c, v) in w.iter_mut().enumerate() {
                    *v = saved[k][c] - alpha * dirs[k][c];
                }
            }
            let new = self.objective(model, design, dpart);
            if new.is_finite() && new <= old {
                return Ok((old, new, true));
            }
            alpha *= 0.5;
        }
        model.weights = saved;
        Ok((old, old, false))
    }

    /// Newton iterations to convergence; returns the iteration count.
    fn solve(
        &mut self,
        model: &mut HazardModel,
        design: &Design,
        dpart: &[f64],
        max_iter: usize,
        tol: f64,
    ) -> Result<(usize, bool)> {
        for it in 0..max_iter {
            let (old, new, moved) = self.step(model, design, dpart, true)?;
            if !moved || (old - new).abs() <= tol * (1.0 + old.abs()) {
                return Ok((it + 1, true));
            }
        }
        Ok((max_iter, false))
    }
}

/// Subject-level train/validation split. Subjects are ordered by id, then
/// shuffled with `seed`; the first `fraction` of them form the validation set.
pub fn split_by_subject(ped: &PedFrame, fraction: f64, seed: u64) -> Result<(PedFrame, PedFrame)> {
    let n = ped.subjects.len();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::EmptyValidation);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ped.subjects[a].id.cmp(&ped.subjects[b].id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5917);
    order.shuffle(&mut rng);
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((ped.select_subjects(&train), ped.select_subjects(&val)))
}

fn subject_ranges(design: &Design) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for r in 1..=design.n_rows {
        if r == design.n_rows || design.subject[r] != design.subject[start] {
            out.push((start, r));
            start = r;
        }
    }
    out
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, optimizer: Optimizer) {
        match optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

/// Fits on a subject-level split of `ped`, using the validation part for
/// early stopping. Returns the best-validation parameters.
pub fn fit(ped: &PedFrame, spec: &ModelSpec, config: &TrainConfig) -> Result<(HazardModel, TrainReport)> {
    config.validate()?;
    let (train, val) = split_by_subject(ped, config.validation_fraction, config.seed)?;
    fit_split(&train, &val, spec, config)
}

/// Fits on an explicit train/validation pair.
pub fn fit_split(
    train: &PedFrame,
    val: &PedFrame,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<(HazardModel, TrainReport)> {
    config.validate()?;
    if train.n_events() == 0 {
        return Err(Error::NoEvents);
    }
    if val.subjects.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let strengths = config.strengths();
    let mut model = HazardModel::initialize(spec, train, config.seed)?;
    model.penalties = strengths;
    let design = model.build_design(train)?;
    let val_design = model.build_design(val)?;

    let mut solver = StructuredSolver::new(&model, &strengths)?;
    let zero = vec![0.0; design.n_rows];
    let (newton_iterations, newton_converged) =
        solver.solve(&mut model, &design, &zero, config.newton_max_iter, config.newton_tol)?;

    let val_loss_of = |m: &HazardModel| -> Result<f64> {
        nll_from_log_hazard(&val_design, &m.log_hazards(&val_design)?)
    };
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: val_loss_of(&model)?,
        newton_iterations,
        converged: newton_converged,
        psi_scale: config.psi_scale,
        lambda_re: config.lambda_re,
        learning_rate: config.learning_rate,
        n_train_subjects: train.subjects.len(),
        n_val_subjects: val.subjects.len(),
        grid: Vec::new(),
    };
    if model.deep.is_none() || config.max_epochs == 0 {
        return Ok((model, report));
    }

    let n_struct = model.n_structured_params();
    let mut best = model.params();
    let mut since_best = 0;
    let mut adam = Adam::new(model.n_params() - n_struct);
    let ranges = subject_ranges(&design);
    let batch_rows = config
        .batch_size
        .unwrap_or(if design.n_rows <= 65536 { design.n_rows } else { 4096 });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let full_batch = batch_rows >= design.n_rows;
    let all = Batch::all(&design);
    report.converged = false;

    for epoch in 1..=config.max_epochs {
        let spart = model.structured_part(&design);
        let batches: Vec<Batch> = if full_batch {
            Vec::new()
        } else {
            let mut order: Vec<usize> = (0..ranges.len()).collect();
            order.shuffle(&mut rng);
            let mut out = Vec::new();
            let mut rows = Vec::new();
            for s in order {
                rows.extend(ranges[s].0..ranges[s].1);
                if rows.len() >= batch_rows {
                    out.push(Batch::from_rows(&design, std::mem::take(&mut rows)));
                }
            }
            if !rows.is_empty() {
                out.push(Batch::from_rows(&design, rows));
            }
            out
        };
        let batch_iter: Vec<&Batch> = if full_batch {
            vec![&all]
        } else {
            batches.iter().collect()
        };
        for b in batch_iter {
            let scale = design.n_rows as f64 / b.rows.len() as f64;
            let (loss, g) =
                deep_batch_gradient(&model, &design, b, &spart, scale, config.weight_decay)?;
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            let mut p = model.params();
            adam.step(&mut p[n_struct..], &g, config.learning_rate, config.optimizer);
            model.set_params(&p);
        }

        let dpart = model
            .deep_part(&design)
            .map_err(|_| Error::Divergence { epoch })?;
        let refresh = epoch % config.hessian_refresh.max(1) == 0;
        solver
            .step(&mut model, &design, &dpart, refresh)
            .map_err(|_| Error::Divergence { epoch })?;

        let train_loss = objective_on(&model, &design, &strengths).map_err(|_| Error::Divergence { epoch })?;
        let val_loss = val_loss_of(&model).map_err(|_| Error::Divergence { epoch })?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        report.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            best = model.params();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                report.converged = true;
                break;
            }
        }
    }
    model.set_params(&best);
    Ok((model, report))
}

fn dedup_sorted(values: &[f64], fallback: f64) -> Vec<f64> {
    let mut v: Vec<f64> = if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    };
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Grid search by validation Poisson NLL. The structured strengths
/// `(ψ scale, λ_RE)` are first tuned on PAMM-only fits; the chosen `λ_RE`
/// is then kept fixed while `(ψ scale, learning rate)` are tuned with the
/// deep head.
pub fn tune(ped: &PedFrame, spec: &ModelSpec, config: &TrainConfig) -> Result<(HazardModel, TrainReport)> {
    config.validate()?;
    let grid = config.grid.clone().unwrap_or_default();
    let psis = dedup_sorted(&grid.psi_scale, config.psi_scale);
    let has_re = spec
        .terms
        .iter()
        .any(|t| matches!(t, crate::model::TermSpec::RandomEffect));
    let lambdas = if has_re {
        dedup_sorted(&grid.lambda_re, config.lambda_re)
    } else {
        vec![config.lambda_re]
    };
    let lrs = dedup_sorted(&grid.learning_rate, config.learning_rate);
    let (train, val) = split_by_subject(ped, config.validation_fraction, config.seed)?;

    let run = |points: Vec<(f64, f64, f64)>, spec: &ModelSpec| -> Vec<(GridPoint, Option<(HazardModel, TrainReport)>)> {
        points
            .into_par_iter()
            .map(|(psi, lambda, lr)| {
                let mut c = config.clone();
                c.psi_scale = psi;
                c.lambda_re = lambda;
                c.learning_rate = lr;
                c.grid = None;
                let res = fit_split(&train, &val, spec, &c);
                if let Err(e) = &res {
                    log::warn!("grid point psi={psi} lambda={lambda} lr={lr} failed: {e}");
                }
                let fitted = res.ok();
                (
                    GridPoint {
                        psi_scale: psi,
                        lambda_re: lambda,
                        learning_rate: lr,
                        val_loss: fitted.as_ref().map(|(_, r)| r.best_val_loss),
                    },
                    fitted,
                )
            })
            .collect()
    };
    let pick = |results: Vec<(GridPoint, Option<(HazardModel, TrainReport)>)>, log: &mut Vec<GridPoint>| {
        let mut best: Option<(f64, HazardModel, TrainReport)> = None;
        for (point, fitted) in results {
            log.push(point);
            if let Some((m, r)) = fitted {
                if best.as_ref().is_none_or(|(v, _, _)| r.best_val_loss < *v) {
                    best = Some((r.best_val_loss, m, r));
                }
            }
        }
        best
    };

    let mut log = Vec::new();
    let single = psis.len() * lambdas.len() * lrs.len() == 1;
    if single {
        let mut c = config.clone();
        c.psi_scale = psis[0];
        c.lambda_re = lambdas[0];
        c.learning_rate = lrs[0];
        return fit_split(&train, &val, spec, &c);
    }

    let pamm_spec = spec.pamm_only();
    let stage1: Vec<(f64, f64, f64)> = psis
        .iter()
        .flat_map(|&p| lambdas.iter().map(move |&l| (p, l, config.learning_rate)))
        .collect();
    let n1 = stage1.len();
    let best1 = pick(run(stage1, &pamm_spec), &mut log);
    let Some((_, pamm_model, pamm_report)) = best1 else {
        return Err(Error::GridFailed(n1));
    };
    if spec.deep.is_none() {
        let mut report = pamm_report;
        report.grid = log;
        return Ok((pamm_model, report));
    }
    let lambda = pamm_report.lambda_re;
    let stage2: Vec<(f64, f64, f64)> = psis
        .iter()
        .flat_map(|&p| lrs.iter().map(move |&lr| (p, lambda, lr)))
        .collect();
    let n2 = stage2.len();
    let Some((_, model, mut report)) = pick(run(stage2, spec), &mut log) else {
        return Err(Error::GridFailed(n2));
    };
    report.grid = log;
    Ok((model, report))
}

/// One full-batch gradient-descent step on all parameters with Armijo
/// backtracking from `step`. Returns the objective before and after.
pub fn descent_step(
    ped: &PedFrame,
    model: &mut HazardModel,
    config: &TrainConfig,
    step: f64,
) -> Result<(f64, f64)> {
    let design = model.build_design(ped)?;
    let strengths = config.strengths();
    let before = objective_on(model, &design, &strengths)?;
    let g = gradient_on(model, &design, &strengths)?;
    let g2: f64 = g.iter().map(|v| v * v).sum();
    let p0 = model.params();
    let mut alpha = step;
    for _ in 0..60 {
        let p: Vec<f64> = p0.iter().zip(&g).map(|(p, g)| p - alpha * g).collect();
        model.set_params(&p);
        if let Ok(after) = objective_on(model, &design, &strengths) {
            if after <= before - 1e-4 * alpha * g2 {
                return Ok((before, after));
            }
        }
        alpha *= 0.5;
    }
    model.set_params(&p0);
    Ok((before, before))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deep::Activation;
    use crate::model::{BasisOptions, DeepSpec, TermSpec};
    use crate::ped::{to_ped_named, CutPoints, SurvivalRecord};
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> PedFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<SurvivalRecord> = (0..n)
            .map(|i| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let z: f64 = rng.random_range(0.0..2.0);
                let t = rng.random_range(0.05..3.0);
                let cause = if rng.random_bool(0.7) { 1 + usize::from(rng.random_bool(0.4)) } else { 0 };
                SurvivalRecord::new(format!("s{i:03}"), t, cause, vec![x, z])
                    .with_cluster(format!("c{}", i % 3))
            })
            .collect();
        let cuts = CutPoints::new(vec![0.0, 0.75, 1.5, 2.25, 3.0]).unwrap();
        to_ped_named(&records, &cuts, vec!["x".into(), "z".into()]).unwrap()
    }

    fn quiet() -> TrainConfig {
        TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn nll_examples() {
        assert_eq!(poisson_nll_terms(&[1.0], &[1.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(poisson_nll_terms(&[0.0], &[1.0], &[1.0]).unwrap(), 1.0);
        let v = poisson_nll_terms(&[1.0, 0.0], &[2.0, 0.5], &[1.0, 1.0]).unwrap();
        assert!((v - (2.0 - 2f64.ln() + 0.5)).abs() < 1e-15);
        assert!(matches!(
            poisson_nll_terms(&[1.0, 0.0], &[1.0, f64::NAN], &[1.0, 1.0]),
            Err(Error::NonFiniteHazard { row: 1 })
        ));
    }

    #[test]
    fn penalty_contribution_of_unit_coefficient() {
        let ped = toy(20, 1);
        let spec = ModelSpec::new(vec![TermSpec::Smooth {
            feature: "x".into(),
            basis: BasisOptions::default().with_n_basis(4),
            psi: 2.0,
        }]);
        let mut model = HazardModel::initialize(&spec, &ped, 0).unwrap();
        let mut cfg = quiet();
        let base = poisson_nll(&ped, &model).unwrap();
        model.weights[0] = vec![0.0; 4];
        let nll0 = poisson_nll(&ped, &model).unwrap();
        assert_eq!(penalized_objective(&ped, &model, &cfg).unwrap(), nll0);
        model.weights[0] = vec![1.0, 0.0, 0.0, 0.0];
        let nll = poisson_nll(&ped, &model).unwrap();
        let obj = penalized_objective(&ped, &model, &cfg).unwrap();
        assert!((obj - nll - 2.0).abs() < 1e-12);
        model.weights[0] = vec![0.5, 1.0, 1.5, 2.0];
        let nll = poisson_nll(&ped, &model).unwrap();
        assert!((penalized_objective(&ped, &model, &cfg).unwrap() - nll).abs() < 1e-12);
        cfg.psi_scale = 0.0;
        let _ = base;
    }

    fn check_gradient(ped: &PedFrame, model: &HazardModel, cfg: &TrainConfig) -> f64 {
        let g = gradient(ped, model, cfg).unwrap();
        let p0 = model.params();
        let mut m = model.clone();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p0.len() {
            let mut p = p0.clone();
            p[i] += h;
            m.set_params(&p);
            let up = penalized_objective(ped, &m, cfg).unwrap();
            p[i] -= 2.0 * h;
            m.set_params(&p);
            let down = penalized_objective(ped, &m, cfg).unwrap();
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / 1f64.max(fd.abs()).max(g[i].abs()));
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ped = toy(12, 2);
        let spec = ModelSpec::new(vec![
            TermSpec::Intercept,
            TermSpec::Linear { feature: "z".into() },
            TermSpec::Smooth {
                feature: "x".into(),
                basis: BasisOptions::default().with_n_basis(5),
                psi: 0.7,
            },
            TermSpec::RandomEffect,
        ])
        .with_causes(2)
        .with_deep(DeepSpec {
            widths: vec![4, 3],
            activation: Activation::Tanh,
            non_proportional: true,
            shared_trunk: false,
            ..DeepSpec::default()
        });
        let mut model = HazardModel::initialize(&spec, &ped, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<f64> = model.params().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
        model.set_params(&p);
        let cfg = TrainConfig {
            lambda_re: 0.3,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        assert!(check_gradient(&ped, &model, &cfg) < 1e-5);
    }

    #[test]
    fn zero_gamma_blocks_hidden_gradients() {
        let ped = toy(10, 4);
        let spec = ModelSpec::new(vec![TermSpec::Intercept]).with_deep(DeepSpec {
            widths: vec![4, 3],
            ..DeepSpec::default()
        });
        let model = HazardModel::initialize(&spec, &ped, 0).unwrap();
        let g = gradient(&ped, &model, &quiet()).unwrap();
        let trunk = model.deep.as_ref().unwrap().trunks[0].n_params();
        let off = model.n_structured_params();
        assert!(g[off..off + trunk].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interval_factor_recovers_occurrence_exposure_rates() {
        let ped = toy(60, 5);
        let spec = ModelSpec::new(vec![TermSpec::IntervalFactor]);
        let (model, _) = fit(&ped, &spec, &quiet()).unwrap();
        let (train, _) = split_by_subject(&ped, 0.2, 0).unwrap();
        let j_n = train.cuts.n_intervals();
        let mut d = vec![0.0; j_n];
        let mut e = vec![0.0; j_n];
        for r in &train.rows {
            if train.subjects[r.subject].cause == 1 {
                d[r.interval - 1] += f64::from(r.status);
            }
            e[r.interval - 1] += r.exposure;
        }
        for j in 0..j_n {
            let h = model.weights[0][j].exp();
            assert!((h - d[j] / e[j]).abs() / (d[j] / e[j]) < 1e-6);
        }
    }

    #[test]
    fn strong_ridge_shrinks_random_effects() {
        let ped = toy(60, 6);
        let spec = ModelSpec::new(vec![TermSpec::Intercept, TermSpec::RandomEffect]);
        let cfg = TrainConfig {
            lambda_re: 1e8,
            ..quiet()
        };
        let (model, _) = fit(&ped, &spec, &cfg).unwrap();
        for (_, b) in model.random_effects(1).unwrap() {
            assert!(b.abs() < 1e-3);
        }
    }

    #[test]
    fn structured_gradient_vanishes_at_optimum() {
        let ped = toy(80, 7);
        let spec = ModelSpec::new(vec![
            TermSpec::Intercept,
            TermSpec::Linear { feature: "x".into() },
            TermSpec::Smooth {
                feature: "z".into(),
                basis: BasisOptions::default().with_n_basis(6),
                psi: 0.0,
            },
        ]);
        let cfg = quiet();
        let (model, _) = fit(&ped, &spec, &cfg).unwrap();
        let (train, _) = split_by_subject(&ped, 0.2, 0).unwrap();
        let g = gradient(&train, &model, &cfg).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-6), "{g:?}");
    }

    #[test]
    fn deep_fit_is_deterministic_and_descends() {
        let ped = toy(60, 8);
        let spec = ModelSpec::new(vec![TermSpec::Intercept]).with_deep(DeepSpec {
            widths: vec![6, 3],
            ..DeepSpec::default()
        });
        let cfg = TrainConfig {
            max_epochs: 30,
            ..TrainConfig::default()
        };
        let (a, ra) = fit(&ped, &spec, &cfg).unwrap();
        let (b, _) = fit(&ped, &spec, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(!ra.epochs.is_empty());

        let mut m = a.clone();
        let mut m_cfg = cfg.clone();
        m_cfg.weight_decay = 1e-3;
        let mut last = f64::INFINITY;
        for _ in 0..20 {
            let (before, after) = descent_step(&ped, &mut m, &m_cfg, 1.0).unwrap();
            assert!(after <= before);
            assert!(before <= last + 1e-12);
            last = after;
        }
    }

    #[test]
    fn tune_deduplicates_and_single_point_matches_fit() {
        let ped = toy(60, 9);
        let spec = ModelSpec::new(vec![
            TermSpec::Intercept,
            TermSpec::Smooth {
                feature: "x".into(),
                basis: BasisOptions::default().with_n_basis(6),
                psi: 1.0,
            },
        ]);
        let cfg = quiet();
        let (fitted, _) = fit(&ped, &spec, &cfg).unwrap();
        let single = TrainConfig {
            grid: Some(HyperGrid {
                psi_scale: vec![1.0, 1.0],
                ..HyperGrid::default()
            }),
            ..cfg.clone()
        };
        let (tuned, _) = tune(&ped, &spec, &single).unwrap();
        assert_eq!(tuned.params(), fitted.params());

        let grid = TrainConfig {
            grid: Some(HyperGrid {
                psi_scale: vec![10.0, 0.1, 10.0, 1.0],
                ..HyperGrid::default()
            }),
            ..cfg
        };
        let (_, report) = tune(&ped, &spec, &grid).unwrap();
        assert_eq!(report.grid.len(), 3);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainConfig::from_json(r#"{"validation_fraction": 1.0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"lambda_re": -1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"unknown": 1}"#).is_err());
        let c = TrainConfig::from_json(r#"{"seed": 4}"#).unwrap();
        assert_eq!(c.max_epochs, 500);
        assert_eq!(c.patience, 25);
    }

    #[test]
    fn tiny_frames_have_empty_validation() {
        let ped = toy(2, 10);
        assert!(matches!(
            split_by_subject(&ped, 0.2, 0),
            Err(Error::EmptyValidation)
        ));
    }
}
