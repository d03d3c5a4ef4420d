//! B-spline, cyclic and tensor-product bases with difference penalties.
//!
//! Knots are equidistant over `[lo, hi]`. Open B-splines repeat the boundary
//! knots `degree + 1` times, so the basis interpolates at the ends and forms a
//! partition of unity on the closed domain. Cyclic bases wrap the cardinal
//! B-spline around the period `hi - lo`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_N_BASIS: usize = 10;
pub const DEFAULT_PENALTY_ORDER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Bspline,
    Cyclic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub degree: usize,
    pub n_basis: usize,
    pub lo: f64,
    pub hi: f64,
    pub penalty_order: usize,
    /// Full knot vector (open) or the `n_basis + 1` period knots (cyclic).
    pub knots: Vec<f64>,
}

impl BasisSpec {
    pub fn bspline(n_basis: usize, degree: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::build(BasisKind::Bspline, n_basis, degree, lo, hi)
    }

    pub fn cyclic(n_basis: usize, degree: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::build(BasisKind::Cyclic, n_basis, degree, lo, hi)
    }

    pub fn with_penalty_order(mut self, order: usize) -> Result<Self> {
        self.penalty_order = order;
        self.validate()?;
        Ok(self)
    }

    fn build(kind: BasisKind, n_basis: usize, degree: usize, lo: f64, hi: f64) -> Result<Self> {
        let mut spec = Self {
            kind,
            degree,
            n_basis,
            lo,
            hi,
            penalty_order: DEFAULT_PENALTY_ORDER.min(n_basis.saturating_sub(1)),
            knots: Vec::new(),
        };
        spec.check_shape()?;
        spec.knots = spec.expected_knots();
        Ok(spec)
    }

    fn check_shape(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo >= self.hi {
            return Err(Error::InvalidBasis(format!(
                "domain [{}, {}] must satisfy lo < hi",
                self.lo, self.hi
            )));
        }
        if self.n_basis < self.degree + 1 {
            return Err(Error::InvalidBasis(format!(
                "n_basis {} must be at least degree + 1 = {}",
                self.n_basis,
                self.degree + 1
            )));
        }
        if self.penalty_order >= self.n_basis {
            return Err(Error::InvalidBasis(format!(
                "penalty order {} must be below n_basis {}",
                self.penalty_order, self.n_basis
            )));
        }
        Ok(())
    }

    fn expected_knots(&self) -> Vec<f64> {
        let (lo, hi, d, m) = (self.lo, self.hi, self.degree, self.n_basis);
        match self.kind {
            BasisKind::Bspline => {
                let n_inner = m - d;
                let h = (hi - lo) / n_inner as f64;
                let mut knots = vec![lo; d + 1];
                knots.extend((1..n_inner).map(|i| lo + i as f64 * h));
                knots.extend(std::iter::repeat_n(hi, d + 1));
                knots
            }
            BasisKind::Cyclic => {
                let h = (hi - lo) / m as f64;
                let mut knots: Vec<f64> = (0..m).map(|i| lo + i as f64 * h).collect();
                knots.push(hi);
                knots
            }
        }
    }

    /// Checks a (possibly deserialized) spec for consistency.
    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        let expected = self.expected_knots();
        if self.knots.len() != expected.len() {
            return Err(Error::InvalidBasis(format!(
                "expected {} knots, found {}",
                expected.len(),
                self.knots.len()
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n_basis
    }

    /// Evaluates all basis functions at `x` into `out`; returns whether `x`
    /// had to be clamped into the domain. Cyclic bases wrap instead.
    pub fn evaluate_into(&self, x: f64, out: &mut [f64]) -> bool {
        debug_assert_eq!(out.len(), self.n_basis);
        out.fill(0.0);
        match self.kind {
            BasisKind::Bspline => {
                let clamped = x < self.lo || x > self.hi;
                let x = x.clamp(self.lo, self.hi);
                self.eval_open(x, out);
                clamped
            }
            BasisKind::Cyclic => {
                self.eval_cyclic(x, out);
                false
            }
        }
    }

    pub fn evaluate(&self, x: f64) -> (Vec<f64>, bool) {
        let mut out = vec![0.0; self.n_basis];
        let clamped = self.evaluate_into(x, &mut out);
        (out, clamped)
    }

    fn eval_open(&self, x: f64, out: &mut [f64]) {
        let t = &self.knots;
        let d = self.degree;
        let m = self.n_basis;
        // span index with t[span] <= x < t[span + 1], last span closed on the right
        let span = if x >= self.hi {
            m - 1
        } else {
            (t.partition_point(|&k| k <= x) - 1).clamp(d, m - 1)
        };
        let mut n = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        n[0] = 1.0;
        for j in 1..=d {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        out[span - d..=span].copy_from_slice(&n);
    }

    fn eval_cyclic(&self, x: f64, out: &mut [f64]) {
        let m = self.n_basis as f64;
        let frac = ((x - self.lo) / (self.hi - self.lo)).rem_euclid(1.0);
        let u = frac * m;
        for (i, o) in out.iter_mut().enumerate() {
            let v = (u - i as f64).rem_euclid(m);
            *o = cardinal_bspline(self.degree, v);
        }
    }

    /// Difference penalty matching the basis kind.
    pub fn penalty(&self) -> Result<PenaltyMatrix> {
        match self.kind {
            BasisKind::Bspline => difference_penalty(self.n_basis, self.penalty_order),
            BasisKind::Cyclic => cyclic_difference_penalty(self.n_basis, self.penalty_order),
        }
    }
}

/// Cardinal B-spline of the given degree on integer knots `0..=degree+1`.
fn cardinal_bspline(degree: usize, v: f64) -> f64 {
    if degree == 0 {
        return if (0.0..1.0).contains(&v) { 1.0 } else { 0.0 };
    }
    if v <= 0.0 || v >= (degree + 1) as f64 {
        return 0.0;
    }
    let d = degree as f64;
    (v * cardinal_bspline(degree - 1, v) + (d + 1.0 - v) * cardinal_bspline(degree - 1, v - 1.0))
        / d
}

/// Row-major outer product of two open B-spline margins.
pub fn tensor_basis(spec1: &BasisSpec, spec2: &BasisSpec, x1: f64, x2: f64) -> Result<Vec<f64>> {
    check_tensor_margins(spec1, spec2)?;
    let mut out = vec![0.0; spec1.n_basis * spec2.n_basis];
    tensor_basis_into(spec1, spec2, x1, x2, &mut out);
    Ok(out)
}

pub(crate) fn check_tensor_margins(spec1: &BasisSpec, spec2: &BasisSpec) -> Result<()> {
    if spec1.kind != BasisKind::Bspline || spec2.kind != BasisKind::Bspline {
        return Err(Error::InvalidBasis(
            "tensor-product margins must be open B-splines".into(),
        ));
    }
    spec1.validate()?;
    spec2.validate()
}

/// Returns the number of clamped margins.
pub(crate) fn tensor_basis_into(
    spec1: &BasisSpec,
    spec2: &BasisSpec,
    x1: f64,
    x2: f64,
    out: &mut [f64],
) -> usize {
    let (b1, c1) = spec1.evaluate(x1);
    let (b2, c2) = spec2.evaluate(x2);
    let m2 = b2.len();
    for (i, &a) in b1.iter().enumerate() {
        for (j, &b) in b2.iter().enumerate() {
            out[i * m2 + j] = a * b;
        }
    }
    usize::from(c1) + usize::from(c2)
}

/// Dense symmetric positive semi-definite penalty `S` with `Ψ(θ) = θᵀSθ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub order: usize,
    matrix: DMatrix<f64>,
}

impl PenaltyMatrix {
    pub fn from_matrix(matrix: DMatrix<f64>, order: usize) -> Self {
        debug_assert!(matrix.is_square());
        Self { order, matrix }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            order: 0,
            matrix: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    pub fn quad_form(&self, theta: &[f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.matrix[(i, j)] * theta[j];
            }
            acc += theta[i] * row;
        }
        acc
    }

    /// `S θ`.
    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..n).map(|j| self.matrix[(i, j)] * theta[j]).sum())
            .collect()
    }
}

fn difference_stencil(order: usize) -> Vec<f64> {
    // coefficients of the order-th forward difference
    let mut c = vec![1.0];
    for _ in 0..order {
        let mut next = vec![0.0; c.len() + 1];
        for (i, &v) in c.iter().enumerate() {
            next[i] -= v;
            next[i + 1] += v;
        }
        c = next;
    }
    c
}

/// The `(M - order) × M` difference operator `D`.
pub fn difference_matrix(n_basis: usize, order: usize) -> Result<DMatrix<f64>> {
    if order >= n_basis {
        return Err(Error::InvalidBasis(format!(
            "penalty order {order} must be below basis dimension {n_basis}"
        )));
    }
    let stencil = difference_stencil(order);
    let rows = n_basis - order;
    let mut d = DMatrix::zeros(rows, n_basis);
    for i in 0..rows {
        for (s, &c) in stencil.iter().enumerate() {
            d[(i, i + s)] = c;
        }
    }
    Ok(d)
}

pub fn difference_penalty(n_basis: usize, order: usize) -> Result<PenaltyMatrix> {
    let d = difference_matrix(n_basis, order)?;
    Ok(PenaltyMatrix::from_matrix(d.transpose() * d, order))
}

/// Difference penalty with wrap-around indices (circulant `D`).
pub fn cyclic_difference_penalty(n_basis: usize, order: usize) -> Result<PenaltyMatrix> {
    if order >= n_basis {
        return Err(Error::InvalidBasis(format!(
            "penalty order {order} must be below basis dimension {n_basis}"
        )));
    }
    let stencil = difference_stencil(order);
    let mut d = DMatrix::<f64>::zeros(n_basis, n_basis);
    for i in 0..n_basis {
        for (s, &c) in stencil.iter().enumerate() {
            d[(i, (i + s) % n_basis)] += c;
        }
    }
    Ok(PenaltyMatrix::from_matrix(d.transpose() * d, order))
}

/// `P₁ ⊗ I + I ⊗ P₂`, matching the row-major layout of [`tensor_basis`].
pub fn tensor_penalty(p1: &PenaltyMatrix, p2: &PenaltyMatrix) -> PenaltyMatrix {
    let i1 = DMatrix::<f64>::identity(p1.dim(), p1.dim());
    let i2 = DMatrix::<f64>::identity(p2.dim(), p2.dim());
    let m = p1.matrix.kronecker(&i2) + i1.kronecker(&p2.matrix);
    PenaltyMatrix::from_matrix(m, p1.order.max(p2.order))
}

/// Sum-to-zero identifiability constraint `cᵀθ = 0`, absorbed by a
/// Householder reparameterisation `θ = Z θ̃` with `Z` orthonormal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumToZero {
    householder: Vec<f64>,
}

impl SumToZero {
    /// Builds the constraint from `c`, usually the design column sums.
    pub fn new(c: &[f64]) -> Result<Self> {
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::InvalidBasis("constraint vector must be non-zero".into()));
        }
        let mut v = c.to_vec();
        let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * norm;
        Ok(Self { householder: v })
    }

    pub fn full_dim(&self) -> usize {
        self.householder.len()
    }

    pub fn reduced_dim(&self) -> usize {
        self.householder.len() - 1
    }

    fn reflect(&self, b: &mut [f64]) {
        let v = &self.householder;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let vb: f64 = v.iter().zip(b.iter()).map(|(a, b)| a * b).sum();
        let s = 2.0 * vb / vv;
        for (bi, vi) in b.iter_mut().zip(v) {
            *bi -= s * vi;
        }
    }

    /// `Zᵀ b`.
    pub fn reduce(&self, b: &[f64]) -> Vec<f64> {
        let mut h = b.to_vec();
        self.reflect(&mut h);
        h.remove(0);
        h
    }

    /// `Z θ̃`.
    pub fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        let mut full = Vec::with_capacity(reduced.len() + 1);
        full.push(0.0);
        full.extend_from_slice(reduced);
        self.reflect(&mut full);
        full
    }

    /// `Zᵀ S Z`.
    pub fn reduce_penalty(&self, penalty: &PenaltyMatrix) -> PenaltyMatrix {
        let n = self.full_dim();
        let mut h = DMatrix::<f64>::identity(n, n);
        let v = &self.householder;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] -= 2.0 * v[i] * v[j] / vv;
            }
        }
        let z = h.columns(1, n - 1).into_owned();
        let m = z.transpose() * penalty.matrix() * &z;
        // symmetrise rounding noise
        let m = (&m + m.transpose()) * 0.5;
        PenaltyMatrix::from_matrix(m, penalty.order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn partition_of_unity_at_random_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for spec in [
            BasisSpec::bspline(10, 3, -2.0, 5.0).unwrap(),
            BasisSpec::bspline(4, 3, 0.0, 1.0).unwrap(),
            BasisSpec::bspline(7, 2, 1.0, 2.0).unwrap(),
            BasisSpec::cyclic(8, 3, 0.0, 24.0).unwrap(),
        ] {
            for _ in 0..1000 {
                let x = rng.random_range(spec.lo..=spec.hi);
                let (b, clamped) = spec.evaluate(x);
                assert!(!clamped);
                assert!(b.iter().all(|&v| v >= 0.0));
                assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
            for x in [spec.lo, spec.hi] {
                let (b, _) = spec.evaluate(x);
                assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn left_boundary_interpolates() {
        let spec = BasisSpec::bspline(4, 3, 0.0, 1.0).unwrap();
        assert_eq!(spec.evaluate(0.0).0, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(spec.evaluate(1.0).0, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cubic_bezier_case_matches_bernstein() {
        // M = degree + 1 reduces to the Bernstein polynomials
        let spec = BasisSpec::bspline(4, 3, 0.0, 1.0).unwrap();
        let x: f64 = 0.3;
        let bern = [
            (1.0 - x).powi(3),
            3.0 * x * (1.0 - x).powi(2),
            3.0 * x * x * (1.0 - x),
            x.powi(3),
        ];
        for (a, b) in spec.evaluate(x).0.iter().zip(bern) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn out_of_domain_clamps() {
        let spec = BasisSpec::bspline(6, 3, 0.0, 1.0).unwrap();
        let (b, clamped) = spec.evaluate(-0.5);
        assert!(clamped);
        assert_eq!(b, spec.evaluate(0.0).0);
        let (b, clamped) = spec.evaluate(1.5);
        assert!(clamped);
        assert_eq!(b, spec.evaluate(1.0).0);
    }

    #[test]
    fn cyclic_is_periodic_bitwise() {
        let spec = BasisSpec::cyclic(10, 3, 0.0, 24.0).unwrap();
        let (a, _) = spec.evaluate(0.0);
        let (b, _) = spec.evaluate(24.0);
        assert_eq!(a, b);
        let spec = BasisSpec::cyclic(7, 3, -1.3, 2.9).unwrap();
        assert_eq!(spec.evaluate(-1.3).0, spec.evaluate(2.9).0);
    }

    #[test]
    fn cyclic_derivative_continuous_across_boundary() {
        let spec = BasisSpec::cyclic(10, 3, 0.0, 24.0).unwrap();
        let h = 1e-6;
        let (b0, _) = spec.evaluate(0.0);
        let (b_plus, _) = spec.evaluate(h);
        let (b_end, _) = spec.evaluate(24.0);
        let (b_minus, _) = spec.evaluate(24.0 - h);
        for m in 0..10 {
            let right = (b_plus[m] - b0[m]) / h;
            let left = (b_end[m] - b_minus[m]) / h;
            assert!((right - left).abs() < 1e-4, "basis {m}: {left} vs {right}");
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(BasisSpec::bspline(3, 3, 0.0, 1.0).is_err());
        assert!(BasisSpec::bspline(10, 3, 1.0, 1.0).is_err());
        assert!(BasisSpec::cyclic(10, 3, 2.0, 1.0).is_err());
        let mut spec = BasisSpec::bspline(10, 3, 0.0, 1.0).unwrap();
        spec.knots.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn tensor_shape_and_partition() {
        let s1 = BasisSpec::bspline(4, 3, 0.0, 1.0).unwrap();
        let s2 = BasisSpec::bspline(4, 3, -1.0, 1.0).unwrap();
        let t = tensor_basis(&s1, &s2, 0.37, 0.2).unwrap();
        assert_eq!(t.len(), 16);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_at_margin_knot_is_scaled_second_margin() {
        let s1 = BasisSpec::bspline(4, 3, 0.0, 1.0).unwrap();
        let s2 = BasisSpec::bspline(5, 3, 0.0, 2.0).unwrap();
        let (b2, _) = s2.evaluate(0.8);
        let t = tensor_basis(&s1, &s2, 0.0, 0.8).unwrap();
        // brute-force outer product with margin1 = (1,0,0,0)
        let mut expected = vec![0.0; 20];
        for (i, a) in [1.0, 0.0, 0.0, 0.0].iter().enumerate() {
            for (j, b) in b2.iter().enumerate() {
                expected[i * 5 + j] = a * b;
            }
        }
        assert_eq!(t, expected);
        assert_eq!(&t[..5], b2.as_slice());
    }

    #[test]
    fn tensor_rejects_cyclic_margin() {
        let s1 = BasisSpec::cyclic(6, 3, 0.0, 1.0).unwrap();
        let s2 = BasisSpec::bspline(6, 3, 0.0, 1.0).unwrap();
        assert!(tensor_basis(&s1, &s2, 0.5, 0.5).is_err());
    }

    #[test]
    fn difference_penalty_examples() {
        let p = difference_penalty(4, 2).unwrap();
        assert_eq!(p.quad_form(&[0.0; 4]), 0.0);
        assert!(p.quad_form(&[1.0, 2.0, 3.0, 4.0]).abs() < 1e-12);
        // D = [[1,-2,1,0],[0,1,-2,1]]
        assert_eq!(p.quad_form(&[1.0, 0.0, 0.0, 0.0]), 1.0);
        assert_eq!(p.get(1, 1), 5.0);
        assert!(difference_penalty(4, 4).is_err());
    }

    #[test]
    fn penalty_null_space_dimension() {
        for (m, order) in [(10, 1), (10, 2), (8, 3)] {
            let p = difference_penalty(m, order).unwrap();
            let eig = p.matrix().clone().symmetric_eigen();
            let zero = eig.eigenvalues.iter().filter(|v| v.abs() < 1e-9).count();
            assert_eq!(zero, order);
            assert!(eig.eigenvalues.iter().all(|&v| v > -1e-9));
        }
        let p = cyclic_difference_penalty(10, 2).unwrap();
        let eig = p.matrix().clone().symmetric_eigen();
        assert_eq!(eig.eigenvalues.iter().filter(|v| v.abs() < 1e-9).count(), 1);
    }

    #[test]
    fn tensor_penalty_is_kronecker_sum() {
        let p1 = difference_penalty(4, 2).unwrap();
        let p2 = difference_penalty(3, 1).unwrap();
        let t = tensor_penalty(&p1, &p2);
        assert_eq!(t.dim(), 12);
        for i in 0..12 {
            for j in 0..12 {
                let (i1, i2, j1, j2) = (i / 3, i % 3, j / 3, j % 3);
                let mut v = 0.0;
                if i2 == j2 {
                    v += p1.get(i1, j1);
                }
                if i1 == j1 {
                    v += p2.get(i2, j2);
                }
                assert_eq!(t.get(i, j), v);
            }
        }
    }

    #[test]
    fn sum_to_zero_reparameterisation() {
        let c = [3.0, 1.0, 2.0, 0.5, 4.0];
        let z = SumToZero::new(&c).unwrap();
        let reduced = [0.3, -1.0, 2.0, 0.7];
        let theta = z.expand(&reduced);
        let dot: f64 = theta.iter().zip(c).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
        // f(x) = bᵀθ = (Zᵀb)ᵀθ̃
        let b = [0.1, 0.2, 0.3, 0.15, 0.25];
        let lhs: f64 = b.iter().zip(&theta).map(|(a, b)| a * b).sum();
        let rhs: f64 = z.reduce(&b).iter().zip(reduced).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        // penalty invariance
        let p = difference_penalty(5, 2).unwrap();
        let pr = z.reduce_penalty(&p);
        assert!((p.quad_form(&theta) - pr.quad_form(&reduced)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn polynomial_coefficients_in_null_space(
            order in 1usize..4,
            coefs in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let m = 9;
            let p = difference_penalty(m, order).unwrap();
            let theta: Vec<f64> = (0..m)
                .map(|i| {
                    let x = i as f64;
                    (0..order).map(|d| coefs[d] * x.powi(d as i32)).sum()
                })
                .collect();
            let scale = 1.0 + theta.iter().map(|v| v * v).sum::<f64>();
            prop_assert!(p.quad_form(&theta).abs() < 1e-9 * scale);
        }

        #[test]
        fn penalty_is_psd(theta in proptest::collection::vec(-5.0f64..5.0, 8)) {
            for p in [difference_penalty(8, 2).unwrap(), cyclic_difference_penalty(8, 2).unwrap()] {
                prop_assert!(p.quad_form(&theta) >= -1e-12);
            }
        }
    }
}
