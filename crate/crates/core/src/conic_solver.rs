//! Dense ADMM solver for linear objectives over a symmetric matrix variable
//! `P ⪰ 0, tr P ≤ T` (or over a box, for LPs) with linear equality and
//! inequality rows, plus a weak-duality bound that is valid for arbitrary
//! multipliers.
//!
//! Both problem kinds are lowered to a vector form `max cᵀx + offset` subject
//! to `A x = b`, `G x ≤ h`, `x ∈ K`. Matrices are vectorized with the scaled
//! upper triangle (`√2` on off-diagonal entries) so that the Euclidean
//! projection in vector space is the Frobenius projection on matrices.
//!
//! The iteration splits `(x, s)` with `A x = b, G x + s = h` from a copy in
//! `K × ℝ₊`. The affine step is an orthogonal projection using a cached
//! Cholesky factor of `M Mᵀ`, which does not depend on the penalty, so the
//! penalty adapts freely.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{CertError, Result};

/// A linear functional `Σ coeff · P[i, j]` on symmetric matrices, one term per
/// unordered index pair (`i ≤ j`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SymForm {
    terms: BTreeMap<(usize, usize), f64>,
}

impl SymForm {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `coeff · P[i, j]`.
    pub fn add(&mut self, i: usize, j: usize, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        let key = if i <= j { (i, j) } else { (j, i) };
        *self.terms.entry(key).or_insert(0.0) += coeff;
    }

    pub fn add_form(&mut self, other: &SymForm, scale: f64) {
        for (&(i, j), c) in &other.terms {
            self.add(i, j, scale * c);
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.terms.iter().map(|(&(i, j), &c)| (i, j, c))
    }

    pub fn is_empty(&self) -> bool {
        self.terms.values().all(|c| *c == 0.0)
    }

    /// True when every term sits on `P[0, 0]`.
    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|(&k, c)| k == (0, 0) || *c == 0.0)
    }

    pub fn coeff(&self, i: usize, j: usize) -> f64 {
        let key = if i <= j { (i, j) } else { (j, i) };
        self.terms.get(&key).copied().unwrap_or(0.0)
    }

    pub fn max_index(&self) -> Option<usize> {
        self.terms.keys().map(|&(_, j)| j).max()
    }

    pub fn eval(&self, p: &DMatrix<f64>) -> f64 {
        self.terms().map(|(i, j, c)| c * p[(i, j)]).sum()
    }

    /// Value at `P = v vᵀ`.
    pub fn eval_rank1(&self, v: &[f64]) -> f64 {
        self.terms().map(|(i, j, c)| c * v[i] * v[j]).sum()
    }

    /// Adds `scale · S` to `out`, where `S` is the symmetric matrix with `⟨S, P⟩` equal to this form.
    pub fn accumulate_matrix(&self, out: &mut DMatrix<f64>, scale: f64) {
        for (i, j, c) in self.terms() {
            if i == j {
                out[(i, i)] += scale * c;
            } else {
                out[(i, j)] += 0.5 * scale * c;
                out[(j, i)] += 0.5 * scale * c;
            }
        }
    }

    fn to_svec_row(&self) -> SparseRow {
        let mut row: Vec<(usize, f64)> = self
            .terms()
            .filter(|(_, _, c)| *c != 0.0)
            .map(|(i, j, c)| (svec_index(i, j), if i == j { c } else { c / std::f64::consts::SQRT_2 }))
            .collect();
        row.sort_by_key(|e| e.0);
        row
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicRow {
    pub form: SymForm,
    pub rhs: f64,
}

/// `maximize ⟨C₀, P⟩ + offset` subject to `⟨A_k, P⟩ = b_k`, `⟨G_j, P⟩ ≤ h_j`,
/// `P ⪰ 0`, `tr P ≤ trace_cap`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProblem {
    pub dim: usize,
    pub objective: SymForm,
    pub offset: f64,
    pub equalities: Vec<ConicRow>,
    pub inequalities: Vec<ConicRow>,
    pub trace_cap: f64,
}

impl ConicProblem {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(CertError::Shape("conic problem of dimension 0".into()));
        }
        if !(self.trace_cap >= 1.0) || !self.trace_cap.is_finite() {
            return Err(CertError::Value(format!("trace cap must be finite and ≥ 1, got {}", self.trace_cap)));
        }
        if !self.offset.is_finite() {
            return Err(CertError::Value("non-finite objective offset".into()));
        }
        let forms = std::iter::once((&self.objective, 0.0))
            .chain(self.equalities.iter().chain(&self.inequalities).map(|r| (&r.form, r.rhs)));
        for (form, rhs) in forms {
            if !rhs.is_finite() || form.terms().any(|(_, _, c)| !c.is_finite()) {
                return Err(CertError::Value("non-finite coefficient in conic problem".into()));
            }
            if form.max_index().is_some_and(|j| j >= self.dim) {
                return Err(CertError::Shape("coefficient index outside the matrix variable".into()));
            }
        }
        Ok(())
    }

    /// `(max violation over all rows, index into equalities ++ inequalities)`,
    /// with inequality violations counted only when positive.
    pub fn max_violation(&self, p: &DMatrix<f64>) -> (f64, Option<usize>) {
        self.max_violation_by(|f| f.eval(p))
    }

    pub fn max_violation_rank1(&self, v: &[f64]) -> (f64, Option<usize>) {
        self.max_violation_by(|f| f.eval_rank1(v))
    }

    fn max_violation_by(&self, eval: impl Fn(&SymForm) -> f64) -> (f64, Option<usize>) {
        let mut worst = (0.0, None);
        let eq = self.equalities.iter().map(|r| (eval(&r.form) - r.rhs).abs());
        let ineq = self.inequalities.iter().map(|r| (eval(&r.form) - r.rhs).max(0.0));
        for (k, v) in eq.chain(ineq).enumerate() {
            if v > worst.0 || worst.1.is_none() && v.is_nan() {
                worst = (v, Some(k));
            }
        }
        worst
    }

    fn lower(&self) -> VectorProblem {
        let mut objective = vec![0.0; svec_len(self.dim)];
        for (k, v) in self.objective.to_svec_row() {
            objective[k] = v;
        }
        VectorProblem {
            objective,
            offset: self.offset,
            eq: self.equalities.iter().map(|r| r.form.to_svec_row()).collect(),
            eq_rhs: self.equalities.iter().map(|r| r.rhs).collect(),
            ineq: self.inequalities.iter().map(|r| r.form.to_svec_row()).collect(),
            ineq_rhs: self.inequalities.iter().map(|r| r.rhs).collect(),
            domain: Domain::CappedPsd { n: self.dim, trace_cap: self.trace_cap },
        }
    }
}

/// Sparse row: `(column, coefficient)` sorted by column.
pub type SparseRow = Vec<(usize, f64)>;

/// `maximize cᵀx + offset` subject to `G x ≤ h`, `lo ≤ x ≤ hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxProblem {
    pub objective: Vec<f64>,
    pub offset: f64,
    pub inequalities: Vec<(SparseRow, f64)>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.objective.len();
        if self.lo.len() != n || self.hi.len() != n {
            return Err(CertError::Shape("box bounds do not match the variable count".into()));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(CertError::Value("inconsistent or non-finite box bounds".into()));
        }
        for (row, rhs) in &self.inequalities {
            if !rhs.is_finite() || row.iter().any(|(k, c)| *k >= n || !c.is_finite()) {
                return Err(CertError::Value("malformed inequality row".into()));
            }
        }
        if self.objective.iter().any(|c| !c.is_finite()) || !self.offset.is_finite() {
            return Err(CertError::Value("non-finite objective".into()));
        }
        Ok(())
    }

    fn lower(&self) -> VectorProblem {
        VectorProblem {
            objective: self.objective.clone(),
            offset: self.offset,
            eq: Vec::new(),
            eq_rhs: Vec::new(),
            ineq: self.inequalities.iter().map(|(r, _)| r.clone()).collect(),
            ineq_rhs: self.inequalities.iter().map(|(_, h)| *h).collect(),
            domain: Domain::Box { lo: self.lo.clone(), hi: self.hi.clone() },
        }
    }
}

#[derive(Debug, Clone)]
enum Domain {
    CappedPsd { n: usize, trace_cap: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Domain {
    fn project(&self, v: &mut [f64]) {
        match self {
            Domain::CappedPsd { n, trace_cap } => {
                let s = smat(v, *n);
                let p = project_spectrum(s, Some(*trace_cap));
                svec_into(&p, v);
            }
            Domain::Box { lo, hi } => {
                for ((x, l), h) in v.iter_mut().zip(lo).zip(hi) {
                    *x = x.clamp(*l, *h);
                }
            }
        }
    }

    /// `sup { rᵀx : x ∈ K }` and a maximizer.
    fn support(&self, r: &[f64]) -> (f64, Vec<f64>) {
        match self {
            Domain::CappedPsd { n, trace_cap } => {
                let z = smat(r, *n);
                let (top, q) = top_eigenpair(&z);
                // inflate by a backward-error bound on the computed eigenvalue
                let top = top + (*n as f64) * f64::EPSILON * z.norm();
                let mut x = vec![0.0; r.len()];
                if top > 0.0 {
                    let qq = &q * q.transpose() * *trace_cap;
                    svec_into(&qq, &mut x);
                    (trace_cap * top, x)
                } else {
                    (0.0, x)
                }
            }
            Domain::Box { lo, hi } => {
                let mut total = 0.0;
                let x = r
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .map(|(ri, (l, h))| {
                        let v = if *ri >= 0.0 { *h } else { *l };
                        total += ri * v;
                        v
                    })
                    .collect();
                (total, x)
            }
        }
    }
}

struct VectorProblem {
    objective: Vec<f64>,
    offset: f64,
    eq: Vec<SparseRow>,
    eq_rhs: Vec<f64>,
    ineq: Vec<SparseRow>,
    ineq_rhs: Vec<f64>,
    domain: Domain,
}

impl VectorProblem {
    fn reduced_cost(&self, m: &Multipliers) -> Vec<f64> {
        let mut r = self.objective.clone();
        for (row, nu) in self.eq.iter().zip(&m.eq) {
            for (k, c) in row {
                r[*k] -= nu * c;
            }
        }
        for (row, lam) in self.ineq.iter().zip(&m.ineq) {
            for (k, c) in row {
                r[*k] -= lam * c;
            }
        }
        r
    }

    fn dual_bound(&self, m: &Multipliers) -> f64 {
        self.dual_bound_with_maximizer(m).0
    }

    fn dual_bound_with_maximizer(&self, m: &Multipliers) -> (f64, Vec<f64>) {
        let r = self.reduced_cost(m);
        let (support, x) = self.domain.support(&r);
        let linear: f64 = self.eq_rhs.iter().zip(&m.eq).map(|(b, v)| b * v).sum::<f64>()
            + self.ineq_rhs.iter().zip(&m.ineq).map(|(h, v)| h * v).sum::<f64>();
        (self.offset + linear + support, x)
    }

    fn check_multipliers(&self, m: &Multipliers) -> Result<()> {
        if m.eq.len() != self.eq.len() || m.ineq.len() != self.ineq.len() {
            return Err(CertError::Shape("multiplier count does not match the constraint rows".into()));
        }
        if m.ineq.iter().any(|l| !(*l >= 0.0)) || m.eq.iter().any(|v| !v.is_finite()) {
            return Err(CertError::Value("inequality multipliers must be nonnegative and finite".into()));
        }
        if m.ineq.iter().any(|l| !l.is_finite()) {
            return Err(CertError::Value("non-finite multiplier".into()));
        }
        Ok(())
    }
}

/// Lagrange multipliers: free `eq` for equality rows, `ineq ≥ 0` for inequality rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
}

impl Multipliers {
    pub fn zeros(eq: usize, ineq: usize) -> Self {
        Multipliers { eq: vec![0.0; eq], ineq: vec![0.0; ineq] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub over_relaxation: f64,
    pub rho: f64,
    pub adaptive_rho: bool,
    /// Projected-gradient steps on the dual bound after the main loop.
    pub polish_steps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            abs_tol: 1e-6,
            rel_tol: 1e-6,
            max_iter: 20_000,
            over_relaxation: 1.6,
            rho: 1.0,
            adaptive_rho: true,
            polish_steps: 0,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(CertError::Config("solver tolerances must be positive".into()));
        }
        if !(self.over_relaxation > 0.0 && self.over_relaxation < 2.0) {
            return Err(CertError::Config("over-relaxation must lie in (0, 2)".into()));
        }
        if !(self.rho > 0.0) || self.max_iter == 0 {
            return Err(CertError::Config("penalty must be positive and max_iter ≥ 1".into()));
        }
        Ok(())
    }

    /// The gap accepted as converged at a given primal value.
    pub fn gap_tolerance(&self, primal: f64) -> f64 {
        self.abs_tol.max(self.rel_tol * primal.abs())
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport<P> {
    pub primal: P,
    pub multipliers: Multipliers,
    pub primal_objective: f64,
    /// Weak-duality bound at `multipliers`; the lowest seen during the run.
    pub dual_bound: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

pub fn psd_project(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(CertError::Shape("psd_project needs a square matrix".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(CertError::Numerical("non-finite matrix in psd_project".into()));
    }
    let sym = (s + s.transpose()) * 0.5;
    Ok(project_spectrum(sym, None))
}

/// Frobenius projection onto `{P ⪰ 0}` or `{P ⪰ 0, tr P ≤ cap}`.
fn project_spectrum(s: DMatrix<f64>, cap: Option<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    let eig = SymmetricEigen::new(s);
    let mut mu: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    if let Some(cap) = cap {
        let total: f64 = mu.iter().sum();
        if total > cap {
            let theta = simplex_shift(eig.eigenvalues.as_slice(), cap);
            mu = eig.eigenvalues.iter().map(|v| (v - theta).max(0.0)).collect();
        }
    }
    let mut out = DMatrix::zeros(n, n);
    for (k, m) in mu.iter().enumerate() {
        if *m > 0.0 {
            let q = eig.eigenvectors.column(k);
            out.ger(*m, &q, &q, 1.0);
        }
    }
    // exact symmetry
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// `θ ≥ 0` with `Σ max(vᵢ − θ, 0) = cap`, assuming `Σ max(vᵢ, 0) > cap`.
fn simplex_shift(v: &[f64], cap: f64) -> f64 {
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut prefix = 0.0;
    let mut theta = 0.0;
    for (k, x) in sorted.iter().enumerate() {
        prefix += x;
        let t = (prefix - cap) / (k + 1) as f64;
        if k + 1 == sorted.len() || sorted[k + 1] <= t {
            theta = t;
            break;
        }
    }
    theta.max(0.0)
}

fn top_eigenpair(z: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = SymmetricEigen::new(z.clone());
    let mut best = 0;
    for k in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[k] > eig.eigenvalues[best] {
            best = k;
        }
    }
    (eig.eigenvalues[best], eig.eigenvectors.column(best).into_owned())
}

fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn svec_index(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let x = v[svec_index(i, j)];
            if i == j {
                m[(i, i)] = x;
            } else {
                let y = x / std::f64::consts::SQRT_2;
                m[(i, j)] = y;
                m[(j, i)] = y;
            }
        }
    }
    m
}

fn svec_into(m: &DMatrix<f64>, out: &mut [f64]) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..=j {
            out[svec_index(i, j)] = if i == j { m[(i, i)] } else { std::f64::consts::SQRT_2 * m[(i, j)] };
        }
    }
}

fn sparse_dot(a: &SparseRow, b: &SparseRow) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Weak-duality bound `Σνb + Σλh + T·max(0, λ_max(C₀ − Σν A − Σλ G)) + offset`.
pub fn rigorous_dual_bound(problem: &ConicProblem, multipliers: &Multipliers) -> Result<f64> {
    problem.validate()?;
    let vp = problem.lower();
    vp.check_multipliers(multipliers)?;
    Ok(vp.dual_bound(multipliers))
}

/// Box-Lagrangian bound `Σλh + Σᵢ sup_{xᵢ ∈ [loᵢ, hiᵢ]} (c − Gᵀλ)ᵢ xᵢ + offset`.
pub fn box_dual_bound(problem: &BoxProblem, multipliers: &[f64]) -> Result<f64> {
    problem.validate()?;
    let vp = problem.lower();
    let m = Multipliers { eq: Vec::new(), ineq: multipliers.to_vec() };
    vp.check_multipliers(&m)?;
    Ok(vp.dual_bound(&m))
}

pub fn solve(problem: &ConicProblem, settings: &SolverSettings) -> Result<SolveReport<DMatrix<f64>>> {
    problem.validate()?;
    settings.validate()?;
    let n = problem.dim;
    let raw = admm(&problem.lower(), settings)?;
    Ok(SolveReport {
        primal: smat(&raw.x, n),
        multipliers: raw.multipliers,
        primal_objective: raw.primal_objective,
        dual_bound: raw.dual_bound,
        primal_residual: raw.primal_residual,
        dual_residual: raw.dual_residual,
        iterations: raw.iterations,
        status: raw.status,
    })
}

pub fn solve_box(problem: &BoxProblem, settings: &SolverSettings) -> Result<SolveReport<Vec<f64>>> {
    problem.validate()?;
    settings.validate()?;
    let raw = admm(&problem.lower(), settings)?;
    Ok(SolveReport {
        primal: raw.x,
        multipliers: raw.multipliers,
        primal_objective: raw.primal_objective,
        dual_bound: raw.dual_bound,
        primal_residual: raw.primal_residual,
        dual_residual: raw.dual_residual,
        iterations: raw.iterations,
        status: raw.status,
    })
}

struct RawReport {
    x: Vec<f64>,
    multipliers: Multipliers,
    primal_objective: f64,
    dual_bound: f64,
    primal_residual: f64,
    dual_residual: f64,
    iterations: usize,
    status: SolveStatus,
}

/// Equality rows followed by inequality rows, each scaled to unit norm; the
/// slack of inequality row `a` enters with coefficient 1.
struct AffineProjector {
    rows: Vec<SparseRow>,
    rhs: Vec<f64>,
    scale: Vec<f64>,
    n_eq: usize,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl AffineProjector {
    fn new(vp: &VectorProblem) -> Result<Self> {
        let mut rows = Vec::with_capacity(vp.eq.len() + vp.ineq.len());
        let mut rhs = Vec::with_capacity(rows.capacity());
        let mut scale = Vec::with_capacity(rows.capacity());
        for (row, b) in vp.eq.iter().zip(&vp.eq_rhs).chain(vp.ineq.iter().zip(&vp.ineq_rhs)) {
            let norm = row.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
            let s = if norm > 0.0 { 1.0 / norm } else { 1.0 };
            rows.push(row.iter().map(|(k, c)| (*k, c * s)).collect::<SparseRow>());
            rhs.push(b * s);
            scale.push(s);
        }
        let n_eq = vp.eq.len();
        let m = rows.len();
        let mut gram = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..=a {
                let mut v = sparse_dot(&rows[a], &rows[b]);
                if a == b && a >= n_eq {
                    v += 1.0;
                }
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        let chol = match nalgebra::Cholesky::new(gram.clone()) {
            Some(c) => c,
            None => {
                // dependent equality rows: regularize slightly
                let reg = 1e-10 * (1.0 + gram.diagonal().max());
                for a in 0..m {
                    gram[(a, a)] += reg;
                }
                nalgebra::Cholesky::new(gram)
                    .ok_or_else(|| CertError::Numerical("constraint Gram matrix is not positive definite".into()))?
            }
        };
        Ok(AffineProjector { rows, rhs, scale, n_eq, chol })
    }

    /// Projects `(x, s)` in place; returns the scaled multipliers `(M Mᵀ)⁻¹(M z − r)`.
    fn project(&self, x: &mut [f64], s: &mut [f64]) -> DVector<f64> {
        let m = self.rows.len();
        let mut e = DVector::zeros(m);
        for a in 0..m {
            let mut v: f64 = self.rows[a].iter().map(|(k, c)| c * x[*k]).sum();
            if a >= self.n_eq {
                v += s[a - self.n_eq];
            }
            e[a] = v - self.rhs[a];
        }
        let mu = self.chol.solve(&e);
        for a in 0..m {
            for (k, c) in &self.rows[a] {
                x[*k] -= mu[a] * c;
            }
            if a >= self.n_eq {
                s[a - self.n_eq] -= mu[a];
            }
        }
        mu
    }

    fn unscale(&self, mu: &DVector<f64>, rho: f64) -> Multipliers {
        let eq = (0..self.n_eq).map(|a| rho * mu[a] * self.scale[a]).collect();
        let ineq = (self.n_eq..self.rows.len()).map(|a| (rho * mu[a] * self.scale[a]).max(0.0)).collect();
        Multipliers { eq, ineq }
    }
}

const CHECK_EVERY: usize = 10;
const BOUND_EVERY: usize = 50;
const ADAPT_EVERY: usize = 50;

fn admm(vp: &VectorProblem, settings: &SolverSettings) -> Result<RawReport> {
    let nx = vp.objective.len();
    let ns = vp.ineq.len();
    let proj = AffineProjector::new(vp)?;
    let alpha = settings.over_relaxation;
    let c = &vp.objective;
    let c_norm = inf_norm(c);

    let mut rho = settings.rho;
    let (mut y, mut t) = (vec![0.0; nx], vec![0.0; ns]);
    let (mut ux, mut us) = (vec![0.0; nx], vec![0.0; ns]);
    let (mut xt, mut st) = (vec![0.0; nx], vec![0.0; ns]);
    let (mut xh, mut sh) = (vec![0.0; nx], vec![0.0; ns]);
    let (mut y_prev, mut t_prev) = (vec![0.0; nx], vec![0.0; ns]);

    let mut best_mult = Multipliers::zeros(vp.eq.len(), ns);
    let mut best_bound = vp.dual_bound(&best_mult);
    let mut status = SolveStatus::MaxIter;
    let (mut r_p, mut r_d) = (f64::INFINITY, f64::INFINITY);
    let mut iterations = 0;
    let mut last_mu = DVector::zeros(0);

    let consider = |mult: Multipliers, best_mult: &mut Multipliers, best_bound: &mut f64| -> f64 {
        let bound = vp.dual_bound(&mult);
        if bound < *best_bound {
            *best_bound = bound;
            *best_mult = mult;
        }
        bound
    };

    for iter in 1..=settings.max_iter {
        iterations = iter;
        for k in 0..nx {
            xt[k] = y[k] - ux[k] + c[k] / rho;
        }
        for k in 0..ns {
            st[k] = t[k] - us[k];
        }
        let mu = proj.project(&mut xt, &mut st);

        y_prev.copy_from_slice(&y);
        t_prev.copy_from_slice(&t);
        for k in 0..nx {
            xh[k] = alpha * xt[k] + (1.0 - alpha) * y_prev[k];
            y[k] = xh[k] + ux[k];
        }
        for k in 0..ns {
            sh[k] = alpha * st[k] + (1.0 - alpha) * t_prev[k];
            t[k] = (sh[k] + us[k]).max(0.0);
        }
        vp.domain.project(&mut y);
        for k in 0..nx {
            ux[k] += xh[k] - y[k];
        }
        for k in 0..ns {
            us[k] += sh[k] - t[k];
        }
        if y.iter().any(|v| !v.is_finite()) || mu.iter().any(|v| !v.is_finite()) {
            status = SolveStatus::Failed;
            break;
        }

        if iter % BOUND_EVERY == 0 {
            consider(proj.unscale(&mu, rho), &mut best_mult, &mut best_bound);
        }
        if iter % CHECK_EVERY == 0 {
            r_p = inf_norm_diff(&xt, &y).max(inf_norm_diff(&st, &t));
            r_d = rho * inf_norm_diff(&y, &y_prev).max(inf_norm_diff(&t, &t_prev));
            let norm_p = inf_norm(&xt).max(inf_norm(&y)).max(inf_norm(&st)).max(inf_norm(&t));
            let norm_d = c_norm.max(rho * inf_norm(&ux).max(inf_norm(&us)));
            let eps_p = settings.abs_tol + settings.rel_tol * norm_p;
            let eps_d = settings.abs_tol + settings.rel_tol * norm_d;
            if r_p <= eps_p && r_d <= eps_d {
                consider(proj.unscale(&mu, rho), &mut best_mult, &mut best_bound);
                let primal = dot(c, &y) + vp.offset;
                if best_bound - primal <= settings.gap_tolerance(primal) {
                    status = SolveStatus::Converged;
                    last_mu = mu;
                    break;
                }
            }
            if settings.adaptive_rho && iter % ADAPT_EVERY == 0 && r_p > 0.0 && r_d > 0.0 {
                let rp_n = r_p / norm_p.max(1e-12);
                let rd_n = r_d / norm_d.max(1e-12);
                let factor = (rp_n / rd_n).sqrt();
                if !(0.2..=5.0).contains(&factor) {
                    let new_rho = (rho * factor).clamp(1e-6, 1e6);
                    let ratio = rho / new_rho;
                    ux.iter_mut().chain(us.iter_mut()).for_each(|u| *u *= ratio);
                    rho = new_rho;
                }
            }
        }
        last_mu = mu;
    }
    if status != SolveStatus::Failed && last_mu.len() == proj.rows.len() {
        consider(proj.unscale(&last_mu, rho), &mut best_mult, &mut best_bound);
    }
    if settings.polish_steps > 0 && status != SolveStatus::Failed {
        polish(vp, &mut best_mult, &mut best_bound, settings.polish_steps);
    }
    let primal_objective = dot(c, &y) + vp.offset;
    if status == SolveStatus::Failed {
        best_bound = f64::INFINITY;
    }
    Ok(RawReport {
        x: y,
        multipliers: best_mult,
        primal_objective,
        dual_bound: best_bound,
        primal_residual: r_p,
        dual_residual: r_d,
        iterations,
        status,
    })
}

/// Projected (super)gradient descent on the dual bound with backtracking.
fn polish(vp: &VectorProblem, mult: &mut Multipliers, bound: &mut f64, steps: usize) {
    let mut step = 1.0;
    for _ in 0..steps {
        let (value, xstar) = vp.dual_bound_with_maximizer(mult);
        let g_eq: Vec<f64> = vp
            .eq
            .iter()
            .zip(&vp.eq_rhs)
            .map(|(row, b)| b - row.iter().map(|(k, c)| c * xstar[*k]).sum::<f64>())
            .collect();
        let g_in: Vec<f64> = vp
            .ineq
            .iter()
            .zip(&vp.ineq_rhs)
            .map(|(row, h)| h - row.iter().map(|(k, c)| c * xstar[*k]).sum::<f64>())
            .collect();
        let mut improved = false;
        for _ in 0..40 {
            let trial = Multipliers {
                eq: mult.eq.iter().zip(&g_eq).map(|(v, g)| v - step * g).collect(),
                ineq: mult.ineq.iter().zip(&g_in).map(|(v, g)| (v - step * g).max(0.0)).collect(),
            };
            let b = vp.dual_bound(&trial);
            if b < value {
                *mult = trial;
                *bound = b.min(*bound);
                improved = true;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn projection_fixed_point_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let psd = &a * a.transpose();
        let p = psd_project(&psd).unwrap();
        assert!((&p - &psd).norm() <= 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let p = psd_project(&d).unwrap();
        assert!((p - DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))).norm() < 1e-15);
        let bad = DMatrix::from_element(2, 2, f64::NAN);
        assert!(psd_project(&bad).is_err());
    }

    #[test]
    fn projection_is_nearest_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let s = random_sym(5, &mut rng);
            let p = psd_project(&s).unwrap();
            let dist = (&s - &p).norm();
            for _ in 0..100 {
                let b = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
                let z = &b * b.transpose() * rng.gen_range(0.0..1.0);
                assert!(dist <= (&s - z).norm() + 1e-12);
            }
            let pp = psd_project(&p).unwrap();
            assert!((&pp - &p).norm() <= 1e-12);
            assert_eq!(p, p.transpose());
        }
    }

    #[test]
    fn capped_projection_respects_trace() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, -1.0]));
        let p = project_spectrum(s, Some(2.0));
        // θ = 1.5: eigenvalues (1.5, 0.5, 0)
        assert!((p[(0, 0)] - 1.5).abs() < 1e-12 && (p[(1, 1)] - 0.5).abs() < 1e-12 && p[(2, 2)].abs() < 1e-12);
    }

    fn one_by_one() -> ConicProblem {
        let mut obj = SymForm::new();
        obj.add(0, 0, 1.0);
        ConicProblem {
            dim: 1,
            objective: obj.clone(),
            offset: 0.0,
            equalities: vec![ConicRow { form: obj, rhs: 1.0 }],
            inequalities: vec![],
            trace_cap: 1.0,
        }
    }

    #[test]
    fn single_constraint_solve() {
        let r = solve(&one_by_one(), &SolverSettings::default()).unwrap();
        assert!((r.primal_objective - 1.0).abs() < 1e-6);
        assert!(r.dual_bound >= 1.0 - 1e-12);
        assert_eq!(r.status, SolveStatus::Converged);
    }

    #[test]
    fn zero_multiplier_bound() {
        let mut p = one_by_one();
        p.objective = SymForm::new();
        p.objective.add(0, 0, -2.0);
        p.offset = 0.5;
        p.trace_cap = 3.0;
        let b = rigorous_dual_bound(&p, &Multipliers::zeros(1, 0)).unwrap();
        assert_eq!(b, 0.5);
        p.objective.add(0, 0, 4.0);
        let b = rigorous_dual_bound(&p, &Multipliers::zeros(1, 0)).unwrap();
        assert!((b - (0.5 + 3.0 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn negative_multiplier_rejected() {
        let mut p = one_by_one();
        p.inequalities.push(ConicRow { form: p.objective.clone(), rhs: 2.0 });
        let m = Multipliers { eq: vec![0.0], ineq: vec![-1.0] };
        assert!(rigorous_dual_bound(&p, &m).is_err());
    }

    #[test]
    fn small_lp_through_box_domain() {
        // max x + y, x + y ≤ 1.5, box [0, 1]²
        let p = BoxProblem {
            objective: vec![1.0, 1.0],
            offset: 0.0,
            inequalities: vec![(vec![(0, 1.0), (1, 1.0)], 1.5)],
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
        };
        let r = solve_box(&p, &SolverSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Converged);
        assert!((r.dual_bound - 1.5).abs() < 1e-5, "{}", r.dual_bound);
        assert_eq!(box_dual_bound(&p, &[0.0]).unwrap(), 2.0);
    }

    #[test]
    fn solves_are_deterministic() {
        let p = BoxProblem {
            objective: vec![1.0, 2.0],
            offset: 0.0,
            inequalities: vec![(vec![(0, 1.0), (1, 3.0)], 2.0)],
            lo: vec![-1.0, -1.0],
            hi: vec![1.0, 1.0],
        };
        let a = solve_box(&p, &SolverSettings::default()).unwrap();
        let b = solve_box(&p, &SolverSettings::default()).unwrap();
        assert_eq!(a.primal, b.primal);
        assert_eq!(a.dual_bound.to_bits(), b.dual_bound.to_bits());
        assert_eq!(a.iterations, b.iterations);
    }
}
