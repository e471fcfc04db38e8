//! Semidefinite relaxation of the network constraints over the moment matrix
//! `P ≈ v vᵀ`, `v = (1, x^0, x^1, …, x^L)`.
//!
//! ReLU `z = max(p, 0)` is encoded as `z ≥ 0`, `z ≥ p` and `z² = z·p`; interval
//! bounds `l ≤ x ≤ u` as `x² ≤ (l + u) x − l u`. Biases enter through the
//! constant coordinate `P[0, 0] = 1`.
//!
//! A coordinate whose interval has zero width is pinned to its value and
//! folded into the constant coordinate. Together with its interval row and
//! `P ⪰ 0` such a coordinate is forced to `x⃗ = value · 1⃗`, so the reduced
//! problem has the same optimum while avoiding a dual that is not attained.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::bounds::{interval_propagate, LayerBounds, PerturbationRegion};
use crate::conic_solver::{rigorous_dual_bound, solve, ConicProblem, ConicRow, SolveReport, SolverSettings, SymForm};
use crate::error::{CertError, Result};
use crate::harness::{BoundResult, BoundStatus};
use crate::network::{relu, Activations, Dense, ReluNetwork};
use crate::theory::operator_norm;

/// Offsets of each layer block in the full moment matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MomentIndexMap {
    pub n: usize,
    /// `offsets[i]` is the first row of the `x^i` block; index 0 is the constant.
    pub offsets: Vec<usize>,
    pub widths: Vec<usize>,
}

impl MomentIndexMap {
    pub fn block(&self, layer: usize) -> std::ops::Range<usize> {
        self.offsets[layer]..self.offsets[layer] + self.widths[layer]
    }
}

pub fn moment_index_map(net: &ReluNetwork) -> Result<MomentIndexMap> {
    if net.depth() == 0 {
        return Err(CertError::Shape("at least one hidden layer required".into()));
    }
    let widths = net.widths();
    let mut offsets = Vec::with_capacity(widths.len());
    let mut next = 1;
    for w in &widths {
        offsets.push(next);
        next += w;
    }
    Ok(MomentIndexMap { n: next, offsets, widths })
}

/// Placement of an activation in the reduced moment matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coord {
    Free(usize),
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentLayout {
    pub dim: usize,
    pub coords: Vec<Vec<Coord>>,
}

impl MomentLayout {
    fn check_shape(&self, acts: &Activations) -> Result<()> {
        if acts.x.len() != self.coords.len() {
            return Err(CertError::Dimension { expected: self.coords.len(), got: acts.x.len() });
        }
        for (x, c) in acts.x.iter().zip(&self.coords) {
            if x.len() != c.len() {
                return Err(CertError::Dimension { expected: c.len(), got: x.len() });
            }
        }
        Ok(())
    }

    /// The reduced `v` for an actual run, and the largest mismatch on pinned coordinates.
    pub fn rank1_vector(&self, acts: &Activations) -> Result<(Vec<f64>, f64)> {
        self.check_shape(acts)?;
        let mut v = vec![0.0; self.dim];
        v[0] = 1.0;
        let mut mismatch: f64 = 0.0;
        for (x, coords) in acts.x.iter().zip(&self.coords) {
            for (val, c) in x.iter().zip(coords) {
                match c {
                    Coord::Free(i) => v[*i] = *val,
                    Coord::Fixed(f) => mismatch = mismatch.max((val - f).abs()),
                }
            }
        }
        Ok((v, mismatch))
    }

    /// Expands a reduced moment matrix to the full `1 + Σ m_i` layout.
    pub fn expand(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let n = 1 + self.coords.iter().map(Vec::len).sum::<usize>();
        // E maps reduced coordinates to full ones: P_full = E P Eᵀ
        let mut e = DMatrix::zeros(n, self.dim);
        e[(0, 0)] = 1.0;
        let mut row = 1;
        for coords in &self.coords {
            for c in coords {
                match c {
                    Coord::Free(i) => e[(row, *i)] = 1.0,
                    Coord::Fixed(v) => e[(row, 0)] = *v,
                }
                row += 1;
            }
        }
        &e * p * e.transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowKind {
    ConstantOne,
    Nonneg,
    ReluLower,
    ReluQuadratic,
    Interval,
}

/// Which constraint family, layer and unit a row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowTag {
    pub kind: RowKind,
    pub layer: usize,
    pub unit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpOptions {
    /// Interval rows on hidden layers `1..L-1`. When off, only the input layer keeps them.
    pub include_intermediate_quadratic: bool,
    /// Interval rows on the last hidden layer (requires the intermediate rows).
    pub include_last_layer_quadratic: bool,
    pub solver: SolverSettings,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            include_intermediate_quadratic: true,
            include_last_layer_quadratic: true,
            solver: SolverSettings::default(),
        }
    }
}

impl SdpOptions {
    fn interval_rows_on(&self, layer: usize, depth: usize) -> bool {
        match layer {
            0 => true,
            l if l < depth => self.include_intermediate_quadratic,
            _ => self.include_intermediate_quadratic && self.include_last_layer_quadratic,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdpRelaxation {
    pub problem: ConicProblem,
    pub layout: MomentLayout,
    pub eq_tags: Vec<RowTag>,
    pub ineq_tags: Vec<RowTag>,
}

impl SdpRelaxation {
    pub fn tag(&self, row: usize) -> RowTag {
        if row < self.eq_tags.len() {
            self.eq_tags[row]
        } else {
            self.ineq_tags[row - self.eq_tags.len()]
        }
    }
}

fn add_lin(form: &mut SymForm, c: Coord, coeff: f64) {
    match c {
        Coord::Free(i) => form.add(0, i, coeff),
        Coord::Fixed(v) => form.add(0, 0, coeff * v),
    }
}

fn add_quad(form: &mut SymForm, a: Coord, b: Coord, coeff: f64) {
    match (a, b) {
        (Coord::Free(i), Coord::Free(j)) => form.add(i, j, coeff),
        (Coord::Free(i), Coord::Fixed(v)) | (Coord::Fixed(v), Coord::Free(i)) => form.add(0, i, coeff * v),
        (Coord::Fixed(v), Coord::Fixed(w)) => form.add(0, 0, coeff * v * w),
    }
}

const CONSTANT_ROW_TOL: f64 = 1e-9;

struct RowSink {
    eq: Vec<ConicRow>,
    eq_tags: Vec<RowTag>,
    ineq: Vec<ConicRow>,
    ineq_tags: Vec<RowTag>,
}

impl RowSink {
    fn new() -> Self {
        let mut one = SymForm::new();
        one.add(0, 0, 1.0);
        RowSink {
            eq: vec![ConicRow { form: one, rhs: 1.0 }],
            eq_tags: vec![RowTag { kind: RowKind::ConstantOne, layer: 0, unit: 0 }],
            ineq: Vec::new(),
            ineq_tags: Vec::new(),
        }
    }

    /// Rows touching only `P[0, 0]` are decided here; satisfied ones are dropped.
    fn eq(&mut self, form: SymForm, rhs: f64, tag: RowTag) {
        if form.is_constant() && (form.coeff(0, 0) - rhs).abs() <= CONSTANT_ROW_TOL * (1.0 + rhs.abs()) {
            return;
        }
        self.eq.push(ConicRow { form, rhs });
        self.eq_tags.push(tag);
    }

    fn ineq(&mut self, form: SymForm, rhs: f64, tag: RowTag) {
        if form.is_constant() && form.coeff(0, 0) <= rhs + CONSTANT_ROW_TOL * (1.0 + rhs.abs()) {
            return;
        }
        self.ineq.push(ConicRow { form, rhs });
        self.ineq_tags.push(tag);
    }
}

fn layout_for(net: &ReluNetwork, bounds: &LayerBounds, opts: &SdpOptions) -> (MomentLayout, f64) {
    let depth = net.depth();
    let mut next = 1;
    let mut trace_cap = 1.0;
    let mut coords = Vec::with_capacity(depth + 1);
    for (layer, (lo, hi)) in bounds.lower.iter().zip(&bounds.upper).enumerate() {
        let pin = opts.interval_rows_on(layer, depth);
        let layer_coords = lo
            .iter()
            .zip(hi)
            .map(|(l, u)| {
                if pin && l == u {
                    Coord::Fixed(*l)
                } else {
                    trace_cap += (l * l).max(u * u);
                    next += 1;
                    Coord::Free(next - 1)
                }
            })
            .collect();
        coords.push(layer_coords);
    }
    (MomentLayout { dim: next, coords }, trace_cap)
}

/// Builds the layered SDP maximizing `objvecᵀ P[x^L] + constant`.
pub fn build_sdp(
    net: &ReluNetwork,
    bounds: &LayerBounds,
    objvec: &[f64],
    constant: f64,
    opts: &SdpOptions,
) -> Result<SdpRelaxation> {
    moment_index_map(net)?;
    bounds.check_covers(net)?;
    let depth = net.depth();
    let last_width = net.layers[depth - 1].rows;
    if objvec.len() != last_width {
        return Err(CertError::Dimension { expected: last_width, got: objvec.len() });
    }
    let (layout, trace_cap) = layout_for(net, bounds, opts);
    let coords = &layout.coords;
    let mut sink = RowSink::new();

    for (i, layer) in net.layers.iter().enumerate() {
        let (prev, cur) = (&coords[i], &coords[i + 1]);
        for (j, &z) in cur.iter().enumerate() {
            let w = layer.row(j);
            let tag = |kind| RowTag { kind, layer: i + 1, unit: j };

            let mut nonneg = SymForm::new();
            add_lin(&mut nonneg, z, -1.0);
            sink.ineq(nonneg, 0.0, tag(RowKind::Nonneg));

            let mut lower = SymForm::new();
            for (wk, xk) in w.iter().zip(prev) {
                add_lin(&mut lower, *xk, *wk);
            }
            lower.add(0, 0, layer.b[j]);
            add_lin(&mut lower, z, -1.0);
            sink.ineq(lower, 0.0, tag(RowKind::ReluLower));

            let mut quad = SymForm::new();
            add_quad(&mut quad, z, z, 1.0);
            for (wk, xk) in w.iter().zip(prev) {
                add_quad(&mut quad, *xk, z, -wk);
            }
            add_lin(&mut quad, z, -layer.b[j]);
            sink.eq(quad, 0.0, tag(RowKind::ReluQuadratic));
        }
    }

    for (layer, layer_coords) in coords.iter().enumerate() {
        if !opts.interval_rows_on(layer, depth) {
            continue;
        }
        for (j, c) in layer_coords.iter().enumerate() {
            let (l, u) = (bounds.lower[layer][j], bounds.upper[layer][j]);
            let mut row = SymForm::new();
            add_quad(&mut row, *c, *c, 1.0);
            add_lin(&mut row, *c, -(l + u));
            sink.ineq(row, -l * u, RowTag { kind: RowKind::Interval, layer, unit: j });
        }
    }

    let mut objective = SymForm::new();
    for (c, x) in objvec.iter().zip(&coords[depth]) {
        add_lin(&mut objective, *x, *c);
    }
    // constant parts of the objective live on P[0, 0] = 1
    let offset = constant + objective.coeff(0, 0);
    objective.add(0, 0, -objective.coeff(0, 0));

    let problem =
        ConicProblem { dim: layout.dim, objective, offset, equalities: sink.eq, inequalities: sink.ineq, trace_cap };
    problem.validate()?;
    Ok(SdpRelaxation { problem, layout, eq_tags: sink.eq_tags, ineq_tags: sink.ineq_tags })
}

/// The one-hidden-layer program written directly over `v = (1, x, z)`,
/// without the last-layer interval rows and without pinning.
pub fn one_layer_sdp(
    layer: &Dense,
    input_lo: &[f64],
    input_hi: &[f64],
    c: &[f64],
    constant: f64,
) -> Result<SdpRelaxation> {
    let (d, m) = (layer.cols, layer.rows);
    if input_lo.len() != d || input_hi.len() != d {
        return Err(CertError::Dimension { expected: d, got: input_lo.len() });
    }
    if c.len() != m {
        return Err(CertError::Dimension { expected: m, got: c.len() });
    }
    let xi = |k: usize| 1 + k;
    let zi = |j: usize| 1 + d + j;
    let mut sink = RowSink::new();
    let mut trace_cap = 1.0;
    for k in 0..d {
        trace_cap += (input_lo[k] * input_lo[k]).max(input_hi[k] * input_hi[k]);
    }
    for j in 0..m {
        let tag = |kind| RowTag { kind, layer: 1, unit: j };
        // P[z] ≥ 0
        let mut f = SymForm::new();
        f.add(0, zi(j), -1.0);
        sink.ineq(f, 0.0, tag(RowKind::Nonneg));
        // P[z] ≥ W P[x] + b
        let mut f = SymForm::new();
        for k in 0..d {
            f.add(0, xi(k), layer.get(j, k));
        }
        f.add(0, 0, layer.b[j]);
        f.add(0, zi(j), -1.0);
        sink.ineq(f, 0.0, tag(RowKind::ReluLower));
        // diag P[zzᵀ] = diag(W P[xzᵀ]) + b ⊙ P[z]
        let mut f = SymForm::new();
        f.add(zi(j), zi(j), 1.0);
        for k in 0..d {
            f.add(xi(k), zi(j), -layer.get(j, k));
        }
        f.add(0, zi(j), -layer.b[j]);
        sink.eq(f, 0.0, tag(RowKind::ReluQuadratic));

        let mut t = layer.b[j];
        for k in 0..d {
            let w = layer.get(j, k);
            t += if w >= 0.0 { w * input_hi[k] } else { w * input_lo[k] };
        }
        trace_cap += relu(t) * relu(t);
    }
    for k in 0..d {
        let (l, u) = (input_lo[k], input_hi[k]);
        let mut f = SymForm::new();
        f.add(xi(k), xi(k), 1.0);
        f.add(0, xi(k), -(l + u));
        sink.ineq(f, -l * u, RowTag { kind: RowKind::Interval, layer: 0, unit: k });
    }
    let mut objective = SymForm::new();
    for (j, cj) in c.iter().enumerate() {
        objective.add(0, zi(j), *cj);
    }
    let coords = vec![(0..d).map(|k| Coord::Free(xi(k))).collect(), (0..m).map(|j| Coord::Free(zi(j))).collect()];
    let problem = ConicProblem {
        dim: 1 + d + m,
        objective,
        offset: constant,
        equalities: sink.eq,
        inequalities: sink.ineq,
        trace_cap,
    };
    problem.validate()?;
    Ok(SdpRelaxation {
        problem,
        layout: MomentLayout { dim: 1 + d + m, coords },
        eq_tags: sink.eq_tags,
        ineq_tags: sink.ineq_tags,
    })
}

/// `max P[z]` for `z = ReLU(x)`, `l ≤ x ≤ u` over `v = (1, x, z)`.
pub fn scalar_relu_sdp(l: f64, u: f64) -> Result<ConicProblem> {
    if !(l <= u) {
        return Err(CertError::InvalidInterval { lo: l, hi: u });
    }
    let (x, z) = (1, 2);
    let form = |terms: &[(usize, usize, f64)]| {
        let mut f = SymForm::new();
        for &(i, j, c) in terms {
            f.add(i, j, c);
        }
        f
    };
    let problem = ConicProblem {
        dim: 3,
        objective: form(&[(0, z, 1.0)]),
        offset: 0.0,
        equalities: vec![
            ConicRow { form: form(&[(0, 0, 1.0)]), rhs: 1.0 },
            ConicRow { form: form(&[(z, z, 1.0), (x, z, -1.0)]), rhs: 0.0 },
        ],
        inequalities: vec![
            ConicRow { form: form(&[(0, z, -1.0)]), rhs: 0.0 },
            ConicRow { form: form(&[(0, x, 1.0), (0, z, -1.0)]), rhs: 0.0 },
            ConicRow { form: form(&[(x, x, 1.0), (0, x, -(l + u))]), rhs: -l * u },
        ],
        trace_cap: 1.0 + (l * l).max(u * u) + relu(l).powi(2).max(relu(u).powi(2)),
    };
    problem.validate()?;
    Ok(problem)
}

/// A solved moment matrix in the reduced layout.
#[derive(Debug, Clone)]
pub struct MomentSolution {
    pub p: DMatrix<f64>,
    pub layout: MomentLayout,
    pub objective: f64,
}

impl MomentSolution {
    pub fn from_report(relax: &SdpRelaxation, report: &SolveReport<DMatrix<f64>>) -> Self {
        MomentSolution { p: report.primal.clone(), layout: relax.layout.clone(), objective: report.primal_objective }
    }

    /// Full-layout matrix rescaled so that `P[0, 0] = 1`.
    pub fn normalized_full(&self) -> DMatrix<f64> {
        let full = self.layout.expand(&self.p);
        let s = full[(0, 0)];
        if s > 0.0 {
            full / s
        } else {
            full
        }
    }
}

pub fn solve_sdp(
    relax: &SdpRelaxation,
    settings: &SolverSettings,
) -> Result<(MomentSolution, SolveReport<DMatrix<f64>>)> {
    let report = solve(&relax.problem, settings)?;
    Ok((MomentSolution::from_report(relax, &report), report))
}

pub fn sdp_upper_bound(
    net: &ReluNetwork,
    region: &PerturbationRegion,
    y: usize,
    ybar: usize,
    opts: &SdpOptions,
) -> Result<BoundResult> {
    let bounds = interval_propagate(net, region)?;
    sdp_upper_bound_with(net, &bounds, y, ybar, opts)
}

pub fn sdp_upper_bound_with(
    net: &ReluNetwork,
    bounds: &LayerBounds,
    y: usize,
    ybar: usize,
    opts: &SdpOptions,
) -> Result<BoundResult> {
    let start = Instant::now();
    let (objvec, constant) = net.margin_objective(y, ybar)?;
    let relax = build_sdp(net, bounds, &objvec, constant, opts)?;
    let ms = |s: Instant| s.elapsed().as_secs_f64() * 1e3;
    let report = match solve(&relax.problem, &opts.solver) {
        Ok(r) if r.status != crate::conic_solver::SolveStatus::Failed => r,
        _ => return Ok(BoundResult::failed(ms(start))),
    };
    let certified = match rigorous_dual_bound(&relax.problem, &report.multipliers) {
        Ok(b) if b.is_finite() => b,
        _ => return Ok(BoundResult::failed(ms(start))),
    };
    Ok(BoundResult {
        objective_estimate: report.primal_objective,
        certified_upper_bound: certified,
        status: BoundStatus::from(report.status),
        primal_residual: report.primal_residual,
        dual_residual: report.dual_residual,
        iterations: report.iterations,
        wall_ms: ms(start),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rank1Report {
    pub max_violation: f64,
    pub worst_row: Option<RowTag>,
    /// `tr(v vᵀ) − T` when positive.
    pub trace_excess: f64,
    pub pinned_mismatch: f64,
}

impl Rank1Report {
    pub fn worst(&self) -> f64 {
        self.max_violation.max(self.trace_excess).max(self.pinned_mismatch)
    }
}

/// Evaluates every row of the relaxation at `P = v vᵀ` for an actual run.
pub fn check_rank1_feasibility(relax: &SdpRelaxation, acts: &Activations) -> Result<Rank1Report> {
    let (v, pinned_mismatch) = relax.layout.rank1_vector(acts)?;
    let (max_violation, worst) = relax.problem.max_violation_rank1(&v);
    let trace: f64 = v.iter().map(|x| x * x).sum();
    Ok(Rank1Report {
        max_violation,
        worst_row: worst.map(|k| relax.tag(k)),
        trace_excess: (trace - relax.problem.trace_cap).max(0.0),
        pinned_mismatch,
    })
}

/// Quantities of the spectral chain bounding a one-hidden-layer SDP value.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    pub pz_norm_sq: f64,
    pub trace_zz: f64,
    pub c_dot_pz: f64,
    pub c_norm: f64,
    pub w_opnorm: f64,
    pub interval_sum: f64,
}

impl LemmaReport {
    /// `‖P[z]‖² − tr P[zzᵀ]`, must be ≤ 0.
    pub fn schur_slack(&self) -> f64 {
        self.pz_norm_sq - self.trace_zz
    }

    /// `cᵀP[z] − ‖c‖·√tr P[zzᵀ]`, must be ≤ 0.
    pub fn holder_slack(&self) -> f64 {
        self.c_dot_pz - self.c_norm * self.trace_zz.max(0.0).sqrt()
    }

    /// `tr P[zzᵀ] − ‖W‖₂² Σ max(l², u²)`, must be ≤ 0.
    pub fn spectral_slack(&self) -> f64 {
        self.trace_zz - self.w_opnorm * self.w_opnorm * self.interval_sum
    }

    pub fn holds(&self, tol_schur: f64, tol_holder: f64, tol_spectral: f64) -> bool {
        self.schur_slack() <= tol_schur && self.holder_slack() <= tol_holder && self.spectral_slack() <= tol_spectral
    }
}

/// Evaluates the chain on a one-hidden-layer moment solution. The matrix is
/// rescaled so that `P[0, 0] = 1` first, which preserves `P ⪰ 0`.
pub fn lemma_chain_check(sol: &MomentSolution, w: &Dense, c: &[f64], interval_squares: &[f64]) -> Result<LemmaReport> {
    if sol.layout.coords.len() != 2 {
        return Err(CertError::Shape("lemma chain applies to one hidden layer".into()));
    }
    let (d, m) = (sol.layout.coords[0].len(), sol.layout.coords[1].len());
    if w.rows != m || w.cols != d || c.len() != m || interval_squares.len() != d {
        return Err(CertError::Shape("lemma chain inputs do not match the solution".into()));
    }
    let p = sol.normalized_full();
    let z0 = 1 + d;
    let pz: Vec<f64> = (0..m).map(|j| p[(0, z0 + j)]).collect();
    Ok(LemmaReport {
        pz_norm_sq: pz.iter().map(|v| v * v).sum(),
        trace_zz: (0..m).map(|j| p[(z0 + j, z0 + j)]).sum(),
        c_dot_pz: c.iter().zip(&pz).map(|(a, b)| a * b).sum(),
        c_norm: c.iter().map(|v| v * v).sum::<f64>().sqrt(),
        w_opnorm: operator_norm(&w.to_matrix(), 1e-12),
        interval_sum: interval_squares.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn index_map_counts() {
        let net = ReluNetwork::random(2, &[2], 2, 0.0, 0);
        let map = moment_index_map(&net).unwrap();
        assert_eq!(map.n, 5);
        assert_eq!(map.block(0), 1..3);
        assert_eq!(map.block(1), 3..5);
        let big = ReluNetwork::new(
            vec![
                Dense::new(200, 784, vec![0.0; 200 * 784], vec![0.0; 200]).unwrap(),
                Dense::new(100, 200, vec![0.0; 100 * 200], vec![0.0; 100]).unwrap(),
                Dense::new(50, 100, vec![0.0; 5000], vec![0.0; 50]).unwrap(),
            ],
            Dense::new(10, 50, vec![0.0; 500], vec![0.0; 10]).unwrap(),
        )
        .unwrap();
        assert_eq!(moment_index_map(&big).unwrap().n, 1135);
        let flat = ReluNetwork::new(vec![], Dense::new(2, 1, vec![1.0, 0.0], vec![0.0, 0.0]).unwrap()).unwrap();
        assert!(moment_index_map(&flat).is_err());
    }

    #[test]
    fn scalar_problem_validation() {
        assert!(scalar_relu_sdp(1.0, 0.0).is_err());
        let p = scalar_relu_sdp(-1.0, 1.0).unwrap();
        assert_eq!(p.dim, 3);
        assert_eq!(p.trace_cap, 3.0);
    }

    // (is equality, terms, rhs)
    type CanonicalRow = (bool, Vec<(usize, usize, f64)>, f64);

    fn canonical_rows(r: &SdpRelaxation) -> Vec<CanonicalRow> {
        let mut rows: Vec<_> = r
            .problem
            .equalities
            .iter()
            .map(|row| (true, row.form.terms().collect::<Vec<_>>(), row.rhs))
            .chain(r.problem.inequalities.iter().map(|row| (false, row.form.terms().collect(), row.rhs)))
            .collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows
    }

    #[test]
    fn layered_builder_reduces_to_one_layer_program() {
        for seed in 0..10 {
            let net = ReluNetwork::random(3, &[4], 3, 0.5, seed);
            let region = PerturbationRegion::new(vec![0.2, -0.1, 0.3], 0.25).unwrap();
            let bounds = interval_propagate(&net, &region).unwrap();
            let (c, c0) = net.margin_objective(2, 0).unwrap();
            let opts = SdpOptions { include_last_layer_quadratic: false, ..Default::default() };
            let layered = build_sdp(&net, &bounds, &c, c0, &opts).unwrap();
            let direct = one_layer_sdp(&net.layers[0], &bounds.lower[0], &bounds.upper[0], &c, c0).unwrap();
            let (a, b) = (canonical_rows(&layered), canonical_rows(&direct));
            assert_eq!(a.len(), b.len());
            for (ra, rb) in a.iter().zip(&b) {
                assert_eq!(ra.0, rb.0);
                assert_eq!(ra.1.len(), rb.1.len());
                for (ta, tb) in ra.1.iter().zip(&rb.1) {
                    assert_eq!((ta.0, ta.1), (tb.0, tb.1));
                    assert!((ta.2 - tb.2).abs() <= 1e-12);
                }
                assert!((ra.2 - rb.2).abs() <= 1e-12);
            }
            assert_eq!(layered.problem.objective, direct.problem.objective);
            assert!((layered.problem.trace_cap - direct.problem.trace_cap).abs() <= 1e-12);
        }
    }

    #[test]
    fn rank1_runs_are_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..8 {
            let net = ReluNetwork::random(3, &[4, 3], 3, 0.4, seed);
            let region = PerturbationRegion::new(vec![0.5, -0.2, 0.1], 0.3).unwrap();
            let bounds = interval_propagate(&net, &region).unwrap();
            let (c, c0) = net.margin_objective(1, 0).unwrap();
            let relax = build_sdp(&net, &bounds, &c, c0, &SdpOptions::default()).unwrap();
            let centre = check_rank1_feasibility(&relax, &net.forward(&region.center).unwrap()).unwrap();
            assert!(centre.worst() <= 1e-9, "{centre:?}");
            for _ in 0..100 {
                let x: Vec<f64> = region.center.iter().map(|v| v + rng.gen_range(-0.3..=0.3)).collect();
                let rep = check_rank1_feasibility(&relax, &net.forward(&x).unwrap()).unwrap();
                assert!(rep.worst() <= 1e-9, "{rep:?}");
            }
        }
    }

    #[test]
    fn outside_point_violates_input_row() {
        let net = ReluNetwork::random(2, &[3], 2, 0.2, 5);
        let region = PerturbationRegion::new(vec![0.0, 0.0], 0.1).unwrap();
        let bounds = interval_propagate(&net, &region).unwrap();
        let (c, c0) = net.margin_objective(1, 0).unwrap();
        let relax = build_sdp(&net, &bounds, &c, c0, &SdpOptions::default()).unwrap();
        let rep = check_rank1_feasibility(&relax, &net.forward(&[0.5, 0.0]).unwrap()).unwrap();
        assert!(rep.max_violation > 0.1);
        assert_eq!(rep.worst_row.map(|t| (t.kind, t.layer)), Some((RowKind::Interval, 0)));
    }

    #[test]
    fn zero_radius_pins_everything() {
        let net = ReluNetwork::random(2, &[3, 2], 3, 0.3, 6);
        let x = vec![0.4, -0.3];
        let bounds = interval_propagate(&net, &PerturbationRegion::new(x.clone(), 0.0).unwrap()).unwrap();
        let (c, c0) = net.margin_objective(2, 1).unwrap();
        let relax = build_sdp(&net, &bounds, &c, c0, &SdpOptions::default()).unwrap();
        assert_eq!(relax.problem.dim, 1);
        let m = net.class_margin(&x, 2, 1).unwrap();
        assert!((relax.problem.offset - m).abs() < 1e-12);
    }

    #[test]
    fn ablation_drops_hidden_interval_rows() {
        let net = ReluNetwork::random(2, &[3, 3, 2], 2, 0.3, 7);
        let bounds = interval_propagate(&net, &PerturbationRegion::new(vec![0.1, 0.2], 0.2).unwrap()).unwrap();
        let (c, c0) = net.margin_objective(1, 0).unwrap();
        let off = SdpOptions { include_intermediate_quadratic: false, ..Default::default() };
        let relax = build_sdp(&net, &bounds, &c, c0, &off).unwrap();
        assert!(relax.ineq_tags.iter().filter(|t| t.kind == RowKind::Interval).all(|t| t.layer == 0));
    }

    fn solve_value(p: &ConicProblem) -> (f64, f64) {
        let r = solve(p, &SolverSettings::default()).unwrap();
        (r.primal_objective, rigorous_dual_bound(p, &r.multipliers).unwrap())
    }

    #[test]
    fn scalar_relu_values() {
        let (v, b) = solve_value(&scalar_relu_sdp(0.5, 0.5).unwrap());
        assert!((v - 0.5).abs() < 1e-5 && (0.5 - 1e-9..0.5 + 1e-4).contains(&b));
        let (v, b) = solve_value(&scalar_relu_sdp(-3.0, -1.0).unwrap());
        // the relaxation is loose here: with x⃗ = a·1⃗ + b·e⃗ the rows give
        // P[z] ≤ a/2 + √(−4a − 3)/2, maximized at a = −7/4
        assert!((v - 0.125).abs() < 1e-5 && (0.125 - 1e-9..0.125 + 1e-4).contains(&b));
        // single unit: the envelope is tighter
        let env = crate::lp_relax::relu_envelope(-1.0, 1.0).unwrap();
        let (v, b) = solve_value(&scalar_relu_sdp(-1.0, 1.0).unwrap());
        assert!(b >= env.value(1.0) - 1e-6 && v >= 1.0 - 1e-5);
    }

    #[test]
    fn zero_radius_bound_is_clean_margin() {
        for seed in 0..5 {
            let net = ReluNetwork::random(3, &[3, 2], 3, 0.5, seed);
            let x = vec![0.2, -0.5, 0.4];
            let region = PerturbationRegion::new(x.clone(), 0.0).unwrap();
            let r = sdp_upper_bound(&net, &region, 1, 0, &SdpOptions::default()).unwrap();
            let m = net.class_margin(&x, 1, 0).unwrap();
            assert!((r.certified_upper_bound - m).abs() <= 1e-5 * m.abs().max(1.0), "{r:?} vs {m}");
        }
    }

    #[test]
    fn bound_grows_with_radius() {
        let net = ReluNetwork::random(2, &[3, 3], 2, 0.3, 12);
        let mut last = f64::NEG_INFINITY;
        for eps in [0.0, 0.05, 0.1, 0.2] {
            let region = PerturbationRegion::new(vec![0.3, 0.1], eps).unwrap();
            let r = sdp_upper_bound(&net, &region, 1, 0, &SdpOptions::default()).unwrap();
            assert!(r.certified_upper_bound >= last - 1e-5);
            last = r.certified_upper_bound;
        }
    }

    #[test]
    fn lemma_chain_on_solved_and_rank1() {
        let w = crate::theory::random_sign_matrix(4, 4, 1);
        let c = vec![1.0; 4];
        let net = crate::theory::one_layer_instance(&w, &c).unwrap();
        let region = PerturbationRegion::new(vec![0.0; 4], 1.0).unwrap();
        let bounds = interval_propagate(&net, &region).unwrap();
        let (obj, c0) = net.margin_objective(1, 0).unwrap();
        let relax = build_sdp(&net, &bounds, &obj, c0, &SdpOptions::default()).unwrap();
        let (sol, _) = solve_sdp(&relax, &SolverSettings::default()).unwrap();
        let rep = lemma_chain_check(&sol, &net.layers[0], &c, &[1.0; 4]).unwrap();
        assert!(rep.holds(1e-7, 1e-7, 1e-6), "{rep:?}");
        assert!(rep.c_dot_pz <= crate::theory::spectral_sdp_bound(&w, &c, 4) + 1e-6);

        let acts = net.forward(&[0.3, -0.2, 0.9, -1.0]).unwrap();
        let (v, _) = relax.layout.rank1_vector(&acts).unwrap();
        let v = nalgebra::DVector::from_vec(v);
        let rank1 = MomentSolution { p: &v * v.transpose(), layout: relax.layout.clone(), objective: 0.0 };
        let rep = lemma_chain_check(&rank1, &net.layers[0], &c, &[1.0; 4]).unwrap();
        assert!(rep.schur_slack().abs() < 1e-12 && rep.holds(0.0, 1e-12, 0.0));
        let rep = lemma_chain_check(&rank1, &net.layers[0], &[0.0; 4], &[1.0; 4]).unwrap();
        assert_eq!(rep.c_dot_pz, 0.0);
    }

    #[test]
    fn misclassified_center_is_not_certified() {
        let net = ReluNetwork::random(2, &[3], 3, 0.5, 3);
        let x = vec![0.4, 0.1];
        let top = crate::network::argmax(&net.forward(&x).unwrap().logits);
        let other = (top + 1) % 3;
        let region = PerturbationRegion::new(x, 0.05).unwrap();
        let r = sdp_upper_bound(&net, &region, top, other, &SdpOptions::default()).unwrap();
        assert!(r.certified_upper_bound >= 0.0);
    }
}
