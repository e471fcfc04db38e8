//! Triangle LP relaxation, stacked layer by layer over interval bounds.
//!
//! Each unstable unit `z = ReLU(p)` with `p ∈ [s, t]`, `s < 0 < t` becomes a
//! variable constrained by `z ≥ 0`, `z ≥ p` and the chord through `(s, 0)`
//! and `(t, t)`. Stable units are substituted: always-off units are 0 and
//! always-on units are their (affine) pre-activation.

use std::time::Instant;

use crate::bounds::{interval_propagate, LayerBounds, PerturbationRegion};
use crate::conic_solver::{box_dual_bound, solve_box, BoxProblem, SolverSettings, SparseRow};
use crate::error::{CertError, Result};
use crate::harness::{BoundResult, BoundStatus};
use crate::network::ReluNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeMode {
    AlwaysOff,
    AlwaysOn,
    Mixed,
}

/// Upper line `z ≤ slope · p + intercept` of the ReLU envelope on `[s, t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeLine {
    pub slope: f64,
    pub intercept: f64,
    pub mode: EnvelopeMode,
}

impl EnvelopeLine {
    pub fn value(&self, p: f64) -> f64 {
        self.slope * p + self.intercept
    }
}

pub fn relu_envelope(s: f64, t: f64) -> Result<EnvelopeLine> {
    if !(s <= t) {
        return Err(CertError::InvalidInterval { lo: s, hi: t });
    }
    Ok(if t <= 0.0 {
        EnvelopeLine { slope: 0.0, intercept: 0.0, mode: EnvelopeMode::AlwaysOff }
    } else if s >= 0.0 {
        EnvelopeLine { slope: 1.0, intercept: 0.0, mode: EnvelopeMode::AlwaysOn }
    } else {
        let slope = t / (t - s);
        EnvelopeLine { slope, intercept: -slope * s, mode: EnvelopeMode::Mixed }
    })
}

/// An affine expression `Σ coeff · var + constant` over LP variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub terms: SparseRow,
    pub constant: f64,
}

impl AffineExpr {
    pub fn eval(&self, vars: &[f64]) -> f64 {
        self.terms.iter().map(|(k, c)| c * vars[*k]).sum::<f64>() + self.constant
    }
}

/// How each activation `x^i_j` is represented in the LP.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Variable(usize),
    Affine(AffineExpr),
}

#[derive(Debug, Clone)]
pub struct LinearProblem {
    pub problem: BoxProblem,
    /// `index[i][j]` represents `x^i_j`.
    pub index: Vec<Vec<Activation>>,
}

impl LinearProblem {
    pub fn num_vars(&self) -> usize {
        self.problem.objective.len()
    }

    /// Variable values realized by an actual network run.
    pub fn assignment(&self, acts: &crate::network::Activations) -> Vec<f64> {
        let mut v = vec![0.0; self.num_vars()];
        for (layer, reps) in self.index.iter().enumerate() {
            for (j, rep) in reps.iter().enumerate() {
                if let Activation::Variable(k) = rep {
                    v[*k] = acts.x[layer][j];
                }
            }
        }
        v
    }

    /// Largest violation of any row or box bound at `v`.
    pub fn max_violation(&self, v: &[f64]) -> f64 {
        let rows = self.problem.inequalities.iter().map(|(row, h)| row.iter().map(|(k, c)| c * v[*k]).sum::<f64>() - h);
        let boxes = v.iter().zip(self.problem.lo.iter().zip(&self.problem.hi)).map(|(x, (l, h))| (l - x).max(x - h));
        rows.chain(boxes).fold(0.0, f64::max)
    }

    pub fn objective_at(&self, v: &[f64]) -> f64 {
        self.problem.objective.iter().zip(v).map(|(c, x)| c * x).sum::<f64>() + self.problem.offset
    }
}

fn combine(layer_row: &[f64], bias: f64, inputs: &[Activation]) -> AffineExpr {
    let mut terms: std::collections::BTreeMap<usize, f64> = Default::default();
    let mut constant = 0.0;
    for (w, act) in layer_row.iter().zip(inputs) {
        if *w == 0.0 {
            continue;
        }
        match act {
            Activation::Variable(k) => *terms.entry(*k).or_insert(0.0) += w,
            Activation::Affine(e) => {
                for (k, c) in &e.terms {
                    *terms.entry(*k).or_insert(0.0) += w * c;
                }
                constant += w * e.constant;
            }
        }
    }
    AffineExpr { terms: terms.into_iter().filter(|(_, c)| *c != 0.0).collect(), constant: constant + bias }
}

/// Builds `max objvecᵀ x^L + constant` over the stacked envelopes.
pub fn build_lp(net: &ReluNetwork, bounds: &LayerBounds, objvec: &[f64], constant: f64) -> Result<LinearProblem> {
    bounds.check_covers(net)?;
    let widths = net.widths();
    if objvec.len() != *widths.last().unwrap() {
        return Err(CertError::Dimension { expected: *widths.last().unwrap(), got: objvec.len() });
    }
    let mut lo = bounds.lower[0].clone();
    let mut hi = bounds.upper[0].clone();
    let mut rows: Vec<(SparseRow, f64)> = Vec::new();
    let mut index: Vec<Vec<Activation>> = vec![(0..widths[0]).map(Activation::Variable).collect()];

    for (i, layer) in net.layers.iter().enumerate() {
        let prev = &index[i];
        let mut reps = Vec::with_capacity(layer.rows);
        for j in 0..layer.rows {
            let (s, t) = (bounds.pre_lower[i][j], bounds.pre_upper[i][j]);
            let env = relu_envelope(s, t)?;
            let pre = combine(layer.row(j), layer.b[j], prev);
            let rep = match env.mode {
                EnvelopeMode::AlwaysOff => Activation::Affine(AffineExpr::default()),
                EnvelopeMode::AlwaysOn => Activation::Affine(pre),
                EnvelopeMode::Mixed => {
                    let z = lo.len();
                    lo.push(bounds.lower[i + 1][j]);
                    hi.push(bounds.upper[i + 1][j]);
                    // pre − z ≤ −const
                    let mut lower_row = pre.terms.clone();
                    lower_row.push((z, -1.0));
                    rows.push((lower_row, -pre.constant));
                    // z − slope·pre ≤ slope·const + intercept
                    let mut upper_row: SparseRow = pre.terms.iter().map(|(k, c)| (*k, -env.slope * c)).collect();
                    upper_row.push((z, 1.0));
                    rows.push((upper_row, env.slope * pre.constant + env.intercept));
                    Activation::Variable(z)
                }
            };
            reps.push(rep);
        }
        index.push(reps);
    }

    let nvars = lo.len();
    let mut objective = vec![0.0; nvars];
    let mut offset = constant;
    for (c, act) in objvec.iter().zip(index.last().unwrap()) {
        match act {
            Activation::Variable(k) => objective[*k] += c,
            Activation::Affine(e) => {
                for (k, a) in &e.terms {
                    objective[*k] += c * a;
                }
                offset += c * e.constant;
            }
        }
    }
    Ok(LinearProblem { problem: BoxProblem { objective, offset, inequalities: rows, lo, hi }, index })
}

pub fn lp_upper_bound(
    net: &ReluNetwork,
    region: &PerturbationRegion,
    y: usize,
    ybar: usize,
    settings: &SolverSettings,
) -> Result<BoundResult> {
    let bounds = interval_propagate(net, region)?;
    lp_upper_bound_with(net, &bounds, y, ybar, settings)
}

/// As [`lp_upper_bound`], reusing precomputed interval bounds.
pub fn lp_upper_bound_with(
    net: &ReluNetwork,
    bounds: &LayerBounds,
    y: usize,
    ybar: usize,
    settings: &SolverSettings,
) -> Result<BoundResult> {
    let start = Instant::now();
    let (objvec, constant) = net.margin_objective(y, ybar)?;
    let lp = build_lp(net, bounds, &objvec, constant)?;
    let elapsed = |s: Instant| s.elapsed().as_secs_f64() * 1e3;
    let report = match solve_box(&lp.problem, settings) {
        Ok(r) => r,
        Err(_) => return Ok(BoundResult::failed(elapsed(start))),
    };
    let status = BoundStatus::from(report.status);
    if status == BoundStatus::SolverFailed {
        return Ok(BoundResult::failed(elapsed(start)));
    }
    // the report bound is already the box-Lagrangian minimum over the
    // multipliers seen; recompute to keep this path independent of the loop
    let certified = box_dual_bound(&lp.problem, &report.multipliers.ineq)?.min(report.dual_bound);
    Ok(BoundResult {
        objective_estimate: report.primal_objective,
        certified_upper_bound: certified,
        status,
        primal_residual: report.primal_residual,
        dual_residual: report.dual_residual,
        iterations: report.iterations,
        wall_ms: elapsed(start),
    })
}
