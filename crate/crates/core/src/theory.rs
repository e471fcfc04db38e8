//! Analytic LP and SDP bounds for random one-layer networks, the experiment
//! comparing them, and the exact worst-case margin by activation-pattern
//! enumeration.

use std::io::Write;

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{interval_propagate, PerturbationRegion};
use crate::conic_solver::SolverSettings;
use crate::error::{CertError, Result};
use crate::harness::BoundStatus;
use crate::lp_relax::lp_upper_bound;
use crate::network::{Dense, ReluNetwork};
use crate::sdp_relax::{sdp_upper_bound, SdpOptions};

/// Hidden-unit budget for [`exact_margin_bruteforce`].
pub const BRUTEFORCE_UNIT_LIMIT: usize = 16;

/// Largest `m = d` accepted by [`gap_experiment`].
pub const GAP_SIZE_LIMIT: usize = 24;

pub fn random_sign_matrix(m: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(m, d, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 })
}

/// Largest singular value by power iteration on `MᵀM`, stopped once the
/// estimate changes by less than `tol` relative.
pub fn operator_norm(m: &DMatrix<f64>, tol: f64) -> f64 {
    if m.is_empty() || m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let gram = m.transpose() * m;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = DVector::from_fn(gram.nrows(), |_, _| rng.gen_range(0.5..1.5));
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..100_000 {
        let w = &gram * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        v = w / norm;
        if (next - estimate).abs() <= tol * next.abs() {
            estimate = next;
            break;
        }
        estimate = next;
    }
    estimate.max(0.0).sqrt()
}

/// `½ Σ |W_ij|`, the LP value of the feasible point `z_i = ½‖W_i‖₁` at `x = 0`.
pub fn lp_l1_lower_bound(w: &DMatrix<f64>) -> f64 {
    0.5 * w.iter().map(|v| v.abs()).sum::<f64>()
}

/// `√d ‖W‖₂ ‖c‖₂`, bounding the one-layer SDP over the unit box.
pub fn spectral_sdp_bound(w: &DMatrix<f64>, c: &[f64], d: usize) -> f64 {
    let c_norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    (d as f64).sqrt() * operator_norm(w, 1e-12) * c_norm
}

/// One hidden layer with weights `W` and zero bias; the margin of class 1
/// over class 0 is `cᵀz`.
pub fn one_layer_instance(w: &DMatrix<f64>, c: &[f64]) -> Result<ReluNetwork> {
    let (m, d) = w.shape();
    let hidden = Dense::new(m, d, (0..m).flat_map(|i| (0..d).map(move |j| w[(i, j)])).collect(), vec![0.0; m])?;
    let mut out = vec![0.0; m];
    out.extend_from_slice(c);
    ReluNetwork::new(vec![hidden], Dense::new(2, m, out, vec![0.0; 2])?)
}

// An affine function of the input: coefficients and constant.
type Affine = (Vec<f64>, f64);

/// Exact `max_{x ∈ region} f(x)_y − f(x)_ybar` by enumerating the sign
/// patterns of units whose interval straddles zero and solving one LP per
/// pattern. The returned value is the margin recomputed by a forward pass at
/// the best LP vertex.
pub fn exact_margin_bruteforce(net: &ReluNetwork, region: &PerturbationRegion, y: usize, ybar: usize) -> Result<f64> {
    net.check_classes(y, ybar)?;
    let units = net.hidden_units();
    if units > BRUTEFORCE_UNIT_LIMIT {
        return Err(CertError::Budget { what: "hidden unit count", size: units, limit: BRUTEFORCE_UNIT_LIMIT });
    }
    let bounds = interval_propagate(net, region)?;
    let d = net.input_dim();
    let unstable: Vec<(usize, usize)> = bounds
        .pre_lower
        .iter()
        .zip(&bounds.pre_upper)
        .enumerate()
        .flat_map(|(i, (lo, hi))| {
            lo.iter().zip(hi).enumerate().filter(|(_, (l, u))| **l < 0.0 && **u > 0.0).map(move |(j, _)| (i, j))
        })
        .collect();
    let (lo, hi) = (region.lower(), region.upper());

    let mut best = f64::NEG_INFINITY;
    for pattern in 0u32..(1u32 << unstable.len()) {
        let is_on = |layer: usize, unit: usize| -> bool {
            match unstable.iter().position(|&(i, j)| i == layer && j == unit) {
                Some(k) => pattern >> k & 1 == 1,
                None => bounds.pre_lower[layer][unit] >= 0.0,
            }
        };
        let mut current: Vec<Affine> = (0..d)
            .map(|k| {
                let mut e = vec![0.0; d];
                e[k] = 1.0;
                (e, 0.0)
            })
            .collect();
        // sign constraints `coeffsᵀx ≥ rhs` (on) or `≤ rhs` (off)
        let mut constraints: Vec<(Vec<f64>, ComparisonOp, f64)> = Vec::new();
        for (i, layer) in net.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(layer.rows);
            for j in 0..layer.rows {
                let pre = affine_row(layer, j, &current, d);
                if is_on(i, j) {
                    constraints.push((pre.0.clone(), ComparisonOp::Ge, -pre.1));
                    next.push(pre);
                } else {
                    constraints.push((pre.0.clone(), ComparisonOp::Le, -pre.1));
                    next.push((vec![0.0; d], 0.0));
                }
            }
            current = next;
        }
        let ly = affine_row(&net.output, y, &current, d);
        let lb = affine_row(&net.output, ybar, &current, d);
        let mut lp = Problem::new(OptimizationDirection::Maximize);
        let vars: Vec<_> = (0..d).map(|k| lp.add_var(ly.0[k] - lb.0[k], (lo[k], hi[k]))).collect();
        let mut feasible = true;
        for (coeffs, op, rhs) in constraints {
            let terms: Vec<_> = vars.iter().zip(&coeffs).filter(|(_, c)| **c != 0.0).map(|(v, c)| (*v, *c)).collect();
            if terms.is_empty() {
                feasible &= match op {
                    ComparisonOp::Ge => 0.0 >= rhs,
                    _ => 0.0 <= rhs,
                };
                continue;
            }
            lp.add_constraint(terms.as_slice(), op, rhs);
        }
        if !feasible {
            continue;
        }
        let Ok(sol) = lp.solve() else { continue };
        let mut x: Vec<f64> = vars.iter().map(|v| *sol.var_value(*v)).collect();
        region.project(&mut x);
        best = best.max(net.class_margin(&x, y, ybar)?);
    }
    if best == f64::NEG_INFINITY {
        // every pattern was rejected numerically; the center is always feasible
        best = net.class_margin(&region.center, y, ybar)?;
    }
    Ok(best)
}

fn affine_row(layer: &Dense, j: usize, inputs: &[Affine], d: usize) -> Affine {
    let mut coeffs = vec![0.0; d];
    let mut constant = layer.b[j];
    for (w, (c, k)) in layer.row(j).iter().zip(inputs) {
        for (acc, ci) in coeffs.iter_mut().zip(c) {
            *acc += w * ci;
        }
        constant += w * k;
    }
    (coeffs, constant)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub m: usize,
    pub d: usize,
    pub trial: usize,
    pub seed: u64,
    pub f_lp: f64,
    pub lp_lower_bound: f64,
    pub f_sdp: f64,
    pub spectral_bound: f64,
    pub normalized_ratio: f64,
    pub status: BoundStatus,
}

impl GapRow {
    pub fn solved(&self) -> bool {
        self.status != BoundStatus::SolverFailed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapTable {
    pub rows: Vec<GapRow>,
}

impl GapTable {
    /// Largest normalized ratio `f_SDP / (m√d + d√m)` over solved rows.
    pub fn gamma_hat(&self) -> f64 {
        self.rows.iter().filter(|r| r.solved()).map(|r| r.normalized_ratio).fold(f64::NAN, f64::max)
    }

    /// Rows breaking `f_LP ≥ ½‖W‖₁ − tol_lp` or `f_SDP ≤ √d‖W‖₂‖c‖₂ + tol_sdp`.
    pub fn violations(&self, tol_lp: f64, tol_sdp: f64) -> Vec<&GapRow> {
        self.rows
            .iter()
            .filter(|r| !r.solved() || r.f_lp < r.lp_lower_bound - tol_lp || r.f_sdp > r.spectral_bound + tol_sdp)
            .collect()
    }

    /// Trial-averaged `f_SDP / f_LP` per size, in size order.
    pub fn mean_ratio_by_size(&self) -> Vec<(usize, f64)> {
        let mut sizes: Vec<usize> = self.rows.iter().map(|r| r.m).collect();
        sizes.dedup();
        sizes
            .into_iter()
            .map(|m| {
                let ratios: Vec<f64> =
                    self.rows.iter().filter(|r| r.m == m && r.solved()).map(|r| r.f_sdp / r.f_lp).collect();
                (m, ratios.iter().sum::<f64>() / ratios.len() as f64)
            })
            .collect()
    }

    /// Trial-averaged normalized ratio per size, in size order.
    pub fn mean_normalized_by_size(&self) -> Vec<(usize, f64)> {
        let mut sizes: Vec<usize> = self.rows.iter().map(|r| r.m).collect();
        sizes.dedup();
        sizes
            .into_iter()
            .map(|m| {
                let vals: Vec<f64> =
                    self.rows.iter().filter(|r| r.m == m && r.solved()).map(|r| r.normalized_ratio).collect();
                (m, vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        for row in &self.rows {
            writer.serialize(row).map_err(|e| CertError::Config(e.to_string()))?;
        }
        if self.rows.is_empty() {
            writer
                .write_record([
                    "m",
                    "d",
                    "trial",
                    "seed",
                    "f_lp",
                    "lp_lower_bound",
                    "f_sdp",
                    "spectral_bound",
                    "normalized_ratio",
                    "status",
                ])
                .map_err(|e| CertError::Config(e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Seed of trial `trial` at size `m`, derived from the experiment seed.
pub fn trial_seed(seed: u64, m: usize, trial: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((m as u64) << 32) ^ trial as u64
}

/// Random `±1` one-layer networks with `m = d`, input box `[-1, 1]^d` and
/// `c = 1`; each trial solves the LP and SDP relaxations.
pub fn gap_experiment(sizes: &[usize], trials: usize, seed: u64, solver: &SolverSettings) -> Result<GapTable> {
    if sizes.is_empty() || trials == 0 || sizes.contains(&0) {
        return Err(CertError::Config("sizes and trials must be positive".into()));
    }
    if let Some(&big) = sizes.iter().find(|s| **s > GAP_SIZE_LIMIT) {
        return Err(CertError::Budget { what: "network size m = d", size: big, limit: GAP_SIZE_LIMIT });
    }
    let jobs: Vec<(usize, usize)> = sizes.iter().flat_map(|m| (0..trials).map(move |t| (*m, t))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(m, trial)| gap_trial(m, trial, trial_seed(seed, m, trial), solver))
        .collect::<Result<Vec<_>>>()?;
    Ok(GapTable { rows })
}

fn gap_trial(m: usize, trial: usize, seed: u64, solver: &SolverSettings) -> Result<GapRow> {
    let d = m;
    let w = random_sign_matrix(m, d, seed);
    let c = vec![1.0; m];
    let net = one_layer_instance(&w, &c)?;
    let region = PerturbationRegion::new(vec![0.0; d], 1.0)?;
    let lp = lp_upper_bound(&net, &region, 1, 0, solver)?;
    let opts = SdpOptions { solver: solver.clone(), ..Default::default() };
    let sdp = sdp_upper_bound(&net, &region, 1, 0, &opts)?;
    let status = match (lp.status, sdp.status) {
        (BoundStatus::SolverFailed, _) | (_, BoundStatus::SolverFailed) => BoundStatus::SolverFailed,
        (BoundStatus::MaxIter, _) | (_, BoundStatus::MaxIter) => BoundStatus::MaxIter,
        _ => BoundStatus::Converged,
    };
    let (mf, df) = (m as f64, d as f64);
    Ok(GapRow {
        m,
        d,
        trial,
        seed,
        f_lp: lp.certified_upper_bound,
        lp_lower_bound: lp_l1_lower_bound(&w),
        f_sdp: sdp.certified_upper_bound,
        spectral_bound: spectral_sdp_bound(&w, &c, d),
        normalized_ratio: sdp.certified_upper_bound / (mf * df.sqrt() + df * mf.sqrt()),
        status,
    })
}

/// `z₁ = ReLU(x₁ + x₂)`, `z₂ = ReLU(x₁ − x₂)` with margin `z₁ + z₂`.
pub fn two_unit_example() -> ReluNetwork {
    let w = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
    one_layer_instance(&w, &[1.0, 1.0]).expect("fixed shapes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sign_matrix_range_and_determinism() {
        let a = random_sign_matrix(16, 16, 3);
        assert!(a.iter().all(|v| *v == 1.0 || *v == -1.0));
        assert_eq!(a, random_sign_matrix(16, 16, 3));
        let mean: f64 = (0..10).map(|s| random_sign_matrix(32, 32, s).mean()).sum::<f64>() / 10.0;
        assert!(mean.abs() <= 4.0 / 32.0);
    }

    #[test]
    fn operator_norm_examples() {
        assert!((operator_norm(&DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 4.0]), 1e-12) - 4.0).abs() < 1e-9);
        assert!((operator_norm(&DMatrix::identity(5, 5), 1e-12) - 1.0).abs() < 1e-12);
        assert_eq!(operator_norm(&DMatrix::zeros(3, 2), 1e-12), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let m = DMatrix::from_fn(7, 5, |_, _| rng.gen_range(-1.0..1.0));
            let oracle = m.clone().svd(false, false).singular_values.max();
            assert!((operator_norm(&m, 1e-12) - oracle).abs() <= 1e-8 * oracle);
        }
    }

    #[test]
    fn analytic_bounds() {
        assert_eq!(lp_l1_lower_bound(&random_sign_matrix(5, 8, 1)), 20.0);
        assert_eq!(lp_l1_lower_bound(&DMatrix::zeros(3, 3)), 0.0);
        assert!((spectral_sdp_bound(&DMatrix::identity(4, 4), &[1.0; 4], 4) - 4.0).abs() < 1e-9);
        let w = random_sign_matrix(10, 10, 2);
        let expect = 10f64.sqrt() * operator_norm(&w, 1e-12) * 10f64.sqrt();
        assert!((spectral_sdp_bound(&w, &[1.0; 10], 10) - expect).abs() < 1e-9);
    }

    #[test]
    fn bruteforce_examples() {
        let net = two_unit_example();
        for eps in [0.5, 1.0, 2.0] {
            let region = PerturbationRegion::new(vec![0.0, 0.0], eps).unwrap();
            let exact = exact_margin_bruteforce(&net, &region, 1, 0).unwrap();
            assert!((exact - 2.0 * eps).abs() < 1e-9);
            // fine grid never exceeds it and gets close
            let mut grid = f64::NEG_INFINITY;
            for i in 0..=100 {
                for j in 0..=100 {
                    let x = [-eps + 0.02 * eps * i as f64, -eps + 0.02 * eps * j as f64];
                    grid = grid.max(net.class_margin(&x, 1, 0).unwrap());
                }
            }
            assert!(grid <= exact + 1e-12 && grid >= exact - 1e-9);
        }
        let net = ReluNetwork::random(3, &[3, 2], 3, 0.5, 4);
        let x = vec![0.1, 0.2, -0.3];
        let at_zero = exact_margin_bruteforce(&net, &PerturbationRegion::new(x.clone(), 0.0).unwrap(), 2, 0).unwrap();
        assert_eq!(at_zero, net.class_margin(&x, 2, 0).unwrap());
    }

    #[test]
    fn bruteforce_dominates_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for seed in 0..10 {
            let net = ReluNetwork::random(2, &[4, 3], 3, 0.5, seed);
            let region = PerturbationRegion::new(vec![0.2, -0.1], 0.3).unwrap();
            let exact = exact_margin_bruteforce(&net, &region, 1, 0).unwrap();
            for _ in 0..2000 {
                let x: Vec<f64> = region.center.iter().map(|c| c + rng.gen_range(-0.3..=0.3)).collect();
                assert!(net.class_margin(&x, 1, 0).unwrap() <= exact + 1e-9);
            }
        }
    }

    #[test]
    fn bruteforce_budget() {
        let net = ReluNetwork::random(2, &[17], 2, 0.0, 0);
        let region = PerturbationRegion::new(vec![0.0, 0.0], 0.1).unwrap();
        assert!(matches!(exact_margin_bruteforce(&net, &region, 1, 0), Err(CertError::Budget { .. })));
    }

    #[test]
    fn small_gap_experiment() {
        let table = gap_experiment(&[4], 3, 11, &SolverSettings::default()).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert!(table.violations(1e-6, 1e-5).is_empty());
        assert!(table.rows.iter().all(|r| r.f_lp >= 8.0 - 1e-6));
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("m,d,trial,seed,f_lp,lp_lower_bound,f_sdp,spectral_bound,normalized_ratio,status\n"));
        assert!(gap_experiment(&[0], 1, 0, &SolverSettings::default()).is_err());
        assert!(matches!(gap_experiment(&[25], 1, 0, &SolverSettings::default()), Err(CertError::Budget { .. })));
    }
}
