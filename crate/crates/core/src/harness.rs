//! Per-point certification over all incorrect classes, dataset batches and
//! report records.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackResult, PgdSettings};
use crate::bounds::{interval_propagate, LayerBounds, PerturbationRegion};
use crate::conic_solver::{SolveStatus, SolverSettings};
use crate::error::{CertError, Result};
use crate::lp_relax::lp_upper_bound_with;
use crate::network::ReluNetwork;
use crate::sdp_relax::{sdp_upper_bound_with, SdpOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundStatus {
    Converged,
    MaxIter,
    SolverFailed,
}

impl From<SolveStatus> for BoundStatus {
    fn from(s: SolveStatus) -> Self {
        match s {
            SolveStatus::Converged => BoundStatus::Converged,
            SolveStatus::MaxIter => BoundStatus::MaxIter,
            SolveStatus::Failed => BoundStatus::SolverFailed,
        }
    }
}

/// Solver estimate of a relaxation optimum together with a rigorous upper
/// bound on the worst-case margin.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundResult {
    pub objective_estimate: f64,
    /// Valid for every point of the perturbation region; `+∞` when the solve failed.
    pub certified_upper_bound: f64,
    pub status: BoundStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub wall_ms: f64,
}

impl BoundResult {
    pub fn failed(wall_ms: f64) -> Self {
        BoundResult {
            objective_estimate: f64::NAN,
            certified_upper_bound: f64::INFINITY,
            status: BoundStatus::SolverFailed,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            iterations: 0,
            wall_ms,
        }
    }

    /// A bound known in closed form, with no solve.
    pub fn exact(value: f64) -> Self {
        BoundResult {
            objective_estimate: value,
            certified_upper_bound: value,
            status: BoundStatus::Converged,
            primal_residual: 0.0,
            dual_residual: 0.0,
            iterations: 0,
            wall_ms: 0.0,
        }
    }
}

/// Relaxation used for the per-class bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sdp,
    Lp,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Sdp => "sdp",
            Method::Lp => "lp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyOptions {
    pub method: Method,
    pub sdp: SdpOptions,
    /// Companion PGD statistic; skipped when `None`.
    pub pgd: Option<PgdSettings>,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions { method: Method::Sdp, sdp: SdpOptions::default(), pgd: Some(PgdSettings::default()) }
    }
}

impl CertifyOptions {
    pub fn solver(&self) -> &SolverSettings {
        &self.sdp.solver
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointVerdict {
    pub id: usize,
    pub label: usize,
    /// Bound per incorrect class; empty when the clean point is already misclassified.
    pub bounds: BTreeMap<usize, BoundResult>,
    pub certified: bool,
    pub pgd: Option<AttackResult>,
    pub error: Option<String>,
}

impl PointVerdict {
    pub fn pgd_margin(&self) -> Option<f64> {
        self.pgd.as_ref().map(|a| a.closest_margin)
    }

    pub fn pgd_success(&self) -> bool {
        self.pgd.as_ref().is_some_and(|a| a.success)
    }

    fn failed(id: usize, label: usize, err: &CertError) -> Self {
        PointVerdict { id, label, bounds: BTreeMap::new(), certified: false, pgd: None, error: Some(err.to_string()) }
    }
}

/// Bound on `max_{x ∈ region} f(x)_y − f(x)_ybar` with the chosen relaxation.
pub fn class_bound(
    net: &ReluNetwork,
    bounds: &LayerBounds,
    y: usize,
    ybar: usize,
    opts: &CertifyOptions,
) -> Result<BoundResult> {
    match opts.method {
        Method::Sdp => sdp_upper_bound_with(net, bounds, y, ybar, &opts.sdp),
        Method::Lp => lp_upper_bound_with(net, bounds, y, ybar, opts.solver()),
    }
}

/// Certifies `(x̄, ȳ)` at radius `eps`: interval bounds once, then one bound
/// problem per incorrect class. A point misclassified at the center is
/// reported uncertified without solving anything.
pub fn certify_point(
    net: &ReluNetwork,
    id: usize,
    x: &[f64],
    label: usize,
    eps: f64,
    opts: &CertifyOptions,
) -> Result<PointVerdict> {
    let k = net.num_classes();
    if label >= k {
        return Err(CertError::InvalidClass { index: label, classes: k });
    }
    let region = PerturbationRegion::new(x.to_vec(), eps)?;
    let logits = net.forward(x)?.logits;
    let pgd = opts.pgd.as_ref().map(|s| pgd_attack(net, &region, label, s)).transpose()?;
    let misclassified = (0..k).any(|y| y != label && logits[y] - logits[label] >= 0.0);
    if misclassified {
        return Ok(PointVerdict { id, label, bounds: BTreeMap::new(), certified: false, pgd, error: None });
    }
    let lb = interval_propagate(net, &region)?;
    let results = (0..k)
        .into_par_iter()
        .filter(|y| *y != label)
        .map(|y| class_bound(net, &lb, y, label, opts).map(|b| (y, b)))
        .collect::<Result<Vec<_>>>()?;
    let bounds: BTreeMap<usize, BoundResult> = results.into_iter().collect();
    // NaN and +∞ both fail this test, so failures never certify
    let certified = bounds.values().all(|b| b.certified_upper_bound < 0.0);
    Ok(PointVerdict { id, label, bounds, certified, pgd, error: None })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub label: usize,
    pub x: Vec<f64>,
}

/// Headerless CSV: label, then the features.
pub fn read_dataset<R: Read>(input: R) -> Result<Vec<Example>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CertError::Parse(format!("dataset row {row}: {e}")))?;
        let mut fields = record.iter();
        let label = fields
            .next()
            .and_then(|f| f.parse::<usize>().ok())
            .ok_or_else(|| CertError::Parse(format!("dataset row {row}: label must be a nonnegative integer")))?;
        let x = fields
            .map(|f| f.parse::<f64>().map_err(|e| CertError::Parse(format!("dataset row {row}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CertError::Value(format!("dataset row {row}: non-finite feature")));
        }
        out.push(Example { label, x });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub points: usize,
    pub certified: usize,
    pub errors: usize,
    pub non_certified_fraction: f64,
    pub clean_error_fraction: f64,
    pub pgd_success_fraction: Option<f64>,
    pub mean_pgd_margin_certified: Option<f64>,
    pub mean_pgd_margin_uncertified: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize(net: &ReluNetwork, data: &[Example], verdicts: &[PointVerdict]) -> DatasetSummary {
    let points = verdicts.len();
    let certified = verdicts.iter().filter(|v| v.certified).count();
    let clean_errors = data.iter().filter(|e| net.predict(&e.x).map(|p| p != e.label).unwrap_or(true)).count();
    let attacked = verdicts.iter().any(|v| v.pgd.is_some());
    let frac = |n: usize| if points == 0 { 0.0 } else { n as f64 / points as f64 };
    DatasetSummary {
        points,
        certified,
        errors: verdicts.iter().filter(|v| v.error.is_some()).count(),
        non_certified_fraction: frac(points - certified),
        clean_error_fraction: frac(clean_errors),
        pgd_success_fraction: attacked.then(|| frac(verdicts.iter().filter(|v| v.pgd_success()).count())),
        mean_pgd_margin_certified: mean(verdicts.iter().filter(|v| v.certified).filter_map(PointVerdict::pgd_margin)),
        mean_pgd_margin_uncertified: mean(
            verdicts.iter().filter(|v| !v.certified && v.error.is_none()).filter_map(PointVerdict::pgd_margin),
        ),
    }
}

/// Certifies every example; a failing point is recorded and never aborts the batch.
pub fn certify_dataset(
    net: &ReluNetwork,
    data: &[Example],
    eps: f64,
    opts: &CertifyOptions,
) -> (Vec<PointVerdict>, DatasetSummary) {
    let verdicts: Vec<PointVerdict> = data
        .par_iter()
        .enumerate()
        .map(|(id, e)| {
            certify_point(net, id, &e.x, e.label, eps, opts)
                .unwrap_or_else(|err| PointVerdict::failed(id, e.label, &err))
        })
        .collect();
    let summary = summarize(net, data, &verdicts);
    (verdicts, summary)
}

#[derive(Serialize)]
struct BoundRecord {
    estimate: f64,
    certified_bound: f64,
    status: BoundStatus,
    iters: usize,
    ms: f64,
}

#[derive(Serialize)]
struct PointRecord<'a> {
    id: usize,
    label: usize,
    certified: bool,
    bounds: BTreeMap<String, BoundRecord>,
    pgd_margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    summary: &'a DatasetSummary,
}

/// JSON lines, one object per point and the summary last. Non-finite numbers
/// are written as `null`. With `timings` off every `ms` field is 0, making the
/// report reproducible byte for byte.
pub fn write_report<W: Write>(
    mut out: W,
    verdicts: &[PointVerdict],
    summary: &DatasetSummary,
    timings: bool,
) -> Result<()> {
    let to_io = |e: serde_json::Error| CertError::Io(e.into());
    for v in verdicts {
        let record = PointRecord {
            id: v.id,
            label: v.label,
            certified: v.certified,
            bounds: v
                .bounds
                .iter()
                .map(|(y, b)| {
                    (
                        y.to_string(),
                        BoundRecord {
                            estimate: b.objective_estimate,
                            certified_bound: b.certified_upper_bound,
                            status: b.status,
                            iters: b.iterations,
                            ms: if timings { b.wall_ms } else { 0.0 },
                        },
                    )
                })
                .collect(),
            pgd_margin: v.pgd_margin(),
            error: v.error.as_deref(),
        };
        serde_json::to_writer(&mut out, &record).map_err(to_io)?;
        out.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut out, &SummaryRecord { summary }).map_err(to_io)?;
    out.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Dense;
    use crate::theory::exact_margin_bruteforce;

    fn correctly_classified(net: &ReluNetwork, seed: u64, n: usize) -> Vec<Example> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Example { label: net.predict(&x).unwrap(), x }
            })
            .collect()
    }

    #[test]
    fn zero_radius_certifies_correct_points() {
        let net = ReluNetwork::random(3, &[4], 3, 0.5, 1);
        for e in correctly_classified(&net, 2, 5) {
            for method in [Method::Sdp, Method::Lp] {
                let opts = CertifyOptions { method, ..Default::default() };
                let v = certify_point(&net, 0, &e.x, e.label, 0.0, &opts).unwrap();
                let logits = net.forward(&e.x).unwrap().logits;
                let tie = (0..3).any(|y| y != e.label && logits[y] == logits[e.label]);
                assert_eq!(v.certified, !tie);
                assert!(!v.pgd_success());
            }
        }
    }

    #[test]
    fn misclassified_point_short_circuits() {
        let net = ReluNetwork::random(3, &[4], 3, 0.5, 1);
        let x = vec![0.2, 0.1, -0.4];
        let wrong = (net.predict(&x).unwrap() + 1) % 3;
        let v = certify_point(&net, 7, &x, wrong, 0.1, &CertifyOptions::default()).unwrap();
        assert!(!v.certified && v.bounds.is_empty() && v.pgd_success());
        assert!(certify_point(&net, 0, &x, 3, 0.1, &CertifyOptions::default()).is_err());
    }

    #[test]
    fn constructed_fixture_flips_with_radius() {
        // class 1 score is z = ReLU(x), class 0 score is the constant 0.5
        let net = ReluNetwork::new(
            vec![Dense::new(1, 1, vec![1.0], vec![0.0]).unwrap()],
            Dense::new(2, 1, vec![0.0, 1.0], vec![0.5, 0.0]).unwrap(),
        )
        .unwrap();
        let small = PerturbationRegion::new(vec![-0.05], 0.05).unwrap();
        assert!((exact_margin_bruteforce(&net, &small, 1, 0).unwrap() + 0.5).abs() < 1e-12);
        for method in [Method::Sdp, Method::Lp] {
            let opts = CertifyOptions { method, ..Default::default() };
            assert!(certify_point(&net, 0, &[-0.05], 0, 0.05, &opts).unwrap().certified);
            let big = certify_point(&net, 0, &[-0.05], 0, 1.0, &opts).unwrap();
            assert!(!big.certified && big.pgd_success());
        }
    }

    #[test]
    fn dataset_csv_and_report() {
        let data = read_dataset("1, 0.5, -0.25\n0,1e-3,2\n".as_bytes()).unwrap();
        assert_eq!(data, vec![Example { label: 1, x: vec![0.5, -0.25] }, Example { label: 0, x: vec![1e-3, 2.0] }]);
        assert!(read_dataset("x,1\n".as_bytes()).is_err());
        assert!(read_dataset("1,abc\n".as_bytes()).is_err());

        let net = ReluNetwork::random(2, &[3], 2, 0.5, 4);
        let mut data = correctly_classified(&net, 5, 4);
        data.push(Example { label: 5, x: vec![0.0, 0.0] });
        let (verdicts, summary) = certify_dataset(&net, &data, 0.05, &CertifyOptions::default());
        assert_eq!(summary.points, 5);
        assert_eq!(summary.errors, 1);
        let mut buf = Vec::new();
        write_report(&mut buf, &verdicts, &summary, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["id", "label", "certified", "bounds", "pgd_margin"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        assert!(serde_json::from_str::<serde_json::Value>(lines[5]).unwrap().get("summary").is_some());
    }

    #[test]
    fn clean_error_rate_at_zero_radius() {
        let net = ReluNetwork::random(2, &[3], 3, 0.5, 6);
        let mut data = correctly_classified(&net, 7, 10);
        for e in data.iter_mut().take(3) {
            e.label = (e.label + 1) % 3;
        }
        let (_, summary) = certify_dataset(&net, &data, 0.0, &CertifyOptions::default());
        assert!((summary.non_certified_fraction - summary.clean_error_fraction).abs() < 1e-12);
        assert!((summary.clean_error_fraction - 0.3).abs() < 1e-12);
    }
}
