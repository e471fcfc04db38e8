//! ℓ∞ projected gradient ascent on class margins, giving lower-bound
//! witnesses for the worst-case margin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::PerturbationRegion;
use crate::error::{CertError, Result};
use crate::network::ReluNetwork;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdSettings {
    /// Absolute sign-step length.
    pub step: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for PgdSettings {
    fn default() -> Self {
        PgdSettings { step: 0.1, iterations: 40, restarts: 5, seed: 0 }
    }
}

impl PgdSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(CertError::Config(format!("PGD step must be positive, got {}", self.step)));
        }
        if self.iterations == 0 || self.restarts == 0 {
            return Err(CertError::Config("PGD iterations and restarts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    /// Incorrect class with the largest score difference at `x_adv`.
    pub target: usize,
    /// `max_{y≠ȳ} f(x_adv)_y − f(x_adv)_ȳ`, from a fresh forward pass.
    pub margin: f64,
    pub success: bool,
    /// `min_{y≠ȳ} f(x_adv)_ȳ − f(x_adv)_y`.
    pub closest_margin: f64,
}

impl AttackResult {
    /// Re-evaluates a stored witness.
    pub fn at(net: &ReluNetwork, x: Vec<f64>, ybar: usize) -> Result<Self> {
        let logits = net.forward(&x)?.logits;
        let mut target = usize::MAX;
        let mut margin = f64::NEG_INFINITY;
        for (y, v) in logits.iter().enumerate() {
            if y != ybar && v - logits[ybar] > margin {
                margin = v - logits[ybar];
                target = y;
            }
        }
        Ok(AttackResult { x_adv: x, target, margin, success: margin >= 0.0, closest_margin: -margin })
    }
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_add((restart as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn ascend(
    net: &ReluNetwork,
    region: &PerturbationRegion,
    start: &[f64],
    y: usize,
    ybar: usize,
    s: &PgdSettings,
) -> Result<(Vec<f64>, f64)> {
    let mut x = start.to_vec();
    let mut best = (x.clone(), net.class_margin(&x, y, ybar)?);
    for _ in 0..s.iterations {
        let g = net.margin_gradient(&x, y, ybar)?;
        for (xi, gi) in x.iter_mut().zip(&g) {
            if *gi > 0.0 {
                *xi += s.step;
            } else if *gi < 0.0 {
                *xi -= s.step;
            }
        }
        region.project(&mut x);
        let m = net.class_margin(&x, y, ybar)?;
        if m > best.1 {
            best = (x.clone(), m);
        }
    }
    Ok(best)
}

/// One targeted ascent per incorrect class and restart, each from a uniform
/// random start in the ball. The center itself is also a candidate. Ties go
/// to the earlier restart, then the lower class index.
pub fn pgd_attack(
    net: &ReluNetwork,
    region: &PerturbationRegion,
    ybar: usize,
    settings: &PgdSettings,
) -> Result<AttackResult> {
    settings.validate()?;
    net.check_input(&region.center)?;
    let k = net.num_classes();
    if ybar >= k {
        return Err(CertError::InvalidClass { index: ybar, classes: k });
    }
    let runs: Vec<Vec<(Vec<f64>, f64)>> = (0..settings.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(settings.seed, r));
            let start: Vec<f64> = region
                .center
                .iter()
                .map(|c| if region.radius > 0.0 { c + rng.gen_range(-region.radius..=region.radius) } else { *c })
                .collect();
            (0..k)
                .filter(|y| *y != ybar)
                .map(|y| ascend(net, region, &start, y, ybar, settings))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut best = AttackResult::at(net, region.center.clone(), ybar)?;
    for (x, _) in runs.into_iter().flatten() {
        let candidate = AttackResult::at(net, x, ybar)?;
        if candidate.margin > best.margin {
            best = candidate;
        }
    }
    Ok(best)
}

/// Closest-incorrect-class margin `min_{y≠ȳ} f_ȳ − f_y` at the PGD witness.
pub fn pgd_margin(net: &ReluNetwork, region: &PerturbationRegion, ybar: usize, settings: &PgdSettings) -> Result<f64> {
    Ok(pgd_attack(net, region, ybar, settings)?.closest_margin)
}
