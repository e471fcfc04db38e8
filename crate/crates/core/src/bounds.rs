//! Interval arithmetic over the layers of a [`ReluNetwork`].

use crate::error::{CertError, Result};
use crate::network::{relu, ReluNetwork};

/// The ℓ∞ ball `{x : ‖x − center‖∞ ≤ radius}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationRegion {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl PerturbationRegion {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(CertError::Value(format!("radius must be finite and nonnegative, got {radius}")));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(CertError::Value("non-finite region center".into()));
        }
        Ok(PerturbationRegion { center, radius })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.center.iter().map(|c| c - self.radius).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.center.iter().map(|c| c + self.radius).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.center).all(|(a, c)| (a - c).abs() <= self.radius)
    }

    /// Clamp `x` into the ball coordinate-wise, rounding inward so that
    /// [`contains`](Self::contains) holds exactly.
    pub fn project(&self, x: &mut [f64]) {
        for (v, c) in x.iter_mut().zip(&self.center) {
            *v = v.clamp(c - self.radius, c + self.radius);
            while (*v - c).abs() > self.radius {
                *v = if *v > *c { v.next_down() } else { v.next_up() };
            }
        }
    }
}

/// Elementwise bounds on every layer.
///
/// `lower[i]`/`upper[i]` bound `x^i` (post-ReLU for `i ≥ 1`); `pre_lower[i-1]`
/// and `pre_upper[i-1]` are the unclamped pre-activation intervals of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    pub pre_lower: Vec<Vec<f64>>,
    pub pre_upper: Vec<Vec<f64>>,
}

impl LayerBounds {
    pub fn layers(&self) -> usize {
        self.lower.len()
    }

    /// Hidden units whose pre-activation interval straddles zero.
    pub fn unstable_units(&self) -> usize {
        self.pre_lower
            .iter()
            .flatten()
            .zip(self.pre_upper.iter().flatten())
            .filter(|(lo, hi)| **lo < 0.0 && **hi > 0.0)
            .count()
    }

    pub fn contains(&self, acts: &crate::network::Activations, tol: f64) -> bool {
        acts.x
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(x, (lo, hi))| x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, u))| *v >= l - tol && *v <= u + tol))
    }

    pub fn check_covers(&self, net: &ReluNetwork) -> Result<()> {
        let widths = net.widths();
        if self.lower.len() != widths.len()
            || self.upper.len() != widths.len()
            || self.pre_lower.len() + 1 != widths.len()
        {
            return Err(CertError::Shape(format!(
                "bounds cover {} layers, network has {}",
                self.lower.len(),
                widths.len()
            )));
        }
        for (i, w) in widths.iter().enumerate() {
            if self.lower[i].len() != *w || self.upper[i].len() != *w {
                return Err(CertError::Shape(format!("bounds for layer {i} have the wrong width")));
            }
        }
        Ok(())
    }
}

/// `(max(M, 0), min(M, 0))` elementwise.
pub fn split_pos_neg(m: &[f64]) -> (Vec<f64>, Vec<f64>) {
    m.iter().map(|v| if *v > 0.0 { (*v, 0.0) } else { (0.0, *v) }).unzip()
}

pub fn interval_propagate(net: &ReluNetwork, region: &PerturbationRegion) -> Result<LayerBounds> {
    if region.dim() != net.input_dim() {
        return Err(CertError::Dimension { expected: net.input_dim(), got: region.dim() });
    }
    let mut lower = vec![region.lower()];
    let mut upper = vec![region.upper()];
    let mut pre_lower = Vec::with_capacity(net.depth());
    let mut pre_upper = Vec::with_capacity(net.depth());
    for layer in &net.layers {
        let (l, u) = (lower.last().unwrap(), upper.last().unwrap());
        let mut p_lo = Vec::with_capacity(layer.rows);
        let mut p_hi = Vec::with_capacity(layer.rows);
        for i in 0..layer.rows {
            // Positive weights take the matching endpoint, negative weights the
            // opposite one. Summation order matches `Dense::apply`, so a
            // zero-width box reproduces the forward pass bit for bit.
            let (mut lo, mut hi) = (0.0, 0.0);
            for (j, w) in layer.row(i).iter().enumerate() {
                if *w >= 0.0 {
                    lo += w * l[j];
                    hi += w * u[j];
                } else {
                    lo += w * u[j];
                    hi += w * l[j];
                }
            }
            p_lo.push(lo + layer.b[i]);
            p_hi.push(hi + layer.b[i]);
        }
        lower.push(p_lo.iter().copied().map(relu).collect());
        upper.push(p_hi.iter().copied().map(relu).collect());
        pre_lower.push(p_lo);
        pre_upper.push(p_hi);
    }
    Ok(LayerBounds { lower, upper, pre_lower, pre_upper })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Dense;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sign_split_examples() {
        assert_eq!(split_pos_neg(&[1.0, -2.0]), (vec![1.0, 0.0], vec![0.0, -2.0]));
        assert_eq!(split_pos_neg(&[0.0, 0.0]), (vec![0.0, 0.0], vec![0.0, 0.0]));
    }

    proptest! {
        #[test]
        fn sign_split_reconstructs(m in proptest::collection::vec(-1e6f64..1e6, 0..40)) {
            let (p, n) = split_pos_neg(&m);
            for ((a, b), v) in p.iter().zip(&n).zip(&m) {
                prop_assert_eq!(a + b, *v);
                prop_assert!(*a >= 0.0 && *b <= 0.0);
            }
        }
    }

    #[test]
    fn zero_radius_matches_forward() {
        for seed in 0..10 {
            let net = ReluNetwork::random(3, &[5, 4, 3], 3, 0.5, seed);
            let x = vec![0.3, -0.2, 0.9];
            let b = interval_propagate(&net, &PerturbationRegion::new(x.clone(), 0.0).unwrap()).unwrap();
            let a = net.forward(&x).unwrap();
            assert_eq!(b.lower, a.x);
            assert_eq!(b.upper, a.x);
        }
    }

    #[test]
    fn difference_unit_by_grid() {
        let net = ReluNetwork::new(
            vec![Dense::new(1, 2, vec![1.0, -1.0], vec![0.0]).unwrap()],
            Dense::new(2, 1, vec![1.0, 0.0], vec![0.0, 0.0]).unwrap(),
        )
        .unwrap();
        let b = interval_propagate(&net, &PerturbationRegion::new(vec![0.0, 0.0], 0.1).unwrap()).unwrap();
        // grid oracle over the box
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..=20 {
            for j in 0..=20 {
                let x = [-0.1 + 0.01 * i as f64, -0.1 + 0.01 * j as f64];
                let p = x[0] - x[1];
                lo = lo.min(p);
                hi = hi.max(p);
            }
        }
        assert!((b.pre_lower[0][0] - lo).abs() < 1e-12 && (b.pre_upper[0][0] - hi).abs() < 1e-12);
        assert!((b.pre_lower[0][0] + 0.2).abs() < 1e-12);
        assert_eq!(b.lower[1][0], 0.0);
        assert!((b.upper[1][0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn sampled_soundness() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..10 {
            let net = ReluNetwork::random(4, &[6, 5], 3, 0.5, seed);
            let region = PerturbationRegion::new(vec![0.1, -0.4, 0.2, 0.7], 0.3).unwrap();
            let b = interval_propagate(&net, &region).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = region.center.iter().map(|c| c + rng.gen_range(-0.3..=0.3)).collect();
                assert!(b.contains(&net.forward(&x).unwrap(), 1e-12));
            }
        }
    }

    #[test]
    fn clamping_and_nesting() {
        let net = ReluNetwork::random(3, &[4, 4], 2, 0.5, 77);
        let small = interval_propagate(&net, &PerturbationRegion::new(vec![0.0; 3], 0.1).unwrap()).unwrap();
        let big = interval_propagate(&net, &PerturbationRegion::new(vec![0.0; 3], 0.4).unwrap()).unwrap();
        for i in 1..small.layers() {
            for j in 0..small.lower[i].len() {
                assert_eq!(small.lower[i][j], relu(small.pre_lower[i - 1][j]));
                assert_eq!(small.upper[i][j], relu(small.pre_upper[i - 1][j]));
            }
        }
        for i in 0..small.layers() {
            for j in 0..small.lower[i].len() {
                assert!(big.lower[i][j] <= small.lower[i][j] && small.upper[i][j] <= big.upper[i][j]);
            }
        }
    }

    #[test]
    fn wrong_dimension() {
        let net = ReluNetwork::random(3, &[2], 2, 0.0, 1);
        assert!(interval_propagate(&net, &PerturbationRegion::new(vec![0.0; 2], 0.1).unwrap()).is_err());
        assert!(PerturbationRegion::new(vec![0.0], -1.0).is_err());
    }
}
