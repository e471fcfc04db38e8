#![allow(dead_code)]

use certikit::bounds::PerturbationRegion;
use certikit::network::{Dense, ReluNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small random classification instance: the label is the clean prediction.
pub struct Instance {
    pub net: ReluNetwork,
    pub region: PerturbationRegion,
    pub label: usize,
}

impl Instance {
    pub fn incorrect_classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.net.num_classes()).filter(|y| *y != self.label)
    }
}

/// `d ≤ 4`, one to three hidden layers with at most 8 units in total, 2 or 3 classes.
pub fn tiny_instance(seed: u64, eps: f64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..=4);
    let depth = rng.gen_range(1..=3);
    let mut budget = 8usize;
    let widths: Vec<usize> = (0..depth)
        .map(|i| {
            let room = budget - (depth - i - 1);
            let w = rng.gen_range(1..=room.min(4));
            budget -= w;
            w
        })
        .collect();
    let classes = rng.gen_range(2..=3);
    let net = ReluNetwork::random(d, &widths, classes, 0.5, rng.gen());
    let center: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let label = net.predict(&center).unwrap();
    Instance { net, region: PerturbationRegion::new(center, eps).unwrap(), label }
}

/// Uniform sample from the region.
pub fn sample_in(region: &PerturbationRegion, rng: &mut ChaCha8Rng) -> Vec<f64> {
    region.center.iter().map(|c| c + rng.gen_range(-region.radius..=region.radius)).collect()
}

/// Logit difference `aᵀx + bias` realised by a network whose hidden units stay active on `[-10, 10]^d`.
pub fn linear_fixture(a: &[f64], bias: f64) -> ReluNetwork {
    let d = a.len();
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    let hidden = Dense::new(d, d, w, vec![100.0; d]).unwrap();
    let shift: f64 = a.iter().map(|v| 100.0 * v).sum();
    let mut out = vec![0.0; d];
    out.extend_from_slice(a);
    ReluNetwork::new(vec![hidden], Dense::new(2, d, out, vec![0.0, bias - shift]).unwrap()).unwrap()
}

pub fn rel_slack(tol: f64, value: f64) -> f64 {
    tol * value.abs().max(1.0)
}

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}
