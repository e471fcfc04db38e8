//! Feedforward ReLU classifiers: evaluation, margins, gradients and the
//! canonical JSON file format.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CertError, Result};

/// A dense affine map `x ↦ W x + b` with `W` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn new(rows: usize, cols: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let dense = Dense { rows, cols, w, b };
        dense.validate("dense")?;
        Ok(dense)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(CertError::Shape(format!("{what}: empty matrix {}x{}", self.rows, self.cols)));
        }
        if self.w.len() != self.rows * self.cols {
            return Err(CertError::Shape(format!(
                "{what}: weight array has {} entries, expected {}x{}",
                self.w.len(),
                self.rows,
                self.cols
            )));
        }
        if self.b.len() != self.rows {
            return Err(CertError::Shape(format!("{what}: bias has {} entries, expected {}", self.b.len(), self.rows)));
        }
        if self.w.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return Err(CertError::Value(format!("{what}: non-finite entry")));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.cols..(i + 1) * self.cols]
    }

    /// `W x + b`, accumulated left to right within each row.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let mut acc = 0.0;
                for (w, xv) in self.row(i).iter().zip(x) {
                    acc += w * xv;
                }
                acc + self.b[i]
            })
            .collect()
    }

    /// `Wᵀ g` (no bias).
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, gi) in g.iter().enumerate() {
            if *gi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += w * gi;
            }
        }
        out
    }

    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.w)
    }
}

/// Hidden layers `x^i = ReLU(W^{i-1} x^{i-1} + b^{i-1})` followed by the
/// class-score map `C x^L + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluNetwork {
    pub layers: Vec<Dense>,
    pub output: Dense,
}

/// Values of every layer for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    /// `x[0]` is the input, `x[i]` the post-ReLU values of hidden layer `i`.
    pub x: Vec<Vec<f64>>,
    /// Pre-activations `W^{i-1} x^{i-1} + b^{i-1}`, `pre[i-1]` for layer `i`.
    pub pre: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl Activations {
    pub fn last(&self) -> &[f64] {
        self.x.last().expect("activations always hold the input")
    }
}

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

impl ReluNetwork {
    pub fn new(layers: Vec<Dense>, output: Dense) -> Result<Self> {
        let net = ReluNetwork { layers, output };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(&format!("layer {i}"))?;
            if i > 0 && layer.cols != self.layers[i - 1].rows {
                return Err(CertError::Shape(format!(
                    "layer {i} has {} columns but layer {} has {} rows",
                    layer.cols,
                    i - 1,
                    self.layers[i - 1].rows
                )));
            }
        }
        self.output.validate("output")?;
        let last_width = self.layers.last().map(|l| l.rows);
        if let Some(width) = last_width {
            if self.output.cols != width {
                return Err(CertError::Shape(format!(
                    "output has {} columns but the last hidden layer has {width} units",
                    self.output.cols
                )));
            }
        }
        if self.output.rows < 2 {
            return Err(CertError::Shape(format!("need at least 2 classes, got {}", self.output.rows)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(self.output.cols, |l| l.cols)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.output.rows
    }

    /// Widths `m_0 = d, m_1, …, m_L`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.rows)).collect()
    }

    pub fn hidden_units(&self) -> usize {
        self.layers.iter().map(|l| l.rows).sum()
    }

    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(CertError::Dimension { expected: self.input_dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CertError::Value("non-finite input".into()));
        }
        Ok(())
    }

    pub fn check_classes(&self, y: usize, ybar: usize) -> Result<()> {
        let k = self.num_classes();
        for c in [y, ybar] {
            if c >= k {
                return Err(CertError::InvalidClass { index: c, classes: k });
            }
        }
        if y == ybar {
            return Err(CertError::Config(format!("target class {y} equals the true class")));
        }
        Ok(())
    }

    pub fn forward(&self, x0: &[f64]) -> Result<Activations> {
        self.check_input(x0)?;
        let mut x = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        x.push(x0.to_vec());
        for layer in &self.layers {
            let p = layer.apply(x.last().unwrap());
            x.push(p.iter().copied().map(relu).collect());
            pre.push(p);
        }
        let logits = self.output.apply(x.last().unwrap());
        Ok(Activations { x, pre, logits })
    }

    pub fn predict(&self, x0: &[f64]) -> Result<usize> {
        let acts = self.forward(x0)?;
        Ok(argmax(&acts.logits))
    }

    /// `f(x)_y − f(x)_ȳ`.
    pub fn class_margin(&self, x0: &[f64], y: usize, ybar: usize) -> Result<f64> {
        self.check_classes(y, ybar)?;
        let acts = self.forward(x0)?;
        Ok(acts.logits[y] - acts.logits[ybar])
    }

    /// Objective row `c_y − c_ȳ` over `x^L` and the constant class-bias difference.
    pub fn margin_objective(&self, y: usize, ybar: usize) -> Result<(Vec<f64>, f64)> {
        self.check_classes(y, ybar)?;
        let c: Vec<f64> = self.output.row(y).iter().zip(self.output.row(ybar)).map(|(a, b)| a - b).collect();
        Ok((c, self.output.b[y] - self.output.b[ybar]))
    }

    /// Reverse-mode gradient of [`class_margin`](Self::class_margin) with
    /// respect to the input. Units with pre-activation exactly 0 pass no gradient.
    pub fn margin_gradient(&self, x0: &[f64], y: usize, ybar: usize) -> Result<Vec<f64>> {
        let (c, _) = self.margin_objective(y, ybar)?;
        let acts = self.forward(x0)?;
        let mut g = c;
        for (layer, pre) in self.layers.iter().zip(&acts.pre).rev() {
            for (gi, p) in g.iter_mut().zip(pre) {
                if *p <= 0.0 {
                    *gi = 0.0;
                }
            }
            g = layer.apply_transpose(&g);
        }
        Ok(g)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: ReluNetwork = serde_json::from_str(text).map_err(|e| CertError::Parse(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }

    /// Compact JSON with shortest round-trip floats and a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("network serialization cannot fail");
        s.push('\n');
        s
    }

    /// Weights uniform in `[-1, 1]`, biases uniform in `[-bias_scale, bias_scale]`.
    pub fn random(input_dim: usize, hidden: &[usize], classes: usize, bias_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let w = (0..rows * cols).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let b = (0..rows)
                .map(|_| if bias_scale > 0.0 { rng.gen_range(-bias_scale..=bias_scale) } else { 0.0 })
                .collect();
            Dense { rows, cols, w, b }
        };
        let mut layers = Vec::with_capacity(hidden.len());
        let mut cols = input_dim;
        for &rows in hidden {
            layers.push(dense(rows, cols, &mut rng));
            cols = rows;
        }
        let output = dense(classes, cols, &mut rng);
        ReluNetwork::new(layers, output).expect("random network is well formed")
    }
}

pub fn load_network(text: &str) -> Result<ReluNetwork> {
    ReluNetwork::from_json(text)
}

pub fn save_network(net: &ReluNetwork) -> String {
    net.to_json()
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
