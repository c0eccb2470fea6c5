//! Minimal dense layers with hand-written backward passes and an Adam optimizer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }
}

/// Affine map on row vectors: `y = x W + b`, with `W` shaped `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: DMatrix::zeros(input, output),
            bias: DVector::zeros(output),
        }
    }

    /// Xavier-normal weights scaled by `gain`, zero bias.
    pub fn xavier<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain * (2.0 / (input + output) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: DMatrix::from_fn(input, output, |_, _| normal.sample(rng)),
            bias: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.weight;
        for mut row in y.row_iter_mut() {
            row += self.bias.transpose();
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrad {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Stack of linear layers with an activation between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// Layer sizes `dims[0] -> dims[1] -> ... -> dims[n]`. The last layer is
    /// scaled by `out_gain` so a fresh network starts near zero output.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, out_gain: f64, rng: &mut R) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { out_gain } else { 1.0 };
                Linear::xavier(dims[i], dims[i + 1], gain, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim()).unwrap_or(0)
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, MlpCache)> {
        check_len("mlp input", self.input_dim(), x.ncols())?;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            cache.inputs.push(h);
            if i == last {
                return Ok((z, cache));
            }
            h = z.map(|v| self.activation.apply(v));
            cache.pre.push(z);
        }
        unreachable!("mlp has at least one layer")
    }

    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &DMatrix<f64>) -> (Vec<LinearGrad>, DMatrix<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            let gw = input.transpose() * &g;
            let gb = g.row_sum().transpose();
            grads.push(LinearGrad { weight: gw, bias: gb });
            let mut gx = &g * self.layers[i].weight.transpose();
            if i > 0 {
                let pre = &cache.pre[i - 1];
                let act = self.activation;
                gx.zip_apply(pre, |a, z| *a *= act.derivative(z));
            }
            g = gx;
        }
        grads.reverse();
        (grads, g)
    }

    pub fn zero_grad(&self) -> Vec<LinearGrad> {
        self.layers
            .iter()
            .map(|l| LinearGrad {
                weight: DMatrix::zeros(l.input_dim(), l.output_dim()),
                bias: DVector::zeros(l.output_dim()),
            })
            .collect()
    }
}

/// Row-major dense matrix with explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixDoc {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            values: m.transpose().as_slice().to_vec(),
        }
    }
}

impl TryFrom<&MatrixDoc> for DMatrix<f64> {
    type Error = Error;

    fn try_from(d: &MatrixDoc) -> Result<Self> {
        check_len("matrix values", d.rows * d.cols, d.values.len())?;
        Ok(DMatrix::from_row_slice(d.rows, d.cols, &d.values))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDoc {
    pub weight: MatrixDoc,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpDoc {
    pub activation: Activation,
    pub layers: Vec<LinearDoc>,
}

impl From<&Mlp> for MlpDoc {
    fn from(m: &Mlp) -> Self {
        Self {
            activation: m.activation,
            layers: m
                .layers
                .iter()
                .map(|l| LinearDoc {
                    weight: (&l.weight).into(),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<&MlpDoc> for Mlp {
    type Error = Error;

    fn try_from(d: &MlpDoc) -> Result<Self> {
        if d.layers.is_empty() {
            return Err(Error::Format("mlp without layers".into()));
        }
        let mut layers = Vec::with_capacity(d.layers.len());
        for l in &d.layers {
            let weight = DMatrix::try_from(&l.weight)?;
            check_len("bias", weight.ncols(), l.bias.len())?;
            layers.push(Linear {
                weight,
                bias: DVector::from_column_slice(&l.bias),
            });
        }
        for pair in layers.windows(2) {
            check_len("layer chain", pair[0].output_dim(), pair[1].input_dim())?;
        }
        Ok(Self {
            layers,
            activation: d.activation,
        })
    }
}

pub fn accumulate(into: &mut [LinearGrad], from: &[LinearGrad]) {
    for (a, b) in into.iter_mut().zip(from) {
        a.weight += &b.weight;
        a.bias += &b.bias;
    }
}

/// Anything exposing its trainable tensors as flat slices in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

impl Parameters for Vec<LinearGrad> {
    fn tensors(&self) -> Vec<&[f64]> {
        self.iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment state for a fixed tensor layout.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, layout: &[&[f64]]) -> Self {
        Self {
            kind,
            step: 0,
            m: layout.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: layout.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((x, &gi), m) in p.iter_mut().zip(g).zip(self.m[k].iter_mut()) {
                        *m = momentum * *m + gi;
                        *x -= lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((x, &gi), m), v) in p.iter_mut().zip(g).zip(self.m[k].iter_mut()).zip(self.v[k].iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for act in [Activation::Identity, Activation::LeakyRelu(0.1), Activation::Relu] {
            let mlp = Mlp::new(&[4, 6, 5, 3], act, 1.0, &mut rng);
            let x = DMatrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
            let w = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
            let (_, cache) = mlp.forward_cached(&x).unwrap();
            let (grads, gx) = mlp.backward(&cache, &w);
            let f = |m: &Mlp, x: &DMatrix<f64>| m.forward(x).unwrap().component_mul(&w).sum();
            let eps = 1e-6;
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += eps;
                xm[i] -= eps;
                let fd = (f(&mlp, &xp) - f(&mlp, &xm)) / (2.0 * eps);
                assert!((fd - gx[i]).abs() < 1e-7, "{act:?}");
            }
            let flat_grads: Vec<f64> = grads.tensors().concat();
            let n = flat_grads.len();
            for k in (0..n).step_by(3) {
                let perturb = |delta: f64| {
                    let mut m = mlp.clone();
                    let mut seen = 0;
                    for t in m.tensors_mut() {
                        if k < seen + t.len() {
                            t[k - seen] += delta;
                            break;
                        }
                        seen += t.len();
                    }
                    f(&m, &x)
                };
                let fd = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
                assert!((fd - flat_grads[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::new(&[3, 2], Activation::Identity, 1.0, &mut rng);
        let before = mlp.clone();
        let grads = vec![LinearGrad {
            weight: DMatrix::from_element(3, 2, 1.0),
            bias: DVector::from_element(2, 1.0),
        }];
        let mut opt = Optimizer::new(OptimizerKind::default(), &mlp.tensors());
        opt.update(mlp.tensors_mut(), grads.tensors(), 0.0);
        assert_eq!(mlp, before);
    }
}
