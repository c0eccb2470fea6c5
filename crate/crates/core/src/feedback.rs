//! The mesh-alignment feedback loop: residual parameter regression over a
//! feature pyramid, alignment attention between grid and mesh tokens, the
//! keypoint/joint/parameter loss and a small deterministic trainer.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{project_weak, Vec2, WeakPerspectiveCamera};
use crate::error::{check_len, Error, Result};
use crate::kinematics::{downsample, pose_backward, ArticulatedModel, ModelParams, PosedState};
use crate::nn::{
    Activation, Linear, LinearGrad, MatrixDoc, Mlp, MlpCache, MlpDoc, Optimizer, OptimizerKind, Parameters,
};
use crate::rotmath::{Mat3, Quaternion, Rotation6D, RotationValue, Vec3};
use crate::sampling::{bilinear_sample, flatten_rows, grid_points, mesh_aligned_points, FeaturePyramid};
use crate::scenario::{derive_seed, Scenario};

pub const DEFAULT_ITERATIONS: usize = 3;
pub const DEFAULT_ATTENTION_DIM: usize = 5;
/// Lower bound applied to the regressed camera scale before projecting.
pub const MIN_CAMERA_SCALE: f64 = 1e-2;

/// Flat parameter vector `[6D per joint, beta, psi, (s, tx, ty)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub joints: usize,
    pub betas: usize,
    pub expressions: usize,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub rotations: Vec<Mat3>,
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    /// Camera with the scale clamped to [`MIN_CAMERA_SCALE`].
    pub camera: WeakPerspectiveCamera,
    pub scale_clamped: bool,
}

impl Decoded {
    pub fn to_params(&self) -> ModelParams {
        ModelParams {
            theta: self
                .rotations
                .iter()
                .map(|r| RotationValue::SixD(Rotation6D::from_matrix(r)))
                .collect(),
            beta: self.beta.clone(),
            camera: self.camera,
        }
    }
}

impl ParamLayout {
    pub fn of(model: &ArticulatedModel) -> Self {
        Self {
            joints: model.num_joints(),
            betas: model.num_betas(),
            expressions: model.num_expressions(),
        }
    }

    pub fn dim(&self) -> usize {
        self.camera_offset() + 3
    }

    pub fn beta_offset(&self) -> usize {
        6 * self.joints
    }

    pub fn expression_offset(&self) -> usize {
        self.beta_offset() + self.betas
    }

    pub fn camera_offset(&self) -> usize {
        self.expression_offset() + self.expressions
    }

    /// Identity rotations, zero shape and expression, unit-scale centered camera.
    pub fn mean(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        for j in 0..self.joints {
            v[6 * j..6 * j + 6].copy_from_slice(&Rotation6D::identity().to_array());
        }
        v[self.camera_offset()] = 1.0;
        v
    }

    pub fn encode(&self, params: &ModelParams, psi: &[f64]) -> Result<Vec<f64>> {
        check_len("theta", self.joints, params.theta.len())?;
        check_len("beta", self.betas, params.beta.len())?;
        check_len("psi", self.expressions, psi.len())?;
        let mut v = Vec::with_capacity(self.dim());
        for r in &params.theta {
            v.extend(Rotation6D::from_matrix(&r.to_matrix()?).to_array());
        }
        v.extend(&params.beta);
        v.extend(psi);
        v.push(params.camera.scale);
        v.extend(params.camera.translation);
        Ok(v)
    }

    pub fn decode(&self, theta: &[f64]) -> Result<Decoded> {
        check_len("parameter vector", self.dim(), theta.len())?;
        let rotations = (0..self.joints)
            .map(|j| Rotation6D::from_slice(&theta[6 * j..6 * j + 6]).to_matrix())
            .collect::<Result<Vec<_>>>()?;
        let c = self.camera_offset();
        let scale = theta[c];
        let camera = WeakPerspectiveCamera {
            scale: scale.max(MIN_CAMERA_SCALE),
            translation: [theta[c + 1], theta[c + 2]],
            ..WeakPerspectiveCamera::default()
        };
        Ok(Decoded {
            rotations,
            beta: theta[self.beta_offset()..self.expression_offset()].to_vec(),
            psi: theta[self.expression_offset()..c].to_vec(),
            camera,
            scale_clamped: scale < MIN_CAMERA_SCALE,
        })
    }
}

/// Spread of the random offsets applied to a parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Per-component std of a rotation-vector offset for every joint (radians).
    pub rotation: f64,
    /// Multiplies the x and y components of the rotation offset.
    pub out_of_plane: f64,
    pub beta: f64,
    /// Relative std of the camera scale.
    pub scale: f64,
    pub translation: f64,
}

impl Perturbation {
    pub const NONE: Self = Self {
        rotation: 0.0,
        out_of_plane: 1.0,
        beta: 0.0,
        scale: 0.0,
        translation: 0.0,
    };

    /// Offsets matched to the residual error of a trained first iteration
    /// on the default scenario distribution.
    pub const DEFAULT: Self = Self {
        rotation: 0.12,
        out_of_plane: 0.0,
        beta: 0.6,
        scale: 0.06,
        translation: 0.036,
    };

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            rotation: self.rotation * k,
            out_of_plane: self.out_of_plane,
            beta: self.beta * k,
            scale: self.scale * k,
            translation: self.translation * k,
        }
    }

    pub fn is_none(&self) -> bool {
        self.rotation == 0.0 && self.beta == 0.0 && self.scale == 0.0 && self.translation == 0.0
    }
}

impl ParamLayout {
    /// Applies a random offset drawn from `p`; expressions are left unchanged.
    pub fn perturb(&self, theta: &[f64], p: &Perturbation, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let dec = self.decode(theta)?;
        let mut out = theta.to_vec();
        let mut gauss = |std: f64| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        for (j, r) in dec.rotations.iter().enumerate() {
            let xy = p.rotation * p.out_of_plane;
            let w = Vec3::new(gauss(xy), gauss(xy), gauss(p.rotation));
            let m = r * Quaternion::from_rotation_vector(&w).to_matrix();
            out[6 * j..6 * j + 6].copy_from_slice(&Rotation6D::from_matrix(&m).to_array());
        }
        for v in &mut out[self.beta_offset()..self.expression_offset()] {
            *v += gauss(p.beta);
        }
        let c = self.camera_offset();
        out[c] = dec.camera.scale * (1.0 + gauss(p.scale));
        out[c + 1] += gauss(p.translation);
        out[c + 2] += gauss(p.translation);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub lambda_para: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_2d: 1.0,
            lambda_3d: 1.0,
            lambda_para: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_2d, self.lambda_3d, self.lambda_para]
            .iter()
            .any(|&l| !(l >= 0.0))
        {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Projected keypoints, 3D joints and flat parameters of one estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub keypoints: Vec<Vec2>,
    pub joints: Vec<Vec3>,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationGrad {
    pub keypoints: Vec<Vec2>,
    pub joints: Vec<Vec3>,
    pub params: Vec<f64>,
}

/// Weighted sum of squared L2 errors on keypoints, joints and parameters.
/// Terms with zero weight are skipped, so their targets may be empty.
pub fn regression_loss(pred: &Observation, gt: &Observation, w: &LossWeights) -> Result<(f64, ObservationGrad)> {
    w.validate()?;
    let mut loss = 0.0;
    let mut grad = ObservationGrad {
        keypoints: vec![Vec2::zeros(); pred.keypoints.len()],
        joints: vec![Vec3::zeros(); pred.joints.len()],
        params: vec![0.0; pred.params.len()],
    };
    if w.lambda_2d > 0.0 {
        check_len("keypoints", gt.keypoints.len(), pred.keypoints.len())?;
        for (g, (p, q)) in grad.keypoints.iter_mut().zip(pred.keypoints.iter().zip(&gt.keypoints)) {
            let d = p - q;
            loss += w.lambda_2d * d.norm_squared();
            *g = d * (2.0 * w.lambda_2d);
        }
    }
    if w.lambda_3d > 0.0 {
        check_len("joints", gt.joints.len(), pred.joints.len())?;
        for (g, (p, q)) in grad.joints.iter_mut().zip(pred.joints.iter().zip(&gt.joints)) {
            let d = p - q;
            loss += w.lambda_3d * d.norm_squared();
            *g = d * (2.0 * w.lambda_3d);
        }
    }
    if w.lambda_para > 0.0 {
        check_len("params", gt.params.len(), pred.params.len())?;
        for (g, (p, q)) in grad.params.iter_mut().zip(pred.params.iter().zip(&gt.params)) {
            let d = p - q;
            loss += w.lambda_para * d * d;
            *g = 2.0 * w.lambda_para * d;
        }
    }
    Ok((loss, grad))
}

/// Everything the forward chain from a parameter vector produces.
pub struct Forward {
    pub decoded: Decoded,
    pub posed: PosedState,
    pub observation: Observation,
}

pub fn observe(model: &ArticulatedModel, layout: &ParamLayout, theta: &[f64]) -> Result<Forward> {
    let decoded = layout.decode(theta)?;
    let posed = model.pose(&decoded.rotations, &decoded.beta, &decoded.psi)?;
    let joints = model.regress_joints(&posed.vertices)?;
    let keypoints = project_weak(&joints, &decoded.camera);
    Ok(Forward {
        decoded,
        posed,
        observation: Observation {
            keypoints,
            joints,
            params: theta.to_vec(),
        },
    })
}

/// Loss of a parameter vector and its gradient through 6D decoding,
/// kinematics, skinning, joint regression and projection.
pub fn params_loss(
    model: &ArticulatedModel,
    layout: &ParamLayout,
    theta: &[f64],
    gt: &Observation,
    w: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    let fwd = observe(model, layout, theta)?;
    let (loss, g) = regression_loss(&fwd.observation, gt, w)?;
    let mut grad = g.params;
    let cam = &fwd.decoded.camera;
    let c = layout.camera_offset();
    let mut g_joints = g.joints;
    for ((gj, gk), j) in g_joints.iter_mut().zip(&g.keypoints).zip(&fwd.observation.joints) {
        gj.x += cam.scale * gk.x;
        gj.y += cam.scale * gk.y;
        if !fwd.decoded.scale_clamped {
            grad[c] += gk.x * j.x + gk.y * j.y;
        }
        grad[c + 1] += gk.x;
        grad[c + 2] += gk.y;
    }
    let mut g_vertices = vec![Vec3::zeros(); model.num_vertices()];
    model
        .joint_regressor
        .mul_points_transposed_into(&g_joints, &mut g_vertices);
    let pg = pose_backward(
        model,
        &fwd.decoded.rotations,
        &fwd.decoded.beta,
        &fwd.decoded.psi,
        &fwd.posed,
        &g_vertices,
        None,
    )?;
    for (j, gm) in pg.theta.iter().enumerate() {
        let six = Rotation6D::from_slice(&theta[6 * j..6 * j + 6]).backward(gm)?;
        for (k, v) in six.iter().enumerate() {
            grad[6 * j + k] += v;
        }
    }
    for (k, v) in pg.beta.iter().enumerate() {
        grad[layout.beta_offset() + k] += v;
    }
    for (k, v) in pg.psi.iter().enumerate() {
        grad[layout.expression_offset() + k] += v;
    }
    Ok((loss, grad))
}

/// Query, key and value projections, each `C_s x C_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
}

impl AttentionWeights {
    pub fn zeros(c_s: usize, c_a: usize) -> Self {
        Self {
            w_q: DMatrix::zeros(c_s, c_a),
            w_k: DMatrix::zeros(c_s, c_a),
            w_v: DMatrix::zeros(c_s, c_a),
        }
    }

    pub fn random<R: rand::Rng + ?Sized>(c_s: usize, c_a: usize, rng: &mut R) -> Self {
        let n = Normal::new(0.0, (1.0 / c_s as f64).sqrt()).expect("finite std");
        let mut m = || DMatrix::from_fn(c_s, c_a, |_, _| n.sample(rng));
        Self {
            w_q: m(),
            w_k: m(),
            w_v: m(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w_q.ncols()
    }

    fn validate(&self) -> Result<()> {
        let shape = self.w_q.shape();
        if self.w_k.shape() != shape || self.w_v.shape() != shape {
            return Err(Error::Config("attention projections must share a shape".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrad {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
}

pub struct AttentionCache {
    queries: DMatrix<f64>,
    tokens: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    /// Transposed attention matrix, `N x N_q`; each column sums to one.
    probs_t: DMatrix<f64>,
}

impl AttentionCache {
    /// Row-stochastic attention matrix, `N_q x N`.
    pub fn probs(&self) -> DMatrix<f64> {
        self.probs_t.transpose()
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Scaled dot-product attention of `queries` over `tokens`; returns `N_q x C_a`.
pub fn attend(
    queries: &DMatrix<f64>,
    tokens: &DMatrix<f64>,
    w: &AttentionWeights,
) -> Result<(DMatrix<f64>, AttentionCache)> {
    w.validate()?;
    check_len("attention query width", w.input_dim(), queries.ncols())?;
    check_len("attention token width", w.input_dim(), tokens.ncols())?;
    if tokens.nrows() == 0 {
        return Err(Error::Config("attention needs at least one token".into()));
    }
    let q = queries * &w.w_q;
    let k = tokens * &w.w_k;
    let v = tokens * &w.w_v;
    let (nq, n, c) = (q.nrows(), k.nrows(), w.output_dim());
    let scale = 1.0 / (c as f64).sqrt();
    let (qr, kr) = (row_major(&q), row_major(&k));
    // column i of probs_t holds the distribution of query i
    let mut probs_t = DMatrix::zeros(n, nq);
    for (i, mut col) in probs_t.column_iter_mut().enumerate() {
        let qi = &qr[i * c..(i + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for (j, x) in col.iter_mut().enumerate() {
            let kj = &kr[j * c..(j + 1) * c];
            *x = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*x);
        }
        let mut total = 0.0;
        for x in col.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        col /= total;
    }
    let out = probs_t.tr_mul(&v);
    Ok((
        out,
        AttentionCache {
            queries: queries.clone(),
            tokens: tokens.clone(),
            q,
            k,
            v,
            probs_t,
        },
    ))
}

/// Gradients of the weights, the queries and the tokens.
pub fn attention_backward(
    w: &AttentionWeights,
    cache: &AttentionCache,
    grad_out: &DMatrix<f64>,
) -> (AttentionGrad, DMatrix<f64>, DMatrix<f64>) {
    let c = w.output_dim();
    let scale = 1.0 / (c as f64).sqrt();
    let a_t = &cache.probs_t;
    let (n, nq) = a_t.shape();
    let (vr, gr, qr, kr) = (
        row_major(&cache.v),
        row_major(grad_out),
        row_major(&cache.q),
        row_major(&cache.k),
    );
    let d_v = a_t * grad_out;
    let mut dq = vec![0.0; nq * c];
    let mut dk = vec![0.0; n * c];
    let mut ds = vec![0.0; n];
    for i in 0..nq {
        let a = a_t.column(i);
        let gi = &gr[i * c..(i + 1) * c];
        let mut dot = 0.0;
        for j in 0..n {
            let da: f64 = gi.iter().zip(&vr[j * c..(j + 1) * c]).map(|(x, y)| x * y).sum();
            ds[j] = da;
            dot += da * a[j];
        }
        let qi = &qr[i * c..(i + 1) * c];
        let dqi = &mut dq[i * c..(i + 1) * c];
        for j in 0..n {
            let s = a[j] * (ds[j] - dot) * scale;
            if s == 0.0 {
                continue;
            }
            let kj = &kr[j * c..(j + 1) * c];
            let dkj = &mut dk[j * c..(j + 1) * c];
            for t in 0..c {
                dqi[t] += s * kj[t];
                dkj[t] += s * qi[t];
            }
        }
    }
    let d_q = DMatrix::from_row_slice(nq, c, &dq);
    let d_k = DMatrix::from_row_slice(n, c, &dk);
    let grad = AttentionGrad {
        w_q: cache.queries.tr_mul(&d_q),
        w_k: cache.tokens.tr_mul(&d_k),
        w_v: cache.tokens.tr_mul(&d_v),
    };
    let d_queries = d_q * w.w_q.transpose();
    let d_tokens = d_k * w.w_k.transpose() + d_v * w.w_v.transpose();
    (grad, d_queries, d_tokens)
}

pub fn self_attention(tokens: &DMatrix<f64>, w: &AttentionWeights) -> Result<DMatrix<f64>> {
    Ok(attend(tokens, tokens, w)?.0)
}

fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    m.rows_mut(0, a.nrows()).copy_from(a);
    m.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    m
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}

/// Per-point reducer input for the mesh tokens: their own features next to the
/// attention output over grid and mesh tokens together.
fn fused_tokens(
    grid: &DMatrix<f64>,
    mesh: &DMatrix<f64>,
    w: &AttentionWeights,
) -> Result<(DMatrix<f64>, AttentionCache)> {
    check_len("grid feature width", mesh.ncols(), grid.ncols())?;
    let tokens = vstack(grid, mesh);
    let (out, cache) = attend(mesh, &tokens, w)?;
    Ok((hstack(mesh, &out), cache))
}

/// Attention-enhanced mesh-aligned feature vector.
pub fn fuse_grid_mesh(
    grid: &DMatrix<f64>,
    mesh: &DMatrix<f64>,
    w: &AttentionWeights,
    reducer: &Mlp,
) -> Result<DVector<f64>> {
    let (fused, _) = fused_tokens(grid, mesh, w)?;
    Ok(flatten_rows(&reducer.forward(&fused)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub iterations: usize,
    pub grid: usize,
    pub reduce_dim: usize,
    /// Hidden widths of the per-point reducer; empty means a single linear map.
    pub reducer_hidden: Vec<usize>,
    pub attention_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub use_attention: bool,
    /// Feature channels of the pyramid.
    pub channels: usize,
    /// Downsampled vertex count.
    pub mesh_points: usize,
    pub layout: ParamLayout,
    /// Gain of the last regressor layer at initialization.
    pub out_gain: f64,
}

impl NetConfig {
    pub fn for_model(model: &ArticulatedModel, channels: usize) -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            grid: crate::sampling::DEFAULT_GRID,
            reduce_dim: crate::sampling::DEFAULT_REDUCE_DIM,
            reducer_hidden: vec![32],
            attention_dim: DEFAULT_ATTENTION_DIM,
            hidden: 512,
            hidden_layers: 2,
            activation: Activation::LeakyRelu(0.1),
            use_attention: true,
            channels,
            mesh_points: model.num_reduced(),
            layout: ParamLayout::of(model),
            out_gain: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0
            || self.grid < 2
            || self.reduce_dim == 0
            || self.channels == 0
            || self.reducer_hidden.contains(&0)
        {
            return Err(Error::Config(
                "iterations, grid, reduce dim and channels must be positive".into(),
            ));
        }
        if self.use_attention && self.attention_dim == 0 {
            return Err(Error::Config("attention dimension must be positive".into()));
        }
        Ok(())
    }

    /// Number of sampled points at level `t`.
    pub fn points(&self, t: usize) -> usize {
        if t == 0 {
            self.grid * self.grid
        } else {
            self.mesh_points
        }
    }

    fn attends(&self, t: usize) -> bool {
        self.use_attention && t > 0
    }

    fn reducer_input(&self, t: usize) -> usize {
        if self.attends(t) {
            self.channels + self.attention_dim
        } else {
            self.channels
        }
    }

    pub fn regressor_input(&self, t: usize) -> usize {
        self.layout.dim() + self.points(t) * self.reduce_dim
    }

    fn reducer_dims(&self, t: usize) -> Vec<usize> {
        let mut dims = vec![self.reducer_input(t)];
        dims.extend(&self.reducer_hidden);
        dims.push(self.reduce_dim);
        dims
    }

    fn regressor_dims(&self, t: usize) -> Vec<usize> {
        let mut dims = vec![self.regressor_input(t)];
        dims.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        dims.push(self.layout.dim());
        dims
    }
}

/// Weights of one feedback iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub reducer: Mlp,
    pub attention: Option<AttentionWeights>,
    pub regressor: Mlp,
}

#[derive(Clone, Debug)]
pub struct LevelGrad {
    reducer: Vec<LinearGrad>,
    attention: Option<AttentionGrad>,
    regressor: Vec<LinearGrad>,
}

impl Parameters for Level {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.reducer.tensors();
        if let Some(a) = &self.attention {
            t.extend([a.w_q.as_slice(), a.w_k.as_slice(), a.w_v.as_slice()]);
        }
        t.extend(self.regressor.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.reducer.tensors_mut();
        if let Some(a) = &mut self.attention {
            t.extend([a.w_q.as_mut_slice(), a.w_k.as_mut_slice(), a.w_v.as_mut_slice()]);
        }
        t.extend(self.regressor.tensors_mut());
        t
    }
}

impl Parameters for LevelGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.reducer.tensors();
        if let Some(a) = &self.attention {
            t.extend([a.w_q.as_slice(), a.w_k.as_slice(), a.w_v.as_slice()]);
        }
        t.extend(self.regressor.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.reducer.tensors_mut();
        if let Some(a) = &mut self.attention {
            t.extend([a.w_q.as_mut_slice(), a.w_k.as_mut_slice(), a.w_v.as_mut_slice()]);
        }
        t.extend(self.regressor.tensors_mut());
        t
    }
}

/// Per-level reducers, attention blocks and regressors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackNet {
    pub config: NetConfig,
    pub levels: Vec<Level>,
}

impl FeedbackNet {
    /// Seeded initialization. Each tensor draws from its own stream, so the
    /// shared parts of runs with and without attention start identical and the
    /// attention columns of the reducer start at zero.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let levels = (0..config.iterations)
            .map(|t| {
                let t64 = t as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + t64));
                let dims = config.reducer_dims(t);
                let mut layers = Vec::with_capacity(dims.len() - 1);
                let first = Linear::xavier(config.channels, dims[1], 1.0, &mut rng);
                let mut weight = DMatrix::zeros(dims[0], dims[1]);
                weight.rows_mut(0, config.channels).copy_from(&first.weight);
                layers.push(Linear {
                    weight,
                    bias: first.bias,
                });
                for w in dims[1..].windows(2) {
                    layers.push(Linear::xavier(w[0], w[1], 1.0, &mut rng));
                }
                let reducer = Mlp {
                    layers,
                    activation: config.activation,
                };
                let attention = config.attends(t).then(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 300 + t64));
                    AttentionWeights::random(config.channels, config.attention_dim, &mut rng)
                });
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 200 + t64));
                let regressor = Mlp::new(&config.regressor_dims(t), config.activation, config.out_gain, &mut rng);
                Level {
                    reducer,
                    attention,
                    regressor,
                }
            })
            .collect();
        Ok(Self { config, levels })
    }

    /// All weights zero: every iteration leaves the parameters unchanged.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let levels = (0..config.iterations)
            .map(|t| Level {
                reducer: Mlp::zeros(&config.reducer_dims(t), config.activation),
                attention: config
                    .attends(t)
                    .then(|| AttentionWeights::zeros(config.channels, config.attention_dim)),
                regressor: Mlp::zeros(&config.regressor_dims(t), config.activation),
            })
            .collect();
        Ok(Self { config, levels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CheckpointDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(s)?;
        Self::try_from(&doc)
    }
}

#[derive(Serialize, Deserialize)]
struct AttentionDoc {
    w_q: MatrixDoc,
    w_k: MatrixDoc,
    w_v: MatrixDoc,
}

#[derive(Serialize, Deserialize)]
struct LevelDoc {
    reducer: MlpDoc,
    attention: Option<AttentionDoc>,
    regressor: MlpDoc,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    config: NetConfig,
    levels: Vec<LevelDoc>,
}

const CHECKPOINT_FORMAT: &str = "meshfeedback-checkpoint-v1";

impl From<&FeedbackNet> for CheckpointDoc {
    fn from(net: &FeedbackNet) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            config: net.config.clone(),
            levels: net
                .levels
                .iter()
                .map(|l| LevelDoc {
                    reducer: (&l.reducer).into(),
                    attention: l.attention.as_ref().map(|a| AttentionDoc {
                        w_q: (&a.w_q).into(),
                        w_k: (&a.w_k).into(),
                        w_v: (&a.w_v).into(),
                    }),
                    regressor: (&l.regressor).into(),
                })
                .collect(),
        }
    }
}

impl TryFrom<&CheckpointDoc> for FeedbackNet {
    type Error = Error;

    fn try_from(doc: &CheckpointDoc) -> Result<Self> {
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", doc.format)));
        }
        doc.config.validate()?;
        check_len("checkpoint levels", doc.config.iterations, doc.levels.len())?;
        let mut levels = Vec::with_capacity(doc.levels.len());
        for (t, l) in doc.levels.iter().enumerate() {
            let reducer = Mlp::try_from(&l.reducer)?;
            let regressor = Mlp::try_from(&l.regressor)?;
            check_len("reducer input", doc.config.reducer_input(t), reducer.input_dim())?;
            check_len("regressor input", doc.config.regressor_input(t), regressor.input_dim())?;
            check_len("regressor output", doc.config.layout.dim(), regressor.output_dim())?;
            let attention = match &l.attention {
                Some(a) => Some(AttentionWeights {
                    w_q: DMatrix::try_from(&a.w_q)?,
                    w_k: DMatrix::try_from(&a.w_k)?,
                    w_v: DMatrix::try_from(&a.w_v)?,
                }),
                None => None,
            };
            if attention.is_some() != doc.config.attends(t) {
                return Err(Error::Format(format!("attention block presence mismatch at level {t}")));
            }
            levels.push(Level {
                reducer,
                attention,
                regressor,
            });
        }
        Ok(Self {
            config: doc.config.clone(),
            levels,
        })
    }
}

/// One recorded step of the loop.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopState {
    pub t: usize,
    pub params: Vec<f64>,
    pub vertices: Vec<Vec3>,
    pub keypoints: Vec<Vec2>,
    /// Regression loss against ground truth, when it was available.
    pub loss: Option<f64>,
}

impl LoopState {
    pub fn from_params(model: &ArticulatedModel, layout: &ParamLayout, t: usize, params: Vec<f64>) -> Result<Self> {
        let fwd = observe(model, layout, &params)?;
        Ok(Self {
            t,
            params,
            vertices: fwd.posed.vertices,
            keypoints: fwd.observation.keypoints,
            loss: None,
        })
    }

    pub fn initial(model: &ArticulatedModel, layout: &ParamLayout) -> Result<Self> {
        Self::from_params(model, layout, 0, layout.mean())
    }
}

/// Reducer input rows for one scenario at level `t`, plus the attention cache.
fn level_tokens(
    net: &FeedbackNet,
    t: usize,
    model: &ArticulatedModel,
    pyramid: &FeaturePyramid,
    params: &[f64],
) -> Result<(DMatrix<f64>, Option<AttentionCache>)> {
    let cfg = &net.config;
    if t >= pyramid.len() {
        return Err(Error::Config(format!(
            "iteration {t} needs pyramid level {t}, have {}",
            pyramid.len()
        )));
    }
    check_len("pyramid channels", cfg.channels, pyramid.channels())?;
    let fm = pyramid.level(t);
    if t == 0 {
        return Ok((bilinear_sample(fm, &grid_points(cfg.grid)), None));
    }
    let decoded = cfg.layout.decode(params)?;
    let posed = model.pose(&decoded.rotations, &decoded.beta, &decoded.psi)?;
    let reduced = downsample(&posed.vertices, model)?;
    check_len("mesh points", cfg.mesh_points, reduced.len())?;
    let mesh = bilinear_sample(fm, &mesh_aligned_points(&reduced, &decoded.camera));
    match &net.levels[t].attention {
        Some(w) => {
            let grid = bilinear_sample(fm, &grid_points(cfg.grid));
            let (fused, cache) = fused_tokens(&grid, &mesh, w)?;
            Ok((fused, Some(cache)))
        }
        None => Ok((mesh, None)),
    }
}

struct LevelPass {
    attention: Vec<Option<AttentionCache>>,
    reducer_cache: MlpCache,
    regressor_cache: MlpCache,
    delta: DMatrix<f64>,
}

/// Batched forward of level `t` for several scenarios.
fn level_forward(
    net: &FeedbackNet,
    t: usize,
    model: &ArticulatedModel,
    batch: &[(&FeaturePyramid, &[f64])],
) -> Result<LevelPass> {
    let cfg = &net.config;
    let level = &net.levels[t];
    let p = cfg.points(t);
    let mut rows = DMatrix::zeros(batch.len() * p, cfg.reducer_input(t));
    let mut attention = Vec::with_capacity(batch.len());
    for (b, (pyr, params)) in batch.iter().enumerate() {
        let (tok, cache) = level_tokens(net, t, model, pyr, params)?;
        check_len("sampled points", p, tok.nrows())?;
        rows.rows_mut(b * p, p).copy_from(&tok);
        attention.push(cache);
    }
    let (reduced, reducer_cache) = level.reducer.forward_cached(&rows)?;
    let d = cfg.reduce_dim;
    let pd = cfg.layout.dim();
    let mut x = DMatrix::zeros(batch.len(), cfg.regressor_input(t));
    for (b, (_, params)) in batch.iter().enumerate() {
        check_len("parameter vector", pd, params.len())?;
        for (k, v) in params.iter().enumerate() {
            x[(b, k)] = *v;
        }
        for i in 0..p {
            for c in 0..d {
                x[(b, pd + i * d + c)] = reduced[(b * p + i, c)];
            }
        }
    }
    let (delta, regressor_cache) = level.regressor.forward_cached(&x)?;
    Ok(LevelPass {
        attention,
        reducer_cache,
        regressor_cache,
        delta,
    })
}

/// Parameter gradients of level `t` given `dL/dDelta` for each batch row.
fn level_backward(net: &FeedbackNet, t: usize, pass: &LevelPass, grad_delta: &DMatrix<f64>) -> LevelGrad {
    let cfg = &net.config;
    let level = &net.levels[t];
    let (regressor, dx) = level.regressor.backward(&pass.regressor_cache, grad_delta);
    let (p, d, pd) = (cfg.points(t), cfg.reduce_dim, cfg.layout.dim());
    let n = grad_delta.nrows();
    let mut d_reduced = DMatrix::zeros(n * p, d);
    for b in 0..n {
        for i in 0..p {
            for c in 0..d {
                d_reduced[(b * p + i, c)] = dx[(b, pd + i * d + c)];
            }
        }
    }
    let (reducer, d_rows) = level.reducer.backward(&pass.reducer_cache, &d_reduced);
    let attention = level.attention.as_ref().map(|w| {
        let mut acc = AttentionGrad {
            w_q: DMatrix::zeros(w.w_q.nrows(), w.w_q.ncols()),
            w_k: DMatrix::zeros(w.w_k.nrows(), w.w_k.ncols()),
            w_v: DMatrix::zeros(w.w_v.nrows(), w.w_v.ncols()),
        };
        for (b, cache) in pass.attention.iter().enumerate() {
            let Some(cache) = cache else { continue };
            let d_out = d_rows.view((b * p, cfg.channels), (p, cfg.attention_dim)).into_owned();
            let (g, _, _) = attention_backward(w, cache, &d_out);
            acc.w_q += g.w_q;
            acc.w_k += g.w_k;
            acc.w_v += g.w_v;
        }
        acc
    });
    LevelGrad {
        reducer,
        attention,
        regressor,
    }
}

/// One feedback step: `Θ_{t+1} = Θ_t + R_t(Θ_t, φ_t)`.
pub fn iterate(
    state: &LoopState,
    pyramid: &FeaturePyramid,
    model: &ArticulatedModel,
    net: &FeedbackNet,
) -> Result<LoopState> {
    let t = state.t;
    if t >= net.config.iterations {
        return Err(Error::Config(format!(
            "iteration {t} beyond configured {}",
            net.config.iterations
        )));
    }
    let pass = level_forward(net, t, model, &[(pyramid, &state.params)])?;
    let params: Vec<f64> = state
        .params
        .iter()
        .zip(pass.delta.row(0).iter())
        .map(|(a, b)| a + b)
        .collect();
    LoopState::from_params(model, &net.config.layout, t + 1, params)
}

/// Runs all iterations from the mean parameters; returns `T + 1` states.
pub fn run_loop(model: &ArticulatedModel, net: &FeedbackNet, pyramid: &FeaturePyramid) -> Result<Vec<LoopState>> {
    let mut states = vec![LoopState::initial(model, &net.config.layout)?];
    for _ in 0..net.config.iterations {
        let next = iterate(states.last().expect("nonempty"), pyramid, model, net)?;
        states.push(next);
    }
    Ok(states)
}

/// Ground-truth targets of a scenario.
pub fn targets(model: &ArticulatedModel, layout: &ParamLayout, s: &Scenario) -> Result<Observation> {
    Ok(Observation {
        keypoints: s.keypoints.clone(),
        joints: s.joints.clone(),
        params: layout.encode(&s.params, &vec![0.0; model.num_expressions()])?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub optimizer: OptimizerKind,
    /// Decoupled L2 shrinkage applied to every weight after each step.
    pub weight_decay: f64,
    /// Shrinkage used instead of `weight_decay` for the first iteration,
    /// which sees the mean estimate for every sample.
    pub first_weight_decay: f64,
    /// Offsets added to the incoming estimate of iteration 1; later
    /// iterations use this scaled by `perturbation_decay^(t-1)`.
    pub perturbation: Perturbation,
    pub perturbation_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            learning_rate: 1e-3,
            lr_decay: 0.97,
            batch_size: 10,
            seed: 0,
            loss: LossWeights {
                lambda_2d: 10.0,
                lambda_3d: 10.0,
                lambda_para: 1.0,
            },
            optimizer: OptimizerKind::default(),
            weight_decay: 0.0,
            first_weight_decay: 10.0,
            perturbation: Perturbation::DEFAULT,
            perturbation_decay: 0.4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-scenario loss summed over iterations, one entry per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean per-scenario loss per iteration, one row per epoch.
    pub level_losses: Vec<Vec<f64>>,
}

/// Trains a freshly initialized network. Iterations are trained jointly, each
/// on its own output loss, with the incoming parameters treated as constants.
pub fn train_toy(
    model: &ArticulatedModel,
    scenarios: &[Scenario],
    net_config: NetConfig,
    cfg: &TrainConfig,
) -> Result<(FeedbackNet, TrainReport)> {
    let mut net = FeedbackNet::new(net_config, derive_seed(cfg.seed, 7))?;
    let report = train(&mut net, model, scenarios, cfg)?;
    Ok((net, report))
}

pub fn train(
    net: &mut FeedbackNet,
    model: &ArticulatedModel,
    scenarios: &[Scenario],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.loss.validate()?;
    if scenarios.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config(
            "training needs scenarios and a positive batch size".into(),
        ));
    }
    let layout = net.config.layout;
    let targets: Vec<Observation> = scenarios
        .iter()
        .map(|s| targets(model, &layout, s))
        .collect::<Result<_>>()?;
    let mut optimizers: Vec<Optimizer> = net
        .levels
        .iter()
        .map(|l| Optimizer::new(cfg.optimizer, &l.tensors()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11));
    let mut order: Vec<usize> = (0..scenarios.len()).collect();
    let mut report = TrainReport::default();
    let mut lr = cfg.learning_rate;
    let iters = net.config.iterations;
    let mean = layout.mean();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut level_sum = vec![0.0; iters];
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut current: Vec<Vec<f64>> = vec![mean.clone(); chunk.len()];
            let mut grads = Vec::with_capacity(iters);
            for t in 0..iters {
                if t > 0 {
                    let p = cfg.perturbation.scaled(cfg.perturbation_decay.powi(t as i32 - 1));
                    if !p.is_none() {
                        for c in current.iter_mut() {
                            *c = layout.perturb(c, &p, &mut rng)?;
                        }
                    }
                }
                let batch: Vec<(&FeaturePyramid, &[f64])> = chunk
                    .iter()
                    .zip(&current)
                    .map(|(&i, p)| (&scenarios[i].pyramid, p.as_slice()))
                    .collect();
                let pass = level_forward(net, t, model, &batch)?;
                let mut g_delta = DMatrix::zeros(chunk.len(), layout.dim());
                let inv = 1.0 / chunk.len() as f64;
                for (b, &i) in chunk.iter().enumerate() {
                    let next: Vec<f64> = current[b]
                        .iter()
                        .zip(pass.delta.row(b).iter())
                        .map(|(a, d)| a + d)
                        .collect();
                    let (loss, g) = params_loss(model, &layout, &next, &targets[i], &cfg.loss)?;
                    if !loss.is_finite() {
                        return Err(Error::Diverged { epoch, step });
                    }
                    level_sum[t] += loss;
                    for (k, v) in g.iter().enumerate() {
                        g_delta[(b, k)] = v * inv;
                    }
                    current[b] = next;
                }
                grads.push(level_backward(net, t, &pass, &g_delta));
            }
            for (li, ((level, opt), g)) in net.levels.iter_mut().zip(&mut optimizers).zip(&grads).enumerate() {
                if g.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
                    return Err(Error::Diverged { epoch, step });
                }
                opt.update(level.tensors_mut(), g.tensors(), lr);
                let wd = if li == 0 {
                    cfg.first_weight_decay
                } else {
                    cfg.weight_decay
                };
                if wd > 0.0 {
                    let shrink = 1.0 - lr * wd;
                    for w in level.tensors_mut() {
                        w.iter_mut().for_each(|x| *x *= shrink);
                    }
                }
            }
        }
        let n = scenarios.len() as f64;
        let per_level: Vec<f64> = level_sum.iter().map(|s| s / n).collect();
        report.epoch_losses.push(per_level.iter().sum());
        report.level_losses.push(per_level);
        lr *= cfg.lr_decay;
    }
    Ok(report)
}

/// Mean per-vertex error (model units) of every loop state against each scenario.
pub fn evaluate(model: &ArticulatedModel, net: &FeedbackNet, scenarios: &[Scenario]) -> Result<Vec<Vec<f64>>> {
    scenarios
        .iter()
        .map(|s| {
            let states = run_loop(model, net, &s.pyramid)?;
            states
                .iter()
                .map(|st| crate::metrics::pve(&st.vertices, &s.vertices))
                .collect()
        })
        .collect()
}

/// `(PVE, MPJPE)` of every loop state against a scenario, in model units.
pub fn evaluate_states(model: &ArticulatedModel, states: &[LoopState], s: &Scenario) -> Result<Vec<(f64, f64)>> {
    states
        .iter()
        .map(|st| {
            let joints = model.regress_joints(&st.vertices)?;
            Ok((
                crate::metrics::pve(&st.vertices, &s.vertices)?,
                crate::metrics::mpjpe(&joints, &s.joints)?,
            ))
        })
        .collect()
}

/// Column means of [`evaluate`] output.
pub fn mean_errors(errors: &[Vec<f64>]) -> Vec<f64> {
    let n = errors.len().max(1) as f64;
    let cols = errors.first().map_or(0, |r| r.len());
    (0..cols)
        .map(|c| errors.iter().map(|r| r[c]).sum::<f64>() / n)
        .collect()
}
