//! Seeded synthetic scenarios: a random ground-truth pose, its dense-correspondence
//! render and a noisy feature pyramid built from that render.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{project_weak, Vec2, WeakPerspectiveCamera};
use crate::error::{Error, Result};
use crate::kinematics::{ArticulatedModel, ModelParams};
use crate::raster::{rasterize, DenseCorrMap, Projection, RasterConfig};
use crate::rotmath::{Quaternion, RotationValue, Vec3};
use crate::sampling::{FeatureMap, FeaturePyramid, DEFAULT_LEVEL_SIZES};

/// Channels shared by every model, in order. The `near_*` channels carry the
/// correspondence of the nearest foreground pixel everywhere, and `offset_*`
/// points from the pixel to it in normalized image units.
pub const BASE_CHANNELS: [&str; 12] = [
    "mask", "part", "u", "v", "pncc_x", "pncc_y", "pncc_z", "near_x", "near_y", "near_z", "offset_x", "offset_y",
];

/// All channel names for a render with `num_parts` parts: the base channels
/// followed by an offset pair towards the nearest pixel of each part.
pub fn channel_names(num_parts: u8) -> Vec<String> {
    let mut names: Vec<String> = BASE_CHANNELS.iter().map(|s| s.to_string()).collect();
    for p in 1..=num_parts {
        names.push(format!("part{p}_dx"));
        names.push(format!("part{p}_dy"));
    }
    names
}

/// SplitMix64 finalizer used to derive independent stream seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Body joints that carry most of the pose variation by default.
pub const ARTICULATED: [&str; 8] = [
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Pyramid resolutions, coarse to fine; each must divide `render_size`.
    pub level_sizes: Vec<usize>,
    /// Resolution of the ground-truth render that every level is pooled from.
    pub render_size: usize,
    pub noise_std: f64,
    /// Per-component std of the rotation vector of the `articulated` joints (radians).
    pub pose_std: f64,
    /// Same, for every other non-root joint.
    pub minor_std: f64,
    /// Multiplies the x and y rotation-vector components of every joint;
    /// values below 1 favor articulation in the image plane.
    pub out_of_plane: f64,
    pub root_std: f64,
    /// Joint names that receive `pose_std`; unknown names are ignored.
    pub articulated: Vec<String>,
    pub beta_std: f64,
    pub scale_mean: f64,
    /// Relative half-range of the uniform scale jitter.
    pub scale_jitter: f64,
    pub translation_mean: [f64; 2],
    pub translation_jitter: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            level_sizes: DEFAULT_LEVEL_SIZES.to_vec(),
            render_size: 224,
            noise_std: 0.02,
            pose_std: 0.35,
            minor_std: 0.0,
            out_of_plane: 0.0,
            root_std: 0.1,
            articulated: ARTICULATED.iter().map(|s| s.to_string()).collect(),
            beta_std: 1.0,
            scale_mean: 0.85,
            scale_jitter: 0.0,
            translation_mean: [0.0, -0.06],
            translation_jitter: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub seed: u64,
    pub params: ModelParams,
    pub vertices: Vec<Vec3>,
    /// Joints regressed from the posed mesh.
    pub joints: Vec<Vec3>,
    pub keypoints: Vec<Vec2>,
    pub render: DenseCorrMap,
    pub pyramid: FeaturePyramid,
}

fn random_rotation(rng: &mut ChaCha8Rng, std: f64, xy_factor: f64) -> RotationValue {
    let mut g = || <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
    let r = Vec3::new(std * xy_factor * g(), std * xy_factor * g(), std * g());
    RotationValue::Quaternion(Quaternion::from_rotation_vector(&r))
}

/// Random ground-truth parameters for `model`.
pub fn sample_params(model: &ArticulatedModel, rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> Result<ModelParams> {
    let theta = (0..model.num_joints())
        .map(|j| {
            if model.tree.parent(j).is_none() {
                return random_rotation(rng, cfg.root_std, cfg.out_of_plane);
            }
            let std = if cfg.articulated.iter().any(|n| *n == model.tree.names()[j]) {
                cfg.pose_std
            } else {
                cfg.minor_std
            };
            random_rotation(rng, std, cfg.out_of_plane)
        })
        .collect();
    let beta = (0..model.num_betas())
        .map(|_| cfg.beta_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    let scale = cfg.scale_mean * (1.0 + rng.random_range(-cfg.scale_jitter..=cfg.scale_jitter));
    let t = cfg.translation_jitter;
    let translation = [
        cfg.translation_mean[0] + rng.random_range(-t..=t),
        cfg.translation_mean[1] + rng.random_range(-t..=t),
    ];
    Ok(ModelParams {
        theta,
        beta,
        camera: WeakPerspectiveCamera::new(scale, translation)?,
    })
}

/// Stacks the render into the feature channels listed by [`channel_names`].
pub fn encode_render(render: &DenseCorrMap) -> Result<FeatureMap> {
    let (w, h) = (render.width, render.height);
    let n = w * h;
    let channels = channel_names(render.num_parts).len();
    let mut data = vec![0.0; channels * n];
    let parts = render.num_parts.max(1) as f64;
    let (sx, sy) = (2.0 / (w.max(2) - 1) as f64, 2.0 / (h.max(2) - 1) as f64);
    for p in 1..=render.num_parts {
        let base = (BASE_CHANNELS.len() + 2 * (p as usize - 1)) * n;
        for (k, src) in render.nearest_part(p).into_iter().enumerate() {
            let Some(s) = src else { continue };
            data[base + k] = ((s % w) as f64 - (k % w) as f64) * sx;
            data[base + n + k] = ((s / w) as f64 - (k / w) as f64) * sy;
        }
    }
    for (k, src) in render.nearest_foreground().into_iter().enumerate() {
        let Some(s) = src else { continue };
        if let Some(pn) = &render.pncc {
            for c in 0..3 {
                data[(7 + c) * n + k] = pn[s][c];
            }
        }
        data[10 * n + k] = ((s % w) as f64 - (k % w) as f64) * sx;
        data[11 * n + k] = ((s / w) as f64 - (k / w) as f64) * sy;
    }
    for k in 0..n {
        let p = render.part_index[k];
        if p == 0 {
            continue;
        }
        data[k] = 1.0;
        data[n + k] = p as f64 / parts;
        data[2 * n + k] = render.u[k];
        data[3 * n + k] = render.v[k];
        if let Some(pn) = &render.pncc {
            for c in 0..3 {
                data[(4 + c) * n + k] = pn[k][c];
            }
        }
    }
    FeatureMap::new(channels, h, w, data)
}

/// Average-pools the encoded render to every level and adds seeded Gaussian noise.
pub fn encode_pyramid(render: &DenseCorrMap, cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<FeaturePyramid> {
    let finest = render.width;
    if render.height != finest {
        return Err(Error::Config(format!(
            "render must be square, got {}x{}",
            render.width, render.height
        )));
    }
    let base = encode_render(render)?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut levels = Vec::with_capacity(cfg.level_sizes.len());
    for &size in &cfg.level_sizes {
        if size == 0 || !finest.is_multiple_of(size) {
            return Err(Error::Config(format!("level size {size} does not divide {finest}")));
        }
        let pooled = base.avg_pool(finest / size)?;
        let data = pooled.data().iter().map(|&x| x + noise.sample(rng)).collect();
        levels.push(FeatureMap::new(pooled.channels(), size, size, data)?);
    }
    FeaturePyramid::new(levels)
}

/// Builds everything a scenario needs from `params`.
pub fn build(model: &ArticulatedModel, seed: u64, params: ModelParams, cfg: &ScenarioConfig) -> Result<Scenario> {
    params.validate(model)?;
    let rotations = params.rotation_matrices()?;
    let psi = vec![0.0; model.num_expressions()];
    let posed = model.pose(&rotations, &params.beta, &psi)?;
    let joints = model.regress_joints(&posed.vertices)?;
    let keypoints = project_weak(&joints, &params.camera);
    let size = cfg.render_size;
    let render = rasterize(
        &posed.vertices,
        &model.faces,
        &model.vertex_attributes,
        model.num_parts,
        Projection::Weak(&params.camera),
        &RasterConfig::square(size)?,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let pyramid = encode_pyramid(&render, cfg, &mut rng)?;
    Ok(Scenario {
        seed,
        params,
        vertices: posed.vertices,
        joints,
        keypoints,
        render,
        pyramid,
    })
}

/// One scenario, fully determined by `seed`.
pub fn synthesize(model: &ArticulatedModel, seed: u64, cfg: &ScenarioConfig) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let params = sample_params(model, &mut rng, cfg)?;
    build(model, seed, params, cfg)
}

/// `count` scenarios with seeds derived from `base_seed`.
pub fn scenario_set(
    model: &ArticulatedModel,
    base_seed: u64,
    count: usize,
    cfg: &ScenarioConfig,
) -> Result<Vec<Scenario>> {
    (0..count)
        .map(|i| synthesize(model, derive_seed(base_seed, 1000 + i as u64), cfg))
        .collect()
}
