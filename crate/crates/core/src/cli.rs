//! Batch commands behind the `meshfeedback` binary.
//!
//! Every command is a pure function of its options: the same seed and
//! inputs always produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::feedback::{evaluate_states, FeedbackNet, NetConfig, TrainConfig};
use crate::integration::{fullbody_joints, integrate, synthetic_estimates, visibility_gate, PartEstimates, Strategy};
use crate::io::{load_model, read_json, save_model, write_json, MeshDoc};
use crate::kinematics::{ArticulatedModel, ModelParams};
use crate::metrics::{mpjpe, pa_mpjpe, pa_pve, pve, METERS_TO_MM};
use crate::raster::{rasterize, Projection, RasterConfig};
use crate::rotmath::TwistRange;
use crate::scenario::{channel_names, derive_seed, sample_params, scenario_set, ScenarioConfig};
use crate::toy::{generate, ToyKind};

/// Finest pyramid level; coarser levels halve it.
const FINEST_LEVEL: usize = 56;
const MAX_ITERATIONS: usize = 4;

/// Pyramid sizes for `iterations` levels, coarse to fine.
pub fn level_sizes(iterations: usize) -> Result<Vec<usize>> {
    if iterations == 0 || iterations > MAX_ITERATIONS {
        return Err(Error::Config(format!(
            "iterations must lie in 1..={MAX_ITERATIONS}, got {iterations}"
        )));
    }
    Ok((0..iterations).rev().map(|k| FINEST_LEVEL >> k).collect())
}

fn model_or_generated(path: Option<&Path>, kind: ToyKind, seed: u64) -> Result<ArticulatedModel> {
    match path {
        Some(p) => load_model(p),
        None => Ok(generate(kind, seed)),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn mm(x: f64) -> f64 {
    x * METERS_TO_MM
}

pub fn genmodel(kind: ToyKind, seed: u64, out: &Path) -> Result<ArticulatedModel> {
    let m = generate(kind, seed);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_model(out, &m)?;
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct RefineOptions {
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub iterations: usize,
    pub grid: usize,
    pub reduce_dim: usize,
    /// Held-out scenarios evaluated and dumped.
    pub scenarios: usize,
    /// Training scenarios; zero skips training.
    pub train: usize,
    pub epochs: usize,
    pub weights: Option<PathBuf>,
    pub zero_weights: bool,
    pub out: PathBuf,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            model: None,
            seed: 0,
            iterations: crate::feedback::DEFAULT_ITERATIONS,
            grid: crate::sampling::DEFAULT_GRID,
            reduce_dim: crate::sampling::DEFAULT_REDUCE_DIM,
            scenarios: 20,
            train: 0,
            epochs: TrainConfig::default().epochs,
            weights: None,
            zero_weights: false,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineSummary {
    /// Mean PVE per loop state in millimeters, `M_0..M_T`.
    pub mean_pve_mm: Vec<f64>,
    pub mean_mpjpe_mm: Vec<f64>,
}

/// Runs the feedback loop on held-out scenarios and writes `metrics.csv`,
/// one mesh document per scenario and iteration, and `weights.json` when
/// the network was trained here.
pub fn refine(opts: &RefineOptions) -> Result<RefineSummary> {
    if opts.weights.is_some() && (opts.zero_weights || opts.train > 0) {
        return Err(Error::Config("--weights excludes --zero-weights and --train".into()));
    }
    let model = model_or_generated(opts.model.as_deref(), ToyKind::Body, 0)?;
    let sc = ScenarioConfig {
        level_sizes: level_sizes(opts.iterations)?,
        ..ScenarioConfig::default()
    };
    let mut config = NetConfig::for_model(&model, channel_names(model.num_parts).len());
    config.iterations = opts.iterations;
    config.grid = opts.grid;
    config.reduce_dim = opts.reduce_dim;
    create_dir(&opts.out)?;
    let net = if let Some(w) = &opts.weights {
        let net = FeedbackNet::load(w)?;
        if net.config.layout != config.layout
            || net.config.channels != config.channels
            || net.config.iterations != opts.iterations
            || net.config.mesh_points != config.mesh_points
        {
            return Err(Error::Config(
                "weights do not match the model or iteration count".into(),
            ));
        }
        net
    } else if opts.zero_weights {
        FeedbackNet::zeros(config)?
    } else if opts.train > 0 {
        let train = scenario_set(&model, derive_seed(opts.seed, 1), opts.train, &sc)?;
        let cfg = TrainConfig {
            epochs: opts.epochs,
            seed: opts.seed,
            ..TrainConfig::default()
        };
        let (net, _) = crate::feedback::train_toy(&model, &train, config, &cfg)?;
        net.save(&opts.out.join("weights.json"))?;
        net
    } else {
        FeedbackNet::new(config, derive_seed(opts.seed, 7))?
    };
    let test = scenario_set(&model, derive_seed(opts.seed, 2), opts.scenarios, &sc)?;
    let meshes = opts.out.join("meshes");
    create_dir(&meshes)?;
    let t_max = opts.iterations;
    let mut w = csv::Writer::from_path(opts.out.join("metrics.csv"))?;
    let mut header = vec!["scenario".to_string(), "seed".to_string()];
    header.extend((0..=t_max).map(|t| format!("pve_mm_{t}")));
    header.extend((0..=t_max).map(|t| format!("mpjpe_mm_{t}")));
    w.write_record(&header)?;
    let mut sum_pve = vec![0.0; t_max + 1];
    let mut sum_mpjpe = vec![0.0; t_max + 1];
    for (i, s) in test.iter().enumerate() {
        let states = crate::feedback::run_loop(&model, &net, &s.pyramid)?;
        let errs = evaluate_states(&model, &states, s)?;
        let mut row = vec![i.to_string(), s.seed.to_string()];
        row.extend(errs.iter().map(|e| format!("{:.6}", mm(e.0))));
        row.extend(errs.iter().map(|e| format!("{:.6}", mm(e.1))));
        w.write_record(&row)?;
        for (t, e) in errs.iter().enumerate() {
            sum_pve[t] += mm(e.0);
            sum_mpjpe[t] += mm(e.1);
        }
        for st in &states {
            write_json(
                &meshes.join(format!("s{i:04}_t{}.json", st.t)),
                &MeshDoc::new(i, st.t, &st.vertices),
            )?;
        }
    }
    w.flush()?;
    let n = test.len().max(1) as f64;
    Ok(RefineSummary {
        mean_pve_mm: sum_pve.iter().map(|x| x / n).collect(),
        mean_mpjpe_mm: sum_mpjpe.iter().map(|x| x / n).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct IntegrateOptions {
    pub model: Option<PathBuf>,
    /// Synthetic estimates from `seed` when absent.
    pub estimates: Option<PathBuf>,
    pub seed: u64,
    pub strategy: Strategy,
    pub range: TwistRange,
    pub vis_threshold: f64,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct JointsDoc {
    num_joints: usize,
    positions: Vec<[f64; 3]>,
}

/// Writes `fullbody_params.json`, `report.json` (flat key-value) and `joints.json`.
pub fn integrate_cmd(opts: &IntegrateOptions) -> Result<crate::integration::IntegrationReport> {
    let model = model_or_generated(opts.model.as_deref(), ToyKind::FullBody, 0)?;
    let est: PartEstimates = match &opts.estimates {
        Some(p) => read_json(p)?,
        None => synthetic_estimates(&model, opts.seed)?,
    };
    let gated = visibility_gate(&est, opts.vis_threshold)?;
    let (fb, report) = integrate(&model, &gated, opts.strategy, &opts.range)?;
    let (joints, _) = fullbody_joints(&model, &fb)?;
    create_dir(&opts.out)?;
    write_json(&opts.out.join("fullbody_params.json"), &fb)?;
    let kv: BTreeMap<String, String> = report.to_key_values()?.into_iter().collect();
    write_json(&opts.out.join("report.json"), &kv)?;
    write_json(
        &opts.out.join("joints.json"),
        &JointsDoc {
            num_joints: joints.len(),
            positions: joints.iter().map(|p| [p.x, p.y, p.z]).collect(),
        },
    )?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct RenderOptions {
    pub model: Option<PathBuf>,
    /// Parameters sampled from `seed` when absent.
    pub params: Option<PathBuf>,
    pub seed: u64,
    pub resolution: usize,
    pub out: PathBuf,
}

/// Writes `part.png`, `u.png`, `v.png` and, when the model has PNCC, `pncc.png`.
pub fn render(opts: &RenderOptions) -> Result<usize> {
    let model = model_or_generated(opts.model.as_deref(), ToyKind::Body, 0)?;
    let params: ModelParams = match &opts.params {
        Some(p) => read_json(p)?,
        None => {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(opts.seed, 1));
            sample_params(&model, &mut rng, &ScenarioConfig::default())?
        }
    };
    params.validate(&model)?;
    params.camera.validate()?;
    let posed = model.pose(
        &params.rotation_matrices()?,
        &params.beta,
        &vec![0.0; model.num_expressions()],
    )?;
    let map = rasterize(
        &posed.vertices,
        &model.faces,
        &model.vertex_attributes,
        model.num_parts,
        Projection::Weak(&params.camera),
        &RasterConfig::square(opts.resolution)?,
    )?;
    create_dir(&opts.out)?;
    map.write_part_png(&opts.out.join("part.png"))?;
    map.write_channel_png(&map.u, &opts.out.join("u.png"))?;
    map.write_channel_png(&map.v, &opts.out.join("v.png"))?;
    map.write_pncc_png(&opts.out.join("pncc.png"))?;
    Ok(map.foreground_count())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pve_mm: f64,
    pub pa_pve_mm: f64,
}

/// Compares two parameter files on `model` and writes `metrics.json`.
pub fn eval(model: Option<&Path>, pred: &Path, gt: &Path, out: &Path) -> Result<EvalReport> {
    let model = model_or_generated(model, ToyKind::Body, 0)?;
    let psi = vec![0.0; model.num_expressions()];
    let pose = |p: &Path| -> Result<(Vec<_>, Vec<_>)> {
        let params: ModelParams = read_json(p)?;
        params.validate(&model)?;
        let posed = model.pose(&params.rotation_matrices()?, &params.beta, &psi)?;
        let joints = model.regress_joints(&posed.vertices)?;
        Ok((posed.vertices, joints))
    };
    let (pv, pj) = pose(pred)?;
    let (gv, gj) = pose(gt)?;
    let report = EvalReport {
        mpjpe_mm: mm(mpjpe(&pj, &gj)?),
        pa_mpjpe_mm: mm(pa_mpjpe(&pj, &gj)?),
        pve_mm: mm(pve(&pv, &gv)?),
        pa_pve_mm: mm(pa_pve(&pv, &gv)?),
    };
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

/// One-line machine-readable form of an error.
pub fn error_line(e: &Error) -> String {
    format!(
        "error kind={} message={}",
        e.kind(),
        serde_json::Value::String(e.to_string())
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_sizes_halve_toward_coarse() {
        assert_eq!(level_sizes(3).unwrap(), vec![14, 28, 56]);
        assert_eq!(level_sizes(1).unwrap(), vec![56]);
        assert!(level_sizes(0).is_err());
        assert!(level_sizes(5).is_err());
    }

    #[test]
    fn error_line_is_single_line() {
        let e = Error::Config("bad\nvalue".into());
        let l = error_line(&e);
        assert!(!l.contains('\n'));
        assert!(l.starts_with("error kind=config message="));
    }
}
