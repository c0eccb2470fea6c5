//! Joint and vertex errors, similarity Procrustes alignment and keypoint similarity.
//!
//! Errors are reported in model units; the CLI scales meters to millimeters.

use nalgebra::SVD;

use crate::camera::Vec2;
use crate::error::{check_len, Error, Result};
use crate::rotmath::{Mat3, Vec3};

pub const METERS_TO_MM: f64 = 1000.0;

fn mean_distance(pred: &[Vec3], gt: &[Vec3], what: &'static str) -> Result<f64> {
    check_len(what, gt.len(), pred.len())?;
    if gt.is_empty() {
        return Err(Error::Dimension {
            what,
            expected: 1,
            got: 0,
        });
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).norm()).sum::<f64>() / gt.len() as f64)
}

/// Mean per-joint position error.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mean_distance(pred, gt, "joints")
}

/// Mean per-vertex error.
pub fn pve(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mean_distance(pred, gt, "vertices")
}

/// Similarity transform `x -> s R x + t` taking a prediction onto ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentResult {
    pub rotation: Mat3,
    pub scale: f64,
    pub translation: Vec3,
    pub residual_rmse: f64,
}

impl AlignmentResult {
    pub fn apply(&self, pts: &[Vec3]) -> Vec<Vec3> {
        pts.iter()
            .map(|p| self.rotation * p * self.scale + self.translation)
            .collect()
    }
}

fn centroid(pts: &[Vec3]) -> Vec3 {
    pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64
}

fn spread_rank_ok(centered: &[Vec3]) -> bool {
    let cov = centered.iter().fold(Mat3::zeros(), |a, x| a + x * x.transpose());
    let mut sv: Vec<f64> = cov.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv[0] > 0.0 && sv[1] > 1e-12 * sv[0]
}

/// Least-squares similarity alignment with a proper rotation (det +1).
pub fn procrustes(pred: &[Vec3], gt: &[Vec3]) -> Result<AlignmentResult> {
    check_len("procrustes points", gt.len(), pred.len())?;
    if pred.len() < 3 {
        return Err(Error::RankDeficient);
    }
    let n = pred.len() as f64;
    let (mp, mg) = (centroid(pred), centroid(gt));
    let x: Vec<Vec3> = pred.iter().map(|p| p - mp).collect();
    let y: Vec<Vec3> = gt.iter().map(|p| p - mg).collect();
    if !spread_rank_ok(&x) || !spread_rank_ok(&y) {
        return Err(Error::RankDeficient);
    }
    let cov = x
        .iter()
        .zip(&y)
        .fold(Mat3::zeros(), |a, (xi, yi)| a + yi * xi.transpose())
        / n;
    let svd = SVD::new(cov, true, true);
    let u = svd.u.ok_or(Error::RankDeficient)?;
    let vt = svd.v_t.ok_or(Error::RankDeficient)?;
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    // nalgebra orders singular values descending, so the flip hits the smallest
    let rotation = u * d * vt;
    let var_x = x.iter().map(|v| v.norm_squared()).sum::<f64>() / n;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_x;
    let translation = mg - rotation * mp * scale;
    let mut result = AlignmentResult {
        rotation,
        scale,
        translation,
        residual_rmse: 0.0,
    };
    let aligned = result.apply(pred);
    result.residual_rmse = (aligned.iter().zip(gt).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / n).sqrt();
    Ok(result)
}

pub fn pa_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mpjpe(&procrustes(pred, gt)?.apply(pred), gt)
}

pub fn pa_pve(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    pve(&procrustes(pred, gt)?.apply(pred), gt)
}

/// Mean of `exp(-d^2 / (2 s^2 sigma^2))` over labeled keypoints.
pub fn oks(pred: &[Vec2], gt: &[Vec2], labeled: &[bool], scale: f64, sigmas: &[f64]) -> Result<f64> {
    check_len("oks keypoints", gt.len(), pred.len())?;
    check_len("oks labels", gt.len(), labeled.len())?;
    check_len("oks sigmas", gt.len(), sigmas.len())?;
    if !(scale > 0.0) {
        return Err(Error::Config(format!("oks scale must be positive, got {scale}")));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in (0..gt.len()).filter(|&i| labeled[i]) {
        let d2 = (pred[i] - gt[i]).norm_squared();
        sum += (-d2 / (2.0 * scale * scale * sigmas[i] * sigmas[i])).exp();
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoLabeledKeypoints);
    }
    Ok(sum / count as f64)
}
