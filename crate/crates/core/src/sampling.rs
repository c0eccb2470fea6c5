//! Point features from a feature pyramid: grid and mesh-aligned sampling points,
//! bilinear sampling and per-point dimension reduction.

use nalgebra::{DMatrix, DVector};

use crate::camera::{project_weak, Vec2, WeakPerspectiveCamera};
use crate::error::{check_len, Error, Result};
use crate::nn::Mlp;
use crate::rotmath::Vec3;

pub const DEFAULT_GRID: usize = 21;
pub const DEFAULT_REDUCE_DIM: usize = 5;
pub const DEFAULT_LEVEL_SIZES: [usize; 3] = [14, 28, 56];

/// Dense `C x H x W` grid stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::Config(format!(
                "feature map must be at least 2x2, got {height}x{width}"
            )));
        }
        check_len("feature map data", channels * height * width, data.len())?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Mean over non-overlapping `factor x factor` blocks.
    pub fn avg_pool(&self, factor: usize) -> Result<Self> {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Self::zeros(self.channels, h, w)?;
        let norm = 1.0 / (factor * factor) as f64;
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += self.get(c, y * factor + dy, x * factor + dx);
                        }
                    }
                    out.set(c, y, x, s * norm);
                }
            }
        }
        Ok(out)
    }
}

/// Levels ordered coarse to fine.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("feature pyramid needs at least one level".into()));
        }
        for pair in levels.windows(2) {
            if pair[1].height <= pair[0].height || pair[1].width <= pair[0].width {
                return Err(Error::Config("pyramid resolution must strictly increase".into()));
            }
            if pair[1].channels != pair[0].channels {
                return Err(Error::Config("pyramid levels must share channel count".into()));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn level(&self, t: usize) -> &FeatureMap {
        &self.levels[t]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointKind {
    Grid,
    MeshAligned,
}

/// 2D sampling points in normalized `[-1, 1]` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Vec<Vec2>,
    pub kind: PointKind,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `n x n` lattice spanning `[-1, 1]` inclusive, rows (y) outer.
pub fn grid_points(n: usize) -> PointSet {
    let coord = |i: usize| {
        if n == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    let points = (0..n)
        .flat_map(|y| (0..n).map(move |x| Vec2::new(coord(x), coord(y))))
        .collect();
    PointSet {
        points,
        kind: PointKind::Grid,
    }
}

/// Bilinear sampling with align-corners mapping; points outside the map are
/// clamped to its border. Returns `P x C`.
pub fn bilinear_sample(fm: &FeatureMap, pts: &PointSet) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(pts.len(), fm.channels);
    let (w, h) = (fm.width, fm.height);
    for (i, p) in pts.points.iter().enumerate() {
        let px = ((p.x.clamp(-1.0, 1.0) + 1.0) * 0.5 * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
        let py = ((p.y.clamp(-1.0, 1.0) + 1.0) * 0.5 * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
        let x0 = (px.floor() as usize).min(w - 2);
        let y0 = (py.floor() as usize).min(h - 2);
        let fx = px - x0 as f64;
        let fy = py - y0 as f64;
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        for c in 0..fm.channels {
            let base = c * h * w;
            let d = &fm.data;
            out[(i, c)] = w00 * d[base + y0 * w + x0]
                + w10 * d[base + y0 * w + x0 + 1]
                + w01 * d[base + (y0 + 1) * w + x0]
                + w11 * d[base + (y0 + 1) * w + x0 + 1];
        }
    }
    out
}

/// Projects reduced mesh vertices to sampling points.
pub fn mesh_aligned_points(mesh_reduced: &[Vec3], cam: &WeakPerspectiveCamera) -> PointSet {
    PointSet {
        points: project_weak(mesh_reduced, cam),
        kind: PointKind::MeshAligned,
    }
}

/// Applies `reducer` to every point row and concatenates the results in point order.
pub fn reduce_and_concat(point_feats: &DMatrix<f64>, reducer: &Mlp) -> Result<DVector<f64>> {
    let reduced = reducer.forward(point_feats)?;
    Ok(flatten_rows(&reduced))
}

/// Row-major flattening of a matrix.
pub fn flatten_rows(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.transpose().iter().copied())
}

/// Inverse of [`flatten_rows`].
pub fn unflatten_rows(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}
