//! Software rasterizer for dense-correspondence maps and the masked auxiliary loss.
//!
//! Pixel centers sit on the integer lattice of the align-corners mapping, so
//! normalized `-1` lands on the center of pixel 0.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{normalized_to_pixel, PerspectiveCamera, Vec2, WeakPerspectiveCamera};
use crate::error::{check_len, Error, Result};
use crate::kinematics::VertexAttributes;
use crate::rotmath::Vec3;

pub const DEFAULT_RESOLUTION: usize = 56;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_RESOLUTION,
            height: DEFAULT_RESOLUTION,
        }
    }
}

impl RasterConfig {
    pub fn square(size: usize) -> Result<Self> {
        let cfg = Self {
            width: size,
            height: size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config(format!(
                "raster resolution must be at least 8, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// How vertices reach the pixel lattice.
#[derive(Clone, Copy, Debug)]
pub enum Projection<'a> {
    Weak(&'a WeakPerspectiveCamera),
    /// Pixel coordinates straight from the pinhole model.
    Perspective(&'a PerspectiveCamera),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseCorrMap {
    pub width: usize,
    pub height: usize,
    /// 0 is background, parts are `1..=num_parts`.
    pub part_index: Vec<u8>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub pncc: Option<Vec<[f64; 3]>>,
    pub num_parts: u8,
}

impl DenseCorrMap {
    pub fn background(width: usize, height: usize, num_parts: u8, with_pncc: bool) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            part_index: vec![0; n],
            u: vec![0.0; n],
            v: vec![0.0; n],
            pncc: with_pncc.then(|| vec![[0.0; 3]; n]),
            num_parts,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn foreground(&self) -> impl Iterator<Item = bool> + '_ {
        self.part_index.iter().map(|&p| p != 0)
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground().filter(|&f| f).count()
    }

    /// For every pixel, the index of a nearby foreground pixel (itself when in
    /// the foreground). `None` only when the map has no foreground. The
    /// propagation is approximate: a few pixels get a source slightly farther
    /// than the true nearest one.
    pub fn nearest_foreground(&self) -> Vec<Option<usize>> {
        self.nearest_source(|p| p != 0)
    }

    /// Like [`Self::nearest_foreground`], restricted to pixels of one part.
    pub fn nearest_part(&self, part: u8) -> Vec<Option<usize>> {
        self.nearest_source(|p| p == part)
    }

    /// Two-pass nearest-source propagation over pixels whose part index
    /// satisfies `is_source`.
    fn nearest_source(&self, is_source: impl Fn(u8) -> bool) -> Vec<Option<usize>> {
        let (w, h) = (self.width as isize, self.height as isize);
        let mut src: Vec<Option<usize>> = self
            .part_index
            .iter()
            .enumerate()
            .map(|(k, &p)| is_source(p).then_some(k))
            .collect();
        let dist2 = |k: usize, s: usize| {
            let (dx, dy) = (
                (k % self.width) as f64 - (s % self.width) as f64,
                (k / self.width) as f64 - (s / self.width) as f64,
            );
            dx * dx + dy * dy
        };
        let forward = [(-1, -1), (0, -1), (1, -1), (-1, 0)];
        let backward = [(1, 1), (0, 1), (-1, 1), (1, 0)];
        for (offsets, rev) in [(forward, false), (backward, true)] {
            for step in 0..w * h {
                let k = if rev { w * h - 1 - step } else { step };
                let (x, y) = (k % w, k / w);
                for (dx, dy) in offsets {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let Some(cand) = src[(ny * w + nx) as usize] else {
                        continue;
                    };
                    let k = k as usize;
                    if src[k].is_none_or(|cur| dist2(k, cand) < dist2(k, cur)) {
                        src[k] = Some(cand);
                    }
                }
            }
        }
        src
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        check_len("part index", n, self.part_index.len())?;
        check_len("u channel", n, self.u.len())?;
        check_len("v channel", n, self.v.len())?;
        if let Some(p) = &self.pncc {
            check_len("pncc channel", n, p.len())?;
        }
        for i in 0..n {
            if self.part_index[i] > self.num_parts {
                return Err(Error::Format(format!(
                    "part index {} above {}",
                    self.part_index[i], self.num_parts
                )));
            }
            if self.part_index[i] == 0 && (self.u[i] != 0.0 || self.v[i] != 0.0) {
                return Err(Error::Format("nonzero uv on background pixel".into()));
            }
        }
        Ok(())
    }

    /// Part index as an 8-bit palette PNG.
    pub fn write_part_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette(self.num_parts));
        let mut w = enc.write_header()?;
        w.write_image_data(&self.part_index)?;
        w.finish()?;
        Ok(())
    }

    /// A `[0, 1]` channel as 16-bit grayscale.
    pub fn write_channel_png(&self, channel: &[f64], path: &Path) -> Result<()> {
        let bytes: Vec<u8> = channel.iter().flat_map(|&x| to_u16(x).to_be_bytes()).collect();
        write_png(path, self.width, self.height, png::ColorType::Grayscale, &bytes)
    }

    /// PNCC as 16-bit RGB. No-op when the map carries no PNCC.
    pub fn write_pncc_png(&self, path: &Path) -> Result<()> {
        let Some(pncc) = &self.pncc else {
            return Ok(());
        };
        let bytes: Vec<u8> = pncc
            .iter()
            .flat_map(|c| c.iter().flat_map(|&x| to_u16(x).to_be_bytes()))
            .collect();
        write_png(path, self.width, self.height, png::ColorType::Rgb, &bytes)
    }
}

fn to_u16(x: f64) -> u16 {
    (x.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut wr = enc.write_header()?;
    wr.write_image_data(bytes)?;
    wr.finish()?;
    Ok(())
}

fn palette(num_parts: u8) -> Vec<u8> {
    let mut p = vec![0u8, 0, 0];
    for i in 1..=num_parts as usize {
        // spread hues around the color wheel
        let h = (i - 1) as f64 / num_parts.max(1) as f64 * 6.0;
        let x = 1.0 - ((h % 2.0) - 1.0).abs();
        let (r, g, b) = match h as usize {
            0 => (1.0, x, 0.0),
            1 => (x, 1.0, 0.0),
            2 => (0.0, 1.0, x),
            3 => (0.0, x, 1.0),
            4 => (x, 0.0, 1.0),
            _ => (1.0, 0.0, x),
        };
        p.extend([r, g, b].map(|c: f64| (c * 255.0).round() as u8));
    }
    p
}

struct ScreenVertex {
    p: Vec2,
    depth: f64,
}

fn to_screen(vertices: &[Vec3], proj: Projection, cfg: &RasterConfig) -> Result<Vec<ScreenVertex>> {
    match proj {
        Projection::Weak(cam) => Ok(vertices
            .iter()
            .map(|x| {
                let n = cam.project_point(x);
                ScreenVertex {
                    p: Vec2::new(
                        normalized_to_pixel(n.x, cfg.width),
                        normalized_to_pixel(n.y, cfg.height),
                    ),
                    depth: x.z,
                }
            })
            .collect()),
        Projection::Perspective(cam) => vertices
            .iter()
            .map(|x| {
                let c = cam.to_camera(x)?;
                if c.z <= 1e-9 {
                    return Err(Error::BehindCamera(c.z));
                }
                Ok(ScreenVertex {
                    p: Vec2::new(
                        cam.focal[0] * c.x / c.z + cam.principal_point[0],
                        cam.focal[1] * c.y / c.z + cam.principal_point[1],
                    ),
                    depth: c.z,
                })
            })
            .collect(),
    }
}

fn edge(a: &Vec2, b: &Vec2, p: &Vec2) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Top or left edge of a positively oriented triangle in y-down coordinates.
fn is_top_left(a: &Vec2, b: &Vec2) -> bool {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

fn covers(w: f64, top_left: bool) -> bool {
    w > 0.0 || (w == 0.0 && top_left)
}

/// Point-in-triangle test with the same fill rule as the rasterizer.
pub fn point_in_triangle(a: &Vec2, b: &Vec2, c: &Vec2, p: &Vec2) -> bool {
    let area = edge(a, b, c);
    if area.abs() < 1e-12 {
        return false;
    }
    let (b, c) = if area < 0.0 { (c, b) } else { (b, c) };
    covers(edge(b, c, p), is_top_left(b, c))
        && covers(edge(c, a, p), is_top_left(c, a))
        && covers(edge(a, b, p), is_top_left(a, b))
}

/// Screen-space positions of the vertices in pixel units.
pub fn screen_positions(vertices: &[Vec3], proj: Projection, cfg: &RasterConfig) -> Result<Vec<Vec2>> {
    Ok(to_screen(vertices, proj, cfg)?.into_iter().map(|s| s.p).collect())
}

/// Renders part index, UV and (when present) PNCC attributes of the nearest
/// covering triangle at every pixel center.
pub fn rasterize(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    attrs: &VertexAttributes,
    num_parts: u8,
    proj: Projection,
    cfg: &RasterConfig,
) -> Result<DenseCorrMap> {
    cfg.validate()?;
    let nv = vertices.len();
    check_len("part attribute", nv, attrs.part_index.len())?;
    check_len("uv attribute", nv, attrs.uv.len())?;
    let with_pncc = !attrs.pncc.is_empty();
    if with_pncc {
        check_len("pncc attribute", nv, attrs.pncc.len())?;
    }
    if let Some(f) = faces.iter().flatten().find(|&&i| i >= nv) {
        return Err(Error::InvalidModel(format!("face references vertex {f} of {nv}")));
    }
    let perspective = matches!(proj, Projection::Perspective(_));
    let screen = to_screen(vertices, proj, cfg)?;
    let (w, h) = (cfg.width, cfg.height);
    let mut out = DenseCorrMap::background(w, h, num_parts, with_pncc);
    let mut zbuf = vec![f64::INFINITY; w * h];

    for face in faces {
        let [ia, mut ib, mut ic] = *face;
        let area = edge(&screen[ia].p, &screen[ib].p, &screen[ic].p);
        if area.abs() < 1e-12 {
            continue;
        }
        if area < 0.0 {
            std::mem::swap(&mut ib, &mut ic);
        }
        let area = area.abs();
        let (a, b, c) = (&screen[ia], &screen[ib], &screen[ic]);
        let tl = [
            is_top_left(&b.p, &c.p),
            is_top_left(&c.p, &a.p),
            is_top_left(&a.p, &b.p),
        ];
        let xmin = a.p.x.min(b.p.x).min(c.p.x).ceil().max(0.0);
        let xmax = a.p.x.max(b.p.x).max(c.p.x).floor().min((w - 1) as f64);
        let ymin = a.p.y.min(b.p.y).min(c.p.y).ceil().max(0.0);
        let ymax = a.p.y.max(b.p.y).max(c.p.y).floor().min((h - 1) as f64);
        if xmin > xmax || ymin > ymax {
            continue;
        }
        for py in ymin as usize..=ymax as usize {
            for px in xmin as usize..=xmax as usize {
                let p = Vec2::new(px as f64, py as f64);
                let e = [edge(&b.p, &c.p, &p), edge(&c.p, &a.p, &p), edge(&a.p, &b.p, &p)];
                if !(0..3).all(|k| covers(e[k], tl[k])) {
                    continue;
                }
                let mut lam = e.map(|x| x / area);
                let depth = if perspective {
                    let inv = [lam[0] / a.depth, lam[1] / b.depth, lam[2] / c.depth];
                    let s = inv[0] + inv[1] + inv[2];
                    lam = inv.map(|x| x / s);
                    1.0 / s
                } else {
                    lam[0] * a.depth + lam[1] * b.depth + lam[2] * c.depth
                };
                let k = py * w + px;
                if !(depth < zbuf[k]) {
                    continue;
                }
                zbuf[k] = depth;
                let ids = [ia, ib, ic];
                let dominant = (0..3).fold(0, |best, i| if lam[i] > lam[best] { i } else { best });
                out.part_index[k] = attrs.part_index[ids[dominant]];
                let mix = |f: &dyn Fn(usize) -> f64| lam[0] * f(ia) + lam[1] * f(ib) + lam[2] * f(ic);
                out.u[k] = mix(&|i| attrs.uv[i][0]);
                out.v[k] = mix(&|i| attrs.uv[i][1]);
                if let Some(pn) = out.pncc.as_mut() {
                    pn[k] = [0, 1, 2].map(|ch| mix(&|i| attrs.pncc[i][ch]));
                }
            }
        }
    }
    // a dominant vertex on background part leaves the pixel background
    for k in 0..w * h {
        if out.part_index[k] == 0 {
            out.u[k] = 0.0;
            out.v[k] = 0.0;
            if let Some(pn) = out.pncc.as_mut() {
                pn[k] = [0.0; 3];
            }
        }
    }
    Ok(out)
}

/// Per-pixel class scores and UV regression outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxPrediction {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Class-major `num_classes x H x W` unnormalized scores.
    pub logits: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl AuxPrediction {
    /// A prediction agreeing with `gt`, with the true class ahead by `margin`.
    pub fn from_map(gt: &DenseCorrMap, margin: f64) -> Self {
        let n = gt.len();
        let classes = gt.num_parts as usize + 1;
        let mut logits = vec![0.0; classes * n];
        for (k, &p) in gt.part_index.iter().enumerate() {
            logits[p as usize * n + k] = margin;
        }
        Self {
            width: gt.width,
            height: gt.height,
            num_classes: classes,
            logits,
            u: gt.u.clone(),
            v: gt.v.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxWeights {
    pub lambda_pi: f64,
    pub lambda_uv: f64,
}

impl Default for AuxWeights {
    fn default() -> Self {
        Self {
            lambda_pi: 1.0,
            lambda_uv: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxGradient {
    pub logits: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Pixel-mean cross-entropy on the part index plus smooth-L1 on U and V over
/// ground-truth foreground pixels. Background pixels never read the predicted UV.
pub fn aux_loss(pred: &AuxPrediction, gt: &DenseCorrMap, weights: &AuxWeights) -> Result<f64> {
    Ok(aux_loss_inner(pred, gt, weights, false)?.0)
}

pub fn aux_loss_with_grad(pred: &AuxPrediction, gt: &DenseCorrMap, weights: &AuxWeights) -> Result<(f64, AuxGradient)> {
    let (l, g) = aux_loss_inner(pred, gt, weights, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn aux_loss_inner(
    pred: &AuxPrediction,
    gt: &DenseCorrMap,
    weights: &AuxWeights,
    want_grad: bool,
) -> Result<(f64, Option<AuxGradient>)> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Dimension {
            what: "aux map resolution",
            expected: gt.width * gt.height,
            got: pred.width * pred.height,
        });
    }
    let n = gt.len();
    let classes = pred.num_classes;
    check_len("aux classes", gt.num_parts as usize + 1, classes)?;
    check_len("aux logits", classes * n, pred.logits.len())?;
    check_len("aux u", n, pred.u.len())?;
    check_len("aux v", n, pred.v.len())?;
    let inv_n = 1.0 / n as f64;
    let mut grad = want_grad.then(|| AuxGradient {
        logits: vec![0.0; classes * n],
        u: vec![0.0; n],
        v: vec![0.0; n],
    });
    let mut ce = 0.0;
    let mut uv = 0.0;
    for k in 0..n {
        let target = gt.part_index[k] as usize;
        let max = (0..classes)
            .map(|c| pred.logits[c * n + k])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..classes).map(|c| (pred.logits[c * n + k] - max).exp()).sum();
        let lse = max + sum.ln();
        ce += lse - pred.logits[target * n + k];
        if let Some(g) = grad.as_mut() {
            for c in 0..classes {
                let p = (pred.logits[c * n + k] - lse).exp();
                let y = if c == target { 1.0 } else { 0.0 };
                g.logits[c * n + k] = weights.lambda_pi * (p - y) * inv_n;
            }
        }
        if target == 0 {
            continue;
        }
        let du = pred.u[k] - gt.u[k];
        let dv = pred.v[k] - gt.v[k];
        uv += smooth_l1(du) + smooth_l1(dv);
        if let Some(g) = grad.as_mut() {
            g.u[k] = weights.lambda_uv * smooth_l1_grad(du) * inv_n;
            g.v[k] = weights.lambda_uv * smooth_l1_grad(dv) * inv_n;
        }
    }
    Ok(((weights.lambda_pi * ce + weights.lambda_uv * uv) * inv_n, grad))
}
