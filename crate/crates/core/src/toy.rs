//! Procedural stand-ins for body, hand and full-body parametric models.
//!
//! Each model is a set of capsule-like tubes around the bones of a fixed
//! skeleton. Frames follow the image convention: x right, y down, z away
//! from the camera. The seed jitters bone proportions and the start of the
//! farthest-point vertex selection used to build the downsample matrix.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::kinematics::{ArticulatedModel, KinematicTree, SparseMatrix, VertexAttributes};
use crate::rotmath::Vec3;

pub const BODY_JOINTS: usize = 22;
pub const HAND_JOINTS: usize = 16;
pub const FULLBODY_JOINTS: usize = 55;
pub const LEFT_ELBOW: usize = 18;
pub const RIGHT_ELBOW: usize = 19;
pub const LEFT_WRIST: usize = 20;
pub const RIGHT_WRIST: usize = 21;

const RING_FRACTIONS: [f64; 4] = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
const RING_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyKind {
    Body,
    Hand,
    FullBody,
}

impl ToyKind {
    pub fn name(self) -> &'static str {
        match self {
            ToyKind::Body => "body",
            ToyKind::Hand => "hand",
            ToyKind::FullBody => "fullbody",
        }
    }

    pub fn default_reduced(self) -> usize {
        match self {
            ToyKind::Body => 96,
            ToyKind::Hand => 48,
            ToyKind::FullBody => 160,
        }
    }
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "body" => Ok(ToyKind::Body),
            "hand" => Ok(ToyKind::Hand),
            "fullbody" => Ok(ToyKind::FullBody),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

struct JointSpec {
    name: String,
    parent: Option<usize>,
    pos: Vec3,
    part: u8,
    radius: f64,
}

struct Skeleton {
    joints: Vec<JointSpec>,
    /// Leaf extensions: (joint, end point, radius).
    ends: Vec<(usize, Vec3, f64)>,
    num_parts: u8,
}

const TORSO: u8 = 1;
const HEAD: u8 = 2;
const LEFT_ARM: u8 = 3;
const RIGHT_ARM: u8 = 4;
const LEFT_LEG: u8 = 5;
const RIGHT_LEG: u8 = 6;

fn body_skeleton() -> Skeleton {
    #[rustfmt::skip]
    let table: [(&str, Option<usize>, [f64; 3], u8, f64); BODY_JOINTS] = [
        ("pelvis", None, [0.0, 0.0, 0.0], TORSO, 0.0),
        ("left_hip", Some(0), [0.09, 0.08, 0.0], LEFT_LEG, 0.08),
        ("right_hip", Some(0), [-0.09, 0.08, 0.0], RIGHT_LEG, 0.08),
        ("spine1", Some(0), [0.0, -0.11, 0.0], TORSO, 0.13),
        ("left_knee", Some(1), [0.10, 0.47, 0.0], LEFT_LEG, 0.065),
        ("right_knee", Some(2), [-0.10, 0.47, 0.0], RIGHT_LEG, 0.065),
        ("spine2", Some(3), [0.0, -0.24, 0.0], TORSO, 0.13),
        ("left_ankle", Some(4), [0.10, 0.87, 0.0], LEFT_LEG, 0.045),
        ("right_ankle", Some(5), [-0.10, 0.87, 0.0], RIGHT_LEG, 0.045),
        ("spine3", Some(6), [0.0, -0.34, 0.0], TORSO, 0.14),
        ("left_foot", Some(7), [0.11, 0.93, -0.10], LEFT_LEG, 0.035),
        ("right_foot", Some(8), [-0.11, 0.93, -0.10], RIGHT_LEG, 0.035),
        ("neck", Some(9), [0.0, -0.52, 0.0], TORSO, 0.12),
        ("left_collar", Some(9), [0.07, -0.45, 0.0], TORSO, 0.06),
        ("right_collar", Some(9), [-0.07, -0.45, 0.0], TORSO, 0.06),
        ("head", Some(12), [0.0, -0.60, 0.0], HEAD, 0.05),
        ("left_shoulder", Some(13), [0.18, -0.46, 0.0], LEFT_ARM, 0.055),
        ("right_shoulder", Some(14), [-0.18, -0.46, 0.0], RIGHT_ARM, 0.055),
        ("left_elbow", Some(16), [0.44, -0.46, 0.0], LEFT_ARM, 0.045),
        ("right_elbow", Some(17), [-0.44, -0.46, 0.0], RIGHT_ARM, 0.045),
        ("left_wrist", Some(18), [0.69, -0.46, 0.0], LEFT_ARM, 0.035),
        ("right_wrist", Some(19), [-0.69, -0.46, 0.0], RIGHT_ARM, 0.035),
    ];
    let joints = table
        .iter()
        .map(|(n, p, x, part, r)| JointSpec {
            name: n.to_string(),
            parent: *p,
            pos: Vec3::new(x[0], x[1], x[2]),
            part: *part,
            radius: *r,
        })
        .collect();
    Skeleton {
        joints,
        ends: vec![
            (15, Vec3::new(0.0, -0.82, 0.0), 0.09),
            (20, Vec3::new(0.86, -0.46, 0.0), 0.04),
            (21, Vec3::new(-0.86, -0.46, 0.0), 0.04),
            (10, Vec3::new(0.11, 0.95, -0.17), 0.03),
            (11, Vec3::new(-0.11, 0.95, -0.17), 0.03),
        ],
        num_parts: 6,
    }
}

/// Finger joints in index, middle, pinky, ring, thumb order, three per finger,
/// for a left hand whose wrist sits at `wrist` and points along `sign * x`.
fn finger_specs(
    wrist: usize,
    origin: Vec3,
    sign: f64,
    first_index: usize,
    parts: [u8; 5],
) -> (Vec<JointSpec>, Vec<(usize, Vec3, f64)>) {
    // base offset (x, z) and per-phalanx lengths
    let fingers: [(&str, [f64; 3], [f64; 3]); 5] = [
        ("index", [0.085, 0.0, -0.025], [0.035, 0.025, 0.02]),
        ("middle", [0.09, 0.0, -0.005], [0.038, 0.027, 0.021]),
        ("pinky", [0.075, 0.0, 0.035], [0.026, 0.019, 0.016]),
        ("ring", [0.085, 0.0, 0.016], [0.034, 0.025, 0.019]),
        ("thumb", [0.03, 0.0, -0.045], [0.03, 0.028, 0.024]),
    ];
    let side = if sign > 0.0 { "left" } else { "right" };
    let mut joints = Vec::new();
    let mut ends = Vec::new();
    for (f, (name, base, lens)) in fingers.iter().enumerate() {
        let dir = if *name == "thumb" {
            Vec3::new(sign * 0.7, 0.0, -0.7).normalize()
        } else {
            Vec3::new(sign, 0.0, 0.0)
        };
        let mut pos = origin + Vec3::new(sign * base[0], base[1], base[2]);
        for k in 0..3 {
            let idx = first_index + joints.len();
            let parent = if k == 0 { wrist } else { idx - 1 };
            joints.push(JointSpec {
                name: format!("{side}_{name}{}", k + 1),
                parent: Some(parent),
                pos,
                part: parts[f],
                radius: if k == 0 { 0.011 } else { 0.009 },
            });
            pos += dir * lens[k];
        }
        ends.push((first_index + joints.len() - 1, pos, 0.008));
    }
    (joints, ends)
}

fn hand_skeleton() -> Skeleton {
    let mut joints = vec![JointSpec {
        name: "wrist".into(),
        parent: None,
        pos: Vec3::zeros(),
        part: 1,
        radius: 0.0,
    }];
    let (fingers, ends) = finger_specs(0, Vec3::zeros(), 1.0, 1, [2, 3, 4, 5, 6]);
    joints.extend(fingers);
    Skeleton {
        joints,
        ends,
        num_parts: 6,
    }
}

fn fullbody_skeleton() -> Skeleton {
    let mut sk = body_skeleton();
    // wrists are no longer leaves; drop their hand stubs
    sk.ends.retain(|e| e.0 != LEFT_WRIST && e.0 != RIGHT_WRIST);
    let head_parts: [(&str, [f64; 3], f64); 3] = [
        ("jaw", [0.0, -0.57, -0.04], 0.03),
        ("left_eye", [0.03, -0.66, -0.08], 0.01),
        ("right_eye", [-0.03, -0.66, -0.08], 0.01),
    ];
    for (n, p, r) in head_parts {
        sk.joints.push(JointSpec {
            name: n.into(),
            parent: Some(15),
            pos: Vec3::new(p[0], p[1], p[2]),
            part: HEAD,
            radius: r,
        });
    }
    sk.ends.push((22, Vec3::new(0.0, -0.55, -0.10), 0.025));
    sk.ends.push((23, Vec3::new(0.03, -0.66, -0.10), 0.008));
    sk.ends.push((24, Vec3::new(-0.03, -0.66, -0.10), 0.008));
    let lw = sk.joints[LEFT_WRIST].pos;
    let rw = sk.joints[RIGHT_WRIST].pos;
    let (lj, le) = finger_specs(LEFT_WRIST, lw, 1.0, 25, [LEFT_ARM; 5]);
    sk.joints.extend(lj);
    sk.ends.extend(le);
    let (rj, re) = finger_specs(RIGHT_WRIST, rw, -1.0, 40, [RIGHT_ARM; 5]);
    sk.joints.extend(rj);
    sk.ends.extend(re);
    sk
}

fn ring_basis(d: &Vec3) -> (Vec3, Vec3) {
    let helper = if d.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let e1 = helper.cross(d).normalize();
    let e2 = d.cross(&e1);
    (e1, e2)
}

struct Segment {
    start: Vec3,
    end: Vec3,
    radius: f64,
    driver: usize,
    /// Joint blended in at the end ring, if any.
    end_joint: Option<usize>,
    part: u8,
    cap: bool,
}

/// Deterministic toy model with the default reduced vertex count for `kind`.
pub fn generate(kind: ToyKind, seed: u64) -> ArticulatedModel {
    generate_with(kind, seed, kind.default_reduced())
}

pub fn generate_with(kind: ToyKind, seed: u64, reduced: usize) -> ArticulatedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sk = match kind {
        ToyKind::Body => body_skeleton(),
        ToyKind::Hand => hand_skeleton(),
        ToyKind::FullBody => fullbody_skeleton(),
    };
    // proportion jitter: scale each bone offset by up to 3%
    let n = sk.joints.len();
    let mut new_pos = vec![Vec3::zeros(); n];
    let mut end_shift = vec![Vec3::zeros(); n];
    for j in 0..n {
        new_pos[j] = match sk.joints[j].parent {
            None => sk.joints[j].pos,
            Some(p) => {
                let s = 1.0 + rng.random_range(-0.03..0.03);
                new_pos[p] + (sk.joints[j].pos - sk.joints[p].pos) * s
            }
        };
        end_shift[j] = new_pos[j] - sk.joints[j].pos;
    }
    for (j, js) in sk.joints.iter_mut().enumerate() {
        js.pos = new_pos[j];
    }
    for e in &mut sk.ends {
        e.1 += end_shift[e.0];
    }

    let mut segments = Vec::new();
    for (j, js) in sk.joints.iter().enumerate() {
        if let Some(p) = js.parent {
            segments.push(Segment {
                start: sk.joints[p].pos,
                end: js.pos,
                radius: js.radius,
                driver: p,
                end_joint: Some(j),
                part: js.part,
                cap: false,
            });
        }
    }
    for &(j, end, r) in &sk.ends {
        segments.push(Segment {
            start: sk.joints[j].pos,
            end,
            radius: r,
            driver: j,
            end_joint: None,
            part: sk.joints[j].part,
            cap: true,
        });
    }

    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let mut weights: Vec<(usize, usize, f64)> = Vec::new();
    let mut parts = Vec::new();
    let mut centers = Vec::new();
    let mut regress: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut limb_axis = Vec::new();

    for seg in &segments {
        let d = (seg.end - seg.start).normalize();
        let (e1, e2) = ring_basis(&d);
        let base = verts.len();
        for (ri, &f) in RING_FRACTIONS.iter().enumerate() {
            let center = seg.start + (seg.end - seg.start) * f;
            for k in 0..RING_SIZE {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / RING_SIZE as f64;
                let idx = verts.len();
                verts.push(center + (e1 * phi.cos() + e2 * phi.sin()) * seg.radius);
                centers.push(center);
                parts.push(seg.part);
                limb_axis.push(d);
                let blend: Vec<(usize, f64)> = if ri == 0 {
                    match sk.joints[seg.driver].parent {
                        Some(gp) => vec![(gp, 0.5), (seg.driver, 0.5)],
                        None => vec![(seg.driver, 1.0)],
                    }
                } else if ri == RING_FRACTIONS.len() - 1 {
                    match seg.end_joint {
                        Some(c) => vec![(seg.driver, 0.5), (c, 0.5)],
                        None => vec![(seg.driver, 1.0)],
                    }
                } else {
                    vec![(seg.driver, 1.0)]
                };
                for (j, w) in blend {
                    weights.push((idx, j, w));
                }
                if ri == 0 {
                    regress[seg.driver].push(idx);
                }
                if ri == RING_FRACTIONS.len() - 1 {
                    if let Some(c) = seg.end_joint {
                        regress[c].push(idx);
                    }
                }
            }
        }
        for ri in 0..RING_FRACTIONS.len() - 1 {
            for k in 0..RING_SIZE {
                let a = base + ri * RING_SIZE + k;
                let b = base + ri * RING_SIZE + (k + 1) % RING_SIZE;
                let c = a + RING_SIZE;
                let dd = b + RING_SIZE;
                faces.push([a, b, c]);
                faces.push([b, dd, c]);
            }
        }
        if seg.cap {
            let tip = verts.len();
            verts.push(seg.end + d * seg.radius * 0.5);
            centers.push(seg.end + d * seg.radius * 0.5);
            parts.push(seg.part);
            limb_axis.push(d);
            weights.push((tip, seg.driver, 1.0));
            let last = base + (RING_FRACTIONS.len() - 1) * RING_SIZE;
            for k in 0..RING_SIZE {
                faces.push([last + k, last + (k + 1) % RING_SIZE, tip]);
            }
        }
    }
    // merge duplicate (vertex, joint) weight entries
    weights.sort_by_key(|a| (a.0, a.1));
    let mut merged: Vec<(usize, usize, f64)> = Vec::new();
    for w in weights {
        match merged.last_mut() {
            Some(m) if m.0 == w.0 && m.1 == w.1 => m.2 += w.2,
            _ => merged.push(w),
        }
    }

    let nv = verts.len();
    let mut reg_trip = Vec::new();
    for (j, vs) in regress.iter().enumerate() {
        let w = 1.0 / vs.len() as f64;
        for &v in vs {
            reg_trip.push((j, v, w));
        }
    }

    let shape = shape_directions(&verts, &centers);
    let expression = if kind == ToyKind::FullBody {
        let head_center = sk.joints[15].pos;
        vec![
            verts
                .iter()
                .zip(&parts)
                .map(|(v, &p)| {
                    if p == HEAD && v.y > head_center.y {
                        Vec3::new(0.0, 0.02, -0.01)
                    } else {
                        Vec3::zeros()
                    }
                })
                .collect(),
            verts
                .iter()
                .zip(&parts)
                .map(|(v, &p)| {
                    if p == HEAD {
                        Vec3::new(0.15 * (v.x - head_center.x), 0.0, 0.0)
                    } else {
                        Vec3::zeros()
                    }
                })
                .collect(),
        ]
    } else {
        Vec::new()
    };

    let attrs = attributes(&verts, &parts, sk.num_parts);
    let start = rng.random_range(0..nv);
    let down = farthest_point_downsample(&verts, reduced.min(nv), start);

    let tree = KinematicTree::new(
        sk.joints.iter().map(|j| j.parent).collect(),
        sk.joints.iter().map(|j| j.name.clone()).collect(),
    )
    .expect("toy skeleton is topologically ordered");
    ArticulatedModel {
        kind: kind.name().to_string(),
        template_vertices: verts,
        faces,
        tree,
        joint_regressor: SparseMatrix::from_triplets(n, nv, &reg_trip).expect("regressor"),
        skin_weights: SparseMatrix::from_triplets(nv, n, &merged).expect("weights"),
        shape_blendshapes: shape,
        expression_blendshapes: expression,
        vertex_attributes: attrs,
        downsample_matrix: down,
        num_parts: sk.num_parts,
    }
}

fn shape_directions(verts: &[Vec3], centers: &[Vec3]) -> Vec<Vec<Vec3>> {
    let size: Vec<Vec3> = verts.iter().map(|v| v * 0.06).collect();
    let girth: Vec<Vec3> = verts.iter().zip(centers).map(|(v, c)| (v - c) * 0.25).collect();
    let legs: Vec<Vec3> = verts.iter().map(|v| Vec3::new(0.0, 0.06 * v.y.max(0.0), 0.0)).collect();
    let span: Vec<Vec3> = verts
        .iter()
        .map(|v| Vec3::new(0.08 * v.x.signum() * (v.x.abs() - 0.15).max(0.0), 0.0, 0.0))
        .collect();
    vec![size, girth, legs, span]
}

fn attributes(verts: &[Vec3], parts: &[u8], num_parts: u8) -> VertexAttributes {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for v in verts {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    let ext = (hi - lo).map(|e| if e > 0.0 { e } else { 1.0 });
    let pncc = verts
        .iter()
        .map(|v| {
            let p = (v - lo).component_div(&ext);
            [p.x, p.y, p.z]
        })
        .collect();
    let mut uv = vec![[0.0; 2]; verts.len()];
    for part in 1..=num_parts {
        let idx: Vec<usize> = (0..verts.len()).filter(|&i| parts[i] == part).collect();
        if idx.is_empty() {
            continue;
        }
        let mut plo = Vec3::repeat(f64::INFINITY);
        let mut phi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &idx {
            plo = plo.inf(&verts[i]);
            phi = phi.sup(&verts[i]);
        }
        let pext = phi - plo;
        let mut axes = [0usize, 1, 2];
        axes.sort_by(|&a, &b| pext[b].partial_cmp(&pext[a]).unwrap());
        let (a, b) = (axes[0], axes[1]);
        for &i in &idx {
            let u = if pext[a] > 0.0 {
                (verts[i][a] - plo[a]) / pext[a]
            } else {
                0.0
            };
            let v = if pext[b] > 0.0 {
                (verts[i][b] - plo[b]) / pext[b]
            } else {
                0.0
            };
            uv[i] = [u, v];
        }
    }
    VertexAttributes {
        part_index: parts.to_vec(),
        uv,
        pncc,
    }
}

/// Farthest-point selection of `count` vertices; each row averages the
/// selected vertex with its two nearest neighbours.
pub fn farthest_point_downsample(verts: &[Vec3], count: usize, start: usize) -> SparseMatrix {
    let n = verts.len();
    let mut chosen = Vec::with_capacity(count);
    let mut dist = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..count {
        chosen.push(cur);
        for (i, v) in verts.iter().enumerate() {
            dist[i] = dist[i].min((v - verts[cur]).norm_squared());
        }
        cur = (0..n)
            .max_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(b.cmp(&a)))
            .unwrap_or(0);
    }
    let mut trip = Vec::new();
    for (r, &c) in chosen.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).filter(|&i| i != c).collect();
        order.sort_by(|&a, &b| {
            (verts[a] - verts[c])
                .norm_squared()
                .partial_cmp(&(verts[b] - verts[c]).norm_squared())
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut members = vec![c];
        members.extend(order.into_iter().take(2));
        let w = 1.0 / members.len() as f64;
        for m in members {
            trip.push((r, m, w));
        }
    }
    SparseMatrix::from_triplets(count, n, &trip).expect("downsample")
}
