//! Kinematic tree, shape blending, forward kinematics and linear blend skinning.

use serde::{Deserialize, Serialize};

use crate::camera::WeakPerspectiveCamera;
use crate::error::{check_len, Error, Result};
use crate::rotmath::{Mat3, RotationValue, Vec3};

/// Joint hierarchy stored in topological order.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicTree {
    parents: Vec<Option<usize>>,
    names: Vec<String>,
}

impl KinematicTree {
    pub fn new(parents: Vec<Option<usize>>, names: Vec<String>) -> Result<Self> {
        check_len("joint names", parents.len(), names.len())?;
        if parents.is_empty() || parents[0].is_some() {
            return Err(Error::InvalidModel("joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::InvalidModel(format!(
                        "joint {j} must have a parent with a smaller index"
                    )))
                }
            }
        }
        Ok(Self { parents, names })
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(j))
            .map(|(c, _)| c)
    }

    /// Ancestors of `j` including `j`, ordered root first.
    pub fn chain(&self, j: usize) -> Vec<usize> {
        let mut out = vec![j];
        let mut cur = j;
        while let Some(p) = self.parents[cur] {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// True when `a` lies on the path from the root to `b` (or equals it).
    pub fn is_ancestor(&self, a: usize, b: usize) -> bool {
        let mut cur = Some(b);
        while let Some(c) = cur {
            if c == a {
                return true;
            }
            cur = self.parents[c];
        }
        false
    }
}

/// Row-compressed sparse matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut data = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::InvalidModel(format!(
                    "sparse entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            data[r].push((c, v));
        }
        for row in &mut data {
            row.sort_by_key(|e| e.0);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            data: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.data[r]
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.data
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(c, v)| (r, c, v)))
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.iter().map(|row| row.iter().map(|e| e.1).sum()).collect()
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.data
            .iter()
            .all(|row| row.iter().all(|e| e.1 >= 0.0) && (row.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() <= tol)
    }

    pub fn mul_points(&self, pts: &[Vec3]) -> Result<Vec<Vec3>> {
        check_len("sparse multiply", self.cols, pts.len())?;
        Ok(self
            .data
            .iter()
            .map(|row| row.iter().fold(Vec3::zeros(), |acc, &(c, v)| acc + pts[c] * v))
            .collect())
    }

    /// `selfᵀ * grads`, accumulated into `out`.
    pub fn mul_points_transposed_into(&self, grads: &[Vec3], out: &mut [Vec3]) {
        for (row, g) in self.data.iter().zip(grads) {
            for &(c, v) in row {
                out[c] += g * v;
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VertexAttributes {
    /// Coarse body-part label per vertex, starting at 1 (0 is background).
    pub part_index: Vec<u8>,
    pub uv: Vec<[f64; 2]>,
    /// Rest-pose coordinates normalized into `[0, 1]` per axis.
    pub pncc: Vec<[f64; 3]>,
}

/// Template mesh, skeleton, regressors, skinning weights and blendshapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ArticulatedModel {
    pub kind: String,
    pub template_vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub tree: KinematicTree,
    /// `J x V`.
    pub joint_regressor: SparseMatrix,
    /// `V x J`.
    pub skin_weights: SparseMatrix,
    pub shape_blendshapes: Vec<Vec<Vec3>>,
    pub expression_blendshapes: Vec<Vec<Vec3>>,
    pub vertex_attributes: VertexAttributes,
    /// `Ṽ x V`.
    pub downsample_matrix: SparseMatrix,
    pub num_parts: u8,
}

impl ArticulatedModel {
    pub fn num_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.tree.len()
    }

    pub fn num_betas(&self) -> usize {
        self.shape_blendshapes.len()
    }

    pub fn num_expressions(&self) -> usize {
        self.expression_blendshapes.len()
    }

    pub fn num_reduced(&self) -> usize {
        self.downsample_matrix.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.num_vertices();
        let j = self.num_joints();
        let bad = |m: &str| Err(Error::InvalidModel(m.to_string()));
        if self.joint_regressor.rows() != j || self.joint_regressor.cols() != v {
            return bad("joint regressor shape");
        }
        if self.skin_weights.rows() != v || self.skin_weights.cols() != j {
            return bad("skin weight shape");
        }
        if self.downsample_matrix.cols() != v {
            return bad("downsample matrix shape");
        }
        if !self.skin_weights.is_row_stochastic(1e-6) {
            return bad("skin weights must be nonnegative rows summing to 1");
        }
        if self.joint_regressor.row_sums().iter().any(|s| (s - 1.0).abs() > 1e-6) {
            return bad("joint regressor rows must sum to 1");
        }
        if self.downsample_matrix.row_sums().iter().any(|s| (s - 1.0).abs() > 1e-6) {
            return bad("downsample rows must sum to 1");
        }
        for b in self.shape_blendshapes.iter().chain(&self.expression_blendshapes) {
            if b.len() != v {
                return bad("blendshape vertex count");
            }
        }
        if self.faces.iter().flatten().any(|&i| i >= v) {
            return bad("face index out of range");
        }
        let a = &self.vertex_attributes;
        if a.part_index.len() != v || a.uv.len() != v || a.pncc.len() != v {
            return bad("vertex attribute count");
        }
        if a.part_index.iter().any(|&p| p > self.num_parts) {
            return bad("part index above part count");
        }
        Ok(())
    }

    /// Pose, shape and expression to a fully posed mesh.
    pub fn pose(&self, theta: &[Mat3], beta: &[f64], psi: &[f64]) -> Result<PosedState> {
        let (shaped, rest) = shape_blend(self, beta, psi)?;
        let mut posed = forward_kinematics(&self.tree, theta, &rest)?;
        posed.vertices = lbs(&shaped, &posed, self)?;
        Ok(posed)
    }

    pub fn regress_joints(&self, vertices: &[Vec3]) -> Result<Vec<Vec3>> {
        self.joint_regressor.mul_points(vertices)
    }
}

/// Pose `θ`, shape `β` and camera `π` for one part model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta: Vec<RotationValue>,
    pub beta: Vec<f64>,
    pub camera: WeakPerspectiveCamera,
}

impl ModelParams {
    pub fn rest(model: &ArticulatedModel) -> Self {
        Self {
            theta: vec![RotationValue::identity(); model.num_joints()],
            beta: vec![0.0; model.num_betas()],
            camera: WeakPerspectiveCamera::default(),
        }
    }

    pub fn validate(&self, model: &ArticulatedModel) -> Result<()> {
        check_len("theta", model.num_joints(), self.theta.len())?;
        check_len("beta", model.num_betas(), self.beta.len())
    }

    pub fn rotation_matrices(&self) -> Result<Vec<Mat3>> {
        self.theta.iter().map(|r| r.to_matrix()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosedState {
    pub global_rotations: Vec<Mat3>,
    pub joint_positions: Vec<Vec3>,
    /// Empty until skinning has run.
    pub vertices: Vec<Vec3>,
}

/// Template plus shape and expression offsets, and the joints regressed from it.
pub fn shape_blend(model: &ArticulatedModel, beta: &[f64], psi: &[f64]) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    check_len("beta", model.num_betas(), beta.len())?;
    check_len("psi", model.num_expressions(), psi.len())?;
    let mut shaped = model.template_vertices.clone();
    let dirs = model
        .shape_blendshapes
        .iter()
        .zip(beta)
        .chain(model.expression_blendshapes.iter().zip(psi));
    for (dir, &c) in dirs {
        if c == 0.0 {
            continue;
        }
        for (s, d) in shaped.iter_mut().zip(dir) {
            *s += d * c;
        }
    }
    let rest = model.joint_regressor.mul_points(&shaped)?;
    Ok((shaped, rest))
}

/// Global rotations by ancestor product and joint positions by the rigid bone-offset recurrence.
pub fn forward_kinematics(tree: &KinematicTree, theta: &[Mat3], rest_joints: &[Vec3]) -> Result<PosedState> {
    check_len("theta", tree.len(), theta.len())?;
    check_len("rest joints", tree.len(), rest_joints.len())?;
    let n = tree.len();
    let mut global_rotations = Vec::with_capacity(n);
    let mut joint_positions = Vec::with_capacity(n);
    for j in 0..n {
        match tree.parent(j) {
            None => {
                global_rotations.push(theta[j]);
                joint_positions.push(rest_joints[j]);
            }
            Some(p) => {
                let gp: Mat3 = global_rotations[p];
                global_rotations.push(gp * theta[j]);
                let pos = joint_positions[p] + gp * (rest_joints[j] - rest_joints[p]);
                joint_positions.push(pos);
            }
        }
    }
    Ok(PosedState {
        global_rotations,
        joint_positions,
        vertices: Vec::new(),
    })
}

/// Linear blend skinning of the shaped rest mesh.
pub fn lbs(shaped: &[Vec3], posed: &PosedState, model: &ArticulatedModel) -> Result<Vec<Vec3>> {
    check_len("shaped vertices", model.num_vertices(), shaped.len())?;
    check_len("posed joints", model.num_joints(), posed.joint_positions.len())?;
    let rest = model.joint_regressor.mul_points(shaped)?;
    Ok(lbs_with_rest(shaped, &rest, posed, model))
}

fn lbs_with_rest(shaped: &[Vec3], rest: &[Vec3], posed: &PosedState, model: &ArticulatedModel) -> Vec<Vec3> {
    shaped
        .iter()
        .enumerate()
        .map(|(i, x)| {
            model.skin_weights.row(i).iter().fold(Vec3::zeros(), |acc, &(j, w)| {
                acc + (posed.global_rotations[j] * (x - rest[j]) + posed.joint_positions[j]) * w
            })
        })
        .collect()
}

pub fn downsample(vertices: &[Vec3], model: &ArticulatedModel) -> Result<Vec<Vec3>> {
    model.downsample_matrix.mul_points(vertices)
}

/// Gradients of a scalar loss with respect to the model inputs.
#[derive(Clone, Debug)]
pub struct PoseGradient {
    /// With respect to each joint's relative rotation matrix.
    pub theta: Vec<Mat3>,
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
}

/// Reverse pass of [`ArticulatedModel::pose`] given `dL/dvertices` and
/// optionally `dL/djoint_positions` on the skeleton.
pub fn pose_backward(
    model: &ArticulatedModel,
    theta: &[Mat3],
    beta: &[f64],
    psi: &[f64],
    posed: &PosedState,
    grad_vertices: &[Vec3],
    grad_joint_positions: Option<&[Vec3]>,
) -> Result<PoseGradient> {
    let (shaped, rest) = shape_blend(model, beta, psi)?;
    check_len("vertex gradient", model.num_vertices(), grad_vertices.len())?;
    let nj = model.num_joints();
    let mut d_global = vec![Mat3::zeros(); nj];
    let mut d_pos = match grad_joint_positions {
        Some(g) => {
            check_len("joint gradient", nj, g.len())?;
            g.to_vec()
        }
        None => vec![Vec3::zeros(); nj],
    };
    let mut d_rest = vec![Vec3::zeros(); nj];
    let mut d_shaped = vec![Vec3::zeros(); shaped.len()];

    for (i, (x, g)) in shaped.iter().zip(grad_vertices).enumerate() {
        if g.x == 0.0 && g.y == 0.0 && g.z == 0.0 {
            continue;
        }
        for &(j, w) in model.skin_weights.row(i) {
            let gw = g * w;
            let off = x - rest[j];
            d_global[j] += gw * off.transpose();
            d_pos[j] += gw;
            let back = posed.global_rotations[j].transpose() * gw;
            d_shaped[i] += back;
            d_rest[j] -= back;
        }
    }

    let mut d_theta = vec![Mat3::zeros(); nj];
    for j in (0..nj).rev() {
        match model.tree.parent(j) {
            None => {
                d_theta[j] += d_global[j];
                d_rest[j] += d_pos[j];
            }
            Some(p) => {
                let gp = posed.global_rotations[p];
                let dg = d_global[j];
                d_theta[j] += gp.transpose() * dg;
                d_global[p] += dg * theta[j].transpose();
                let dp = d_pos[j];
                d_pos[p] += dp;
                d_global[p] += dp * (rest[j] - rest[p]).transpose();
                let back = gp.transpose() * dp;
                d_rest[j] += back;
                d_rest[p] -= back;
            }
        }
    }

    model.joint_regressor.mul_points_transposed_into(&d_rest, &mut d_shaped);
    let project = |dirs: &[Vec<Vec3>]| -> Vec<f64> {
        dirs.iter()
            .map(|d| d.iter().zip(&d_shaped).map(|(a, b)| a.dot(b)).sum())
            .collect()
    };
    Ok(PoseGradient {
        theta: d_theta,
        beta: project(&model.shape_blendshapes),
        psi: project(&model.expression_blendshapes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotmath::Quaternion;
    use crate::toy::{self, ToyKind};
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain_model() -> ArticulatedModel {
        // two joints, one vertex per joint plus one blended vertex
        let tree = KinematicTree::new(vec![None, Some(0)], vec!["a".into(), "b".into()]).unwrap();
        let verts = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
        ];
        ArticulatedModel {
            kind: "chain".into(),
            template_vertices: verts,
            faces: vec![[0, 1, 2]],
            tree,
            joint_regressor: SparseMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (1, 1, 1.0)]).unwrap(),
            skin_weights: SparseMatrix::from_triplets(3, 2, &[(0, 0, 1.0), (1, 0, 0.5), (1, 1, 0.5), (2, 1, 1.0)])
                .unwrap(),
            shape_blendshapes: vec![vec![Vec3::new(0.1, 0.0, 0.0); 3]],
            expression_blendshapes: vec![],
            vertex_attributes: VertexAttributes {
                part_index: vec![1; 3],
                uv: vec![[0.0; 2]; 3],
                pncc: vec![[0.0; 3]; 3],
            },
            downsample_matrix: SparseMatrix::identity(3),
            num_parts: 1,
        }
    }

    #[test]
    fn tree_rejects_bad_order() {
        assert!(KinematicTree::new(vec![None, Some(2), Some(0)], vec!["".into(); 3]).is_err());
        assert!(KinematicTree::new(vec![Some(0)], vec!["".into()]).is_err());
    }

    #[test]
    fn zero_coefficients_keep_template() {
        let m = toy::generate(ToyKind::Body, 1);
        let (s, _) = shape_blend(&m, &vec![0.0; m.num_betas()], &[]).unwrap();
        assert_eq!(s, m.template_vertices);
    }

    #[test]
    fn unit_beta_adds_one_direction() {
        let m = toy::generate(ToyKind::Body, 1);
        let mut beta = vec![0.0; m.num_betas()];
        beta[0] = 1.0;
        let (s, _) = shape_blend(&m, &beta, &[]).unwrap();
        for ((a, t), d) in s.iter().zip(&m.template_vertices).zip(&m.shape_blendshapes[0]) {
            assert_eq!(*a, t + d);
        }
    }

    #[test]
    fn random_beta_matches_accumulation() {
        let m = toy::generate(ToyKind::FullBody, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let beta: Vec<f64> = (0..m.num_betas()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let psi: Vec<f64> = (0..m.num_expressions()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (s, rest) = shape_blend(&m, &beta, &psi).unwrap();
        for i in 0..m.num_vertices() {
            let mut x = [
                m.template_vertices[i].x,
                m.template_vertices[i].y,
                m.template_vertices[i].z,
            ];
            for (k, b) in beta.iter().enumerate() {
                for (c, xc) in x.iter_mut().enumerate() {
                    *xc += b * m.shape_blendshapes[k][i][c];
                }
            }
            for (k, p) in psi.iter().enumerate() {
                for (c, xc) in x.iter_mut().enumerate() {
                    *xc += p * m.expression_blendshapes[k][i][c];
                }
            }
            for c in 0..3 {
                assert!((x[c] - s[i][c]).abs() < 1e-12);
            }
        }
        assert_eq!(rest.len(), m.num_joints());
        assert!(shape_blend(&m, &beta[1..], &psi).is_err());
    }

    #[test]
    fn rest_pose_fk_and_lbs_are_identity() {
        let m = toy::generate(ToyKind::Body, 2);
        let (shaped, rest) = shape_blend(&m, &vec![0.3; m.num_betas()], &[]).unwrap();
        let posed = forward_kinematics(&m.tree, &vec![Mat3::identity(); m.num_joints()], &rest).unwrap();
        for (a, b) in posed.joint_positions.iter().zip(&rest) {
            assert!((a - b).norm() < 1e-12);
        }
        let v = lbs(&shaped, &posed, &m).unwrap();
        for (a, b) in v.iter().zip(&shaped) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn two_joint_chain_quarter_turn() {
        let tree = KinematicTree::new(vec![None, Some(0)], vec!["a".into(), "b".into()]).unwrap();
        let rz = Quaternion::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2)
            .unwrap()
            .to_matrix();
        let posed = forward_kinematics(
            &tree,
            &[rz, Mat3::identity()],
            &[Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)],
        )
        .unwrap();
        assert!((posed.joint_positions[1] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn single_weight_vertex_follows_its_joint() {
        let m = chain_model();
        let rz = Quaternion::from_axis_angle(&Vec3::z(), 0.7).unwrap().to_matrix();
        let rx = Quaternion::from_axis_angle(&Vec3::x(), -0.4).unwrap().to_matrix();
        let posed = m.pose(&[rz, rx], &[0.0], &[]).unwrap();
        // vertex 2 is fully bound to joint 1
        let expected =
            posed.global_rotations[1] * (m.template_vertices[2] - m.template_vertices[1]) + posed.joint_positions[1];
        assert!((posed.vertices[2] - expected).norm() < 1e-15);
    }

    fn homogeneous(r: &Mat3, t: &Vec3) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
        m
    }

    #[test]
    fn fk_and_lbs_match_homogeneous_chain() {
        let m = toy::generate(ToyKind::Body, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta: Vec<Mat3> = (0..m.num_joints())
            .map(|_| Quaternion::random(&mut rng).to_matrix())
            .collect();
        let beta: Vec<f64> = (0..m.num_betas()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (shaped, rest) = shape_blend(&m, &beta, &[]).unwrap();
        let posed = forward_kinematics(&m.tree, &theta, &rest).unwrap();
        // oracle: T_j = T_parent * [R_j | r_j - r_parent]; skinning matrix T_j * [I | -r_j]
        let mut world: Vec<Matrix4<f64>> = Vec::new();
        for j in 0..m.num_joints() {
            let local = match m.tree.parent(j) {
                None => homogeneous(&theta[j], &rest[j]),
                Some(p) => homogeneous(&theta[j], &(rest[j] - rest[p])),
            };
            let w = match m.tree.parent(j) {
                None => local,
                Some(p) => world[p] * local,
            };
            world.push(w);
        }
        for j in 0..m.num_joints() {
            let p = world[j].fixed_view::<3, 1>(0, 3).into_owned();
            assert!((p - posed.joint_positions[j]).norm() < 1e-9);
        }
        let verts = lbs(&shaped, &posed, &m).unwrap();
        for (i, x) in shaped.iter().enumerate() {
            let mut blend = Matrix4::zeros();
            for &(j, w) in m.skin_weights.row(i) {
                blend += world[j] * homogeneous(&Mat3::identity(), &(-rest[j])) * w;
            }
            let h = blend * x.push(1.0);
            assert!((h.xyz() - verts[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn twist_on_leaf_joint_leaves_joints_fixed() {
        let m = toy::generate(ToyKind::Body, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut theta: Vec<Mat3> = (0..m.num_joints())
            .map(|_| Quaternion::random(&mut rng).to_matrix())
            .collect();
        let (_, rest) = shape_blend(&m, &vec![0.0; m.num_betas()], &[]).unwrap();
        let before = forward_kinematics(&m.tree, &theta, &rest).unwrap();
        let leaves: Vec<usize> = (0..m.num_joints())
            .filter(|&j| m.tree.children(j).next().is_none())
            .collect();
        for &leaf in &leaves {
            let twist = Quaternion::from_axis_angle(&Vec3::new(0.3, -1.0, 0.2), 1.1).unwrap();
            theta[leaf] *= twist.to_matrix();
        }
        let after = forward_kinematics(&m.tree, &theta, &rest).unwrap();
        for (a, b) in before.joint_positions.iter().zip(&after.joint_positions) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn downsample_examples() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 4.0, -2.0)];
        let id = SparseMatrix::identity(2);
        assert_eq!(id.mul_points(&pts).unwrap(), pts);
        let avg = SparseMatrix::from_triplets(1, 2, &[(0, 0, 0.5), (0, 1, 0.5)]).unwrap();
        assert_eq!(avg.mul_points(&pts).unwrap()[0], Vec3::new(1.0, 2.0, -1.0));
        assert!(avg.mul_points(&pts[..1]).is_err());
    }

    #[test]
    fn sparse_downsample_matches_dense() {
        let m = toy::generate(ToyKind::Hand, 2);
        let verts: Vec<Vec3> = m.template_vertices.iter().map(|v| v * 1.7).collect();
        let red = downsample(&verts, &m).unwrap();
        let n = m.num_vertices();
        for (r, out) in red.iter().enumerate() {
            let mut dense = vec![0.0; n];
            for &(c, v) in m.downsample_matrix.row(r) {
                dense[c] += v;
            }
            let mut acc = Vec3::zeros();
            for c in 0..n {
                acc += verts[c] * dense[c];
            }
            assert!((acc - out).norm() < 1e-12);
        }
    }

    #[test]
    fn pose_backward_matches_finite_differences() {
        let m = toy::generate(ToyKind::Body, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let theta: Vec<Mat3> = (0..m.num_joints())
            .map(|_| Quaternion::random(&mut rng).to_matrix())
            .collect();
        let beta: Vec<f64> = (0..m.num_betas()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv: Vec<Vec3> = (0..m.num_vertices())
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let wj: Vec<Vec3> = (0..m.num_joints())
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let f = |theta: &[Mat3], beta: &[f64]| {
            let p = m.pose(theta, beta, &[]).unwrap();
            let a: f64 = p.vertices.iter().zip(&wv).map(|(a, b)| a.dot(b)).sum();
            let b: f64 = p.joint_positions.iter().zip(&wj).map(|(a, b)| a.dot(b)).sum();
            a + b
        };
        let posed = m.pose(&theta, &beta, &[]).unwrap();
        let g = pose_backward(&m, &theta, &beta, &[], &posed, &wv, Some(&wj)).unwrap();
        let eps = 1e-6;
        for j in [0, 4, 13, 18, 21] {
            for (r, c) in [(0, 0), (1, 2), (2, 1)] {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[j][(r, c)] += eps;
                tm[j][(r, c)] -= eps;
                let fd = (f(&tp, &beta) - f(&tm, &beta)) / (2.0 * eps);
                assert!((fd - g.theta[j][(r, c)]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
        for k in 0..m.num_betas() {
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[k] += eps;
            bm[k] -= eps;
            let fd = (f(&theta, &bp) - f(&theta, &bm)) / (2.0 * eps);
            assert!((fd - g.beta[k]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }
}
