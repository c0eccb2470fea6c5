//! Self-describing JSON documents for models, parameters, estimates and meshes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kinematics::{ArticulatedModel, KinematicTree, SparseMatrix, VertexAttributes};
use crate::rotmath::Vec3;

pub const MODEL_FORMAT: &str = "meshfeedback-model";
pub const MESH_FORMAT: &str = "meshfeedback-mesh";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseDoc {
    pub rows: usize,
    pub cols: usize,
    /// `(row, col, value)` in row order.
    pub entries: Vec<(usize, usize, f64)>,
}

impl From<&SparseMatrix> for SparseDoc {
    fn from(m: &SparseMatrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            entries: m.triplets(),
        }
    }
}

impl SparseDoc {
    fn to_matrix(&self, what: &'static str, rows: usize, cols: usize) -> Result<SparseMatrix> {
        check_len(what, rows, self.rows)?;
        check_len(what, cols, self.cols)?;
        SparseMatrix::from_triplets(self.rows, self.cols, &self.entries)
    }
}

fn points(v: &[Vec3]) -> Vec<[f64; 3]> {
    v.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn vec3s(v: &[[f64; 3]]) -> Vec<Vec3> {
    v.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect()
}

/// On-disk form of an [`ArticulatedModel`]; counts are stored explicitly and
/// checked on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub num_vertices: usize,
    pub num_faces: usize,
    pub num_joints: usize,
    pub num_betas: usize,
    pub num_expressions: usize,
    pub num_reduced: usize,
    pub num_parts: u8,
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub joint_regressor: SparseDoc,
    pub skin_weights: SparseDoc,
    pub shape_blendshapes: Vec<Vec<[f64; 3]>>,
    pub expression_blendshapes: Vec<Vec<[f64; 3]>>,
    pub vertex_attributes: VertexAttributes,
    pub downsample_matrix: SparseDoc,
}

impl From<&ArticulatedModel> for ModelDoc {
    fn from(m: &ArticulatedModel) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: FORMAT_VERSION,
            kind: m.kind.clone(),
            num_vertices: m.num_vertices(),
            num_faces: m.faces.len(),
            num_joints: m.num_joints(),
            num_betas: m.num_betas(),
            num_expressions: m.num_expressions(),
            num_reduced: m.num_reduced(),
            num_parts: m.num_parts,
            joint_names: m.tree.names().to_vec(),
            parents: m.tree.parents().to_vec(),
            template_vertices: points(&m.template_vertices),
            faces: m.faces.clone(),
            joint_regressor: (&m.joint_regressor).into(),
            skin_weights: (&m.skin_weights).into(),
            shape_blendshapes: m.shape_blendshapes.iter().map(|d| points(d)).collect(),
            expression_blendshapes: m.expression_blendshapes.iter().map(|d| points(d)).collect(),
            vertex_attributes: m.vertex_attributes.clone(),
            downsample_matrix: (&m.downsample_matrix).into(),
        }
    }
}

impl ModelDoc {
    pub fn to_model(&self) -> Result<ArticulatedModel> {
        if self.format != MODEL_FORMAT || self.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "expected {MODEL_FORMAT} v{FORMAT_VERSION}, got {} v{}",
                self.format, self.version
            )));
        }
        let (v, j) = (self.num_vertices, self.num_joints);
        check_len("template vertices", v, self.template_vertices.len())?;
        check_len("faces", self.num_faces, self.faces.len())?;
        check_len("shape blendshapes", self.num_betas, self.shape_blendshapes.len())?;
        check_len(
            "expression blendshapes",
            self.num_expressions,
            self.expression_blendshapes.len(),
        )?;
        let model = ArticulatedModel {
            kind: self.kind.clone(),
            template_vertices: vec3s(&self.template_vertices),
            faces: self.faces.clone(),
            tree: KinematicTree::new(self.parents.clone(), self.joint_names.clone())?,
            joint_regressor: self.joint_regressor.to_matrix("joint regressor", j, v)?,
            skin_weights: self.skin_weights.to_matrix("skin weights", v, j)?,
            shape_blendshapes: self.shape_blendshapes.iter().map(|d| vec3s(d)).collect(),
            expression_blendshapes: self.expression_blendshapes.iter().map(|d| vec3s(d)).collect(),
            vertex_attributes: self.vertex_attributes.clone(),
            downsample_matrix: self
                .downsample_matrix
                .to_matrix("downsample matrix", self.num_reduced, v)?,
            num_parts: self.num_parts,
        };
        check_len("joints", j, model.num_joints())?;
        model.validate()?;
        Ok(model)
    }
}

/// Vertices of one mesh state, with the faces left to the model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshDoc {
    pub format: String,
    pub version: u32,
    pub scenario: usize,
    pub iteration: usize,
    pub num_vertices: usize,
    pub vertices: Vec<[f64; 3]>,
}

impl MeshDoc {
    pub fn new(scenario: usize, iteration: usize, vertices: &[Vec3]) -> Self {
        Self {
            format: MESH_FORMAT.into(),
            version: FORMAT_VERSION,
            scenario,
            iteration,
            num_vertices: vertices.len(),
            vertices: points(vertices),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn save_model(path: &Path, model: &ArticulatedModel) -> Result<()> {
    write_json(path, &ModelDoc::from(model))
}

pub fn load_model(path: &Path) -> Result<ArticulatedModel> {
    read_json::<ModelDoc>(path)?.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{generate, ToyKind};

    #[test]
    fn model_round_trips() {
        for kind in [ToyKind::Body, ToyKind::Hand, ToyKind::FullBody] {
            let m = generate(kind, 3);
            let doc = ModelDoc::from(&m);
            let text = serde_json::to_string(&doc).unwrap();
            let back: ModelDoc = serde_json::from_str(&text).unwrap();
            assert_eq!(back.to_model().unwrap(), m);
        }
    }

    #[test]
    fn count_mismatch_rejected() {
        let mut doc = ModelDoc::from(&generate(ToyKind::Hand, 0));
        doc.num_vertices += 1;
        assert!(matches!(doc.to_model(), Err(Error::Dimension { .. })));
        let mut doc = ModelDoc::from(&generate(ToyKind::Hand, 0));
        doc.format = "other".into();
        assert!(matches!(doc.to_model(), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = generate(ToyKind::Body, 1);
        save_model(&path, &m).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }
}
