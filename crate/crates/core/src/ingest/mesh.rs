//! Triangle meshes and ground-truth volume from scanned geometry.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Indexed triangle mesh. Face indices are zero-based and always in range.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= vertices.len() {
                    return Err(Error::InvalidMesh(format!(
                        "face {fi} references vertex {v}, mesh has {}",
                        vertices.len()
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} repeats a vertex")));
            }
        }
        for (vi, v) in vertices.iter().enumerate() {
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidMesh(format!("vertex {vi} is not finite")));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn from_obj_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_obj_str(&text).map_err(|e| match e {
            Error::InvalidMesh(msg) => {
                Error::InvalidMesh(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }

    /// Parses the `v` and `f` records of Wavefront OBJ text. Faces with more
    /// than three vertices are fan-triangulated. Normals, texture
    /// coordinates, groups, and comments are ignored.
    pub fn from_obj_str(text: &str) -> Result<Self> {
        let mut vertices: Vec<[f64; 3]> = Vec::new();
        let mut faces: Vec<[usize; 3]> = Vec::new();

        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("v") => {
                    let mut coords = [0.0f64; 3];
                    for c in &mut coords {
                        let tok = tokens.next().ok_or_else(|| {
                            Error::InvalidMesh(format!("line {}: vertex needs 3 coords", ln + 1))
                        })?;
                        *c = tok.parse().map_err(|_| {
                            Error::InvalidMesh(format!("line {}: bad coordinate `{tok}`", ln + 1))
                        })?;
                    }
                    // A fourth w component, if present, is ignored.
                    vertices.push(coords);
                }
                Some("f") => {
                    let mut idx: Vec<usize> = Vec::new();
                    for tok in tokens {
                        // Accept `i`, `i/t`, `i//n`, `i/t/n`; only the vertex
                        // index matters here.
                        let first = tok.split('/').next().unwrap_or("");
                        let v: i64 = first.parse().map_err(|_| {
                            Error::InvalidMesh(format!("line {}: bad face index `{tok}`", ln + 1))
                        })?;
                        let resolved = if v > 0 {
                            (v - 1) as usize
                        } else if v < 0 {
                            let back = (-v) as usize;
                            if back > vertices.len() {
                                return Err(Error::InvalidMesh(format!(
                                    "line {}: relative index {v} out of range",
                                    ln + 1
                                )));
                            }
                            vertices.len() - back
                        } else {
                            return Err(Error::InvalidMesh(format!(
                                "line {}: face index 0 is not valid",
                                ln + 1
                            )));
                        };
                        idx.push(resolved);
                    }
                    if idx.len() < 3 {
                        return Err(Error::InvalidMesh(format!(
                            "line {}: face needs at least 3 vertices",
                            ln + 1
                        )));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                // vn, vt, o, g, s, usemtl, mtllib, comments, blank lines
                _ => {}
            }
        }
        Self::new(vertices, faces)
    }

    /// Signed volume via the divergence theorem: one tetrahedron against the
    /// origin per face, v0 . (v1 x v2) / 6, summed over faces. Sign follows
    /// winding; magnitude is the enclosed volume for a watertight mesh.
    pub fn signed_volume(&self) -> f64 {
        let mut total = 0.0;
        for f in &self.faces {
            let a = self.vertices[f[0]];
            let b = self.vertices[f[1]];
            let c = self.vertices[f[2]];
            let cross = [
                b[1] * c[2] - b[2] * c[1],
                b[2] * c[0] - b[0] * c[2],
                b[0] * c[1] - b[1] * c[0],
            ];
            total += (a[0] * cross[0] + a[1] * cross[1] + a[2] * cross[2]) / 6.0;
        }
        total
    }

    /// A closed orientable surface has every undirected edge shared by
    /// exactly two faces and every directed edge used exactly once.
    pub fn watertight_violation(&self) -> Option<String> {
        let mut undirected: HashMap<(usize, usize), usize> = HashMap::new();
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                *directed.entry((a, b)).or_insert(0) += 1;
                let key = if a < b { (a, b) } else { (b, a) };
                *undirected.entry(key).or_insert(0) += 1;
            }
        }
        for (&(a, b), &n) in &undirected {
            if n != 2 {
                return Some(format!("edge ({a}, {b}) belongs to {n} faces, expected 2"));
            }
        }
        for (&(a, b), &n) in &directed {
            if n != 1 {
                return Some(format!(
                    "directed edge ({a}, {b}) used {n} times; winding is inconsistent"
                ));
            }
        }
        None
    }

    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.watertight_violation().is_none()
    }
}

/// Volume of a watertight mesh in mL.
///
/// `unit_scale_to_cm` converts mesh units to centimeters; 1 cm^3 = 1 mL, so
/// the result is |signed volume| * scale^3.
pub fn mesh_volume_ml(mesh: &TriangleMesh, unit_scale_to_cm: f64) -> Result<f64> {
    if !(unit_scale_to_cm.is_finite() && unit_scale_to_cm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "unit_scale_to_cm must be positive, got {unit_scale_to_cm}"
        )));
    }
    if mesh.faces.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if let Some(violation) = mesh.watertight_violation() {
        return Err(Error::OpenMesh(violation));
    }
    Ok(mesh.signed_volume().abs() * unit_scale_to_cm.powi(3))
}
