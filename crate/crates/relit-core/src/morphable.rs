//! Linear morphable geometry model: mean shape/albedo plus identity,
//! expression, and texture bases, evaluated into a triangle mesh.
//!
//! Vertex attributes are flattened row-major: row `3*v + axis` of a basis
//! matrix perturbs axis `axis` of vertex `v`. No file format for real
//! capture data is assumed; models load from a JSON description, and a
//! small synthetic dome generator covers tests and demos.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

use crate::error::{RelitError, Result};

/// Mean geometry/albedo plus linear deformation bases and triangle topology.
#[derive(Debug, Clone)]
pub struct MorphableModel {
    /// Mean vertex positions.
    pub mean_shape: Vec<[f64; 3]>,
    /// Mean per-vertex albedo in `[0, 1]`.
    pub mean_albedo: Vec<[f64; 3]>,
    /// Identity shape basis, `3V x N_id`.
    pub basis_id: DMatrix<f64>,
    /// Expression shape basis, `3V x N_exp`.
    pub basis_exp: DMatrix<f64>,
    /// Texture (albedo) basis, `3V x N_tex`.
    pub basis_tex: DMatrix<f64>,
    /// Triangles as vertex index triples.
    pub faces: Vec<[usize; 3]>,
}

/// Rigid pose applied after the linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PoseWire {
    /// Unit quaternion as `[w, x, y, z]`.
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let q = self.rotation.quaternion();
        PoseWire {
            rotation: [q.w, q.i, q.j, q.k],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = PoseWire::deserialize(deserializer)?;
        let [w, x, y, z] = wire.rotation;
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(serde::de::Error::custom(format!(
                "pose rotation must be a unit quaternion, norm = {norm}"
            )));
        }
        // new_unchecked keeps the stored bits; from_quaternion would
        // renormalize and perturb the last ulp.
        Ok(Pose {
            rotation: UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(w, x, y, z)),
            translation: Vector3::new(wire.translation[0], wire.translation[1], wire.translation[2]),
        })
    }
}

/// Model coefficients for one face instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceCoefficients {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// Identity weights, length `N_id`.
    pub alpha: Vec<f64>,
    /// Expression weights, length `N_exp`.
    pub beta: Vec<f64>,
    /// Texture weights, length `N_tex`.
    pub zeta: Vec<f64>,
    #[serde(default)]
    pub pose: Pose,
}

fn default_schema_version() -> u32 {
    1
}

impl FaceCoefficients {
    pub fn zeros(n_id: usize, n_exp: usize, n_tex: usize) -> Self {
        Self {
            schema_version: 1,
            alpha: vec![0.0; n_id],
            beta: vec![0.0; n_exp],
            zeta: vec![0.0; n_tex],
            pose: Pose::default(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Evaluated mesh: posed positions, clamped albedo, unit normals, topology.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub positions: Vec<[f64; 3]>,
    pub albedo: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl MorphableModel {
    pub fn vertex_count(&self) -> usize {
        self.mean_shape.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.basis_id.ncols(),
            self.basis_exp.ncols(),
            self.basis_tex.ncols(),
        )
    }

    /// Check internal consistency of array sizes and face indices.
    pub fn validate(&self) -> Result<()> {
        let v = self.mean_shape.len();
        if self.mean_albedo.len() != v {
            return Err(RelitError::DimensionMismatch(format!(
                "mean_albedo has {} vertices, mean_shape has {v}",
                self.mean_albedo.len()
            )));
        }
        for (name, basis) in [
            ("identity", &self.basis_id),
            ("expression", &self.basis_exp),
            ("texture", &self.basis_tex),
        ] {
            if basis.nrows() != 3 * v {
                return Err(RelitError::DimensionMismatch(format!(
                    "{name} basis has {} rows, expected {}",
                    basis.nrows(),
                    3 * v
                )));
            }
        }
        for (i, f) in self.faces.iter().enumerate() {
            for &idx in f {
                if idx >= v {
                    return Err(RelitError::InvalidArgument(format!(
                        "face {i} references vertex {idx}, model has {v}"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(RelitError::InvalidArgument(format!(
                    "face {i} repeats a vertex: {f:?}"
                )));
            }
        }
        Ok(())
    }

    /// Evaluate the linear model and rigid pose into a mesh.
    ///
    /// Shape: `mean + B_id * alpha + B_exp * beta`, then rotate + translate.
    /// Albedo: `mean + B_tex * zeta`, clamped to `[0, 1]`.
    pub fn evaluate(&self, coeffs: &FaceCoefficients) -> Result<Mesh> {
        let (n_id, n_exp, n_tex) = self.dims();
        if coeffs.alpha.len() != n_id {
            return Err(RelitError::DimensionMismatch(format!(
                "alpha has {} entries, identity basis has {n_id} columns",
                coeffs.alpha.len()
            )));
        }
        if coeffs.beta.len() != n_exp {
            return Err(RelitError::DimensionMismatch(format!(
                "beta has {} entries, expression basis has {n_exp} columns",
                coeffs.beta.len()
            )));
        }
        if coeffs.zeta.len() != n_tex {
            return Err(RelitError::DimensionMismatch(format!(
                "zeta has {} entries, texture basis has {n_tex} columns",
                coeffs.zeta.len()
            )));
        }

        let v = self.vertex_count();
        let alpha = DVector::from_column_slice(&coeffs.alpha);
        let beta = DVector::from_column_slice(&coeffs.beta);
        let zeta = DVector::from_column_slice(&coeffs.zeta);
        let shape_offset = &self.basis_id * alpha + &self.basis_exp * beta;
        let albedo_offset = &self.basis_tex * zeta;

        let mut positions = Vec::with_capacity(v);
        let mut albedo = Vec::with_capacity(v);
        for i in 0..v {
            let p = Vector3::new(
                self.mean_shape[i][0] + shape_offset[3 * i],
                self.mean_shape[i][1] + shape_offset[3 * i + 1],
                self.mean_shape[i][2] + shape_offset[3 * i + 2],
            );
            let p = coeffs.pose.rotation * p + coeffs.pose.translation;
            positions.push([p.x, p.y, p.z]);
            albedo.push([
                (self.mean_albedo[i][0] + albedo_offset[3 * i]).clamp(0.0, 1.0),
                (self.mean_albedo[i][1] + albedo_offset[3 * i + 1]).clamp(0.0, 1.0),
                (self.mean_albedo[i][2] + albedo_offset[3 * i + 2]).clamp(0.0, 1.0),
            ]);
        }

        let normals = compute_vertex_normals(&positions, &self.faces);
        Ok(Mesh {
            positions,
            albedo,
            normals,
            faces: self.faces.clone(),
        })
    }
}

/// Area-weighted vertex normals (accumulated raw cross products, normalized).
///
/// Vertices touching only degenerate triangles, and isolated vertices, get
/// the mesh-average normal direction; if that is also zero, `(0, 0, 1)`.
pub fn compute_vertex_normals(positions: &[[f64; 3]], faces: &[[usize; 3]]) -> Vec<[f64; 3]> {
    let mut accum = vec![[0.0f64; 3]; positions.len()];
    let mut total = [0.0f64; 3];
    for f in faces {
        let [a, b, c] = *f;
        let pa = positions[a];
        let pb = positions[b];
        let pc = positions[c];
        let u = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
        let v = [pc[0] - pa[0], pc[1] - pa[1], pc[2] - pa[2]];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        for &i in f {
            for k in 0..3 {
                accum[i][k] += n[k];
            }
        }
        for k in 0..3 {
            total[k] += n[k];
        }
    }

    let total_len = (total[0] * total[0] + total[1] * total[1] + total[2] * total[2]).sqrt();
    let fallback = if total_len > 1e-12 {
        [total[0] / total_len, total[1] / total_len, total[2] / total_len]
    } else {
        [0.0, 0.0, 1.0]
    };

    accum
        .into_iter()
        .map(|n| {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len > 1e-12 {
                [n[0] / len, n[1] / len, n[2] / len]
            } else {
                fallback
            }
        })
        .collect()
}

/// Build a synthetic dome model on an `n x n` vertex grid for tests and
/// demos. Bases are orthonormal (QR of seeded Gaussian draws), so
/// coefficient magnitudes translate directly into displacement norms.
///
/// The dome bulges toward +z with the camera convention of the renderer
/// (camera at +z looking down -z). `n >= 2`.
pub fn make_synthetic_model(n: usize, seed: u64) -> MorphableModel {
    assert!(n >= 2, "grid needs at least 2x2 vertices");
    let mut mean_shape = Vec::with_capacity(n * n);
    let mut mean_albedo = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let x = -0.7 + 1.4 * col as f64 / (n - 1) as f64;
            let y = -0.7 + 1.4 * row as f64 / (n - 1) as f64;
            let z = (1.0 - x * x - y * y).max(0.0).sqrt() - 0.8;
            mean_shape.push([x, y, z]);
            mean_albedo.push([0.75 + 0.1 * x, 0.55 + 0.1 * y, 0.45]);
        }
    }

    let mut faces = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for row in 0..n - 1 {
        for col in 0..n - 1 {
            let v00 = row * n + col;
            let v10 = row * n + col + 1;
            let v01 = (row + 1) * n + col;
            let v11 = (row + 1) * n + col + 1;
            faces.push([v00, v10, v11]);
            faces.push([v00, v11, v01]);
        }
    }

    let rows = 3 * n * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian_basis = |cols: usize| -> DMatrix<f64> {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let m = DMatrix::from_vec(rows, cols, data);
        let qr = m.qr();
        qr.q()
    };
    let basis_id = gaussian_basis(4);
    let basis_exp = gaussian_basis(3);
    let basis_tex = gaussian_basis(3);

    let model = MorphableModel {
        mean_shape,
        mean_albedo,
        basis_id,
        basis_exp,
        basis_tex,
        faces,
    };
    debug_assert!(model.validate().is_ok());
    model
}

#[derive(Serialize, Deserialize)]
struct ModelWire {
    schema_version: u32,
    vertex_count: usize,
    n_id: usize,
    n_exp: usize,
    n_tex: usize,
    mean_shape: Vec<[f64; 3]>,
    mean_albedo: Vec<[f64; 3]>,
    /// Column-major flattening, `3 * vertex_count` rows per column.
    basis_id: Vec<f64>,
    basis_exp: Vec<f64>,
    basis_tex: Vec<f64>,
    faces: Vec<[usize; 3]>,
}

impl MorphableModel {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let (n_id, n_exp, n_tex) = self.dims();
        let wire = ModelWire {
            schema_version: 1,
            vertex_count: self.vertex_count(),
            n_id,
            n_exp,
            n_tex,
            mean_shape: self.mean_shape.clone(),
            mean_albedo: self.mean_albedo.clone(),
            basis_id: self.basis_id.as_slice().to_vec(),
            basis_exp: self.basis_exp.as_slice().to_vec(),
            basis_tex: self.basis_tex.as_slice().to_vec(),
            faces: self.faces.clone(),
        };
        let text = serde_json::to_string(&wire)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let wire: ModelWire = serde_json::from_str(&text)?;
        let rows = 3 * wire.vertex_count;
        let parse_err = |detail: String| RelitError::Parse {
            path: path.display().to_string(),
            detail,
        };
        if wire.mean_shape.len() != wire.vertex_count {
            return Err(parse_err(format!(
                "mean_shape has {} vertices, header says {}",
                wire.mean_shape.len(),
                wire.vertex_count
            )));
        }
        for (name, data, cols) in [
            ("basis_id", &wire.basis_id, wire.n_id),
            ("basis_exp", &wire.basis_exp, wire.n_exp),
            ("basis_tex", &wire.basis_tex, wire.n_tex),
        ] {
            if data.len() != rows * cols {
                return Err(parse_err(format!(
                    "{name} has {} entries, expected {rows} x {cols}",
                    data.len()
                )));
            }
        }
        let model = MorphableModel {
            mean_shape: wire.mean_shape,
            mean_albedo: wire.mean_albedo,
            basis_id: DMatrix::from_vec(rows, wire.n_id, wire.basis_id),
            basis_exp: DMatrix::from_vec(rows, wire.n_exp, wire.basis_exp),
            basis_tex: DMatrix::from_vec(rows, wire.n_tex, wire.basis_tex),
            faces: wire.faces,
        };
        model.validate()?;
        Ok(model)
    }
}

impl Mesh {
    /// Write the mesh as an OBJ with per-vertex colors
    /// (`v x y z r g b` extension, 1-based faces).
    pub fn save_obj(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (p, a) in self.positions.iter().zip(self.albedo.iter()) {
            writeln!(out, "v {} {} {} {} {} {}", p[0], p[1], p[2], a[0], a[1], a[2])?;
        }
        for f in &self.faces {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Read an OBJ written by [`Mesh::save_obj`]. Normals are recomputed.
    pub fn load_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut positions = Vec::new();
        let mut albedo = Vec::new();
        let mut faces = Vec::new();
        let parse_err = |line_no: usize, detail: &str| RelitError::Parse {
            path: path.display().to_string(),
            detail: format!("line {line_no}: {detail}"),
        };
        for (line_no, line) in text.lines().enumerate() {
            let line_no = line_no + 1;
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let vals: Vec<f64> = parts
                        .map(|p| p.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| parse_err(line_no, &format!("bad vertex number: {e}")))?;
                    if vals.len() != 6 {
                        return Err(parse_err(line_no, "vertex needs x y z r g b"));
                    }
                    positions.push([vals[0], vals[1], vals[2]]);
                    albedo.push([
                        vals[3].clamp(0.0, 1.0),
                        vals[4].clamp(0.0, 1.0),
                        vals[5].clamp(0.0, 1.0),
                    ]);
                }
                Some("f") => {
                    let idx: Vec<usize> = parts
                        .map(|p| p.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| parse_err(line_no, &format!("bad face index: {e}")))?;
                    if idx.len() != 3 {
                        return Err(parse_err(line_no, "faces must be triangles"));
                    }
                    if idx.iter().any(|&i| i == 0 || i > positions.len()) {
                        return Err(parse_err(line_no, "face index out of range"));
                    }
                    faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
                }
                Some("#") | None => {}
                Some(other) => {
                    return Err(parse_err(line_no, &format!("unsupported element '{other}'")));
                }
            }
        }
        let normals = compute_vertex_normals(&positions, &faces);
        Ok(Mesh {
            positions,
            albedo,
            normals,
            faces,
        })
    }
}
