//! Triangle meshes: Wavefront OBJ ingestion, size normalization and bounded
//! per-axis morphs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Vec3};

/// Largest allowed deviation of a morph scale from 1.
pub const MAX_MORPH: f64 = 0.10;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("line {line}: face has {count} indices, need at least 3")]
    FaceArity { line: usize, count: usize },
    #[error("line {line}: vertex index {index} out of range")]
    IndexOutOfRange { line: usize, index: i64 },
    #[error("line {line}: malformed number `{token}`")]
    MalformedNumber { line: usize, token: String },
    #[error("line {line}: non-finite coordinate")]
    NonFinite { line: usize },
    #[error("mesh has no triangles")]
    Empty,
    #[error("degenerate mesh: all vertices coincide")]
    DegenerateMesh,
    #[error("morph scale {scale} deviates from 1 by more than {MAX_MORPH}")]
    MorphOutOfRange { scale: f64 },
    #[error("unsupported mesh format `{0}` (only .obj is read)")]
    UnsupportedFormat(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Triangle soup. Indices are 0-based into `vertices`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    /// Builds a mesh after checking index bounds and coordinate finiteness.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        if let Some(line) = vertices
            .iter()
            .position(|v| v.iter().any(|c| !c.is_finite()))
        {
            return Err(MeshError::NonFinite { line: line + 1 });
        }
        for t in &triangles {
            for &i in t {
                if i as usize >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange {
                        line: 0,
                        index: i as i64,
                    });
                }
            }
        }
        Ok(Mesh {
            vertices,
            triangles,
        })
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Translates every vertex by `offset`.
    pub fn translated(&self, offset: Vec3) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|&v| geom::add(v, offset)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Appends the triangles of `other`, re-indexing its vertices.
    pub fn merge(&mut self, other: &Mesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(
            other
                .triangles
                .iter()
                .map(|t| [t[0] + base, t[1] + base, t[2] + base]),
        );
    }
}

/// Per-axis scale factors, each within `[1 - MAX_MORPH, 1 + MAX_MORPH]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorphParams {
    pub axis_scales: [f64; 3],
}

impl MorphParams {
    pub const IDENTITY: MorphParams = MorphParams {
        axis_scales: [1.0, 1.0, 1.0],
    };

    pub fn new(axis_scales: [f64; 3]) -> Result<Self, MeshError> {
        let p = MorphParams { axis_scales };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        for &s in &self.axis_scales {
            // Small slack so that 1.1 written in decimal is still accepted.
            if !s.is_finite() || (s - 1.0).abs() > MAX_MORPH + 1e-12 {
                return Err(MeshError::MorphOutOfRange { scale: s });
            }
        }
        Ok(())
    }
}

impl Default for MorphParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

fn parse_index(token: &str, line: usize, nverts: usize) -> Result<u32, MeshError> {
    // `f v/vt/vn`: only the position index matters.
    let head = token.split('/').next().unwrap_or("");
    let raw: i64 = head.parse().map_err(|_| MeshError::MalformedNumber {
        line,
        token: token.to_string(),
    })?;
    let resolved = match raw {
        0 => None,
        r if r > 0 => Some(r - 1),
        r => Some(nverts as i64 + r),
    };
    match resolved {
        Some(i) if i >= 0 && (i as usize) < nverts => Ok(i as u32),
        _ => Err(MeshError::IndexOutOfRange { line, index: raw }),
    }
}

/// Parses the `v` / `f` subset of Wavefront OBJ. Polygons are fan
/// triangulated from their first vertex; every other directive is skipped.
pub fn parse_obj(text: &str) -> Result<Mesh, MeshError> {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut tokens = content.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut p: Vec3 = [0.0; 3];
                for c in p.iter_mut() {
                    let tok = tokens.next().ok_or(MeshError::MalformedNumber {
                        line,
                        token: String::new(),
                    })?;
                    *c = tok.parse().map_err(|_| MeshError::MalformedNumber {
                        line,
                        token: tok.to_string(),
                    })?;
                    if !c.is_finite() {
                        return Err(MeshError::NonFinite { line });
                    }
                }
                vertices.push(p);
            }
            Some("f") => {
                let idx = tokens
                    .map(|t| parse_index(t, line, vertices.len()))
                    .collect::<Result<Vec<_>, _>>()?;
                if idx.len() < 3 {
                    return Err(MeshError::FaceArity {
                        line,
                        count: idx.len(),
                    });
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if triangles.is_empty() {
        return Err(MeshError::Empty);
    }
    Ok(Mesh {
        vertices,
        triangles,
    })
}

/// Emits the mesh as OBJ text. Coordinates use the shortest representation
/// that parses back to the same `f64`.
pub fn to_obj(mesh: &Mesh) -> String {
    let mut out = String::with_capacity(mesh.vertices.len() * 32);
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn load_mesh(path: &Path) -> Result<Mesh, MeshError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ext != "obj" {
        return Err(MeshError::UnsupportedFormat(ext));
    }
    let text = std::fs::read_to_string(path).map_err(|e| MeshError::Io(e.to_string()))?;
    parse_obj(&text)
}

pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<(), MeshError> {
    std::fs::write(path, to_obj(mesh)).map_err(|e| MeshError::Io(e.to_string()))
}

/// Centroid of the vertices and the largest distance from it to any vertex.
pub fn bounding_sphere(mesh: &Mesh) -> Result<(Vec3, f64), MeshError> {
    if mesh.vertices.is_empty() {
        return Err(MeshError::Empty);
    }
    let n = mesh.vertices.len() as f64;
    let sum = mesh
        .vertices
        .iter()
        .fold([0.0; 3], |acc, &v| geom::add(acc, v));
    let center = geom::scale(sum, 1.0 / n);
    let radius = mesh
        .vertices
        .iter()
        .map(|&v| geom::norm(geom::sub(v, center)))
        .fold(0.0, f64::max);
    if radius <= 0.0 {
        return Err(MeshError::DegenerateMesh);
    }
    Ok((center, radius))
}

/// Moves the bounding-sphere center to the origin and scales to unit radius.
pub fn normalize_mesh(mesh: &Mesh) -> Result<Mesh, MeshError> {
    let (center, radius) = bounding_sphere(mesh)?;
    let inv = 1.0 / radius;
    Ok(Mesh {
        vertices: mesh
            .vertices
            .iter()
            .map(|&v| geom::scale(geom::sub(v, center), inv))
            .collect(),
        triangles: mesh.triangles.clone(),
    })
}

pub fn morph_mesh(mesh: &Mesh, params: &MorphParams) -> Result<Mesh, MeshError> {
    params.validate()?;
    let s = params.axis_scales;
    Ok(Mesh {
        vertices: mesh
            .vertices
            .iter()
            .map(|v| [v[0] * s[0], v[1] * s[1], v[2] * s[2]])
            .collect(),
        triangles: mesh.triangles.clone(),
    })
}
