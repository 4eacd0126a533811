//! Fixed-topology triangle meshes, per-frame vertex positions, face-local
//! frames and the small set of text formats used to move them around
//! (OBJ subset, animation-frame JSON, camera JSON).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

/// Faces with area below this are rejected by [`face_frame`].
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: face has {count} vertices, only triangles are supported")]
    NonTriangleFace { line: usize, count: usize },
    #[error("face {face:?} references vertex out of range (vertex count {vertex_count})")]
    IndexOutOfRange { face: [u32; 3], vertex_count: usize },
    #[error("face {face:?} repeats a vertex index")]
    RepeatedIndex { face: [u32; 3] },
    #[error("degenerate face (area {area:e})")]
    DegenerateFace { area: f64 },
    #[error("frame has {got} vertices, mesh has {expected}")]
    VertexCountMismatch { expected: usize, got: usize },
    #[error("non-finite vertex coordinate at index {index}")]
    NonFinite { index: usize },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn read_file(path: &Path) -> Result<String, MeshError> {
    fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Template topology. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateMesh {
    vertex_count: usize,
    faces: Vec<[u32; 3]>,
}

impl TemplateMesh {
    pub fn new(vertex_count: usize, faces: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        for &face in &faces {
            if face.iter().any(|&i| i as usize >= vertex_count) {
                return Err(MeshError::IndexOutOfRange { face, vertex_count });
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(MeshError::RepeatedIndex { face });
            }
        }
        Ok(Self { vertex_count, faces })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }
}

/// Vertex positions of one animation frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameVertices {
    positions: Vec<Vec3>,
}

impl FrameVertices {
    pub fn new(positions: Vec<Vec3>) -> Result<Self, MeshError> {
        if let Some(index) = positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(MeshError::NonFinite { index });
        }
        Ok(Self { positions })
    }

    pub fn from_flat(flat: &[f64], vertex_count: usize) -> Result<Self, MeshError> {
        if flat.len() != 3 * vertex_count {
            return Err(MeshError::VertexCountMismatch {
                expected: vertex_count,
                got: flat.len() / 3,
            });
        }
        Self::new(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }

    pub fn check_mesh(&self, mesh: &TemplateMesh) -> Result<(), MeshError> {
        if self.positions.len() != mesh.vertex_count() {
            return Err(MeshError::VertexCountMismatch {
                expected: mesh.vertex_count(),
                got: self.positions.len(),
            });
        }
        Ok(())
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn triangle(&self, face: [u32; 3]) -> [Vec3; 3] {
        face.map(|i| self.positions[i as usize])
    }

    /// Applies `p -> rotation * p + translation` to every vertex.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3) -> Self {
        Self {
            positions: self.positions.iter().map(|p| rotation * p + translation).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }
}

/// Rotation, centroid and scale of a triangle in one frame.
///
/// Column 0 of `rot` is the normalized first edge, column 2 the unit normal
/// following `(v1 - v0) x (v2 - v0)`, column 1 completes a right-handed basis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceFrame {
    pub rot: Matrix3<f64>,
    pub centroid: Vec3,
    pub scale: f64,
}

pub fn triangle_area(v: &[Vec3; 3]) -> f64 {
    0.5 * (v[1] - v[0]).cross(&(v[2] - v[0])).norm()
}

pub fn face_frame(v: &[Vec3; 3]) -> Result<FaceFrame, MeshError> {
    let edge = v[1] - v[0];
    let cross = edge.cross(&(v[2] - v[0]));
    let area = 0.5 * cross.norm();
    if !(area >= DEGENERATE_AREA) {
        return Err(MeshError::DegenerateFace { area });
    }
    let e = edge.normalize();
    let n = cross.normalize();
    let b = n.cross(&e);
    let scale = ((v[1] - v[0]).norm() + (v[2] - v[1]).norm() + (v[0] - v[2]).norm()) / 3.0;
    Ok(FaceFrame {
        rot: Matrix3::from_columns(&[e, b, n]),
        centroid: (v[0] + v[1] + v[2]) / 3.0,
        scale,
    })
}

/// Parses the `v x y z` / `f a b c` OBJ subset. Texture and normal indices on
/// face tokens (`a/b/c`) are accepted and ignored, as are `vt`, `vn`, `o`,
/// `g`, `s`, `mtllib` and `usemtl` lines.
pub fn parse_obj(text: &str) -> Result<(TemplateMesh, FrameVertices), MeshError> {
    let mut positions = Vec::new();
    let mut faces = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let tag = tokens.next().unwrap_or_default();
        match tag {
            "v" => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| MeshError::Parse {
                            line: line_no,
                            msg: format!("bad coordinate {t:?}"),
                        })
                    })
                    .collect::<Result<_, _>>()?;
                if coords.len() != 3 {
                    return Err(MeshError::Parse {
                        line: line_no,
                        msg: "vertex needs three coordinates".into(),
                    });
                }
                positions.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            "f" => {
                let idx: Vec<&str> = tokens.collect();
                if idx.len() != 3 {
                    return Err(MeshError::NonTriangleFace {
                        line: line_no,
                        count: idx.len(),
                    });
                }
                let mut face = [0u32; 3];
                for (slot, tok) in face.iter_mut().zip(&idx) {
                    let head = tok.split('/').next().unwrap_or("");
                    let one_based: i64 = head.parse().map_err(|_| MeshError::Parse {
                        line: line_no,
                        msg: format!("bad face index {tok:?}"),
                    })?;
                    let resolved = if one_based < 0 {
                        positions.len() as i64 + one_based
                    } else {
                        one_based - 1
                    };
                    if resolved < 0 || resolved as usize >= positions.len() {
                        return Err(MeshError::Parse {
                            line: line_no,
                            msg: format!("face index {one_based} out of range"),
                        });
                    }
                    *slot = resolved as u32;
                }
                faces.push(face);
            }
            "vt" | "vn" | "o" | "g" | "s" | "mtllib" | "usemtl" => {}
            other => {
                return Err(MeshError::Parse {
                    line: line_no,
                    msg: format!("unsupported statement {other:?}"),
                })
            }
        }
    }
    let mesh = TemplateMesh::new(positions.len(), faces).map_err(|e| MeshError::Parse {
        line: 0,
        msg: e.to_string(),
    })?;
    Ok((mesh, FrameVertices::new(positions)?))
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<(TemplateMesh, FrameVertices), MeshError> {
    parse_obj(&read_file(path.as_ref())?)
}

pub fn write_obj(mesh: &TemplateMesh, frame: &FrameVertices) -> String {
    let mut out = String::new();
    for p in frame.positions() {
        out.push_str(&format!("v {} {} {}\n", p.x, p.y, p.z));
    }
    for f in mesh.faces() {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out
}

/// Animation frames: a JSON array, one flat `3 * vertex_count` array per frame.
pub fn parse_frames(text: &str, vertex_count: usize) -> Result<Vec<FrameVertices>, MeshError> {
    let raw: Vec<Vec<f64>> = serde_json::from_str(text)?;
    raw.iter()
        .map(|flat| FrameVertices::from_flat(flat, vertex_count))
        .collect()
}

pub fn load_frames(path: impl AsRef<Path>, vertex_count: usize) -> Result<Vec<FrameVertices>, MeshError> {
    parse_frames(&read_file(path.as_ref())?, vertex_count)
}

pub fn frames_to_json(frames: &[FrameVertices]) -> String {
    let raw: Vec<Vec<f64>> = frames.iter().map(FrameVertices::to_flat).collect();
    serde_json::to_string(&raw).expect("frames serialize")
}

/// Pinhole camera. Camera space is x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 4x4 rigid transform.
    pub world_to_camera: [f64; 16],
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self, MeshError> {
        let mut rows = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                rows[4 * r + c] = world_to_camera[(r, c)];
            }
        }
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera: rows,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world up.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: u32, height: u32) -> Result<Self, MeshError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(MeshError::InvalidCamera("up parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height, m)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(MeshError::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(MeshError::InvalidCamera("empty image".into()));
        }
        let r = self.rotation();
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(MeshError::InvalidCamera(
                "world_to_camera rotation is not orthonormal".into(),
            ));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.world_to_camera;
        Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10])
    }

    pub fn translation(&self) -> Vec3 {
        let m = &self.world_to_camera;
        Vec3::new(m[3], m[7], m[11])
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl fmt::Display for Camera {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "camera {}x{} f=({}, {})", self.width, self.height, self.fx, self.fy)
    }
}

/// Accepts either a single camera object or an array of cameras.
pub fn parse_cameras(text: &str) -> Result<Vec<Camera>, MeshError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(Camera),
        Many(Vec<Camera>),
    }
    let cams = match serde_json::from_str::<OneOrMany>(text)? {
        OneOrMany::One(c) => vec![c],
        OneOrMany::Many(v) => v,
    };
    for cam in &cams {
        cam.validate()?;
    }
    Ok(cams)
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>, MeshError> {
    parse_cameras(&read_file(path.as_ref())?)
}
