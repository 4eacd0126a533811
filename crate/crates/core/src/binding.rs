//! Face-local Gaussian residuals and their world-space resolution.
//!
//! A residual is expressed relative to its face frame `(r, t, s)`:
//! `mean = s * r * delta_mu + t`, `rot = r * mat(delta_rot)`,
//! `scale = s * delta_scale`. The local rotation is applied in the face frame
//! so the resolved Gaussian co-moves rigidly with its face.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};

use crate::forest::Forest;
use crate::mesh::{face_frame, FaceFrame, FrameVertices, Vec3};

/// Lower bound enforced on `delta_scale` components after updates.
pub const MIN_DELTA_SCALE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianResidual {
    pub delta_mu: Vec3,
    /// Unit quaternion `(w, x, y, z)`.
    pub delta_rot: [f64; 4],
    pub delta_scale: Vec3,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Default for GaussianResidual {
    fn default() -> Self {
        Self {
            delta_mu: Vec3::zeros(),
            delta_rot: [1.0, 0.0, 0.0, 0.0],
            delta_scale: Vec3::repeat(0.5),
            opacity: 0.5,
            color: [0.5; 3],
        }
    }
}

impl GaussianResidual {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.delta_rot;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
            .to_rotation_matrix()
            .into_inner()
    }

    /// Restores the invariants after a parameter update: clamps appearance
    /// into `[0, 1]`, keeps scales positive and renormalizes the quaternion.
    pub fn sanitize(&mut self) {
        self.opacity = self.opacity.clamp(0.0, 1.0);
        for c in &mut self.color {
            *c = c.clamp(0.0, 1.0);
        }
        for s in self.delta_scale.iter_mut() {
            *s = s.max(MIN_DELTA_SCALE);
        }
        let n = self.delta_rot.iter().map(|q| q * q).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            for q in &mut self.delta_rot {
                *q /= n;
            }
        } else {
            self.delta_rot = [1.0, 0.0, 0.0, 0.0];
        }
    }

    /// Checks the stored invariants; `tol` applies to the quaternion norm.
    pub fn check(&self, tol: f64) -> Result<(), &'static str> {
        let finite = self.delta_mu.iter().all(|v| v.is_finite())
            && self.delta_rot.iter().all(|v| v.is_finite())
            && self.delta_scale.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.color.iter().all(|v| v.is_finite());
        if !finite {
            return Err("non-finite residual");
        }
        let n = self.delta_rot.iter().map(|q| q * q).sum::<f64>().sqrt();
        if (n - 1.0).abs() > tol {
            return Err("rotation is not a unit quaternion");
        }
        if self.delta_scale.iter().any(|&s| s <= 0.0) {
            return Err("non-positive scale");
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err("opacity outside [0, 1]");
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err("color outside [0, 1]");
        }
        Ok(())
    }

    /// Rounds every field through `f32`, the wire precision.
    pub fn quantized(&self) -> Self {
        let q = |v: f64| v as f32 as f64;
        Self {
            delta_mu: self.delta_mu.map(q),
            delta_rot: self.delta_rot.map(q),
            delta_scale: self.delta_scale.map(q),
            opacity: q(self.opacity),
            color: self.color.map(q),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedGaussian {
    pub mean: Vec3,
    pub rot: Matrix3<f64>,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: [f64; 3],
}

pub fn resolve(residual: &GaussianResidual, frame: &FaceFrame) -> ResolvedGaussian {
    ResolvedGaussian {
        mean: frame.scale * (frame.rot * residual.delta_mu) + frame.centroid,
        rot: frame.rot * residual.rotation_matrix(),
        scale: residual.delta_scale * frame.scale,
        opacity: residual.opacity,
        color: residual.color,
    }
}

/// `R diag(S)^2 R^T`.
pub fn covariance(g: &ResolvedGaussian) -> Matrix3<f64> {
    let d = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    g.rot * d * g.rot.transpose()
}

/// Every node of a forest evaluated under one frame, indexed by node id.
#[derive(Clone, Debug)]
pub struct PosedForest {
    pub triangles: Vec<[Vec3; 3]>,
    /// `None` where the triangle is degenerate; such nodes are not rendered.
    pub frames: Vec<Option<FaceFrame>>,
    pub gaussians: Vec<Option<ResolvedGaussian>>,
}

pub fn pose_forest(forest: &Forest, frame: &FrameVertices) -> PosedForest {
    let triangles = forest.resolve_all(frame);
    let frames: Vec<Option<FaceFrame>> = triangles.iter().map(|t| face_frame(t).ok()).collect();
    let gaussians = forest
        .nodes()
        .iter()
        .zip(&frames)
        .map(|(n, f)| f.as_ref().map(|f| resolve(&n.gaussian, f)))
        .collect();
    PosedForest {
        triangles,
        frames,
        gaussians,
    }
}

/// Pulls a gradient on the resolved mean back onto the three triangle corners
/// the face frame was built from (vector-Jacobian product of
/// `v -> s(v) r(v) delta_mu + t(v)`).
pub fn mean_corner_vjp(corners: &[Vec3; 3], delta_mu: &Vec3, grad_mean: &Vec3) -> [Vec3; 3] {
    let [v0, v1, v2] = *corners;
    let a = v1 - v0;
    let b = v2 - v0;
    let a_len = a.norm();
    let e = a / a_len;
    let m = a.cross(&b);
    let m_len = m.norm();
    let n = m / m_len;
    let c1 = n.cross(&e);

    let l01 = v1 - v0;
    let l12 = v2 - v1;
    let l20 = v0 - v2;
    let (n01, n12, n20) = (l01.norm(), l12.norm(), l20.norm());
    let s = (n01 + n12 + n20) / 3.0;

    let local = delta_mu.x * e + delta_mu.y * c1 + delta_mu.z * n;
    let g_s = grad_mean.dot(&local);
    let g_local = s * grad_mean;

    let g_c1 = delta_mu.y * g_local;
    let g_e = delta_mu.x * g_local + g_c1.cross(&n);
    let g_n = delta_mu.z * g_local + e.cross(&g_c1);

    let mut g_a = (g_e - e * e.dot(&g_e)) / a_len;
    let g_m = (g_n - n * n.dot(&g_n)) / m_len;
    g_a += b.cross(&g_m);
    let g_b = g_m.cross(&a);

    let mut g = [Vec3::zeros(); 3];
    g[1] += g_a;
    g[2] += g_b;
    g[0] -= g_a + g_b;

    let third = grad_mean / 3.0;
    for gi in &mut g {
        *gi += third;
    }

    let k = g_s / 3.0;
    let u01 = l01 / n01;
    let u12 = l12 / n12;
    let u20 = l20 / n20;
    g[1] += k * u01;
    g[0] -= k * u01;
    g[2] += k * u12;
    g[1] -= k * u12;
    g[0] += k * u20;
    g[2] -= k * u20;
    g
}
