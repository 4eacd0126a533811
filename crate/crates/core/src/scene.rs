//! Synthetic multi-view scene used by the demo command, the tests and the
//! browser page: an icosphere, a ring of cameras, a short rigid animation and
//! reference images ray-cast from a procedurally textured version of the
//! mesh.

use std::collections::HashMap;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::mesh::{Camera, FrameVertices, TemplateMesh, Vec3};
use crate::par;

/// Icosphere of radius `radius` after `subdivisions` rounds of 1-to-4 splits
/// (20 * 4^n faces).
pub fn icosphere(subdivisions: u32, radius: f64) -> (TemplateMesh, FrameVertices) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|v| Vec3::from(*v).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vec3>| {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                verts.len() as u32 - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    // outward normals for (v1 - v0) x (v2 - v0)
    for f in &mut faces {
        let [a, b, c] = f.map(|i| verts[i as usize]);
        if (b - a).cross(&(c - a)).dot(&(a + b + c)) < 0.0 {
            f.swap(1, 2);
        }
    }
    let positions = verts.into_iter().map(|v| v * radius).collect();
    (
        TemplateMesh::new(positions_len(&faces), faces).expect("icosphere topology"),
        FrameVertices::new(positions).expect("finite icosphere"),
    )
}

fn positions_len(faces: &[[u32; 3]]) -> usize {
    faces.iter().flatten().copied().max().map_or(0, |m| m as usize + 1)
}

/// `count` cameras evenly spaced on a horizontal ring around the origin.
pub fn ring_cameras(
    count: usize,
    distance: f64,
    elevation_deg: f64,
    focal: f64,
    width: u32,
    height: u32,
) -> Vec<Camera> {
    let el = elevation_deg.to_radians();
    (0..count)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / count as f64;
            let eye = Vec3::new(
                distance * el.cos() * az.sin(),
                distance * el.sin(),
                distance * el.cos() * az.cos(),
            );
            Camera::look_at(eye, Vec3::zeros(), Vec3::y(), focal, width, height).expect("ring camera")
        })
        .collect()
}

/// Rigid animation: frame `k` rotates the rest pose about y and bobs it.
pub fn rigid_frames(rest: &FrameVertices, count: usize) -> Vec<FrameVertices> {
    (0..count)
        .map(|k| {
            let angle = 0.25 * k as f64;
            let rot = *Rotation3::from_axis_angle(&Vector3::y_axis(), angle).matrix();
            let offset = Vec3::new(0.05 * k as f64, 0.03 * (k as f64).sin(), 0.0);
            rest.transformed(&rot, &offset)
        })
        .collect()
}

/// Albedo defined on rest-pose positions: a flat base color with a
/// checkerboard patch inside the spherical cap `dot(p, axis) > cap_cos`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Texture {
    pub base: [f64; 3],
    pub checker: [[f64; 3]; 2],
    /// Checker cells per world unit.
    pub cells: f64,
    pub axis: [f64; 3],
    /// `-1` textures the whole surface, `1` none of it.
    pub cap_cos: f64,
}

impl Texture {
    pub fn constant(rgb: [f64; 3]) -> Self {
        Self {
            base: rgb,
            checker: [rgb, rgb],
            cells: 1.0,
            axis: [0.0, 1.0, 0.0],
            cap_cos: 1.0,
        }
    }

    pub fn sample(&self, rest: &Vec3) -> [f64; 3] {
        let axis = Vec3::from(self.axis).normalize();
        if rest.normalize().dot(&axis) <= self.cap_cos {
            return self.base;
        }
        let k = (rest * self.cells).map(f64::floor);
        let parity = (k.x + k.y + k.z).rem_euclid(2.0) as usize;
        self.checker[parity]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub subdivisions: u32,
    pub radius: f64,
    pub image_size: u32,
    pub camera_count: usize,
    pub camera_distance: f64,
    pub camera_elevation_deg: f64,
    pub focal: f64,
    pub frame_count: usize,
    /// Supersampling per axis for the reference images.
    pub supersample: u32,
    pub background: [f64; 3],
    /// When absent, a checker patch with a seed-dependent axis is used.
    pub texture: Option<Texture>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            subdivisions: 2,
            radius: 1.0,
            image_size: 128,
            camera_count: 8,
            camera_distance: 3.2,
            camera_elevation_deg: 15.0,
            focal: 150.0,
            frame_count: 4,
            supersample: 2,
            background: [0.0; 3],
            texture: None,
        }
    }
}

/// Seed-dependent checker patch covering roughly a third of the sphere.
pub fn checker_patch(seed: u64) -> Texture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e47);
    // keep the patch facing the camera ring rather than the poles
    let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let el: f64 = rng.random_range(-0.4..0.4);
    Texture {
        base: [0.55, 0.45, 0.4],
        checker: [[0.95, 0.9, 0.8], [0.1, 0.15, 0.3]],
        cells: 2.0,
        axis: [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()],
        cap_cos: 0.3,
    }
}

#[derive(Clone, Debug)]
pub struct DemoScene {
    pub mesh: TemplateMesh,
    /// Rest pose, also the first animation frame.
    pub rest: FrameVertices,
    pub frames: Vec<FrameVertices>,
    pub cameras: Vec<Camera>,
    pub texture: Texture,
    pub background: [f64; 3],
    /// References rendered from `frames[0]`, one per camera.
    pub references: Vec<Image>,
}

pub fn demo_scene(config: &SceneConfig, seed: u64) -> DemoScene {
    let (mesh, rest) = icosphere(config.subdivisions, config.radius);
    let frames = rigid_frames(&rest, config.frame_count.max(1));
    let cameras = ring_cameras(
        config.camera_count,
        config.camera_distance,
        config.camera_elevation_deg,
        config.focal,
        config.image_size,
        config.image_size,
    );
    let texture = config.texture.clone().unwrap_or_else(|| checker_patch(seed));
    let references = cameras
        .iter()
        .map(|cam| {
            raycast_reference(
                &mesh,
                &rest,
                &frames[0],
                cam,
                &texture,
                config.background,
                config.supersample,
            )
        })
        .collect();
    DemoScene {
        mesh,
        rest,
        frames,
        cameras,
        texture,
        background: config.background,
        references,
    }
}

/// Ray-casts the textured mesh posed at `frame`. Texture lookups use the
/// matching point on the rest pose so the pattern sticks to the surface.
pub fn raycast_reference(
    mesh: &TemplateMesh,
    rest: &FrameVertices,
    frame: &FrameVertices,
    cam: &Camera,
    texture: &Texture,
    background: [f64; 3],
    supersample: u32,
) -> Image {
    let rot_t = cam.rotation().transpose();
    let origin = -(rot_t * cam.translation());
    let tris: Vec<[Vec3; 3]> = mesh.faces().iter().map(|&f| frame.triangle(f)).collect();
    let rest_tris: Vec<[Vec3; 3]> = mesh.faces().iter().map(|&f| rest.triangle(f)).collect();
    let ss = supersample.max(1);
    let w = cam.width;
    let rows: Vec<Vec<f64>> = par::map_indexed(cam.height as usize, |y| {
        let mut row = Vec::with_capacity(3 * w as usize);
        for x in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = x as f64 + (sx as f64 + 0.5) / ss as f64;
                    let v = y as f64 + (sy as f64 + 0.5) / ss as f64;
                    let dir_cam = Vec3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
                    let dir = (rot_t * dir_cam).normalize();
                    let rgb = match nearest_hit(&origin, &dir, &tris) {
                        Some((face, b1, b2)) => {
                            let r = &rest_tris[face];
                            let p = r[0] * (1.0 - b1 - b2) + r[1] * b1 + r[2] * b2;
                            texture.sample(&p)
                        }
                        None => background,
                    };
                    for c in 0..3 {
                        acc[c] += rgb[c];
                    }
                }
            }
            let n = (ss * ss) as f64;
            row.extend(acc.map(|v| v / n));
        }
        row
    });
    Image {
        width: w,
        height: cam.height,
        data: rows.concat(),
    }
}

fn nearest_hit(origin: &Vec3, dir: &Vec3, tris: &[[Vec3; 3]]) -> Option<(usize, f64, f64)> {
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for (i, [a, b, c]) in tris.iter().enumerate() {
        let e1 = b - a;
        let e2 = c - a;
        let p = dir.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-14 {
            continue;
        }
        let inv = 1.0 / det;
        let s = origin - a;
        let u = s.dot(&p) * inv;
        if !(0.0..=1.0).contains(&u) {
            continue;
        }
        let q = s.cross(&e1);
        let v = dir.dot(&q) * inv;
        if v < 0.0 || u + v > 1.0 {
            continue;
        }
        let t = e2.dot(&q) * inv;
        if t > 1e-9 && best.is_none_or(|(bt, ..)| t < bt) {
            best = Some((t, i, u, v));
        }
    }
    best.map(|(_, i, u, v)| (i, u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::triangle_area;

    #[test]
    fn icosphere_counts() {
        let (m, v) = icosphere(0, 1.0);
        assert_eq!((m.face_count(), v.len()), (20, 12));
        let (m, v) = icosphere(1, 1.0);
        assert_eq!((m.face_count(), v.len()), (80, 42));
        let (m, v) = icosphere(2, 2.0);
        assert_eq!((m.face_count(), v.len()), (320, 162));
        assert!(v.positions().iter().all(|p| (p.norm() - 2.0).abs() < 1e-12));
        for &f in m.faces() {
            let t = v.triangle(f);
            assert!(triangle_area(&t) > 0.0);
            assert!((t[1] - t[0]).cross(&(t[2] - t[0])).dot(&(t[0] + t[1] + t[2])) > 0.0);
        }
    }

    #[test]
    fn cameras_look_at_origin() {
        for cam in ring_cameras(8, 3.0, 20.0, 100.0, 32, 32) {
            let p = cam.to_camera(&Vec3::zeros());
            assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && (p.z - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn raycast_sees_sphere_in_center_and_background_in_corner() {
        let cfg = SceneConfig {
            image_size: 32,
            focal: 37.5,
            camera_count: 2,
            texture: Some(Texture::constant([0.2, 0.4, 0.6])),
            background: [1.0, 0.0, 0.0],
            ..Default::default()
        };
        let scene = demo_scene(&cfg, 1);
        let img = &scene.references[0];
        assert_eq!(img.pixel(16, 16), [0.2, 0.4, 0.6]);
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn checker_patch_is_partial() {
        let tex = checker_patch(3);
        let axis = Vec3::from(tex.axis);
        assert_ne!(tex.sample(&axis), tex.base);
        assert_eq!(tex.sample(&-axis), tex.base);
    }
}
