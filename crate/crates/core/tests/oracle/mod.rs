//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the code paths it checks.
#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix4, Vector2};
use pgav_core::image::Image;
use pgav_core::mesh::{Camera, FrameVertices, Vec3};
use pgav_core::render::Splat2D;
use pgav_core::Forest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn identity_camera(width: u32, height: u32) -> Camera {
    Camera::new(
        50.0,
        50.0,
        width as f64 / 2.0,
        height as f64 / 2.0,
        width,
        height,
        Matrix4::identity(),
    )
    .unwrap()
}

/// Random well-conditioned splats inside a `width x height` viewport.
pub fn random_splats(rng: &mut impl Rng, count: usize, width: u32, height: u32) -> Vec<Splat2D> {
    (0..count)
        .map(|i| {
            let a: f64 = rng.random_range(0.8..6.0);
            let c: f64 = rng.random_range(0.8..6.0);
            let b: f64 = rng.random_range(-0.6..0.6) * (a * c).sqrt();
            Splat2D {
                node_id: i as u32,
                mean: Vector2::new(
                    rng.random_range(-1.0..width as f64 + 1.0),
                    rng.random_range(-1.0..height as f64 + 1.0),
                ),
                cov: Matrix2::new(a, b, b, c),
                depth: rng.random_range(0.5..5.0),
                opacity: rng.random_range(0.05..0.9),
                color: [rng.random(), rng.random(), rng.random()],
            }
        })
        .collect()
}

pub struct NaiveRender {
    pub rgb: Vec<[f64; 3]>,
    pub contrib: Vec<f64>,
    pub weight_sum: Vec<f64>,
}

/// Per-pixel evaluator: every splat is tested at every pixel, no binning.
pub fn naive_render(splats: &[Splat2D], cam: &Camera, bg: [f64; 3]) -> NaiveRender {
    let mut idx: Vec<usize> = (0..splats.len()).collect();
    idx.sort_by(|&a, &b| {
        splats[a]
            .depth
            .partial_cmp(&splats[b].depth)
            .unwrap()
            .then(splats[a].node_id.cmp(&splats[b].node_id))
    });
    let mut out = NaiveRender {
        rgb: Vec::new(),
        contrib: vec![0.0; splats.len()],
        weight_sum: Vec::new(),
    };
    for y in 0..cam.height {
        for x in 0..cam.width {
            let px = [x as f64 + 0.5, y as f64 + 0.5];
            let mut t = 1.0;
            let mut color = [0.0; 3];
            let mut wsum = 0.0;
            for &i in &idx {
                let s = &splats[i];
                let dx = px[0] - s.mean.x;
                let dy = px[1] - s.mean.y;
                let (a, b, c) = (s.cov[(0, 0)], s.cov[(0, 1)], s.cov[(1, 1)]);
                let det = a * c - b * b;
                let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
                let alpha = (s.opacity * (-0.5 * q).exp()).min(0.999);
                if alpha < 1.0 / 255.0 {
                    continue;
                }
                for k in 0..3 {
                    color[k] += s.color[k] * alpha * t;
                }
                out.contrib[i] += alpha * t;
                wsum += alpha * t;
                t *= 1.0 - alpha;
                if t < 1e-4 {
                    break;
                }
            }
            for k in 0..3 {
                color[k] += bg[k] * t;
            }
            out.rgb.push(color);
            out.weight_sum.push(wsum);
        }
    }
    out
}

/// Central difference of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with a small absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Straight recursive evaluation of a node's triangle from its ancestry:
/// walk up to the root, then replay each split from the top down.
pub fn recursive_triangle(forest: &Forest, id: u32, frame: &FrameVertices) -> [Vec3; 3] {
    let mut chain = vec![id];
    while let Some(p) = forest.nodes()[*chain.last().unwrap() as usize].parent {
        chain.push(p);
    }
    chain.reverse();
    let root = &forest.nodes()[chain[0] as usize];
    let mut tri = root.corners.map(|c| match c {
        pgav_core::CornerRef::TemplateVertex(v) => frame.positions()[v as usize],
        pgav_core::CornerRef::SplitPoint(_) => unreachable!("roots use template vertices"),
    });
    for pair in chain.windows(2) {
        let parent = &forest.nodes()[pair[0] as usize];
        let beta = parent.beta.unwrap();
        let p = tri[0] * beta[0] + tri[1] * beta[1] + tri[2] * beta[2];
        let slot = parent.children.unwrap().iter().position(|&c| c == pair[1]).unwrap();
        tri = [tri[slot], tri[(slot + 1) % 3], p];
    }
    tri
}

/// Grows a random forest by splitting random leaves with random split points.
pub fn random_forest(rng: &mut impl Rng, mesh: &pgav_core::TemplateMesh, splits: usize) -> Forest {
    let mut forest = Forest::new(mesh, 4);
    for _ in 0..splits {
        let leaves: Vec<u32> = forest
            .nodes()
            .iter()
            .filter(|n| n.is_leaf() && n.level < 4)
            .map(|n| n.id)
            .collect();
        let id = leaves[rng.random_range(0..leaves.len())];
        let raw = [
            rng.random::<f64>() + 0.05,
            rng.random::<f64>() + 0.05,
            rng.random::<f64>() + 0.05,
        ];
        let sum: f64 = raw.iter().sum();
        let children = std::array::from_fn(|_| random_residual(rng));
        forest.subdivide_with(id, raw.map(|v| v / sum), children).unwrap();
    }
    for n in 0..forest.root_count() {
        forest.node_mut(n as u32).unwrap().gaussian = random_residual(rng);
    }
    forest
}

pub fn random_residual(rng: &mut impl Rng) -> pgav_core::GaussianResidual {
    let q = [
        rng.random_range(-1.0..1.0f64),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    pgav_core::GaussianResidual {
        delta_mu: Vec3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.1..0.1),
        ),
        delta_rot: q.map(|v| v / n),
        delta_scale: Vec3::new(
            rng.random_range(0.2..0.7),
            rng.random_range(0.2..0.7),
            rng.random_range(0.1..0.4),
        ),
        opacity: rng.random_range(0.1..1.0),
        color: [rng.random(), rng.random(), rng.random()],
    }
}

/// True when a perturbation of size `h` on any splat parameter could cross
/// one of the compositing cut-offs (alpha floor, alpha clamp, transmittance
/// stop). Finite differences are meaningless across those jumps, so gradient
/// checks draw configurations away from them.
pub fn near_discontinuity(splats: &[Splat2D], cam: &Camera, h: f64) -> bool {
    let mut idx: Vec<usize> = (0..splats.len()).collect();
    idx.sort_by(|&a, &b| splats[a].depth.partial_cmp(&splats[b].depth).unwrap());
    for y in 0..cam.height {
        for x in 0..cam.width {
            let px = [x as f64 + 0.5, y as f64 + 0.5];
            let mut t: f64 = 1.0;
            for &i in &idx {
                let s = &splats[i];
                let dx = px[0] - s.mean.x;
                let dy = px[1] - s.mean.y;
                let (a, b, c) = (s.cov[(0, 0)], s.cov[(0, 1)], s.cov[(1, 1)]);
                let det = a * c - b * b;
                let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
                let g = (-0.5 * q).exp();
                let raw = s.opacity * g;
                let slope = ((c * dx - b * dy).abs() + (a * dy - b * dx).abs()) / det;
                let margin = 20.0 * h * (g + raw * slope);
                if (raw - 1.0 / 255.0).abs() < margin || (raw - 0.999).abs() < margin {
                    return true;
                }
                if raw < 1.0 / 255.0 {
                    continue;
                }
                let next = t * (1.0 - raw.min(0.999));
                if (next - 1e-4).abs() < 20.0 * h * t {
                    return true;
                }
                t = next;
                if t < 1e-4 {
                    break;
                }
            }
        }
    }
    false
}

/// Builds a reference at least 0.05 away from the render in every channel so
/// small perturbations never cross the kink of the absolute value.
pub fn offset_reference(rng: &mut impl Rng, img: &Image) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        let mag: f64 = rng.random_range(0.05..0.4);
        *v += if rng.random::<bool>() { mag } else { -mag };
    }
    out
}
