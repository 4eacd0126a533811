//! Deterministic CPU splatting.
//!
//! Splats are sorted globally by depth (ties by node id) and composited front
//! to back per pixel. Work is split into 16x16 tiles that can run in
//! parallel; per-splat statistics are merged in tile order so the result does
//! not depend on the thread count.
//!
//! With a reference image the renderer also returns the mean-L1 loss and its
//! exact gradient with respect to each splat's color, opacity and 2D mean.

use nalgebra::{Matrix2, Matrix2x3, Vector2};

use crate::binding::{covariance, pose_forest, PosedForest, ResolvedGaussian};
use crate::forest::{Forest, NodeId};
use crate::image::Image;
use crate::mesh::{Camera, FrameVertices};
use crate::par;

pub const NEAR_PLANE: f64 = 0.01;
pub const DILATION: f64 = 0.3;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const ALPHA_MAX: f64 = 0.999;
pub const T_MIN: f64 = 1e-4;
pub const MIN_COV_DET: f64 = 1e-12;
const TILE: u32 = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("splat of node {node_id} has a singular 2D covariance")]
    SingularCovariance { node_id: NodeId },
    #[error("reference image is {got:?}, camera is {expected:?}")]
    ReferenceSize { expected: (u32, u32), got: (u32, u32) },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub node_id: NodeId,
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Projects a world-space Gaussian. `None` when it lies in front of the near
/// plane or its 3-sigma footprint misses the viewport.
pub fn project(g: &ResolvedGaussian, cam: &Camera, node_id: NodeId) -> Option<Splat2D> {
    let w = cam.rotation();
    let p = w * g.mean + cam.translation();
    if p.z <= NEAR_PLANE {
        return None;
    }
    let j = pinhole_jacobian(cam, &p);
    let sigma = covariance(g);
    let cov = j * w * sigma * w.transpose() * j.transpose() + Matrix2::identity() * DILATION;
    let cov = (cov + cov.transpose()) * 0.5;
    let mean = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
    let r = 3.0 * max_eigenvalue(&cov).sqrt();
    if mean.x + r < 0.0 || mean.x - r > cam.width as f64 || mean.y + r < 0.0 || mean.y - r > cam.height as f64 {
        return None;
    }
    Some(Splat2D {
        node_id,
        mean,
        cov,
        depth: p.z,
        opacity: g.opacity,
        color: g.color,
    })
}

fn pinhole_jacobian(cam: &Camera, p: &nalgebra::Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz * iz,
    )
}

/// Derivative of the projected pixel position with respect to the world
/// position of the mean.
pub fn mean_jacobian(cam: &Camera, world: &nalgebra::Vector3<f64>) -> Matrix2x3<f64> {
    let w = cam.rotation();
    let p = w * world + cam.translation();
    pinhole_jacobian(cam, &p) * w
}

pub fn max_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let mid = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    mid + disc
}

/// Per-splat statistics, aligned with the input splat slice.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatStats {
    pub node_id: NodeId,
    /// Sum over pixels of `alpha * T`.
    pub contrib: f64,
    /// Norm of the summed `dL/dmean2d` with the mean in normalized device
    /// coordinates, i.e. the pixel gradient scaled by half the image size
    /// per axis. Zero without a reference.
    pub grad2d: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub color: [f64; 3],
    pub opacity: f64,
    pub mean: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    /// Accumulated opacity `1 - T_final` per pixel.
    pub alpha: Vec<f64>,
    pub stats: Vec<SplatStats>,
    /// Present only when a reference image was supplied.
    pub grads: Option<Vec<SplatGrad>>,
    pub loss: Option<f64>,
}

impl RenderOutput {
    /// `node_id,contrib,grad2d` rows.
    pub fn stats_csv(&self) -> String {
        let mut out = String::from("node_id,contrib,grad2d\n");
        for s in &self.stats {
            out.push_str(&format!("{},{},{}\n", s.node_id, s.contrib, s.grad2d));
        }
        out
    }
}

struct Prepared {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    // upper bound of the quadratic form below which alpha can reach ALPHA_MIN
    q_cut: f64,
    opacity: f64,
    color: [f64; 3],
    // inclusive pixel bounds, empty when min > max
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
}

fn prepare(s: &Splat2D, width: u32, height: u32) -> Result<Prepared, RenderError> {
    let det = s.cov.determinant();
    if !(det >= MIN_COV_DET) {
        return Err(RenderError::SingularCovariance { node_id: s.node_id });
    }
    let conic = Matrix2::new(s.cov[(1, 1)], -s.cov[(0, 1)], -s.cov[(1, 0)], s.cov[(0, 0)]) / det;
    let mut p = Prepared {
        mean: s.mean,
        conic,
        q_cut: 2.0 * (s.opacity / ALPHA_MIN).ln() * (1.0 + 1e-9) + 1e-9,
        opacity: s.opacity,
        color: s.color,
        x0: 0,
        x1: -1,
        y0: 0,
        y1: -1,
    };
    // alpha >= ALPHA_MIN requires d^T conic d <= 2 ln(opacity / ALPHA_MIN),
    // which bounds |d| by sqrt(2 ln(.) * lambda_max).
    if s.opacity >= ALPHA_MIN {
        let q = 2.0 * (s.opacity / ALPHA_MIN).ln();
        let r = (q * max_eigenvalue(&s.cov)).sqrt() * (1.0 + 1e-9) + 1e-9;
        // pixel centers sit at integer + 0.5
        p.x0 = ((s.mean.x - r - 0.5).ceil() as i64).max(0);
        p.x1 = ((s.mean.x + r - 0.5).floor() as i64).min(width as i64 - 1);
        p.y0 = ((s.mean.y - r - 0.5).ceil() as i64).max(0);
        p.y1 = ((s.mean.y + r - 0.5).floor() as i64).min(height as i64 - 1);
    }
    Ok(p)
}

/// Depth-ascending order with node id as tie-break.
pub fn sort_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].node_id.cmp(&splats[b].node_id))
    });
    order
}

struct TileResult {
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
    rgb: Vec<f64>,
    alpha: Vec<f64>,
    // (splat index, contrib, grad)
    touched: Vec<(usize, f64, SplatGrad)>,
    loss: f64,
}

pub fn render(
    splats: &[Splat2D],
    cam: &Camera,
    background: [f64; 3],
    reference: Option<&Image>,
) -> Result<RenderOutput, RenderError> {
    let (width, height) = (cam.width, cam.height);
    if let Some(r) = reference {
        if (r.width, r.height) != (width, height) {
            return Err(RenderError::ReferenceSize {
                expected: (width, height),
                got: (r.width, r.height),
            });
        }
    }
    let prepared: Vec<Prepared> = splats
        .iter()
        .map(|s| prepare(s, width, height))
        .collect::<Result<_, _>>()?;
    let order = sort_order(splats);

    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for &i in &order {
        let p = &prepared[i];
        if p.x0 > p.x1 || p.y0 > p.y1 {
            continue;
        }
        for ty in (p.y0 as u32 / TILE)..=(p.y1 as u32 / TILE) {
            for tx in (p.x0 as u32 / TILE)..=(p.x1 as u32 / TILE) {
                bins[(ty * tiles_x + tx) as usize].push(i);
            }
        }
    }

    let scale = 1.0 / (3.0 * width as f64 * height as f64);
    let tiles: Vec<TileResult> = par::map_indexed(bins.len(), |t| {
        let tx = t as u32 % tiles_x;
        let ty = t as u32 / tiles_x;
        render_tile(
            &prepared,
            &bins[t],
            (tx * TILE, ty * TILE),
            (TILE.min(width - tx * TILE), TILE.min(height - ty * TILE)),
            background,
            reference,
            scale,
        )
    });

    let mut image = Image::filled(width, height, background);
    let mut alpha = vec![0.0; (width * height) as usize];
    let mut stats: Vec<SplatStats> = splats
        .iter()
        .map(|s| SplatStats {
            node_id: s.node_id,
            ..Default::default()
        })
        .collect();
    let mut grads = vec![SplatGrad::default(); splats.len()];
    let mut loss = 0.0;
    for tile in tiles {
        for y in 0..tile.h {
            for x in 0..tile.w {
                let local = (y * tile.w + x) as usize;
                let global = ((tile.y0 + y) * width + tile.x0 + x) as usize;
                image.data[3 * global..3 * global + 3].copy_from_slice(&tile.rgb[3 * local..3 * local + 3]);
                alpha[global] = tile.alpha[local];
            }
        }
        for (i, contrib, g) in tile.touched {
            stats[i].contrib += contrib;
            let acc = &mut grads[i];
            for c in 0..3 {
                acc.color[c] += g.color[c];
            }
            acc.opacity += g.opacity;
            acc.mean[0] += g.mean[0];
            acc.mean[1] += g.mean[1];
        }
        loss += tile.loss;
    }

    let (grads, loss) = if reference.is_some() {
        let (hw, hh) = (0.5 * width as f64, 0.5 * height as f64);
        for (s, g) in stats.iter_mut().zip(&grads) {
            s.grad2d = (g.mean[0] * hw).hypot(g.mean[1] * hh);
        }
        (Some(grads), Some(loss * scale))
    } else {
        (None, None)
    };
    Ok(RenderOutput {
        image,
        alpha,
        stats,
        grads,
        loss,
    })
}

struct Hit {
    splat: usize,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    transmittance: f64,
    d: Vector2<f64>,
}

fn render_tile(
    prepared: &[Prepared],
    list: &[usize],
    origin: (u32, u32),
    size: (u32, u32),
    background: [f64; 3],
    reference: Option<&Image>,
    scale: f64,
) -> TileResult {
    let (w, h) = size;
    let mut rgb = vec![0.0; (3 * w * h) as usize];
    let mut alpha_out = vec![0.0; (w * h) as usize];
    // sparse per-tile accumulation keyed by position in `list`
    let mut contrib = vec![0.0; list.len()];
    let mut grads = vec![SplatGrad::default(); list.len()];
    let mut loss = 0.0;
    let mut hits: Vec<(usize, Hit)> = Vec::new();

    for ly in 0..h {
        for lx in 0..w {
            let px = origin.0 + lx;
            let py = origin.1 + ly;
            let pix = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
            hits.clear();
            let mut t = 1.0;
            let mut color = [0.0; 3];
            for (slot, &i) in list.iter().enumerate() {
                let p = &prepared[i];
                let (x, y) = (px as i64, py as i64);
                if x < p.x0 || x > p.x1 || y < p.y0 || y > p.y1 {
                    continue;
                }
                let d = pix - p.mean;
                let q = p.conic[(0, 0)] * d.x * d.x + 2.0 * p.conic[(0, 1)] * d.x * d.y + p.conic[(1, 1)] * d.y * d.y;
                if q > p.q_cut {
                    continue;
                }
                let gauss = (-0.5 * q).exp();
                let raw = p.opacity * gauss;
                let a = raw.min(ALPHA_MAX);
                if a < ALPHA_MIN {
                    continue;
                }
                let weight = a * t;
                for c in 0..3 {
                    color[c] += p.color[c] * weight;
                }
                contrib[slot] += weight;
                hits.push((
                    slot,
                    Hit {
                        splat: i,
                        alpha: a,
                        gauss,
                        clamped: raw > ALPHA_MAX,
                        transmittance: t,
                        d,
                    },
                ));
                t *= 1.0 - a;
                if t < T_MIN {
                    break;
                }
            }
            for c in 0..3 {
                color[c] += background[c] * t;
            }
            let local = (ly * w + lx) as usize;
            rgb[3 * local..3 * local + 3].copy_from_slice(&color);
            alpha_out[local] = 1.0 - t;

            let Some(reference) = reference else {
                continue;
            };
            let target = reference.pixel(px, py);
            let mut dl_dc = [0.0; 3];
            for c in 0..3 {
                let r = color[c] - target[c];
                loss += r.abs();
                dl_dc[c] = if r > 0.0 {
                    scale
                } else if r < 0.0 {
                    -scale
                } else {
                    0.0
                };
            }
            // suffix holds the color contributed behind the current hit,
            // including the background
            let mut suffix = [background[0] * t, background[1] * t, background[2] * t];
            for (slot, hit) in hits.iter().rev() {
                let p = &prepared[hit.splat];
                let weight = hit.alpha * hit.transmittance;
                let g = &mut grads[*slot];
                let mut dl_dalpha = 0.0;
                for c in 0..3 {
                    g.color[c] += dl_dc[c] * weight;
                    dl_dalpha += dl_dc[c] * (p.color[c] * hit.transmittance - suffix[c] / (1.0 - hit.alpha));
                }
                for c in 0..3 {
                    suffix[c] += p.color[c] * weight;
                }
                if hit.clamped {
                    continue;
                }
                g.opacity += dl_dalpha * hit.gauss;
                let dm = p.conic * hit.d * (dl_dalpha * p.opacity * hit.gauss);
                g.mean[0] += dm.x;
                g.mean[1] += dm.y;
            }
        }
    }
    let touched = list
        .iter()
        .enumerate()
        .filter(|(slot, _)| contrib[*slot] != 0.0 || grads[*slot] != SplatGrad::default())
        .map(|(slot, &i)| (i, contrib[slot], grads[slot]))
        .collect();
    TileResult {
        x0: origin.0,
        y0: origin.1,
        w,
        h,
        rgb,
        alpha: alpha_out,
        touched,
        loss,
    }
}

/// Projects the listed nodes of a posed forest, dropping culled and
/// degenerate ones.
pub fn project_nodes(posed: &PosedForest, ids: &[NodeId], cam: &Camera) -> Vec<Splat2D> {
    ids.iter()
        .filter_map(|&id| {
            let g = posed.gaussians[id as usize].as_ref()?;
            project(g, cam, id)
        })
        .collect()
}

/// Renders every node of `forest` posed by `frame`.
pub fn render_forest(
    forest: &Forest,
    frame: &FrameVertices,
    cam: &Camera,
    background: [f64; 3],
) -> Result<RenderOutput, RenderError> {
    let posed = pose_forest(forest, frame);
    let ids: Vec<NodeId> = (0..forest.len() as NodeId).collect();
    render(&project_nodes(&posed, &ids, cam), cam, background, None)
}
