//! Multi-view fitting of a forest with multi-level supervision and
//! interleaved growth.
//!
//! Each iteration renders every supervised level `l` (the cumulative set of
//! nodes at level `<= l`) from every camera and minimizes
//!
//! `sum_l w_l * meanL1_l + lambda_scale * L_scale + lambda_pos * L_pos`
//!
//! where the image terms are averaged over cameras. Color, opacity, `delta_mu`
//! and the split points receive photometric gradients; `delta_scale` only sees
//! its regularizer and `delta_rot` is left untouched. Opacity is stored in
//! `[0, 1]` but stepped on its logit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binding::{mean_corner_vjp, pose_forest, PosedForest};
use crate::forest::{project_simplex, CornerRef, Forest, NodeId};
use crate::growth::{self, GrowthConfig};
use crate::image::Image;
use crate::mesh::{Camera, FrameVertices, Vec3};
use crate::par;
use crate::render::{self, mean_jacobian, RenderError, SplatStats};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit config: {0}")]
    Config(String),
    #[error("invalid supervision: {0}")]
    Supervision(String),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub beta: f64,
    pub delta_mu: f64,
    pub delta_scale: f64,
    pub delta_rot: f64,
    pub color: f64,
    pub opacity: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            beta: 1e-2,
            delta_mu: 5e-3,
            delta_scale: 2e-2,
            delta_rot: 1e-3,
            color: 2.5e-3,
            opacity: 5e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Supervision {
    /// Every level up to the current cap.
    AllLevels,
    /// Only the finest level present (below the cap).
    FinestOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Adam,
    /// Plain gradient descent with the same per-group learning rates.
    Gd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iterations: u32,
    pub learning_rates: LearningRates,
    pub lambda_pos: f64,
    pub lambda_scale: f64,
    pub tau_pos: f64,
    pub tau_scale: f64,
    /// Weight per level index; `None` weighs the supervised levels uniformly.
    pub level_weights: Option<Vec<f64>>,
    pub supervision: Supervision,
    pub optimizer: Optimizer,
    pub background: [f64; 3],
    pub growth: GrowthConfig,
    /// Recorded in the log; fitting itself is deterministic.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 600,
            learning_rates: LearningRates::default(),
            lambda_pos: 0.01,
            lambda_scale: 1.0,
            tau_pos: 1.0,
            tau_scale: 0.6,
            level_weights: None,
            supervision: Supervision::AllLevels,
            optimizer: Optimizer::Adam,
            background: [0.0; 3],
            growth: GrowthConfig::default(),
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let lr = &self.learning_rates;
        let rates = [lr.beta, lr.delta_mu, lr.delta_scale, lr.delta_rot, lr.color, lr.opacity];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(FitError::Config("learning rates must be positive".into()));
        }
        for (name, v) in [
            ("lambda_pos", self.lambda_pos),
            ("lambda_scale", self.lambda_scale),
            ("tau_pos", self.tau_pos),
            ("tau_scale", self.tau_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FitError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if let Some(w) = &self.level_weights {
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || !w.iter().any(|&v| v > 0.0) {
                return Err(FitError::Config(
                    "level_weights must be >= 0 with at least one positive".into(),
                ));
            }
        }
        self.growth.validate().map_err(FitError::Config)
    }
}

/// Cameras with one reference image each, all observing `frame`.
#[derive(Clone, Debug)]
pub struct SupervisionSet {
    cameras: Vec<Camera>,
    references: Vec<Image>,
    frame: FrameVertices,
}

impl SupervisionSet {
    pub fn new(cameras: Vec<Camera>, references: Vec<Image>, frame: FrameVertices) -> Result<Self, FitError> {
        if cameras.is_empty() {
            return Err(FitError::Supervision("no cameras".into()));
        }
        if cameras.len() != references.len() {
            return Err(FitError::Supervision(format!(
                "{} cameras but {} reference images",
                cameras.len(),
                references.len()
            )));
        }
        for (i, (c, r)) in cameras.iter().zip(&references).enumerate() {
            if (c.width, c.height) != (r.width, r.height) {
                return Err(FitError::Supervision(format!(
                    "reference {i} is {}x{} but camera {i} is {}x{}",
                    r.width, r.height, c.width, c.height
                )));
            }
        }
        Ok(Self {
            cameras,
            references,
            frame,
        })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn references(&self) -> &[Image] {
        &self.references
    }

    pub fn frame(&self) -> &FrameVertices {
        &self.frame
    }
}

/// Supervised levels and their weights for the forest's current cap.
pub fn supervised_levels(forest: &Forest, config: &FitConfig) -> Vec<(u8, f64)> {
    let top = forest.depth_cap().min(forest.max_level_present());
    let levels: Vec<u8> = match config.supervision {
        Supervision::AllLevels => (0..=top).collect(),
        Supervision::FinestOnly => vec![top],
    };
    let uniform = 1.0 / levels.len() as f64;
    levels
        .into_iter()
        .map(|l| {
            let w = match &config.level_weights {
                Some(w) => w.get(l as usize).copied().unwrap_or(0.0),
                None => uniform,
            };
            (l, w)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    /// Weighted sum of the per-level image terms.
    pub rgb: f64,
    /// `(level, weight, camera-averaged mean L1)`.
    pub levels: Vec<(u8, f64, f64)>,
    pub pos: f64,
    pub scale: f64,
}

/// Gradients indexed by node id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub delta_mu: Vec<Vec3>,
    pub delta_scale: Vec<Vec3>,
    pub color: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    /// Zero for leaves.
    pub beta: Vec<[f64; 3]>,
}

impl ParamGrads {
    fn zeros(n: usize) -> Self {
        Self {
            delta_mu: vec![Vec3::zeros(); n],
            delta_scale: vec![Vec3::zeros(); n],
            color: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            beta: vec![[0.0; 3]; n],
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossEval {
    pub terms: LossTerms,
    pub grads: ParamGrads,
    /// Per-camera statistics of the full-forest render, when that level was
    /// supervised. Feeds growth.
    pub finest_stats: Option<Vec<Vec<SplatStats>>>,
}

/// `mean_j sum_d max(|x_jd| - tau, 0)^2` and its gradient.
fn hinge_penalty(values: &[Vec3], tau: f64, absolute: bool) -> (f64, Vec<Vec3>) {
    if values.is_empty() {
        return (0.0, Vec::new());
    }
    let n = values.len() as f64;
    let mut total = 0.0;
    let grads = values
        .iter()
        .map(|v| {
            v.map(|x| {
                let mag = if absolute { x.abs() } else { x };
                let excess = (mag - tau).max(0.0);
                total += excess * excess;
                let sign = if absolute { x.signum() } else { 1.0 };
                2.0 * excess * sign / n
            })
        })
        .collect();
    (total / n, grads)
}

/// Chains world-space mean gradients back to `delta_mu` and to the split
/// points of every ancestor. Returns `(d/d delta_mu, d/d beta)` by node id.
pub fn backprop_mean_gradients(forest: &Forest, posed: &PosedForest, grad_mean: &[Vec3]) -> (Vec<Vec3>, Vec<[f64; 3]>) {
    let n = forest.len();
    let mut g_mu = vec![Vec3::zeros(); n];
    let mut g_beta = vec![[0.0; 3]; n];
    // gradient on each node's split point
    let mut g_split = vec![Vec3::zeros(); n];
    let push = |corner: CornerRef, g: Vec3, g_split: &mut Vec<Vec3>| {
        if let CornerRef::SplitPoint(owner) = corner {
            g_split[owner as usize] += g;
        }
    };
    for (i, node) in forest.nodes().iter().enumerate() {
        let Some(frame) = &posed.frames[i] else {
            continue;
        };
        let g = grad_mean[i];
        if g == Vec3::zeros() {
            continue;
        }
        let mu = node.gaussian.delta_mu;
        g_mu[i] = frame.scale * (frame.rot.transpose() * g);
        let corner_grads = mean_corner_vjp(&posed.triangles[i], &mu, &g);
        for (c, gc) in node.corners.iter().zip(corner_grads) {
            push(*c, gc, &mut g_split);
        }
    }
    // split points only reference lower ids, so one descending sweep suffices
    for i in (0..n).rev() {
        let node = &forest.nodes()[i];
        let (Some(beta), gp) = (node.beta, g_split[i]) else {
            continue;
        };
        if gp == Vec3::zeros() {
            continue;
        }
        let tri = &posed.triangles[i];
        g_beta[i] = [gp.dot(&tri[0]), gp.dot(&tri[1]), gp.dot(&tri[2])];
        for (c, b) in node.corners.iter().zip(beta) {
            push(*c, gp * b, &mut g_split);
        }
    }
    (g_mu, g_beta)
}

/// Total loss and gradients for the forest's current state.
pub fn evaluate(forest: &Forest, sup: &SupervisionSet, config: &FitConfig) -> Result<LossEval, FitError> {
    let n = forest.len();
    let posed = pose_forest(forest, &sup.frame);
    let levels = supervised_levels(forest, config);
    let finest = forest.max_level_present();
    let ncam = sup.cameras.len() as f64;

    let mut grads = ParamGrads::zeros(n);
    let mut grad_mean = vec![Vec3::zeros(); n];
    let mut terms = LossTerms::default();
    let mut finest_stats = None;

    for &(level, weight) in &levels {
        let ids: Vec<NodeId> = forest.level_render_set(level);
        let per_cam = par::map_indexed(sup.cameras.len(), |c| {
            let cam = &sup.cameras[c];
            let splats = render::project_nodes(&posed, &ids, cam);
            render::render(&splats, cam, config.background, Some(&sup.references[c])).map(|out| (splats, out))
        });
        let mut l1 = 0.0;
        let mut level_stats = Vec::with_capacity(per_cam.len());
        for (c, result) in per_cam.into_iter().enumerate() {
            let (splats, out) = result?;
            l1 += out.loss.expect("reference supplied") / ncam;
            let f = weight / ncam;
            let cam = &sup.cameras[c];
            for (s, g) in splats.iter().zip(out.grads.as_ref().expect("reference supplied")) {
                let id = s.node_id as usize;
                for k in 0..3 {
                    grads.color[id][k] += f * g.color[k];
                }
                grads.opacity[id] += f * g.opacity;
                if g.mean != [0.0; 2] {
                    let world = posed.gaussians[id].as_ref().expect("projected").mean;
                    let j = mean_jacobian(cam, &world);
                    grad_mean[id] += f * (j.transpose() * nalgebra::Vector2::from(g.mean));
                }
            }
            level_stats.push(out.stats);
        }
        terms.levels.push((level, weight, l1));
        terms.rgb += weight * l1;
        if level == finest {
            finest_stats = Some(level_stats);
        }
    }

    let (g_mu, g_beta) = backprop_mean_gradients(forest, &posed, &grad_mean);
    grads.delta_mu = g_mu;
    grads.beta = g_beta;

    let mus: Vec<Vec3> = forest.nodes().iter().map(|n| n.gaussian.delta_mu).collect();
    let scales: Vec<Vec3> = forest.nodes().iter().map(|n| n.gaussian.delta_scale).collect();
    let (pos, g_pos) = hinge_penalty(&mus, config.tau_pos, true);
    let (scale, g_scale) = hinge_penalty(&scales, config.tau_scale, false);
    for i in 0..n {
        grads.delta_mu[i] += config.lambda_pos * g_pos[i];
        grads.delta_scale[i] += config.lambda_scale * g_scale[i];
    }
    terms.pos = pos;
    terms.scale = scale;
    terms.total = terms.rgb + config.lambda_scale * scale + config.lambda_pos * pos;
    Ok(LossEval {
        terms,
        grads,
        finest_stats,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitLogRow {
    pub iteration: u32,
    pub loss: f64,
    pub rgb: f64,
    pub nodes: usize,
    pub max_level: u8,
    pub depth_cap: u8,
    pub level_histogram: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitLog {
    pub seed: u64,
    pub rows: Vec<FitLogRow>,
}

impl FitLog {
    /// One row per iteration; the histogram column lists node counts per
    /// level separated by `;`.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# seed={}\niteration,loss,rgb,nodes,max_level,depth_cap,level_hist\n",
            self.seed
        );
        for r in &self.rows {
            let hist: Vec<String> = r.level_histogram.iter().map(|c| c.to_string()).collect();
            out += &format!(
                "{},{:.12e},{:.12e},{},{},{},{}\n",
                r.iteration,
                r.loss,
                r.rgb,
                r.nodes,
                r.max_level,
                r.depth_cap,
                hist.join(";")
            );
        }
        out
    }
}

// delta_mu (3), delta_scale (3), color (3), opacity (1), beta (3)
const SLOTS: usize = 13;

#[derive(Clone, Debug, Default)]
struct OptimizerState {
    m: Vec<[f64; SLOTS]>,
    v: Vec<[f64; SLOTS]>,
    steps: Vec<u32>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-10;
const OPACITY_EPS: f64 = 1e-6;

impl OptimizerState {
    fn grow(&mut self, n: usize) {
        self.m.resize(n, [0.0; SLOTS]);
        self.v.resize(n, [0.0; SLOTS]);
        self.steps.resize(n, 0);
    }
}

fn apply_step(forest: &mut Forest, grads: &ParamGrads, config: &FitConfig, state: &mut OptimizerState) {
    let lr = &config.learning_rates;
    let rates: [f64; SLOTS] = [
        lr.delta_mu,
        lr.delta_mu,
        lr.delta_mu,
        lr.delta_scale,
        lr.delta_scale,
        lr.delta_scale,
        lr.color,
        lr.color,
        lr.color,
        lr.opacity,
        lr.beta,
        lr.beta,
        lr.beta,
    ];
    state.grow(forest.len());
    for i in 0..forest.len() {
        let mut g = [0.0; SLOTS];
        g[0..3].copy_from_slice(grads.delta_mu[i].as_slice());
        g[3..6].copy_from_slice(grads.delta_scale[i].as_slice());
        g[6..9].copy_from_slice(&grads.color[i]);
        // opacity steps in logit space so it cannot be clamped to exactly 0
        let o = forest.nodes()[i].gaussian.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        g[9] = grads.opacity[i] * o * (1.0 - o);
        g[10..13].copy_from_slice(&grads.beta[i]);
        let step: [f64; SLOTS] = match config.optimizer {
            Optimizer::Gd => std::array::from_fn(|k| rates[k] * g[k]),
            Optimizer::Adam => {
                state.steps[i] += 1;
                let t = state.steps[i] as i32;
                let (m, v) = (&mut state.m[i], &mut state.v[i]);
                std::array::from_fn(|k| {
                    m[k] = ADAM_B1 * m[k] + (1.0 - ADAM_B1) * g[k];
                    v[k] = ADAM_B2 * v[k] + (1.0 - ADAM_B2) * g[k] * g[k];
                    let m_hat = m[k] / (1.0 - ADAM_B1.powi(t));
                    let v_hat = v[k] / (1.0 - ADAM_B2.powi(t));
                    rates[k] * m_hat / (v_hat.sqrt() + ADAM_EPS)
                })
            }
        };
        let node = forest.node_mut(i as NodeId).expect("index in range");
        let gs = &mut node.gaussian;
        for k in 0..3 {
            gs.delta_mu[k] -= step[k];
            gs.delta_scale[k] -= step[3 + k];
            gs.color[k] -= step[6 + k];
        }
        let logit = (o / (1.0 - o)).ln() - step[9];
        gs.opacity = 1.0 / (1.0 + (-logit).exp());
        gs.sanitize();
        if let Some(beta) = node.beta.as_mut() {
            if step[10..13].iter().any(|&s| s != 0.0) {
                *beta = project_simplex([beta[0] - step[10], beta[1] - step[11], beta[2] - step[12]]);
            }
        }
    }
}

/// Runs the training-growth loop in place and returns the per-iteration log.
pub fn fit(forest: &mut Forest, sup: &SupervisionSet, config: &FitConfig) -> Result<FitLog, FitError> {
    config.validate()?;
    let mut log = FitLog {
        seed: config.seed,
        rows: Vec::with_capacity(config.iterations as usize),
    };
    let mut state = OptimizerState::default();
    for it in 0..config.iterations {
        growth::advance_cap(forest, &config.growth, it);
        let eval = evaluate(forest, sup, config)?;
        log.rows.push(FitLogRow {
            iteration: it,
            loss: eval.terms.total,
            rgb: eval.terms.rgb,
            nodes: forest.len(),
            max_level: forest.max_level_present(),
            depth_cap: forest.depth_cap(),
            level_histogram: forest.level_histogram(),
        });
        apply_step(forest, &eval.grads, config, &mut state);
        if let Some(stats) = &eval.finest_stats {
            growth::accumulate(forest, stats.iter().map(|s| s.as_slice()));
        }
        // no growth on the final iteration: new nodes would stay untrained
        if (it + 1) % config.growth.step_k == 0 && it + 1 < config.iterations {
            growth::growth_step(forest, &config.growth);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::TemplateMesh;

    fn forest_with_levels() -> Forest {
        let mesh = TemplateMesh::new(3, vec![[0, 1, 2]]).unwrap();
        let mut f = Forest::new(&mesh, 4);
        let kids = f.subdivide(0).unwrap();
        f.subdivide(kids[1]).unwrap();
        f
    }

    #[test]
    fn uniform_weights_over_supervised_levels() {
        let mut f = forest_with_levels();
        let cfg = FitConfig::default();
        let s = supervised_levels(&f, &cfg);
        assert_eq!(s.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(s.iter().all(|p| (p.1 - 1.0 / 3.0).abs() < 1e-15));
        f.set_depth_cap(1);
        assert_eq!(supervised_levels(&f, &cfg).len(), 2);
        let finest = FitConfig {
            supervision: Supervision::FinestOnly,
            ..Default::default()
        };
        f.set_depth_cap(4);
        assert_eq!(supervised_levels(&f, &finest), vec![(2, 1.0)]);
    }

    #[test]
    fn explicit_weights_are_looked_up_by_level() {
        let f = forest_with_levels();
        let cfg = FitConfig {
            level_weights: Some(vec![0.5, 0.0]),
            ..Default::default()
        };
        assert_eq!(supervised_levels(&f, &cfg), vec![(0, 0.5), (1, 0.0), (2, 0.0)]);
    }

    #[test]
    fn scale_penalty_plug_in() {
        let (v, g) = hinge_penalty(&[Vec3::new(1.6, 0.6, 0.6)], 0.6, false);
        assert!((v - 1.0).abs() < 1e-12);
        assert!((g[0].x - 2.0).abs() < 1e-12 && g[0].y == 0.0);
        let (v, g) = hinge_penalty(&[Vec3::new(-1.5, 0.9, 0.0), Vec3::zeros()], 1.0, true);
        assert!((v - 0.125).abs() < 1e-12);
        assert!((g[0].x + 0.5).abs() < 1e-12 && g[0].y == 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        let mut bad = FitConfig::default();
        bad.learning_rates.color = 0.0;
        assert!(bad.validate().is_err());
        let bad = FitConfig {
            level_weights: Some(vec![0.0, 0.0]),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<FitConfig>(r#"{"iterations": 3}"#).is_ok());
        assert!(serde_json::from_str::<FitConfig>(r#"{"iteration": 3}"#).is_err());
    }
}
