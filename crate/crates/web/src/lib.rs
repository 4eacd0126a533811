//! Browser viewer: fits or loads an asset for the demo sphere and renders
//! stream prefixes into an RGBA buffer for a canvas.

use pgav_core::binding::pose_forest;
use pgav_core::codec;
use pgav_core::fit::{FitConfig, SupervisionSet};
use pgav_core::importance::{face_scores, random_order};
use pgav_core::pipeline;
use pgav_core::render::{project_nodes, render};
use pgav_core::scene::{demo_scene, DemoScene, SceneConfig};
use pgav_core::session::prefix_bytes;
use pgav_core::{Camera, Forest, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const BACKGROUND: [f64; 3] = [0.0; 3];

#[wasm_bindgen]
pub struct Viewer {
    scene: DemoScene,
    importance: Vec<u8>,
    random: Vec<u8>,
    use_random: bool,
    prefix: f64,
    /// `None` shows every decoded node.
    level: Option<u8>,
    azimuth_deg: f64,
    size: u32,
    /// Nodes and records of the last render.
    shown: (usize, usize),
}

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn scene_config(size: u32) -> SceneConfig {
    SceneConfig {
        image_size: size,
        focal: 150.0 * size as f64 / 128.0,
        camera_count: 6,
        frame_count: 1,
        supersample: 1,
        ..SceneConfig::default()
    }
}

#[wasm_bindgen]
impl Viewer {
    /// Fits a fresh asset to the demo sphere. Depth is capped at two levels
    /// to keep it interactive.
    pub fn fit(seed: u64, size: u32, iterations: u32) -> Result<Viewer, JsError> {
        let scene = demo_scene(&scene_config(size), seed);
        let sup = SupervisionSet::new(scene.cameras.clone(), scene.references.clone(), scene.frames[0].clone())
            .map_err(err)?;
        let mut config = FitConfig {
            iterations,
            seed,
            ..FitConfig::default()
        };
        config.growth.max_level = 2;
        config.growth.cap_schedule = (iterations / 2).max(1);
        config.growth.step_k = (iterations / 6).max(1);
        let built = pipeline::build(&scene.mesh, &sup, &config).map_err(err)?;
        Self::with_asset(scene, built.asset, seed)
    }

    /// Wraps an asset produced by `pgav build` on the default demo scene.
    pub fn load(asset: &[u8], seed: u64, size: u32) -> Result<Viewer, JsError> {
        let scene = demo_scene(&scene_config(size), seed);
        Self::with_asset(scene, asset.to_vec(), seed)
    }

    fn with_asset(scene: DemoScene, importance: Vec<u8>, seed: u64) -> Result<Viewer, JsError> {
        let forest = codec::decode_prefix(&importance, &scene.mesh).map_err(err)?.forest;
        let scores = face_scores(&forest, &scene.cameras, &scene.frames[0], BACKGROUND).map_err(err)?;
        let order = random_order(&forest, &scores, &mut ChaCha8Rng::seed_from_u64(seed));
        let random = codec::encode(&forest, &order).map_err(err)?;
        let size = scene.cameras[0].width;
        Ok(Viewer {
            scene,
            importance,
            random,
            use_random: false,
            prefix: 1.0,
            level: None,
            azimuth_deg: 0.0,
            size,
            shown: (0, 0),
        })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn asset_bytes(&self) -> usize {
        self.importance.len()
    }

    pub fn set_prefix(&mut self, fraction: f64) {
        self.prefix = fraction.clamp(0.0, 1.0);
    }

    pub fn set_random_order(&mut self, random: bool) {
        self.use_random = random;
    }

    /// Negative shows all levels.
    pub fn set_level(&mut self, level: i32) {
        self.level = u8::try_from(level).ok();
    }

    pub fn set_azimuth(&mut self, degrees: f64) {
        self.azimuth_deg = degrees;
    }

    pub fn nodes_shown(&self) -> usize {
        self.shown.0
    }

    pub fn records_shown(&self) -> usize {
        self.shown.1
    }

    fn camera(&self) -> Result<Camera, JsError> {
        let az = self.azimuth_deg.to_radians();
        let el = 15f64.to_radians();
        let d = 3.2;
        let eye = Vec3::new(d * el.cos() * az.sin(), d * el.sin(), d * el.cos() * az.cos());
        let focal = 150.0 * self.size as f64 / 128.0;
        Camera::look_at(eye, Vec3::zeros(), Vec3::y(), focal, self.size, self.size).map_err(err)
    }

    /// RGBA pixels of the current prefix, row-major.
    pub fn render(&mut self) -> Result<Vec<u8>, JsError> {
        let bytes = if self.use_random {
            &self.random
        } else {
            &self.importance
        };
        let n = prefix_bytes(bytes, self.prefix).map_err(err)?;
        let state = codec::decode_prefix(&bytes[..n], &self.scene.mesh).map_err(err)?;
        let forest: &Forest = &state.forest;
        let ids = match self.level {
            Some(l) => forest.level_render_set(l.min(forest.max_level_present())),
            None => (0..forest.len() as u32).collect(),
        };
        let cam = self.camera()?;
        let posed = pose_forest(forest, &self.scene.frames[0]);
        let image = render(&project_nodes(&posed, &ids, &cam), &cam, BACKGROUND, None)
            .map_err(err)?
            .image;
        self.shown = (ids.len(), codec::layout(&bytes[..n]).map_err(err)?.1);
        Ok(image
            .to_rgb8()
            .chunks(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect())
    }
}
