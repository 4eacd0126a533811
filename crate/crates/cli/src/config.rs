//! JSON run configuration. Command-line flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use pgav_core::fit::FitConfig;
use pgav_core::scene::SceneConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub fit: FitConfig,
    /// Synthetic scene written by `demo`.
    pub scene: SceneConfig,
    pub paths: Paths,
    pub stream: StreamSettings,
    /// Worker threads; `null` uses every core.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory holding `mesh.obj`, `frames.json`, `cameras.json` and
    /// `ref_NNN.ppm`; fills in whichever of the entries below are unset.
    pub scene: Option<PathBuf>,
    pub mesh: Option<PathBuf>,
    pub frames: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    /// Directory of reference images `ref_NNN.ppm`, one per camera.
    pub references: Option<PathBuf>,
    pub asset: Option<PathBuf>,
    pub ranking: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSettings {
    /// Link rate in bytes per second, or `ms:rate,...` segments.
    pub bandwidth: String,
    pub tick_ms: f64,
    pub max_ticks: usize,
    /// Root faces allowed to refine, e.g. `0-19,40`. Empty means all.
    pub mask: String,
    pub defer_masked: bool,
    /// Animation frame used for rendering.
    pub frame: usize,
}

impl Default for StreamSettings {
    fn default() -> Self {
        Self {
            bandwidth: "50000".into(),
            tick_ms: 100.0,
            max_ticks: 10_000,
            mask: String::new(),
            defer_masked: false,
            frame: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn defaults_json() -> String {
        serde_json::to_string_pretty(&Self::default()).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let back: RunConfig = serde_json::from_str(&RunConfig::defaults_json()).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"fit": {"iters": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"paths": {"mesh": "a"}, "extra": 1}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"stream": {"tick_ms": 50}}"#).unwrap();
        assert_eq!(c.stream.tick_ms, 50.0);
    }
}
