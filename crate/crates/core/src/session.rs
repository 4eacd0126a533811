//! Bandwidth-limited streaming simulation.
//!
//! The header and base section are delivered before the first tick, so the
//! first checkpoint is the coarse model. Each tick then adds the profile's
//! byte budget to the refinement stream; every record that is complete by the
//! end of the tick is applied and all cameras are re-rendered. Quality is
//! measured against the render of the complete asset.

use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::codec::{self, CodecError, DecodedState, Record, RECORD_BYTES};
use crate::forest::NodeId;
use crate::image::{mean_l1, mse, psnr_from_mse, Image};
use crate::mesh::{Camera, FrameVertices, MeshError, TemplateMesh};
use crate::par;
use crate::render::{render_forest, RenderError};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("invalid session: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] MeshError),
}

/// Piecewise-constant link rate. Segment `i` lasts `duration_ms`; after the
/// last segment its rate stays in effect.
#[derive(Clone, Debug, PartialEq)]
pub struct BandwidthProfile {
    pub tick_ms: f64,
    /// `(duration_ms, bytes_per_tick)`.
    pub segments: Vec<(f64, u64)>,
}

impl BandwidthProfile {
    pub fn constant(bytes_per_tick: u64, tick_ms: f64) -> Self {
        Self {
            tick_ms,
            segments: vec![(f64::INFINITY, bytes_per_tick)],
        }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        if self.segments.is_empty() {
            return Err(SessionError::Invalid("bandwidth profile has no segments".into()));
        }
        if !(self.tick_ms > 0.0 && self.tick_ms.is_finite()) {
            return Err(SessionError::Invalid("tick duration must be positive".into()));
        }
        if self.segments.iter().any(|&(d, _)| !(d > 0.0)) {
            return Err(SessionError::Invalid("segment durations must be positive".into()));
        }
        Ok(())
    }

    /// Bytes delivered during tick `k` (0-based), taken from the segment
    /// active at the tick's start.
    pub fn bytes_at(&self, k: usize) -> u64 {
        let t = k as f64 * self.tick_ms;
        let mut end = 0.0;
        for &(d, rate) in &self.segments {
            end += d;
            if t < end {
                return rate;
            }
        }
        self.segments.last().map_or(0, |s| s.1)
    }
}

/// Root template faces whose subtrees may be refined.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RegionMask {
    pub faces: Vec<NodeId>,
}

impl RegionMask {
    pub fn validate(&self, face_count: usize) -> Result<(), SessionError> {
        match self.faces.iter().find(|&&f| f as usize >= face_count) {
            Some(f) => Err(SessionError::Invalid(format!(
                "mask face {f} out of range for {face_count} template faces"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub profile: BandwidthProfile,
    pub mask: Option<RegionMask>,
    /// Send masked-out records after the masked-in ones instead of dropping
    /// them.
    pub defer_masked: bool,
    /// Stop after this many ticks even if bytes remain.
    pub max_ticks: usize,
    pub background: [f64; 3],
}

impl SessionConfig {
    pub fn new(profile: BandwidthProfile) -> Self {
        Self {
            profile,
            mask: None,
            defer_masked: false,
            max_ticks: 10_000,
            background: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Header and base included.
    pub bytes: u64,
    pub records: usize,
    pub nodes: usize,
    /// Mean over cameras.
    pub l1: f64,
    /// From the MSE pooled over cameras, capped.
    pub psnr: f64,
    pub ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionMetrics {
    pub checkpoints: Vec<Checkpoint>,
}

impl SessionMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bytes,records,nodes,l1,psnr,ms\n");
        for c in &self.checkpoints {
            out += &format!(
                "{},{},{},{:.9e},{:.6},{:.3}\n",
                c.bytes, c.records, c.nodes, c.l1, c.psnr, c.ms
            );
        }
        out
    }
}

struct StreamItem {
    record: Record,
    root: NodeId,
    /// Id of the first child in the complete asset.
    first_child: usize,
}

/// Base-only state, complete state and every record of a full asset.
fn parse_all(bytes: &[u8], mesh: &TemplateMesh) -> Result<(DecodedState, DecodedState, Vec<StreamItem>), SessionError> {
    let base = codec::decode_base(bytes, mesh)?;
    let full = codec::decode_prefix(bytes, mesh)?;
    let faces = mesh.face_count();
    let nodes = full.forest.nodes();
    let records = (0..full.records_applied)
        .map(|i| {
            let first_child = faces + 3 * i;
            let parent = nodes[first_child].parent.expect("record children have parents");
            let p = &nodes[parent as usize];
            StreamItem {
                record: Record {
                    parent,
                    level: p.level,
                    beta: p.beta.expect("parent is subdivided"),
                    children: [0, 1, 2].map(|c| nodes[first_child + c].gaussian),
                },
                root: full.forest.root_of(parent),
                first_child,
            }
        })
        .collect();
    Ok((base, full, records))
}

fn render_all(
    state: &DecodedState,
    cameras: &[Camera],
    frame: &FrameVertices,
    background: [f64; 3],
) -> Result<Vec<Image>, RenderError> {
    par::map_indexed(cameras.len(), |c| {
        render_forest(&state.forest, frame, &cameras[c], background).map(|o| o.image)
    })
    .into_iter()
    .collect()
}

fn compare(images: &[Image], reference: &[Image]) -> (f64, f64) {
    let n = images.len() as f64;
    let l1 = images.iter().zip(reference).map(|(a, b)| mean_l1(a, b)).sum::<f64>() / n;
    let m = images.iter().zip(reference).map(|(a, b)| mse(a, b)).sum::<f64>() / n;
    (l1, psnr_from_mse(m))
}

/// Simulates streaming `asset` and records one checkpoint for the base and
/// one per tick. When `dump_dir` is set every checkpoint image is written as
/// `ckpt_<k>_cam_<c>.ppm`.
pub fn run_session(
    asset: &[u8],
    mesh: &TemplateMesh,
    cameras: &[Camera],
    frame: &FrameVertices,
    config: &SessionConfig,
    dump_dir: Option<&Path>,
) -> Result<SessionMetrics, SessionError> {
    config.profile.validate()?;
    if cameras.is_empty() {
        return Err(SessionError::Invalid("no cameras".into()));
    }
    if let Some(mask) = &config.mask {
        mask.validate(mesh.face_count())?;
    }
    frame
        .check_mesh(mesh)
        .map_err(|e| SessionError::Invalid(e.to_string()))?;
    let (mut state, full_state, records) = parse_all(asset, mesh)?;
    let reference = render_all(&full_state, cameras, frame, config.background)?;

    let in_mask = |root: NodeId| config.mask.as_ref().is_none_or(|m| m.faces.contains(&root));
    let mut stream: Vec<&StreamItem> = records.iter().filter(|r| in_mask(r.root)).collect();
    if config.defer_masked {
        stream.extend(records.iter().filter(|r| !in_mask(r.root)));
    }
    // skipped or reordered records shift the implicit child ids
    let mut session_id: Vec<Option<NodeId>> = vec![None; full_state.forest.len()];
    for (i, id) in session_id.iter_mut().enumerate().take(mesh.face_count()) {
        *id = Some(i as NodeId);
    }
    let eligible_bytes = (stream.len() * RECORD_BYTES) as u64;
    let base_bytes = state.bytes_used as u64;

    let mut metrics = SessionMetrics::default();
    let mut received: u64 = 0;
    let mut applied = 0usize;
    let mut checkpoint = |state: &DecodedState, received: u64, k: usize| -> Result<(), SessionError> {
        let start = Instant::now();
        let images = render_all(state, cameras, frame, config.background)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let (l1, psnr) = compare(&images, &reference);
        if let Some(dir) = dump_dir {
            for (c, img) in images.iter().enumerate() {
                img.save_ppm(dir.join(format!("ckpt_{k:04}_cam_{c}.ppm")))?;
            }
        }
        metrics.checkpoints.push(Checkpoint {
            bytes: base_bytes + received,
            records: state.records_applied,
            nodes: state.forest.len(),
            l1,
            psnr,
            ms,
        });
        Ok(())
    };
    checkpoint(&state, 0, 0)?;
    for k in 0..config.max_ticks {
        if received >= eligible_bytes {
            break;
        }
        received = received.saturating_add(config.profile.bytes_at(k)).min(eligible_bytes);
        let complete = (received / RECORD_BYTES as u64) as usize;
        while applied < complete {
            let item = stream[applied];
            let record = Record {
                parent: session_id[item.record.parent as usize]
                    .expect("a record's ancestors precede it within its root's subtree"),
                ..item.record.clone()
            };
            let first = state.forest.len() as NodeId;
            codec::apply_record(&mut state, &record, applied)?;
            for c in 0..3 {
                session_id[item.first_child + c] = Some(first + c as NodeId);
            }
            applied += 1;
        }
        checkpoint(&state, received, k + 1)?;
    }
    Ok(metrics)
}

/// Byte count decoded for a prefix fraction: `floor(fraction * len)`, snapped
/// down to a record boundary and never below the base section.
pub fn prefix_bytes(asset: &[u8], fraction: f64) -> Result<usize, SessionError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SessionError::Invalid(format!(
            "prefix fraction {fraction} outside [0, 1]"
        )));
    }
    let (faces, records, _) = codec::layout(asset)?;
    let base = codec::asset_size(faces, 0);
    let want = (fraction * asset.len() as f64).floor() as usize;
    let whole = (want.saturating_sub(base) / RECORD_BYTES).min(records);
    Ok(base + whole * RECORD_BYTES)
}

/// Decodes a prefix of the asset and renders it.
pub fn render_prefix(
    asset: &[u8],
    fraction: f64,
    mesh: &TemplateMesh,
    camera: &Camera,
    frame: &FrameVertices,
    background: [f64; 3],
) -> Result<Image, SessionError> {
    let n = prefix_bytes(asset, fraction)?;
    let state = codec::decode_prefix(&asset[..n], mesh)?;
    Ok(render_forest(&state.forest, frame, camera, background)?.image)
}
