//! The `.pgav` byte format.
//!
//! ```text
//! header   12 bytes   "PGAV", version u16 = 1, flags u16 = 0, face count u32
//! base     56 bytes   per template face, root Gaussians in face order
//! records 188 bytes   parent u32, level u8, 3 zero bytes, beta 3 x f32,
//!                     three child payloads
//! payload  56 bytes   delta_mu 3 x f32, delta_rot (w, x, y, z) 4 x f32,
//!                     delta_scale 3 x f32, opacity f32, color 3 x f32
//! ```
//!
//! Everything is little-endian. Child ids are not stored: the decoder assigns
//! them consecutively as records arrive, so any prefix that ends on a record
//! boundary is a complete, renderable forest.

use thiserror::Error;

use crate::binding::GaussianResidual;
use crate::forest::{on_simplex, project_simplex, Forest, ForestError, NodeId, SIMPLEX_TOL};
use crate::importance::StreamOrder;
use crate::mesh::{TemplateMesh, Vec3};

pub const MAGIC: [u8; 4] = *b"PGAV";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 12;
pub const PAYLOAD_BYTES: usize = 56;
pub const RECORD_BYTES: usize = 188;
/// Simplex and unit-quaternion tolerance applied to decoded values.
pub const DECODE_TOL: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported flags {0:#06x}")]
    UnsupportedFlags(u16),
    #[error("stream is {got} bytes, shorter than the {need}-byte header and base section")]
    Truncated { need: usize, got: usize },
    #[error("asset has {asset} template faces but the mesh has {mesh}")]
    FaceCountMismatch { asset: u32, mesh: usize },
    #[error("corrupt base payload for face {face}: {reason}")]
    CorruptBase { face: usize, reason: &'static str },
    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },
    #[error("record {index} references missing parent {parent}")]
    MissingParent { index: usize, parent: NodeId },
    #[error("record {index} subdivides node {parent} a second time")]
    DoubleSubdivision { index: usize, parent: NodeId },
    #[error("order entry {index}: {reason}")]
    InvalidOrder { index: usize, reason: String },
}

/// Exact file size for `faces` template faces and `records` records.
pub fn asset_size(faces: usize, records: usize) -> usize {
    HEADER_BYTES + PAYLOAD_BYTES * faces + RECORD_BYTES * records
}

fn put_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn write_payload(out: &mut Vec<u8>, g: &GaussianResidual) {
    put_f32s(out, g.delta_mu.iter().copied());
    put_f32s(out, g.delta_rot);
    put_f32s(out, g.delta_scale.iter().copied());
    put_f32s(out, [g.opacity]);
    put_f32s(out, g.color);
}

fn f32_at(bytes: &[u8], offset: usize) -> f64 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes")) as f64
}

fn read_payload(bytes: &[u8]) -> Result<GaussianResidual, &'static str> {
    let f = |i: usize| f32_at(bytes, 4 * i);
    let mut g = GaussianResidual {
        delta_mu: Vec3::new(f(0), f(1), f(2)),
        delta_rot: [f(3), f(4), f(5), f(6)],
        delta_scale: Vec3::new(f(7), f(8), f(9)),
        opacity: f(10),
        color: [f(11), f(12), f(13)],
    };
    g.check(DECODE_TOL)?;
    if g.check(1e-6).is_err() {
        // inside the wire tolerance but outside the in-memory one
        g.sanitize();
    }
    Ok(g)
}

/// Id that each forest node receives in a stream emitting `order`: roots keep
/// their ids and every record's children take the next three. Nodes whose
/// creating record is not in `order` map to `None`.
pub fn stream_ids(forest: &Forest, order: &StreamOrder) -> Result<Vec<Option<NodeId>>, CodecError> {
    let faces = forest.root_count();
    let mut canon: Vec<Option<NodeId>> = vec![None; forest.len()];
    for (i, c) in canon.iter_mut().enumerate().take(faces) {
        *c = Some(i as NodeId);
    }
    let mut next = faces as NodeId;
    for (index, e) in order.entries.iter().enumerate() {
        let invalid = |reason: String| CodecError::InvalidOrder { index, reason };
        let node = forest
            .node(e.parent)
            .map_err(|_| invalid(format!("unknown node {}", e.parent)))?;
        let Some(kids) = node.children else {
            return Err(invalid(format!("node {} is not subdivided", e.parent)));
        };
        if canon[e.parent as usize].is_none() {
            return Err(invalid(format!("node {} is not yet decodable", e.parent)));
        }
        if canon[kids[0] as usize].is_some() {
            return Err(invalid(format!("node {} listed twice", e.parent)));
        }
        if e.level != node.level {
            return Err(invalid(format!(
                "level {} does not match node level {}",
                e.level, node.level
            )));
        }
        for &k in &kids {
            canon[k as usize] = Some(next);
            next += 1;
        }
    }
    Ok(canon)
}

/// `order` rewritten in stream ids.
pub fn order_in_stream_ids(forest: &Forest, order: &StreamOrder) -> Result<StreamOrder, CodecError> {
    let canon = stream_ids(forest, order)?;
    let mut out = order.clone();
    for e in &mut out.entries {
        e.parent = canon[e.parent as usize].expect("validated by stream_ids");
    }
    Ok(out)
}

/// Serializes the roots and the records listed in `order`. Child ids are
/// remapped so that the decoder's implicit numbering reproduces every parent
/// reference. `order` may be any subset of the subdivided nodes as long as
/// each record's parent has been created by an earlier record (or is a root).
pub fn encode(forest: &Forest, order: &StreamOrder) -> Result<Vec<u8>, CodecError> {
    let canon = stream_ids(forest, order)?;
    let faces = forest.root_count();
    let mut out = Vec::with_capacity(asset_size(faces, order.len()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(faces as u32).to_le_bytes());
    for n in &forest.nodes()[..faces] {
        write_payload(&mut out, &n.gaussian);
    }
    for e in &order.entries {
        let node = &forest.nodes()[e.parent as usize];
        let (Some(beta), Some(kids)) = (node.beta, node.children) else {
            unreachable!("validated by stream_ids");
        };
        let parent = canon[e.parent as usize].expect("validated by stream_ids");
        out.extend_from_slice(&parent.to_le_bytes());
        out.extend_from_slice(&[node.level, 0, 0, 0]);
        put_f32s(&mut out, beta);
        for &k in &kids {
            write_payload(&mut out, &forest.nodes()[k as usize].gaussian);
        }
    }
    Ok(out)
}

/// Forest rebuilt from a stream prefix.
#[derive(Clone, Debug)]
pub struct DecodedState {
    pub forest: Forest,
    pub records_applied: usize,
    /// Header, base and every complete record.
    pub bytes_used: usize,
}

/// One parsed refinement record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub parent: NodeId,
    pub level: u8,
    pub beta: [f64; 3],
    pub children: [GaussianResidual; 3],
}

fn parse_record(bytes: &[u8], index: usize) -> Result<Record, CodecError> {
    let corrupt = |reason: String| CodecError::CorruptRecord { index, reason };
    let parent = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let level = bytes[4];
    if bytes[5..8] != [0, 0, 0] {
        return Err(corrupt("nonzero padding".into()));
    }
    let mut beta = [f32_at(bytes, 8), f32_at(bytes, 12), f32_at(bytes, 16)];
    if !beta.iter().all(|b| b.is_finite()) || !on_simplex(&beta, DECODE_TOL) {
        return Err(corrupt(format!("split point {beta:?} is off the simplex")));
    }
    if !on_simplex(&beta, SIMPLEX_TOL) {
        beta = project_simplex(beta);
    }
    let mut children = [GaussianResidual::default(); 3];
    for (c, child) in children.iter_mut().enumerate() {
        let start = 20 + c * PAYLOAD_BYTES;
        *child = read_payload(&bytes[start..start + PAYLOAD_BYTES]).map_err(|r| corrupt(format!("child {c}: {r}")))?;
    }
    Ok(Record {
        parent,
        level,
        beta,
        children,
    })
}

/// Applies one record; `index` is only used for error reporting.
pub fn apply_record(state: &mut DecodedState, record: &Record, index: usize) -> Result<(), CodecError> {
    let node = state
        .forest
        .node(record.parent)
        .map_err(|_| CodecError::MissingParent {
            index,
            parent: record.parent,
        })?;
    if !node.is_leaf() {
        return Err(CodecError::DoubleSubdivision {
            index,
            parent: record.parent,
        });
    }
    if node.level != record.level {
        return Err(CodecError::CorruptRecord {
            index,
            reason: format!("level {} but parent is at level {}", record.level, node.level),
        });
    }
    state
        .forest
        .subdivide_with(record.parent, record.beta, record.children)
        .map_err(|e| CodecError::CorruptRecord {
            index,
            reason: match e {
                ForestError::DepthCapReached { .. } => "level overflow".into(),
                other => other.to_string(),
            },
        })?;
    state.records_applied += 1;
    state.bytes_used += RECORD_BYTES;
    Ok(())
}

/// Parses the header and base section.
pub fn decode_base(bytes: &[u8], mesh: &TemplateMesh) -> Result<DecodedState, CodecError> {
    if bytes.len() < HEADER_BYTES {
        return Err(CodecError::Truncated {
            need: HEADER_BYTES,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
    if flags != 0 {
        return Err(CodecError::UnsupportedFlags(flags));
    }
    let faces = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if faces as usize != mesh.face_count() {
        return Err(CodecError::FaceCountMismatch {
            asset: faces,
            mesh: mesh.face_count(),
        });
    }
    let need = asset_size(faces as usize, 0);
    if bytes.len() < need {
        return Err(CodecError::Truncated { need, got: bytes.len() });
    }
    let mut forest = Forest::new(mesh, u8::MAX);
    for face in 0..faces as usize {
        let start = HEADER_BYTES + face * PAYLOAD_BYTES;
        let g = read_payload(&bytes[start..start + PAYLOAD_BYTES])
            .map_err(|reason| CodecError::CorruptBase { face, reason })?;
        forest.node_mut(face as NodeId).expect("root exists").gaussian = g;
    }
    Ok(DecodedState {
        forest,
        records_applied: 0,
        bytes_used: need,
    })
}

/// Decodes the base and every complete record in `bytes`; a trailing partial
/// record is ignored.
pub fn decode_prefix(bytes: &[u8], mesh: &TemplateMesh) -> Result<DecodedState, CodecError> {
    let mut state = decode_base(bytes, mesh)?;
    let mut index = 0;
    while bytes.len() - state.bytes_used >= RECORD_BYTES {
        let start = state.bytes_used;
        let record = parse_record(&bytes[start..start + RECORD_BYTES], index)?;
        apply_record(&mut state, &record, index)?;
        index += 1;
    }
    Ok(state)
}

/// Template face count, record count and trailing bytes of a complete asset,
/// read from the header and length alone.
pub fn layout(bytes: &[u8]) -> Result<(usize, usize, usize), CodecError> {
    if bytes.len() < HEADER_BYTES {
        return Err(CodecError::Truncated {
            need: HEADER_BYTES,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    let faces = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let base = asset_size(faces, 0);
    if bytes.len() < base {
        return Err(CodecError::Truncated {
            need: base,
            got: bytes.len(),
        });
    }
    let body = bytes.len() - base;
    Ok((faces, body / RECORD_BYTES, body % RECORD_BYTES))
}

/// Per-level node counts of a complete or partial stream. The records are
/// validated against a stand-in topology, so no template mesh is needed.
pub fn level_histogram(bytes: &[u8]) -> Result<Vec<usize>, CodecError> {
    let (faces, _, _) = layout(bytes)?;
    let tris = (0..faces as u32).map(|f| [3 * f, 3 * f + 1, 3 * f + 2]).collect();
    let mesh = TemplateMesh::new(3 * faces, tris).expect("disjoint triangles are valid");
    Ok(decode_prefix(bytes, &mesh)?.forest.level_histogram())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::build_order;

    fn mesh1() -> TemplateMesh {
        TemplateMesh::new(3, vec![[0, 1, 2]]).unwrap()
    }

    #[test]
    fn sizes() {
        let mut f = Forest::new(&mesh1(), 4);
        let bytes = encode(&f, &StreamOrder::default()).unwrap();
        assert_eq!(bytes.len(), 68);
        assert_eq!(level_histogram(&bytes).unwrap(), vec![1]);
        f.subdivide(0).unwrap();
        let order = build_order(&f, &vec![0.0; f.len()]);
        assert_eq!(encode(&f, &order).unwrap().len(), 12 + 56 + 188);
    }

    #[test]
    fn header_errors() {
        let f = Forest::new(&mesh1(), 4);
        let bytes = encode(&f, &StreamOrder::default()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_prefix(&bad, &mesh1()), Err(CodecError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(
            decode_prefix(&bad, &mesh1()).unwrap_err(),
            CodecError::UnsupportedVersion(2)
        );
        assert!(matches!(
            decode_prefix(&bytes[..40], &mesh1()),
            Err(CodecError::Truncated { need: 68, got: 40 })
        ));
        let two = TemplateMesh::new(3, vec![[0, 1, 2], [2, 1, 0]]).unwrap();
        assert!(matches!(
            decode_prefix(&bytes, &two),
            Err(CodecError::FaceCountMismatch { .. })
        ));
    }

    #[test]
    fn record_errors() {
        let mut f = Forest::new(&mesh1(), 4);
        f.subdivide(0).unwrap();
        let order = build_order(&f, &vec![0.0; f.len()]);
        let bytes = encode(&f, &order).unwrap();
        let mut state = decode_base(&bytes, &mesh1()).unwrap();
        let rec = parse_record(&bytes[68..], 0).unwrap();
        apply_record(&mut state, &rec, 0).unwrap();
        assert_eq!(state.forest.len(), 4);
        assert!(matches!(
            apply_record(&mut state, &rec, 1),
            Err(CodecError::DoubleSubdivision { parent: 0, .. })
        ));
        let orphan = Record { parent: 17, ..rec };
        assert!(matches!(
            apply_record(&mut state, &orphan, 2),
            Err(CodecError::MissingParent { parent: 17, .. })
        ));
        let mut bad = bytes.clone();
        bad[68 + 8..68 + 12].copy_from_slice(&0.9f32.to_le_bytes());
        assert!(matches!(
            decode_prefix(&bad, &mesh1()),
            Err(CodecError::CorruptRecord { index: 0, .. })
        ));
    }

    #[test]
    fn encoder_rejects_orders_with_missing_parents() {
        let mut f = Forest::new(&mesh1(), 4);
        let kids = f.subdivide(0).unwrap();
        f.subdivide(kids[0]).unwrap();
        let mut order = build_order(&f, &vec![0.0; f.len()]);
        order.entries.reverse();
        assert!(matches!(
            encode(&f, &order),
            Err(CodecError::InvalidOrder { index: 0, .. })
        ));
    }

    #[test]
    fn layout_counts() {
        let mut f = Forest::new(&mesh1(), 4);
        f.subdivide(0).unwrap();
        let order = build_order(&f, &vec![0.0; f.len()]);
        let bytes = encode(&f, &order).unwrap();
        assert_eq!(layout(&bytes).unwrap(), (1, 1, 0));
        assert_eq!(layout(&bytes[..100]).unwrap(), (1, 0, 32));
    }
}
