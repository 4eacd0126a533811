mod oracle;

use oracle::{random_forest, rng};
use pgav_core::codec::{self, asset_size, CodecError, RECORD_BYTES};
use pgav_core::importance::{build_order, random_order, StreamOrder};
use pgav_core::scene::icosphere;
use pgav_core::{CornerRef, Forest, NodeId, TemplateMesh};
use rand::Rng;

fn fitted_like(seed: u64, splits: usize) -> (TemplateMesh, Forest, StreamOrder) {
    let (mesh, _) = icosphere(0, 1.0);
    let mut r = rng(seed);
    let mut forest = random_forest(&mut r, &mesh, splits);
    forest.quantize_to_wire();
    let scores: Vec<f64> = (0..forest.len()).map(|_| r.random()).collect();
    let order = build_order(&forest, &scores);
    (mesh, forest, order)
}

/// Decoder numbering replayed by hand: roots keep their ids and each record
/// hands out the next three ids to its parent's children.
fn remap_oracle(forest: &Forest, order: &StreamOrder) -> Vec<Option<NodeId>> {
    let mut map = vec![None; forest.len()];
    for (r, m) in map.iter_mut().enumerate().take(forest.root_count()) {
        *m = Some(r as NodeId);
    }
    let mut next = forest.root_count() as NodeId;
    for e in &order.entries {
        for k in forest.nodes()[e.parent as usize].children.unwrap() {
            map[k as usize] = Some(next);
            next += 1;
        }
    }
    map
}

fn assert_same_under_remap(original: &Forest, decoded: &Forest, map: &[Option<NodeId>]) {
    let m = |id: NodeId| map[id as usize].unwrap();
    let mut seen = 0;
    for n in original.nodes() {
        let Some(d) = map[n.id as usize] else { continue };
        seen += 1;
        let dn = &decoded.nodes()[d as usize];
        assert_eq!(dn.level, n.level);
        assert_eq!(dn.gaussian, n.gaussian, "node {}", n.id);
        assert_eq!(dn.parent, n.parent.map(m));
        let corners = n.corners.map(|c| match c {
            CornerRef::SplitPoint(o) => CornerRef::SplitPoint(m(o)),
            v => v,
        });
        assert_eq!(dn.corners, corners);
        if dn.children.is_some() {
            assert_eq!(dn.beta, n.beta);
            assert_eq!(dn.children, n.children.map(|k| k.map(m)));
        }
    }
    assert_eq!(seen, decoded.len());
}

#[test]
fn round_trip_is_exact_under_canonical_remap() {
    for seed in 0..20 {
        let (mesh, forest, order) = fitted_like(seed, 40);
        let bytes = codec::encode(&forest, &order).unwrap();
        let state = codec::decode_prefix(&bytes, &mesh).unwrap();
        state.forest.check_invariants().unwrap();
        assert_eq!(state.records_applied, order.len());
        assert_eq!(state.forest.len(), forest.len());
        let map = remap_oracle(&forest, &order);
        assert_eq!(codec::stream_ids(&forest, &order).unwrap(), map);
        assert_same_under_remap(&forest, &state.forest, &map);
    }
}

#[test]
fn random_level_major_orders_round_trip() {
    let (mesh, forest, _) = fitted_like(3, 60);
    let mut r = rng(4);
    for _ in 0..10 {
        let order = random_order(&forest, &vec![0.0; forest.len()], &mut r);
        let bytes = codec::encode(&forest, &order).unwrap();
        let state = codec::decode_prefix(&bytes, &mesh).unwrap();
        assert_same_under_remap(&forest, &state.forest, &remap_oracle(&forest, &order));
    }
}

#[test]
fn file_size_follows_the_size_model() {
    for (seed, splits) in [(1, 0), (2, 1), (3, 17), (4, 90)] {
        let (_, forest, order) = fitted_like(seed, splits);
        let bytes = codec::encode(&forest, &order).unwrap();
        assert_eq!(order.len(), splits);
        assert_eq!(bytes.len(), 12 + 56 * forest.root_count() + 188 * splits);
        assert_eq!(bytes.len(), asset_size(forest.root_count(), splits));
        assert_eq!(codec::layout(&bytes).unwrap(), (forest.root_count(), splits, 0));
    }
}

#[test]
fn every_prefix_is_a_valid_state_or_a_typed_error() {
    let (mesh, forest, order) = fitted_like(7, 25);
    let bytes = codec::encode(&forest, &order).unwrap();
    let full = codec::decode_prefix(&bytes, &mesh).unwrap();
    let base = asset_size(mesh.face_count(), 0);
    for len in 0..=bytes.len() {
        match codec::decode_prefix(&bytes[..len], &mesh) {
            Ok(state) => {
                assert!(len >= base);
                state.forest.check_invariants().unwrap();
                let records = (len - base) / RECORD_BYTES;
                assert_eq!(state.records_applied, records);
                assert_eq!(state.bytes_used, base + records * RECORD_BYTES);
                // a prefix decodes to an initial segment of the full forest
                for (n, f) in state.forest.nodes().iter().zip(full.forest.nodes()) {
                    assert_eq!(
                        (n.level, n.parent, n.corners, n.gaussian),
                        (f.level, f.parent, f.corners, f.gaussian)
                    );
                    if n.children.is_some() {
                        assert_eq!((n.beta, n.children), (f.beta, f.children));
                    }
                }
            }
            Err(e) => {
                assert!(len < base, "prefix {len} failed: {e}");
                assert!(matches!(e, CodecError::Truncated { .. }));
            }
        }
    }
}

#[test]
fn corrupted_streams_never_break_invariants() {
    let (mesh, forest, order) = fitted_like(9, 30);
    let bytes = codec::encode(&forest, &order).unwrap();
    let mut r = rng(10);
    let mut errors = 0;
    for _ in 0..3000 {
        let mut b = bytes.clone();
        for _ in 0..r.random_range(1..4) {
            let i = r.random_range(0..b.len());
            b[i] = r.random();
        }
        b.truncate(r.random_range(0..=b.len()));
        match codec::decode_prefix(&b, &mesh) {
            Ok(state) => state.forest.check_invariants().unwrap(),
            Err(_) => errors += 1,
        }
    }
    assert!(errors > 0);
}

#[test]
fn partial_orders_encode_when_parents_come_first() {
    let (mesh, forest, order) = fitted_like(12, 30);
    let roots: Vec<NodeId> = (0..forest.root_count() as NodeId).step_by(2).collect();
    let sub = order.filter_roots(&forest, |r| roots.contains(&r));
    let bytes = codec::encode(&forest, &sub).unwrap();
    let state = codec::decode_prefix(&bytes, &mesh).unwrap();
    assert_eq!(state.records_applied, sub.len());
    assert_same_under_remap(&forest, &state.forest, &remap_oracle(&forest, &sub));

    let mut reversed = order.clone();
    reversed.entries.reverse();
    if reversed.entries.iter().any(|e| e.level > 0) {
        assert!(matches!(
            codec::encode(&forest, &reversed),
            Err(CodecError::InvalidOrder { .. })
        ));
    }
}
