mod oracle;

use nalgebra::{Rotation3, Unit};
use oracle::{random_forest, recursive_triangle, rng};
use pgav_core::binding::pose_forest;
use pgav_core::forest::{on_simplex, project_simplex};
use pgav_core::mesh::face_frame;
use pgav_core::scene::icosphere;
use pgav_core::{Forest, FrameVertices, NodeId, Vec3};
use proptest::prelude::*;
use rand::SeedableRng;

/// Closest point of the simplex to `raw` by exhaustive search over a grid
/// of spacing `1/n`, refined once around the best cell.
fn grid_projection(raw: [f64; 3], n: usize) -> [f64; 3] {
    let dist = |b: [f64; 3]| (0..3).map(|i| (b[i] - raw[i]).powi(2)).sum::<f64>();
    let search = |center: [f64; 3], radius: f64, n: usize| {
        let mut best = center;
        for i in 0..=n {
            for j in 0..=n {
                let a = center[0] - radius + 2.0 * radius * i as f64 / n as f64;
                let b = center[1] - radius + 2.0 * radius * j as f64 / n as f64;
                let c = (1.0 - a - b).max(0.0);
                if a < 0.0 || b < 0.0 || a + b > 1.0 + 1e-12 {
                    continue;
                }
                if dist([a, b, c]) < dist(best) {
                    best = [a, b, c];
                }
            }
        }
        best
    };
    let coarse = search([0.5, 0.5, 0.0], 0.5, n);
    search(coarse, 2.0 / n as f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn random_split_sequences_keep_invariants(seed in any::<u64>(), splits in 0usize..60) {
        let (mesh, frame) = icosphere(0, 1.0);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let forest = random_forest(&mut r, &mesh, splits);
        prop_assert!(forest.check_invariants().is_ok());
        prop_assert_eq!(forest.len(), 20 + 3 * splits);
        let hist = forest.level_histogram();
        prop_assert_eq!(hist.iter().sum::<usize>(), forest.len());
        let tris = forest.resolve_all(&frame);
        for id in 0..forest.len() as NodeId {
            let expect = recursive_triangle(&forest, id, &frame);
            for k in 0..3 {
                prop_assert!((tris[id as usize][k] - expect[k]).norm() < 1e-12);
            }
            let level = forest.nodes()[id as usize].level;
            let set = forest.level_render_set(level);
            prop_assert!(set.contains(&id));
        }
    }

    #[test]
    fn projection_is_closest_and_idempotent(a in -3.0..3.0f64, b in -3.0..3.0f64, c in -3.0..3.0f64) {
        let p = project_simplex([a, b, c]);
        prop_assert!(on_simplex(&p, 1e-12));
        let again = project_simplex(p);
        for k in 0..3 {
            prop_assert!((again[k] - p[k]).abs() <= 1e-9);
        }
        let g = grid_projection([a, b, c], 200);
        let d = |x: [f64; 3]| (0..3).map(|i| (x[i] - [a, b, c][i]).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d(p) <= d(g) + 1e-9, "projection {:?} farther than grid point {:?}", p, g);
        prop_assert!((0..3).all(|k| (p[k] - g[k]).abs() < 1e-3));
    }
}

fn rigid(seed: u64) -> (Rotation3<f64>, Vec3) {
    use rand::Rng;
    let mut r = rng(seed);
    let axis = Unit::new_normalize(Vec3::new(
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
    ));
    let rot = Rotation3::from_axis_angle(&axis, r.random_range(-3.0..3.0));
    (
        rot,
        Vec3::new(
            r.random_range(-5.0..5.0),
            r.random_range(-5.0..5.0),
            r.random_range(-5.0..5.0),
        ),
    )
}

#[test]
fn frames_bindings_and_resolution_are_rigidly_equivariant() {
    let (mesh, frame) = icosphere(1, 1.3);
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let forest: Forest = random_forest(&mut rng(seed), &mesh, 120);
        let (rot, t) = rigid(1000 + seed);
        let moved: FrameVertices = frame.transformed(rot.matrix(), &t);
        let a = pose_forest(&forest, &frame);
        let b = pose_forest(&forest, &moved);
        for i in 0..forest.len() {
            for k in 0..3 {
                worst = worst.max((rot * a.triangles[i][k] + t - b.triangles[i][k]).norm());
            }
            let (fa, fb) = (
                face_frame(&a.triangles[i]).unwrap(),
                face_frame(&b.triangles[i]).unwrap(),
            );
            worst = worst.max((rot.matrix() * fa.rot - fb.rot).abs().max());
            worst = worst.max((rot * fa.centroid + t - fb.centroid).norm());
            worst = worst.max((fa.scale - fb.scale).abs());
            let (ga, gb) = (a.gaussians[i].unwrap(), b.gaussians[i].unwrap());
            worst = worst.max((rot * ga.mean + t - gb.mean).norm());
            worst = worst.max((rot.matrix() * ga.rot - gb.rot).abs().max());
            worst = worst.max((ga.scale - gb.scale).abs().max());
        }
    }
    assert!(worst < 1e-6, "worst deviation {worst}");
}
