use posenorm_core::canonical::{embed_pose, kmeans_fit, kmeans_from, EmbedderConfig, PoseClusterModel};
use posenorm_core::pose::{rasterize_pose, Joint, KeypointSet, LimbSchema, NUM_JOINTS};
use proptest::prelude::*;

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cloud() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (1usize..5, 8usize..30, 1usize..6).prop_flat_map(|(dim, n, k)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), n),
            Just(k),
        )
    })
}

fn fit(points: &[Vec<f64>], k: usize, seed: u64) -> PoseClusterModel {
    let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
    kmeans_fit(&refs, k, seed, 200).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn converged_fit_is_a_lloyd_fixed_point((points, k) in cloud(), seed in 0u64..1000) {
        let m = fit(&points, k, seed);
        prop_assert!(m.converged);
        for (p, &a) in points.iter().zip(&m.assignments) {
            let own = sq(p, &m.centroids[a]);
            for c in &m.centroids {
                // moving a single point to another centre never lowers inertia
                prop_assert!(own <= sq(p, c) + 1e-12);
            }
        }
        for (c, centroid) in m.centroids.iter().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&m.assignments).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            prop_assert!(!members.is_empty());
            for d in 0..centroid.len() {
                let mean = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                prop_assert!((mean - centroid[d]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inertia_never_increases((points, k) in cloud(), seed in 0u64..1000) {
        let m = fit(&points, k, seed);
        for w in m.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", m.inertia_history);
        }
        let direct: f64 = points.iter().zip(&m.assignments).map(|(p, &a)| sq(p, &m.centroids[a])).sum();
        prop_assert!((direct - m.inertia).abs() <= 1e-9 * direct.max(1.0));
    }

    #[test]
    fn medoid_is_the_member_nearest_its_centroid((points, k) in cloud(), seed in 0u64..1000) {
        let m = fit(&points, k, seed);
        for (c, &medoid) in m.medoid_indices.iter().enumerate() {
            prop_assert_eq!(m.assignments[medoid], c);
            let best = sq(&points[medoid], &m.centroids[c]);
            for (i, p) in points.iter().enumerate() {
                if m.assignments[i] == c {
                    let d = sq(p, &m.centroids[c]);
                    prop_assert!(d > best || (d == best && i >= medoid));
                }
            }
        }
    }

    #[test]
    fn permuting_points_keeps_the_partition((points, k) in cloud(), rotate in 1usize..7) {
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let initial: Vec<Vec<f64>> = points.iter().take(k).cloned().collect();
        let a = kmeans_from(&refs, initial.clone(), 200).unwrap();
        let n = points.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rotate) % n).collect();
        let shuffled: Vec<&[f64]> = perm.iter().map(|&i| refs[i]).collect();
        let b = kmeans_from(&shuffled, initial, 200).unwrap();
        for i in 0..n {
            for j in 0..n {
                let same_a = a.assignments[perm[i]] == a.assignments[perm[j]];
                prop_assert_eq!(same_a, b.assignments[i] == b.assignments[j]);
            }
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_repeatable(joints in prop::collection::vec((0.05f32..0.95, 0.05f32..0.95), NUM_JOINTS)) {
        let kp = KeypointSet::new(&joints.iter().map(|&(x, y)| Joint::at(x, y)).collect::<Vec<_>>()).unwrap();
        let img = rasterize_pose(&kp, &LimbSchema::default(), (64, 32)).unwrap();
        let cfg = EmbedderConfig::default();
        let e = embed_pose(&img, &cfg);
        prop_assert_eq!(e.as_slice().len(), cfg.dim());
        let norm = e.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
        let again = embed_pose(&img.clone(), &cfg);
        prop_assert_eq!(e.as_slice(), again.as_slice());
    }
}
