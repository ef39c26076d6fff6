//! Permutation, rotation and translation behavior of the network and its
//! local-area features.

use localnet::autodiff::Mode;
use localnet::features::build_local_areas;
use localnet::geometry::{Point3, PointCloud};
use localnet::network::{classify_forward, segment_forward, ModelConfig, NetworkParams};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const CASES: u64 = 50;

fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect(),
    )
    .unwrap()
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn classifier() -> ModelConfig {
    ModelConfig {
        m: 8,
        k: 6,
        cpl_hidden: vec![16, 24],
        area_widths: vec![16, 24],
        global_widths: vec![24, 32],
        head_widths: vec![16, 12],
        ..ModelConfig::classifier(4)
    }
}

fn segmenter() -> ModelConfig {
    ModelConfig {
        m: 8,
        k: 6,
        cpl_hidden: vec![16, 24],
        area_widths: vec![16, 24],
        global_widths: vec![24, 32],
        head_widths: vec![16, 12],
        ..ModelConfig::segmenter(5, 3)
    }
}

/// Uniformly random rotation from a normalized Gaussian quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let len = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / len);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn rotate(r: &[[f64; 3]; 3], p: &Point3) -> Point3 {
    std::array::from_fn(|i| (0..3).map(|j| r[i][j] * p[j]).sum())
}

#[test]
pub fn classification_is_bit_exact_under_permutation() {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let params = NetworkParams::<f64>::init(&classifier(), &mut rng).unwrap();
        let pc = random_cloud(rng.random_range(8..=48), &mut rng);
        let perm = permutation(pc.len(), &mut rng);
        let (p, logits) = classify_forward(&pc, &params, Mode::Eval, &mut rng).unwrap();
        let (pp, plogits) = classify_forward(&pc.permuted(&perm), &params, Mode::Eval, &mut rng).unwrap();
        assert_eq!(logits, plogits, "case {case}");
        assert_eq!(p, pp, "case {case}");
    }
}

#[test]
pub fn segmentation_rows_follow_permutation() {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
        let params = NetworkParams::<f64>::init(&segmenter(), &mut rng).unwrap();
        let pc = random_cloud(rng.random_range(8..=48), &mut rng);
        let perm = permutation(pc.len(), &mut rng);
        let mut onehot = vec![0.0; 3];
        onehot[rng.random_range(0..3)] = 1.0;
        let out = segment_forward(&pc, &onehot, &params, Mode::Eval, &mut rng).unwrap();
        let pout = segment_forward(&pc.permuted(&perm), &onehot, &params, Mode::Eval, &mut rng).unwrap();
        let expected: Array2<f64> = out.per_point_scores.select(ndarray::Axis(0), &perm);
        assert_eq!(pout.per_point_scores, expected, "case {case}");
    }
}

#[test]
pub fn metric_features_are_rotation_invariant() {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + case);
        let pc = random_cloud(64, &mut rng);
        let r = random_rotation(&mut rng);
        let rotated = pc.map_coords(|p| rotate(&r, p));
        let k = rng.random_range(1..=32);
        let centers: Vec<Point3> = (0..4).map(|_| *pc.point(rng.random_range(0..64))).collect();
        let rcenters: Vec<Point3> = centers.iter().map(|c| rotate(&r, c)).collect();
        let a = build_local_areas(&pc, &centers, k).unwrap();
        let b = build_local_areas(&rotated, &rcenters, k).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.neighbor_indices, y.neighbor_indices, "case {case}");
            for (fx, fy) in x
                .metric_feats
                .as_ref()
                .unwrap()
                .iter()
                .zip(y.metric_feats.as_ref().unwrap())
            {
                for j in 0..3 {
                    assert!((fx[j] - fy[j]).abs() < 1e-6, "case {case}: {fx:?} vs {fy:?}");
                }
            }
        }
    }
}

#[test]
pub fn relative_coordinates_ignore_translation_exactly() {
    // Multiples of 2^-10 add and subtract without rounding, so bit equality
    // is a fair demand here.
    let grid = |rng: &mut ChaCha8Rng| rng.random_range(-1024i32..1024) as f64 / 1024.0;
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + case);
        let pc = PointCloud::new((0..32).map(|_| std::array::from_fn(|_| grid(&mut rng))).collect()).unwrap();
        let t: Point3 = std::array::from_fn(|_| grid(&mut rng));
        let moved = pc.map_coords(|p| std::array::from_fn(|i| p[i] + t[i]));
        let centers: Vec<Point3> = (0..4).map(|_| *pc.point(rng.random_range(0..32))).collect();
        let mcenters: Vec<Point3> = centers.iter().map(|c| std::array::from_fn(|i| c[i] + t[i])).collect();
        let a = build_local_areas(&pc, &centers, 8).unwrap();
        let b = build_local_areas(&moved, &mcenters, 8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.neighbor_indices, y.neighbor_indices, "case {case}");
            assert_eq!(x.rel_coords, y.rel_coords, "case {case}");
        }
    }
}

#[test]
pub fn relative_coordinates_track_translation_in_general() {
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + case);
        let pc = random_cloud(32, &mut rng);
        let t: Point3 = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let moved = pc.map_coords(|p| std::array::from_fn(|i| p[i] + t[i]));
        let centers: Vec<Point3> = (0..4).map(|_| *pc.point(rng.random_range(0..32))).collect();
        let mcenters: Vec<Point3> = centers.iter().map(|c| std::array::from_fn(|i| c[i] + t[i])).collect();
        let a = build_local_areas(&pc, &centers, 8).unwrap();
        let b = build_local_areas(&moved, &mcenters, 8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.rel_coords.iter().zip(&y.rel_coords) {
                for i in 0..3 {
                    assert!((p[i] - q[i]).abs() < 1e-12, "case {case}");
                }
            }
        }
    }
}
