//! Interpolation, metrics, voting and mesh sampling checked against
//! hand-computed values and simple statistics.

use localnet::autodiff::{lr_schedule, Mode, Tape};
use localnet::data::{sample_mesh_uniform, Mesh};
use localnet::geometry::{farthest_point_sampling, knn, normalize_unit_sphere, Point3, PointCloud};
use localnet::network::{
    classify_forward, idw_interpolate, idw_weights, shape_iou, vote_predict, vote_scores, ModelConfig, NetworkParams,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_classifier(classes: usize) -> ModelConfig {
    ModelConfig {
        m: 8,
        k: 6,
        cpl_hidden: vec![16, 24],
        area_widths: vec![16, 24],
        global_widths: vec![24, 32],
        head_widths: vec![16, 12],
        ..ModelConfig::classifier(classes)
    }
}

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect()
}

#[test]
pub fn idw_reproduces_constant_features_exactly() {
    for case in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let centers = random_points(rng.random_range(1..=40), &mut rng);
        let width = rng.random_range(1..6);
        let c: Vec<f64> = (0..width).map(|_| rng.random_range(-10.0..10.0)).collect();
        let feats = vec![c.clone(); centers.len()];
        let k = rng.random_range(1..=5);
        for target in random_points(10, &mut rng) {
            assert_eq!(idw_interpolate(&target, &centers, &feats, k).unwrap(), c, "case {case}");
            let w = idw_weights(&target, &centers, k).unwrap();
            let total: f64 = w.others.iter().map(|(_, wi)| wi).sum();
            assert!(w.others.iter().all(|&(_, wi)| wi > 0.0) && total < 1.0);
        }
    }
}

#[test]
pub fn idw_two_center_example() {
    // Distances 1 and 2 give weights 1 and 1/4.
    let centers = [[0.0, 1.0, 0.0], [0.0, 0.0, 2.0]];
    for (a, b) in [(1.0, 0.0), (0.8, -3.0), (-2.5, 7.125), (1e3, 1e-3)] {
        let f = idw_interpolate(&[0.0; 3], &centers, &[vec![a], vec![b]], 2).unwrap();
        assert!((f[0] - (a + 0.25 * b) / 1.25).abs() < 1e-12, "{a} {b}: {}", f[0]);
    }
}

#[test]
pub fn idw_coincident_target_takes_center_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let centers = random_points(12, &mut rng);
    let feats: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.random()).collect()).collect();
    for (c, f) in centers.iter().zip(&feats) {
        assert_eq!(&idw_interpolate(c, &centers, &feats, 3).unwrap(), f);
    }
}

#[test]
pub fn shape_iou_worked_example() {
    // Part A: 1/2; part B: 2/3.
    let iou = shape_iou(&[0, 1, 1, 1], &[0, 0, 1, 1], &[0, 1]).unwrap();
    assert!((iou - 7.0 / 12.0).abs() < 1e-12);
}

#[test]
pub fn lr_after_two_decays() {
    assert!((lr_schedule(46, 0.001) - 0.00049).abs() < 1e-12);
    assert_eq!(lr_schedule(22, 0.001), 0.001);
}

#[test]
pub fn uniform_logits_cost_log_c() {
    for c in [2, 4, 10, 40] {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Array2::from_elem((3, c), 0.37));
        let loss = tape.softmax_cross_entropy(logits, &[0, c - 1, c / 2]).unwrap();
        assert!((tape.value(loss)[[0, 0]] - (c as f64).ln()).abs() < 1e-9);
    }
}

#[test]
pub fn untrained_network_loss_is_near_log_c() {
    let classes = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total = 0.0;
    let draws = 100;
    for _ in 0..draws {
        let params = NetworkParams::<f64>::init(&small_classifier(classes), &mut rng).unwrap();
        let pc = PointCloud::new(random_points(32, &mut rng)).unwrap();
        let (p, _) = classify_forward(&pc, &params, Mode::Eval, &mut rng).unwrap();
        total -= p[rng.random_range(0..classes)].ln();
    }
    let mean = total / draws as f64;
    let ln_c = (classes as f64).ln();
    assert!((mean - ln_c).abs() < 0.15 * ln_c, "mean loss {mean} vs {ln_c}");
}

#[test]
pub fn single_unscaled_vote_equals_plain_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = NetworkParams::<f64>::init(&small_classifier(3), &mut rng).unwrap();
    for _ in 0..10 {
        let pc = PointCloud::new(random_points(24, &mut rng)).unwrap();
        let (plain, _) = classify_forward(&pc, &params, Mode::Eval, &mut rng).unwrap();
        let voted = vote_predict(&pc, &params, 1, (1.0, 1.0), &mut rng).unwrap();
        assert_eq!(plain, voted);
    }
}

#[test]
pub fn vote_mean_lies_inside_member_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = NetworkParams::<f64>::init(&small_classifier(5), &mut rng).unwrap();
    let pc = PointCloud::new(random_points(24, &mut rng)).unwrap();
    let mut r1 = ChaCha8Rng::seed_from_u64(99);
    let mut r2 = ChaCha8Rng::seed_from_u64(99);
    let scores = vote_scores(&pc, &params, 10, (0.66, 1.4), &mut r1).unwrap();
    let mean = vote_predict(&pc, &params, 10, (0.66, 1.4), &mut r2).unwrap();
    assert!((mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for (j, &m) in mean.iter().enumerate() {
        let col = scores.column(j);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo - 1e-12 <= m && m <= hi + 1e-12);
    }
}

/// Four separated triangles with areas 1, 2, 3 and 4, told apart by z.
fn four_triangle_mesh() -> Mesh {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, area) in [1.0, 2.0, 3.0, 4.0].into_iter().enumerate() {
        let z = i as f64;
        let base = vertices.len();
        vertices.extend([[0.0, 0.0, z], [2.0 * area, 0.0, z], [0.0, 1.0, z]]);
        faces.push([base, base + 1, base + 2]);
    }
    Mesh::new(vertices, faces).unwrap()
}

#[test]
pub fn mesh_sampling_passes_chi_square() {
    let mesh = four_triangle_mesh();
    let n = 10_000;
    let pc = sample_mesh_uniform(&mesh, n, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let mut counts = [0usize; 4];
    for p in pc.coords() {
        counts[p[2].round() as usize] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip([0.1, 0.2, 0.3, 0.4])
        .map(|(&o, q)| {
            let e = q * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    // Upper 0.001 quantile of chi-square with 3 degrees of freedom.
    assert!(chi2 < 16.266, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
pub fn mesh_sampling_follows_three_to_one_areas() {
    let mesh = Mesh::new(
        vec![
            [0.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 5.0],
            [1.0, 0.0, 5.0],
            [0.0, 1.0, 5.0],
        ],
        vec![[0, 1, 2], [3, 4, 5]],
    )
    .unwrap();
    let pc = sample_mesh_uniform(&mesh, 10_000, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    let big = pc.coords().iter().filter(|p| p[2] < 1.0).count() as f64;
    let ratio = big / (10_000.0 - big);
    assert!((ratio - 3.0).abs() < 0.15, "ratio {ratio}");
}

fn cloud_strategy() -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..48)
}

proptest! {
    #[test]
    fn fps_indices_are_distinct_and_in_range(pts in cloud_strategy(), frac in 0.0f64..1.0, seed_frac in 0.0f64..1.0) {
        let n = pts.len();
        let m = 1 + ((n - 1) as f64 * frac) as usize;
        let seed = ((n - 1) as f64 * seed_frac) as usize;
        let pc = PointCloud::new(pts).unwrap();
        let idx = farthest_point_sampling(&pc, m, seed).unwrap();
        prop_assert_eq!(idx.len(), m);
        prop_assert_eq!(idx[0], seed);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), m);
    }

    #[test]
    fn knn_is_sorted_by_distance(pts in cloud_strategy(), q in prop::array::uniform3(-1.0f64..1.0), frac in 0.0f64..1.0) {
        let k = 1 + ((pts.len() - 1) as f64 * frac) as usize;
        let pc = PointCloud::new(pts).unwrap();
        let idx = knn(&pc, &q, k).unwrap();
        let d: Vec<f64> = idx.iter().map(|&i| localnet::geometry::dist_sq(pc.point(i), &q)).collect();
        prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        let worst = d.last().copied().unwrap();
        let outside = (0..pc.len()).filter(|i| !idx.contains(i));
        for i in outside {
            prop_assert!(localnet::geometry::dist_sq(pc.point(i), &q) >= worst);
        }
    }

    #[test]
    fn normalized_cloud_fits_unit_sphere(pts in cloud_strategy()) {
        let pc = normalize_unit_sphere(&PointCloud::new(pts).unwrap());
        let max = pc.coords().iter().map(localnet::geometry::norm).fold(0.0, f64::max);
        prop_assert!(max <= 1.0 + 1e-12);
        prop_assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
        let c = pc.centroid();
        prop_assert!(c.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn idw_stays_within_feature_range(
        centers in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..12),
        target in prop::array::uniform3(-1.5f64..1.5),
        k in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<Vec<f64>> = centers.iter().map(|_| vec![rng.random_range(-5.0..5.0)]).collect();
        let f = idw_interpolate(&target, &centers, &feats, k).unwrap()[0];
        let lo = feats.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
        let hi = feats.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-9 <= f && f <= hi + 1e-9);
    }
}
