use super::*;
use crate::gaussian::{density_at, Gaussian};
use crate::loss::GradientPyramid;
use crate::mesh::{icosphere, synth_humanoid, HumanoidParams};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};

fn cloud(seed: u64, n: usize) -> Vec<PointSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let p = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
            let n = geom::normalize([0, 1, 2].map(|_| rng.gen_range(-1.0..1.0))).unwrap_or([0.0, 0.0, 1.0]);
            PointSample { position: p, normal: n, face: i }
        })
        .collect()
}

fn brute_nn(from: &[PointSample], to: &[PointSample]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|s| {
            let mut best = (0, f64::INFINITY);
            for (j, t) in to.iter().enumerate() {
                let d = geom::dist2(s.position, t.position);
                if d < best.1 {
                    best = (j, d);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect()
}

#[test]
fn sample_count_and_containment() {
    let tri = TriMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]);
    let s = sample_surface(&tri, 777, 3).unwrap();
    assert_eq!(s.len(), 777);
    for p in &s {
        let [x, y, z] = p.position;
        assert!(x >= 0.0 && y >= 0.0 && x + y <= 1.0 + 1e-12 && z == 0.0);
        assert!((geom::norm(p.normal) - 1.0).abs() < 1e-5);
    }
    let empty = TriMesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 2]]);
    assert!(sample_surface(&empty, 10, 0).is_err());
}

#[test]
fn face_frequency_follows_area() {
    // areas 1, 2, 3 (two right triangles side by side plus a larger one)
    let m = TriMesh::new(
        vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [5.0, 0.0, 0.0],
            [7.0, 0.0, 0.0],
            [5.0, 2.0, 0.0],
            [10.0, 0.0, 0.0],
            [13.0, 0.0, 0.0],
            [10.0, 2.0, 0.0],
        ],
        vec![[0, 1, 2], [3, 4, 5], [6, 7, 8]],
    );
    let n = 100_000;
    let s = sample_surface(&m, n, 9).unwrap();
    let mut counts = [0usize; 3];
    for p in &s {
        counts[p.face] += 1;
    }
    for (f, &c) in counts.iter().enumerate() {
        let p = (f + 1) as f64 / 6.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "face {f}: {c}");
    }
}

#[test]
fn chamfer_single_pair_is_one_cm() {
    let a = [PointSample { position: [0.0; 3], normal: [0.0, 0.0, 1.0], face: 0 }];
    let b = [PointSample { position: [0.01, 0.0, 0.0], normal: [0.0, 0.0, 1.0], face: 0 }];
    let (p2s, s2p) = chamfer(&a, &b).unwrap();
    assert!((p2s - 1.0).abs() < 1e-12 && (s2p - 1.0).abs() < 1e-12);
    assert_eq!(chamfer(&a, &a).unwrap(), (0.0, 0.0));
    assert!(chamfer(&a, &[]).is_err());
}

#[test]
fn tree_metrics_equal_brute_force() {
    for seed in 0..5 {
        let (p, g) = (cloud(seed, 500), cloud(seed + 100, 500));
        let c = Correspondence::new(&p, &g).unwrap();
        assert_eq!(c.pred_to_gt, brute_nn(&p, &g));
        assert_eq!(c.gt_to_pred, brute_nn(&g, &p));
    }
}

#[test]
fn f_score_constructed_cases() {
    let s = |x: f64| PointSample { position: [x, 0.0, 0.0], normal: [0.0, 0.0, 1.0], face: 0 };
    let a: Vec<_> = (0..4).map(|i| s(i as f64)).collect();
    assert_eq!(f_score(&a, &a, 0.5).unwrap(), 100.0);
    let far: Vec<_> = (0..4).map(|i| s(10.0 + i as f64)).collect();
    assert_eq!(f_score(&a, &far, 1.0).unwrap(), 0.0);
    // two of four predictions lie on the two GT points, the rest far away
    let gt = vec![s(0.0), s(1.0)];
    let pred = vec![s(0.0), s(1.0), s(5.0), s(6.0)];
    let f = f_score(&pred, &gt, 1.0).unwrap();
    assert!((f - 2.0 * 50.0 * 100.0 / 150.0).abs() < 1e-9);
    assert!(f_score(&pred, &gt, 0.0).is_err());
}

#[test]
fn normal_consistency_extremes() {
    let s = sample_surface(&icosphere(3), 4000, 1).unwrap();
    assert!((normal_consistency(&s, &s).unwrap() - 1.0).abs() < 1e-6);
    let f: Vec<_> = s.iter().map(|p| PointSample { normal: p.normal.map(|v| -v), ..*p }).collect();
    assert!((normal_consistency(&f, &s).unwrap() + 1.0).abs() < 1e-6);
}

#[test]
fn sphere_against_coarser_sphere() {
    let fine = sample_surface(&icosphere(4), 20_000, 2).unwrap();
    let coarse = sample_surface(&icosphere(2), 20_000, 3).unwrap();
    let nc = normal_consistency(&coarse, &fine).unwrap();
    // independent per-point evaluation
    let mut sum = 0.0;
    for (a, b) in [(&coarse, &fine), (&fine, &coarse)] {
        let nn = brute_nn(&a[..2000], b);
        let part: f64 = a[..2000].iter().zip(&nn).map(|(s, &(j, _))| geom::dot(s.normal, b[j].normal)).sum();
        sum += part / 2000.0;
    }
    assert!(nc >= 0.99, "{nc}");
    assert!(sum / 2.0 >= 0.99);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn f_score_monotone_in_tau(seed in 0u64..1000, t1 in 0.5f64..20.0, dt in 0.0f64..20.0) {
        let (p, g) = (cloud(seed, 60), cloud(seed + 1, 60));
        let a = f_score(&p, &g, t1).unwrap();
        let b = f_score(&p, &g, t1 + dt).unwrap();
        prop_assert!(b >= a);
    }

    #[test]
    fn chamfer_is_permutation_invariant(seed in 0u64..1000, rot in 1usize..50) {
        let (p, g) = (cloud(seed, 50), cloud(seed + 7, 50));
        let mut q = p.clone();
        q.rotate_left(rot);
        q.reverse();
        let (a, b) = (chamfer(&p, &g).unwrap(), chamfer(&q, &g).unwrap());
        prop_assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
    }
}

fn single(alpha: f64, s: f64) -> GaussianSet<f64> {
    GaussianSet {
        kind: FeatureKind::Color,
        gaussians: vec![Gaussian {
            position: [0.0; 3],
            scale: [s; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: alpha,
            feature: [0.2, 0.4, 0.6],
        }],
    }
}

#[test]
fn single_gaussian_level_set_radius() {
    let grid = 128;
    let voxel = 2.0 * EXTRACTION_HALF_EXTENT / (grid - 1) as f64;
    let m = gaussians_to_mesh(&single(1.0, 0.2), grid, 0.5).unwrap();
    let expect = 0.2 * (2.0 * 2f64.ln()).sqrt();
    for v in &m.vertices {
        assert!((geom::norm(*v) - expect).abs() <= 2.0 * voxel);
    }
    assert!(m.is_edge_manifold());
    assert!(m.signed_volume() > 0.0);
    let c = m.colors.as_ref().unwrap()[0];
    assert!((c[0] - 0.2).abs() < 1e-9 && (c[2] - 0.6).abs() < 1e-9);
}

#[test]
fn empty_set_has_no_isosurface() {
    let set = GaussianSet::<f64>::new(FeatureKind::Color);
    assert!(matches!(gaussians_to_mesh(&set, 16, 0.5), Err(Error::EmptyIsosurface { .. })));
    assert!(matches!(gaussians_to_mesh(&single(1.0, 0.2), 4, 0.5), Err(Error::Config(_))));
}

#[test]
fn refinement_changes_area_little() {
    let set = GaussianSet {
        kind: FeatureKind::Color,
        gaussians: vec![
            Gaussian { position: [0.2, 0.0, 0.0], scale: [0.25, 0.15, 0.1], rotation: [0.9, 0.1, 0.3, 0.0], opacity: 0.9, feature: [0.5; 3] },
            Gaussian { position: [-0.2, 0.1, 0.0], scale: [0.2; 3], rotation: [1.0, 0.0, 0.0, 0.0], opacity: 0.8, feature: [0.5; 3] },
        ],
    };
    let set = GaussianSet {
        kind: set.kind,
        gaussians: set
            .gaussians
            .into_iter()
            .map(|mut g| {
                let n = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
                g.rotation = g.rotation.map(|v| v / n);
                g
            })
            .collect(),
    };
    let a = gaussians_to_mesh(&set, 64, 0.4).unwrap().surface_area();
    let b = gaussians_to_mesh(&set, 128, 0.4).unwrap().surface_area();
    assert!((a - b).abs() / b < 0.05, "{a} vs {b}");
}

#[test]
fn bucketed_field_equals_direct_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gaussians = (0..40)
        .map(|_| Gaussian {
            position: [0, 1, 2].map(|_| rng.gen_range(-1.2..1.2)),
            scale: [0, 1, 2].map(|_| rng.gen_range(0.02..0.3)),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: rng.gen_range(0.1..1.0),
            feature: [0.5; 3],
        })
        .collect();
    let set = GaussianSet { kind: FeatureKind::Color, gaussians };
    let b = Buckets::new(&set, -1.05, 1.05, 4);
    for _ in 0..500 {
        let p = [0, 1, 2].map(|_| rng.gen_range(-1.05..1.05));
        let direct = density_at(&set, p);
        let bucketed: f64 = b.at(p).iter().map(|&i| gaussian_density(&set.gaussians[i as usize], p, 3.0)).sum();
        assert_eq!(direct, bucketed);
    }
}

#[test]
fn evaluate_identity_and_shift() {
    let cfg = EvalConfig { samples: 5000, render_res: 64, ..Default::default() };
    let h = synth_humanoid(4, &HumanoidParams { cell: 0.03, ..Default::default() }).unwrap();
    let r = evaluate(&h.body, &h.body, &EvalConfig { seed: 3, ..cfg }, &GradientPyramid::default()).unwrap();
    assert_eq!((r.cd_p2s, r.cd_s2p), (0.0, 0.0));
    assert!((r.nc - 1.0).abs() < 1e-12);
    assert_eq!(r.f_score, 100.0);
    assert_eq!((r.perceptual_front, r.perceptual_back), (0.0, 0.0));

    let mut shifted = h.body.clone();
    shifted.scale_translate(1.0, [0.01, 0.0, 0.0]);
    let ps = sample_surface(&shifted, 5000, 1).unwrap();
    let gs = sample_surface(&h.body, 5000, 1).unwrap();
    let (p2s, _) = chamfer(&ps, &gs).unwrap();
    assert!(p2s <= 1.0 + 1e-9, "{p2s}");
}

#[test]
fn evaluate_two_humanoids_smoke() {
    let p = HumanoidParams { cell: 0.03, ..Default::default() };
    let a = synth_humanoid(1, &p).unwrap();
    let b = synth_humanoid(2, &p).unwrap();
    let cfg = EvalConfig { samples: 3000, render_res: 64, ..Default::default() };
    let r = evaluate(&a.body, &b.body, &cfg, &GradientPyramid::default()).unwrap();
    for v in [r.cd_p2s, r.cd_s2p, r.nc, r.f_score, r.perceptual_front, r.perceptual_back] {
        assert!(v.is_finite());
    }
    assert!(r.cd_p2s >= 0.0 && r.cd_s2p >= 0.0);
    assert!((-1.0..=1.0).contains(&r.nc));
    assert!((0.0..=100.0).contains(&r.f_score));
    assert!(r.perceptual_front > 0.0);
}

#[test]
fn csv_table_shape() {
    let rows = vec![("a".to_string(), MetricReport { nc: 1.0, f_score: 100.0, ..Default::default() })];
    let s = metrics_csv(&rows);
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert!(lines[1].starts_with("a,0.000000,0.000000,1.000000,100.000000"));
    assert!(lines[2].starts_with("mean,"));
}
