//! Synthetic scenes: the body prior must stay close to the clothed surface.

use sehr_core::mesh::{synth_humanoid, HumanoidParams, TriMesh};
use sehr_core::metrics::{sample_surface, KdTree};

fn one_sided(from: &TriMesh, to: &TriMesh, n: usize) -> f64 {
    let tree = KdTree::new(sample_surface(to, n, 1).unwrap().iter().map(|s| s.position).collect());
    sample_surface(from, n, 2)
        .unwrap()
        .iter()
        .map(|s| tree.nearest(s.position).unwrap().1.sqrt())
        .fold(0.0, f64::max)
}

#[test]
fn prior_within_hausdorff_bound_of_body() {
    for seed in 0..3 {
        let pair = synth_humanoid(seed, &HumanoidParams::default()).unwrap();
        let h = one_sided(&pair.prior, &pair.body, 10_000).max(one_sided(&pair.body, &pair.prior, 10_000));
        assert!(h <= 0.06, "seed {seed}: hausdorff {h}");
        assert!(pair.body.is_edge_manifold() && pair.prior.is_edge_manifold());
    }
}

#[test]
fn scenes_differ_across_seeds() {
    let p = HumanoidParams::default();
    let (a, b) = (synth_humanoid(0, &p).unwrap(), synth_humanoid(1, &p).unwrap());
    assert_ne!(a.body.vertices, b.body.vertices);
    assert_eq!(synth_humanoid(0, &p).unwrap().body.vertices, a.body.vertices);
}
