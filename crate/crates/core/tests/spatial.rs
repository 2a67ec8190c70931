mod common;

use rand::Rng;

use sdmm::geometry::UnitVec3;
use sdmm::par::Execution;
use sdmm::spatial::{Aabb, PathVertex, SpatialTree, TreeConfig, LEAF_COMPONENTS};

fn small_tree(threshold: usize) -> SpatialTree {
    SpatialTree::build_initial(TreeConfig { subdivision_threshold: threshold, ..TreeConfig::default() })
}

fn vertex(position: [f64; 3], direction: UnitVec3, weight: f64) -> PathVertex {
    PathVertex { position, normal: UnitVec3::Z, direction, weight }
}

/// Half-open box membership with the upper face closed on the cube boundary.
fn claims(b: &Aabb, p: &[f64; 3]) -> bool {
    (0..3).all(|a| p[a] >= b.min[a] && (p[a] < b.max[a] || (b.max[a] == 1.0 && p[a] == 1.0)))
}

fn assert_partition(tree: &SpatialTree, points: &[[f64; 3]]) {
    let handles = tree.leaf_handles();
    for p in points {
        let owners: Vec<usize> = handles.iter().copied().filter(|h| claims(&tree.leaf(*h).bounds, p)).collect();
        assert_eq!(owners.len(), 1, "point {p:?} claimed by {owners:?}");
        assert_eq!(owners[0], tree.lookup(p));
    }
}

fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = common::rng(seed);
    (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
}

#[test]
fn initial_grid_has_512_equal_leaves() {
    let tree = SpatialTree::build_initial(TreeConfig::default());
    assert_eq!(tree.leaf_count(), 512);
    for l in tree.leaves() {
        for a in 0..3 {
            assert!((l.bounds.max[a] - l.bounds.min[a] - 0.125).abs() < 1e-15);
        }
        assert!(!l.is_initialized());
    }
    let corner = tree.leaf_at(&[0.99, 0.01, 0.5]);
    assert_eq!(corner.bounds.min, [0.875, 0.0, 0.5]);
    assert_eq!(corner.bounds.max, [1.0, 0.125, 0.625]);
}

#[test]
fn leaf_centers_map_to_their_leaf() {
    let tree = SpatialTree::build_initial(TreeConfig::default());
    for h in tree.leaf_handles() {
        let b = tree.leaf(h).bounds;
        let c = [0.5 * (b.min[0] + b.max[0]), 0.5 * (b.min[1] + b.max[1]), 0.5 * (b.min[2] + b.max[2])];
        assert_eq!(tree.lookup(&c), h);
    }
}

#[test]
fn split_plane_goes_to_upper_child() {
    let tree = SpatialTree::build_initial(TreeConfig::default());
    let l = tree.leaf_at(&[0.5, 0.25, 0.125]);
    assert_eq!(l.bounds.min, [0.5, 0.25, 0.125]);
}

#[test]
fn lookup_agrees_with_linear_scan() {
    assert_partition(&SpatialTree::build_initial(TreeConfig::default()), &random_points(10_000, 1));
}

#[test]
fn threshold_is_strict() {
    let mut tree = small_tree(200);
    let mut rng = common::rng(2);
    let at_limit: Vec<PathVertex> =
        (0..200).map(|_| vertex([rng.random_range(0.0..0.125), 0.05, 0.05], UnitVec3::Z, 1.0)).collect();
    tree.deposit(&at_limit);
    tree.refine();
    assert_eq!(tree.leaf_count(), 512);

    tree.deposit(&[vertex([0.01, 0.05, 0.05], UnitVec3::Z, 1.0)]);
    tree.refine();
    assert_eq!(tree.leaf_count(), 513);
}

#[test]
fn collinear_vertices_split_on_x_at_mean() {
    let mut tree = small_tree(100);
    let xs: Vec<f64> = (0..101).map(|i| 0.001 + 0.1 * i as f64 / 100.0).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let vs: Vec<PathVertex> = xs.iter().map(|&x| vertex([x, 0.06, 0.06], UnitVec3::Z, 1.0)).collect();
    tree.deposit(&vs);
    tree.refine();
    let lo = tree.leaf_at(&[mean - 1e-9, 0.06, 0.06]);
    let hi = tree.leaf_at(&[mean, 0.06, 0.06]);
    assert_eq!(lo.bounds.max[0], mean);
    assert_eq!(hi.bounds.min[0], mean);
    assert_eq!(lo.vertices.len() + hi.vertices.len(), 101);
}

#[test]
fn identical_vertices_do_not_split() {
    let mut tree = small_tree(50);
    let vs = vec![vertex([0.3, 0.3, 0.3], UnitVec3::Z, 1.0); 80];
    tree.deposit(&vs);
    tree.refine();
    assert_eq!(tree.leaf_count(), 512);
    assert_eq!(tree.leaf_at(&[0.3, 0.3, 0.3]).vertices.len(), 80);
}

#[test]
fn refine_conserves_vertices_and_bounds_counts() {
    let threshold = 500;
    let mut tree = small_tree(threshold);
    let mut rng = common::rng(3);
    let vs: Vec<PathVertex> = (0..20_000)
        .map(|_| {
            // Clustered so some leaves need several levels.
            let c = if rng.random::<f64>() < 0.7 { 0.2 } else { 0.7 };
            let p =
                [(c + 0.05 * rng.random::<f64>()).min(1.0), (c + 0.05 * rng.random::<f64>()).min(1.0), rng.random()];
            vertex(p, UnitVec3::Z, 1.0)
        })
        .collect();
    tree.deposit(&vs);
    tree.refine();
    let total: usize = tree.leaves().map(|l| l.vertices.len()).sum();
    assert_eq!(total, vs.len());
    for l in tree.leaves() {
        assert!(l.vertices.len() <= threshold);
        for v in &l.vertices {
            assert!(claims(&l.bounds, &v.position));
        }
    }
    assert_partition(&tree, &random_points(10_000, 4));
}

#[test]
fn training_initializes_leaves_and_keeps_small_buffers() {
    let mut tree = small_tree(16_000);
    let mut rng = common::rng(5);
    let dir = UnitVec3::from_xyz(0.2, 0.1, 1.0).unwrap();
    let busy: Vec<PathVertex> = (0..400)
        .map(|_| vertex([rng.random_range(0.0..0.125), rng.random_range(0.0..0.125), 0.01], dir, 1.0))
        .collect();
    let sparse: Vec<PathVertex> = (0..10).map(|_| vertex([0.9, 0.9, 0.9], dir, 1.0)).collect();
    tree.deposit(&busy);
    tree.deposit(&sparse);
    let report = tree.train_leaves(Execution::Sequential);
    assert_eq!(report.initialized, 1);
    assert_eq!(report.trained, 1);
    assert_eq!(report.failed, 0);

    let trained = tree.leaf_at(&[0.05, 0.05, 0.01]);
    let m = trained.mixture.as_ref().unwrap();
    assert_eq!(m.len(), LEAF_COMPONENTS);
    assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(trained.vertices.is_empty());

    let postponed = tree.leaf_at(&[0.9, 0.9, 0.9]);
    assert!(!postponed.is_initialized());
    assert_eq!(postponed.vertices.len(), 10);
}

#[test]
fn zero_weight_batch_initializes_without_training() {
    let mut tree = small_tree(16_000);
    let vs: Vec<PathVertex> = (0..32).map(|i| vertex([0.3 + 1e-3 * i as f64, 0.3, 0.3], UnitVec3::Z, 0.0)).collect();
    tree.deposit(&vs);
    let report = tree.train_leaves(Execution::Sequential);
    assert_eq!((report.initialized, report.trained), (1, 0));
    assert!(tree.leaf_at(&[0.3, 0.3, 0.3]).vertices.is_empty());
}

#[test]
fn sequential_and_parallel_training_agree() {
    let build = |exec| {
        let mut tree = small_tree(500);
        let mut rng = common::rng(6);
        let vs: Vec<PathVertex> = (0..6000)
            .map(|_| {
                let d = common::uniform_dir(&mut rng);
                vertex([rng.random::<f64>() * 0.5, rng.random::<f64>() * 0.5, 0.2], d, rng.random())
            })
            .collect();
        tree.deposit(&vs);
        tree.refine();
        tree.train_leaves(exec);
        tree.fingerprint()
    };
    assert_eq!(build(Execution::Sequential), build(Execution::Parallel));
}

#[test]
fn cold_siblings_collapse_and_hot_ones_stay() {
    let mut tree = small_tree(100);
    let mut rng = common::rng(7);
    let vs: Vec<PathVertex> = (0..1000)
        .map(|_| vertex([rng.random_range(0.0..0.125), rng.random_range(0.0..0.125), 0.05], UnitVec3::Z, 1.0))
        .collect();
    tree.deposit(&vs);
    tree.refine();
    let refined = tree.leaf_count();
    assert!(refined > 512);

    // Same hot region again: nothing merges.
    tree.train_leaves(Execution::Sequential);
    tree.begin_iteration();
    tree.deposit(&vs);
    assert_eq!(tree.collapse(), 0);
    tree.train_leaves(Execution::Sequential);

    // A silent iteration merges everything back to the initial grid.
    tree.begin_iteration();
    assert!(tree.collapse() > 0);
    assert_eq!(tree.leaf_count(), 512);
    for l in tree.leaves() {
        if let Some(m) = &l.mixture {
            assert!(m.len() <= LEAF_COMPONENTS);
        }
    }
    assert_partition(&tree, &random_points(10_000, 8));
}

#[test]
fn checkpoint_round_trip() {
    let mut tree = small_tree(400);
    let mut rng = common::rng(9);
    let vs: Vec<PathVertex> = (0..3000)
        .map(|_| vertex([rng.random::<f64>() * 0.25, 0.1, 0.1], common::uniform_dir(&mut rng), rng.random()))
        .collect();
    tree.deposit(&vs);
    tree.refine();
    tree.train_leaves(Execution::Sequential);
    let bytes = tree.to_bytes();
    let back = SpatialTree::from_bytes(&bytes, TreeConfig::default()).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.fingerprint(), tree.fingerprint());
    assert!(SpatialTree::from_bytes(&bytes[..bytes.len() - 3], TreeConfig::default()).is_err());
    assert!(SpatialTree::from_bytes(b"SDMMxxxx", TreeConfig::default()).is_err());
}

#[test]
fn deposits_are_clamped_into_the_cube() {
    let mut tree = small_tree(16_000);
    tree.deposit(&[vertex([1.2, -0.1, 0.5], UnitVec3::Z, 1.0)]);
    let l = tree.leaf_at(&[1.0, 0.0, 0.5]);
    assert_eq!(l.vertices[0].position, [1.0, 0.0, 0.5]);
}

#[test]
fn leaf_weight_tally_matches() {
    let mut tree = small_tree(16_000);
    let mut rng = common::rng(10);
    let vs: Vec<PathVertex> =
        (0..5000).map(|_| vertex([rng.random(), rng.random(), rng.random()], UnitVec3::Z, rng.random())).collect();
    tree.deposit(&vs);
    for h in tree.leaf_handles() {
        let l = tree.leaf(h);
        let want: f64 = vs.iter().filter(|v| tree.lookup(&v.position) == h).map(|v| v.weight).sum();
        let got: f64 = l.vertices.iter().map(|v| v.weight).sum();
        assert!((want - got).abs() < 1e-9);
    }
}

#[test]
fn reservoir_caps_the_buffer() {
    let mut tree = small_tree(100);
    let vs = vec![vertex([0.3, 0.3, 0.3], UnitVec3::Z, 1.0); 1000];
    tree.deposit(&vs);
    let l = tree.leaf_at(&[0.3, 0.3, 0.3]);
    assert_eq!(l.vertices.len(), 400);
    assert_eq!(l.iteration_count, 1000);
}
