use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatlight::mesh::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Axis-aligned cube as quads, so loading exercises fan triangulation.
fn cube_obj(name: &str, min: [f64; 3], side: f64, first_vertex: usize) -> String {
    let mut s = format!("o {name}\n");
    for i in 0..8 {
        let (x, y, z) = ((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64);
        s += &format!("v {} {} {}\n", min[0] + side * x, min[1] + side * y, min[2] + side * z);
    }
    // Outward-facing quads.
    for f in [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]] {
        s += "f";
        for v in f {
            s += &format!(" {}", v + 1 + first_vertex);
        }
        s += "\n";
    }
    s
}

fn two_cubes() -> MeshScene {
    let text = cube_obj("small", [0.0; 3], 1.0, 0) + &cube_obj("big", [3.0, 0.0, 0.0], 2.0, 8);
    MeshScene::parse_obj(&text).unwrap()
}

fn cfg(strategy: SampleStrategy, count: usize, seed: u64) -> SampleConfig {
    SampleConfig {
        strategy,
        count,
        rng_seed: seed,
    }
}

#[test]
fn unit_cube_volume_and_area() {
    let scene = MeshScene::parse_obj(&cube_obj("c", [0.0; 3], 1.0, 0)).unwrap();
    assert_eq!(scene.objects.len(), 1);
    assert_eq!(scene.objects[0].triangles.len(), 12);
    assert!((scene.objects[0].volume() - 1.0).abs() < 1e-12);
    assert!((scene.objects[0].area() - 6.0).abs() < 1e-12);
}

#[test]
fn malformed_obj_is_rejected() {
    assert!(matches!(MeshScene::parse_obj("v 0 0 0\nf 1 2 3\n"), Err(MeshError::Parse { line: 2, .. })));
    assert!(matches!(MeshScene::parse_obj("v 0 0\n"), Err(MeshError::Parse { line: 1, .. })));
    let empty = MeshScene::parse_obj("v 0 0 0\n").unwrap();
    assert!(matches!(sample_points(&empty, &cfg(SampleStrategy::Bbox, 1, 0)), Err(MeshError::EmptyMesh)));
}

#[test]
fn objects_are_picked_by_area_proxy() {
    // Volumes 1 and 8 give weights 1 and 4.
    let pts = sample_points_detailed(&two_cubes(), &cfg(SampleStrategy::SurfaceArea, 100_000, 1)).unwrap();
    let big = pts.iter().filter(|p| p.object == 1).count() as f64 / pts.len() as f64;
    let sd = (0.8f64 * 0.2 / 100_000.0).sqrt();
    assert!((big - 0.8).abs() < 5.0 * sd, "{big}");
}

#[test]
fn triangles_are_picked_by_area() {
    // One object with triangles of areas 1, 2, 3, 4 (right triangles on z=k planes).
    let mut text = String::from("o a\n");
    for (k, a) in [1.0f64, 2.0, 3.0, 4.0].iter().enumerate() {
        let leg = (2.0 * a).sqrt();
        text += &format!("v 0 0 {k}\nv {leg} 0 {k}\nv 0 {leg} {k}\n");
        text += &format!("f {} {} {}\n", 3 * k + 1, 3 * k + 2, 3 * k + 3);
    }
    let scene = MeshScene::parse_obj(&text).unwrap();
    let pts = sample_points_detailed(&scene, &cfg(SampleStrategy::SurfaceArea, 50_000, 2)).unwrap();
    let mut counts = [0.0f64; 4];
    for p in &pts {
        counts[p.triangle] += 1.0;
    }
    let stat: f64 = counts
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            let e = 50_000.0 * (i + 1) as f64 / 10.0;
            (o - e).powi(2) / e
        })
        .sum();
    let crit = ChiSquared::new(3.0).unwrap().inverse_cdf(0.999);
    assert!(stat < crit, "chi2 {stat} >= {crit}");
}

#[test]
fn surface_centroid_of_a_cube() {
    let scene = MeshScene::parse_obj(&cube_obj("c", [1.0, -2.0, 0.5], 1.0, 0)).unwrap();
    let pts = sample_points(&scene, &cfg(SampleStrategy::SurfaceArea, 1_000_000, 3)).unwrap();
    let n = pts.len() as f64;
    let c: Vec<f64> = (0..3).map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    for (k, want) in [1.5, -1.5, 1.0].iter().enumerate() {
        assert!((c[k] - want).abs() < 2e-3, "axis {k}: {}", c[k]);
    }
}

#[test]
fn every_strategy_lands_on_its_triangle() {
    let scene = two_cubes();
    for strategy in [SampleStrategy::SurfaceArea, SampleStrategy::UniformTriangle, SampleStrategy::Bbox] {
        let pts = sample_points_detailed(&scene, &cfg(strategy, 5_000, 4)).unwrap();
        assert_eq!(pts.len(), 5_000);
        for p in pts {
            let t = scene.objects[p.object].triangle(p.triangle);
            assert!(point_triangle_distance(p.point, t) < 1e-12);
        }
    }
}

#[test]
fn sampling_is_reproducible_across_chunks() {
    let scene = two_cubes();
    let a = sample_points(&scene, &cfg(SampleStrategy::Bbox, 9_000, 5)).unwrap();
    let b = sample_points(&scene, &cfg(SampleStrategy::Bbox, 9_000, 5)).unwrap();
    assert_eq!(a, b);
    let short = sample_points(&scene, &cfg(SampleStrategy::Bbox, 5_000, 5)).unwrap();
    assert_eq!(&a[..4096], &short[..4096]);
    assert_ne!(a, sample_points(&scene, &cfg(SampleStrategy::Bbox, 9_000, 6)).unwrap());
    assert!(matches!(sample_points(&scene, &cfg(SampleStrategy::Bbox, 0, 5)), Err(MeshError::InvalidConfig(_))));
}

#[test]
fn flat_meshes_cannot_use_volume_weights() {
    let scene = MeshScene::parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
    assert!(matches!(
        sample_points(&scene, &cfg(SampleStrategy::SurfaceArea, 10, 0)),
        Err(MeshError::ZeroVolumeAll)
    ));
    assert_eq!(sample_points(&scene, &cfg(SampleStrategy::UniformTriangle, 10, 0)).unwrap().len(), 10);
}

#[test]
fn preset_counts() {
    assert_eq!((OBJECT_POINTS, OBJECT_SCENE_POINTS, SCENE_POINTS), (10_000, 5_000, 50_000));
    assert_eq!("bbox".parse::<SampleStrategy>().unwrap(), SampleStrategy::Bbox);
}

fn random_scene(seed: u64, n: usize) -> MeshScene {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let objects = (0..3)
        .map(|o| {
            let vertices = (0..n * 3).map(|_| std::array::from_fn(|_| r.random_range(-2.0..2.0))).collect();
            MeshObject {
                name: format!("o{o}"),
                vertices,
                triangles: (0..n).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect(),
            }
        })
        .collect();
    MeshScene { objects }
}

/// Minimum over a dense barycentric grid; never below the exact distance.
fn grid_distance(p: [f64; 3], t: [[f64; 3]; 3]) -> f64 {
    let n = 200;
    let mut best = f64::INFINITY;
    for i in 0..=n {
        for j in 0..=n - i {
            let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
            let q: Vec<f64> = (0..3).map(|k| (1.0 - u - v) * t[0][k] + u * t[1][k] + v * t[2][k]).collect();
            let d = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

#[test]
fn closest_point_agrees_with_dense_search() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..30 {
        let t: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0)));
        let p: [f64; 3] = std::array::from_fn(|_| r.random_range(-2.0..2.0));
        let exact = point_triangle_distance(p, t);
        let grid = grid_distance(p, t);
        assert!(exact <= grid + 1e-12);
        assert!(grid - exact < 0.02, "{exact} vs {grid}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tree_matches_brute_force(seed in any::<u64>()) {
        let scene = random_scene(seed, 34);
        let tree = TriangleTree::build(&scene).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..200 {
            let p: [f64; 3] = std::array::from_fn(|_| r.random_range(-3.0..3.0));
            let a = tree.nearest(p);
            let b = nearest_triangle_brute(p, &scene).unwrap();
            prop_assert_eq!(a.distance, b.distance);
            prop_assert_eq!((a.object, a.triangle), (b.object, b.triangle));
        }
    }
}
