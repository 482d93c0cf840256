mod common;

use common::oracles::{brute_chamfer, brute_mmd_cov, brute_one_nna};
use common::gaussian_shape;
use meshdiff::eval::{chamfer, mmd_cov, one_nna, pose_errors, shape_distance, MetricReport, ShapeDistance};
use meshdiff::mesh::{Point, Similarity};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shapes(seed: u64, count: usize, n: usize) -> Vec<Vec<Point>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let c = [0; 3].map(|_| rng.random_range(-1.0..1.0));
            gaussian_shape(&mut rng, n, c, 0.5)
        })
        .collect()
}

#[test]
fn chamfer_hand_values() {
    assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
    let a = shapes(1, 1, 12).remove(0);
    assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    assert!(chamfer(&[], &a).is_err());
}

#[test]
fn set_metrics_match_brute_force() {
    let gen = shapes(2, 20, 9);
    let reference = shapes(3, 20, 11);
    for (a, b) in gen.iter().zip(&reference) {
        assert_eq!(chamfer(a, b).unwrap(), brute_chamfer(a, b));
    }
    let m = mmd_cov(&gen, &reference, ShapeDistance::Chamfer, false).unwrap();
    let (mmd, cov) = brute_mmd_cov(&gen, &reference);
    assert_eq!((m.mmd, m.cov), (mmd, cov));
    assert_eq!(
        one_nna(&gen, &reference, ShapeDistance::Chamfer, false).unwrap(),
        brute_one_nna(&gen, &reference)
    );
}

#[test]
fn separated_clusters_are_fully_distinguishable() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<_> = (0..10).map(|_| gaussian_shape(&mut rng, 8, [0.0; 3], 0.1)).collect();
    let b: Vec<_> = (0..10).map(|_| gaussian_shape(&mut rng, 8, [20.0, 0.0, 0.0], 0.1)).collect();
    assert_eq!(one_nna(&a, &b, ShapeDistance::Chamfer, false).unwrap(), 100.0);
}

#[test]
fn split_half_is_near_chance() {
    let mut mean = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut all: Vec<_> = (0..200).map(|_| gaussian_shape(&mut rng, 6, [0.0; 3], 1.0)).collect();
        all.shuffle(&mut rng);
        let (a, b) = all.split_at(100);
        mean += one_nna(a, b, ShapeDistance::Chamfer, false).unwrap() / 20.0;
    }
    assert!((mean - 50.0).abs() <= 10.0, "{mean}");
}

#[test]
fn duplicated_sets_tie_toward_the_other_set() {
    // each shape's zero-distance twin sits in the other set, so the lower-index
    // rule labels every shape wrongly
    let gen = shapes(5, 6, 7);
    let mut reference = gen.clone();
    reference.reverse();
    assert!(one_nna(&gen, &reference, ShapeDistance::Chamfer, false).unwrap() <= 50.0);
}

#[test]
fn mmd_cov_definitions() {
    let reference = shapes(6, 8, 5);
    let m = mmd_cov(&reference, &reference, ShapeDistance::Chamfer, false).unwrap();
    assert_eq!((m.mmd, m.cov), (0.0, 100.0));
    let one = mmd_cov(&reference[..1], &reference, ShapeDistance::Chamfer, false).unwrap();
    assert_eq!(one.cov, 100.0 / 8.0);
}

fn random_similarity(rng: &mut ChaCha8Rng, scale: f64) -> Similarity {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0));
    Similarity {
        rotation: Rotation3::new(axis.normalize() * rng.random_range(0.1..3.0)).into_inner(),
        translation: Vector3::new(0.3, -0.7, 1.1),
        scale,
    }
}

#[test]
fn pose_error_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt = gaussian_shape(&mut rng, 9, [0.0; 3], 1.0);
    let verts = gaussian_shape(&mut rng, 30, [0.0; 3], 1.0);
    let e = pose_errors(&gt, &gt, &verts, &verts).unwrap();
    assert_eq!((e.mpjpe, e.pa_mpjpe, e.mpve), (0.0, 0.0, 0.0));

    let shifted: Vec<Point> = gt.iter().map(|p| [p[0] + 0.3, p[1], p[2] - 0.4]).collect();
    let e = pose_errors(&shifted, &gt, &verts, &verts).unwrap();
    assert!((e.mpjpe - 0.5).abs() < 1e-6 && e.pa_mpjpe < 1e-6);

    let t = random_similarity(&mut rng, 1.7);
    let moved = t.apply_all(&gt);
    let e = pose_errors(&moved, &gt, &verts, &verts).unwrap();
    assert!(e.pa_mpjpe < 1e-5 && e.mpjpe > 0.1, "{e:?}");
}

#[test]
fn aligned_one_nna_ignores_global_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gen = shapes(10, 8, 10);
    let reference = shapes(11, 8, 10);
    let t = random_similarity(&mut rng, 1.0);
    let mv = |s: &Vec<Vec<Point>>| s.iter().map(|v| t.apply_all(v)).collect::<Vec<_>>();
    for dist in [ShapeDistance::Chamfer, ShapeDistance::Correspondence] {
        let a = one_nna(&gen, &reference, dist, true).unwrap();
        let b = one_nna(&mv(&gen), &mv(&reference), dist, true).unwrap();
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn report_formats() {
    let mut r = MetricReport::default();
    r.push("mmd", 0.5);
    r.push("cov", 25.0);
    assert_eq!(r.to_csv(), "metric,value\nmmd,0.5\ncov,25\n");
    assert_eq!(r.get("cov"), Some(25.0));
    assert!(r.to_table().contains("mmd"));
}

proptest! {
    #[test]
    fn chamfer_is_symmetric(seed in 0u64..500, n in 1usize..12, m in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian_shape(&mut rng, n, [0.0; 3], 1.0);
        let b = gaussian_shape(&mut rng, m, [0.5; 3], 1.0);
        let (x, y) = (chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        prop_assert!(x > 0.0);
    }

    #[test]
    fn mpve_ignores_consistent_reordering(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = gaussian_shape(&mut rng, 5, [0.0; 3], 1.0);
        let a = gaussian_shape(&mut rng, 20, [0.0; 3], 1.0);
        let b = gaussian_shape(&mut rng, 20, [0.0; 3], 1.0);
        let mut idx: Vec<usize> = (0..20).collect();
        idx.shuffle(&mut rng);
        let ra: Vec<_> = idx.iter().map(|&i| a[i]).collect();
        let rb: Vec<_> = idx.iter().map(|&i| b[i]).collect();
        let e1 = pose_errors(&j, &j, &a, &b).unwrap().mpve;
        let e2 = pose_errors(&j, &j, &ra, &rb).unwrap().mpve;
        prop_assert!((e1 - e2).abs() < 1e-9);
        prop_assert!(shape_distance(&a, &b, ShapeDistance::Correspondence, false).unwrap() > 0.0);
    }
}
