use meshdiff::mesh::{bbox_diagonal, procrustes_align, regress_joints};
use meshdiff::synthetic::{
    generate_dataset, generate_range, load_split, prolongations, resegment_skeleton, save_dataset, SkeletonSpec,
};
use proptest::prelude::*;

fn dist(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn regressor_recovers_skeleton_joints() {
    let (samples, topo) = generate_dataset(&SkeletonSpec::humanoid(), 12, 3).unwrap();
    assert!(regress_joints(&[], &topo).is_err(), "empty mesh must be rejected");
    for s in &samples {
        let j = regress_joints(&s.dense, &topo).unwrap();
        for (a, b) in j.iter().zip(&s.joints) {
            assert!(dist(a, b) < 1e-5, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn coarse_is_downsampled_dense() {
    let (samples, topo) = generate_dataset(&SkeletonSpec::humanoid(), 3, 9).unwrap();
    assert_eq!((topo.n_coarse, topo.n_dense, topo.n_joints()), (96, 384, 9));
    for s in &samples {
        assert_eq!(topo.downsample.apply(&s.dense).unwrap(), s.coarse);
    }
}

#[test]
fn same_seed_same_bodies() {
    let spec = SkeletonSpec::humanoid();
    let (a, _) = generate_dataset(&spec, 5, 42).unwrap();
    let (b, _) = generate_dataset(&spec, 5, 42).unwrap();
    let (c, _) = generate_dataset(&spec, 5, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    // per-sample streams: a tail range matches the full run
    let (tail, _) = generate_range(&spec, 3..5, 42).unwrap();
    assert_eq!(tail, a[3..].to_vec());
}

#[test]
fn bodies_are_canonical() {
    let (samples, topo) = generate_dataset(&SkeletonSpec::humanoid(), 8, 1).unwrap();
    let lm = &topo.landmarks;
    for s in &samples {
        let p = s.joints[lm.pelvis];
        assert!(p.iter().all(|c| c.abs() < 1e-5));
        let n = s.joints[lm.neck];
        assert!(n[0].abs() < 1e-5 && n[2].abs() < 1e-5 && n[1] > 0.5);
        let d = [0, 1, 2].map(|k| s.joints[lm.hip_left][k] - s.joints[lm.hip_right][k]);
        assert!(d[0] > 0.0 && d[2].abs() < 1e-5);
    }
}

#[test]
fn normals_point_outward() {
    let (samples, topo) = generate_dataset(&SkeletonSpec::humanoid(), 2, 5).unwrap();
    let s = &samples[0];
    // interior ring of each tube: normal agrees with the offset from the ring centre
    for t in 0..6 {
        let ring: Vec<usize> = (0..8).map(|k| t * 64 + 3 * 8 + k).collect();
        let c = [0, 1, 2].map(|d| ring.iter().map(|&i| s.dense[i][d]).sum::<f32>() / 8.0);
        for &i in &ring {
            let n = s.dense_normals[i];
            assert!((dist(&n, &[0.0; 3]) - 1.0).abs() < 1e-5);
            let dot: f32 = (0..3).map(|d| n[d] * (s.dense[i][d] - c[d])).sum();
            assert!(dot > 0.0, "tube {t} vertex {i}");
        }
    }
    for n in &s.coarse_normals {
        assert!((dist(n, &[0.0; 3]) - 1.0).abs() < 1e-5);
    }
    assert!(bbox_diagonal(&topo.rest_coarse) > 1.0);
}

#[test]
fn prolongation_rows_are_partitions_of_unity() {
    let (first, second) = prolongations(6).unwrap();
    assert_eq!((first.rows(), first.cols()), (192, 96));
    assert_eq!((second.rows(), second.cols()), (384, 192));
    for r in 0..first.rows() {
        assert!((first.row_sum(r) - 1.0).abs() < 1e-12);
    }
    for r in 0..second.rows() {
        assert!((second.row_sum(r) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn prolongated_rest_mesh_is_close_to_dense() {
    let (samples, _) = generate_dataset(&SkeletonSpec::humanoid(), 1, 0).unwrap();
    let (first, second) = prolongations(6).unwrap();
    let up = second.apply(&first.apply(&samples[0].coarse).unwrap()).unwrap();
    let err: f64 = up.iter().zip(&samples[0].dense).map(|(a, b)| dist(a, b)).sum::<f64>() / up.len() as f64;
    assert!(err < 0.01 * bbox_diagonal(&samples[0].dense), "mean error {err}");
}

#[test]
fn dataset_round_trips_through_disk() {
    let (samples, topo) = generate_dataset(&SkeletonSpec::humanoid(), 3, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &topo, &samples[..2], &samples[2..]).unwrap();
    let loaded_topo = meshdiff::mesh::MeshTopology::load(dir.path().join("topology.txt")).unwrap();
    let train = load_split(dir.path(), "train", &loaded_topo).unwrap();
    let val = load_split(dir.path(), "val", &loaded_topo).unwrap();
    assert_eq!((train.len(), val.len()), (2, 1));
    for (a, b) in train.iter().chain(&val).zip(&samples) {
        for (p, q) in a.dense.iter().zip(&b.dense) {
            assert!(dist(p, q) < 2e-6);
        }
        assert_eq!(a.joints, b.joints);
    }
}

#[test]
fn degenerate_limits_are_rejected() {
    let mut spec = SkeletonSpec::humanoid();
    spec.limits[4][0] = (0.5, -0.5);
    assert!(generate_dataset(&spec, 1, 0).is_err());
}

proptest! {
    #[test]
    fn resegment_takes_directions_and_lengths(seed_a in 0u64..50, seed_b in 50u64..100) {
        let spec = SkeletonSpec::humanoid();
        let (a, topo) = generate_dataset(&spec, 1, seed_a).unwrap();
        let (b, _) = generate_dataset(&spec, 1, seed_b).unwrap();
        let (ja, jb) = (&a[0].joints, &b[0].joints);
        let r = resegment_skeleton(ja, jb, &topo.joint_parents).unwrap();
        prop_assert!(dist(&r[0], &ja[0]) < 1e-6);
        for (j, p) in topo.joint_parents.iter().enumerate() {
            let Some(p) = *p else { continue };
            let len = |s: &[[f32; 3]]| dist(&s[j], &s[p]);
            prop_assert!((len(&r) - len(jb)).abs() < 1e-5);
            let dir = |s: &[[f32; 3]]| [0, 1, 2].map(|k| (s[j][k] - s[p][k]) as f64 / len(s));
            let (da, dr) = (dir(ja), dir(&r));
            prop_assert!((0..3).map(|k| da[k] * dr[k]).sum::<f64>() > 1.0 - 1e-5);
        }
        // identity when both inputs agree
        let same = resegment_skeleton(ja, ja, &topo.joint_parents).unwrap();
        prop_assert!(procrustes_align(&same, ja, false).unwrap().rms < 1e-5);
    }
}
