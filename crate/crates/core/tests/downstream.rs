use meshdiff::diffusion::{NoiseSchedule, SdsWeighting};
use meshdiff::downstream::{
    canonical_sds, deform_control_points, edge_loss_grad, fit_2d_keypoints, generate, generate_pose_conditioned,
    guidance_warning, initial_noise, laplacian_loss_grad, mesh_from_3d_keypoints, morph, morph_noises, refine, require_trained,
    CameraModel, DeformLossWeights, Keypoints2d, MorphEndpoints, OptimizeConfig, RefineConfig,
};
use meshdiff::eval::chamfer;
use meshdiff::mesh::{edge_lengths, ArticulatedSample, MeshTopology, Point, Similarity, Upsampler};
use meshdiff::model::{DiffusionModel, ModelConfig};
use meshdiff::numerics::Tensor;
use meshdiff::synthetic::{generate_dataset, prolongations, SkeletonSpec};
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (DiffusionModel, NoiseSchedule, MeshTopology, Upsampler, Vec<ArticulatedSample>) {
    let (bodies, topo) = generate_dataset(&SkeletonSpec::humanoid(), 4, 17).unwrap();
    let mut cfg = ModelConfig::new(topo.n_coarse, topo.n_joints());
    cfg.hidden = 16;
    cfg.n_layers = 1;
    let mut model = DiffusionModel::new(cfg, 2, None).unwrap();
    // untrained heads output zero; give them some signal
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in model.params.values_mut() {
        let noise = Tensor::randn(t.shape(), 0.02, &mut rng);
        t.axpy(1.0, &noise).unwrap();
    }
    let (p1, p2) = prolongations(6).unwrap();
    let up = Upsampler::from_prolongations(&p1, &p2).unwrap();
    let samples = bodies.iter().map(|b| b.articulated(false)).collect();
    (model, NoiseSchedule::default_sigmoid(1000).unwrap(), topo, up, samples)
}

#[test]
fn generation_is_seeded() {
    let (model, s, topo, _, _) = setup();
    let a = generate(&model, &s, topo.n_coarse, 3, 2, 5).unwrap();
    let b = generate(&model, &s, topo.n_coarse, 3, 2, 5).unwrap();
    let c = generate(&model, &s, topo.n_coarse, 3, 2, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a[0].coarse.len(), topo.n_coarse);
    assert!(require_trained(&model).is_err());
}

#[test]
fn zero_guidance_is_plain_conditioning() {
    let (model, s, topo, _, samples) = setup();
    let j = &samples[0].joints;
    let a = generate_pose_conditioned(&model, &s, topo.n_coarse, j, 0.0, 4, 2, 9).unwrap();
    let b = generate_pose_conditioned(&model, &s, topo.n_coarse, j, 0.0, 4, 2, 9).unwrap();
    assert_eq!(a, b);
    // joints stay clamped to the condition and seeds vary the body
    assert_eq!(&a[0].joints, j);
    assert_eq!(a[0].joints, a[1].joints);
    assert!(chamfer(&a[0].coarse, &a[1].coarse).unwrap() > 0.0);
    let guided = generate_pose_conditioned(&model, &s, topo.n_coarse, j, 1.0, 4, 1, 9).unwrap();
    assert_ne!(guided[0], a[0]);
    assert!(generate_pose_conditioned(&model, &s, topo.n_coarse, j, -1.0, 4, 1, 9).is_err());
    assert!(guidance_warning(3.5).is_some() && guidance_warning(1.0).is_none());
}

#[test]
fn morph_endpoints_reproduce_generations() {
    let (model, s, topo, _, _) = setup();
    let ends = MorphEndpoints::Noise { seed_a: 3, seed_b: 4 };
    let seq = morph(&model, &s, topo.n_coarse, 3, &ends, &[0.0, 0.5, 1.0, 1.3]).unwrap();
    let a = generate(&model, &s, topo.n_coarse, 3, 1, 3).unwrap();
    let b = generate(&model, &s, topo.n_coarse, 3, 1, 4).unwrap();
    assert_eq!(seq[0], a[0]);
    assert_eq!(seq[2], b[0]);
    assert_eq!(seq.len(), 4);
    let (za, zb) = morph_noises(&model, &s, topo.n_coarse, 3, &ends).unwrap();
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let mid = meshdiff::mesh::slerp(&za, &zb, 0.5).unwrap();
    let (na, nb) = (norm(&za), norm(&zb));
    assert!((norm(&mid) - 0.5 * (na + nb)).abs() < 0.01 * na.max(nb));

    let given = MorphEndpoints::Given {
        a: initial_noise(&model, 3, 0),
        b: initial_noise(&model, 4, 0),
    };
    assert_eq!(morph(&model, &s, topo.n_coarse, 3, &given, &[0.0, 0.5]).unwrap(), seq[..2]);
    let short = MorphEndpoints::Given { a: vec![0.0; 3], b: vec![0.0; 3] };
    assert!(morph(&model, &s, topo.n_coarse, 3, &short, &[0.5]).is_err());
}

#[test]
fn morph_by_inversion_runs() {
    let (model, s, topo, _, samples) = setup();
    let ends = MorphEndpoints::Inverted {
        a: samples[0].clone(),
        b: samples[1].clone(),
        faces: topo.faces_coarse.clone(),
    };
    let seq = morph(&model, &s, topo.n_coarse, 3, &ends, &[0.25]).unwrap();
    assert!(seq[0].coarse.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn refine_edge_cases() {
    let (model, s, topo, _, samples) = setup();
    let cfg = RefineConfig::new(1000, 0, 1);
    assert!(refine(&model, &s, &topo.faces_coarse, &samples[0], &cfg).unwrap().is_empty());
    let cfg = RefineConfig {
        weighting: SdsWeighting::Constant(0.0),
        ..RefineConfig::new(1000, 3, 1)
    };
    let out = refine(&model, &s, &topo.faces_coarse, &samples[0], &cfg).unwrap();
    assert_eq!(out.last().unwrap().coarse, samples[0].coarse);
    let bad = RefineConfig {
        t_start: 0,
        ..RefineConfig::new(1000, 3, 1)
    };
    assert!(refine(&model, &s, &topo.faces_coarse, &samples[0], &bad).is_err());
}

fn jitter(v: &[Point], seed: u64, amount: f32) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    v.iter().map(|p| p.map(|c| c + rng.random_range(-amount..amount))).collect()
}

#[test]
fn edge_and_laplacian_gradients_match_differences() {
    let (_, _, topo, _, samples) = setup();
    let v = jitter(&samples[0].coarse, 1, 0.05);
    let target = edge_lengths(&samples[1].coarse, &topo).unwrap();
    let lap_target: Vec<[f64; 3]> = topo
        .laplacian_coarse
        .apply(&samples[1].coarse)
        .unwrap()
        .iter()
        .map(|p| p.map(|c| c as f64))
        .collect();
    type LossFn<'a> = Box<dyn Fn(&[Point]) -> (f64, Vec<[f64; 3]>) + 'a>;
    let checks: Vec<(&str, LossFn)> = vec![
        ("edge", Box::new(|x: &[Point]| edge_loss_grad(x, &target, &topo).unwrap())),
        ("lap", Box::new(|x: &[Point]| laplacian_loss_grad(x, &lap_target, &topo).unwrap())),
    ];
    for (name, f) in checks {
        let (_, g) = f(&v);
        let mut worst = 0.0f64;
        let scale = g.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max);
        for i in (0..v.len()).step_by(7) {
            for c in 0..3 {
                let h = 1e-4f32;
                let mut vp = v.clone();
                vp[i][c] += h;
                let mut vm = v.clone();
                vm[i][c] -= h;
                // the perturbation actually applied in f32
                let dh = (vp[i][c] - vm[i][c]) as f64;
                let fd = (f(&vp).0 - f(&vm).0) / dh;
                let rel = (g[i][c] - fd).abs() / g[i][c].abs().max(fd.abs()).max(1e-3 * scale);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "{name}: {worst}");
    }
}

fn regressed(topo: &MeshTopology, up: &Upsampler, coarse: &[Point]) -> Vec<Point> {
    topo.joint_regressor.apply(&up.upsample(coarse).unwrap()).unwrap()
}

#[test]
fn deformation_fixed_point_without_sds() {
    let (model, s, topo, up, samples) = setup();
    let mut init = samples[0].clone();
    init.joints = regressed(&topo, &up, &init.coarse);
    let ids = topo.landmarks.end_effectors.clone();
    let targets: Vec<Point> = ids.iter().map(|&i| init.joints[i]).collect();
    let mut cfg = OptimizeConfig::new(1000, 0);
    cfg.iters = 20;
    cfg.weights = DeformLossWeights {
        sds: 0.0,
        edge: 0.0,
        lap: 0.0,
        ..DeformLossWeights::default()
    };
    let r = deform_control_points(&model, &s, &topo, &up, &init, &ids, &targets, &cfg).unwrap();
    for (a, b) in r.sample.coarse.iter().chain(&r.sample.joints).zip(init.coarse.iter().chain(&init.joints)) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-6);
        }
    }
    assert!(r.report().starts_with("[\n  {\"iter\": 0"));
    assert!(deform_control_points(&model, &s, &topo, &up, &init, &[99], &targets[..1], &cfg).is_err());
}

#[test]
fn control_term_alone_converges() {
    let (model, s, topo, up, samples) = setup();
    let init = samples[0].clone();
    let ids = topo.landmarks.end_effectors.clone();
    let targets: Vec<Point> = ids.iter().map(|&i| samples[1].joints[i]).collect();
    let mut cfg = OptimizeConfig::new(1000, 0);
    cfg.iters = 2000;
    cfg.weights = DeformLossWeights {
        sds: 0.0,
        edge: 0.0,
        lap: 0.0,
        consist: 0.0,
        target: 1.0,
    };
    let r = deform_control_points(&model, &s, &topo, &up, &init, &ids, &targets, &cfg).unwrap();
    for (&i, t) in ids.iter().zip(&targets) {
        for k in 0..3 {
            assert!((r.sample.joints[i][k] - t[k]).abs() < 1e-4, "{:?} vs {t:?}", r.sample.joints[i]);
        }
    }
}

fn camera() -> CameraModel {
    CameraModel {
        scale: 1.5,
        tu: 0.2,
        tv: -0.1,
    }
}

#[test]
fn fitting_projected_keypoints_is_a_fixed_point() {
    let (model, s, topo, up, samples) = setup();
    let mut init = samples[0].clone();
    init.joints = regressed(&topo, &up, &init.coarse);
    let kp = Keypoints2d {
        camera: camera(),
        points: init.joints.iter().map(|p| Some(camera().project(p))).collect(),
    };
    let mut cfg = OptimizeConfig::new(1000, 0);
    cfg.iters = 10;
    cfg.weights = DeformLossWeights {
        sds: 0.0,
        edge: 0.0,
        lap: 0.0,
        ..DeformLossWeights::default()
    };
    let r = fit_2d_keypoints(&model, &s, &topo, &up, &init, &kp, None, &cfg).unwrap();
    assert_eq!(r.history[0].target, 0.0);
    assert_eq!(r.sample.coarse, init.coarse);

    let mut few = kp.clone();
    for p in few.points.iter_mut().skip(3) {
        *p = None;
    }
    assert!(fit_2d_keypoints(&model, &s, &topo, &up, &init, &few, None, &cfg).is_err());
    let mut bad = kp;
    bad.camera.scale = 0.0;
    assert!(fit_2d_keypoints(&model, &s, &topo, &up, &init, &bad, None, &cfg).is_err());
}

fn rotation(seed: u64) -> Similarity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize();
    Similarity {
        rotation: Rotation3::new(axis * 1.1).into_inner(),
        translation: Vector3::new(0.4, 0.1, -0.3),
        scale: 1.0,
    }
}

#[test]
fn canonical_sds_is_frame_invariant() {
    let (model, s, topo, _, samples) = setup();
    let frame = meshdiff::mesh::canonical_frame(&samples[0].joints, &topo.landmarks).unwrap().inverse();
    let q = rotation(3);
    let moved = samples[0].transformed(&q);
    let w = SdsWeighting::DataSpace(1.0);
    let mut r1 = ChaCha8Rng::seed_from_u64(8);
    let mut r2 = ChaCha8Rng::seed_from_u64(8);
    let a = canonical_sds(&model, &s, &topo.faces_coarse, &samples[0].coarse, &samples[0].joints, &frame, 300, w, &mut r1).unwrap();
    let b = canonical_sds(&model, &s, &topo.faces_coarse, &moved.coarse, &moved.joints, &q.compose(&frame), 300, w, &mut r2).unwrap();
    for (x, y) in a.vertices.iter().chain(&a.joints).zip(b.vertices.iter().chain(&b.joints)) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn keypoint_meshes_follow_rigid_motion() {
    let (model, s, topo, up, samples) = setup();
    let q = rotation(5);
    let j = &samples[2].joints;
    let (dense, _) = mesh_from_3d_keypoints(&model, &s, &topo, &up, j, 1.0, 3, 4).unwrap();
    let (dense_q, _) = mesh_from_3d_keypoints(&model, &s, &topo, &up, &q.apply_all(j), 1.0, 3, 4).unwrap();
    let expect = q.apply_all(&dense);
    for (a, b) in dense_q.iter().zip(&expect) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-4, "{a:?} vs {b:?}");
        }
    }
    let again = mesh_from_3d_keypoints(&model, &s, &topo, &up, j, 1.0, 3, 4).unwrap().0;
    assert_eq!(again, dense);
}
