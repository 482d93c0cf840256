use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use meshdiff::diffusion::{NoiseSchedule, SdsWeighting};
use meshdiff::downstream::{
    deform_control_points, fit_2d_keypoints, generate, generate_pose_conditioned, guidance_warning, initial_noise,
    morph as morph_samples, CameraModel, DeformLossWeights, Keypoints2d, MorphEndpoints, OptimizeConfig,
    OptimizeResult,
};
use meshdiff::eval::{
    mmd_cov_from_matrix, one_nna_from_matrix, pooled_matrix, pose_errors, MetricReport, ShapeDistance,
};
use meshdiff::mesh::{bbox_diagonal, canonical_frame, load_obj, MeshTopology, Point, Upsampler};
use meshdiff::model::{template_tensor, DiffusionModel, ModelConfig, PosEmbedKind, TimeEmbedKind};
use meshdiff::numerics::Checkpoint;
use meshdiff::synthetic::{
    generate_range, list_meshes, load_split, parse_joints, parse_named_rows, prolongations, save_dataset,
    SkeletonSpec, COARSE_RINGS, COARSE_SEGMENTS,
};
use meshdiff::training::{
    resume, train as run_training, train_upsampler, RunOutput, TrainConfig, TrainState, TrainingData,
    UpsamplerTrainConfig,
};

use crate::artifacts::{
    config_echo_for, create_dir, embed_topology, load_noise, read_text, save_noise, write_text, Bundle,
};
use crate::settings::{self, banner, required};
use crate::CliError;

/// Validation bodies come from streams far past any training index.
const VAL_STREAM: usize = 1 << 32;

fn announce(text: &str) {
    print!("{text}");
    println!();
}

fn stem(i: usize) -> String {
    format!("{i:05}")
}

pub fn gen_data(s: &settings::GenData) -> Result<(), CliError> {
    let out = required(&s.out, "out")?;
    let seed = required(&s.seed, "seed")?;
    if s.samples == 0 || s.val == 0 {
        return Err(CliError::usage("--samples and --val must be at least 1"));
    }
    let b = banner("gen-data", s);
    announce(&b);
    let spec = SkeletonSpec::humanoid();
    let (train, topo) = generate_range(&spec, 0..s.samples, seed)?;
    let (val, _) = generate_range(&spec, VAL_STREAM..VAL_STREAM + s.val, seed)?;
    save_dataset(&out, &topo, &train, &val)?;
    write_text(&out.join("gen-data.config.toml"), &b)?;
    println!(
        "wrote {} training and {} validation bodies ({} joints, {} coarse / {} dense vertices) to {}",
        train.len(),
        val.len(),
        topo.n_joints(),
        topo.n_coarse,
        topo.n_dense,
        out.display()
    );
    Ok(())
}

/// Starts from the subdivision prolongations of the generator's tube layout.
fn upsampler_init(topo: &MeshTopology) -> Result<Upsampler, CliError> {
    let per_tube = COARSE_RINGS * COARSE_SEGMENTS;
    let mismatch = || CliError::data("dataset topology does not follow the generator's tube layout");
    if topo.n_coarse % per_tube != 0 {
        return Err(mismatch());
    }
    let (p1, p2) = prolongations(topo.n_coarse / per_tube)?;
    let up = Upsampler::from_prolongations(&p1, &p2)?;
    if up.n_in() != topo.n_coarse || up.n_out() != topo.n_dense {
        return Err(mismatch());
    }
    Ok(up)
}

pub fn train(s: &settings::Train) -> Result<(), CliError> {
    let data_dir = required(&s.data, "data")?;
    let out = required(&s.out, "out")?;
    let seed = required(&s.seed, "seed")?;
    let tc = TrainConfig {
        batch_size: s.batch_size,
        epochs: s.epochs,
        lr: s.lr,
        lr_drop_epoch: s.lr_drop_epoch,
        seed,
        checkpoint_every: s.checkpoint_every,
        vertex_weight: s.vertex_weight,
        joint_weight: s.joint_weight,
        ema_decay: s.ema_decay,
    };
    tc.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let pos_embed: PosEmbedKind = s.pos_embed.parse().map_err(|e: meshdiff::Error| CliError::usage(e.to_string()))?;
    let time_embed: TimeEmbedKind = s.time_embed.parse().map_err(|e: meshdiff::Error| CliError::usage(e.to_string()))?;
    if s.t_max < 2 {
        return Err(CliError::usage("--t-max must be at least 2"));
    }
    let b = banner("train", s);
    announce(&b);

    let topo = MeshTopology::load(data_dir.join("topology.txt"))?;
    let bodies = load_split(&data_dir, "train", &topo)?;
    if bodies.is_empty() {
        return Err(CliError::data(format!("{}: no training meshes", data_dir.join("train").display())));
    }
    let samples: Vec<_> = bodies.iter().map(|b| b.articulated(s.normals)).collect();
    let data = TrainingData::from_samples(&samples, s.normals)?;

    let coarse: Vec<Vec<Point>> = bodies.iter().map(|b| b.coarse.clone()).collect();
    let dense: Vec<Vec<Point>> = bodies.iter().map(|b| b.dense.clone()).collect();
    let up_cfg = UpsamplerTrainConfig {
        max_iters: s.upsampler_iters,
        ..UpsamplerTrainConfig::default()
    };
    let (up, rep) = train_upsampler(upsampler_init(&topo)?, &coarse, &dense, &up_cfg)?;
    println!(
        "upsampler: {} iterations, loss {:.6e} -> {:.6e}",
        rep.iters, rep.initial_loss, rep.final_loss
    );

    let mut state = match &s.resume {
        Some(p) => {
            let st = resume(p, &tc)?;
            println!("resuming {} at epoch {} (architecture taken from the checkpoint)", p.display(), st.epoch);
            st
        }
        None => {
            let mc = ModelConfig {
                n_layers: s.layers,
                hidden: s.hidden,
                n_heads: s.heads,
                n_vertices: topo.n_coarse,
                n_joints: topo.n_joints(),
                attr_channels: if s.normals { 3 } else { 0 },
                use_long_skip: s.long_skip,
                pos_embed,
                time_embed,
                mlp_ratio: s.mlp_ratio,
                time_features: s.time_features,
            };
            mc.validate().map_err(|e| CliError::usage(e.to_string()))?;
            let template =
                (pos_embed == PosEmbedKind::Template).then(|| template_tensor(&topo.rest_joints, &topo.rest_coarse));
            TrainState::new(DiffusionModel::new(mc, seed, template)?, &tc)
        }
    };
    println!("model: {} parameters", state.model.n_params());
    let schedule = NoiseSchedule::default_sigmoid(s.t_max)?;
    let mut run = RunOutput::new(&out);
    embed_topology(&mut run.extra, &topo);
    up.write_into(&mut run.extra);
    create_dir(&out)?;
    write_text(&out.join("train.config.toml"), &b)?;
    run_training(&mut state, &data, &schedule, &tc, Some(&run), |e| {
        println!("epoch {:4}  loss {:.6}  lr {:e}", e.epoch, e.loss, e.lr)
    })?;
    println!("checkpoint: {}", run.last_path().display());
    Ok(())
}

fn check_steps(steps: usize, schedule: &NoiseSchedule) -> Result<(), CliError> {
    if steps == 0 || steps > schedule.t_max() {
        return Err(CliError::usage(format!("--steps must lie in 1..={}", schedule.t_max())));
    }
    Ok(())
}

pub fn sample(s: &settings::Sample) -> Result<(), CliError> {
    let ckpt = required(&s.ckpt, "ckpt")?;
    let out = required(&s.out, "out")?;
    let seed = required(&s.seed, "seed")?;
    if s.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    match (s.cfg, &s.joints) {
        (Some(_), None) => return Err(CliError::usage("--cfg needs --joints")),
        (Some(g), _) if !(g >= 0.0 && g.is_finite()) => {
            return Err(CliError::usage(format!("--cfg must be finite and >= 0, got {g}")))
        }
        _ => {}
    }
    let b = banner("sample", s);
    announce(&b);
    if let Some(w) = s.cfg.and_then(guidance_warning) {
        eprintln!("warning: {w}");
    }
    let bundle = Bundle::load(&ckpt)?;
    check_steps(s.steps, &bundle.schedule)?;
    let n_v = bundle.topo.n_coarse;
    let samples = match &s.joints {
        Some(p) => {
            let joints = parse_joints(&read_text(p)?, &p.display().to_string(), &bundle.topo)?;
            let to_canonical = canonical_frame(&joints, &bundle.topo.landmarks)?;
            let canonical = to_canonical.apply_all(&joints);
            let back = to_canonical.inverse();
            let guidance = s.cfg.unwrap_or(0.0);
            generate_pose_conditioned(&bundle.model, &bundle.schedule, n_v, &canonical, guidance, s.steps, s.n, seed)?
                .iter()
                .map(|x| x.transformed(&back))
                .collect::<Vec<_>>()
        }
        None => generate(&bundle.model, &bundle.schedule, n_v, s.steps, s.n, seed)?,
    };
    create_dir(&out.join("coarse"))?;
    for (i, x) in samples.iter().enumerate() {
        let name = stem(i);
        bundle.save_body(
            &out.join(format!("{name}.obj")),
            Some(&out.join("coarse").join(format!("{name}.obj"))),
            x,
        )?;
        if s.joints.is_none() {
            save_noise(&out.join(format!("{name}.noise")), &initial_noise(&bundle.model, seed, i))?;
        }
    }
    bundle.topo.save(out.join("topology.txt"))?;
    write_text(&out.join("sample.config.toml"), &b)?;
    println!("wrote {} meshes to {}", samples.len(), out.display());
    Ok(())
}

fn parse_weights(text: &str) -> Result<Vec<f64>, CliError> {
    let w: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::usage(format!("--weights: cannot parse `{text}`")))?;
    if w.is_empty() || w.iter().any(|x| !x.is_finite()) {
        return Err(CliError::usage("--weights needs finite comma-separated numbers"));
    }
    Ok(w)
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e == ext)
}

pub fn morph(s: &settings::Morph) -> Result<(), CliError> {
    let ckpt = required(&s.ckpt, "ckpt")?;
    let a = required(&s.a, "a")?;
    let bb = required(&s.b, "b")?;
    let out = required(&s.out, "out")?;
    let weights = parse_weights(&s.weights)?;
    let inverted = match (has_ext(&a, "obj"), has_ext(&bb, "obj"), has_ext(&a, "noise"), has_ext(&bb, "noise")) {
        (true, true, _, _) => true,
        (_, _, true, true) => false,
        _ => return Err(CliError::usage("--a and --b must both be .noise files or both be .obj meshes")),
    };
    let b = banner("morph", s);
    announce(&b);
    let bundle = Bundle::load(&ckpt)?;
    check_steps(s.steps, &bundle.schedule)?;
    let ends = if inverted {
        let canonical = |p: &Path| -> Result<_, CliError> {
            let body = bundle.load_body(p)?;
            let f = canonical_frame(&body.joints, &bundle.topo.landmarks)?;
            Ok(body.transformed(&f))
        };
        MorphEndpoints::Inverted {
            a: canonical(&a)?,
            b: canonical(&bb)?,
            faces: bundle.topo.faces_coarse.clone(),
        }
    } else {
        MorphEndpoints::Given {
            a: load_noise(&a)?,
            b: load_noise(&bb)?,
        }
    };
    let seq = morph_samples(&bundle.model, &bundle.schedule, bundle.topo.n_coarse, s.steps, &ends, &weights)?;
    create_dir(&out.join("coarse"))?;
    let mut listing = String::from("index,weight\n");
    for (i, (x, w)) in seq.iter().zip(&weights).enumerate() {
        let name = stem(i);
        bundle.save_body(
            &out.join(format!("{name}.obj")),
            Some(&out.join("coarse").join(format!("{name}.obj"))),
            x,
        )?;
        let _ = writeln!(listing, "{i},{w}");
    }
    write_text(&out.join("weights.csv"), &listing)?;
    bundle.topo.save(out.join("topology.txt"))?;
    write_text(&out.join("morph.config.toml"), &b)?;
    println!("wrote {} meshes to {}", seq.len(), out.display());
    Ok(())
}

fn optimize_config(s: &settings::Optimize, t_max: usize) -> Result<OptimizeConfig, CliError> {
    let seed = required(&s.seed, "seed")?;
    let mut c = OptimizeConfig::new(t_max, seed);
    c.iters = s.iters;
    c.lr = s.lr;
    c.lr_final = s.lr_final;
    c.t_start = s.t_start.unwrap_or(c.t_start);
    c.t_end = s.t_end.unwrap_or(c.t_end);
    if !(s.sds_scale > 0.0 && s.sds_scale.is_finite()) {
        return Err(CliError::usage("--sds-scale must be positive"));
    }
    c.weighting = SdsWeighting::DataSpace(s.sds_scale);
    c.weights = DeformLossWeights {
        sds: s.w_sds,
        edge: s.w_edge,
        lap: s.w_lap,
        consist: s.w_consist,
        target: s.w_target,
    };
    c.weights.validate().map_err(|e| CliError::usage(e.to_string()))?;
    if c.iters == 0 {
        return Err(CliError::usage("--iters must be at least 1"));
    }
    if !(c.lr > 0.0 && c.lr_final > 0.0 && c.lr.is_finite() && c.lr_final.is_finite()) {
        return Err(CliError::usage("learning rates must be positive"));
    }
    for (flag, t) in [("t-start", c.t_start), ("t-end", c.t_end)] {
        if t == 0 || t > t_max {
            return Err(CliError::usage(format!("--{flag} must lie in 1..={t_max}")));
        }
    }
    Ok(c)
}

fn finish_optimize(
    s: &settings::Optimize,
    name: &str,
    banner_text: &str,
    bundle: &Bundle,
    res: &OptimizeResult,
    out: &Path,
) -> Result<(), CliError> {
    bundle.save_body(out, None, &res.sample)?;
    if let Some(r) = &s.report {
        write_text(r, &res.report())?;
    }
    write_text(&config_echo_for(out), banner_text)?;
    if let Some(last) = res.history.last() {
        println!(
            "{name}: {} iterations, final target loss {:.6e}, total {:.6e}",
            res.history.len(),
            last.target,
            last.total
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn common_paths(s: &settings::Optimize) -> Result<(PathBuf, PathBuf, PathBuf), CliError> {
    let ckpt = required(&s.ckpt, "ckpt")?;
    let init = required(&s.init, "init")?;
    let out = required(&s.out, "out")?;
    required(&s.seed, "seed")?;
    Ok((ckpt, init, out))
}

pub fn deform(s: &settings::Optimize) -> Result<(), CliError> {
    let (ckpt, init, out) = common_paths(s)?;
    let targets_path = required(&s.targets, "targets")?;
    if s.kp2d.is_some() || s.camera.is_some() {
        return Err(CliError::usage("deform takes --targets, not --kp2d/--camera"));
    }
    let b = banner("deform", s);
    announce(&b);
    let bundle = Bundle::load(&ckpt)?;
    let cfg = optimize_config(s, bundle.schedule.t_max())?;
    let body = bundle.load_body(&init)?;
    let origin = targets_path.display().to_string();
    let rows = parse_named_rows(&read_text(&targets_path)?, &origin, 3)?;
    if rows.is_empty() {
        return Err(CliError::data(format!("{origin}: no control targets")));
    }
    let mut ids = Vec::with_capacity(rows.len());
    let mut targets = Vec::with_capacity(rows.len());
    for (name, v) in &rows {
        let id = bundle
            .topo
            .joint_index(name)
            .ok_or_else(|| CliError::data(format!("{origin}: unknown joint `{name}`")))?;
        ids.push(id);
        targets.push([v[0] as f32, v[1] as f32, v[2] as f32]);
    }
    // optimize in the frame the model was trained in
    let to_canonical = canonical_frame(&body.joints, &bundle.topo.landmarks)?;
    let res = deform_control_points(
        &bundle.model,
        &bundle.schedule,
        &bundle.topo,
        &bundle.upsampler,
        &body.transformed(&to_canonical),
        &ids,
        &to_canonical.apply_all(&targets),
        &cfg,
    )?;
    let res = OptimizeResult {
        sample: res.sample.transformed(&to_canonical.inverse()),
        history: res.history,
    };
    finish_optimize(s, "deform", &b, &bundle, &res, &out)
}

fn parse_camera(path: &Path) -> Result<CameraModel, CliError> {
    let origin = path.display().to_string();
    let rows = parse_named_rows(&read_text(path)?, &origin, 1)?;
    let get = |key: &str| {
        rows.iter()
            .find(|(n, _)| n == key)
            .map(|(_, v)| v[0])
            .ok_or_else(|| CliError::data(format!("{origin}: missing `{key}`")))
    };
    let cam = CameraModel {
        scale: get("scale")?,
        tu: get("tu")?,
        tv: get("tv")?,
    };
    cam.validate()?;
    Ok(cam)
}

pub fn fit2d(s: &settings::Optimize) -> Result<(), CliError> {
    let (ckpt, init, out) = common_paths(s)?;
    let kp_path = required(&s.kp2d, "kp2d")?;
    let cam_path = required(&s.camera, "camera")?;
    if s.targets.is_some() {
        return Err(CliError::usage("fit2d takes --kp2d and --camera, not --targets"));
    }
    let b = banner("fit2d", s);
    announce(&b);
    let bundle = Bundle::load(&ckpt)?;
    let cfg = optimize_config(s, bundle.schedule.t_max())?;
    let body = bundle.load_body(&init)?;
    let camera = parse_camera(&cam_path)?;
    let origin = kp_path.display().to_string();
    let mut points = vec![None; bundle.topo.n_joints()];
    for (name, v) in parse_named_rows(&read_text(&kp_path)?, &origin, 2)? {
        let id = bundle
            .topo
            .joint_index(&name)
            .ok_or_else(|| CliError::data(format!("{origin}: unknown joint `{name}`")))?;
        points[id] = Some([v[0], v[1]]);
    }
    let kp = Keypoints2d { camera, points };
    let res = fit_2d_keypoints(&bundle.model, &bundle.schedule, &bundle.topo, &bundle.upsampler, &body, &kp, None, &cfg)?;
    finish_optimize(s, "fit2d", &b, &bundle, &res, &out)
}

/// Coarse vertices and (when present) joints of every mesh in `dir`. A
/// `coarse/` subdirectory with the same file names takes precedence.
struct ShapeSet {
    names: Vec<String>,
    coarse: Vec<Vec<Point>>,
    joints: Vec<Option<Vec<Point>>>,
}

fn load_set(dir: &Path, topo: &MeshTopology) -> Result<ShapeSet, CliError> {
    let files = list_meshes(dir)?;
    if files.is_empty() {
        return Err(CliError::data(format!("{}: no .obj meshes", dir.display())));
    }
    let mut set = ShapeSet {
        names: Vec::new(),
        coarse: Vec::new(),
        joints: Vec::new(),
    };
    for f in files {
        let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let side = dir.join("coarse").join(&name);
        let mesh = load_obj(if side.is_file() { &side } else { &f })?;
        let coarse = if mesh.vertices.len() == topo.n_coarse {
            mesh.vertices
        } else if mesh.vertices.len() == topo.n_dense {
            topo.downsample.apply(&mesh.vertices)?
        } else {
            return Err(CliError::data(format!(
                "{}: {} vertices, topology has {} coarse / {} dense",
                f.display(),
                mesh.vertices.len(),
                topo.n_coarse,
                topo.n_dense
            )));
        };
        let jpath = f.with_extension("joints");
        let joints = if jpath.is_file() {
            Some(parse_joints(&read_text(&jpath)?, &jpath.display().to_string(), topo)?)
        } else {
            None
        };
        set.names.push(name);
        set.coarse.push(coarse);
        set.joints.push(joints);
    }
    Ok(set)
}

fn find_topology(s: &settings::Eval, gen: &Path, reference: &Path) -> Result<PathBuf, CliError> {
    if let Some(p) = &s.topology {
        return Ok(p.clone());
    }
    let mut candidates = Vec::new();
    for d in [reference, gen] {
        candidates.push(d.join("topology.txt"));
        if let Some(parent) = d.parent() {
            candidates.push(parent.join("topology.txt"));
        }
    }
    candidates
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::data("no topology.txt next to the mesh sets; pass --topology"))
}

const METRICS: [&str; 8] = ["ra1nna", "1nna", "mmd", "cov", "chamfer", "mpjpe", "pa_mpjpe", "mpve"];

pub fn eval(s: &settings::Eval) -> Result<(), CliError> {
    let gen_dir = required(&s.gen, "gen")?;
    let ref_dir = required(&s.reference, "ref")?;
    let out = required(&s.out, "out")?;
    let dist: ShapeDistance = s.distance.parse().map_err(|e: meshdiff::Error| CliError::usage(e.to_string()))?;
    let metrics: Vec<&str> = s.metrics.split(',').map(str::trim).filter(|m| !m.is_empty()).collect();
    if metrics.is_empty() {
        return Err(CliError::usage("--metrics is empty"));
    }
    if let Some(bad) = metrics.iter().find(|m| !METRICS.contains(m)) {
        return Err(CliError::usage(format!("unknown metric `{bad}`; known: {}", METRICS.join(", "))));
    }
    let b = banner("eval", s);
    announce(&b);
    let topo = MeshTopology::load(find_topology(s, &gen_dir, &ref_dir)?)?;
    let gen = load_set(&gen_dir, &topo)?;
    let reference = load_set(&ref_dir, &topo)?;
    let diag = reference.coarse.iter().map(|v| bbox_diagonal(v)).sum::<f64>() / reference.coarse.len() as f64;
    let g = meshdiff::eval::normalize(&gen.coarse, diag)?;
    let r = meshdiff::eval::normalize(&reference.coarse, diag)?;
    let n_gen = g.len();
    let set_metric = metrics.iter().any(|m| ["ra1nna", "1nna", "mmd", "cov", "chamfer"].contains(m));
    if set_metric && (g.len() < 2 || r.len() < 2) {
        return Err(CliError::data("set metrics need at least two meshes per directory"));
    }

    let mut plain = None;
    let mut aligned = None;
    let mut chamfer_pool = None;
    let mut report = MetricReport::default();
    let suffix = dist.name();
    for m in &metrics {
        match *m {
            "ra1nna" => {
                let d = match &aligned {
                    Some(d) => d,
                    None => aligned.insert(pooled_matrix(&g, &r, dist, true)?),
                };
                report.push(format!("ra1nna_{suffix}"), one_nna_from_matrix(d, n_gen));
            }
            "1nna" | "mmd" | "cov" => {
                let d = match &plain {
                    Some(d) => d,
                    None => plain.insert(pooled_matrix(&g, &r, dist, false)?),
                };
                match *m {
                    "1nna" => report.push(format!("1nna_{suffix}"), one_nna_from_matrix(d, n_gen)),
                    _ => {
                        let block: Vec<Vec<f64>> = d[..n_gen].iter().map(|row| row[n_gen..].to_vec()).collect();
                        let mc = mmd_cov_from_matrix(&block);
                        if *m == "mmd" {
                            report.push(format!("mmd_{suffix}"), mc.mmd);
                        } else {
                            report.push(format!("cov_{suffix}"), mc.cov);
                        }
                    }
                }
            }
            "chamfer" => {
                let d = match (&chamfer_pool, dist) {
                    (Some(d), _) => d,
                    (None, ShapeDistance::Chamfer) if plain.is_some() => plain.as_ref().unwrap(),
                    (None, _) => chamfer_pool.insert(pooled_matrix(&g, &r, ShapeDistance::Chamfer, false)?),
                };
                let nearest = d[..n_gen]
                    .iter()
                    .map(|row| row[n_gen..].iter().copied().fold(f64::INFINITY, f64::min))
                    .sum::<f64>()
                    / n_gen as f64;
                report.push("chamfer", nearest);
            }
            _ => {
                let pe = paired_pose_errors(&gen, &reference, &g, &r, diag)?;
                let v = match *m {
                    "mpjpe" => pe.mpjpe,
                    "pa_mpjpe" => pe.pa_mpjpe,
                    _ => pe.mpve,
                };
                report.push(*m, v);
            }
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&out, &report.to_csv())?;
    write_text(&config_echo_for(&out), &b)?;
    print!("{}", report.to_table());
    println!("wrote {}", out.display());
    Ok(())
}

/// Means over same-named pairs, in units of the reference diagonal.
fn paired_pose_errors(
    gen: &ShapeSet,
    reference: &ShapeSet,
    g: &[Vec<Point>],
    r: &[Vec<Point>],
    diag: f64,
) -> Result<meshdiff::eval::PoseErrors, CliError> {
    if gen.names != reference.names {
        return Err(CliError::data("pose metrics need the same file names in both directories"));
    }
    let s = (1.0 / diag) as f32;
    let scale = |v: &[Point]| -> Vec<Point> { v.iter().map(|p| p.map(|c| c * s)).collect() };
    let mut acc = [0.0; 3];
    for i in 0..g.len() {
        let (Some(jg), Some(jr)) = (&gen.joints[i], &reference.joints[i]) else {
            return Err(CliError::data(format!("{}: pose metrics need .joints files", gen.names[i])));
        };
        let e = pose_errors(&scale(jg), &scale(jr), &g[i], &r[i])?;
        acc[0] += e.mpjpe;
        acc[1] += e.pa_mpjpe;
        acc[2] += e.mpve;
    }
    let n = g.len() as f64;
    Ok(meshdiff::eval::PoseErrors {
        mpjpe: acc[0] / n,
        pa_mpjpe: acc[1] / n,
        mpve: acc[2] / n,
    })
}

pub fn inspect(s: &settings::Inspect) -> Result<(), CliError> {
    let ckpt = required(&s.ckpt, "ckpt")?;
    let ck = Checkpoint::load(&ckpt)?;
    let mut text = String::new();
    for (k, v) in &ck.meta {
        let shown = if v.len() > 60 {
            format!("<{} bytes>", v.len())
        } else {
            v.clone()
        };
        let _ = writeln!(text, "meta {k} = {shown}");
    }
    let width = ck.tensors.keys().map(String::len).max().unwrap_or(4).max(4);
    let _ = writeln!(
        text,
        "{:<width$}  {:>12}  {:>9}  {:>12}  {:>12}  {:>12}  {:>12}",
        "name", "shape", "count", "mean", "std", "min", "max"
    );
    let mut total = 0usize;
    for (name, t) in &ck.tensors {
        let d = t.data();
        let n = d.len().max(1) as f64;
        let mean = d.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = d.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let min = d.iter().copied().fold(f32::INFINITY, f32::min);
        let max = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let shape: Vec<String> = t.shape().iter().map(|x| x.to_string()).collect();
        let shape = if shape.is_empty() { "scalar".to_string() } else { shape.join("x") };
        let _ = writeln!(
            text,
            "{name:<width$}  {shape:>12}  {:>9}  {mean:>12.4e}  {:>12.4e}  {min:>12.4e}  {max:>12.4e}",
            d.len(),
            var.sqrt()
        );
        total += d.len();
    }
    let _ = writeln!(text, "{} tensors, {total} values", ck.tensors.len());
    print!("{text}");
    Ok(())
}
