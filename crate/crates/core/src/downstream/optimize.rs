use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use super::{channels, flat, stream_rng, vertex_block};
use crate::diffusion::{sds_gradient, NoiseSchedule, SdsCondition, SdsGradient, SdsWeighting, VPredictor};
use crate::error::{Error, Result};
use crate::mesh::{edge_lengths, ArticulatedSample, MeshTopology, Point, Similarity, Upsampler};
use crate::numerics::{Adam, Tensor};

fn v3(p: &Point) -> [f64; 3] {
    p.map(|c| c as f64)
}

/// `Σ_e (|v_a − v_b| − target_e)² / E` and its gradient over vertices.
pub fn edge_loss_grad(v: &[Point], target: &[f64], topo: &MeshTopology) -> Result<(f64, Vec<[f64; 3]>)> {
    let e = edge_lengths(v, topo)?;
    if target.len() != e.len() {
        return Err(Error::invalid("edge targets do not match the edge list"));
    }
    let n_e = e.len().max(1) as f64;
    let mut grad = vec![[0.0; 3]; v.len()];
    let mut loss = 0.0;
    for (k, &[a, b]) in topo.edges_coarse.iter().enumerate() {
        let r = e[k] - target[k];
        loss += r * r;
        if e[k] < 1e-12 {
            continue;
        }
        let (pa, pb) = (v3(&v[a]), v3(&v[b]));
        for c in 0..3 {
            let g = 2.0 * r * (pa[c] - pb[c]) / e[k] / n_e;
            grad[a][c] += g;
            grad[b][c] -= g;
        }
    }
    Ok((loss / n_e, grad))
}

/// `Σ_i |(L·v)_i − target_i|² / N` and its gradient `2·Lᵀ(L·v − target)/N`.
pub fn laplacian_loss_grad(v: &[Point], target: &[[f64; 3]], topo: &MeshTopology) -> Result<(f64, Vec<[f64; 3]>)> {
    let l = &topo.laplacian_coarse;
    if v.len() != l.cols() || target.len() != l.rows() {
        return Err(Error::invalid("Laplacian loss inputs do not match the mesh"));
    }
    let n = v.len() as f64;
    let mut resid = vec![[0.0; 3]; l.rows()];
    let mut loss = 0.0;
    for (i, r) in resid.iter_mut().enumerate() {
        let mut d = [0.0; 3];
        for (j, w) in l.row(i) {
            let p = v3(&v[j]);
            for c in 0..3 {
                d[c] += w * p[c];
            }
        }
        for c in 0..3 {
            r[c] = d[c] - target[i][c];
            loss += r[c] * r[c];
        }
    }
    let scaled: Vec<[f64; 3]> = resid.iter().map(|r| r.map(|x| 2.0 * x / n)).collect();
    Ok((loss / n, l.apply_transpose(&scaled)?))
}

fn laplacian_f64(v: &[[f64; 3]], topo: &MeshTopology) -> Vec<[f64; 3]> {
    let l = &topo.laplacian_coarse;
    (0..l.rows())
        .map(|i| {
            let mut d = [0.0; 3];
            for (j, w) in l.row(i) {
                for c in 0..3 {
                    d[c] += w * v[j][c];
                }
            }
            d
        })
        .collect()
}

/// Score-distillation gradient for a world-space body, evaluated in the
/// canonical frame `frame⁻¹(X)`; `frame` maps canonical to world. Returns
/// the canonical-frame gradient.
#[allow(clippy::too_many_arguments)]
pub fn canonical_sds<P: VPredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    faces: &[[usize; 3]],
    coarse: &[Point],
    joints: &[Point],
    frame: &Similarity,
    t: usize,
    weighting: SdsWeighting,
    rng: &mut R,
) -> Result<SdsGradient> {
    let inv = frame.inverse();
    let c = channels(model, coarse.len())?;
    let x = vertex_block(&inv.apply_all(coarse), c, faces);
    let y = flat(&inv.apply_all(joints));
    sds_gradient(model, schedule, &x, &y, SdsCondition::Joint, t, weighting, rng)
}

/// Maps a canonical gradient block of `c` channels per vertex to world xyz.
fn to_world(g: &[f32], c: usize, frame: &Similarity) -> Vec<[f64; 3]> {
    g.chunks(c)
        .map(|v| {
            let w = frame.scale * frame.rotation * nalgebra::Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64);
            [w.x, w.y, w.z]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    pub steps: usize,
    pub t_start: usize,
    pub t_end: usize,
    pub weighting: SdsWeighting,
    pub seed: u64,
}

impl RefineConfig {
    /// Starts at `T/20` and moves 30% of the way to each denoised estimate;
    /// perturbations of a few percent of the body size are already gone at
    /// that noise level, and larger times or full steps trade the residual
    /// for sampling noise.
    pub fn new(t_max: usize, steps: usize, seed: u64) -> Self {
        Self {
            steps,
            t_start: (t_max / 20).max(1),
            t_end: 1,
            weighting: SdsWeighting::DataSpace(0.3),
            seed,
        }
    }
}

/// Linear integer ramp from `a` to `b` over `n` points.
fn ramp(a: usize, b: usize, n: usize, i: usize) -> usize {
    if n <= 1 {
        return a;
    }
    let f = i as f64 / (n - 1) as f64;
    (a as f64 + (b as f64 - a as f64) * f).round() as usize
}

fn check_times(a: usize, b: usize, t_max: usize) -> Result<()> {
    if a == 0 || b == 0 || a > t_max || b > t_max {
        return Err(Error::invalid(format!("SDS times must lie in 1..={t_max}")));
    }
    Ok(())
}

/// Explicit descent `X ← X − ω(t)(ε̂ − ε)` over both streams with `t`
/// decreasing; returns every iterate after the input.
pub fn refine<P: VPredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    faces: &[[usize; 3]],
    start: &ArticulatedSample,
    cfg: &RefineConfig,
) -> Result<Vec<ArticulatedSample>> {
    check_times(cfg.t_start, cfg.t_end, schedule.t_max())?;
    let mut rng = stream_rng(cfg.seed, 0);
    let mut cur = ArticulatedSample {
        coarse: start.coarse.clone(),
        joints: start.joints.clone(),
        normals: None,
    };
    let c = channels(model, cur.coarse.len())?;
    let mut out = Vec::with_capacity(cfg.steps);
    for l in 0..cfg.steps {
        let t = ramp(cfg.t_start, cfg.t_end, cfg.steps, l);
        let x = vertex_block(&cur.coarse, c, faces);
        let y = flat(&cur.joints);
        let g = sds_gradient(model, schedule, &x, &y, SdsCondition::Joint, t, cfg.weighting, &mut rng)?;
        for (p, gv) in cur.coarse.iter_mut().zip(g.vertices.chunks(c)) {
            for k in 0..3 {
                p[k] -= gv[k];
            }
        }
        for (p, gy) in cur.joints.iter_mut().zip(g.joints.chunks(3)) {
            for k in 0..3 {
                p[k] -= gy[k];
            }
        }
        if cur.coarse.iter().chain(&cur.joints).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("refinement iterate at t={t}")));
        }
        out.push(cur.clone());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformLossWeights {
    pub sds: f64,
    pub edge: f64,
    pub lap: f64,
    pub consist: f64,
    /// control points, or 2D keypoints when fitting
    pub target: f64,
}

impl Default for DeformLossWeights {
    fn default() -> Self {
        Self {
            sds: 1.0,
            edge: 1.0,
            lap: 1.0,
            consist: 1.0,
            target: 10.0,
        }
    }
}

impl DeformLossWeights {
    /// Only the direct SDS and target terms.
    pub fn sds_and_target(&self) -> Self {
        Self {
            edge: 0.0,
            lap: 0.0,
            consist: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.sds, self.edge, self.lap, self.consist, self.target];
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }

    fn uses_sds(&self) -> bool {
        self.sds > 0.0 || self.edge > 0.0 || self.lap > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeConfig {
    pub iters: usize,
    pub lr: f64,
    /// Rate reached at the last iteration, linearly from `lr`.
    pub lr_final: f64,
    pub t_start: usize,
    pub t_end: usize,
    pub weighting: SdsWeighting,
    pub weights: DeformLossWeights,
    pub seed: u64,
}

impl OptimizeConfig {
    pub fn new(t_max: usize, seed: u64) -> Self {
        Self {
            iters: 200,
            lr: 1e-2,
            lr_final: 1e-3,
            t_start: t_max / 2,
            t_end: 1,
            weighting: SdsWeighting::DataSpace(1.0),
            weights: DeformLossWeights::default(),
            seed,
        }
    }
}

/// Weak-perspective camera: `(u, v) = s·(x, y) + (t_u, t_v)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub scale: f64,
    pub tu: f64,
    pub tv: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) || !self.tu.is_finite() || !self.tv.is_finite() {
            return Err(Error::invalid("camera scale must be positive and parameters finite"));
        }
        Ok(())
    }

    pub fn project(&self, p: &Point) -> [f64; 2] {
        [self.scale * p[0] as f64 + self.tu, self.scale * p[1] as f64 + self.tv]
    }
}

/// Per-joint image keypoints; `None` marks an invisible joint.
#[derive(Clone, Debug, PartialEq)]
pub struct Keypoints2d {
    pub camera: CameraModel,
    pub points: Vec<Option<[f64; 2]>>,
}

impl Keypoints2d {
    pub fn visible(&self) -> usize {
        self.points.iter().filter(|p| p.is_some()).count()
    }
}

enum Target<'a> {
    Control { ids: &'a [usize], targets: &'a [Point] },
    Image(&'a Keypoints2d),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub iter: usize,
    pub t: usize,
    pub sds: f64,
    pub edge: f64,
    pub lap: f64,
    pub consist: f64,
    pub target: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeResult {
    pub sample: ArticulatedSample,
    pub history: Vec<StepLosses>,
}

impl OptimizeResult {
    /// One `{...}` record per iteration.
    pub fn report(&self) -> String {
        let mut s = String::from("[\n");
        for (i, h) in self.history.iter().enumerate() {
            let sep = if i + 1 == self.history.len() { "" } else { "," };
            let _ = writeln!(
                s,
                "  {{\"iter\": {}, \"t\": {}, \"sds\": {:e}, \"edge\": {:e}, \"lap\": {:e}, \"consist\": {:e}, \"target\": {:e}, \"total\": {:e}}}{sep}",
                h.iter, h.t, h.sds, h.edge, h.lap, h.consist, h.target, h.total
            );
        }
        s.push(']');
        s.push('\n');
        s
    }
}

struct Problem<'a, P: ?Sized> {
    model: &'a P,
    schedule: &'a NoiseSchedule,
    topo: &'a MeshTopology,
    upsampler: &'a Upsampler,
    frame: Similarity,
    target: Target<'a>,
}

fn add_into(acc: &mut [[f64; 3]], g: &[[f64; 3]], w: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        for c in 0..3 {
            a[c] += w * b[c];
        }
    }
}

fn to_points(t: &Tensor) -> Vec<Point> {
    t.data().chunks(3).map(|v| [v[0], v[1], v[2]]).collect()
}

fn to_tensor(p: &[Point]) -> Tensor {
    Tensor::new(&[p.len(), 3], flat(p)).expect("point tensor")
}

fn grad_tensor(g: &[[f64; 3]]) -> Tensor {
    Tensor::new(&[g.len(), 3], g.iter().flatten().map(|&x| x as f32).collect()).expect("gradient tensor")
}

impl<P: VPredictor + ?Sized> Problem<'_, P> {
    fn run(&self, init: &ArticulatedSample, cfg: &OptimizeConfig) -> Result<OptimizeResult> {
        let t_max = self.schedule.t_max();
        check_times(cfg.t_start, cfg.t_end, t_max)?;
        cfg.weights.validate()?;
        if !(cfg.lr > 0.0 && cfg.lr.is_finite() && cfg.lr_final > 0.0 && cfg.lr_final.is_finite()) {
            return Err(Error::invalid("optimizer learning rate must be positive"));
        }
        let topo = self.topo;
        if init.coarse.len() != topo.n_coarse || init.joints.len() != topo.n_joints() {
            return Err(Error::invalid("initial body does not match the topology"));
        }
        let c = channels(self.model, topo.n_coarse)?;
        let w = cfg.weights;
        let mut rng = stream_rng(cfg.seed, 0);
        let mut params: BTreeMap<String, Tensor> = [
            ("v".to_string(), to_tensor(&init.coarse)),
            ("j".to_string(), to_tensor(&init.joints)),
        ]
        .into_iter()
        .collect();
        let mut adam = Adam::new(cfg.lr);
        let mut history = Vec::with_capacity(cfg.iters);
        let n = topo.n_coarse as f64;
        let n_j = topo.n_joints() as f64;
        for it in 0..cfg.iters {
            let t = ramp(cfg.t_start, cfg.t_end, cfg.iters, it);
            let f = if cfg.iters > 1 { it as f64 / (cfg.iters - 1) as f64 } else { 0.0 };
            adam.lr = cfg.lr + (cfg.lr_final - cfg.lr) * f;
            let v = to_points(&params["v"]);
            let j = to_points(&params["j"]);
            let mut gv = vec![[0.0; 3]; v.len()];
            let mut gj = vec![[0.0; 3]; j.len()];
            let mut l = StepLosses {
                iter: it,
                t,
                sds: 0.0,
                edge: 0.0,
                lap: 0.0,
                consist: 0.0,
                target: 0.0,
                total: 0.0,
            };

            if w.uses_sds() {
                let g = canonical_sds(
                    self.model,
                    self.schedule,
                    &topo.faces_coarse,
                    &v,
                    &j,
                    &self.frame,
                    t,
                    cfg.weighting,
                    &mut rng,
                )?;
                let g_world = to_world(&g.vertices, c, &self.frame);
                // SDS targets v_sds = v − g, held fixed for this step
                let v_sds: Vec<[f64; 3]> = v
                    .iter()
                    .zip(&g_world)
                    .map(|(p, d)| [0, 1, 2].map(|k| p[k] as f64 - d[k]))
                    .collect();
                l.sds = g_world.iter().flatten().map(|x| x * x).sum::<f64>() / n;
                add_into(&mut gv, &g_world, w.sds * 2.0 / n);
                if w.edge > 0.0 {
                    let vs: Vec<Point> = v_sds.iter().map(|p| p.map(|x| x as f32)).collect();
                    let target = edge_lengths(&vs, topo)?;
                    let (le, ge) = edge_loss_grad(&v, &target, topo)?;
                    l.edge = le;
                    add_into(&mut gv, &ge, w.edge);
                }
                if w.lap > 0.0 {
                    let target = laplacian_f64(&v_sds, topo);
                    let (ll, gl) = laplacian_loss_grad(&v, &target, topo)?;
                    l.lap = ll;
                    add_into(&mut gv, &gl, w.lap);
                }
            }

            if w.consist > 0.0 {
                let dense = self.upsampler.upsample(&v)?;
                let reg = topo.joint_regressor.apply(&dense)?;
                let r: Vec<[f64; 3]> = j
                    .iter()
                    .zip(&reg)
                    .map(|(a, b)| [0, 1, 2].map(|k| a[k] as f64 - b[k] as f64))
                    .collect();
                l.consist = r.iter().flatten().map(|x| x * x).sum::<f64>() / n_j;
                let dr: Vec<[f64; 3]> = r.iter().map(|x| x.map(|e| 2.0 * e / n_j)).collect();
                add_into(&mut gj, &dr, w.consist);
                let back = self.upsampler.backprop(&topo.joint_regressor.apply_transpose(&dr)?)?;
                add_into(&mut gv, &back, -w.consist);
            }

            match &self.target {
                Target::Control { ids, targets } => {
                    let k = ids.len() as f64;
                    for (&id, tgt) in ids.iter().zip(targets.iter()) {
                        for c in 0..3 {
                            let r = j[id][c] as f64 - tgt[c] as f64;
                            l.target += r * r / k;
                            gj[id][c] += w.target * 2.0 * r / k;
                        }
                    }
                }
                Target::Image(kp) => {
                    let k = kp.visible() as f64;
                    let s = kp.camera.scale;
                    for (id, obs) in kp.points.iter().enumerate() {
                        let Some(obs) = obs else { continue };
                        let proj = kp.camera.project(&j[id]);
                        for c in 0..2 {
                            let r = proj[c] - obs[c];
                            l.target += r * r / k;
                            gj[id][c] += w.target * 2.0 * s * r / k;
                        }
                    }
                }
            }
            l.total = w.sds * l.sds + w.edge * l.edge + w.lap * l.lap + w.consist * l.consist + w.target * l.target;
            if !l.total.is_finite() {
                return Err(Error::NonFinite(format!("deformation loss at iteration {it}")));
            }
            history.push(l);
            let grads: BTreeMap<String, Tensor> =
                [("v".to_string(), grad_tensor(&gv)), ("j".to_string(), grad_tensor(&gj))]
                    .into_iter()
                    .collect();
            adam.update(&mut params, &grads)?;
        }
        Ok(OptimizeResult {
            sample: ArticulatedSample {
                coarse: to_points(&params["v"]),
                joints: to_points(&params["j"]),
                normals: None,
            },
            history,
        })
    }
}

/// Moves the body so that joints `ids` reach `targets`, with SDS keeping it
/// plausible.
#[allow(clippy::too_many_arguments)]
pub fn deform_control_points<P: VPredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    topo: &MeshTopology,
    upsampler: &Upsampler,
    init: &ArticulatedSample,
    ids: &[usize],
    targets: &[Point],
    cfg: &OptimizeConfig,
) -> Result<OptimizeResult> {
    if ids.len() != targets.len() || ids.is_empty() {
        return Err(Error::invalid("need one target per control joint, and at least one"));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= topo.n_joints()) {
        return Err(Error::invalid(format!("control id {bad} is not a joint")));
    }
    Problem {
        model,
        schedule,
        topo,
        upsampler,
        frame: Similarity::identity(),
        target: Target::Control { ids, targets },
    }
    .run(init, cfg)
}

/// Fits the body to 2D keypoints. `frame` maps canonical to world
/// coordinates; by default it comes from the initial joints.
#[allow(clippy::too_many_arguments)]
pub fn fit_2d_keypoints<P: VPredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    topo: &MeshTopology,
    upsampler: &Upsampler,
    init: &ArticulatedSample,
    keypoints: &Keypoints2d,
    frame: Option<Similarity>,
    cfg: &OptimizeConfig,
) -> Result<OptimizeResult> {
    keypoints.camera.validate()?;
    if keypoints.points.len() != topo.n_joints() {
        return Err(Error::invalid("need one keypoint slot per joint"));
    }
    if keypoints.visible() < 4 {
        return Err(Error::invalid(format!(
            "2D fitting needs at least 4 visible keypoints, got {}",
            keypoints.visible()
        )));
    }
    let frame = match frame {
        Some(f) => f,
        None => crate::mesh::canonical_frame(&init.joints, &topo.landmarks)?.inverse(),
    };
    Problem {
        model,
        schedule,
        topo,
        upsampler,
        frame,
        target: Target::Image(keypoints),
    }
    .run(init, cfg)
}
