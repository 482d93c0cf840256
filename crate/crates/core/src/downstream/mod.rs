//! Sampling-based applications: generation, pose conditioning, morphing,
//! and score-distillation refinement, deformation and fitting.

mod optimize;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use optimize::{
    canonical_sds, deform_control_points, edge_loss_grad, fit_2d_keypoints, laplacian_loss_grad, refine,
    CameraModel, DeformLossWeights, Keypoints2d, OptimizeConfig, OptimizeResult, RefineConfig, StepLosses,
};

use crate::diffusion::{ddim_invert, ddim_sample, gaussian, NoiseSchedule, SampleMode, SamplerConfig, VPredictor};
use crate::error::{Error, Result};
use crate::mesh::{canonical_frame, vertex_normals, ArticulatedSample, MeshTopology, Point, Upsampler};
use crate::model::DiffusionModel;

/// Above this guidance scale samples tend to distort.
pub const GUIDANCE_WARN: f64 = 3.0;

pub fn guidance_warning(s_g: f64) -> Option<String> {
    (s_g > GUIDANCE_WARN).then(|| format!("guidance scale {s_g} > {GUIDANCE_WARN} often distorts meshes"))
}

/// Rejects models that never went through training.
pub fn require_trained(model: &DiffusionModel) -> Result<()> {
    if model.trained {
        Ok(())
    } else {
        Err(Error::invalid("model weights are untrained; train first"))
    }
}

/// RNG for item `index` of a seeded batch.
pub fn stream_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Channels per vertex token implied by a flattened vertex block.
fn channels<P: VPredictor + ?Sized>(model: &P, n_vertices: usize) -> Result<usize> {
    let c = model.vertex_len() / n_vertices.max(1);
    if c * n_vertices != model.vertex_len() || !(c == 3 || c == 6) {
        return Err(Error::invalid("vertex block is neither xyz nor xyz+normal per vertex"));
    }
    Ok(c)
}

/// Flattens coarse vertices (plus normals from `faces` when `c == 6`).
pub fn vertex_block(coarse: &[Point], c: usize, faces: &[[usize; 3]]) -> Vec<f32> {
    if c == 3 {
        return coarse.iter().flatten().copied().collect();
    }
    let normals = vertex_normals(coarse, faces);
    coarse
        .iter()
        .zip(&normals)
        .flat_map(|(p, n)| p.iter().chain(n).copied())
        .collect()
}

fn unit(n: Point) -> Point {
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 1e-12 {
        n.map(|v| v / len)
    } else {
        [0.0, 1.0, 0.0]
    }
}

/// Splits model outputs into a sample.
pub fn unpack(x: &[f32], y: &[f32], c: usize) -> ArticulatedSample {
    let coarse = x.chunks(c).map(|v| [v[0], v[1], v[2]]).collect();
    let normals = (c == 6).then(|| x.chunks(c).map(|v| unit([v[3], v[4], v[5]])).collect());
    ArticulatedSample {
        coarse,
        joints: y.chunks(3).map(|v| [v[0], v[1], v[2]]).collect(),
        normals,
    }
}

fn flat(points: &[Point]) -> Vec<f32> {
    points.iter().flatten().copied().collect()
}

/// Starting noise `[x_T, y_T]` of sample `index` in [`generate`].
pub fn initial_noise<P: VPredictor + ?Sized>(model: &P, seed: u64, index: usize) -> Vec<f32> {
    let mut rng = stream_rng(seed, index);
    let mut z = gaussian(model.vertex_len(), &mut rng);
    z.extend(gaussian(model.joint_len(), &mut rng));
    z
}

/// `n` samples denoised jointly from Gaussian noise. Sample `i` draws its
/// vertex then joint noise from stream `i` of `seed`.
pub fn generate<P: VPredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    n_vertices: usize,
    steps: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<ArticulatedSample>> {
    let c = channels(model, n_vertices)?;
    let cfg = SamplerConfig::new(schedule.t_max(), steps, SampleMode::Joint, 0.0, seed)?;
    (0..n)
        .map(|i| {
            let z = initial_noise(model, seed, i);
            let (x_t, y_t) = z.split_at(model.vertex_len());
            let (x, y) = ddim_sample(model, schedule, &cfg, x_t, y_t, y_t)?;
            Ok(unpack(&x, &y, c))
        })
        .collect()
}

/// Bodies for fixed canonical joints; different seeds vary the shape.
/// Sample `i` draws vertex noise, then the unconditional-branch joint noise,
/// from stream `i` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn generate_pose_conditioned<P: VPredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    n_vertices: usize,
    joints: &[Point],
    guidance: f64,
    steps: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<ArticulatedSample>> {
    let c = channels(model, n_vertices)?;
    let y0 = flat(joints);
    if y0.len() != model.joint_len() {
        return Err(Error::invalid(format!(
            "condition has {} joints, model expects {}",
            joints.len(),
            model.joint_len() / 3
        )));
    }
    let cfg = SamplerConfig::new(schedule.t_max(), steps, SampleMode::ConditionalOnJoints, guidance, seed)?;
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let x_t = gaussian(model.vertex_len(), &mut rng);
            let null_y = gaussian(model.joint_len(), &mut rng);
            let (x, y) = ddim_sample(model, schedule, &cfg, &x_t, &y0, &null_y)?;
            Ok(unpack(&x, &y, c))
        })
        .collect()
}

/// Where the two morph endpoints live in noise space.
#[derive(Clone, Debug, PartialEq)]
pub enum MorphEndpoints {
    /// Fresh Gaussian draws from stream 0 of each seed.
    Noise { seed_a: u64, seed_b: u64 },
    /// Explicit flattened noises, e.g. the starting points of two samples.
    Given { a: Vec<f32>, b: Vec<f32> },
    /// Deterministic DDIM inversion of two existing samples.
    Inverted {
        a: ArticulatedSample,
        b: ArticulatedSample,
        faces: Vec<[usize; 3]>,
    },
}

/// Endpoint noises `[x_T, y_T]` flattened together.
pub fn morph_noises<P: VPredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    n_vertices: usize,
    steps: usize,
    endpoints: &MorphEndpoints,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let (nx, ny) = (model.vertex_len(), model.joint_len());
    match endpoints {
        MorphEndpoints::Noise { seed_a, seed_b } => Ok((initial_noise(model, *seed_a, 0), initial_noise(model, *seed_b, 0))),
        MorphEndpoints::Given { a, b } => {
            if a.len() != nx + ny || b.len() != nx + ny {
                return Err(Error::invalid(format!(
                    "morph endpoints need {} values, got {} and {}",
                    nx + ny,
                    a.len(),
                    b.len()
                )));
            }
            Ok((a.clone(), b.clone()))
        }
        MorphEndpoints::Inverted { a, b, faces } => {
            let c = channels(model, n_vertices)?;
            let times = crate::diffusion::ddim_subsequence(schedule.t_max(), steps)?;
            let invert = |s: &ArticulatedSample| -> Result<Vec<f32>> {
                let (mut x, y) = ddim_invert(model, schedule, &times, &vertex_block(&s.coarse, c, faces), &flat(&s.joints))?;
                x.extend(y);
                Ok(x)
            };
            Ok((invert(a)?, invert(b)?))
        }
    }
}

/// One generation per weight from `SLERP(z_a, z_b, w)` over the whole
/// flattened noise; weights outside `[0, 1]` extrapolate.
pub fn morph<P: VPredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    n_vertices: usize,
    steps: usize,
    endpoints: &MorphEndpoints,
    weights: &[f64],
) -> Result<Vec<ArticulatedSample>> {
    let c = channels(model, n_vertices)?;
    let (za, zb) = morph_noises(model, schedule, n_vertices, steps, endpoints)?;
    let cfg = SamplerConfig::new(schedule.t_max(), steps, SampleMode::Joint, 0.0, 0)?;
    let nx = model.vertex_len();
    weights
        .iter()
        .map(|&w| {
            let z = crate::mesh::slerp(&za, &zb, w)?;
            let (x, y) = ddim_sample(model, schedule, &cfg, &z[..nx], &z[nx..], &z[nx..])?;
            Ok(unpack(&x, &y, c))
        })
        .collect()
}

/// Dense mesh for joints given in any rigid frame: canonicalize, generate
/// conditioned on them, upsample, and move back.
#[allow(clippy::too_many_arguments)]
pub fn mesh_from_3d_keypoints<P: VPredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    topo: &MeshTopology,
    upsampler: &Upsampler,
    joints: &[Point],
    guidance: f64,
    steps: usize,
    seed: u64,
) -> Result<(Vec<Point>, ArticulatedSample)> {
    let to_canonical = canonical_frame(joints, &topo.landmarks)?;
    let canonical = to_canonical.apply_all(joints);
    let sample = generate_pose_conditioned(model, schedule, topo.n_coarse, &canonical, guidance, steps, 1, seed)?
        .remove(0);
    let back = to_canonical.inverse();
    let dense = back.apply_all(&upsampler.upsample(&sample.coarse)?);
    Ok((dense, sample.transformed(&back)))
}
