//! Noise schedule, forward process, v-parameterization, DDIM sampling,
//! classifier-free guidance and score distillation.

mod sampler;
mod schedule;
mod sds;

use rand::Rng;
use rand_distr::StandardNormal;

pub use sampler::{ddim_invert, ddim_sample, SampleMode, SamplerConfig, VPredictor};
pub use schedule::{ddim_subsequence, NoiseSchedule};
pub use sds::{sds_gradient, SdsCondition, SdsGradient, SdsWeighting};

use crate::error::{Error, Result};

pub fn gaussian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn same_len(op: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        })
    }
}

/// `c₁·a + c₂·b`, computed in f64 per element.
fn combine(a: &[f32], ca: f64, b: &[f32], cb: f64) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32)
        .collect()
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`
pub fn q_sample(x0: &[f32], eps: &[f32], t: usize, s: &NoiseSchedule) -> Result<Vec<f32>> {
    same_len("q_sample", x0, eps)?;
    let (a, b) = s.coefficients(t);
    Ok(combine(x0, a, eps, b))
}

/// `v = √ᾱ_t·ε − √(1−ᾱ_t)·x₀`
pub fn v_target(x0: &[f32], eps: &[f32], t: usize, s: &NoiseSchedule) -> Result<Vec<f32>> {
    same_len("v_target", x0, eps)?;
    let (a, b) = s.coefficients(t);
    Ok(combine(eps, a, x0, -b))
}

/// `x₀ = √ᾱ_t·x_t − √(1−ᾱ_t)·v`
pub fn x0_from_v(x_t: &[f32], v: &[f32], t: usize, s: &NoiseSchedule) -> Result<Vec<f32>> {
    same_len("x0_from_v", x_t, v)?;
    let (a, b) = s.coefficients(t);
    Ok(combine(x_t, a, v, -b))
}

/// `ε = √(1−ᾱ_t)·x_t + √ᾱ_t·v`
pub fn eps_from_v(x_t: &[f32], v: &[f32], t: usize, s: &NoiseSchedule) -> Result<Vec<f32>> {
    same_len("eps_from_v", x_t, v)?;
    let (a, b) = s.coefficients(t);
    Ok(combine(x_t, b, v, a))
}

/// Deterministic DDIM update from `t` to `t_prev < t`; returns `x̂₀` at `t_prev = 0`.
pub fn ddim_step(x_t: &[f32], v: &[f32], t: usize, t_prev: usize, s: &NoiseSchedule) -> Result<Vec<f32>> {
    if t_prev >= t {
        return Err(Error::invalid(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    renoise(x_t, v, t, t_prev, s)
}

/// Re-noises the current `(x̂₀, ε̂)` estimate to time `to` (either direction).
pub(crate) fn renoise(x_t: &[f32], v: &[f32], t: usize, to: usize, s: &NoiseSchedule) -> Result<Vec<f32>> {
    let x0 = x0_from_v(x_t, v, t, s)?;
    if to == 0 {
        return Ok(x0);
    }
    let eps = eps_from_v(x_t, v, t, s)?;
    q_sample(&x0, &eps, to, s)
}

/// `(1+s)·cond − s·uncond`
pub fn cfg_combine(cond: &[f32], uncond: &[f32], s_g: f64) -> Result<Vec<f32>> {
    same_len("cfg_combine", cond, uncond)?;
    if s_g < 0.0 || !s_g.is_finite() {
        return Err(Error::invalid(format!("guidance scale must be >= 0, got {s_g}")));
    }
    Ok(combine(cond, 1.0 + s_g, uncond, -s_g))
}
