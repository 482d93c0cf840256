use super::schedule::{ddim_subsequence, NoiseSchedule};
use super::{cfg_combine, ddim_step, eps_from_v};
use crate::error::{Error, Result};

/// A network predicting `v` for both token streams at independent times.
pub trait VPredictor {
    /// Length of the flattened vertex block (`N·(3+D)`).
    fn vertex_len(&self) -> usize;
    /// Length of the flattened joint block (`J·3`).
    fn joint_len(&self) -> usize;
    fn predict_v(&self, x_t: &[f32], y_t: &[f32], t_x: usize, t_y: usize) -> Result<(Vec<f32>, Vec<f32>)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Both streams denoised together with `t_x = t_y`.
    Joint,
    /// Joints clamped to a condition at `t_y = 0`; guidance against `t_y = T`.
    ConditionalOnJoints,
    /// Vertices alone; joints held at noise with `t_y = T`.
    Marginal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Strictly decreasing times ending at 1 (or a single `[T]`).
    pub steps: Vec<usize>,
    pub guidance: f64,
    pub mode: SampleMode,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(t_max: usize, n_steps: usize, mode: SampleMode, guidance: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            steps: ddim_subsequence(t_max, n_steps)?,
            guidance,
            mode,
            seed,
        };
        cfg.validate(t_max)?;
        Ok(cfg)
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.steps.is_empty() || self.steps.iter().any(|&t| t == 0 || t > t_max) {
            return Err(Error::invalid("sampler steps must lie in 1..=T"));
        }
        if self.steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid("sampler steps must strictly decrease"));
        }
        if self.steps.len() > 1 && *self.steps.last().unwrap() != 1 {
            return Err(Error::invalid("sampler steps must end at 1"));
        }
        if self.guidance < 0.0 || !self.guidance.is_finite() {
            return Err(Error::invalid(format!("guidance scale must be >= 0, got {}", self.guidance)));
        }
        Ok(())
    }
}

fn check_len(what: &'static str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: what,
            lhs: vec![got],
            rhs: vec![want],
        })
    }
}

/// Runs DDIM from `x_start`. `y` is the starting joint noise (joint mode) or
/// the joint condition; `null_y` is the noise fed to the unconditional
/// branch. Returns `(x̂₀, ŷ₀)`.
pub fn ddim_sample<P: VPredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    x_start: &[f32],
    y: &[f32],
    null_y: &[f32],
) -> Result<(Vec<f32>, Vec<f32>)> {
    let t_max = schedule.t_max();
    cfg.validate(t_max)?;
    check_len("ddim_sample vertices", x_start.len(), model.vertex_len())?;
    check_len("ddim_sample joints", y.len(), model.joint_len())?;
    check_len("ddim_sample null joints", null_y.len(), model.joint_len())?;
    let mut x = x_start.to_vec();
    let mut y = y.to_vec();
    for (i, &t) in cfg.steps.iter().enumerate() {
        let t_prev = cfg.steps.get(i + 1).copied().unwrap_or(0);
        match cfg.mode {
            SampleMode::Joint => {
                let (vx, vy) = model.predict_v(&x, &y, t, t)?;
                x = ddim_step(&x, &vx, t, t_prev, schedule)?;
                y = ddim_step(&y, &vy, t, t_prev, schedule)?;
            }
            SampleMode::ConditionalOnJoints => {
                let (vc, _) = model.predict_v(&x, &y, t, 0)?;
                let v = if cfg.guidance > 0.0 {
                    let (vu, _) = model.predict_v(&x, null_y, t, t_max)?;
                    cfg_combine(&vc, &vu, cfg.guidance)?
                } else {
                    vc
                };
                x = ddim_step(&x, &v, t, t_prev, schedule)?;
            }
            SampleMode::Marginal => {
                let (vx, _) = model.predict_v(&x, null_y, t, t_max)?;
                x = ddim_step(&x, &vx, t, t_prev, schedule)?;
                y = null_y.to_vec();
            }
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler state at t={t}")));
        }
    }
    Ok((x, y))
}

/// Deterministic DDIM inversion of clean `(x₀, y₀)` up to time `T` along the
/// reversed step list, with both streams at a shared time.
pub fn ddim_invert<P: VPredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    steps: &[usize],
    x0: &[f32],
    y0: &[f32],
) -> Result<(Vec<f32>, Vec<f32>)> {
    check_len("ddim_invert vertices", x0.len(), model.vertex_len())?;
    check_len("ddim_invert joints", y0.len(), model.joint_len())?;
    let mut times: Vec<usize> = steps.iter().rev().copied().collect();
    times.insert(0, 0);
    let (mut x, mut y) = (x0.to_vec(), y0.to_vec());
    for w in times.windows(2) {
        let (cur, next) = (w[0], w[1]);
        // the network is queried at the destination time with the current state
        let (vx, vy) = model.predict_v(&x, &y, next, next)?;
        let step = |s: &[f32], v: &[f32]| -> Result<Vec<f32>> {
            let eps = eps_from_v(s, v, next, schedule)?;
            let (ac, bc) = schedule.coefficients(cur);
            let (an, bn) = schedule.coefficients(next);
            Ok(s.iter()
                .zip(&eps)
                .map(|(&si, &ei)| {
                    let x0 = (si as f64 - bc * ei as f64) / ac;
                    (an * x0 + bn * ei as f64) as f32
                })
                .collect())
        };
        x = step(&x, &vx)?;
        y = step(&y, &vy)?;
    }
    Ok((x, y))
}
