use rand::Rng;

use super::sampler::VPredictor;
use super::schedule::NoiseSchedule;
use super::{cfg_combine, eps_from_v, gaussian, q_sample};
use crate::error::{Error, Result};

/// The weighting `ω(t)` applied to the residual `ε̂ − ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SdsWeighting {
    /// `ω(t) = c`
    Constant(f64),
    /// `ω(t) = c·√((1−ᾱ_t)/ᾱ_t)`; turns the residual into `c·(X − x̂₀)`,
    /// which keeps explicit updates bounded at small `t`.
    DataSpace(f64),
}

impl SdsWeighting {
    pub fn at(&self, t: usize, s: &NoiseSchedule) -> f64 {
        match *self {
            SdsWeighting::Constant(c) => c,
            SdsWeighting::DataSpace(c) => {
                let ab = s.alpha_bar(t);
                c * ((1.0 - ab) / ab).sqrt()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SdsCondition {
    /// Noise both streams at the same `t`; gradients flow to both.
    Joint,
    /// Hold the joints as a clean condition (`t_y = 0`) with guidance scale
    /// `s_g` against the `t_y = T` branch; only vertices receive gradient.
    OnJoints { guidance: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdsGradient {
    pub vertices: Vec<f32>,
    /// Zero when the joints act as a condition.
    pub joints: Vec<f32>,
}

/// `ω(t)·(ε̂ − ε)` laid out like `(x, y)`.
#[allow(clippy::too_many_arguments)]
pub fn sds_gradient<P: VPredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    x: &[f32],
    y: &[f32],
    condition: SdsCondition,
    t: usize,
    weighting: SdsWeighting,
    rng: &mut R,
) -> Result<SdsGradient> {
    let t_max = schedule.t_max();
    if t == 0 || t > t_max {
        return Err(Error::invalid(format!("SDS time {t} outside 1..={t_max}")));
    }
    let w = weighting.at(t, schedule);
    let eps_x = gaussian(x.len(), rng);
    let x_t = q_sample(x, &eps_x, t, schedule)?;
    let residual = |pred: &[f32], drawn: &[f32]| -> Vec<f32> {
        pred.iter()
            .zip(drawn)
            .map(|(&p, &e)| (w * (p as f64 - e as f64)) as f32)
            .collect()
    };
    match condition {
        SdsCondition::Joint => {
            let eps_y = gaussian(y.len(), rng);
            let y_t = q_sample(y, &eps_y, t, schedule)?;
            let (vx, vy) = model.predict_v(&x_t, &y_t, t, t)?;
            let ex = eps_from_v(&x_t, &vx, t, schedule)?;
            let ey = eps_from_v(&y_t, &vy, t, schedule)?;
            Ok(SdsGradient {
                vertices: residual(&ex, &eps_x),
                joints: residual(&ey, &eps_y),
            })
        }
        SdsCondition::OnJoints { guidance } => {
            // drawn even when unused so the noise stream does not depend on guidance
            let null_y = gaussian(y.len(), rng);
            let (vc, _) = model.predict_v(&x_t, y, t, 0)?;
            let v = if guidance > 0.0 {
                let (vu, _) = model.predict_v(&x_t, &null_y, t, t_max)?;
                cfg_combine(&vc, &vu, guidance)?
            } else {
                vc
            };
            let ex = eps_from_v(&x_t, &v, t, schedule)?;
            Ok(SdsGradient {
                vertices: residual(&ex, &eps_x),
                joints: vec![0.0; y.len()],
            })
        }
    }
}
