//! Two-stream diffusion transformer over joint and vertex tokens.

mod config;
mod forward;
mod params;

use std::collections::BTreeMap;

pub use config::{ModelConfig, PosEmbedKind, TimeEmbedKind};
pub use forward::time_features;
pub use params::{count_params, init_params};

use crate::diffusion::VPredictor;
use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::numerics::{Checkpoint, Real, Tape, Tensor, Var};
use forward::Net;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    /// Rest-pose coordinates `[J+N, 3]` (joints first) for the template
    /// positional mode.
    pub template: Option<Tensor>,
    /// False until a training run has updated the weights.
    pub trained: bool,
}

/// Puts every parameter on `tape`, as trainable leaves or as constants.
pub fn params_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    trainable: bool,
) -> Result<BTreeMap<String, Var>> {
    params
        .iter()
        .map(|(k, v)| {
            let var = if trainable {
                tape.param(v.clone())?
            } else {
                tape.constant(v.clone())?
            };
            Ok((k.clone(), var))
        })
        .collect()
}

pub fn template_tensor(joints: &[Point], vertices: &[Point]) -> Tensor {
    let data: Vec<f32> = joints.iter().chain(vertices).flatten().copied().collect();
    Tensor::new(&[joints.len() + vertices.len(), 3], data).expect("template length")
}

impl DiffusionModel {
    pub fn new(config: ModelConfig, seed: u64, template: Option<Tensor>) -> Result<Self> {
        let params = init_params(&config, seed)?;
        let model = Self {
            config,
            params,
            template,
            trained: false,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = params::param_specs(&self.config);
        if specs.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "config expects {} parameter tensors, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for s in specs {
            let t = self
                .params
                .get(&s.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{}`", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "model parameters",
                    lhs: t.shape().to_vec(),
                    rhs: s.shape,
                });
            }
        }
        if self.config.pos_embed == PosEmbedKind::Template {
            let want = [self.config.n_joints + self.config.n_vertices, 3];
            match &self.template {
                Some(t) if t.shape() == want => {}
                _ => return Err(Error::invalid("template positional mode needs a [J+N, 3] template")),
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Builds the forward pass on `tape` from already placed parameters.
    pub fn forward_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &BTreeMap<String, Var>,
        x: Var,
        y: Var,
        t_x: &[usize],
        t_y: &[usize],
    ) -> Result<(Var, Var)> {
        let template = match &self.template {
            Some(t) if self.config.pos_embed == PosEmbedKind::Template => Some(tape.constant(t.cast())?),
            _ => None,
        };
        Net {
            cfg: &self.config,
            p: params,
        }
        .forward(tape, x, y, t_x, t_y, template)
    }

    /// Inference over a batch: `x: [B, N, 3+D]`, `y: [B, J, 3]`.
    pub fn forward_batch(&self, x: Tensor, y: Tensor, t_x: &[usize], t_y: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = params_on_tape(&mut tape, &self.params, false)?;
        let xv = tape.constant(x)?;
        let yv = tape.constant(y)?;
        let (px, py) = self.forward_on_tape(&mut tape, &p, xv, yv, t_x, t_y)?;
        Ok((tape.value(px).clone(), tape.value(py).clone()))
    }

    pub fn write_into(&self, ck: &mut Checkpoint) {
        for (k, v) in self.config.to_map() {
            ck.meta.insert(k, v);
        }
        ck.set_meta("model.trained", self.trained);
        for (k, v) in &self.params {
            ck.tensors.insert(format!("model.{k}"), v.clone());
        }
        if let Some(t) = &self.template {
            ck.tensors.insert("const.template".into(), t.clone());
        }
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_map(&ck.meta)?;
        let params = ck
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|n| (n.to_string(), v.clone())))
            .collect();
        let model = Self {
            config,
            params,
            template: ck.tensors.get("const.template").cloned(),
            trained: ck.meta_parse("model.trained").unwrap_or(false),
        };
        model.validate()?;
        Ok(model)
    }
}

impl VPredictor for DiffusionModel {
    fn vertex_len(&self) -> usize {
        self.config.n_vertices * self.config.vertex_channels()
    }

    fn joint_len(&self) -> usize {
        self.config.n_joints * 3
    }

    fn predict_v(&self, x_t: &[f32], y_t: &[f32], t_x: usize, t_y: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let c = &self.config;
        let x = Tensor::new(&[1, c.n_vertices, c.vertex_channels()], x_t.to_vec())?;
        let y = Tensor::new(&[1, c.n_joints, 3], y_t.to_vec())?;
        let (px, py) = self.forward_batch(x, y, &[t_x], &[t_y])?;
        Ok((px.into_data(), py.into_data()))
    }
}
