use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, PosEmbedKind, TimeEmbedKind};
use crate::error::Result;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Gaussian with std `1/√fan_in` where fan_in is the leading extent.
    FanIn,
    Normal(f64),
    Zeros,
    Ones,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, init: Init) {
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![fan_in, fan_out],
        init,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![fan_out],
        init: Init::Zeros,
    });
}

fn norm(out: &mut Vec<ParamSpec>, prefix: &str, h: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.g"),
        shape: vec![h],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![h],
        init: Init::Zeros,
    });
}

/// Every parameter tensor of the network, in a fixed order.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let h = cfg.hidden;
    let mut s = Vec::new();
    linear(&mut s, "vin.0", cfg.vertex_channels(), h, Init::FanIn);
    linear(&mut s, "vin.1", h, h, Init::FanIn);
    linear(&mut s, "jin.0", 3, h, Init::FanIn);
    linear(&mut s, "jin.1", h, h, Init::FanIn);
    for t in ["tx", "ty"] {
        linear(&mut s, &format!("{t}.0"), cfg.time_features, h, Init::FanIn);
        linear(&mut s, &format!("{t}.1"), h, h, Init::FanIn);
    }
    match cfg.pos_embed {
        PosEmbedKind::Learned => s.push(ParamSpec {
            name: "pos".into(),
            shape: vec![cfg.n_tokens(), h],
            init: Init::Normal(0.02),
        }),
        PosEmbedKind::Template => {
            linear(&mut s, "tpl.0", 3, h, Init::FanIn);
            linear(&mut s, "tpl.1", h, h, Init::FanIn);
            if cfg.time_embed == TimeEmbedKind::Token {
                s.push(ParamSpec {
                    name: "pos_time".into(),
                    shape: vec![2, h],
                    init: Init::Normal(0.02),
                });
            }
        }
    }
    let inner = cfg.mlp_ratio * h;
    for i in 0..cfg.n_layers {
        let p = format!("blk{i}");
        norm(&mut s, &format!("{p}.ln1"), h);
        linear(&mut s, &format!("{p}.qkv"), h, 3 * h, Init::FanIn);
        linear(&mut s, &format!("{p}.proj"), h, h, Init::FanIn);
        norm(&mut s, &format!("{p}.ln2"), h);
        linear(&mut s, &format!("{p}.fc1"), h, inner, Init::FanIn);
        linear(&mut s, &format!("{p}.fc2"), inner, h, Init::FanIn);
        if cfg.use_long_skip && is_skip_target(cfg, i) {
            linear(&mut s, &format!("{p}.skip"), 2 * h, h, Init::FanIn);
        }
    }
    norm(&mut s, "lnf", h);
    linear(&mut s, "vout.0", h, h, Init::FanIn);
    linear(&mut s, "vout.1", h, cfg.vertex_channels(), Init::Zeros);
    linear(&mut s, "jout.0", h, h, Init::FanIn);
    linear(&mut s, "jout.1", h, 3, Init::Zeros);
    s
}

/// Blocks in the last half receive the activations of the first half in
/// reverse order when long skips are enabled.
pub(crate) fn is_skip_target(cfg: &ModelConfig, block: usize) -> bool {
    block >= cfg.n_layers - cfg.n_layers / 2
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<BTreeMap<String, Tensor>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(param_specs(cfg)
        .into_iter()
        .map(|p| {
            let t = match p.init {
                Init::FanIn => Tensor::randn(&p.shape, 1.0 / (p.shape[0] as f64).sqrt(), &mut rng),
                Init::Normal(std) => Tensor::randn(&p.shape, std, &mut rng),
                Init::Zeros => Tensor::zeros(&p.shape),
                Init::Ones => Tensor::full(&p.shape, 1.0),
            };
            (p.name, t)
        })
        .collect())
}

/// Closed-form parameter count.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let h = cfg.hidden;
    let c = cfg.vertex_channels();
    let r = cfg.mlp_ratio;
    let two_layer = |a: usize| a * h + h + h * h + h;
    let mut n = two_layer(c) + two_layer(3) + 2 * two_layer(cfg.time_features);
    n += match cfg.pos_embed {
        PosEmbedKind::Learned => cfg.n_tokens() * h,
        PosEmbedKind::Template => two_layer(3) + cfg.n_time_tokens() * h,
    };
    let per_block = 4 * h * h + 2 * r * h * h + (9 + r) * h;
    n += cfg.n_layers * per_block;
    if cfg.use_long_skip {
        n += (cfg.n_layers / 2) * (2 * h * h + h);
    }
    n += 2 * h;
    n += (h * h + h) + (h * c + c);
    n += (h * h + h) + (h * 3 + 3);
    n
}
