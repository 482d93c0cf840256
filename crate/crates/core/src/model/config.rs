use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosEmbedKind {
    /// One learned vector per token.
    Learned,
    /// An MLP of rest-pose template coordinates.
    Template,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeEmbedKind {
    /// Two extra tokens, one per modality time.
    Token,
    /// Added to every token of the matching modality.
    Add,
}

impl FromStr for PosEmbedKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "template" => Ok(Self::Template),
            _ => Err(Error::invalid(format!("unknown positional embedding `{s}`"))),
        }
    }
}

impl FromStr for TimeEmbedKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Self::Token),
            "add" => Ok(Self::Add),
            _ => Err(Error::invalid(format!("unknown time embedding `{s}`"))),
        }
    }
}

impl PosEmbedKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Learned => "learned",
            Self::Template => "template",
        }
    }
}

impl TimeEmbedKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Token => "token",
            Self::Add => "add",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub n_vertices: usize,
    pub n_joints: usize,
    /// Extra per-vertex channels (3 when normals are modeled).
    pub attr_channels: usize,
    pub use_long_skip: bool,
    pub pos_embed: PosEmbedKind,
    pub time_embed: TimeEmbedKind,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal time features.
    pub time_features: usize,
}

impl ModelConfig {
    pub fn new(n_vertices: usize, n_joints: usize) -> Self {
        Self {
            n_layers: 7,
            hidden: 256,
            n_heads: 4,
            n_vertices,
            n_joints,
            attr_channels: 0,
            use_long_skip: false,
            pos_embed: PosEmbedKind::Learned,
            time_embed: TimeEmbedKind::Token,
            mlp_ratio: 4,
            time_features: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.n_layers == 0 || self.hidden == 0 || self.n_heads == 0 {
            return bad("layers, hidden width and heads must be positive");
        }
        if self.hidden % self.n_heads != 0 {
            return bad("hidden width must be divisible by the head count");
        }
        if self.n_vertices == 0 || self.n_joints == 0 {
            return bad("token counts must be positive");
        }
        if self.attr_channels != 0 && self.attr_channels != 3 {
            return bad("attribute channels must be 0 or 3");
        }
        if self.time_features == 0 || self.time_features % 2 != 0 || self.mlp_ratio == 0 {
            return bad("time features must be even and the MLP ratio positive");
        }
        Ok(())
    }

    pub fn vertex_channels(&self) -> usize {
        3 + self.attr_channels
    }

    pub fn n_time_tokens(&self) -> usize {
        match self.time_embed {
            TimeEmbedKind::Token => 2,
            TimeEmbedKind::Add => 0,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_time_tokens() + self.n_joints + self.n_vertices
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        [
            ("n_layers", self.n_layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_vertices", self.n_vertices.to_string()),
            ("n_joints", self.n_joints.to_string()),
            ("attr_channels", self.attr_channels.to_string()),
            ("use_long_skip", self.use_long_skip.to_string()),
            ("pos_embed", self.pos_embed.name().to_string()),
            ("time_embed", self.time_embed.name().to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("time_features", self.time_features.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect()
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
            let raw = m
                .get(&format!("model.{k}"))
                .ok_or_else(|| Error::invalid(format!("model config lacks `{k}`")))?;
            raw.parse()
                .map_err(|_| Error::invalid(format!("model config `{k}`: cannot parse `{raw}`")))
        }
        let cfg = Self {
            n_layers: get(m, "n_layers")?,
            hidden: get(m, "hidden")?,
            n_heads: get(m, "n_heads")?,
            n_vertices: get(m, "n_vertices")?,
            n_joints: get(m, "n_joints")?,
            attr_channels: get(m, "attr_channels")?,
            use_long_skip: get(m, "use_long_skip")?,
            pos_embed: get(m, "pos_embed")?,
            time_embed: get(m, "time_embed")?,
            mlp_ratio: get(m, "mlp_ratio")?,
            time_features: get(m, "time_features")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
