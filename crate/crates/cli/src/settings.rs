//! Per-subcommand settings: defaults, then the config file, then flags.
//!
//! A config file is TOML. Keys for a subcommand live in a table named after
//! it (`[train]`, `[sample]`, ...); a file without that table is read as a
//! flat list of keys for the subcommand being run. The banner printed by
//! every subcommand is itself a valid config file.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Copies every `Some` flag over the matching settings field.
macro_rules! overlay {
    ($s:expr, $a:expr; $($f:ident),* $(,)?) => {
        $( if let Some(v) = $a.$f.clone() { $s.$f = v; } )*
    };
}

/// Like [`overlay!`] for settings fields that are themselves optional.
macro_rules! overlay_opt {
    ($s:expr, $a:expr; $($f:ident),* $(,)?) => {
        $( if let Some(v) = $a.$f.clone() { $s.$f = Some(v); } )*
    };
}

pub(crate) use {overlay, overlay_opt};

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>, name: &str) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let section = match table.remove(name) {
        Some(toml::Value::Table(t)) => t,
        Some(_) => return Err(CliError::usage(format!("{}: `{name}` must be a table", path.display()))),
        None => table,
    };
    toml::Value::Table(section)
        .try_into()
        .map_err(|e| CliError::usage(format!("{}: [{name}]: {e}", path.display())))
}

pub fn banner<T: Serialize>(name: &str, settings: &T) -> String {
    let mut root = toml::Table::new();
    let body = toml::Value::try_from(settings).expect("settings serialize to TOML");
    root.insert(name.to_string(), body);
    format!(
        "# meshdiff {name}: effective configuration\n{}",
        toml::to_string(&root).expect("settings serialize to TOML")
    )
}

pub fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, CliError> {
    v.clone()
        .ok_or_else(|| CliError::usage(format!("missing --{flag} (flag or config key)")))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenData {
    pub out: Option<PathBuf>,
    pub samples: usize,
    pub val: usize,
    pub seed: Option<u64>,
}

impl Default for GenData {
    fn default() -> Self {
        Self {
            out: None,
            samples: 2000,
            val: 200,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Train {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub resume: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_epoch: Option<usize>,
    pub ema_decay: Option<f64>,
    pub checkpoint_every: usize,
    pub vertex_weight: f64,
    pub joint_weight: f64,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_features: usize,
    pub long_skip: bool,
    pub pos_embed: String,
    pub time_embed: String,
    pub normals: bool,
    pub t_max: usize,
    pub upsampler_iters: usize,
}

impl Default for Train {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            seed: None,
            resume: None,
            epochs: 400,
            batch_size: 64,
            lr: 1e-4,
            lr_drop_epoch: None,
            ema_decay: None,
            checkpoint_every: 0,
            vertex_weight: 1.0,
            joint_weight: 1.0,
            layers: 7,
            hidden: 256,
            heads: 4,
            mlp_ratio: 4,
            time_features: 128,
            long_skip: false,
            pos_embed: "learned".into(),
            time_embed: "token".into(),
            normals: false,
            t_max: 1000,
            upsampler_iters: 2000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sample {
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub n: usize,
    pub steps: usize,
    pub joints: Option<PathBuf>,
    pub cfg: Option<f64>,
}

impl Default for Sample {
    fn default() -> Self {
        Self {
            ckpt: None,
            out: None,
            seed: None,
            n: 1,
            steps: 10,
            joints: None,
            cfg: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Morph {
    pub ckpt: Option<PathBuf>,
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub weights: String,
    pub steps: usize,
}

impl Default for Morph {
    fn default() -> Self {
        Self {
            ckpt: None,
            a: None,
            b: None,
            out: None,
            weights: "-0.25,0,0.25,0.5,0.75,1,1.25".into(),
            steps: 10,
        }
    }
}

/// Shared by `deform` and `fit2d`; `None` times mean `T/2` and 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Optimize {
    pub ckpt: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub seed: Option<u64>,
    /// control points (`deform`)
    pub targets: Option<PathBuf>,
    /// image keypoints and camera (`fit2d`)
    pub kp2d: Option<PathBuf>,
    pub camera: Option<PathBuf>,
    pub iters: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub t_start: Option<usize>,
    pub t_end: Option<usize>,
    pub sds_scale: f64,
    pub w_sds: f64,
    pub w_edge: f64,
    pub w_lap: f64,
    pub w_consist: f64,
    pub w_target: f64,
}

impl Default for Optimize {
    fn default() -> Self {
        Self {
            ckpt: None,
            init: None,
            out: None,
            report: None,
            seed: None,
            targets: None,
            kp2d: None,
            camera: None,
            iters: 200,
            lr: 1e-2,
            lr_final: 1e-3,
            t_start: None,
            t_end: None,
            sds_scale: 1.0,
            w_sds: 1.0,
            w_edge: 1.0,
            w_lap: 1.0,
            w_consist: 1.0,
            w_target: 10.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Eval {
    pub gen: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub topology: Option<PathBuf>,
    pub metrics: String,
    pub distance: String,
}

impl Default for Eval {
    fn default() -> Self {
        Self {
            gen: None,
            reference: None,
            out: None,
            topology: None,
            metrics: "ra1nna,mmd,cov,chamfer".into(),
            distance: "chamfer".into(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inspect {
    pub ckpt: Option<PathBuf>,
}
