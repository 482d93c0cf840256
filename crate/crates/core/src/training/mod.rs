//! Multimodal v-space training with independent per-modality timesteps.

mod upsampler;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use upsampler::{train_upsampler, upsampler_error, UpsamplerTrainConfig, UpsamplerTrainReport};

use crate::diffusion::{gaussian, q_sample, v_target, NoiseSchedule};
use crate::error::{Error, Result};
use crate::mesh::ArticulatedSample;
use crate::model::{params_on_tape, DiffusionModel};
use crate::numerics::{Adam, Checkpoint, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epoch (0-based) from which the rate is divided by 10; `None` means `epochs / 2`.
    pub lr_drop_epoch: Option<usize>,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only the last).
    pub checkpoint_every: usize,
    pub vertex_weight: f64,
    pub joint_weight: f64,
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 400,
            lr: 1e-4,
            lr_drop_epoch: None,
            seed: 0,
            checkpoint_every: 0,
            vertex_weight: 1.0,
            joint_weight: 1.0,
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.vertex_weight < 0.0 || self.joint_weight < 0.0 {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::invalid(format!("EMA decay must lie in [0, 1), got {d}")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drop = self.lr_drop_epoch.unwrap_or(self.epochs / 2);
        if epoch >= drop {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// Flattened training arrays: sample `i` owns `x[i*nx..]` and `y[i*ny..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub nx: usize,
    pub ny: usize,
}

impl TrainingData {
    /// Packs samples as `[xyz (+ normal)]` per vertex, matching the model layout.
    pub fn from_samples(samples: &[ArticulatedSample], with_normals: bool) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty dataset"))?;
        let (n, j) = (first.coarse.len(), first.joints.len());
        let c = if with_normals { 6 } else { 3 };
        let mut x = Vec::with_capacity(samples.len() * n * c);
        let mut y = Vec::with_capacity(samples.len() * j * 3);
        for s in samples {
            if s.coarse.len() != n || s.joints.len() != j {
                return Err(Error::invalid("samples disagree on vertex or joint count"));
            }
            let normals = match (&s.normals, with_normals) {
                (Some(nrm), true) if nrm.len() == n => Some(nrm),
                (_, true) => return Err(Error::invalid("sample lacks per-vertex normals")),
                _ => None,
            };
            for (i, p) in s.coarse.iter().enumerate() {
                x.extend_from_slice(p);
                if let Some(nrm) = normals {
                    x.extend_from_slice(&nrm[i]);
                }
            }
            y.extend(s.joints.iter().flatten());
        }
        Ok(Self {
            x,
            y,
            nx: n * c,
            ny: j * 3,
        })
    }

    pub fn len(&self) -> usize {
        if self.nx == 0 {
            0
        } else {
            self.x.len() / self.nx
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let mut x = Vec::with_capacity(idx.len() * self.nx);
        let mut y = Vec::with_capacity(idx.len() * self.ny);
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.nx..(i + 1) * self.nx]);
            y.extend_from_slice(&self.y[i * self.ny..(i + 1) * self.ny]);
        }
        (x, y)
    }
}

/// Random quantities of one loss evaluation, per sample in batch order.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDraws {
    pub t_x: Vec<usize>,
    pub t_y: Vec<usize>,
    pub eps_x: Vec<f32>,
    pub eps_y: Vec<f32>,
}

impl LossDraws {
    pub fn sample<R: Rng + ?Sized>(b: usize, nx: usize, ny: usize, t_max: usize, rng: &mut R) -> Self {
        let t_x = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
        let t_y = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
        let eps_x = gaussian(b * nx, rng);
        let eps_y = gaussian(b * ny, rng);
        Self { t_x, t_y, eps_x, eps_y }
    }

    /// Reorders the per-sample draws.
    pub fn permuted(&self, order: &[usize], nx: usize, ny: usize) -> Self {
        Self {
            t_x: order.iter().map(|&i| self.t_x[i]).collect(),
            t_y: order.iter().map(|&i| self.t_y[i]).collect(),
            eps_x: order.iter().flat_map(|&i| self.eps_x[i * nx..(i + 1) * nx].iter().copied()).collect(),
            eps_y: order.iter().flat_map(|&i| self.eps_y[i * ny..(i + 1) * ny].iter().copied()).collect(),
        }
    }
}

/// Noisy inputs and v targets for a batch.
struct Prepared {
    x_t: Vec<f32>,
    y_t: Vec<f32>,
    v_x: Vec<f32>,
    v_y: Vec<f32>,
}

fn prepare(x0: &[f32], y0: &[f32], nx: usize, ny: usize, d: &LossDraws, s: &NoiseSchedule) -> Result<Prepared> {
    let b = d.t_x.len();
    if b == 0 {
        return Err(Error::invalid("loss needs a non-empty batch"));
    }
    if x0.len() != b * nx || y0.len() != b * ny || d.eps_x.len() != b * nx || d.eps_y.len() != b * ny {
        return Err(Error::invalid("batch arrays disagree with the draws"));
    }
    let mut p = Prepared {
        x_t: Vec::with_capacity(b * nx),
        y_t: Vec::with_capacity(b * ny),
        v_x: Vec::with_capacity(b * nx),
        v_y: Vec::with_capacity(b * ny),
    };
    for i in 0..b {
        let (xs, ys) = (i * nx..(i + 1) * nx, i * ny..(i + 1) * ny);
        p.x_t.extend(q_sample(&x0[xs.clone()], &d.eps_x[xs.clone()], d.t_x[i], s)?);
        p.v_x.extend(v_target(&x0[xs.clone()], &d.eps_x[xs], d.t_x[i], s)?);
        p.y_t.extend(q_sample(&y0[ys.clone()], &d.eps_y[ys.clone()], d.t_y[i], s)?);
        p.v_y.extend(v_target(&y0[ys.clone()], &d.eps_y[ys], d.t_y[i], s)?);
    }
    Ok(p)
}

fn to_tensor<T: Real>(shape: &[usize], data: &[f32]) -> Result<Tensor<T>> {
    Tensor::new(shape, data.iter().map(|&v| T::of(v as f64)).collect())
}

/// Builds `w_x·mse(v̂_x, v_x) + w_y·mse(v̂_y, v_y)` on `tape` from placed parameters.
#[allow(clippy::too_many_arguments)]
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    model: &DiffusionModel,
    params: &BTreeMap<String, Var>,
    schedule: &NoiseSchedule,
    x0: &[f32],
    y0: &[f32],
    draws: &LossDraws,
    weights: (f64, f64),
) -> Result<Var> {
    let c = &model.config;
    let (nx, ny) = (c.n_vertices * c.vertex_channels(), c.n_joints * 3);
    let p = prepare(x0, y0, nx, ny, draws, schedule)?;
    let b = draws.t_x.len();
    let xs = [b, c.n_vertices, c.vertex_channels()];
    let ys = [b, c.n_joints, 3];
    let x = tape.constant(to_tensor(&xs, &p.x_t)?)?;
    let y = tape.constant(to_tensor(&ys, &p.y_t)?)?;
    let (px, py) = model.forward_on_tape(tape, params, x, y, &draws.t_x, &draws.t_y)?;
    let tx = tape.constant(to_tensor(&xs, &p.v_x)?)?;
    let ty = tape.constant(to_tensor(&ys, &p.v_y)?)?;
    let dx = tape.sub(px, tx)?;
    let dy = tape.sub(py, ty)?;
    let lx = tape.mean_square(dx)?;
    let ly = tape.mean_square(dy)?;
    let lx = tape.scale(lx, weights.0)?;
    let ly = tape.scale(ly, weights.1)?;
    tape.add(lx, ly)
}

/// Loss value and parameter gradients for one batch.
pub fn loss_and_grads(
    model: &DiffusionModel,
    schedule: &NoiseSchedule,
    x0: &[f32],
    y0: &[f32],
    draws: &LossDraws,
    weights: (f64, f64),
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let params = params_on_tape(&mut tape, &model.params, true)?;
    let loss = loss_on_tape(&mut tape, model, &params, schedule, x0, y0, draws, weights)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    let mut grads = tape.backward(loss)?;
    let out = params
        .iter()
        .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
        .collect();
    Ok((value, out))
}

/// Loss over a batch of samples with freshly drawn timesteps and noise.
pub fn unidiffuser_loss<R: Rng + ?Sized>(
    model: &DiffusionModel,
    schedule: &NoiseSchedule,
    batch: &[ArticulatedSample],
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("loss needs a non-empty batch"));
    }
    let data = TrainingData::from_samples(batch, model.config.attr_channels > 0)?;
    let draws = LossDraws::sample(batch.len(), data.nx, data.ny, schedule.t_max(), rng);
    let mut tape = Tape::<f32>::new();
    let params = params_on_tape(&mut tape, &model.params, false)?;
    let loss = loss_on_tape(&mut tape, model, &params, schedule, &data.x, &data.y, &draws, (1.0, 1.0))?;
    Ok(tape.value(loss).item() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    /// 1-based
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DiffusionModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub ema: Option<BTreeMap<String, Tensor>>,
    pub history: Vec<EpochLoss>,
}

impl TrainState {
    pub fn new(model: DiffusionModel, cfg: &TrainConfig) -> Self {
        let ema = cfg.ema_decay.map(|_| model.params.clone());
        Self {
            model,
            adam: Adam::new(cfg.lr),
            epoch: 0,
            ema,
            history: Vec::new(),
        }
    }

    /// The model to sample from: EMA weights when tracked.
    pub fn export_model(&self) -> DiffusionModel {
        let mut m = self.model.clone();
        if let Some(e) = &self.ema {
            m.params = e.clone();
        }
        m
    }

    pub fn write_into(&self, ck: &mut Checkpoint) {
        self.model.write_into(ck);
        ck.set_meta("train.epoch", self.epoch);
        ck.set_meta("adam.step", self.adam.step);
        for (k, v) in &self.adam.m {
            ck.tensors.insert(format!("adam.m.{k}"), v.clone());
        }
        for (k, v) in &self.adam.v {
            ck.tensors.insert(format!("adam.v.{k}"), v.clone());
        }
        if let Some(e) = &self.ema {
            for (k, v) in e {
                ck.tensors.insert(format!("ema.{k}"), v.clone());
            }
        }
        let hist: Vec<String> = self
            .history
            .iter()
            .map(|h| format!("{}:{}:{}", h.epoch, h.loss, h.lr))
            .collect();
        ck.set_meta("train.history", hist.join(","));
    }

    pub fn read_from(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let model = DiffusionModel::read_from(ck)?;
        let mut adam = Adam::new(cfg.lr);
        adam.step = ck.meta_parse("adam.step")?;
        let strip = |prefix: &str| -> BTreeMap<String, Tensor> {
            ck.tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
                .collect()
        };
        adam.m = strip("adam.m.");
        adam.v = strip("adam.v.");
        let ema = strip("ema.");
        let ema = match (cfg.ema_decay, ema.is_empty()) {
            (Some(_), true) => Some(model.params.clone()),
            (Some(_), false) => Some(ema),
            (None, _) => None,
        };
        let mut history = Vec::new();
        for item in ck.meta_str("train.history").unwrap_or("").split(',').filter(|s| !s.is_empty()) {
            let f: Vec<&str> = item.split(':').collect();
            let bad = || Error::invalid(format!("bad loss history entry `{item}`"));
            if f.len() != 3 {
                return Err(bad());
            }
            history.push(EpochLoss {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self {
            model,
            adam,
            epoch: ck.meta_parse("train.epoch")?,
            ema,
            history,
        })
    }

    pub fn checkpoint(&self, schedule: &NoiseSchedule) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.write_into(&mut ck);
        ck.set_meta("diffusion.t_max", schedule.t_max());
        ck
    }
}

pub fn loss_csv(history: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,loss,lr\n");
    for h in history {
        let _ = writeln!(s, "{},{},{}", h.epoch, h.loss, h.lr);
    }
    s
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Copied into every checkpoint written (e.g. topology, upsampler).
    pub extra: Checkpoint,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            extra: Checkpoint::new(),
        }
    }

    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.ckpt"))
    }

    pub fn last_path(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    fn save(&self, state: &TrainState, schedule: &NoiseSchedule, periodic: bool) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut ck = state.checkpoint(schedule);
        ck.meta.extend(self.extra.meta.clone());
        ck.tensors.extend(self.extra.tensors.clone());
        if periodic {
            ck.save(self.epoch_path(state.epoch))?;
        }
        ck.save(self.last_path())?;
        let csv = self.dir.join("loss.csv");
        fs::write(&csv, loss_csv(&state.history)).map_err(|e| Error::io(&csv, e))
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Runs epochs `state.epoch .. cfg.epochs`. A non-finite batch loss aborts
/// before the update; `state` and on-disk checkpoints then hold the last
/// good weights.
pub fn train(
    state: &mut TrainState,
    data: &TrainingData,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    out: Option<&RunOutput>,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training needs a non-empty dataset"));
    }
    let c = &state.model.config;
    if data.nx != c.n_vertices * c.vertex_channels() || data.ny != c.n_joints * 3 {
        return Err(Error::invalid("dataset layout does not match the model"));
    }
    let weights = (cfg.vertex_weight, cfg.joint_weight);
    while state.epoch < cfg.epochs {
        let lr = cfg.lr_at(state.epoch);
        state.adam.lr = lr;
        let mut rng = epoch_rng(cfg.seed, state.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x0, y0) = data.gather(idx);
            let draws = LossDraws::sample(idx.len(), data.nx, data.ny, schedule.t_max(), &mut rng);
            let (loss, grads) = loss_and_grads(&state.model, schedule, &x0, &y0, &draws, weights)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {}; last good weights kept",
                    state.epoch + 1
                )));
            }
            state.adam.update(&mut state.model.params, &grads)?;
            if let (Some(ema), Some(d)) = (&mut state.ema, cfg.ema_decay) {
                for (k, e) in ema.iter_mut() {
                    let p = &state.model.params[k];
                    for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
                        *ev = (d * *ev as f64 + (1.0 - d) * pv as f64) as f32;
                    }
                }
            }
            total += loss * idx.len() as f64;
        }
        state.epoch += 1;
        state.model.trained = true;
        let record = EpochLoss {
            epoch: state.epoch,
            loss: total / data.len() as f64,
            lr,
        };
        state.history.push(record);
        on_epoch(&record);
        if let Some(out) = out {
            let periodic = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
            if periodic || state.epoch == cfg.epochs {
                out.save(state, schedule, periodic)?;
            }
        }
    }
    Ok(())
}

/// The model to sample from in a checkpoint: EMA weights when present.
pub fn sampling_model(ck: &Checkpoint) -> Result<DiffusionModel> {
    let mut model = DiffusionModel::read_from(ck)?;
    let ema: BTreeMap<String, Tensor> = ck
        .tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("ema.").map(|n| (n.to_string(), v.clone())))
        .collect();
    if !ema.is_empty() {
        model.params = ema;
        model.validate()?;
    }
    Ok(model)
}

/// Loads a run state from disk for resuming.
pub fn resume(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    TrainState::read_from(&Checkpoint::load(path)?, cfg)
}
