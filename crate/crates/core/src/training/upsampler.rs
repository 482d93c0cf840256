use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mesh::{Point, Upsampler};
use crate::numerics::{Adam, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct UpsamplerTrainConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once the loss has not improved by `min_rel_improvement` for this many iterations.
    pub patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for UpsamplerTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_iters: 2000,
            patience: 100,
            min_rel_improvement: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpsamplerTrainReport {
    pub iters: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Channel-major rows: `[3·B, n]`, row `3i+k` holds coordinate `k` of sample `i`.
fn channel_rows(meshes: &[Vec<Point>], n: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(meshes.len() * 3 * n);
    for m in meshes {
        if m.len() != n {
            return Err(Error::invalid(format!("mesh has {} vertices, expected {n}", m.len())));
        }
        for k in 0..3 {
            data.extend(m.iter().map(|p| p[k]));
        }
    }
    Tensor::new(&[meshes.len() * 3, n], data)
}

/// Mean over vertices of the Euclidean distance between prediction and truth.
pub fn upsampler_error(up: &Upsampler, coarse: &[Vec<Point>], dense: &[Vec<Point>]) -> Result<f64> {
    if coarse.len() != dense.len() || coarse.is_empty() {
        return Err(Error::invalid("need equally many non-empty coarse and dense meshes"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (c, d) in coarse.iter().zip(dense) {
        let pred = up.upsample(c)?;
        if pred.len() != d.len() {
            return Err(Error::invalid("dense mesh size differs from the upsampler output"));
        }
        for (p, q) in pred.iter().zip(d) {
            total += (0..3).map(|k| (p[k] as f64 - q[k] as f64).powi(2)).sum::<f64>().sqrt();
        }
        count += d.len();
    }
    Ok(total / count as f64)
}

/// Full-batch Adam on the mean squared per-vertex distance, starting from `init`.
pub fn train_upsampler(
    init: Upsampler,
    coarse: &[Vec<Point>],
    dense: &[Vec<Point>],
    cfg: &UpsamplerTrainConfig,
) -> Result<(Upsampler, UpsamplerTrainReport)> {
    if coarse.len() != dense.len() {
        return Err(Error::invalid(format!(
            "{} coarse meshes but {} dense meshes",
            coarse.len(),
            dense.len()
        )));
    }
    if coarse.is_empty() {
        return Err(Error::invalid("upsampler training needs at least one pair"));
    }
    let x = channel_rows(coarse, init.n_in())?;
    let target = channel_rows(dense, init.n_out())?;
    let mut params: BTreeMap<String, Tensor> = [
        ("w1".to_string(), init.w1),
        ("b1".to_string(), init.b1),
        ("w2".to_string(), init.w2),
        ("b2".to_string(), init.b2),
    ]
    .into_iter()
    .collect();
    let mut adam = Adam::new(cfg.lr);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut initial = None;
    let mut last = f64::NAN;
    let mut iters = 0;
    while iters < cfg.max_iters {
        let mut tape = Tape::<f32>::new();
        let p: BTreeMap<&str, _> = params
            .iter()
            .map(|(k, v)| Ok((k.as_str(), tape.param(v.clone())?)))
            .collect::<Result<_>>()?;
        let xv = tape.constant(x.clone())?;
        let tv = tape.constant(target.clone())?;
        let h = tape.matmul(xv, p["w1"])?;
        let h = tape.add(h, p["b1"])?;
        let d = tape.matmul(h, p["w2"])?;
        let d = tape.add(d, p["b2"])?;
        let diff = tape.sub(d, tv)?;
        let ms = tape.mean_square(diff)?;
        // per-vertex squared distance sums three channels
        let loss_var = tape.scale(ms, 3.0)?;
        let loss = tape.value(loss_var).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("upsampler loss".into()));
        }
        initial.get_or_insert(loss);
        last = loss;
        if loss < best * (1.0 - cfg.min_rel_improvement) {
            best = loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
        let mut grads = tape.backward(loss_var)?;
        let g: BTreeMap<String, Tensor> = p
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|t| (k.to_string(), t)))
            .collect();
        adam.update(&mut params, &g)?;
        iters += 1;
    }
    let mut take = |k: &str| params.remove(k).expect("upsampler parameter");
    let up = Upsampler {
        w1: take("w1"),
        b1: take("b1"),
        w2: take("w2"),
        b2: take("b2"),
        trained: true,
    };
    Ok((
        up,
        UpsamplerTrainReport {
            iters,
            initial_loss: initial.unwrap_or(f64::NAN),
            final_loss: last,
        },
    ))
}
