use std::collections::BTreeMap;

use super::config::{ModelConfig, PosEmbedKind, TimeEmbedKind};
use super::params::is_skip_target;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Sinusoidal features of integer times, `[B, F]`: sines then cosines.
pub fn time_features<T: Real>(times: &[usize], width: usize) -> Tensor<T> {
    let half = width / 2;
    Tensor::from_fn(&[times.len(), width], |i| {
        let (b, j) = (i / width, i % width);
        let k = j % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = times[b] as f64 * freq;
        T::of(if j < half { arg.sin() } else { arg.cos() })
    })
}

pub(crate) struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub p: &'a BTreeMap<String, Var>,
}

impl Net<'_> {
    fn get(&self, name: &str) -> Result<Var> {
        self.p
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    fn linear<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.get(&format!("{prefix}.w"))?;
        let b = self.get(&format!("{prefix}.b"))?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn mlp2<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, &format!("{prefix}.0"), x)?;
        let h = tape.gelu(h)?;
        self.linear(tape, &format!("{prefix}.1"), h)
    }

    fn norm<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let g = self.get(&format!("{prefix}.g"))?;
        let b = self.get(&format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b, 1e-5)
    }

    fn attention<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let (bsz, len) = (tape.shape(x)[0], tape.shape(x)[1]);
        let (h, nh) = (self.cfg.hidden, self.cfg.n_heads);
        let dh = h / nh;
        let qkv = self.linear(tape, &format!("{prefix}.qkv"), x)?;
        let qkv = tape.reshape(qkv, &[bsz, len, 3, nh, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let s = tape.slice(qkv, 0, i, 1)?;
            parts.push(tape.reshape(s, &[bsz, nh, len, dh])?);
        }
        let (q, k, v) = (parts[0], parts[1], parts[2]);
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let att = tape.softmax(scores)?;
        let ctx = tape.bmm(att, v, false)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[bsz, len, h])?;
        self.linear(tape, &format!("{prefix}.proj"), ctx)
    }

    fn block<T: Real>(&self, tape: &mut Tape<T>, i: usize, x: Var) -> Result<Var> {
        let p = format!("blk{i}");
        let n1 = self.norm(tape, &format!("{p}.ln1"), x)?;
        let a = self.attention(tape, &p, n1)?;
        let x = tape.add(x, a)?;
        let n2 = self.norm(tape, &format!("{p}.ln2"), x)?;
        let m = self.linear(tape, &format!("{p}.fc1"), n2)?;
        let m = tape.gelu(m)?;
        let m = self.linear(tape, &format!("{p}.fc2"), m)?;
        tape.add(x, m)
    }

    /// `x: [B, N, 3+D]`, `y: [B, J, 3]`; `template: [J+N, 3]` for the
    /// template positional mode. Returns `(pred_x, pred_y)` with the input shapes.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        y: Var,
        t_x: &[usize],
        t_y: &[usize],
        template: Option<Var>,
    ) -> Result<(Var, Var)> {
        let cfg = self.cfg;
        let (sx, sy) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
        let bsz = sx[0];
        if sx != [bsz, cfg.n_vertices, cfg.vertex_channels()]
            || sy != [bsz, cfg.n_joints, 3]
            || t_x.len() != bsz
            || t_y.len() != bsz
        {
            return Err(Error::ShapeMismatch {
                op: "model forward",
                lhs: [sx, sy].concat(),
                rhs: vec![bsz, cfg.n_vertices, cfg.vertex_channels(), bsz, cfg.n_joints, 3],
            });
        }
        let h = cfg.hidden;
        let fx = tape.constant(time_features(t_x, cfg.time_features))?;
        let fy = tape.constant(time_features(t_y, cfg.time_features))?;
        let ex = self.mlp2(tape, "tx", fx)?;
        let ex = tape.reshape(ex, &[bsz, 1, h])?;
        let ey = self.mlp2(tape, "ty", fy)?;
        let ey = tape.reshape(ey, &[bsz, 1, h])?;
        let mut vt = self.mlp2(tape, "vin", x)?;
        let mut jt = self.mlp2(tape, "jin", y)?;
        let mut tokens = match cfg.time_embed {
            TimeEmbedKind::Token => tape.concat(&[ex, ey, jt, vt], 1)?,
            TimeEmbedKind::Add => {
                jt = tape.add(jt, ey)?;
                vt = tape.add(vt, ex)?;
                tape.concat(&[jt, vt], 1)?
            }
        };
        let pos = match cfg.pos_embed {
            PosEmbedKind::Learned => self.get("pos")?,
            PosEmbedKind::Template => {
                let tpl = template.ok_or_else(|| Error::invalid("template embedding needs rest coordinates"))?;
                let e = self.mlp2(tape, "tpl", tpl)?;
                match cfg.time_embed {
                    TimeEmbedKind::Token => {
                        let pt = self.get("pos_time")?;
                        tape.concat(&[pt, e], 0)?
                    }
                    TimeEmbedKind::Add => e,
                }
            }
        };
        tokens = tape.add(tokens, pos)?;
        let mut skips = Vec::new();
        for i in 0..cfg.n_layers {
            if cfg.use_long_skip && is_skip_target(cfg, i) {
                let s = skips.pop().ok_or_else(|| Error::invalid("long skip stack empty"))?;
                let cat = tape.concat(&[tokens, s], 2)?;
                tokens = self.linear(tape, &format!("blk{i}.skip"), cat)?;
            }
            tokens = self.block(tape, i, tokens)?;
            if cfg.use_long_skip && i < cfg.n_layers / 2 {
                skips.push(tokens);
            }
        }
        let out = self.norm(tape, "lnf", tokens)?;
        let nt = cfg.n_time_tokens();
        let jo = tape.slice(out, 1, nt, cfg.n_joints)?;
        let vo = tape.slice(out, 1, nt + cfg.n_joints, cfg.n_vertices)?;
        let py = self.mlp2(tape, "jout", jo)?;
        let px = self.mlp2(tape, "vout", vo)?;
        Ok((px, py))
    }
}
