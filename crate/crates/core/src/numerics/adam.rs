use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::Result;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over `params`, using `grads` keyed by the same names.
    /// Parameters without a gradient are left alone. Tensors whose gradient
    /// contains NaN/Inf are skipped; their names are returned.
    pub fn update(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<Vec<String>> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut skipped = Vec::new();
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            p.expect_same_shape("adam", g)?;
            if !g.is_finite() {
                skipped.push(name.clone());
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv as f64 / bc1;
                let vhat = *vv as f64 / bc2;
                *pv -= (self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(skipped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f32) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::new(&[1], vec![v]).unwrap())])
    }

    #[test]
    fn zero_gradient_keeps_params_and_counts_step() {
        let mut p = single("w", 1.5);
        let mut adam = Adam::new(1e-2);
        adam.update(&mut p, &single("w", 0.0)).unwrap();
        assert_eq!(p["w"].data(), &[1.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε)
        for g in [0.3f32, -2.0, 1e-3] {
            let mut p = single("w", 0.0);
            let mut adam = Adam::new(1e-2);
            adam.update(&mut p, &single("w", g)).unwrap();
            let want = -1e-2 * g as f64 / (g.abs() as f64 + 1e-8);
            assert!((p["w"].data()[0] as f64 - want).abs() < 1e-7, "{g}");
        }
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut p = single("w", 0.0);
        let mut adam = Adam::new(1e-3);
        let mut prev = 0.0;
        for _ in 0..100 {
            adam.update(&mut p, &single("w", 1.0)).unwrap();
            let now = p["w"].data()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = single("w", 1.0);
        let mut adam = Adam::new(1e-2);
        let skipped = adam.update(&mut p, &single("w", f32::NAN)).unwrap();
        assert_eq!(skipped, vec!["w".to_string()]);
        assert_eq!(p["w"].data(), &[1.0]);
    }
}
