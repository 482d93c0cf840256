use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Magnitude below which a gradient counts as zero: central differences of
/// an O(1) loss carry roundoff near `1e-16 / h`, so exact zeros (e.g. softmax
/// shift directions) would otherwise read as large relative errors.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic − fd| / max(|analytic|, |fd|, GRAD_FLOOR)`
    pub max_rel_error: f64,
    /// (input index, coordinate) where the maximum occurred
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Checks the gradient of scalar `f` with respect to every coordinate of
/// every tensor in `points`. `f` receives the inputs as tape variables.
pub fn check_gradients_multi<F>(f: F, points: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    check_gradients_at(f, points, h, &coords)
}

/// Like [`check_gradients_multi`] but only at the listed `(input, coordinate)`
/// pairs; the analytic gradient is still taken in one backward pass.
pub fn check_gradients_at<F>(mut f: F, points: &[Tensor<f64>], h: f64, coords: &[(usize, usize)]) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if let Some(&(i, j)) = coords.iter().find(|&&(i, j)| i >= points.len() || j >= points[i].len()) {
        return Err(Error::invalid(format!("coordinate ({i}, {j}) outside the inputs")));
    }
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::invalid(format!("finite-difference step {h} outside [1e-5, 1e-2]")));
    }
    let mut tape = Tape::new();
    let vars = points
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);

    let mut eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = pts
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("function value at perturbed point".into()));
        }
        Ok(v)
    };

    let mut work = points.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let fp = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let fm = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic[i].data()[j];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (i, j);
        }
        report.coordinates += 1;
    }
    Ok(report)
}

/// Single-input form of [`check_gradients_multi`]; returns the max relative error.
pub fn check_gradients<F>(mut f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_gradients_multi(|t, v| f(t, v[0]), std::slice::from_ref(point), h).map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[7], 1.0, &mut rng);
        let err = check_gradients(
            |t, v| {
                let s = t.mean_square(v)?;
                t.scale(s, 7.0)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // The analytic pass sees sum(x²); the finite-difference evaluations
        // see 2·sum(x²), so the reported gradient is off by half.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[5], 1.0, &mut rng);
        let mut calls = 0usize;
        let err = check_gradients(
            |t, v| {
                calls += 1;
                let s = t.mean_square(v)?;
                t.scale(s, if calls == 1 { 5.0 } else { 10.0 })
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err > 1e-1, "{err}");
    }

    #[test]
    fn rejects_out_of_range_step() {
        let x = Tensor::<f64>::zeros(&[2]);
        assert!(check_gradients(|t, v| t.sum(v), &x, 1.0).is_err());
    }
}
