use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Variance schedule over discrete times `0..=T`; time 0 is clean data.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl NoiseSchedule {
    /// `ᾱ(t) = σ(−λ(t))` with `λ` linear from `lambda_start` to `lambda_end`,
    /// then affinely rescaled so that `ᾱ(0) = 1` and `ᾱ(T) = alpha_bar_min`.
    pub fn sigmoid(t_max: usize, lambda_start: f64, lambda_end: f64, alpha_bar_min: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::invalid(format!("schedule needs T >= 2, got {t_max}")));
        }
        if lambda_start >= lambda_end {
            return Err(Error::invalid("schedule needs lambda_start < lambda_end"));
        }
        if !(0.0..1.0).contains(&alpha_bar_min) || alpha_bar_min == 0.0 {
            return Err(Error::invalid("alpha_bar_min must lie in (0, 1)"));
        }
        let raw = |t: usize| sigmoid(-(lambda_start + (lambda_end - lambda_start) * t as f64 / t_max as f64));
        let (hi, lo) = (raw(0), raw(t_max));
        let mut alpha_bar: Vec<f64> = (0..=t_max)
            .map(|t| alpha_bar_min + (1.0 - alpha_bar_min) * (raw(t) - lo) / (hi - lo))
            .collect();
        alpha_bar[0] = 1.0;
        alpha_bar[t_max] = alpha_bar_min;
        let beta: Vec<f64> = (1..=t_max)
            .map(|t| (1.0 - alpha_bar[t] / alpha_bar[t - 1]).clamp(1e-6, 0.999))
            .collect();
        if beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("schedule produced beta outside (0, 1)"));
        }
        Ok(Self { alpha_bar, beta })
    }

    pub fn default_sigmoid(t_max: usize) -> Result<Self> {
        Self::sigmoid(t_max, -3.0, 3.0, 1e-4)
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))`
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Table with one `t beta alpha_bar` row per step.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# t beta alpha_bar\n");
        for t in 1..=self.t_max() {
            let _ = writeln!(s, "{t} {} {}", self.beta(t), self.alpha_bar(t));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut beta = Vec::new();
        let mut alpha_bar = vec![1.0];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<f64> = line
                .split_whitespace()
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse("schedule", i + 1, format!("bad row `{line}`")))?;
            let [t, b, ab] = cols[..] else {
                return Err(Error::parse("schedule", i + 1, "expected `t beta alpha_bar`"));
            };
            if t as usize != beta.len() + 1 {
                return Err(Error::parse("schedule", i + 1, "rows must be consecutive from t=1"));
            }
            beta.push(b);
            alpha_bar.push(ab);
        }
        if beta.len() < 2 {
            return Err(Error::invalid("schedule table has fewer than 2 rows"));
        }
        Ok(Self { alpha_bar, beta })
    }
}

/// `k` evenly spaced times from `T` down to 1 (just `[T]` when `k = 1`).
pub fn ddim_subsequence(t_max: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > t_max {
        return Err(Error::invalid(format!("step count {k} must lie in 1..={t_max}")));
    }
    if k == 1 {
        return Ok(vec![t_max]);
    }
    let span = (t_max - 1) as f64;
    let mut seq: Vec<usize> = (0..k)
        .map(|i| 1 + (span * (k - 1 - i) as f64 / (k - 1) as f64).round() as usize)
        .collect();
    seq.dedup();
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_monotone() {
        let s = NoiseSchedule::default_sigmoid(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bar(1000), 1e-4);
        assert!(s.alpha_bar(1) >= 0.999);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn subsequence_shape() {
        assert_eq!(ddim_subsequence(1000, 1).unwrap(), vec![1000]);
        let seq = ddim_subsequence(1000, 10).unwrap();
        assert_eq!(seq.len(), 10);
        assert_eq!((seq[0], seq[9]), (1000, 1));
        assert!(seq.windows(2).all(|w| w[0] > w[1]));
        assert!(ddim_subsequence(10, 11).is_err());
    }

    #[test]
    fn text_round_trip() {
        let s = NoiseSchedule::default_sigmoid(50).unwrap();
        assert_eq!(NoiseSchedule::from_text(&s.to_text()).unwrap(), s);
    }
}
