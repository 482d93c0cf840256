use super::topology::{Point, SparseMatrix};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Checkpoint, Tensor};

/// Two linear layers `N → N_mid → M`, shared across the x/y/z channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampler {
    /// `[N, N_mid]`
    pub w1: Tensor,
    /// `[N_mid]`
    pub b1: Tensor,
    /// `[N_mid, M]`
    pub w2: Tensor,
    /// `[M]`
    pub b2: Tensor,
    pub trained: bool,
}

fn dense_from_sparse(m: &SparseMatrix) -> Tensor {
    // stored transposed so that channel rows multiply from the left
    let mut t = Tensor::zeros(&[m.cols(), m.rows()]);
    let rows = m.rows();
    for (r, c, v) in m.triplets() {
        t.data_mut()[c * rows + r] = v as f32;
    }
    t
}

impl Upsampler {
    pub fn zeros(n: usize, n_mid: usize, m: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[n, n_mid]),
            b1: Tensor::zeros(&[n_mid]),
            w2: Tensor::zeros(&[n_mid, m]),
            b2: Tensor::zeros(&[m]),
            trained: false,
        }
    }

    /// Builds weights from two prolongation matrices (`N_mid × N`, `M × N_mid`),
    /// e.g. the barycentric maps of a subdivision hierarchy.
    pub fn from_prolongations(first: &SparseMatrix, second: &SparseMatrix) -> Result<Self> {
        if second.cols() != first.rows() {
            return Err(Error::invalid(format!(
                "prolongations do not chain: {}x{} then {}x{}",
                first.rows(),
                first.cols(),
                second.rows(),
                second.cols()
            )));
        }
        Ok(Self {
            w1: dense_from_sparse(first),
            b1: Tensor::zeros(&[first.rows()]),
            w2: dense_from_sparse(second),
            b2: Tensor::zeros(&[second.rows()]),
            trained: true,
        })
    }

    pub fn n_in(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn n_mid(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.w2.shape()[1]
    }

    fn channels(pts: &[Point]) -> Vec<f32> {
        let n = pts.len();
        let mut out = vec![0.0; 3 * n];
        for (i, p) in pts.iter().enumerate() {
            for k in 0..3 {
                out[k * n + i] = p[k];
            }
        }
        out
    }

    pub fn upsample(&self, coarse: &[Point]) -> Result<Vec<Point>> {
        let (n, mid, m) = (self.n_in(), self.n_mid(), self.n_out());
        if coarse.len() != n {
            return Err(Error::ShapeMismatch {
                op: "upsample",
                lhs: vec![coarse.len(), 3],
                rhs: vec![n, 3],
            });
        }
        let x = Self::channels(coarse);
        let mut h: Vec<f32> = (0..3).flat_map(|_| self.b1.data().iter().copied()).collect();
        kernels::gemm_nn(&x, self.w1.data(), &mut h, 3, n, mid);
        let mut d: Vec<f32> = (0..3).flat_map(|_| self.b2.data().iter().copied()).collect();
        kernels::gemm_nn(&h, self.w2.data(), &mut d, 3, mid, m);
        Ok((0..m).map(|i| [d[i], d[m + i], d[2 * m + i]]).collect())
    }

    /// Pulls a gradient on dense vertices back onto the coarse input
    /// (the map is affine, so this is the transpose of the linear part).
    pub fn backprop(&self, dense_grad: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        let (n, mid, m) = (self.n_in(), self.n_mid(), self.n_out());
        if dense_grad.len() != m {
            return Err(Error::ShapeMismatch {
                op: "upsample backprop",
                lhs: vec![dense_grad.len(), 3],
                rhs: vec![m, 3],
            });
        }
        let w1 = self.w1.data();
        let w2 = self.w2.data();
        let mut gh = vec![[0.0f64; 3]; mid];
        for (j, gj) in gh.iter_mut().enumerate() {
            let row = &w2[j * m..(j + 1) * m];
            for (i, g) in dense_grad.iter().enumerate() {
                let w = row[i] as f64;
                for k in 0..3 {
                    gj[k] += w * g[k];
                }
            }
        }
        Ok((0..n)
            .map(|i| {
                let row = &w1[i * mid..(i + 1) * mid];
                let mut acc = [0.0f64; 3];
                for (j, g) in gh.iter().enumerate() {
                    for k in 0..3 {
                        acc[k] += row[j] as f64 * g[k];
                    }
                }
                acc
            })
            .collect())
    }

    pub fn write_into(&self, ck: &mut Checkpoint) {
        for (name, t) in [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)] {
            ck.tensors.insert(format!("upsampler.{name}"), t.clone());
        }
        ck.set_meta("upsampler_trained", self.trained);
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let get = |n: &str| ck.tensor(&format!("upsampler.{n}")).cloned();
        let up = Self {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
            trained: ck.meta_parse("upsampler_trained").unwrap_or(false),
        };
        let (n, mid, m) = (up.n_in(), up.n_mid(), up.n_out());
        if up.w2.shape() != [mid, m] || up.b1.shape() != [mid] || up.b2.shape() != [m] || n == 0 {
            return Err(Error::invalid("upsampler tensors have inconsistent shapes"));
        }
        Ok(up)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let first = SparseMatrix::from_triplets(3, 2, &[(0, 0, 1.0), (1, 0, 0.5), (1, 1, 0.5), (2, 1, 1.0)]).unwrap();
        let second = SparseMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (1, 2, 1.0)]).unwrap();
        let up = Upsampler::from_prolongations(&first, &second).unwrap();
        let out = up.upsample(&[[0.0; 3]; 2]).unwrap();
        assert_eq!(out, vec![[0.0; 3]; 2]);
        let out = up.upsample(&[[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]).unwrap();
        assert_eq!(out, vec![[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]);
    }
}
