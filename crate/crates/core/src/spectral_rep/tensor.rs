use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

/// Dense 3-way tensor stored with the last index fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Tensor3 {
            dims: [d0, d1, d2],
            data: vec![0.0; d0 * d1 * d2],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::dim(
                "Tensor3::from_vec",
                format!("{} values for dims {dims:?}", data.len()),
            ));
        }
        Ok(Tensor3 { dims, data })
    }

    /// Uniform entries in `±sqrt(3 / (d1 * d2))`, so contractions with unit
    /// vectors stay of order one.
    pub fn random(d0: usize, d1: usize, d2: usize, rng: &mut SeededRng) -> Self {
        let bound = (3.0 / (d1 * d2) as f64).sqrt();
        Tensor3 {
            dims: [d0, d1, d2],
            data: (0..d0 * d1 * d2).map(|_| rng.uniform_range(-bound, bound)).collect(),
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    /// Contraction over the last mode: `M[i][j] = Σ_k T[i][j][k] xi[k]`.
    pub fn mode3(&self, xi: &[f64]) -> Result<Matrix> {
        let [d0, d1, d2] = self.dims;
        if xi.len() != d2 {
            return Err(Error::dim(
                "Tensor3::mode3",
                format!("vector has {} entries, mode size {d2}", xi.len()),
            ));
        }
        let mut m = Matrix::zeros(d0, d1);
        for (ij, chunk) in self.data.chunks_exact(d2).enumerate() {
            m.as_mut_slice()[ij] = chunk.iter().zip(xi).map(|(a, b)| a * b).sum();
        }
        Ok(m)
    }

    /// Given `dM` for `M = mode3(xi)`, accumulates the tensor gradient into
    /// `grad` and returns the gradient with respect to `xi`.
    pub fn mode3_backward(&self, xi: &[f64], dm: &Matrix, grad: &mut Tensor3) -> Vec<f64> {
        let d2 = self.dims[2];
        let mut dxi = vec![0.0; d2];
        for (ij, (chunk, gchunk)) in self
            .data
            .chunks_exact(d2)
            .zip(grad.data.chunks_exact_mut(d2))
            .enumerate()
        {
            let g = dm.as_slice()[ij];
            if g == 0.0 {
                continue;
            }
            for k in 0..d2 {
                gchunk[k] += g * xi[k];
                dxi[k] += g * chunk[k];
            }
        }
        dxi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode3_matches_loop_and_backward() {
        let mut rng = SeededRng::new(2);
        let t = Tensor3::random(3, 2, 4, &mut rng);
        let xi: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let m = t.mode3(&xi).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let v: f64 = (0..4).map(|k| t.get(i, j, k) * xi[k]).sum();
                assert!((m.get(i, j) - v).abs() < 1e-14);
            }
        }
        let dm = Matrix::from_vec(3, 2, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let mut g = Tensor3::zeros(3, 2, 4);
        let dxi = t.mode3_backward(&xi, &dm, &mut g);
        for k in 0..4 {
            let v: f64 = (0..3)
                .flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| dm.get(i, j) * t.get(i, j, k))
                .sum();
            assert!((dxi[k] - v).abs() < 1e-14);
            assert!((g.get(1, 1, k) - dm.get(1, 1) * xi[k]).abs() < 1e-14);
        }
    }
}
