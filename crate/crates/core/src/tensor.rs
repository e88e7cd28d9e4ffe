//! Dense float64 tensors.
//!
//! Row-major layout, immutable after construction: every operation returns a
//! new tensor and never mutates its inputs, so values can be shared freely
//! across threads. Shape violations are programmer errors and panic with a
//! message, mirroring `ndarray`'s contract. All public operations keep
//! entries finite unless documented otherwise.

use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from an explicit buffer. `data.len()` must equal the product of
    /// `shape`, and every dimension must be at least 1.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert!(!shape.is_empty(), "tensor shape must not be empty");
        assert!(
            shape.iter().all(|&d| d >= 1),
            "tensor dims must be >= 1, got {shape:?}"
        );
        let n: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            n,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        assert!(!shape.is_empty(), "tensor shape must not be empty");
        assert!(
            shape.iter().all(|&d| d >= 1),
            "tensor dims must be >= 1, got {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    /// I.i.d. normal samples, deterministic under the given generator state.
    pub fn randn(shape: &[usize], rng: &mut SeededRng, mean: f64, stddev: f64) -> Tensor {
        assert!(stddev >= 0.0, "stddev must be >= 0, got {stddev}");
        let mut t = Tensor::zeros(shape);
        for x in &mut t.data {
            *x = mean + stddev * rng.next_gaussian();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor.
    pub fn nrows(&self) -> usize {
        assert_eq!(self.rank(), 2, "nrows needs rank 2, got {:?}", self.shape);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn ncols(&self) -> usize {
        assert_eq!(self.rank(), 2, "ncols needs rank 2, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Copy of row `i` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&self, i: usize) -> Tensor {
        let c = self.ncols();
        Tensor::from_vec(&[c], self.data[i * c..(i + 1) * c].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Single entry of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.len(), 1, "scalar() needs exactly one entry");
        self.data[0]
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(
            self.shape, other.shape,
            "shape mismatch: {:?} vs {:?}",
            self.shape, other.shape
        );
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_with(other, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| c * x).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Each entry clipped into [0, 1]. Idempotent.
    pub fn clamp01(&self) -> Tensor {
        self.map(|x| x.clamp(0.0, 1.0))
    }

    /// Standard rank-2 matrix product with float64 accumulation.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 2, "matmul lhs must be rank 2");
        assert_eq!(other.rank(), 2, "matmul rhs must be rank 2");
        let (n, k) = (self.shape[0], self.shape[1]);
        let (k2, m) = (other.shape[0], other.shape[1]);
        assert_eq!(
            k, k2,
            "matmul inner dims disagree: {:?} vs {:?}",
            self.shape, other.shape
        );
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * m..(i + 1) * m];
            for (kk, &a) in lhs_row.iter().enumerate() {
                let rhs_row = &other.data[kk * m..(kk + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose needs rank 2");
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(
            self.len(),
            other.len(),
            "dot length mismatch: {} vs {}",
            self.len(),
            other.len()
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
    }

    /// Argmax over the last axis, lowest index winning ties.
    /// For an `n x c` tensor this returns `n` indices.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let c = *self.shape.last().unwrap();
        let rows = self.len() / c;
        (0..rows)
            .map(|i| {
                let row = &self.data[i * c..(i + 1) * c];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_shapes() {
        assert_eq!(Tensor::zeros(&[2, 3]).data(), &[0.0; 6]);
        assert_eq!(Tensor::zeros(&[1]).data(), &[0.0]);
        let t = Tensor::zeros(&[4, 1, 2]);
        assert_eq!(t.shape(), &[4, 1, 2]);
        assert_eq!(t.len(), 8);
    }

    #[test]
    #[should_panic(expected = "shape must not be empty")]
    fn zeros_rejects_empty_shape() {
        Tensor::zeros(&[]);
    }

    #[test]
    #[should_panic(expected = "dims must be >= 1")]
    fn zeros_rejects_zero_dim() {
        Tensor::zeros(&[2, 0]);
    }

    #[test]
    fn randn_zero_stddev_is_constant() {
        let mut rng = SeededRng::new(1);
        let t = Tensor::randn(&[5], &mut rng, 3.5, 0.0);
        assert!(t.data().iter().all(|&x| x == 3.5));
    }

    #[test]
    fn randn_deterministic_under_seed() {
        let mut a = SeededRng::new(99);
        let mut b = SeededRng::new(99);
        let ta = Tensor::randn(&[4, 4], &mut a, 0.0, 1.0);
        let tb = Tensor::randn(&[4, 4], &mut b, 0.0, 1.0);
        assert_eq!(ta, tb);
    }

    #[test]
    fn randn_sample_mean_near_zero() {
        let mut rng = SeededRng::new(5);
        let t = Tensor::randn(&[10_000], &mut rng, 0.0, 1.0);
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 0.05, "sample mean {mean}");
    }

    #[test]
    fn matmul_identity_is_bitwise() {
        let mut rng = SeededRng::new(2);
        let m = Tensor::randn(&[4, 4], &mut rng, 0.0, 1.0);
        let i = Tensor::eye(4);
        assert_eq!(i.matmul(&m), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]);
        assert_eq!(a.matmul(&b).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SeededRng::new(3);
        let a = Tensor::randn(&[5, 7], &mut rng, 0.0, 1.0);
        let b = Tensor::randn(&[7, 3], &mut rng, 0.0, 1.0);
        let got = a.matmul(&b);
        // Naive i-j-k oracle.
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.get2(i, k) * b.get2(k, j);
                }
                assert_eq!(got.get2(i, j), acc, "mismatch at ({i},{j})");
            }
        }
    }

    #[test]
    #[should_panic(expected = "inner dims disagree")]
    fn matmul_shape_mismatch_panics() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        a.matmul(&b);
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(Tensor::zeros(&[3]).l2_norm(), 0.0);
        assert_eq!(Tensor::from_vec(&[2], vec![3.0, 4.0]).l2_norm(), 5.0);
        let mut rng = SeededRng::new(4);
        let t = Tensor::randn(&[17], &mut rng, 0.0, 2.0);
        let oracle = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_eq!(t.l2_norm(), oracle);
    }

    #[test]
    fn clamp01_examples() {
        let t = Tensor::from_vec(&[3], vec![-0.5, 0.5, 1.5]);
        assert_eq!(t.clamp01().data(), &[0.0, 0.5, 1.0]);
        let in_range = Tensor::from_vec(&[2], vec![0.2, 0.9]);
        assert_eq!(in_range.clamp01(), in_range);
    }

    #[test]
    fn argmax_lowest_index_tie_break() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 5.0, 5.0]);
        assert_eq!(t.argmax_rows(), vec![0, 1]);
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = SeededRng::new(6);
        let t = Tensor::randn(&[3, 5], &mut rng, 0.0, 1.0);
        assert_eq!(t.transpose().transpose(), t);
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]);
        let a0 = a.clone();
        let b0 = b.clone();
        let _ = a.add(&b);
        let _ = a.sub(&b);
        let _ = a.hadamard(&b);
        let _ = a.scale(2.0);
        let _ = a.clamp01();
        assert_eq!(a, a0);
        assert_eq!(b, b0);
    }

    proptest! {
        #[test]
        fn l2_norm_scale_homogeneous(c in -10.0f64..10.0, seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let t = Tensor::randn(&[9], &mut rng, 0.0, 1.0);
            let lhs = t.scale(c).l2_norm();
            let rhs = c.abs() * t.l2_norm();
            let denom = lhs.abs().max(rhs.abs()).max(1e-300);
            prop_assert!((lhs - rhs).abs() / denom <= 1e-14 || (lhs == 0.0 && rhs == 0.0));
        }

        #[test]
        fn clamp01_idempotent(xs in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let t = Tensor::from_vec(&[xs.len()], xs);
            let once = t.clamp01();
            prop_assert_eq!(once.clamp01(), once);
        }
    }
}
