//! Sum-of-outer-products pooling.
//!
//! `out[i, j] = sum_{h,w} alpha[i, h, w] * beta[j, h, w]`, a `[C1, C2]` feature
//! stored row-major. Because both operands are stored channel-major, each entry
//! is a dot product of two contiguous spatial planes.

use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BilinearError {
    #[error("alpha is {alpha:?} but beta is {beta:?} spatially")]
    SpatialShapeMismatch {
        alpha: (usize, usize),
        beta: (usize, usize),
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Pooled `[rows, cols]` feature, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearFeature {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Spatial size of the operands.
    pub height: usize,
    pub width: usize,
}

impl BilinearFeature {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn bilinear_pool_forward(alpha: &Tensor3, beta: &Tensor3) -> Result<BilinearFeature, BilinearError> {
    let spatial_a = (alpha.height(), alpha.width());
    let spatial_b = (beta.height(), beta.width());
    if spatial_a != spatial_b {
        return Err(BilinearError::SpatialShapeMismatch {
            alpha: spatial_a,
            beta: spatial_b,
        });
    }
    let (rows, cols) = (alpha.channels(), beta.channels());
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let a = alpha.channel(i);
        values.extend((0..cols).map(|j| dot(a, beta.channel(j))));
    }
    Ok(BilinearFeature {
        rows,
        cols,
        values,
        height: spatial_a.0,
        width: spatial_a.1,
    })
}

pub fn bilinear_pool_backward(
    grad_out: &[f64],
    alpha: &Tensor3,
    beta: &Tensor3,
) -> Result<(Tensor3, Tensor3), BilinearError> {
    let (rows, cols) = (alpha.channels(), beta.channels());
    if grad_out.len() != rows * cols || (alpha.height(), alpha.width()) != (beta.height(), beta.width()) {
        return Err(BilinearError::ShapeMismatch(format!(
            "grad of length {} for alpha {:?} and beta {:?}",
            grad_out.len(),
            alpha.shape(),
            beta.shape()
        )));
    }
    let (h, w) = (alpha.height(), alpha.width());
    let mut grad_alpha = Tensor3::zeros(rows, h, w);
    let mut grad_beta = Tensor3::zeros(cols, h, w);
    for i in 0..rows {
        let a = alpha.channel(i);
        for j in 0..cols {
            let g = grad_out[i * cols + j];
            if g == 0.0 {
                continue;
            }
            for (dst, &b) in grad_alpha.channel_mut(i).iter_mut().zip(beta.channel(j)) {
                *dst += g * b;
            }
            for (dst, &av) in grad_beta.channel_mut(j).iter_mut().zip(a) {
                *dst += g * av;
            }
        }
    }
    Ok((grad_alpha, grad_beta))
}

/// Offset inside the signed square root, keeping its slope finite at zero.
const SQRT_EPS: f64 = 1e-8;
/// Floor on the norm divided by in the L2 step.
const NORM_EPS: f64 = 1e-12;

/// Classic bilinear-CNN post-processing: signed square root followed by L2
/// normalization. `y = sign(x) (sqrt(|x| + eps) - sqrt(eps))`, `z = y / |y|`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedSqrtL2 {
    norm: f64,
    output: Vec<f64>,
}

impl SignedSqrtL2 {
    pub fn forward(x: &[f64]) -> Self {
        let rooted: Vec<f64> = x
            .iter()
            .map(|&v| v.signum() * ((v.abs() + SQRT_EPS).sqrt() - SQRT_EPS.sqrt()))
            .map(|v| if v == 0.0 { 0.0 } else { v })
            .collect();
        let norm = rooted.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        let output = rooted.iter().map(|v| v / norm).collect();
        Self { norm, output }
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Maps a gradient w.r.t. the output back to the input `x` of `forward`.
    pub fn backward(&self, x: &[f64], grad: &[f64]) -> Vec<f64> {
        let proj: f64 = self.output.iter().zip(grad).map(|(z, g)| z * g).sum();
        self.output
            .iter()
            .zip(grad)
            .zip(x)
            .map(|((z, g), xv)| {
                let grad_root = (g - z * proj) / self.norm;
                grad_root / (2.0 * (xv.abs() + SQRT_EPS).sqrt())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use crate::rng::{stream_rng, SeedStream};
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor3 {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_outer_product() {
        let a = Tensor3::from_vec(2, 1, 1, vec![1.0, 2.0]);
        let b = Tensor3::from_vec(2, 1, 1, vec![3.0, 4.0]);
        let out = bilinear_pool_forward(&a, &b).unwrap();
        assert_eq!(out.values, vec![3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn self_pooling_is_a_gram_matrix() {
        let mut rng = stream_rng(20, SeedStream::Synthetic);
        let a = random_tensor(&mut rng, 5, 3, 3);
        let out = bilinear_pool_forward(&a, &a).unwrap();
        let m = DMatrix::from_row_slice(5, 5, &out.values);
        assert_eq!(m, m.transpose());
        assert!(SymmetricEigen::new(m).eigenvalues.iter().all(|&l| l >= -1e-9));
    }

    #[test]
    fn matches_naive_loops_and_paper_shape() {
        let mut rng = stream_rng(21, SeedStream::Synthetic);
        let a = random_tensor(&mut rng, 5, 3, 4);
        let b = random_tensor(&mut rng, 2, 3, 4);
        let out = bilinear_pool_forward(&a, &b).unwrap();
        assert_eq!(out.values, oracles::naive_bilinear(&a, &b));

        let a = Tensor3::zeros(512, 14, 14);
        let b = Tensor3::zeros(20, 14, 14);
        let out = bilinear_pool_forward(&a, &b).unwrap();
        assert_eq!((out.rows, out.cols, out.values.len()), (512, 20, 10_240));
    }

    #[test]
    fn spatial_mismatch() {
        let err = bilinear_pool_forward(&Tensor3::zeros(1, 2, 2), &Tensor3::zeros(1, 2, 3)).unwrap_err();
        assert_eq!(
            err,
            BilinearError::SpatialShapeMismatch {
                alpha: (2, 2),
                beta: (2, 3)
            }
        );
        assert!(bilinear_pool_backward(&[0.0; 3], &Tensor3::zeros(1, 1, 1), &Tensor3::zeros(2, 1, 1)).is_err());
    }

    #[test]
    fn backward_special_cases() {
        let mut rng = stream_rng(22, SeedStream::Synthetic);
        let a = random_tensor(&mut rng, 3, 2, 2);
        let b = random_tensor(&mut rng, 2, 2, 2);
        let (ga, gb) = bilinear_pool_backward(&[0.0; 6], &a, &b).unwrap();
        assert!(ga.as_slice().iter().chain(gb.as_slice()).all(|&v| v == 0.0));

        let a = Tensor3::from_vec(1, 1, 1, vec![2.0]);
        let b = Tensor3::from_vec(1, 1, 1, vec![-3.0]);
        let (ga, gb) = bilinear_pool_backward(&[0.5], &a, &b).unwrap();
        assert_eq!(ga.as_slice(), &[-1.5]);
        assert_eq!(gb.as_slice(), &[1.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream_rng(23, SeedStream::Synthetic);
        for _ in 0..10 {
            let (c1, c2, h, w) = (
                rng.random_range(1..5),
                rng.random_range(1..4),
                rng.random_range(1..3),
                rng.random_range(1..4),
            );
            let a = random_tensor(&mut rng, c1, h, w);
            let b = random_tensor(&mut rng, c2, h, w);
            let upstream: Vec<f64> = (0..c1 * c2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |x: &Tensor3, y: &Tensor3| -> f64 {
                bilinear_pool_forward(x, y)
                    .unwrap()
                    .values
                    .iter()
                    .zip(&upstream)
                    .map(|(p, q)| p * q)
                    .sum()
            };
            let (ga, gb) = bilinear_pool_backward(&upstream, &a, &b).unwrap();
            let fd_a =
                oracles::fd_gradient(|v| f(&Tensor3::from_vec(c1, h, w, v.to_vec()), &b), a.as_slice(), 1e-5).unwrap();
            let fd_b =
                oracles::fd_gradient(|v| f(&a, &Tensor3::from_vec(c2, h, w, v.to_vec())), b.as_slice(), 1e-5).unwrap();
            assert!(oracles::max_relative_error(ga.as_slice(), &fd_a) < 1e-6);
            assert!(oracles::max_relative_error(gb.as_slice(), &fd_b) < 1e-6);
        }
    }

    #[test]
    fn signed_sqrt_l2_gradient() {
        let mut rng = stream_rng(24, SeedStream::Synthetic);
        let x: Vec<f64> = (0..7)
            .map(|_| rng.random_range(0.2..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let upstream: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |v: &[f64]| {
            SignedSqrtL2::forward(v)
                .output()
                .iter()
                .zip(&upstream)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let norm = SignedSqrtL2::forward(&x);
        let analytic = norm.backward(&x, &upstream);
        let fd = oracles::fd_gradient(f, &x, 1e-6).unwrap();
        assert!(oracles::max_relative_error(&analytic, &fd) < 1e-6);
        let unit: f64 = norm.output().iter().map(|v| v * v).sum();
        assert!((unit - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bilinear_in_each_argument(
            a1 in proptest::collection::vec(-2.0f64..2.0, 12),
            a2 in proptest::collection::vec(-2.0f64..2.0, 12),
            b in proptest::collection::vec(-2.0f64..2.0, 8),
            s in -3.0f64..3.0,
        ) {
            let (t1, t2, tb) = (
                Tensor3::from_vec(3, 2, 2, a1.clone()),
                Tensor3::from_vec(3, 2, 2, a2.clone()),
                Tensor3::from_vec(2, 2, 2, b),
            );
            let f1 = bilinear_pool_forward(&t1, &tb).unwrap().values;
            let f2 = bilinear_pool_forward(&t2, &tb).unwrap().values;
            let sum = Tensor3::from_vec(3, 2, 2, a1.iter().zip(&a2).map(|(x, y)| x + y).collect());
            let scaled = Tensor3::from_vec(3, 2, 2, a1.iter().map(|x| s * x).collect());
            let fs = bilinear_pool_forward(&sum, &tb).unwrap().values;
            let fc = bilinear_pool_forward(&scaled, &tb).unwrap().values;
            for i in 0..6 {
                prop_assert!((fs[i] - f1[i] - f2[i]).abs() < 1e-12);
                prop_assert!((fc[i] - s * f1[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn invariant_to_location_permutation(
            a in proptest::collection::vec(-2.0f64..2.0, 12),
            b in proptest::collection::vec(-2.0f64..2.0, 8),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..4).collect();
            perm.shuffle(&mut stream_rng(seed, SeedStream::Synthetic));
            let permute = |v: &[f64], c: usize| -> Tensor3 {
                let data = (0..c).flat_map(|ch| perm.iter().map(move |&p| v[ch * 4 + p])).collect();
                Tensor3::from_vec(c, 2, 2, data)
            };
            let base = bilinear_pool_forward(&Tensor3::from_vec(3, 2, 2, a.clone()), &Tensor3::from_vec(2, 2, 2, b.clone())).unwrap();
            let moved = bilinear_pool_forward(&permute(&a, 3), &permute(&b, 2)).unwrap();
            for (x, y) in base.values.iter().zip(&moved.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn swapping_arguments_transposes(
            a in proptest::collection::vec(-2.0f64..2.0, 12),
            b in proptest::collection::vec(-2.0f64..2.0, 8),
        ) {
            let ta = Tensor3::from_vec(3, 2, 2, a);
            let tb = Tensor3::from_vec(2, 2, 2, b);
            let ab = bilinear_pool_forward(&ta, &tb).unwrap();
            let ba = bilinear_pool_forward(&tb, &ta).unwrap();
            for i in 0..3 {
                for j in 0..2 {
                    prop_assert_eq!(ab.get(i, j), ba.get(j, i));
                }
            }
        }
    }
}
