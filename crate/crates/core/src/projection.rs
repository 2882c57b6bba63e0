//! The 1×1 convolution that maps a C-channel activation map to K channels, and
//! its PCA / FastICA initializers.
//!
//! Weights are stored row-major as `[C, K]`, i.e. `weights[c * K + k]`, so that
//! `beta[k, h, w] = sum_c weights[c, k] * alpha[c, h, w] + bias[k]`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::features::{FeatureError, FeatureStore};
use crate::rng::{stream_rng, SeedStream};
use crate::tensor::Tensor3;

const FTPJ_MAGIC: &[u8; 4] = b"FTPJ";
const FTPJ_VERSION: u32 = 1;

/// Eigenvalues below `RANK_TOLERANCE * largest` count as zero.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum ProjectionError {
    #[error(
        "requested {requested} components but the samples have only {available} directions with positive variance"
    )]
    RankDeficient { requested: usize, available: usize },
    #[error("samples have zero variance")]
    DegenerateSamples,
    #[error("need at least one component")]
    NoComponents,
    #[error("image {image_id}: cannot draw {per_image} locations from {locations}")]
    PerImageTooLarge {
        image_id: u32,
        per_image: usize,
        locations: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid fitting option: {0}")]
    InvalidOption(String),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error("projection file: {0}")]
    Format(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pca,
    Ica,
}

impl Method {
    fn tag(self) -> u8 {
        match self {
            Method::Pca => 0,
            Method::Ica => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        match tag {
            0 => Ok(Method::Pca),
            1 => Ok(Method::Ica),
            t => Err(DecodeError::Invalid(format!("unknown projection method {t}"))),
        }
    }
}

/// Feature vectors drawn from spatial locations of training maps, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBank {
    pub samples: DMatrix<f64>,
    pub seed: u64,
}

impl SampleBank {
    pub fn new(samples: DMatrix<f64>, seed: u64) -> Self {
        Self { samples, seed }
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.samples.ncols()
    }
}

/// Draws `per_image` distinct spatial locations from every map in `ids`.
///
/// Locations come from the [`SeedStream::LocationSampling`] stream, consumed in
/// the order of `ids`, so the bank depends only on `(ids, per_image, seed)`.
pub fn sample_locations(
    store: &FeatureStore,
    ids: &[u32],
    per_image: usize,
    seed: u64,
) -> Result<SampleBank, ProjectionError> {
    let channels = store.channels();
    let mut rng = stream_rng(seed, SeedStream::LocationSampling);
    let mut rows: Vec<f64> = Vec::with_capacity(ids.len() * per_image * channels);
    for &id in ids {
        let map = store.read(id)?;
        let plane = map.height * map.width;
        if per_image > plane {
            return Err(ProjectionError::PerImageTooLarge {
                image_id: id,
                per_image,
                locations: plane,
            });
        }
        for loc in index::sample(&mut rng, plane, per_image) {
            rows.extend((0..channels).map(|c| f64::from(map.values[c * plane + loc])));
        }
    }
    let m = rows.len() / channels.max(1);
    if m < 10 * channels {
        log::warn!(
            "sample bank has {m} rows for {channels} channels; at least {} recommended",
            10 * channels
        );
    }
    Ok(SampleBank::new(DMatrix::from_row_slice(m, channels, &rows), seed))
}

/// Fitting by-products kept for diagnostics; not persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub mean: Vec<f64>,
    /// All C eigenvalues of the sample covariance, nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors as columns, ordered like `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    /// FastICA fixed-point iterations (0 for PCA).
    pub iterations: usize,
    /// False when FastICA stopped at `max_iter` before reaching `tol`.
    pub converged: bool,
}

/// Initial weights and bias of the 1×1 projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    pub channels: usize,
    pub components: usize,
    pub method: Method,
    /// `[C, K]` row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub diagnostics: Option<FitDiagnostics>,
}

impl ProjectionBasis {
    /// `true` when FastICA hit `max_iter` without converging.
    pub fn convergence_warning(&self) -> bool {
        self.diagnostics.as_ref().is_some_and(|d| !d.converged)
    }

    pub fn weight_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.channels, self.components, &self.weights)
    }

    /// Sample variance (denominator M - 1) of each projected component over `bank`.
    pub fn projected_variances(&self, bank: &SampleBank) -> Vec<f64> {
        let projected = &bank.samples * self.weight_matrix();
        column_variances(&projected)
    }

    /// Serializes to `FTPJ`: magic, version, C, K, method tag, weights and bias
    /// as f32, CRC32. Values are rounded to f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.put_bytes(FTPJ_MAGIC);
        enc.put_u32(FTPJ_VERSION);
        enc.put_u32(self.channels as u32);
        enc.put_u32(self.components as u32);
        enc.put_u8(self.method.tag());
        for &w in self.weights.iter().chain(&self.bias) {
            enc.put_f32(w as f32);
        }
        enc.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProjectionError> {
        let mut dec = Decoder::with_trailing_crc(bytes)?;
        dec.expect_magic(FTPJ_MAGIC)?;
        dec.expect_version(FTPJ_VERSION)?;
        let channels = dec.u32()? as usize;
        let components = dec.u32()? as usize;
        let method = Method::from_tag(dec.u8()?)?;
        if components == 0 || components > channels {
            return Err(DecodeError::Invalid(format!("{components} components for {channels} channels")).into());
        }
        let mut read =
            |n: usize| -> Result<Vec<f64>, DecodeError> { (0..n).map(|_| dec.f32().map(f64::from)).collect() };
        let weights = read(channels * components)?;
        let bias = read(components)?;
        dec.finish()?;
        Ok(Self {
            channels,
            components,
            method,
            weights,
            bias,
            diagnostics: None,
        })
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<(), ProjectionError> {
        sink.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self, ProjectionError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn column_variances(x: &DMatrix<f64>) -> Vec<f64> {
    let m = x.nrows() as f64;
    x.column_iter()
        .map(|col| {
            let mean = col.sum() / m;
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
        })
        .collect()
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let m = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / m))
}

/// Flips each column so that its largest-magnitude entry is positive.
fn fix_column_signs(weights: &mut DMatrix<f64>) {
    for mut col in weights.column_iter_mut() {
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() {
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

fn basis_from(
    weights: DMatrix<f64>,
    mean: &DVector<f64>,
    method: Method,
    diagnostics: FitDiagnostics,
) -> ProjectionBasis {
    let (channels, components) = weights.shape();
    let bias = -(weights.transpose() * mean);
    let mut row_major = Vec::with_capacity(channels * components);
    for c in 0..channels {
        row_major.extend(weights.row(c).iter());
    }
    ProjectionBasis {
        channels,
        components,
        method,
        weights: row_major,
        bias: bias.iter().copied().collect(),
        diagnostics: Some(diagnostics),
    }
}

struct Whitening {
    mean: DVector<f64>,
    /// `[C, K]`, columns `v_k / sqrt(lambda_k)`.
    matrix: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

fn whiten(bank: &SampleBank, k: usize) -> Result<Whitening, ProjectionError> {
    if k == 0 {
        return Err(ProjectionError::NoComponents);
    }
    let (m, c) = bank.samples.shape();
    if k > c {
        return Err(ProjectionError::RankDeficient {
            requested: k,
            available: c,
        });
    }
    if m < 2 {
        return Err(ProjectionError::DegenerateSamples);
    }
    let mean = column_means(&bank.samples);
    let mut centered = bank.samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / (m as f64 - 1.0);
    if cov.trace() <= 0.0 || !cov.trace().is_finite() {
        return Err(ProjectionError::DegenerateSamples);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut eigenvectors = DMatrix::zeros(c, c);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    fix_column_signs(&mut eigenvectors);

    let largest = eigenvalues[0];
    let available = eigenvalues
        .iter()
        .take_while(|&&l| l > largest * RANK_TOLERANCE && l > 0.0)
        .count();
    if available < k {
        return Err(ProjectionError::RankDeficient {
            requested: k,
            available,
        });
    }
    let mut matrix = eigenvectors.columns(0, k).into_owned();
    for (j, mut col) in matrix.column_iter_mut().enumerate() {
        col /= eigenvalues[j].sqrt();
    }
    Ok(Whitening {
        mean,
        matrix,
        eigenvalues,
        eigenvectors,
    })
}

/// PCA whitening: the top-`k` covariance eigenvectors scaled to unit projected
/// variance, with bias `-W^T mean` so the mean sample maps to zero.
pub fn fit_pca(bank: &SampleBank, k: usize) -> Result<ProjectionBasis, ProjectionError> {
    let w = whiten(bank, k)?;
    let diagnostics = FitDiagnostics {
        mean: w.mean.iter().copied().collect(),
        eigenvalues: w.eigenvalues,
        eigenvectors: w.eigenvectors,
        iterations: 0,
        converged: true,
    };
    Ok(basis_from(w.matrix, &w.mean, Method::Pca, diagnostics))
}

/// Options for [`fit_fastica`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcaOptions {
    pub components: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl IcaOptions {
    pub fn new(components: usize) -> Self {
        Self {
            components,
            max_iter: 200,
            tol: 1e-4,
            seed: 0,
        }
    }
}

/// `(W W^T)^{-1/2} W`, which makes the rows of `W` orthonormal.
fn symmetric_decorrelation(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt()));
    &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * w
}

/// Symmetric FastICA with the log-cosh contrast (`g = tanh`) on PCA-whitened
/// samples.
///
/// Iteration stops when `max_i |1 - |<w_i^new, w_i^old>|| < tol` or after
/// `max_iter` rounds; the latter is reported through
/// [`ProjectionBasis::convergence_warning`], not as an error.
pub fn fit_fastica(bank: &SampleBank, options: IcaOptions) -> Result<ProjectionBasis, ProjectionError> {
    if options.max_iter == 0 {
        return Err(ProjectionError::InvalidOption("max_iter must be at least 1".into()));
    }
    if options.tol.is_nan() || options.tol <= 0.0 {
        return Err(ProjectionError::InvalidOption("tol must be positive".into()));
    }
    let k = options.components;
    let white = whiten(bank, k)?;
    let m = bank.len() as f64;

    let mut z = &bank.samples * &white.matrix;
    let offset = white.matrix.transpose() * &white.mean;
    for mut row in z.row_iter_mut() {
        row -= offset.transpose();
    }

    let mut rng = stream_rng(options.seed, SeedStream::IcaInit);
    let init = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let mut unmixing = symmetric_decorrelation(&init);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iter {
        iterations += 1;
        let u = &z * unmixing.transpose();
        let g = u.map(f64::tanh);
        let g_prime_mean: Vec<f64> = g
            .column_iter()
            .map(|col| col.iter().map(|t| 1.0 - t * t).sum::<f64>() / m)
            .collect();
        let mut next = g.tr_mul(&z) / m;
        for (i, mut row) in next.row_iter_mut().enumerate() {
            row -= unmixing.row(i) * g_prime_mean[i];
        }
        let next = symmetric_decorrelation(&next);
        let change = next
            .row_iter()
            .zip(unmixing.row_iter())
            .map(|(a, b)| (1.0 - a.dot(&b).abs()).abs())
            .fold(0.0f64, f64::max);
        unmixing = next;
        if change < options.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("FastICA did not converge within {} iterations", options.max_iter);
    }

    let mut weights = &white.matrix * unmixing.transpose();
    fix_column_signs(&mut weights);
    let diagnostics = FitDiagnostics {
        mean: white.mean.iter().copied().collect(),
        eigenvalues: white.eigenvalues,
        eigenvectors: white.eigenvectors,
        iterations,
        converged,
    };
    Ok(basis_from(weights, &white.mean, Method::Ica, diagnostics))
}

fn check_projection(weights: &[f64], bias: &[f64], channels: usize) -> Result<usize, ProjectionError> {
    let k = bias.len();
    if k == 0 || weights.len() != channels * k {
        return Err(ProjectionError::ShapeMismatch(format!(
            "weights of length {} and bias of length {k} do not form a [{channels}, K] projection",
            weights.len()
        )));
    }
    Ok(k)
}

/// `beta[k] = sum_c weights[c, k] * alpha[c] + bias[k]` at every location.
pub fn project_forward(weights: &[f64], bias: &[f64], alpha: &Tensor3) -> Result<Tensor3, ProjectionError> {
    let (c_in, h, w) = alpha.shape();
    let k_out = check_projection(weights, bias, c_in)?;
    let mut beta = Tensor3::zeros(k_out, h, w);
    for (k, &b) in bias.iter().enumerate() {
        beta.channel_mut(k).fill(b);
    }
    for c in 0..c_in {
        let src = alpha.channel(c);
        for k in 0..k_out {
            let wk = weights[c * k_out + k];
            if wk == 0.0 {
                continue;
            }
            for (dst, &a) in beta.channel_mut(k).iter_mut().zip(src) {
                *dst += wk * a;
            }
        }
    }
    Ok(beta)
}

/// Gradients of [`project_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrads {
    pub alpha: Tensor3,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn project_backward(
    grad_beta: &Tensor3,
    alpha: &Tensor3,
    weights: &[f64],
) -> Result<ProjectionGrads, ProjectionError> {
    let (c_in, h, w) = alpha.shape();
    let k_out = grad_beta.channels();
    if (grad_beta.height(), grad_beta.width()) != (h, w) || weights.len() != c_in * k_out {
        return Err(ProjectionError::ShapeMismatch(format!(
            "grad_beta {:?}, alpha {:?}, {} weights",
            grad_beta.shape(),
            alpha.shape(),
            weights.len()
        )));
    }
    let bias: Vec<f64> = (0..k_out).map(|k| grad_beta.channel(k).iter().sum()).collect();
    let mut grad_w = vec![0.0; c_in * k_out];
    let mut grad_alpha = Tensor3::zeros(c_in, h, w);
    for c in 0..c_in {
        let a = alpha.channel(c);
        for k in 0..k_out {
            let g = grad_beta.channel(k);
            grad_w[c * k_out + k] = a.iter().zip(g).map(|(x, y)| x * y).sum();
            let wk = weights[c * k_out + k];
            if wk != 0.0 {
                for (dst, &gv) in grad_alpha.channel_mut(c).iter_mut().zip(g) {
                    *dst += wk * gv;
                }
            }
        }
    }
    Ok(ProjectionGrads {
        alpha: grad_alpha,
        weights: grad_w,
        bias,
    })
}
