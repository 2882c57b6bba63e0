//! The classification head: 1×1 projection, bilinear pooling, flatten and a
//! linear layer with no non-linearity.
//!
//! Layouts:
//!
//! * `proj_weights` is `[C, K]` row-major (`c * K + k`), `proj_bias` is `[K]`.
//! * The pooled `[C, K]` feature is flattened c-major: index `c * K + k`.
//! * `fc_weights` is `[C·K, N]` row-major (`f * N + n`), `fc_bias` is `[N]`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bilinear::{bilinear_pool_backward, bilinear_pool_forward, SignedSqrtL2};
use crate::codec::{DecodeError, Decoder, Encoder};
use crate::exec::Execution;
use crate::projection::{project_backward, project_forward, ProjectionBasis};
use crate::rng::{stream_rng, SeedStream};
use crate::tensor::Tensor3;

const FTMD_MAGIC: &[u8; 4] = b"FTMD";
const FTMD_VERSION: u32 = 1;

/// Input size of the first VGG16 fully connected layer (512·7·7).
pub const VGG16_FC_INPUT: u64 = 25_088;
/// Width of the two hidden VGG16 fully connected layers.
pub const VGG16_FC_HIDDEN: u64 = 4_096;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("projection basis is [{basis_c}, {basis_k}] but the model expects [{c}, {k}]")]
    DimMismatch {
        basis_c: usize,
        basis_k: usize,
        c: usize,
        k: usize,
    },
    #[error("forward cache was computed with different parameters")]
    StaleCache,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Format(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// On-disk precision of checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Backbone channels C.
    pub channels: usize,
    /// Projection components K.
    pub components: usize,
    /// Number of attributes N.
    pub num_classes: usize,
    pub dtype: Dtype,
    /// Apply signed square root and L2 normalization after pooling.
    pub bcnn_normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 512,
            components: 20,
            num_classes: 312,
            dtype: Dtype::F32,
            bcnn_normalize: false,
        }
    }
}

impl ModelConfig {
    pub fn new(channels: usize, components: usize, num_classes: usize) -> Self {
        Self {
            channels,
            components,
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels == 0 || self.components == 0 || self.num_classes == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        if self.components > self.channels {
            return Err(ModelError::InvalidConfig(format!(
                "{} components exceed {} channels",
                self.components, self.channels
            )));
        }
        Ok(())
    }

    /// Length of the flattened pooled feature, `C·K`.
    pub fn feature_len(&self) -> usize {
        self.channels * self.components
    }
}

/// The four trainable tensors. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensors {
    pub proj_weights: Vec<f64>,
    pub proj_bias: Vec<f64>,
    pub fc_weights: Vec<f64>,
    pub fc_bias: Vec<f64>,
}

impl ParamTensors {
    pub fn zeros(config: &ModelConfig) -> Self {
        let f = config.feature_len();
        Self {
            proj_weights: vec![0.0; f],
            proj_bias: vec![0.0; config.components],
            fc_weights: vec![0.0; f * config.num_classes],
            fc_bias: vec![0.0; config.num_classes],
        }
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [&self.proj_weights, &self.proj_bias, &self.fc_weights, &self.fc_bias]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.proj_weights,
            &mut self.proj_bias,
            &mut self.fc_weights,
            &mut self.fc_bias,
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Concatenation in `proj_weights, proj_bias, fc_weights, fc_bias` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    /// Inverse of [`ParamTensors::flatten`] for the same shapes.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length mismatch");
        let mut rest = flat;
        for s in self.slices_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
    }
}

/// Model configuration plus parameter values.
///
/// Every mutable borrow of the values bumps a generation counter, so a
/// [`ForwardCache`] taken before an update is rejected by [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    values: ParamTensors,
    generation: u64,
}

impl ModelParams {
    pub fn new(config: ModelConfig, values: ParamTensors) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = ParamTensors::zeros(&config);
        for (name, (have, want)) in ["proj_weights", "proj_bias", "fc_weights", "fc_bias"]
            .iter()
            .zip(values.slices().iter().zip(expected.slices()))
        {
            if have.len() != want.len() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{name} has {} values, expected {}",
                    have.len(),
                    want.len()
                )));
            }
        }
        Ok(Self {
            config,
            values,
            generation: 0,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        Self::new(config, ParamTensors::zeros(&config))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn values(&self) -> &ParamTensors {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut ParamTensors {
        self.generation += 1;
        &mut self.values
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    /// Serializes to `FTMD`: magic, version, C, K, N, dtype tag, normalize
    /// flag, the four tensors in the configured precision, CRC32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut enc = Encoder::new();
        enc.put_bytes(FTMD_MAGIC);
        enc.put_u32(FTMD_VERSION);
        enc.put_u32(c.channels as u32);
        enc.put_u32(c.components as u32);
        enc.put_u32(c.num_classes as u32);
        enc.put_u8(match c.dtype {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        });
        enc.put_u8(u8::from(c.bcnn_normalize));
        for s in self.values.slices() {
            for &v in s {
                match c.dtype {
                    Dtype::F32 => enc.put_f32(v as f32),
                    Dtype::F64 => enc.put_f64(v),
                }
            }
        }
        enc.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut dec = Decoder::with_trailing_crc(bytes)?;
        dec.expect_magic(FTMD_MAGIC)?;
        dec.expect_version(FTMD_VERSION)?;
        let channels = dec.u32()? as usize;
        let components = dec.u32()? as usize;
        let num_classes = dec.u32()? as usize;
        let dtype = match dec.u8()? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            t => return Err(DecodeError::Invalid(format!("unknown dtype tag {t}")).into()),
        };
        let bcnn_normalize = match dec.u8()? {
            0 => false,
            1 => true,
            t => return Err(DecodeError::Invalid(format!("bad normalize flag {t}")).into()),
        };
        let config = ModelConfig {
            channels,
            components,
            num_classes,
            dtype,
            bcnn_normalize,
        };
        config.validate()?;
        let mut values = ParamTensors::zeros(&config);
        for s in values.slices_mut() {
            for v in s.iter_mut() {
                *v = match dtype {
                    Dtype::F32 => f64::from(dec.f32()?),
                    Dtype::F64 => dec.f64()?,
                };
            }
        }
        dec.finish()?;
        Self::new(config, values)
    }

    /// Writes a checkpoint, refusing parameters that are not finite.
    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<(), ModelError> {
        if !self.values.is_finite() {
            return Err(ModelError::NonFinite("checkpoint parameters"));
        }
        sink.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Intermediates of one [`forward`] call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    alpha: Tensor3,
    beta: Tensor3,
    pooled: Vec<f64>,
    normalization: Option<SignedSqrtL2>,
    generation: u64,
}

impl ForwardCache {
    /// Flattened pooled feature fed to the linear layer.
    pub fn features(&self) -> &[f64] {
        match &self.normalization {
            Some(n) => n.output(),
            None => &self.pooled,
        }
    }

    pub fn beta(&self) -> &Tensor3 {
        &self.beta
    }
}

/// Computes the `N` raw scores of one activation map.
pub fn forward(params: &ModelParams, alpha: &Tensor3) -> Result<(Vec<f64>, ForwardCache), ModelError> {
    let cfg = &params.config;
    if alpha.channels() != cfg.channels {
        return Err(ModelError::ShapeMismatch(format!(
            "activation has {} channels, model expects {}",
            alpha.channels(),
            cfg.channels
        )));
    }
    let p = &params.values;
    let beta =
        project_forward(&p.proj_weights, &p.proj_bias, alpha).map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
    let pooled = bilinear_pool_forward(alpha, &beta)
        .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?
        .values;
    let normalization = cfg.bcnn_normalize.then(|| SignedSqrtL2::forward(&pooled));
    let cache = ForwardCache {
        alpha: alpha.clone(),
        beta,
        pooled,
        normalization,
        generation: params.generation,
    };
    let n = cfg.num_classes;
    let mut logits = p.fc_bias.clone();
    for (f, &x) in cache.features().iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &p.fc_weights[f * n..(f + 1) * n];
        for (l, &w) in logits.iter_mut().zip(row) {
            *l += x * w;
        }
    }
    Ok((logits, cache))
}

/// Per-image gradient pieces. The `[C·K, N]` linear-layer gradient is kept in
/// factored form (`features ⊗ grad_logits`) until batch reduction.
#[derive(Debug, Clone)]
pub struct ImageGrads {
    pub proj_weights: Vec<f64>,
    pub proj_bias: Vec<f64>,
    pub features: Vec<f64>,
    pub grad_logits: Vec<f64>,
    pub alpha: Option<Tensor3>,
}

/// Chain rule through the head for one image.
pub fn backward_image(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_logits: &[f64],
    with_alpha: bool,
) -> Result<ImageGrads, ModelError> {
    if cache.generation != params.generation {
        return Err(ModelError::StaleCache);
    }
    let cfg = &params.config;
    let (n, f_len) = (cfg.num_classes, cfg.feature_len());
    if grad_logits.len() != n {
        return Err(ModelError::ShapeMismatch(format!(
            "{} logit gradients for {n} classes",
            grad_logits.len()
        )));
    }
    let p = &params.values;
    let grad_features: Vec<f64> = (0..f_len)
        .map(|f| {
            p.fc_weights[f * n..(f + 1) * n]
                .iter()
                .zip(grad_logits)
                .map(|(w, g)| w * g)
                .sum()
        })
        .collect();
    let grad_pooled = match &cache.normalization {
        Some(norm) => norm.backward(&cache.pooled, &grad_features),
        None => grad_features,
    };
    let (grad_alpha_pool, grad_beta) = bilinear_pool_backward(&grad_pooled, &cache.alpha, &cache.beta)
        .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
    let proj = project_backward(&grad_beta, &cache.alpha, &p.proj_weights)
        .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
    let alpha = with_alpha.then(|| {
        let mut total = grad_alpha_pool;
        for (t, g) in total.as_mut_slice().iter_mut().zip(proj.alpha.as_slice()) {
            *t += g;
        }
        total
    });
    Ok(ImageGrads {
        proj_weights: proj.weights,
        proj_bias: proj.bias,
        features: cache.features().to_vec(),
        grad_logits: grad_logits.to_vec(),
        alpha,
    })
}

/// Sums per-image gradients into `out` (overwritten), multiplied by `scale`.
///
/// Each output entry is summed over images in index order, so the result does
/// not depend on `exec`.
pub fn reduce_gradients(images: &[ImageGrads], scale: f64, out: &mut ParamTensors, exec: Execution) {
    let n = out.fc_bias.len();
    let sum_field = |field: fn(&ImageGrads) -> &[f64], dst: &mut [f64]| {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = images.iter().map(|g| field(g)[i]).sum::<f64>() * scale;
        }
    };
    sum_field(|g| &g.proj_weights, &mut out.proj_weights);
    sum_field(|g| &g.proj_bias, &mut out.proj_bias);
    sum_field(|g| &g.grad_logits, &mut out.fc_bias);
    exec.for_each_chunk_mut(&mut out.fc_weights, n, |f, row| {
        row.fill(0.0);
        for g in images {
            let x = g.features[f];
            if x == 0.0 {
                continue;
            }
            for (r, &gl) in row.iter_mut().zip(&g.grad_logits) {
                *r += x * gl;
            }
        }
        row.iter_mut().for_each(|r| *r *= scale);
    });
}

/// Full gradients of one image.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamTensors,
    /// Gradient w.r.t. the input activation map. It has two terms because the
    /// activation feeds both the projection and the pooling.
    pub alpha: Tensor3,
}

/// Exact gradients of `sum_n grad_logits[n] * logits[n]` w.r.t. all parameters
/// and the input.
pub fn backward(params: &ModelParams, cache: &ForwardCache, grad_logits: &[f64]) -> Result<Gradients, ModelError> {
    let image = backward_image(params, cache, grad_logits, true)?;
    let mut out = ParamTensors::zeros(&params.config);
    let alpha = image.alpha.clone().expect("requested");
    reduce_gradients(std::slice::from_ref(&image), 1.0, &mut out, Execution::Sequential);
    Ok(Gradients { params: out, alpha })
}

/// Scores for a batch of activation maps, in input order.
pub fn predict(params: &ModelParams, alphas: &[Tensor3], exec: Execution) -> Result<Vec<Vec<f64>>, ModelError> {
    exec.map(alphas, |a| forward(params, a).map(|(logits, _)| logits))
        .into_iter()
        .collect()
}

/// Trainable parameters of the head: `C·K + K + (C·K)·N + N`.
pub fn count_parameters(config: &ModelConfig) -> u64 {
    let (c, k, n) = (
        config.channels as u64,
        config.components as u64,
        config.num_classes as u64,
    );
    c * k + k + c * k * n + n
}

/// Parameters of the three VGG16 fully connected layers with an `N`-way output.
pub fn count_baseline_fc(num_classes: usize) -> u64 {
    let n = num_classes as u64;
    VGG16_FC_INPUT * VGG16_FC_HIDDEN
        + VGG16_FC_HIDDEN
        + VGG16_FC_HIDDEN * VGG16_FC_HIDDEN
        + VGG16_FC_HIDDEN
        + VGG16_FC_HIDDEN * n
        + n
}

/// Head versus VGG16 fully-connected parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParameterReport {
    pub head: u64,
    pub baseline_fc: u64,
    /// `baseline_fc / head`.
    pub ratio: f64,
}

pub fn ratio_report(config: &ModelConfig) -> ParameterReport {
    let head = count_parameters(config);
    let baseline_fc = count_baseline_fc(config.num_classes);
    ParameterReport {
        head,
        baseline_fc,
        ratio: baseline_fc as f64 / head as f64,
    }
}

/// Copies the projection from `basis` and draws the linear layer from
/// Xavier-uniform `U(-b, b)`, `b = sqrt(6 / (C·K + N))`, with zero bias.
pub fn init_params(config: ModelConfig, basis: &ProjectionBasis, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    if basis.channels != config.channels || basis.components != config.components {
        return Err(ModelError::DimMismatch {
            basis_c: basis.channels,
            basis_k: basis.components,
            c: config.channels,
            k: config.components,
        });
    }
    let mut values = ParamTensors::zeros(&config);
    values.proj_weights.copy_from_slice(&basis.weights);
    values.proj_bias.copy_from_slice(&basis.bias);
    let bound = xavier_bound(&config);
    let mut rng = stream_rng(seed, SeedStream::ParamInit);
    for w in values.fc_weights.iter_mut() {
        *w = rng.random_range(-bound..=bound);
    }
    ModelParams::new(config, values)
}

pub fn xavier_bound(config: &ModelConfig) -> f64 {
    (6.0 / (config.feature_len() + config.num_classes) as f64).sqrt()
}
