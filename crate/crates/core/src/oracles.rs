//! Slow reference implementations used by the tests.
//!
//! Nothing here calls into the production layers: every quantity is recomputed
//! with explicit scalar loops in 64-bit, straight from its definition.

#![allow(clippy::needless_range_loop)]

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{make_split, parse_vocabulary, AttributeVocabulary, DatasetSplit, LabelMatrix};
use crate::features::{write_store, FeatureMap, FeatureStore};
use crate::model::{ModelConfig, ParamTensors};
use crate::projection::SampleBank;
use crate::rng::{stream_rng, SeedStream};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("function is not finite around coordinate {index}")]
    NonFiniteEvaluation { index: usize },
}

/// `beta[k][l] = b[k] + sum_c w[c*K+k] * alpha[c][l]`, flattened k-major.
pub fn naive_projection(weights: &[f64], bias: &[f64], alpha: &Tensor3) -> Vec<f64> {
    let (c_dim, k_dim) = (alpha.channels(), bias.len());
    let (h, w) = (alpha.height(), alpha.width());
    let mut out = vec![0.0; k_dim * h * w];
    for k in 0..k_dim {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[k];
                for c in 0..c_dim {
                    acc += weights[c * k_dim + k] * alpha.get(c, y, x);
                }
                out[(k * h + y) * w + x] = acc;
            }
        }
    }
    out
}

/// `out[i*C2+j] = sum over locations of a[i][l] * b[j][l]`.
pub fn naive_bilinear(a: &Tensor3, b: &Tensor3) -> Vec<f64> {
    let mut out = vec![0.0; a.channels() * b.channels()];
    for i in 0..a.channels() {
        for j in 0..b.channels() {
            let mut acc = 0.0;
            for y in 0..a.height() {
                for x in 0..a.width() {
                    acc += a.get(i, y, x) * b.get(j, y, x);
                }
            }
            out[i * b.channels() + j] = acc;
        }
    }
    out
}

/// Projection, bilinear pooling and the linear layer, without normalization.
pub fn naive_forward(p: &ParamTensors, c_dim: usize, k_dim: usize, n_dim: usize, alpha: &Tensor3) -> Vec<f64> {
    assert_eq!(alpha.channels(), c_dim, "channel mismatch");
    let (h, w) = (alpha.height(), alpha.width());
    let mut beta = vec![vec![0.0; h * w]; k_dim];
    for (k, plane) in beta.iter_mut().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let mut acc = p.proj_bias[k];
                for c in 0..c_dim {
                    acc += p.proj_weights[c * k_dim + k] * alpha.get(c, y, x);
                }
                plane[y * w + x] = acc;
            }
        }
    }
    let mut logits = p.fc_bias.clone();
    for c in 0..c_dim {
        for k in 0..k_dim {
            let mut z = 0.0;
            for y in 0..h {
                for x in 0..w {
                    z += alpha.get(c, y, x) * beta[k][y * w + x];
                }
            }
            for (n, l) in logits.iter_mut().enumerate().take(n_dim) {
                *l += p.fc_weights[(c * k_dim + k) * n_dim + n] * z;
            }
        }
    }
    logits
}

/// Central differences `(f(x+h e_i) - f(x-h e_i)) / 2h`.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>, OracleError> {
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        point[i] = x[i] + h;
        let up = f(&point);
        point[i] = x[i] - h;
        let down = f(&point);
        point[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(OracleError::NonFiniteEvaluation { index: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest `|a-b| / max(|a|, |b|, 1e-3)`; the floor keeps entries that should
/// be zero from dominating through finite-difference noise.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Two independent unit-variance uniform sources and their linear mixture.
pub struct MixedSources {
    pub bank: SampleBank,
    /// `M x 2` true sources.
    pub sources: DMatrix<f64>,
}

/// `X = S A^T` with `S` uniform on `[-sqrt 3, sqrt 3]`.
pub fn mixed_uniform_sources(m: usize, mixing: [[f64; 2]; 2], seed: u64) -> MixedSources {
    let mut rng = stream_rng(seed, SeedStream::Synthetic);
    let half = 3f64.sqrt();
    let sources = DMatrix::from_fn(m, 2, |_, _| rng.random_range(-half..half));
    let a = DMatrix::from_row_slice(2, 2, &[mixing[0][0], mixing[0][1], mixing[1][0], mixing[1][1]]);
    let mixed = &sources * a.transpose();
    MixedSources {
        bank: SampleBank::new(mixed, seed),
        sources,
    }
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// `log(1 + sum over (v negative, u positive) of exp(f_v - f_u))` and its
/// gradient, summing the pairs literally.
pub fn brute_smooth_loss(logits: &[f64], row: &[u8]) -> (f64, Vec<f64>) {
    let mut z = 1.0;
    let mut pair_terms = Vec::new();
    for v in 0..row.len() {
        for u in 0..row.len() {
            if row[v] == 0 && row[u] == 1 {
                let e = (logits[v] - logits[u]).exp();
                z += e;
                pair_terms.push((v, u, e));
            }
        }
    }
    let mut grad = vec![0.0; logits.len()];
    for (v, u, e) in pair_terms {
        grad[v] += e / z;
        grad[u] -= e / z;
    }
    (z.ln(), grad)
}

/// Worst-pair hinge loss by scanning all pairs, `v` then `u` ascending, keeping
/// the first strict maximum. The pair is `None` when the loss is zero.
pub fn brute_hinge_loss(logits: &[f64], row: &[u8]) -> (f64, Option<(usize, usize)>) {
    let mut best = f64::NEG_INFINITY;
    let mut pair = None;
    for v in 0..row.len() {
        for u in 0..row.len() {
            if row[v] == 0 && row[u] == 1 {
                let m = 1.0 + logits[v] - logits[u];
                if m > best {
                    best = m;
                    pair = Some((v, u));
                }
            }
        }
    }
    if best > 0.0 {
        (best, pair)
    } else {
        (0.0, None)
    }
}

/// 1-based rank of item `i`: one plus the number of items scored higher, or
/// scored equal with a lower index.
fn literal_rank(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

/// Mean over relevant items of `#{relevant ranked at or above} / rank`.
fn literal_average(scores: &[f64], rel: &[u8]) -> Option<f64> {
    let relevant: Vec<usize> = (0..rel.len()).filter(|&i| rel[i] != 0).collect();
    if relevant.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &relevant {
        let tau = literal_rank(scores, i);
        let above = relevant.iter().filter(|&&j| literal_rank(scores, j) <= tau).count();
        total += above as f64 / tau as f64;
    }
    Some(total / relevant.len() as f64)
}

/// Ranking-based average precision of one image by the double-loop definition.
/// Panics on an empty relevant set.
pub fn exhaustive_avgprec(logits: &[f64], row: &[u8]) -> f64 {
    literal_average(logits, row).expect("nonempty relevant set")
}

/// Per-label non-interpolated AP from precision@k at every relevant hit.
pub fn exhaustive_ap(scores: &[f64], rel: &[u8]) -> Option<f64> {
    literal_average(scores, rel)
}

/// All-point interpolated AP: each hit takes the best precision at any rank
/// at or below it.
pub fn interpolated_ap(scores: &[f64], rel: &[u8]) -> Option<f64> {
    let m = scores.len();
    let mut by_rank = vec![0usize; m];
    for i in 0..m {
        by_rank[literal_rank(scores, i) - 1] = i;
    }
    let mut precision = vec![0.0; m];
    let mut hits = 0usize;
    for (r, &i) in by_rank.iter().enumerate() {
        hits += usize::from(rel[i] != 0);
        precision[r] = hits as f64 / (r + 1) as f64;
    }
    if hits == 0 {
        return None;
    }
    let mut best_after = vec![0.0; m];
    let mut best: f64 = 0.0;
    for r in (0..m).rev() {
        best = best.max(precision[r]);
        best_after[r] = best;
    }
    let total: f64 = (0..m).filter(|&r| rel[by_rank[r]] != 0).map(|r| best_after[r]).sum();
    Some(total / hits as f64)
}

/// Shape of a planted dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedOptions {
    pub images: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: usize,
    /// Images numbered `1..=train` form the official training partition.
    pub train: usize,
    pub val_size: usize,
    /// Minimum `|score - threshold|`, in units of each label's score spread.
    pub margin: f64,
    /// Standard deviation of the activations.
    pub scale: f64,
    pub seed: u64,
}

impl Default for PlantedOptions {
    fn default() -> Self {
        Self {
            images: 200,
            channels: 4,
            height: 2,
            width: 2,
            labels: 6,
            train: 160,
            val_size: 20,
            margin: 1.0,
            scale: 4.0,
            seed: 0,
        }
    }
}

/// Synthetic data whose labels threshold a known projection + bilinear +
/// linear score, so a model with `K = C` can represent the rule exactly.
pub struct PlantedDataset {
    pub options: PlantedOptions,
    /// Planted parameters, zero projection bias.
    pub truth: ParamTensors,
    pub thresholds: Vec<f64>,
    pub maps: Vec<FeatureMap>,
    pub store_bytes: Vec<u8>,
    pub labels: LabelMatrix,
    pub split: DatasetSplit,
    pub vocabulary: AttributeVocabulary,
    attributes_txt: String,
    split_txt: String,
}

impl PlantedDataset {
    pub fn generate(options: PlantedOptions) -> Self {
        let o = options;
        assert!(o.labels >= 2 && o.train <= o.images);
        let mut rng = stream_rng(o.seed, SeedStream::Synthetic);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let (c, n) = (o.channels, o.labels);
        let proj_weights: Vec<f64> = (0..c * c).map(|_| normal()).collect();
        let mut fc_weights: Vec<f64> = (0..c * c * n).map(|_| normal()).collect();
        // Score n is the quadratic form `sum_l alpha_l^T M_n alpha_l` with
        // `M_n[c][j] = sum_k V[c,k,n] P[j,k]`. Removing the component of `V_n`
        // along `P` makes `M_n` traceless, so scores centre on zero and the
        // thresholds stay small.
        let pp: f64 = proj_weights.iter().map(|x| x * x).sum();
        for label in 0..n {
            let dot: f64 = (0..c * c).map(|f| fc_weights[f * n + label] * proj_weights[f]).sum();
            for f in 0..c * c {
                fc_weights[f * n + label] -= dot / pp * proj_weights[f];
            }
        }
        let truth = ParamTensors {
            proj_weights,
            proj_bias: vec![0.0; c],
            fc_weights,
            fc_bias: vec![0.0; n],
        };

        // Thresholds sit at each label's median over a calibration pool. Images
        // are then drawn (calibration pool first) until enough clear the margin
        // on every label.
        let plane = o.height * o.width;
        let mut draw = || {
            let values: Vec<f32> = (0..c * plane).map(|_| (o.scale * normal()) as f32).collect();
            let alpha = Tensor3::from_vec(c, o.height, o.width, values.iter().map(|&v| f64::from(v)).collect());
            let scores = naive_forward(&truth, c, c, n, &alpha);
            (values, scores)
        };
        const CALIBRATION: usize = 4000;
        let pool: Vec<(Vec<f32>, Vec<f64>)> = (0..CALIBRATION).map(|_| draw()).collect();
        let mut thresholds = Vec::with_capacity(n);
        let mut spreads = Vec::with_capacity(n);
        for label in 0..n {
            let mut col: Vec<f64> = pool.iter().map(|(_, s)| s[label]).collect();
            col.sort_by(f64::total_cmp);
            thresholds.push(col[CALIBRATION / 2]);
            let mean = col.iter().sum::<f64>() / CALIBRATION as f64;
            spreads.push((col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / CALIBRATION as f64).sqrt());
        }
        let mut maps = Vec::with_capacity(o.images);
        let mut rows = Vec::with_capacity(o.images);
        let mut pool = pool.into_iter();
        for _ in 0..1_000_000 {
            if maps.len() == o.images {
                break;
            }
            let (values, scores) = pool.next().unwrap_or_else(&mut draw);
            let clear = (0..n).all(|l| (scores[l] - thresholds[l]).abs() >= o.margin * spreads[l]);
            let row: Vec<u8> = (0..n).map(|l| u8::from(scores[l] > thresholds[l])).collect();
            let positives = row.iter().filter(|&&b| b == 1).count();
            if clear && positives >= 1 && positives < n {
                let id = maps.len() as u32 + 1;
                maps.push(FeatureMap::new(id, c, o.height, o.width, values));
                rows.push(row);
            }
        }
        assert_eq!(maps.len(), o.images, "margin too large to fill the dataset");

        let mut store_bytes = Vec::new();
        write_store(&maps, &mut store_bytes).expect("in-memory write");
        let labels = LabelMatrix::from_rows(&rows);

        let mut attributes_txt = String::new();
        for l in 0..n {
            let _ = writeln!(attributes_txt, "{} has_group_{}::variety_{}", l + 1, l % 2, l);
        }
        let vocabulary = parse_vocabulary(attributes_txt.as_bytes()).expect("valid vocabulary");
        let mut split_txt = String::new();
        for id in 1..=o.images {
            let _ = writeln!(split_txt, "{id} {}", u8::from(id <= o.train));
        }
        let split = make_split(split_txt.as_bytes(), o.val_size, o.seed).expect("valid split");
        Self {
            options,
            truth,
            thresholds,
            maps,
            store_bytes,
            labels,
            split,
            vocabulary,
            attributes_txt,
            split_txt,
        }
    }

    pub fn store(&self) -> FeatureStore {
        FeatureStore::from_bytes(self.store_bytes.clone()).expect("valid store")
    }

    /// Configuration able to represent the planted rule.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.options.channels, self.options.channels, self.options.labels)
    }

    /// Writes the CUB text layout (`attributes.txt`, `images.txt`,
    /// `train_test_split.txt`, `image_attribute_labels.txt`) plus
    /// `features.ftns` into `dir`.
    pub fn write_cub_layout(&self, dir: &Path) -> io::Result<()> {
        let n = self.options.labels;
        std::fs::create_dir_all(dir.join("attributes"))?;
        std::fs::write(dir.join("attributes.txt"), &self.attributes_txt)?;
        std::fs::write(dir.join("train_test_split.txt"), &self.split_txt)?;
        let mut images = String::new();
        let mut annotations = String::new();
        for row in 0..self.labels.rows() {
            let id = row + 1;
            let _ = writeln!(images, "{id} planted/{id:04}.jpg");
            for col in 0..n {
                let _ = writeln!(
                    annotations,
                    "{id} {} {} 3 1.0",
                    col + 1,
                    u8::from(self.labels.get(row, col))
                );
            }
        }
        std::fs::write(dir.join("images.txt"), images)?;
        std::fs::write(dir.join("attributes").join("image_attribute_labels.txt"), annotations)?;
        std::fs::write(dir.join("features.ftns"), &self.store_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_known_functions() {
        let g = fd_gradient(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        assert_eq!(fd_gradient(|_| 2.5, &[1.0, -4.0], 1e-5).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            fd_gradient(|x| x[0].ln(), &[0.0], 1e-5),
            Err(OracleError::NonFiniteEvaluation { index: 0 })
        );
    }

    #[test]
    fn literal_metric_hand_values() {
        assert!((exhaustive_avgprec(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]) - 0.833333).abs() < 1e-6);
        assert_eq!(exhaustive_avgprec(&[0.3, 0.2, 0.1], &[1, 1, 1]), 1.0);
        assert_eq!(exhaustive_ap(&[0.1, 0.2], &[0, 0]), None);
        assert_eq!(interpolated_ap(&[0.9, 0.8, 0.7], &[0, 1, 1]), Some(2.0 / 3.0));
    }

    #[test]
    fn naive_forward_scalar_case() {
        let p = ParamTensors {
            proj_weights: vec![2.0],
            proj_bias: vec![0.0],
            fc_weights: vec![1.0],
            fc_bias: vec![0.0],
        };
        assert_eq!(
            naive_forward(&p, 1, 1, 1, &Tensor3::from_vec(1, 1, 1, vec![1.0])),
            vec![2.0]
        );
    }

    #[test]
    fn planted_dataset_is_reproducible_and_valid() {
        let a = PlantedDataset::generate(PlantedOptions::default());
        let b = PlantedDataset::generate(PlantedOptions::default());
        assert_eq!(a.store_bytes, b.store_bytes);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.labels.rows(), 200);
        for r in 0..a.labels.rows() {
            let k = a.labels.row(r).iter().filter(|&&x| x == 1).count();
            assert!((1..6).contains(&k));
        }
        assert_eq!(a.split.train_ids.len(), 160);
        assert_eq!(a.split.val_ids.len(), 20);
        assert_eq!(a.split.test_ids.len(), 20);
        assert_eq!(a.store().len(), 200);
        assert_eq!(a.vocabulary.groups().len(), 2);
        let other = PlantedDataset::generate(PlantedOptions {
            seed: 1,
            ..Default::default()
        });
        assert_ne!(other.store_bytes, a.store_bytes);
    }
}
