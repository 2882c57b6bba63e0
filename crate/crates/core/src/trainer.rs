//! Mini-batch training of the head.
//!
//! Each epoch shuffles the training ids with the [`SeedStream::Shuffle`]
//! stream, then for every batch runs forward, ranking loss, backward and one
//! optimizer step. Per-image passes may run on the rayon pool, but gradients
//! are reduced in batch order, so results match the sequential path bit for
//! bit.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, DatasetSplit, LabelMatrix};
use crate::exec::Execution;
use crate::features::{FeatureError, FeatureStore};
use crate::losses::{batch_loss, LossError, LossKind, RelevanceSets};
use crate::metrics::{per_image_avgprec, MetricsError, TieRule};
use crate::model::{backward_image, forward, predict, reduce_gradients, ModelError, ModelParams, ParamTensors};
use crate::optim::{OptimError, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::rng::{stream_rng, SeedStream};
use crate::tensor::Tensor3;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("inputs disagree with the model: {0}")]
    DimensionMismatch(String),
    #[error("every training image has an empty or complete label set")]
    AllImagesSkipped,
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub shuffle: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl TrainConfig {
    /// Batch 16, the optimizer's default learning rate, smooth loss, 10 epochs.
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            batch_size: 16,
            optimizer: OptimizerConfig::new(kind, kind.default_lr()),
            epochs: 10,
            loss: LossKind::Smooth,
            seed: 0,
            shuffle: true,
            exec: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        let lr = self.optimizer.lr;
        if !lr.is_finite() || lr < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate {lr} is not a nonnegative number"
            )));
        }
        Ok(())
    }
}

/// One line of the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-image training loss over the images seen this epoch.
    pub mean_loss: f64,
    /// `None` when the validation set is empty.
    pub val_avgprec: Option<f64>,
    /// Training images skipped for an empty or complete label set.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// Mean training loss of the starting parameters.
    pub initial_loss: f64,
    /// Mean training loss of the final parameters.
    pub final_loss: f64,
}

/// Read-only training inputs.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub store: &'a FeatureStore,
    pub labels: &'a LabelMatrix,
    pub split: &'a DatasetSplit,
}

impl TrainData<'_> {
    /// Fails fast when the store, labels or split cannot feed `params`.
    pub fn check(&self, params: &ModelParams) -> Result<(), TrainError> {
        let cfg = params.config();
        if self.store.channels() != cfg.channels {
            return Err(TrainError::DimensionMismatch(format!(
                "feature store has {} channels, model expects {}",
                self.store.channels(),
                cfg.channels
            )));
        }
        if self.labels.cols() != cfg.num_classes {
            return Err(TrainError::DimensionMismatch(format!(
                "label matrix has {} columns, model has {} classes",
                self.labels.cols(),
                cfg.num_classes
            )));
        }
        for &id in self.split.train_ids.iter().chain(&self.split.val_ids) {
            if !self.store.contains(id) {
                return Err(TrainError::DimensionMismatch(format!(
                    "image {id} is not in the feature store"
                )));
            }
            self.labels.row_of(id)?;
        }
        if self.split.train_ids.is_empty() {
            return Err(TrainError::InvalidConfig("training split is empty".into()));
        }
        Ok(())
    }

    fn tensors(&self, ids: &[u32], exec: Execution) -> Result<Vec<Tensor3>, TrainError> {
        exec.map(ids, |&id| self.store.read(id).map(|m| m.to_tensor()))
            .into_iter()
            .map(|r| r.map_err(TrainError::from))
            .collect()
    }
}

/// Receives every finished epoch; [`Checkpointer`] is the file-backed one.
pub trait EpochSink {
    fn epoch_done(&mut self, record: &EpochRecord, params: &ModelParams) -> Result<(), TrainError>;
}

/// Discards everything.
impl EpochSink for () {
    fn epoch_done(&mut self, _: &EpochRecord, _: &ModelParams) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Writes `epoch-NNN.ftmd` and `last.ftmd` after every epoch and appends the
/// record to `history.jsonl`.
pub struct Checkpointer {
    dir: PathBuf,
}

impl Checkpointer {
    pub const HISTORY: &'static str = "history.jsonl";
    pub const LAST: &'static str = "last.ftmd";

    /// Creates `dir` and truncates any previous history.
    pub fn new(dir: &Path) -> Result<Self, TrainError> {
        fs::create_dir_all(dir)?;
        File::create(dir.join(Self::HISTORY))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch-{epoch:03}.ftmd"))
    }

    fn write_model(path: &Path, params: &ModelParams) -> Result<(), TrainError> {
        // Write-then-rename keeps the previous checkpoint intact on failure.
        let tmp = path.with_extension("tmp");
        let mut w = BufWriter::new(File::create(&tmp)?);
        params.write_to(&mut w)?;
        w.flush()?;
        drop(w);
        fs::rename(tmp, path)?;
        Ok(())
    }
}

impl EpochSink for Checkpointer {
    fn epoch_done(&mut self, record: &EpochRecord, params: &ModelParams) -> Result<(), TrainError> {
        Self::write_model(&self.epoch_path(record.epoch), params)?;
        Self::write_model(&self.dir.join(Self::LAST), params)?;
        let mut history = OpenOptions::new().append(true).open(self.dir.join(Self::HISTORY))?;
        writeln!(history, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }
}

/// Mean loss of `params` over `ids`, ignoring unrankable images.
pub fn mean_loss(
    params: &ModelParams,
    data: TrainData<'_>,
    ids: &[u32],
    kind: LossKind,
    exec: Execution,
) -> Result<f64, TrainError> {
    let (mut total, mut used) = (0.0, 0usize);
    for chunk in ids.chunks(256) {
        let alphas = data.tensors(chunk, exec)?;
        let logits = predict(params, &alphas, exec)?;
        let rels = chunk
            .iter()
            .map(|&id| data.labels.row_of(id).map(RelevanceSets::from_row))
            .collect::<Result<Vec<_>, _>>()?;
        match batch_loss(&logits, &rels, kind) {
            Ok(b) => {
                for l in b.losses.iter().flatten() {
                    total += l;
                    used += 1;
                }
            }
            Err(LossError::AllImagesSkipped) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if used == 0 {
        return Err(TrainError::AllImagesSkipped);
    }
    Ok(total / used as f64)
}

/// Mean AVGPREC of `params` over `ids`; `None` when no image has a positive.
pub fn mean_avgprec(
    params: &ModelParams,
    data: TrainData<'_>,
    ids: &[u32],
    exec: Execution,
) -> Result<Option<f64>, TrainError> {
    let mut values = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(256) {
        let alphas = data.tensors(chunk, exec)?;
        let logits = predict(params, &alphas, exec)?;
        let rows = chunk
            .iter()
            .map(|&id| data.labels.row_of(id))
            .collect::<Result<Vec<_>, _>>()?;
        values.extend(per_image_avgprec(&logits, &rows, TieRule::Index, exec)?);
    }
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    Ok((!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64))
}

/// Trains `params` on the training split, reporting each epoch to `sink`.
///
/// A non-finite batch loss aborts the run before that batch's update; the
/// sink has by then seen every completed epoch.
pub fn train(
    mut params: ModelParams,
    data: TrainData<'_>,
    config: &TrainConfig,
    sink: &mut dyn EpochSink,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    data.check(&params)?;
    let exec = config.exec;
    let initial_loss = mean_loss(&params, data, &data.split.train_ids, config.loss, exec)?;
    let shapes: Vec<usize> = params.values().slices().iter().map(|s| s.len()).collect();
    let mut optimizer = OptimizerState::new(config.optimizer, &shapes);
    let mut grads = ParamTensors::zeros(params.config());
    let mut order = data.split.train_ids.clone();
    let mut rng = stream_rng(config.seed, SeedStream::Shuffle);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let alphas = data.tensors(batch, exec)?;
            let rels = batch
                .iter()
                .map(|&id| data.labels.row_of(id).map(RelevanceSets::from_row))
                .collect::<Result<Vec<_>, _>>()?;
            let passes = exec
                .map(&alphas, |a| forward(&params, a))
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?;
            let logits: Vec<Vec<f64>> = passes.iter().map(|(l, _)| l.clone()).collect();
            let loss = match batch_loss(&logits, &rels, config.loss) {
                Ok(loss) => loss,
                Err(LossError::AllImagesSkipped) => {
                    skipped += batch.len();
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            if !loss.mean.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            skipped += loss.skipped;
            for l in loss.losses.iter().flatten() {
                total += l;
                used += 1;
            }
            let ranked: Vec<usize> = (0..batch.len()).filter(|&i| loss.losses[i].is_some()).collect();
            let image_grads = exec
                .map(&ranked, |&i| {
                    backward_image(&params, &passes[i].1, &loss.grads[i], false)
                })
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?;
            reduce_gradients(&image_grads, 1.0, &mut grads, exec);
            let mut targets = params.values_mut().slices_mut();
            optimizer.step(&mut targets, &grads.slices())?;
        }
        if used == 0 {
            return Err(TrainError::AllImagesSkipped);
        }
        if !params.values().is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        let record = EpochRecord {
            epoch,
            mean_loss: total / used as f64,
            val_avgprec: mean_avgprec(&params, data, &data.split.val_ids, exec)?,
            skipped,
        };
        log::info!(
            "epoch {epoch}: loss {:.6}, val avgprec {:?}, skipped {skipped}",
            record.mean_loss,
            record.val_avgprec
        );
        sink.epoch_done(&record, &params)?;
        history.push(record);
    }
    let final_loss = mean_loss(&params, data, &data.split.train_ids, config.loss, exec)?;
    Ok(TrainOutcome {
        params,
        history,
        initial_loss,
        final_loss,
    })
}
