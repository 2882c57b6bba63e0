//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use finetag::data::{
    build_label_matrix_with, label_frequencies, make_split, parse_image_ids, parse_vocabulary, AnnotationOptions,
    Attribute, AttributeGroup, AttributeVocabulary, DatasetSplit, LabelMatrix, Subset,
};
use finetag::features::FeatureStore;
use finetag::losses::LossKind;
use finetag::metrics::{evaluate, EvalOptions, TieRule};
use finetag::model::{init_params, predict, ratio_report, Dtype, ModelConfig, ModelParams};
use finetag::optim::{OptimizerConfig, OptimizerKind};
use finetag::projection::{fit_fastica, fit_pca, sample_locations, IcaOptions, Method, ProjectionBasis};
use finetag::trainer::{self, Checkpointer, EpochRecord, EpochSink, TrainConfig, TrainData, TrainError};
use finetag::Execution;

use crate::manifest::Manifest;
use crate::{
    ConvertArgs, DtypeArg, EvalArgs, FitProjectionArgs, LossArg, MethodArg, OptimizerArg, ParamCountArgs, SubsetArg,
    TieArg, TrainArgs, UsageError, WeightsArg,
};

pub struct Context {
    pub threads: Option<usize>,
    pub exec: Execution,
}

/// Vocabulary as written by `convert`.
#[derive(Debug, Serialize, Deserialize)]
struct VocabularyFile {
    attributes: Vec<Attribute>,
    groups: Vec<AttributeGroup>,
}

fn require(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError::MissingFile(path.to_path_buf()).into())
    }
}

fn first_existing(dir: &Path, candidates: &[&str]) -> anyhow::Result<PathBuf> {
    candidates
        .iter()
        .map(|c| dir.join(c))
        .find(|p| p.is_file())
        .ok_or_else(|| UsageError::MissingFile(dir.join(candidates[0])).into())
}

fn open_text(path: &Path) -> anyhow::Result<BufReader<File>> {
    require(path)?;
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_split(path: &Path) -> anyhow::Result<DatasetSplit> {
    let reader = open_text(path)?;
    serde_json::from_reader(reader).map_err(|e| UsageError::Invalid(format!("{}: {e}", path.display())).into())
}

fn read_labels(path: &Path) -> anyhow::Result<LabelMatrix> {
    LabelMatrix::read_from(open_text(path)?).with_context(|| format!("reading {}", path.display()))
}

fn open_store(path: &Path) -> anyhow::Result<FeatureStore> {
    require(path)?;
    FeatureStore::open(path).with_context(|| format!("opening {}", path.display()))
}

fn read_vocabulary(path: &Path) -> anyhow::Result<AttributeVocabulary> {
    let file: VocabularyFile = serde_json::from_reader(open_text(path)?)
        .map_err(|e| UsageError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(AttributeVocabulary::new(file.attributes)?)
}

pub fn convert(ctx: &Context, args: ConvertArgs) -> anyhow::Result<()> {
    let dir = &args.cub_dir;
    if !dir.is_dir() {
        return Err(UsageError::MissingFile(dir.clone()).into());
    }
    let attributes = first_existing(
        dir,
        &["attributes.txt", "attributes/attributes.txt", "../attributes.txt"],
    )?;
    let images = first_existing(dir, &["images.txt"])?;
    let annotations = first_existing(
        dir,
        &["attributes/image_attribute_labels.txt", "image_attribute_labels.txt"],
    )?;
    let official = first_existing(dir, &["train_test_split.txt"])?;

    let vocab = parse_vocabulary(open_text(&attributes)?).with_context(|| attributes.display().to_string())?;
    for w in vocab.cub_shape_warnings() {
        log::warn!("vocabulary differs from CUB-200-2011: {w}");
    }
    let ids = parse_image_ids(open_text(&images)?).with_context(|| images.display().to_string())?;
    if ids.iter().enumerate().any(|(i, &id)| id as usize != i + 1) {
        return Err(UsageError::Invalid(format!("{}: image ids must run 1..={}", images.display(), ids.len())).into());
    }
    let options = AnnotationOptions { strict: args.strict };
    let matrix = build_label_matrix_with(open_text(&annotations)?, &vocab, ids.len(), options)
        .with_context(|| annotations.display().to_string())?;
    let split =
        make_split(open_text(&official)?, args.val_size, args.seed).with_context(|| official.display().to_string())?;
    if split.len() != ids.len() {
        return Err(UsageError::Invalid(format!(
            "{} lists {} images but images.txt has {}",
            official.display(),
            split.len(),
            ids.len()
        ))
        .into());
    }
    let empty = matrix.empty_rows();
    if !empty.is_empty() {
        log::warn!(
            "{} images have no positive attribute; losses and metrics skip them",
            empty.len()
        );
    }

    fs::create_dir_all(&args.out)?;
    let mut labels_out = BufWriter::new(File::create(args.out.join("labels.ftlm"))?);
    matrix.write_to(&mut labels_out)?;
    labels_out.flush()?;
    write_json(&args.out.join("split.json"), &split)?;
    let groups = vocab.groups();
    write_json(
        &args.out.join("vocabulary.json"),
        &VocabularyFile {
            attributes: vocab.entries().to_vec(),
            groups: groups.clone(),
        },
    )?;

    let mut manifest = Manifest::new(
        "convert",
        Some(args.seed),
        ctx.threads,
        json!({ "val_size": args.val_size, "strict": args.strict }),
    );
    manifest.input("attributes", &attributes)?;
    manifest.input("images", &images)?;
    manifest.input("annotations", &annotations)?;
    manifest.input("train_test_split", &official)?;
    for o in ["labels.ftlm", "split.json", "vocabulary.json"] {
        manifest.output(o);
    }
    manifest.write(&args.out.join("manifest.json"))?;

    println!("{} x {}", matrix.rows(), matrix.cols());
    println!("groups: {}", groups.len());
    println!(
        "split: train {}, val {}, test {}",
        split.train_ids.len(),
        split.val_ids.len(),
        split.test_ids.len()
    );
    println!("positives: {}", matrix.positive_count());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn fit_projection(ctx: &Context, args: FitProjectionArgs) -> anyhow::Result<()> {
    if args.components == 0 {
        return Err(UsageError::Invalid("--components must be at least 1".into()).into());
    }
    if !(3..=100).contains(&args.components) {
        log::warn!("{} components is outside the usual 3..=100 range", args.components);
    }
    let store = open_store(&args.features)?;
    let split = read_split(&args.split)?;
    let bank = sample_locations(&store, &split.train_ids, args.per_image, args.seed)?;
    let method = match args.method {
        MethodArg::Pca => Method::Pca,
        MethodArg::Ica => Method::Ica,
    };
    let basis = match method {
        Method::Pca => fit_pca(&bank, args.components)?,
        Method::Ica => fit_fastica(
            &bank,
            IcaOptions {
                components: args.components,
                max_iter: args.max_iter,
                tol: args.tol,
                seed: args.seed,
            },
        )?,
    };
    if basis.convergence_warning() {
        log::warn!(
            "FastICA stopped after {} iterations without reaching tol {}",
            args.max_iter,
            args.tol
        );
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&args.out, basis.to_bytes())?;

    let diag = basis.diagnostics.as_ref();
    let diagnostics = json!({
        "method": method,
        "channels": basis.channels,
        "components": basis.components,
        "samples": bank.len(),
        "iterations": diag.map_or(0, |d| d.iterations),
        "converged": diag.is_none_or(|d| d.converged),
        "eigenvalues": diag.map(|d| d.eigenvalues.clone()),
        "projected_variances": basis.projected_variances(&bank),
    });
    let diagnostics_path = sibling(&args.out, "diagnostics.json");
    write_json(&diagnostics_path, &diagnostics)?;

    let mut manifest = Manifest::new(
        "fit-projection",
        Some(args.seed),
        ctx.threads,
        json!({
            "method": method,
            "components": args.components,
            "per_image": args.per_image,
            "max_iter": args.max_iter,
            "tol": args.tol,
        }),
    );
    manifest.input("features", &args.features)?;
    manifest.input("split", &args.split)?;
    manifest.output(file_name(&args.out));
    manifest.output(file_name(&diagnostics_path));
    manifest.write(&sibling(&args.out, "manifest.json"))?;

    println!(
        "{} basis: {} channels -> {} components from {} samples",
        match method {
            Method::Pca => "pca",
            Method::Ica => "ica",
        },
        basis.channels,
        basis.components,
        bank.len()
    );
    if let Some(d) = diag.filter(|_| method == Method::Ica) {
        println!("iterations: {}, converged: {}", d.iterations, d.converged);
    }
    Ok(())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Prints each epoch and checkpoints it.
struct ReportingSink(Checkpointer);

impl EpochSink for ReportingSink {
    fn epoch_done(&mut self, record: &EpochRecord, params: &ModelParams) -> Result<(), TrainError> {
        self.0.epoch_done(record, params)?;
        let val = record
            .val_avgprec
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
        println!(
            "epoch {:>3}  loss {:.6}  val avgprec {val}",
            record.epoch, record.mean_loss
        );
        Ok(())
    }
}

pub fn train(ctx: &Context, args: TrainArgs) -> anyhow::Result<()> {
    let store = open_store(&args.features)?;
    let labels = read_labels(&args.labels)?;
    let split = read_split(&args.split)?;
    require(&args.projection)?;
    let basis = ProjectionBasis::read_from(BufReader::new(File::open(&args.projection)?))?;
    if basis.channels != store.channels() {
        return Err(UsageError::ConfigMismatch(format!(
            "projection expects {} channels, feature store has {}",
            basis.channels,
            store.channels()
        ))
        .into());
    }
    let kind = match args.optimizer {
        OptimizerArg::Adam => OptimizerKind::Adam,
        OptimizerArg::Momentum => OptimizerKind::Momentum,
    };
    let lr = args.lr.unwrap_or(kind.default_lr());
    let loss = match args.loss {
        LossArg::Smooth => LossKind::Smooth,
        LossArg::Hinge => LossKind::Hinge,
        LossArg::HingeSum => LossKind::HingeSum,
    };
    let model_config = ModelConfig {
        channels: basis.channels,
        components: basis.components,
        num_classes: labels.cols(),
        dtype: match args.dtype {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        },
        bcnn_normalize: args.bcnn_normalize,
    };
    let config = TrainConfig {
        batch_size: args.batch_size,
        optimizer: OptimizerConfig::new(kind, lr),
        epochs: args.epochs,
        loss,
        seed: args.seed,
        shuffle: !args.no_shuffle,
        exec: ctx.exec,
    };
    config.validate()?;
    let params = init_params(model_config, &basis, args.seed)?;
    let data = TrainData {
        store: &store,
        labels: &labels,
        split: &split,
    };
    data.check(&params)?;

    let mut manifest = Manifest::new(
        "train",
        Some(args.seed),
        ctx.threads,
        json!({ "model": model_config, "train": config }),
    );
    manifest.input("features", &args.features)?;
    manifest.input("labels", &args.labels)?;
    manifest.input("split", &args.split)?;
    manifest.input("projection", &args.projection)?;

    let mut sink = ReportingSink(Checkpointer::new(&args.out_dir)?);
    let outcome = trainer::train(params, data, &config, &mut sink)?;
    let final_path = args.out_dir.join("final.ftmd");
    let mut w = BufWriter::new(File::create(&final_path)?);
    outcome.params.write_to(&mut w)?;
    w.flush()?;

    for e in 1..=args.epochs {
        manifest.output(file_name(&sink.0.epoch_path(e)));
    }
    for o in [Checkpointer::LAST, "final.ftmd", Checkpointer::HISTORY] {
        manifest.output(o);
    }
    manifest.write(&args.out_dir.join("manifest.json"))?;
    println!(
        "optimizer {:?}, lr {lr}, initial loss {:.6}, final loss {:.6}",
        kind, outcome.initial_loss, outcome.final_loss
    );
    Ok(())
}

pub fn eval(ctx: &Context, args: EvalArgs) -> anyhow::Result<()> {
    require(&args.checkpoint)?;
    let params = ModelParams::read_from(BufReader::new(File::open(&args.checkpoint)?))
        .with_context(|| args.checkpoint.display().to_string())?;
    let store = open_store(&args.features)?;
    let labels = read_labels(&args.labels)?;
    let split = read_split(&args.split_file)?;
    let vocab_path = args
        .vocabulary
        .clone()
        .unwrap_or_else(|| args.labels.with_file_name("vocabulary.json"));
    let vocab = read_vocabulary(&vocab_path)?;
    let cfg = params.config();
    if cfg.channels != store.channels() {
        return Err(UsageError::ConfigMismatch(format!(
            "checkpoint expects {} channels, feature store has {}",
            cfg.channels,
            store.channels()
        ))
        .into());
    }
    if cfg.num_classes != labels.cols() || vocab.num_attributes() != labels.cols() {
        return Err(UsageError::ConfigMismatch(format!(
            "checkpoint has {} classes, label matrix {} columns, vocabulary {} attributes",
            cfg.num_classes,
            labels.cols(),
            vocab.num_attributes()
        ))
        .into());
    }
    let subset = match args.split {
        SubsetArg::Train => Subset::Train,
        SubsetArg::Val => Subset::Val,
        SubsetArg::Test => Subset::Test,
    };
    let ids = split.ids(subset);
    if ids.is_empty() {
        return Err(UsageError::Invalid(format!("the {subset:?} split is empty")).into());
    }

    let mut logits = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(256) {
        let alphas = ctx
            .exec
            .map(chunk, |&id| store.read(id).map(|m| m.to_tensor()))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        logits.extend(predict(&params, &alphas, ctx.exec)?);
    }
    let rows = ids.iter().map(|&id| labels.row_of(id)).collect::<Result<Vec<_>, _>>()?;
    let dataset_counts = match args.weights {
        WeightsArg::Eval => None,
        WeightsArg::Dataset => Some(label_frequencies(&labels, labels.image_ids())?),
    };
    let tie_rule = match args.tie_rule {
        TieArg::Index => TieRule::Index,
        TieArg::Optimistic => TieRule::Optimistic,
        TieArg::Pessimistic => TieRule::Pessimistic,
    };
    let report = evaluate(
        &logits,
        &rows,
        &vocab,
        EvalOptions {
            tie_rule,
            weight_counts: dataset_counts.as_deref(),
            exec: ctx.exec,
        },
    )?;

    fs::create_dir_all(&args.out)?;
    let mut summary = report.summary();
    summary.images = ids.len();
    write_json(&args.out.join("summary.json"), &summary)?;
    let csv_out =
        |name: &str| -> anyhow::Result<BufWriter<File>> { Ok(BufWriter::new(File::create(args.out.join(name))?)) };
    report.write_per_label_csv(&vocab, csv_out("per_label.csv")?)?;
    report.write_per_group_csv(csv_out("per_group.csv")?)?;
    report.write_ap_vs_frequency_csv(&vocab, csv_out("ap_vs_frequency.csv")?)?;

    let mut manifest = Manifest::new(
        "eval",
        None,
        ctx.threads,
        json!({
            "split": format!("{subset:?}").to_lowercase(),
            "tie_rule": tie_rule,
            "weights": match args.weights { WeightsArg::Eval => "eval", WeightsArg::Dataset => "dataset" },
        }),
    );
    manifest.input("checkpoint", &args.checkpoint)?;
    manifest.input("features", &args.features)?;
    manifest.input("labels", &args.labels)?;
    manifest.input("split", &args.split_file)?;
    manifest.input("vocabulary", &vocab_path)?;
    for o in ["summary.json", "per_label.csv", "per_group.csv", "ap_vs_frequency.csv"] {
        manifest.output(o);
    }
    manifest.write(&args.out.join("manifest.json"))?;

    let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
    println!("images: {} (skipped {})", ids.len(), summary.skipped);
    println!("avgprec: {:.6}", summary.avgprec);
    println!("wmap: {}", fmt(summary.wmap));
    println!("undefined labels: {}", summary.undefined_labels);
    Ok(())
}

pub fn param_count(args: ParamCountArgs) -> anyhow::Result<()> {
    let config = ModelConfig::new(args.channels, args.components, args.num_classes);
    if args.channels == 0 || args.components == 0 || args.num_classes == 0 {
        return Err(UsageError::Invalid("all dimensions must be positive".into()).into());
    }
    let r = ratio_report(&config);
    let consistent = (35.0..=42.0).contains(&r.ratio);
    if args.json {
        println!(
            "{}",
            json!({
                "channels": args.channels,
                "components": args.components,
                "num_classes": args.num_classes,
                "head": r.head,
                "baseline_fc": r.baseline_fc,
                "ratio": r.ratio,
                "consistent_with_40x": consistent,
            })
        );
        return Ok(());
    }
    println!(
        "head (C={}, K={}, N={}): {:>12}",
        args.channels, args.components, args.num_classes, r.head
    );
    println!("VGG16 fully-connected:     {:>12}", r.baseline_fc);
    println!("ratio:                     {:>12.2}", r.ratio);
    if consistent {
        println!("ratio {:.1} is consistent with a roughly 40x smaller head", r.ratio);
    }
    Ok(())
}
