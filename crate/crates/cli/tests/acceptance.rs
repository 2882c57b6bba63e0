//! Acceptance suite: prints one PASS / FAIL / SKIPPED line per criterion and
//! exits non-zero when any criterion fails.
//!
//! Criterion 9 needs the CUB-200-2011 download; point `FINETAG_CUB_DIR` at the
//! extracted `CUB_200_2011` directory to run it.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use finetag::bilinear::{bilinear_pool_backward, bilinear_pool_forward};
use finetag::data::{AttributeGroup, DatasetSplit, LabelMatrix};
use finetag::features::{write_store, FeatureMap, FeatureStore};
use finetag::losses::{hinge_rank_loss, hinge_worst_pair, rank_loss, smooth_rank_loss, LossKind, RelevanceSets};
use finetag::metrics::{average_precision_noninterp, avgprec, weighted_map};
use finetag::model::{backward, forward, init_params, ratio_report, Dtype, ModelConfig, ModelParams, ParamTensors};
use finetag::optim::{OptimizerConfig, OptimizerKind};
use finetag::oracles::{self, PlantedDataset, PlantedOptions};
use finetag::projection::{
    fit_fastica, fit_pca, project_backward, project_forward, sample_locations, IcaOptions, Method, ProjectionBasis,
};
use finetag::rng::{stream_rng, SeedStream};
use finetag::trainer::{train, TrainConfig, TrainData};
use finetag::{Execution, Tensor3};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skipped(String),
}

type Check = Result<String, String>;
type Criterion = fn() -> Result<Outcome, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if let false = $cond {
            return Err(format!($($fmt)+));
        }
    };
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, SeedStream::Synthetic)
}

fn uniform(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
    Tensor3::from_vec(c, h, w, uniform(rng, c * h * w))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A 0/1 row of length `n` with between 1 and `n - 1` positives.
fn rankable_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    loop {
        let row: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let pos = row.iter().filter(|&&b| b == 1).count();
        if pos > 0 && pos < n {
            return row;
        }
    }
}

/// Scores with frequent exact ties in half of the draws.
fn scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    if rng.random_bool(0.5) {
        (0..n).map(|_| f64::from(rng.random_range(0..4u8))).collect()
    } else {
        uniform(rng, n)
    }
}

fn fd(f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Result<Vec<f64>, String> {
    oracles::fd_gradient(f, x, FD_STEP).map_err(|e| e.to_string())
}

struct Worst(BTreeMap<&'static str, f64>);

impl Worst {
    fn record(&mut self, name: &'static str, analytic: &[f64], numeric: &[f64]) {
        let e = oracles::max_relative_error(analytic, numeric);
        let w = self.0.entry(name).or_insert(0.0);
        *w = w.max(e);
    }

    fn summary(&self) -> String {
        self.0
            .iter()
            .map(|(k, v)| format!("{k} {v:.1e}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut rng = rng(101);
    let mut worst = Worst(BTreeMap::new());
    let instances = 100;
    for _ in 0..instances {
        let c = rng.random_range(1..5);
        let (k, n) = (rng.random_range(1..=c.min(3)), rng.random_range(1..5));
        let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));

        // Bilinear pooling under a random upstream gradient.
        let a = tensor(&mut rng, c, h, w);
        let b = tensor(&mut rng, k, h, w);
        let up = uniform(&mut rng, c * k);
        let pool = |a: &Tensor3, b: &Tensor3| dot(&bilinear_pool_forward(a, b).unwrap().values, &up);
        let (ga, gb) = bilinear_pool_backward(&up, &a, &b).map_err(|e| e.to_string())?;
        let fa = fd(|x| pool(&Tensor3::from_vec(c, h, w, x.to_vec()), &b), a.as_slice())?;
        let fb = fd(|x| pool(&a, &Tensor3::from_vec(k, h, w, x.to_vec())), b.as_slice())?;
        worst.record("bilinear", ga.as_slice(), &fa);
        worst.record("bilinear", gb.as_slice(), &fb);

        // 1x1 projection.
        let weights = uniform(&mut rng, c * k);
        let bias = uniform(&mut rng, k);
        let up = tensor(&mut rng, k, h, w);
        let proj =
            |wv: &[f64], bv: &[f64], av: &Tensor3| dot(project_forward(wv, bv, av).unwrap().as_slice(), up.as_slice());
        let g = project_backward(&up, &a, &weights).map_err(|e| e.to_string())?;
        worst.record("projection", &g.weights, &fd(|x| proj(x, &bias, &a), &weights)?);
        worst.record("projection", &g.bias, &fd(|x| proj(&weights, x, &a), &bias)?);
        let fa = fd(
            |x| proj(&weights, &bias, &Tensor3::from_vec(c, h, w, x.to_vec())),
            a.as_slice(),
        )?;
        worst.record("projection", g.alpha.as_slice(), &fa);

        // Full model: all four tensors, the input, and the FC head on its own.
        let cfg = ModelConfig::new(c, k, n);
        let mut values = ParamTensors::zeros(&cfg);
        for s in values.slices_mut() {
            s.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
        let params = ModelParams::new(cfg, values.clone()).map_err(|e| e.to_string())?;
        let up = uniform(&mut rng, n);
        let (_, cache) = forward(&params, &a).map_err(|e| e.to_string())?;
        let g = backward(&params, &cache, &up).map_err(|e| e.to_string())?;
        let model = |v: &ParamTensors, x: &Tensor3| {
            let p = ModelParams::new(cfg, v.clone()).unwrap();
            dot(&forward(&p, x).unwrap().0, &up)
        };
        let flat = values.flatten();
        let full = fd(
            |x| {
                let mut v = values.clone();
                v.assign_flat(x);
                model(&v, &a)
            },
            &flat,
        )?;
        worst.record("full model", &g.params.flatten(), &full);
        let fa = fd(
            |x| model(&values, &Tensor3::from_vec(c, h, w, x.to_vec())),
            a.as_slice(),
        )?;
        worst.record("full model", g.alpha.as_slice(), &fa);
        let fc_w = fd(
            |x| {
                let mut v = values.clone();
                v.fc_weights.copy_from_slice(x);
                model(&v, &a)
            },
            &values.fc_weights,
        )?;
        let fc_b = fd(
            |x| {
                let mut v = values.clone();
                v.fc_bias.copy_from_slice(x);
                model(&v, &a)
            },
            &values.fc_bias,
        )?;
        worst.record("fc head", &g.params.fc_weights, &fc_w);
        worst.record("fc head", &g.params.fc_bias, &fc_b);

        // Smooth ranking loss.
        let m = rng.random_range(2..11);
        let logits: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let rel = RelevanceSets::from_row(&rankable_row(&mut rng, m));
        let analytic = smooth_rank_loss(&logits, &rel).map_err(|e| e.to_string())?.grad;
        let numeric = fd(|x| smooth_rank_loss(x, &rel).unwrap().loss, &logits)?;
        worst.record("smooth loss", &analytic, &numeric);
    }
    let elapsed = start.elapsed();
    ensure!(
        worst.0.values().all(|&e| e < FD_TOL),
        "max relative error above {FD_TOL:e}: {}",
        worst.summary()
    );
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:.1?}");
    Ok(format!(
        "{instances} instances each; {}; {elapsed:.1?}",
        worst.summary()
    ))
}

fn hinge_correctness() -> Check {
    let mut rng = rng(202);
    let mut kink_checked = 0;
    for i in 0..1000 {
        let n = rng.random_range(2..=10);
        let row = rankable_row(&mut rng, n);
        let logits = scores(&mut rng, n);
        let rel = RelevanceSets::from_row(&row);
        let (loss, pair) = oracles::brute_hinge_loss(&logits, &row);
        let got = hinge_rank_loss(&logits, &rel).map_err(|e| e.to_string())?;
        let (v, u, value) = hinge_worst_pair(&logits, &rel).map_err(|e| e.to_string())?;
        ensure!(got.loss == loss, "instance {i}: loss {} vs oracle {loss}", got.loss);
        let mut expected = vec![0.0; n];
        match pair {
            Some((bv, bu)) => {
                ensure!(
                    (v, u) == (bv, bu),
                    "instance {i}: pair {:?} vs oracle {:?}",
                    (v, u),
                    (bv, bu)
                );
                ensure!(value == loss, "instance {i}: pair value {value} vs {loss}");
                expected[bv] = 1.0;
                expected[bu] = -1.0;
            }
            None => ensure!(value <= 0.0, "instance {i}: zero loss but pair value {value}"),
        }
        ensure!(
            got.grad == expected,
            "instance {i}: subgradient {:?} vs {expected:?}",
            got.grad
        );

        // Away from kinks the loss is locally linear, so differences are exact.
        let mut margins: Vec<f64> = Vec::new();
        for &a in rel.negatives() {
            for &b in rel.positives() {
                margins.push(1.0 + logits[a] - logits[b]);
            }
        }
        margins.sort_by(|a, b| b.total_cmp(a));
        let gap = margins.get(1).map_or(f64::INFINITY, |s| margins[0] - s);
        if margins[0].abs() > 1e-3 && gap > 1e-3 {
            let numeric = fd(|x| hinge_rank_loss(x, &rel).unwrap().loss, &logits)?;
            let err = oracles::max_relative_error(&got.grad, &numeric);
            ensure!(err < FD_TOL, "instance {i}: kink-free gradient error {err:e}");
            kink_checked += 1;
        }
    }
    ensure!(kink_checked >= 100, "only {kink_checked} kink-free instances");
    Ok(format!(
        "1000 instances exact; {kink_checked} kink-free gradient checks"
    ))
}

fn metric_equivalence() -> Check {
    let mut rng = rng(303);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let check = |logits: &[f64], row: &[u8], rng_ctx: &str| -> Result<(), String> {
        let oracle_ap = oracles::exhaustive_ap(logits, row);
        let ap = average_precision_noninterp(logits, row).map_err(|e| e.to_string())?;
        match (ap, oracle_ap) {
            (Some(a), Some(b)) => ensure!(close(a, b), "{rng_ctx}: AP {a} vs oracle {b}"),
            (None, None) => {}
            other => return Err(format!("{rng_ctx}: AP definedness {other:?}")),
        }
        if row.contains(&1) {
            let a = avgprec(logits, row).map_err(|e| e.to_string())?;
            let b = oracles::exhaustive_avgprec(logits, row);
            ensure!(close(a, b), "{rng_ctx}: avgprec {a} vs oracle {b}");
        }
        Ok(())
    };
    let mut patterns = 0;
    for n in 1..=6usize {
        for mask in 0..1u32 << n {
            let row: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
            let candidates = [
                vec![0.0; n],
                (0..n).map(|i| (n - i) as f64).collect(),
                scores(&mut rng, n),
                uniform(&mut rng, n),
            ];
            for logits in &candidates {
                check(logits, &row, &format!("pattern {row:?}"))?;
            }
            patterns += 1;
        }
    }
    for i in 0..10_000 {
        let n = rng.random_range(7..=40);
        let row: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let logits = scores(&mut rng, n);
        check(&logits, &row, &format!("random instance {i}"))?;
        if let (Some(ap), Some(interp)) = (
            average_precision_noninterp(&logits, &row).map_err(|e| e.to_string())?,
            oracles::interpolated_ap(&logits, &row),
        ) {
            ensure!(
                ap <= interp + 1e-12,
                "random instance {i}: AP {ap} above interpolated {interp}"
            );
        }
    }
    Ok(format!(
        "{patterns} relevance patterns (N <= 6) and 10000 random instances within 1e-12"
    ))
}

fn hand_values() -> Check {
    let smooth = |logits: &[f64], pos: &[usize]| {
        smooth_rank_loss(logits, &RelevanceSets::new(pos, logits.len()))
            .unwrap()
            .loss
    };
    let l2 = smooth(&[0.0, 0.0], &[0]);
    let l3 = smooth(&[0.0, 0.0, 0.0], &[0]);
    let ap13 = avgprec(&[3.0, 2.0, 1.0], &[1, 0, 1]).map_err(|e| e.to_string())?;
    let ap13_label = average_precision_noninterp(&[3.0, 2.0, 1.0], &[1, 0, 1])
        .map_err(|e| e.to_string())?
        .unwrap_or(f64::NAN);
    let groups: [AttributeGroup; 0] = [];
    let wmap = weighted_map(&[Some(1.0), Some(0.5)], &[3, 1], &groups)
        .map_err(|e| e.to_string())?
        .overall
        .unwrap_or(f64::NAN);
    let cases = [
        ("equal-logit smooth loss", l2, std::f64::consts::LN_2),
        ("two-negative smooth loss", l3, 3f64.ln()),
        ("ranks {1,3} AVGPREC", ap13, 5.0 / 6.0),
        ("ranks {1,3} AP", ap13_label, 5.0 / 6.0),
        ("weighted MAP", wmap, 0.875),
    ];
    for (name, got, want) in cases {
        ensure!((got - want).abs() < 1e-6, "{name}: {got} vs {want}");
    }
    Ok(format!(
        "log2 {l2:.6}, log3 {l3:.6}, {ap13:.6}, {ap13_label:.6}, {wmap:.6}"
    ))
}

fn parameter_accounting() -> Check {
    let r = ratio_report(&ModelConfig::new(512, 20, 312));
    ensure!(r.head == 3_205_452, "head count {}", r.head);
    ensure!(r.baseline_fc == 120_824_120, "baseline count {}", r.baseline_fc);
    ensure!((35.0..=42.0).contains(&r.ratio), "ratio {}", r.ratio);
    Ok(format!(
        "head {}, baseline {}, ratio {:.1}",
        r.head, r.baseline_fc, r.ratio
    ))
}

fn ica_and_pca() -> Check {
    let mix = oracles::mixed_uniform_sources(20_000, [[1.0, 0.6], [0.4, 1.0]], 42);
    let basis = fit_fastica(&mix.bank, IcaOptions::new(2)).map_err(|e| e.to_string())?;
    let recovered = &mix.bank.samples * basis.weight_matrix();
    let mut rhos = Vec::new();
    for k in 0..2 {
        let best = (0..2)
            .map(|s| oracles::correlation(recovered.column(k).as_slice(), mix.sources.column(s).as_slice()).abs())
            .fold(0.0, f64::max);
        ensure!(best >= 0.95, "ICA component {k}: |rho| = {best}");
        rhos.push(best);
    }
    let planted = PlantedDataset::generate(PlantedOptions::default());
    let store = planted.store();
    let bank = sample_locations(&store, &planted.split.train_ids, 4, 0).map_err(|e| e.to_string())?;
    let mut variances = Vec::new();
    for b in [&mix.bank, &bank] {
        let pca = fit_pca(b, b.channels()).map_err(|e| e.to_string())?;
        for v in pca.projected_variances(b) {
            ensure!((v - 1.0).abs() <= 1e-2, "PCA projected variance {v}");
            variances.push(v);
        }
    }
    let spread = variances.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    Ok(format!(
        "ICA |rho| {:.4}, {:.4}; PCA variances within {spread:.1e} of 1",
        rhos[0], rhos[1]
    ))
}

fn planted_training() -> Check {
    let ds = PlantedDataset::generate(PlantedOptions::default());
    let store = ds.store();
    let bank = sample_locations(&store, &ds.split.train_ids, 4, 0).map_err(|e| e.to_string())?;
    let basis = fit_pca(&bank, ds.options.channels).map_err(|e| e.to_string())?;
    let init = init_params(ds.model_config(), &basis, 0).map_err(|e| e.to_string())?;
    let data = TrainData {
        store: &store,
        labels: &ds.labels,
        split: &ds.split,
    };
    let config = |loss| TrainConfig {
        optimizer: OptimizerConfig::new(OptimizerKind::Adam, 1e-3),
        epochs: 30,
        batch_size: 16,
        loss,
        exec: Execution::Sequential,
        ..TrainConfig::new(OptimizerKind::Adam)
    };
    let start = Instant::now();
    let smooth = train(init.clone(), data, &config(LossKind::Smooth), &mut ()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let ratio = smooth.final_loss / smooth.initial_loss;
    let val = smooth.history.last().and_then(|r| r.val_avgprec).unwrap_or(f64::NAN);
    ensure!(ratio < 0.25, "smooth loss ratio {ratio:.3}");
    ensure!(val >= 0.95, "smooth validation AVGPREC {val:.4}");
    ensure!(elapsed < Duration::from_secs(120), "smooth training took {elapsed:.1?}");
    let hinge = train(init, data, &config(LossKind::Hinge), &mut ()).map_err(|e| e.to_string())?;
    let hval = hinge.history.last().and_then(|r| r.val_avgprec).unwrap_or(f64::NAN);
    ensure!(hval >= 0.90, "hinge validation AVGPREC {hval:.4}");
    Ok(format!(
        "smooth loss ratio {ratio:.3}, val {val:.4} in {elapsed:.1?} single-threaded; hinge val {hval:.4}"
    ))
}

fn loss_invariants() -> Check {
    let mut rng = rng(808);
    let kinds = [LossKind::Smooth, LossKind::Hinge, LossKind::HingeSum];
    for i in 0..1000 {
        let n = rng.random_range(2..=12);
        let rel = RelevanceSets::from_row(&rankable_row(&mut rng, n));
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shift = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let huge: Vec<f64> = (0..n).map(|_| rng.random_range(-1e4..1e4)).collect();
        for kind in kinds {
            let base = rank_loss(kind, &logits, &rel).map_err(|e| e.to_string())?;
            let moved = rank_loss(kind, &shifted, &rel).map_err(|e| e.to_string())?;
            ensure!(
                (base.loss - moved.loss).abs() < 1e-9,
                "instance {i} {kind:?}: shift changes loss by {:e}",
                base.loss - moved.loss
            );
            let sum: f64 = base.grad.iter().sum();
            ensure!(sum.abs() < 1e-9, "instance {i} {kind:?}: gradient sums to {sum:e}");
            let big = rank_loss(kind, &huge, &rel).map_err(|e| e.to_string())?;
            ensure!(
                big.loss.is_finite() && big.grad.iter().all(|g| g.is_finite()),
                "instance {i} {kind:?}: non-finite at magnitude 1e4"
            );
        }
    }
    Ok("1000 instances x smooth, hinge, hinge-sum".into())
}

fn cub_pipeline() -> Result<Outcome, String> {
    let Some(dir) = std::env::var_os("FINETAG_CUB_DIR").map(PathBuf::from) else {
        return Ok(Outcome::Skipped(
            "set FINETAG_CUB_DIR to the extracted CUB_200_2011 directory".into(),
        ));
    };
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    run(&[
        "convert",
        "--cub-dir",
        path(&dir),
        "--out",
        path(out.path()),
        "--val-size",
        "700",
    ])?;
    let labels = LabelMatrix::from_bytes(&read(&out.path().join("labels.ftlm"))?).map_err(|e| e.to_string())?;
    let split: DatasetSplit =
        serde_json::from_slice(&read(&out.path().join("split.json"))?).map_err(|e| e.to_string())?;
    let vocab: serde_json::Value =
        serde_json::from_slice(&read(&out.path().join("vocabulary.json"))?).map_err(|e| e.to_string())?;
    let groups = vocab["groups"].as_array().map_or(0, Vec::len);

    let raw_path = ["attributes/image_attribute_labels.txt", "image_attribute_labels.txt"]
        .iter()
        .map(|p| dir.join(p))
        .find(|p| p.is_file())
        .ok_or("image_attribute_labels.txt not found")?;
    let raw = String::from_utf8_lossy(&read(&raw_path)?).into_owned();
    let present = raw.lines().filter(|l| l.split_whitespace().nth(2) == Some("1")).count() as u64;
    let official = String::from_utf8_lossy(&read(&dir.join("train_test_split.txt"))?).into_owned();
    let official_train = official
        .lines()
        .filter(|l| l.split_whitespace().nth(1) == Some("1"))
        .count();

    ensure!(
        labels.rows() == 11_788 && labels.cols() == 312,
        "matrix {}x{}",
        labels.rows(),
        labels.cols()
    );
    ensure!(groups == 28, "{groups} groups");
    ensure!(
        split.train_ids.len() == official_train,
        "train {} vs official {official_train}",
        split.train_ids.len()
    );
    ensure!(
        split.val_ids.len() == 700 && split.test_ids.len() == 5094,
        "val {} test {}",
        split.val_ids.len(),
        split.test_ids.len()
    );
    ensure!(
        labels.positive_count() == present,
        "positives {} vs raw {present}",
        labels.positive_count()
    );
    Ok(Outcome::Pass(format!(
        "11788x312, 28 groups, train {official_train} / val 700 / test 5094, {present} positives"
    )))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn run(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_finetag"))
        .args(args)
        .env_remove("FINETAG_THREADS")
        .env_remove("RUST_LOG")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "finetag {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

/// Relative path to contents of every file under `dir`.
fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), read(&p)?);
            }
        }
    }
    Ok(files)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cub = tmp.path().join("cub");
    PlantedDataset::generate(PlantedOptions::default())
        .write_cub_layout(&cub)
        .map_err(|e| e.to_string())?;
    let features = cub.join("features.ftns");
    let pipeline = |root: &Path| -> Result<(), String> {
        let (data, proj, runs, eval) = (
            root.join("data"),
            root.join("proj"),
            root.join("run"),
            root.join("eval"),
        );
        run(&[
            "convert",
            "--cub-dir",
            path(&cub),
            "--out",
            path(&data),
            "--val-size",
            "20",
            "--seed",
            "3",
        ])?;
        let split = data.join("split.json");
        let basis = proj.join("basis.ftpj");
        run(&[
            "fit-projection",
            "--features",
            path(&features),
            "--split",
            path(&split),
            "--method",
            "ica",
            "--components",
            "4",
            "--per-image",
            "4",
            "--seed",
            "3",
            "--out",
            path(&basis),
        ])?;
        let labels = data.join("labels.ftlm");
        run(&[
            "--threads",
            "1",
            "train",
            "--features",
            path(&features),
            "--labels",
            path(&labels),
            "--split",
            path(&split),
            "--projection",
            path(&basis),
            "--epochs",
            "3",
            "--lr",
            "1e-3",
            "--seed",
            "3",
            "--out-dir",
            path(&runs),
        ])?;
        run(&[
            "eval",
            "--checkpoint",
            path(&runs.join("final.ftmd")),
            "--features",
            path(&features),
            "--labels",
            path(&labels),
            "--split-file",
            path(&split),
            "--split",
            "val",
            "--out",
            path(&eval),
        ])
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a)?;
    pipeline(&b)?;
    let mut compared = Vec::new();
    for (stage, sub) in [
        ("convert", "data"),
        ("fit-projection", "proj"),
        ("train", "run"),
        ("eval", "eval"),
    ] {
        let (x, y) = (snapshot(&a.join(sub))?, snapshot(&b.join(sub))?);
        ensure!(!x.is_empty(), "{stage} wrote nothing");
        ensure!(
            x.keys().eq(y.keys()),
            "{stage} file sets differ: {:?} vs {:?}",
            x.keys().collect::<Vec<_>>(),
            y.keys().collect::<Vec<_>>()
        );
        if let Some((name, _)) = x.iter().find(|(k, v)| y[*k] != **v) {
            return Err(format!("{stage}: {} differs between runs", name.display()));
        }
        compared.push(format!("{stage} {} files", x.len()));
    }
    Ok(format!("byte-identical: {}", compared.join(", ")))
}

fn runner() -> TestRunner {
    let config = Config {
        cases: 128,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng)
}

/// Every single-bit flip of the trailing CRC must be rejected by `decode`.
fn crc_flips_rejected<T, E>(bytes: &[u8], decode: impl Fn(&[u8]) -> Result<T, E>) -> Result<(), TestCaseError> {
    let n = bytes.len();
    for pos in n - 4..n {
        for bit in 0..8 {
            let mut b = bytes.to_vec();
            b[pos] ^= 1 << bit;
            prop_assert!(decode(&b).is_err(), "CRC flip at byte {pos} bit {bit} accepted");
        }
    }
    Ok(())
}

fn single_flip(bytes: &[u8], pos: prop::sample::Index, bit: u8) -> Vec<u8> {
    let mut b = bytes.to_vec();
    let i = pos.index(b.len());
    b[i] ^= 1 << bit;
    b
}

fn ftlm_strategy() -> impl Strategy<Value = LabelMatrix> {
    (prop::collection::vec(1u32..50, 1..20), 1usize..40).prop_flat_map(|(steps, cols)| {
        let ids: Vec<u32> = steps
            .iter()
            .scan(0u32, |acc, s| {
                *acc += s;
                Some(*acc)
            })
            .collect();
        let rows = ids.len();
        prop::collection::vec(any::<bool>(), rows * cols).prop_map(move |bits| {
            let mut m = LabelMatrix::zeros(ids.clone(), cols).unwrap();
            for (i, &b) in bits.iter().enumerate() {
                m.set(i / cols, i % cols, b);
            }
            m
        })
    })
}

fn ftns_strategy() -> impl Strategy<Value = Vec<FeatureMap>> {
    (1usize..5, prop::collection::btree_set(1u32..1000, 1..6)).prop_flat_map(|(c, ids)| {
        let maps: Vec<_> = ids
            .into_iter()
            .map(|id| {
                (1usize..4, 1usize..4).prop_flat_map(move |(h, w)| {
                    prop::collection::vec(-1e6f32..1e6, c * h * w).prop_map(move |v| FeatureMap::new(id, c, h, w, v))
                })
            })
            .collect();
        maps
    })
}

fn ftpj_strategy() -> impl Strategy<Value = ProjectionBasis> {
    (1usize..8)
        .prop_flat_map(|c| (Just(c), 1..=c.min(4), any::<bool>()))
        .prop_flat_map(|(c, k, ica)| {
            (prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), c * k + k)).prop_map(
                move |v| {
                    let v: Vec<f64> = v.into_iter().map(f64::from).collect();
                    ProjectionBasis {
                        channels: c,
                        components: k,
                        method: if ica { Method::Ica } else { Method::Pca },
                        weights: v[..c * k].to_vec(),
                        bias: v[c * k..].to_vec(),
                        diagnostics: None,
                    }
                },
            )
        })
}

fn ftmd_strategy() -> impl Strategy<Value = ModelParams> {
    (1usize..4)
        .prop_flat_map(|c| (Just(c), 1..=c, 1usize..5, any::<bool>(), any::<bool>()))
        .prop_flat_map(|(c, k, n, f64_store, norm)| {
            let mut cfg = ModelConfig::new(c, k, n);
            cfg.bcnn_normalize = norm;
            cfg.dtype = if f64_store { Dtype::F64 } else { Dtype::F32 };
            let len = ParamTensors::zeros(&cfg).len();
            prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), len).prop_map(move |v| {
                let mut values = ParamTensors::zeros(&cfg);
                // f32 checkpoints hold f32 values exactly.
                let v: Vec<f64> = match cfg.dtype {
                    Dtype::F64 => v,
                    Dtype::F32 => v
                        .into_iter()
                        .map(|x| f64::from((x as f32).clamp(f32::MIN, f32::MAX)))
                        .collect(),
                };
                values.assign_flat(&v);
                ModelParams::new(cfg, values).unwrap()
            })
        })
}

fn round_trips() -> Check {
    let flip = (any::<prop::sample::Index>(), 0u8..8);

    runner()
        .run(&(ftlm_strategy(), flip.clone()), |(m, (pos, bit))| {
            let bytes = m.to_bytes();
            prop_assert_eq!(&LabelMatrix::from_bytes(&bytes).unwrap(), &m);
            crc_flips_rejected(&bytes, LabelMatrix::from_bytes)?;
            prop_assert!(LabelMatrix::from_bytes(&single_flip(&bytes, pos, bit)).is_err());
            Ok(())
        })
        .map_err(|e| format!("FTLM: {e}"))?;

    runner()
        .run(&(ftns_strategy(), flip.clone()), |(maps, (pos, bit))| {
            let mut bytes = Vec::new();
            write_store(&maps, &mut bytes).unwrap();
            let store = FeatureStore::from_bytes(bytes.clone()).unwrap();
            for m in &maps {
                let back = store.read(m.image_id).unwrap();
                prop_assert_eq!(
                    back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    m.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
                prop_assert_eq!(&back, m);
            }
            crc_flips_rejected(&bytes, |b| FeatureStore::from_bytes(b.to_vec()))?;
            let detected = match FeatureStore::from_bytes(single_flip(&bytes, pos, bit)) {
                Err(_) => true,
                Ok(s) => maps.iter().any(|m| s.read(m.image_id).map_or(true, |b| b != *m)),
            };
            prop_assert!(detected, "bit flip went unnoticed");
            Ok(())
        })
        .map_err(|e| format!("FTNS: {e}"))?;

    runner()
        .run(&(ftpj_strategy(), flip.clone()), |(basis, (pos, bit))| {
            let bytes = basis.to_bytes();
            let back = ProjectionBasis::from_bytes(&bytes).unwrap();
            prop_assert_eq!(bits(&back.weights), bits(&basis.weights));
            prop_assert_eq!(bits(&back.bias), bits(&basis.bias));
            prop_assert_eq!(
                (back.channels, back.components, back.method),
                (basis.channels, basis.components, basis.method)
            );
            crc_flips_rejected(&bytes, ProjectionBasis::from_bytes)?;
            prop_assert!(ProjectionBasis::from_bytes(&single_flip(&bytes, pos, bit)).is_err());
            Ok(())
        })
        .map_err(|e| format!("FTPJ: {e}"))?;

    runner()
        .run(&(ftmd_strategy(), flip), |(params, (pos, bit))| {
            let bytes = params.to_bytes();
            let back = ModelParams::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.config(), params.config());
            prop_assert_eq!(bits(&back.values().flatten()), bits(&params.values().flatten()));
            crc_flips_rejected(&bytes, ModelParams::from_bytes)?;
            prop_assert!(ModelParams::from_bytes(&single_flip(&bytes, pos, bit)).is_err());
            Ok(())
        })
        .map_err(|e| format!("FTMD: {e}"))?;

    Ok(
        "FTLM, FTNS, FTPJ, FTMD: 128 random cases each, bit-exact; every CRC bit flip and random bit flips rejected"
            .into(),
    )
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn main() {
    let criteria: [(&str, Criterion); 11] = [
        ("gradient correctness", || gradient_correctness().map(Outcome::Pass)),
        ("hinge loss vs all-pairs oracle", || {
            hinge_correctness().map(Outcome::Pass)
        }),
        ("metric oracle equivalence", || metric_equivalence().map(Outcome::Pass)),
        ("hand values", || hand_values().map(Outcome::Pass)),
        ("parameter accounting", || parameter_accounting().map(Outcome::Pass)),
        ("FastICA recovery and PCA whitening", || {
            ica_and_pca().map(Outcome::Pass)
        }),
        ("planted-model training", || planted_training().map(Outcome::Pass)),
        ("loss invariants", || loss_invariants().map(Outcome::Pass)),
        ("CUB-200-2011 data pipeline", cub_pipeline),
        ("CLI determinism", || determinism().map(Outcome::Pass)),
        ("format round-trips and CRC detection", || {
            round_trips().map(Outcome::Pass)
        }),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty()
            && !filter.iter().any(|f| match f.parse::<usize>() {
                Ok(n) => n == id,
                Err(_) => name.contains(f.as_str()),
            })
        {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
                Err(format!("panicked: {}", msg.unwrap_or_default()))
            })
            .unwrap_or_else(Outcome::Fail);
        let elapsed = start.elapsed();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Skipped(d) => ("SKIPPED", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {tag:<7} {name} ({elapsed:.1?}): {detail}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
