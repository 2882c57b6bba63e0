//! Multi-label evaluation.
//!
//! * AVGPREC ranks the labels of one image by score and averages, over the
//!   relevant labels, the fraction of labels at or above each relevant label's
//!   1-based position that are relevant. It is then averaged over images.
//! * Per-label AP ranks the images by one label's score and averages
//!   precision@k over the relevant hits, without interpolating the
//!   precision-recall curve.
//! * W_MAP averages per-label APs weighted by each label's positive count,
//!   overall and per attribute group.
//!
//! Scores are ranked descending. Equal scores are ordered by ascending label
//! (or image) index unless another [`TieRule`] is requested.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{AttributeGroup, AttributeVocabulary};
use crate::exec::Execution;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no relevant label")]
    EmptyRelevantSet,
    #[error("expected {expected} entries, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("every image has an empty relevant set")]
    AllImagesSkipped,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordering of equal scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieRule {
    /// Lower index first.
    #[default]
    Index,
    /// Relevant items before irrelevant ones, then lower index.
    Optimistic,
    /// Irrelevant items before relevant ones, then lower index.
    Pessimistic,
}

/// Label indices sorted by descending score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedLabels {
    pub order: Vec<usize>,
}

impl RankedLabels {
    /// 1-based position of every label.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (rank, &label) in self.order.iter().enumerate() {
            pos[label] = rank + 1;
        }
        pos
    }
}

fn rank_by(scores: &[f64], relevance: &[u8], rule: TieRule) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].total_cmp(&scores[a]).then_with(|| {
            let by_relevance = match rule {
                TieRule::Index => std::cmp::Ordering::Equal,
                TieRule::Optimistic => relevance[b].cmp(&relevance[a]),
                TieRule::Pessimistic => relevance[a].cmp(&relevance[b]),
            };
            by_relevance.then(a.cmp(&b))
        })
    });
    order
}

/// Ranks labels by descending score, ties by ascending index.
pub fn rank_labels(logits: &[f64]) -> RankedLabels {
    RankedLabels {
        order: rank_by(logits, &[], TieRule::Index),
    }
}

/// Mean over hits of `hits_so_far / position` while walking `order`.
fn precision_at_hits(order: &[usize], relevance: &[u8]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &item) in order.iter().enumerate() {
        if relevance[item] != 0 {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

fn check_len(expected: usize, found: usize) -> Result<(), MetricsError> {
    if expected != found {
        return Err(MetricsError::LengthMismatch { expected, found });
    }
    Ok(())
}

/// Ranking-based average precision of one image; `relevant` is its 0/1 label row.
pub fn avgprec(logits: &[f64], relevant: &[u8]) -> Result<f64, MetricsError> {
    avgprec_with(logits, relevant, TieRule::Index)
}

pub fn avgprec_with(logits: &[f64], relevant: &[u8], rule: TieRule) -> Result<f64, MetricsError> {
    check_len(logits.len(), relevant.len())?;
    let order = rank_by(logits, relevant, rule);
    precision_at_hits(&order, relevant).ok_or(MetricsError::EmptyRelevantSet)
}

/// Mean AVGPREC over images with a nonempty relevant set, and the number of
/// images skipped.
pub fn dataset_avgprec(logits: &[Vec<f64>], rows: &[&[u8]]) -> Result<(f64, usize), MetricsError> {
    let per_image = per_image_avgprec(logits, rows, TieRule::Index, Execution::Sequential)?;
    mean_defined(&per_image)
}

/// AVGPREC of every image, `None` where the relevant set is empty.
pub fn per_image_avgprec(
    logits: &[Vec<f64>],
    rows: &[&[u8]],
    rule: TieRule,
    exec: Execution,
) -> Result<Vec<Option<f64>>, MetricsError> {
    check_len(rows.len(), logits.len())?;
    for (l, r) in logits.iter().zip(rows) {
        check_len(r.len(), l.len())?;
    }
    let idx: Vec<usize> = (0..rows.len()).collect();
    Ok(exec.map(&idx, |&i| {
        precision_at_hits(&rank_by(&logits[i], rows[i], rule), rows[i])
    }))
}

fn mean_defined(values: &[Option<f64>]) -> Result<(f64, usize), MetricsError> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::AllImagesSkipped);
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok((mean, values.len() - defined.len()))
}

/// Non-interpolated AP of one label over images; `None` when no image is
/// relevant.
pub fn average_precision_noninterp(scores: &[f64], relevance: &[u8]) -> Result<Option<f64>, MetricsError> {
    average_precision_with(scores, relevance, TieRule::Index)
}

pub fn average_precision_with(scores: &[f64], relevance: &[u8], rule: TieRule) -> Result<Option<f64>, MetricsError> {
    check_len(scores.len(), relevance.len())?;
    Ok(precision_at_hits(&rank_by(scores, relevance, rule), relevance))
}

/// Weighted MAP overall and per group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedMap {
    pub overall: Option<f64>,
    pub per_group: Vec<(String, Option<f64>)>,
}

fn weighted_mean(labels: impl Iterator<Item = usize>, ap: &[Option<f64>], counts: &[u64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for l in labels {
        if let Some(a) = ap[l] {
            num += counts[l] as f64 * a;
            den += counts[l] as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// `sum_l w_l AP_l` over labels with a defined AP, `w_l = count_l / sum count`.
/// Groups without a defined label get `None`.
pub fn weighted_map(
    per_label_ap: &[Option<f64>],
    label_counts: &[u64],
    groups: &[AttributeGroup],
) -> Result<WeightedMap, MetricsError> {
    check_len(per_label_ap.len(), label_counts.len())?;
    if let Some(&bad) = groups
        .iter()
        .flat_map(|g| &g.columns)
        .find(|&&c| c >= per_label_ap.len())
    {
        return Err(MetricsError::LengthMismatch {
            expected: per_label_ap.len(),
            found: bad + 1,
        });
    }
    Ok(WeightedMap {
        overall: weighted_mean(0..per_label_ap.len(), per_label_ap, label_counts),
        per_group: groups
            .iter()
            .map(|g| {
                (
                    g.name.clone(),
                    weighted_mean(g.columns.iter().copied(), per_label_ap, label_counts),
                )
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyRow {
    pub label: usize,
    pub count: u64,
    pub ap: f64,
}

/// AP against positive count, one row per label with a defined AP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyTable {
    /// Sorted by ascending count, then label index.
    pub rows: Vec<FrequencyRow>,
    /// Labels left out because their AP is undefined.
    pub undefined: usize,
}

pub fn ap_vs_frequency_table(
    per_label_ap: &[Option<f64>],
    label_counts: &[u64],
) -> Result<FrequencyTable, MetricsError> {
    check_len(per_label_ap.len(), label_counts.len())?;
    let mut rows: Vec<FrequencyRow> = per_label_ap
        .iter()
        .zip(label_counts)
        .enumerate()
        .filter_map(|(label, (ap, &count))| ap.map(|ap| FrequencyRow { label, count, ap }))
        .collect();
    rows.sort_by_key(|r| (r.count, r.label));
    let undefined = per_label_ap.len() - rows.len();
    Ok(FrequencyTable { rows, undefined })
}

/// Everything `eval` reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub avgprec_mean: f64,
    pub per_label_ap: Vec<Option<f64>>,
    /// Positive count of each label over the evaluated images.
    pub label_counts: Vec<u64>,
    /// Counts used as W_MAP weights.
    pub weight_counts: Vec<u64>,
    pub wmap_overall: Option<f64>,
    pub per_group_wmap: Vec<(String, Option<f64>)>,
    pub skipped_images: usize,
}

/// Compact JSON summary of a [`MetricsReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub avgprec: f64,
    pub wmap: Option<f64>,
    pub skipped: usize,
    pub undefined_labels: usize,
    pub images: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions<'a> {
    pub tie_rule: TieRule,
    /// Weight W_MAP by these counts instead of the evaluated images' counts.
    pub weight_counts: Option<&'a [u64]>,
    pub exec: Execution,
}

/// Evaluates scores `logits[image][label]` against 0/1 label rows.
pub fn evaluate(
    logits: &[Vec<f64>],
    rows: &[&[u8]],
    vocab: &AttributeVocabulary,
    options: EvalOptions<'_>,
) -> Result<MetricsReport, MetricsError> {
    let n = vocab.num_attributes();
    let per_image = per_image_avgprec(logits, rows, options.tie_rule, options.exec)?;
    for r in rows {
        check_len(n, r.len())?;
    }
    let (avgprec_mean, skipped_images) = mean_defined(&per_image)?;
    let columns = options.exec.map_range(n, |label| {
        let scores: Vec<f64> = logits.iter().map(|l| l[label]).collect();
        let rel: Vec<u8> = rows.iter().map(|r| r[label]).collect();
        let count = rel.iter().map(|&b| u64::from(b)).sum::<u64>();
        let ap = precision_at_hits(&rank_by(&scores, &rel, options.tie_rule), &rel);
        (ap, count)
    });
    let (per_label_ap, label_counts): (Vec<Option<f64>>, Vec<u64>) = columns.into_iter().unzip();
    let weight_counts = match options.weight_counts {
        Some(w) => {
            check_len(n, w.len())?;
            w.to_vec()
        }
        None => label_counts.clone(),
    };
    let wmap = weighted_map(&per_label_ap, &weight_counts, &vocab.groups())?;
    Ok(MetricsReport {
        avgprec_mean,
        per_label_ap,
        label_counts,
        weight_counts,
        wmap_overall: wmap.overall,
        per_group_wmap: wmap.per_group,
        skipped_images,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn undefined_labels(&self) -> usize {
        self.per_label_ap.iter().filter(|a| a.is_none()).count()
    }

    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary {
            avgprec: self.avgprec_mean,
            wmap: self.wmap_overall,
            skipped: self.skipped_images,
            undefined_labels: self.undefined_labels(),
            images: 0,
        }
    }

    /// `label,attribute_id,group,variety,count,ap` with an empty `ap` when undefined.
    pub fn write_per_label_csv<W: Write>(&self, vocab: &AttributeVocabulary, sink: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["label", "attribute_id", "group", "variety", "count", "ap"])?;
        for (label, (entry, (ap, count))) in vocab
            .entries()
            .iter()
            .zip(self.per_label_ap.iter().zip(&self.label_counts))
            .enumerate()
        {
            w.write_record([
                label.to_string(),
                entry.id.to_string(),
                entry.group.clone(),
                entry.variety.clone(),
                count.to_string(),
                fmt_opt(*ap),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One column per attribute group and a single row of W_MAP values.
    pub fn write_per_group_csv<W: Write>(&self, sink: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(self.per_group_wmap.iter().map(|(name, _)| name.as_str()))?;
        w.write_record(self.per_group_wmap.iter().map(|(_, v)| fmt_opt(*v)))?;
        w.flush()?;
        Ok(())
    }

    /// `label,name,count,ap` sorted by count, followed by a `# undefined: n` line.
    pub fn write_ap_vs_frequency_csv<W: Write>(
        &self,
        vocab: &AttributeVocabulary,
        mut sink: W,
    ) -> Result<(), MetricsError> {
        let table = ap_vs_frequency_table(&self.per_label_ap, &self.label_counts)?;
        {
            let mut w = csv::Writer::from_writer(&mut sink);
            w.write_record(["label", "name", "count", "ap"])?;
            for r in &table.rows {
                w.write_record([
                    r.label.to_string(),
                    vocab.full_name(r.label),
                    r.count.to_string(),
                    r.ap.to_string(),
                ])?;
            }
            w.flush()?;
        }
        writeln!(sink, "# undefined: {}", table.undefined)?;
        Ok(())
    }
}
