//! Text fidelity (WER/CER), instance-level micro precision/recall, latency
//! and multi-run aggregation, plus the markdown renderings of the results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetManifest;
use crate::domain::{BoundingBox, ImageRecord, MetricsReport, Setup};
use crate::orchestrator::{ImageResult, RunResult};

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("image {0} is not in the manifest")]
    UnknownImage(String),
    #[error("image {image_id}: verdict for unknown imprint {imprint_id}")]
    UnknownImprint { image_id: String, imprint_id: u32 },
    #[error("latency per image needs at least one image")]
    NoImages,
    #[error("nothing to aggregate")]
    Empty,
    #[error("runs were produced with different configurations")]
    MixedConfigs,
    #[error("invalid match criterion `{0}` (expected id or iou:<threshold>)")]
    Criterion(String),
}

/// How a prediction is tied to a ground-truth imprint.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MatchCriterion {
    #[default]
    ById,
    ByIoU {
        threshold: f64,
    },
}

impl MatchCriterion {
    pub fn iou() -> Self {
        MatchCriterion::ByIoU { threshold: DEFAULT_IOU }
    }
}

impl std::str::FromStr for MatchCriterion {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MetricsError::Criterion(s.to_string());
        match s {
            "id" => Ok(MatchCriterion::ById),
            "iou" => Ok(MatchCriterion::iou()),
            _ => {
                let t: f64 = s.strip_prefix("iou:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
                if t > 0.0 && t <= 1.0 {
                    Ok(MatchCriterion::ByIoU { threshold: t })
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl std::fmt::Display for MatchCriterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MatchCriterion::ById => f.write_str("id"),
            MatchCriterion::ByIoU { threshold } => write!(f, "iou:{threshold}"),
        }
    }
}

/// Levenshtein distance with unit costs, two-row DP.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Trim, collapse whitespace runs to one space, lowercase.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WerCer {
    pub wer: f64,
    pub cer: f64,
    pub word_errors: usize,
    pub words: usize,
    pub char_errors: usize,
    pub chars: usize,
    /// Pairs whose reference normalized to the empty string.
    pub skipped: usize,
}

/// Corpus-level rates: summed distances over summed reference lengths.
/// Both rates are 0 when every reference was skipped.
pub fn wer_cer<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)]) -> WerCer {
    let mut s = WerCer::default();
    for (reference, hypothesis) in pairs {
        let r = normalize(reference.as_ref());
        if r.is_empty() {
            s.skipped += 1;
            continue;
        }
        let h = normalize(hypothesis.as_ref());
        let rw: Vec<&str> = r.split(' ').collect();
        let hw: Vec<&str> = if h.is_empty() { Vec::new() } else { h.split(' ').collect() };
        s.word_errors += edit_distance(&rw, &hw);
        s.words += rw.len();
        let rc: Vec<char> = r.chars().collect();
        let hc: Vec<char> = h.chars().collect();
        s.char_errors += edit_distance(&rc, &hc);
        s.chars += rc.len();
    }
    if s.words > 0 {
        s.wer = s.word_errors as f64 / s.words as f64;
        s.cer = s.char_errors as f64 / s.chars as f64;
    }
    s
}

fn record<'a>(manifest: &'a DatasetManifest, image_id: &str) -> Result<&'a ImageRecord, MetricsError> {
    manifest.record(image_id).ok_or_else(|| MetricsError::UnknownImage(image_id.to_string()))
}

/// Ground-truth imprint ids matched by a predicted box or id.
fn matched_imprints(
    rec: &ImageRecord,
    imprint_id: u32,
    bbox: Option<BoundingBox>,
    criterion: MatchCriterion,
) -> Result<Vec<u32>, MetricsError> {
    match criterion {
        MatchCriterion::ById => match rec.imprint(imprint_id) {
            Some(_) => Ok(vec![imprint_id]),
            None => Err(MetricsError::UnknownImprint { image_id: rec.image_id.clone(), imprint_id }),
        },
        MatchCriterion::ByIoU { threshold } => Ok(match bbox {
            Some(b) => rec.imprints.iter().filter(|g| g.bbox.iou(&b) >= threshold).map(|g| g.imprint_id).collect(),
            None => Vec::new(),
        }),
    }
}

/// (reference, hypothesis) per ground-truth imprint; imprints without a
/// matching extraction get an empty hypothesis.
pub fn extraction_pairs(
    manifest: &DatasetManifest,
    result: &RunResult,
    criterion: MatchCriterion,
) -> Result<Vec<(String, String)>, MetricsError> {
    let mut pairs = Vec::new();
    for img in &result.per_image {
        let rec = record(manifest, &img.image_id)?;
        let mut hyp: BTreeMap<u32, &str> = BTreeMap::new();
        for e in &img.extractions {
            for gt in matched_imprints(rec, e.imprint_id, Some(e.bbox), criterion)? {
                hyp.entry(gt).or_insert(&e.text);
            }
        }
        for imp in &rec.imprints {
            pairs.push((imp.text.clone(), hyp.get(&imp.imprint_id).copied().unwrap_or("").to_string()));
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PrCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub category_matches: u64,
}

impl PrCounts {
    /// 1 when nothing was flagged.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 1 when there was nothing to find.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn image_counts(rec: &ImageRecord, img: &ImageResult, criterion: MatchCriterion) -> Result<PrCounts, MetricsError> {
    let boxes: BTreeMap<u32, BoundingBox> = img.extractions.iter().map(|e| (e.imprint_id, e.bbox)).collect();
    let mut hit: BTreeSet<u32> = BTreeSet::new();
    let mut category_hit: BTreeSet<u32> = BTreeSet::new();
    let mut flagged: BTreeSet<u32> = BTreeSet::new();
    let mut counts = PrCounts::default();
    for v in img.verdicts.iter().filter(|v| v.is_phi) {
        // several verdicts on one predicted region count once
        if !flagged.insert(v.imprint_id) {
            continue;
        }
        let matched = matched_imprints(rec, v.imprint_id, boxes.get(&v.imprint_id).copied(), criterion)?;
        let mut any_phi = false;
        for id in matched {
            let gt = rec.imprint(id).expect("matched ids come from the record");
            if gt.is_phi {
                any_phi = true;
                hit.insert(id);
                if v.category.is_some() && v.category == gt.category {
                    category_hit.insert(id);
                }
            }
        }
        if !any_phi {
            counts.fp += 1;
        }
    }
    let n_phi = rec.phi_imprints().count() as u64;
    counts.tp = hit.len() as u64;
    counts.fn_ = n_phi - counts.tp;
    counts.category_matches = category_hit.len() as u64;
    Ok(counts)
}

/// Micro-averaged counts pooled over every ground-truth image. Images absent
/// from the run contribute their PHI imprints as false negatives.
pub fn micro_pr(
    manifest: &DatasetManifest,
    result: &RunResult,
    criterion: MatchCriterion,
) -> Result<PrCounts, MetricsError> {
    let by_id: BTreeMap<&str, &ImageResult> = result.per_image.iter().map(|i| (i.image_id.as_str(), i)).collect();
    for id in by_id.keys() {
        record(manifest, id)?;
    }
    let mut total = PrCounts::default();
    for rec in &manifest.records {
        let c = match by_id.get(rec.image_id.as_str()) {
            Some(img) => image_counts(rec, img, criterion)?,
            None => PrCounts { fn_: rec.phi_imprints().count() as u64, ..PrCounts::default() },
        };
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
        total.category_matches += c.category_matches;
    }
    Ok(total)
}

pub fn latency_per_image(wall_time: f64, n_images: usize) -> Result<f64, MetricsError> {
    if n_images == 0 {
        return Err(MetricsError::NoImages);
    }
    Ok(wall_time / n_images as f64)
}

/// Scores one run against its manifest.
pub fn evaluate_run(
    manifest: &DatasetManifest,
    result: &RunResult,
    criterion: MatchCriterion,
) -> Result<MetricsReport, MetricsError> {
    let pr = micro_pr(manifest, result, criterion)?;
    let text = wer_cer(&extraction_pairs(manifest, result, criterion)?);
    Ok(MetricsReport {
        tp: pr.tp,
        fp: pr.fp,
        fn_: pr.fn_,
        precision: pr.precision(),
        recall: pr.recall(),
        wer: text.wer,
        cer: text.cer,
        latency_per_image: latency_per_image(result.wall_time, result.n_images())?,
        images: result.n_images() as u64,
        runs: 1,
        category_matches: pr.category_matches,
        skipped: text.skipped as u64,
        per_run: Vec::new(),
    })
}

/// Arithmetic mean of the rates; counts are summed; the inputs are kept.
pub fn aggregate_reports(reports: &[MetricsReport]) -> Result<MetricsReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let sum = |f: fn(&MetricsReport) -> u64| reports.iter().map(f).sum::<u64>();
    Ok(MetricsReport {
        tp: sum(|r| r.tp),
        fp: sum(|r| r.fp),
        fn_: sum(|r| r.fn_),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        wer: mean(|r| r.wer),
        cer: mean(|r| r.cer),
        latency_per_image: mean(|r| r.latency_per_image),
        images: reports[0].images,
        runs: sum(|r| r.runs),
        category_matches: sum(|r| r.category_matches),
        skipped: sum(|r| r.skipped),
        per_run: if reports.len() == 1 { Vec::new() } else { reports.to_vec() },
    })
}

pub fn aggregate_runs(
    manifest: &DatasetManifest,
    results: &[RunResult],
    criterion: MatchCriterion,
) -> Result<MetricsReport, MetricsError> {
    let first = results.first().ok_or(MetricsError::Empty)?;
    if results.iter().any(|r| r.run_config != first.run_config) {
        return Err(MetricsError::MixedConfigs);
    }
    let reports = results.iter().map(|r| evaluate_run(manifest, r, criterion)).collect::<Result<Vec<_>, _>>()?;
    aggregate_reports(&reports)
}

/// One line of the cross-setup table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub lmm: String,
    pub setup: Setup,
    pub precision: f64,
    pub recall: f64,
    pub latency_per_image: f64,
    pub runs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyDelta {
    pub lmm: String,
    pub latency_a: f64,
    pub latency_b: f64,
    /// (B - A) / A, percent.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub deltas: Vec<LatencyDelta>,
}

impl Comparison {
    /// Rows sorted by model then setup; deltas for every model run under both.
    pub fn new(mut rows: Vec<ComparisonRow>) -> Self {
        rows.sort_by(|a, b| (a.lmm.as_str(), a.setup as u8).cmp(&(b.lmm.as_str(), b.setup as u8)));
        let mut deltas = Vec::new();
        for a in rows.iter().filter(|r| r.setup == Setup::A) {
            if let Some(b) = rows.iter().find(|r| r.setup == Setup::B && r.lmm == a.lmm) {
                let percent = if a.latency_per_image > 0.0 {
                    (b.latency_per_image - a.latency_per_image) / a.latency_per_image * 100.0
                } else {
                    0.0
                };
                deltas.push(LatencyDelta {
                    lmm: a.lmm.clone(),
                    latency_a: a.latency_per_image,
                    latency_b: b.latency_per_image,
                    percent,
                });
            }
        }
        Self { rows, deltas }
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| LMM | Setup | Precision | Recall | Latency (s/img) |\n|---|---|---|---|---|\n");
        for row in &self.rows {
            let partner = self.rows.iter().find(|r| r.lmm == row.lmm && r.setup != row.setup);
            let cell = |v: f64, other: Option<f64>, higher_is_better: bool| {
                let s = format!("{v:.3}");
                match other {
                    Some(o) if (higher_is_better && v >= o) || (!higher_is_better && v <= o) => format!("**{s}**"),
                    _ => s,
                }
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                row.lmm,
                row.setup,
                cell(row.precision, partner.map(|p| p.precision), true),
                cell(row.recall, partner.map(|p| p.recall), true),
                cell(row.latency_per_image, partner.map(|p| p.latency_per_image), false),
            );
        }
        if !self.deltas.is_empty() {
            out.push('\n');
            for d in &self.deltas {
                let _ = writeln!(
                    out,
                    "- {}: latency {:.3} s (A) -> {:.3} s (B), {}",
                    d.lmm,
                    d.latency_a,
                    d.latency_b,
                    format_percent(d.percent)
                );
            }
        }
        out
    }
}

/// Whole-percent rendering with an explicit sign, `0%` for no change.
pub fn format_percent(p: f64) -> String {
    let r = p.round();
    if r == 0.0 {
        "0%".into()
    } else {
        format!("{r:+.0}%")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrScore {
    pub model: String,
    pub wer: f64,
    pub cer: f64,
    /// Crops whose extraction call failed, scored as empty text.
    pub failures: u64,
    pub skipped: u64,
}

/// Ranks by ascending WER, ties by CER then name.
pub fn rank_ocr(mut scores: Vec<OcrScore>) -> Vec<OcrScore> {
    scores.sort_by(|a, b| a.wer.total_cmp(&b.wer).then(a.cer.total_cmp(&b.cer)).then(a.model.cmp(&b.model)));
    scores
}

pub fn ocr_table(scores: &[OcrScore]) -> String {
    let mut out = String::from("| Model | WER | CER |\n|---|---|---|\n");
    for s in scores {
        let _ = writeln!(out, "| {} | {:.2} | {:.2} |", s.model, s.wer, s.cer);
    }
    out
}
