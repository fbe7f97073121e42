use std::collections::{BTreeMap, BTreeSet};

use deid_core::backends::Registry;
use deid_core::dataset::{generate, DatasetCounts, DatasetManifest, GeneratorConfig};
use deid_core::metrics::{
    aggregate_runs, evaluate_run, latency_per_image, micro_pr, MatchCriterion, MetricsError, PrCounts,
};
use deid_core::orchestrator::{run_pipeline, ImageResult, RunResult};
use deid_core::{
    AnalysisVerdict, BoundingBox, CropExtraction, DatasetStyle, ImageRecord, ImprintRecord, PhiCategory, RunConfig,
    Setup,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn imprint(id: u32, is_phi: bool) -> ImprintRecord {
    ImprintRecord {
        imprint_id: id,
        bbox: BoundingBox::new(10, 10 + id * 30, 100, 20),
        text: format!("text {id}"),
        is_phi,
        category: is_phi.then_some(PhiCategory::Name),
        font_height: 14,
        contrast: 0.9,
    }
}

fn one_image_manifest(imprints: Vec<ImprintRecord>) -> DatasetManifest {
    let rec = ImageRecord {
        image_id: "img-0".into(),
        width: 256,
        height: 256,
        modality: "CT".into(),
        style: DatasetStyle::RadphiLike,
        background: 0,
        imprints,
        pixel_path: None,
    };
    let records = vec![rec];
    DatasetManifest {
        dataset_id: "fixture".into(),
        generator: GeneratorConfig::for_style(DatasetStyle::RadphiLike, 1, 0),
        counts: DatasetCounts::from_records(&records),
        records,
    }
}

fn result_for(m: &DatasetManifest, flagged: &[u32]) -> RunResult {
    let rec = &m.records[0];
    let extractions = rec
        .imprints
        .iter()
        .map(|i| CropExtraction {
            image_id: rec.image_id.clone(),
            imprint_id: i.imprint_id,
            bbox: i.bbox,
            text: i.text.clone(),
            backend_id: "x".into(),
            latency_s: 0.0,
            confidence: None,
        })
        .collect();
    let verdicts = rec
        .imprints
        .iter()
        .map(|i| AnalysisVerdict {
            image_id: rec.image_id.clone(),
            imprint_id: i.imprint_id,
            term_index: 0,
            is_phi: flagged.contains(&i.imprint_id),
            category: flagged.contains(&i.imprint_id).then_some(PhiCategory::Name),
            rationale: String::new(),
        })
        .collect();
    RunResult {
        run_config: RunConfig::new(Setup::A, "gt", "x", "y"),
        run_index: 0,
        run_seed: 0,
        per_image: vec![ImageResult {
            image_id: rec.image_id.clone(),
            extractions,
            verdicts,
            missing: Vec::new(),
            unclassified: Vec::new(),
        }],
        wall_time: 100.0,
        prompt_hash: String::new(),
        hybrid_threshold: None,
        events: Vec::new(),
    }
}

#[test]
fn hand_enumerated_example() {
    // three PHI imprints (0, 1, 2), two non-PHI (3, 4)
    let m = one_image_manifest((0..5).map(|i| imprint(i, i < 3)).collect());
    let r = result_for(&m, &[0, 1, 3]);
    for criterion in [MatchCriterion::ById, MatchCriterion::iou()] {
        let c = micro_pr(&m, &r, criterion).unwrap();
        assert_eq!(c, PrCounts { tp: 2, fp: 1, fn_: 1, category_matches: 2 });
        assert!((c.precision() - 2.0 / 3.0).abs() < 1e-12);
        assert!((c.recall() - 2.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn empty_prediction_convention() {
    let m = one_image_manifest((0..5).map(|i| imprint(i, i < 3)).collect());
    let c = micro_pr(&m, &result_for(&m, &[]), MatchCriterion::ById).unwrap();
    assert_eq!((c.precision(), c.recall()), (1.0, 0.0));
    let all = micro_pr(&m, &result_for(&m, &[0, 1, 2]), MatchCriterion::ById).unwrap();
    assert_eq!((all.precision(), all.recall()), (1.0, 1.0));
    let none_phi = one_image_manifest((0..2).map(|i| imprint(i, false)).collect());
    let c = micro_pr(&none_phi, &result_for(&none_phi, &[]), MatchCriterion::ById).unwrap();
    assert_eq!((c.precision(), c.recall()), (1.0, 1.0));
}

#[test]
fn verdict_for_unknown_imprint_is_an_error() {
    let m = one_image_manifest((0..2).map(|i| imprint(i, true)).collect());
    let mut r = result_for(&m, &[0]);
    r.per_image[0].verdicts[0].imprint_id = 99;
    assert_eq!(
        micro_pr(&m, &r, MatchCriterion::ById),
        Err(MetricsError::UnknownImprint { image_id: "img-0".into(), imprint_id: 99 })
    );
}

#[test]
fn shifted_box_fails_iou_but_not_id() {
    let m = one_image_manifest(vec![imprint(0, true)]);
    let mut r = result_for(&m, &[0]);
    // IoU of a 100x20 box shifted right by 50 is 1/3
    r.per_image[0].extractions[0].bbox = BoundingBox::new(60, 10, 100, 20);
    assert_eq!(micro_pr(&m, &r, MatchCriterion::ById).unwrap().tp, 1);
    let c = micro_pr(&m, &r, MatchCriterion::iou()).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_), (0, 1, 1));
    let loose = micro_pr(&m, &r, MatchCriterion::ByIoU { threshold: 0.3 }).unwrap();
    assert_eq!(loose.tp, 1);
}

#[test]
fn latency_per_image_examples() {
    assert_eq!(latency_per_image(100.0, 50).unwrap(), 2.0);
    assert_eq!(latency_per_image(1.0, 0), Err(MetricsError::NoImages));
}

#[test]
fn aggregation_of_identical_runs_equals_each_run() {
    let reg = Registry::builtin();
    let m = generate(&GeneratorConfig::for_style(DatasetStyle::MidiLike, 20, 1)).unwrap();
    let cfg = RunConfig::new(Setup::A, "ground-truth", "sim-ocr", "rule-based");
    let r = run_pipeline(&m, &cfg, &reg).unwrap();
    let single = evaluate_run(&m, &r, MatchCriterion::ById).unwrap();
    let agg = aggregate_runs(&m, &vec![r.clone(); 5], MatchCriterion::ById).unwrap();
    assert_eq!(
        (agg.precision, agg.recall, agg.wer, agg.cer),
        (single.precision, single.recall, single.wer, single.cer)
    );
    assert!((agg.latency_per_image - single.latency_per_image).abs() < 1e-12);
    assert_eq!((agg.runs, agg.per_run.len(), agg.tp), (5, 5, single.tp * 5));
    assert_eq!(aggregate_runs(&m, std::slice::from_ref(&r), MatchCriterion::ById).unwrap(), single);

    let mut other = r.clone();
    other.run_config.seed = 77;
    assert_eq!(aggregate_runs(&m, &[r, other], MatchCriterion::ById), Err(MetricsError::MixedConfigs));
}

/// Naive recount straight from the definitions.
fn oracle_counts(m: &DatasetManifest, r: &RunResult) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for rec in &m.records {
        let img = r.per_image.iter().find(|i| i.image_id == rec.image_id);
        let flagged: BTreeSet<u32> =
            img.map(|i| i.verdicts.iter().filter(|v| v.is_phi).map(|v| v.imprint_id).collect()).unwrap_or_default();
        for imp in &rec.imprints {
            match (imp.is_phi, flagged.contains(&imp.imprint_id)) {
                (true, true) => tp += 1,
                (true, false) => fn_ += 1,
                (false, true) => fp += 1,
                (false, false) => {}
            }
        }
    }
    (tp, fp, fn_)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn micro_pr_matches_naive_count(seed in 0u64..10_000, flip in 0.0f64..1.0) {
        let m = generate(&GeneratorConfig::for_style(DatasetStyle::MidiLike, 6, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = result_for(&one_image_manifest(vec![imprint(0, true)]), &[]);
        r.per_image = m
            .records
            .iter()
            // odd seeds leave the last image out of the run entirely
            .take(if seed % 2 == 0 { 6 } else { 5 })
            .map(|rec| {
                let keep: Vec<&ImprintRecord> = rec.imprints.iter().filter(|_| rng.random_bool(0.8)).collect();
                ImageResult {
                    image_id: rec.image_id.clone(),
                    extractions: keep
                        .iter()
                        .map(|i| CropExtraction {
                            image_id: rec.image_id.clone(),
                            imprint_id: i.imprint_id,
                            bbox: i.bbox,
                            text: i.text.clone(),
                            backend_id: "x".into(),
                            latency_s: 0.0,
                            confidence: None,
                        })
                        .collect(),
                    verdicts: keep
                        .iter()
                        .map(|i| {
                            let is_phi = if rng.random_bool(flip) { !i.is_phi } else { i.is_phi };
                            AnalysisVerdict {
                                image_id: rec.image_id.clone(),
                                imprint_id: i.imprint_id,
                                term_index: 0,
                                is_phi,
                                category: is_phi.then_some(PhiCategory::Date),
                                rationale: String::new(),
                            }
                        })
                        .collect(),
                    missing: Vec::new(),
                    unclassified: Vec::new(),
                }
            })
            .collect();
        let n_phi = m.counts.phi_imprints as u64;
        let mut by: BTreeMap<&str, PrCounts> = BTreeMap::new();
        for (name, criterion) in [("id", MatchCriterion::ById), ("iou", MatchCriterion::iou())] {
            let c = micro_pr(&m, &r, criterion).unwrap();
            prop_assert_eq!(c.tp + c.fn_, n_phi);
            prop_assert!((0.0..=1.0).contains(&c.precision()) && (0.0..=1.0).contains(&c.recall()));
            by.insert(name, c);
        }
        prop_assert_eq!(by["id"], by["iou"]);
        let (tp, fp, fn_) = oracle_counts(&m, &r);
        prop_assert_eq!((by["id"].tp, by["id"].fp, by["id"].fn_), (tp, fp, fn_));
    }
}
