use std::collections::BTreeSet;
use std::sync::Arc;

use deid_core::backends::scripted::ScriptedChat;
use deid_core::backends::sim::SimLocalizer;
use deid_core::backends::{
    BackendDescriptor, BackendKind, CallContext, Extractor, ExtractorApi, GroundTruthLocalizer, LatencyModel,
    Localizer, Registry, SimConfig,
};
use deid_core::dataset::{generate, DatasetManifest, GeneratorConfig};
use deid_core::metrics::{evaluate_run, micro_pr, MatchCriterion};
use deid_core::orchestrator::{run_hybrid, run_pipeline, run_repeated, Backends, EventKind, Pipeline, Stage};
use deid_core::{DatasetStyle, RunConfig, Setup};

fn manifest(style: DatasetStyle, n: usize, seed: u64) -> DatasetManifest {
    generate(&GeneratorConfig::for_style(style, n, seed)).unwrap()
}

fn oracle(setup: Setup) -> RunConfig {
    let extractor = if setup == Setup::A { "sim-ocr-clean" } else { "sim-lmm-clean" };
    RunConfig::new(setup, "ground-truth", extractor, "rule-based")
}

#[test]
fn oracle_backends_reproduce_ground_truth_labels() {
    let reg = Registry::builtin();
    for style in [DatasetStyle::RadphiLike, DatasetStyle::MidiLike] {
        let m = manifest(style, 50, 3);
        for setup in [Setup::A, Setup::B] {
            let r = run_pipeline(&m, &oracle(setup), &reg).unwrap();
            assert_eq!(r.per_image.len(), m.records.len());
            for (img, rec) in r.per_image.iter().zip(&m.records) {
                assert!(img.missing.is_empty() && img.unclassified.is_empty());
                assert_eq!(img.verdicts.len(), rec.imprints.len());
                for (v, gt) in img.verdicts.iter().zip(&rec.imprints) {
                    assert_eq!(v.imprint_id, gt.imprint_id);
                    assert_eq!(v.is_phi, gt.is_phi, "{}: {}", rec.image_id, gt.text);
                    assert_eq!(v.category, gt.category);
                }
            }
            let report = evaluate_run(&m, &r, MatchCriterion::ById).unwrap();
            assert_eq!((report.precision, report.recall, report.wer, report.cer), (1.0, 1.0, 0.0, 0.0));
        }
    }
}

#[test]
fn total_extractor_failure_marks_every_imprint_missing() {
    let mut reg = Registry::builtin();
    reg.insert(BackendDescriptor::simulated(
        "broken-ocr",
        BackendKind::Extractor,
        ExtractorApi::Dedicated,
        SimConfig::default().with_failure_rate(1.0),
    ));
    let m = manifest(DatasetStyle::RadphiLike, 20, 5);
    let cfg = RunConfig::new(Setup::A, "ground-truth", "broken-ocr", "rule-based").with_retry_limit(0);
    let r = run_pipeline(&m, &cfg, &reg).unwrap();
    for (img, rec) in r.per_image.iter().zip(&m.records) {
        let ids: Vec<u32> = rec.imprints.iter().map(|i| i.imprint_id).collect();
        assert_eq!(img.missing, ids);
        assert!(img.extractions.is_empty() && img.verdicts.is_empty());
    }
    assert!(r.events.iter().all(|e| e.stage == Stage::Localize || e.kind == EventKind::Failed));
    let report = evaluate_run(&m, &r, MatchCriterion::ById).unwrap();
    assert_eq!((report.precision, report.recall, report.tp), (1.0, 0.0, 0));
}

#[test]
fn identical_inputs_give_identical_results() {
    let reg = Registry::builtin();
    let m = manifest(DatasetStyle::MidiLike, 40, 9);
    for cfg in [
        RunConfig::new(Setup::A, "sim-localizer", "sim-ocr", "rule-based").with_seed(4),
        RunConfig::new(Setup::B, "sim-localizer", "sim-lmm-small", "rule-based").with_seed(4),
    ] {
        let a = run_pipeline(&m, &cfg, &reg).unwrap().without_timing();
        let b = run_pipeline(&m, &cfg, &reg).unwrap().without_timing();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn localized_imprints_are_conserved_and_stages_are_barriered() {
    let reg = Registry::builtin();
    let mut reg2 = reg.clone();
    reg2.insert(BackendDescriptor::simulated(
        "flaky-ocr",
        BackendKind::Extractor,
        ExtractorApi::Dedicated,
        SimConfig::default().with_failure_rate(0.3),
    ));
    let m = manifest(DatasetStyle::MidiLike, 30, 12);
    let cfg = RunConfig::new(Setup::A, "sim-localizer", "flaky-ocr", "rule-based").with_retry_limit(0).with_seed(3);
    let r = run_pipeline(&m, &cfg, &reg2).unwrap();

    let loc = SimLocalizer::new("l", SimConfig { drop_prob: 0.02, jitter_px: 2, ..SimConfig::default() });
    let ctx = CallContext { run_seed: r.run_seed, retry_limit: 0, call_key: 0, round: 0 };
    let mut total_missing = 0;
    for (img, rec) in r.per_image.iter().zip(&m.records) {
        let localized: BTreeSet<u32> =
            loc.localize(rec, None, &ctx).unwrap().crops.iter().map(|c| c.imprint_id).collect();
        let extracted: BTreeSet<u32> = img.extractions.iter().map(|e| e.imprint_id).collect();
        let missing: BTreeSet<u32> = img.missing.iter().copied().collect();
        assert!(extracted.is_disjoint(&missing));
        assert_eq!(img.extractions.len() + img.missing.len(), localized.len());
        assert_eq!(&extracted | &missing, localized);
        total_missing += missing.len();
    }
    assert!(total_missing > 0, "failure injection should leave some crops missing");

    let last = |s: Stage| r.events.iter().filter(|e| e.stage == s).map(|e| e.seq).max().unwrap();
    let first = |s: Stage| r.events.iter().filter(|e| e.stage == s).map(|e| e.seq).min().unwrap();
    assert!(last(Stage::Localize) < first(Stage::Extract));
    assert!(last(Stage::Extract) < first(Stage::Analyze));
    assert!(r.events.windows(2).all(|w| w[0].t_offset <= w[1].t_offset && w[0].seq + 1 == w[1].seq));
}

#[test]
fn wall_time_covers_injected_latency() {
    let mut reg = Registry::builtin();
    reg.insert(BackendDescriptor::simulated(
        "slow-ocr",
        BackendKind::Extractor,
        ExtractorApi::Dedicated,
        SimConfig::default().with_latency(LatencyModel { mean: 0.004, stddev: 0.001 }),
    ));
    let m = manifest(DatasetStyle::RadphiLike, 10, 1);
    let cfg = RunConfig::new(Setup::A, "ground-truth", "slow-ocr", "rule-based");
    let r = run_pipeline(&m, &cfg, &reg).unwrap();
    let injected: f64 = r.events.iter().map(|e| e.latency).sum();
    assert!(injected > 0.0);
    assert!(r.wall_time >= injected, "{} < {injected}", r.wall_time);
}

#[test]
fn repeated_runs_use_distinct_seeds() {
    let reg = Registry::builtin();
    let m = manifest(DatasetStyle::RadphiLike, 15, 2);
    let rs = run_repeated(&m, &oracle(Setup::A).with_repeats(5), &reg).unwrap();
    assert_eq!(rs.len(), 5);
    let seeds: BTreeSet<u64> = rs.iter().map(|r| r.run_seed).collect();
    assert_eq!(seeds.len(), 5);
    for r in &rs {
        assert_eq!(r.per_image, rs[0].per_image);
    }
    let one = run_repeated(&m, &oracle(Setup::A), &reg).unwrap();
    assert_eq!(one.len(), 1);
}

#[test]
fn chunking_follows_backend_limit() {
    let reg = Registry::builtin();
    let m = manifest(DatasetStyle::MidiLike, 10, 4);
    let cfg = RunConfig::new(Setup::B, "ground-truth", "sim-lmm-small", "rule-based");
    let r = run_pipeline(&m, &cfg, &reg).unwrap();
    for rec in &m.records {
        let calls = r.events.iter().filter(|e| e.stage == Stage::Extract && e.image_id == rec.image_id).count();
        assert_eq!(calls, rec.imprints.len().div_ceil(5));
        let analyses = r.events.iter().filter(|e| e.stage == Stage::Analyze && e.image_id == rec.image_id).count();
        assert_eq!(analyses, rec.imprints.len().div_ceil(10));
    }
}

#[test]
fn id_and_iou_matching_agree_on_ground_truth_boxes() {
    let reg = Registry::builtin();
    let m = manifest(DatasetStyle::MidiLike, 60, 8);
    let cfg = RunConfig::new(Setup::A, "ground-truth", "sim-ocr", "rule-based");
    let r = run_pipeline(&m, &cfg, &reg).unwrap();
    let by_id = micro_pr(&m, &r, MatchCriterion::ById).unwrap();
    let by_iou = micro_pr(&m, &r, MatchCriterion::iou()).unwrap();
    assert_eq!(by_id, by_iou);
}

fn hybrid_config() -> RunConfig {
    let mut cfg = RunConfig::new(Setup::A, "ground-truth", "sim-ocr", "rule-based");
    cfg.verifier_id = Some("sim-lmm".into());
    cfg
}

#[test]
fn hybrid_threshold_zero_is_setup_a() {
    let reg = Registry::builtin();
    let m = manifest(DatasetStyle::MidiLike, 30, 6);
    let cfg = hybrid_config();
    let hybrid = run_hybrid(&m, &cfg, &reg, 0.0).unwrap();
    let plain = run_pipeline(&m, &cfg, &reg).unwrap();
    assert_eq!(hybrid.per_image, plain.per_image);
    assert!(hybrid.events.iter().all(|e| e.stage != Stage::Verify));
}

#[test]
fn hybrid_threshold_one_rechecks_every_crop() {
    let reg = Registry::builtin();
    let m = manifest(DatasetStyle::MidiLike, 30, 6);
    let r = run_hybrid(&m, &hybrid_config(), &reg, 1.0).unwrap();
    for img in &r.per_image {
        assert!(img.extractions.iter().all(|e| e.backend_id == "sim-lmm" && e.confidence.is_none()));
    }
}

#[test]
fn hybrid_rechecks_exactly_the_low_confidence_subset() {
    let reg = Registry::builtin();
    let m = manifest(DatasetStyle::RadphiLike, 80, 6);
    let r = run_hybrid(&m, &hybrid_config(), &reg, 0.5).unwrap();
    let mut rechecked = 0;
    for (img, rec) in r.per_image.iter().zip(&m.records) {
        for e in &img.extractions {
            let gt = rec.imprint(e.imprint_id).unwrap();
            // recomputed independently of SimConfig::confidence
            let h = gt.font_height as f64;
            let confidence = gt.contrast * h / (h + 12.0);
            let expected = if confidence < 0.5 { "sim-lmm" } else { "sim-ocr" };
            assert_eq!(e.backend_id, expected, "confidence {confidence}");
            rechecked += usize::from(expected == "sim-lmm");
        }
    }
    assert!(rechecked > 0);
}

#[test]
fn hybrid_requires_a_verifier() {
    let reg = Registry::builtin();
    let m = manifest(DatasetStyle::RadphiLike, 3, 6);
    let cfg = RunConfig::new(Setup::A, "ground-truth", "sim-ocr", "rule-based");
    assert!(run_hybrid(&m, &cfg, &reg, 0.5).is_err());
    let mut bad = hybrid_config();
    bad.verifier_id = Some("sim-ocr".into());
    assert!(run_hybrid(&m, &bad, &reg, 0.5).is_err());
}

#[test]
fn unknown_backend_and_setup_mismatch_are_config_errors() {
    let reg = Registry::builtin();
    let m = manifest(DatasetStyle::RadphiLike, 3, 6);
    let cfg = RunConfig::new(Setup::A, "ground-truth", "nope", "rule-based");
    assert!(run_pipeline(&m, &cfg, &reg).is_err());
    let cfg = RunConfig::new(Setup::A, "ground-truth", "sim-lmm", "rule-based");
    assert!(run_pipeline(&m, &cfg, &reg).is_err());
    let cfg = RunConfig::new(Setup::B, "ground-truth", "sim-ocr", "rule-based");
    assert!(run_pipeline(&m, &cfg, &reg).is_err());
}

fn scripted_setup_b(script: Vec<String>) -> (DatasetManifest, Arc<ScriptedChat>, deid_core::orchestrator::RunResult) {
    let m = manifest(DatasetStyle::RadphiLike, 1, 21);
    let chat = Arc::new(ScriptedChat::new("scripted", 100, script.into_iter().map(Ok).collect()));
    let backends = Backends {
        localizer: Arc::new(GroundTruthLocalizer::new("gt")),
        extractor: Extractor::Chat(chat.clone()),
        analyzer: Registry::builtin().analyzer("rule-based").unwrap(),
        verifier: None,
    };
    let cfg = RunConfig::new(Setup::B, "gt", "scripted", "rule-based").with_chunk_size(100);
    let r = Pipeline::new(cfg, backends).unwrap().run(&m, 0).unwrap();
    (m, chat, r)
}

fn extraction_reply(ids: impl Iterator<Item = u32>) -> String {
    let items: Vec<_> = ids.map(|id| serde_json::json!({"id": id, "text": format!("t{id}")})).collect();
    serde_json::to_string(&items).unwrap()
}

#[test]
fn alignment_mismatch_retries_once_then_succeeds() {
    let n = manifest(DatasetStyle::RadphiLike, 1, 21).records[0].imprints.len() as u32;
    let (_, chat, r) = scripted_setup_b(vec![extraction_reply(0..n + 1), extraction_reply(0..n)]);
    assert_eq!(chat.calls(), 2);
    assert_eq!(r.per_image[0].extractions.len(), n as usize);
    assert!(r.per_image[0].missing.is_empty());
    assert_eq!(r.per_image[0].extractions[0].text, "t0");
}

#[test]
fn alignment_mismatch_twice_marks_chunk_missing() {
    let n = manifest(DatasetStyle::RadphiLike, 1, 21).records[0].imprints.len() as u32;
    let (m, chat, r) = scripted_setup_b(vec![extraction_reply(0..n.saturating_sub(1)), "not json".into()]);
    assert_eq!(chat.calls(), 2);
    let ids: Vec<u32> = m.records[0].imprints.iter().map(|i| i.imprint_id).collect();
    assert_eq!(r.per_image[0].missing, ids);
    let kinds: Vec<_> = r.events.iter().filter(|e| e.stage == Stage::Extract).map(|e| e.kind).collect();
    assert_eq!(kinds, vec![EventKind::Retry, EventKind::Failed]);
}

#[test]
fn scored_recall_drops_with_confusion() {
    let m = manifest(DatasetStyle::RadphiLike, 150, 17);
    let mut last = f64::INFINITY;
    for p in [0.0, 0.1, 0.3] {
        let mut reg = Registry::builtin();
        reg.insert(BackendDescriptor::simulated(
            "ocr-p",
            BackendKind::Extractor,
            ExtractorApi::Dedicated,
            SimConfig::default().with_confusion(p),
        ));
        let r = run_pipeline(&m, &RunConfig::new(Setup::A, "ground-truth", "ocr-p", "rule-based"), &reg).unwrap();
        let recall = micro_pr(&m, &r, MatchCriterion::ById).unwrap().recall();
        assert!(recall <= last, "recall rose to {recall} at confusion {p}");
        last = recall;
    }
    assert!(last < 1.0);
}
