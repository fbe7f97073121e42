//! Shared vocabulary: images, imprints, PHI labels, run configuration,
//! verdicts and metric reports.
//!
//! Every type here serializes to a JSON object with snake_case field names.
//! The same form is used by manifests, the wire protocol and reports.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Axis-aligned box in integer pixels, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.right() <= width as u64 && self.bottom() <= height as u64
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let left = self.x.max(other.x) as u64;
        let top = self.y.max(other.y) as u64;
        let right = self.right().min(other.right());
        let bottom = self.bottom().min(other.bottom());
        if right <= left || bottom <= top {
            0
        } else {
            (right - left) * (bottom - top)
        }
    }

    pub fn overlaps(&self, other: &BoundingBox) -> bool {
        self.intersection_area(other) > 0
    }

    /// Intersection over union. Degenerate (zero-area) pairs score 0.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// The six PHI text categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiCategory {
    Name,
    Address,
    Identifier,
    Date,
    Phone,
    Email,
}

impl PhiCategory {
    pub const ALL: [PhiCategory; 6] = [
        PhiCategory::Name,
        PhiCategory::Address,
        PhiCategory::Identifier,
        PhiCategory::Date,
        PhiCategory::Phone,
        PhiCategory::Email,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PhiCategory::Name => "name",
            PhiCategory::Address => "address",
            PhiCategory::Identifier => "identifier",
            PhiCategory::Date => "date",
            PhiCategory::Phone => "phone",
            PhiCategory::Email => "email",
        }
    }

    /// Case-insensitive lookup; also accepts plural forms ("dates").
    pub fn parse(s: &str) -> Option<PhiCategory> {
        let lower = s.trim().to_ascii_lowercase();
        PhiCategory::ALL.into_iter().find(|c| {
            let name = c.as_str();
            lower == name || lower.strip_suffix('s') == Some(name) || lower.strip_suffix("es") == Some(name)
        })
    }
}

impl fmt::Display for PhiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One burned-in text region of an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprintRecord {
    pub imprint_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub text: String,
    pub is_phi: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<PhiCategory>,
    pub font_height: u32,
    pub contrast: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetStyle {
    RadphiLike,
    MidiLike,
}

impl DatasetStyle {
    pub fn max_imprints(self) -> usize {
        match self {
            DatasetStyle::RadphiLike => 8,
            DatasetStyle::MidiLike => 40,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            DatasetStyle::RadphiLike => "radphi",
            DatasetStyle::MidiLike => "midi",
        }
    }
}

impl std::str::FromStr for DatasetStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "radphi" | "radphi_like" | "radphi-like" => Ok(DatasetStyle::RadphiLike),
            "midi" | "midi_like" | "midi-like" => Ok(DatasetStyle::MidiLike),
            other => Err(format!("unknown dataset style `{other}` (expected radphi or midi)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub modality: String,
    pub style: DatasetStyle,
    /// Flat background gray level the imprints are drawn over.
    #[serde(default)]
    pub background: u8,
    pub imprints: Vec<ImprintRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_path: Option<String>,
}

impl ImageRecord {
    pub fn imprint(&self, imprint_id: u32) -> Option<&ImprintRecord> {
        self.imprints.iter().find(|i| i.imprint_id == imprint_id)
    }

    pub fn phi_imprints(&self) -> impl Iterator<Item = &ImprintRecord> {
        self.imprints.iter().filter(|i| i.is_phi)
    }
}

/// A broken invariant found by [`validate_image`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self { field: field.into(), rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every invariant of an image record and its imprints.
pub fn validate_image(record: &ImageRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.image_id.is_empty() {
        out.push(Violation::new("image_id", "image id is empty"));
    }
    if record.width == 0 || record.height == 0 {
        out.push(Violation::new("width/height", "image dimensions must be positive"));
    }
    let limit = record.style.max_imprints();
    if record.imprints.len() > limit {
        out.push(Violation::new("imprints", format!("imprint count {} exceeds {}", record.imprints.len(), limit)));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (pos, imp) in record.imprints.iter().enumerate() {
        let field = |name: &str| format!("imprints[{pos}].{name}");
        if !seen.insert(imp.imprint_id) {
            out.push(Violation::new(field("imprint_id"), format!("duplicate imprint id {}", imp.imprint_id)));
        }
        if imp.bbox.w == 0 || imp.bbox.h == 0 {
            out.push(Violation::new(field("box"), "box must have positive width and height"));
        }
        if !imp.bbox.fits_within(record.width, record.height) {
            out.push(Violation::new(field("box"), "box exceeds image bounds"));
        }
        if imp.text.is_empty() {
            out.push(Violation::new(field("text"), "text is empty"));
        }
        if imp.font_height == 0 {
            out.push(Violation::new(field("font_height"), "font height must be at least 1"));
        }
        if !(imp.contrast > 0.0 && imp.contrast <= 1.0) {
            out.push(Violation::new(field("contrast"), "contrast must lie in (0, 1]"));
        }
        match (imp.is_phi, imp.category) {
            (true, None) => out.push(Violation::new(field("category"), "PHI imprint lacks a category")),
            (false, Some(_)) => out.push(Violation::new(field("category"), "non-PHI imprint carries a category")),
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setup {
    /// Dedicated OCR extraction, model-backed analysis.
    A,
    /// Model-backed extraction and analysis.
    B,
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setup::A => f.write_str("A"),
            Setup::B => f.write_str("B"),
        }
    }
}

impl std::str::FromStr for Setup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Setup::A),
            "B" | "b" => Ok(Setup::B),
            other => Err(format!("unknown setup `{other}` (expected A or B)")),
        }
    }
}

pub const DEFAULT_CHUNK_SIZE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub setup: Setup,
    pub chunk_size: usize,
    pub repeats: u32,
    pub seed: u64,
    pub localizer_id: String,
    pub extractor_id: String,
    pub analyzer_id: String,
    pub retry_limit: u32,
    /// Chat-completion extractor used to re-check low-confidence crops in
    /// hybrid runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier_id: Option<String>,
}

impl RunConfig {
    pub fn new(setup: Setup, localizer: &str, extractor: &str, analyzer: &str) -> Self {
        Self {
            setup,
            chunk_size: DEFAULT_CHUNK_SIZE,
            repeats: 1,
            seed: 0,
            localizer_id: localizer.to_string(),
            extractor_id: extractor.to_string(),
            analyzer_id: analyzer.to_string(),
            retry_limit: 2,
            verifier_id: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_repeats(mut self, repeats: u32) -> Self {
        self.repeats = repeats;
        self
    }

    pub fn with_retry_limit(mut self, retry_limit: u32) -> Self {
        self.retry_limit = retry_limit;
        self
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.chunk_size == 0 {
            return Err("chunk_size must be positive".into());
        }
        if self.repeats == 0 {
            return Err("repeats must be at least 1".into());
        }
        Ok(())
    }
}

/// Text extracted for one localized crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropExtraction {
    pub image_id: String,
    pub imprint_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub text: String,
    pub backend_id: String,
    /// Backend-reported call latency attributed to this crop, seconds.
    pub latency_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisVerdict {
    pub image_id: String,
    pub imprint_id: u32,
    pub term_index: u32,
    pub is_phi: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<PhiCategory>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub wer: f64,
    pub cer: f64,
    pub latency_per_image: f64,
    pub images: u64,
    pub runs: u64,
    /// TP instances whose flagged category equals the ground-truth category.
    #[serde(default)]
    pub category_matches: u64,
    /// Reference texts excluded from WER/CER because they normalized to empty.
    #[serde(default)]
    pub skipped: u64,
    /// Per-run reports behind an aggregate; empty for a single run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_run: Vec<MetricsReport>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imprint(id: u32, bbox: BoundingBox) -> ImprintRecord {
        ImprintRecord {
            imprint_id: id,
            bbox,
            text: "CT".into(),
            is_phi: false,
            category: None,
            font_height: 12,
            contrast: 0.8,
        }
    }

    fn image(style: DatasetStyle, imprints: Vec<ImprintRecord>) -> ImageRecord {
        ImageRecord {
            image_id: "img-0".into(),
            width: 512,
            height: 512,
            modality: "CT".into(),
            style,
            background: 0,
            imprints,
            pixel_path: None,
        }
    }

    #[test]
    fn well_formed_image_has_no_violations() {
        let rec = image(
            DatasetStyle::RadphiLike,
            vec![
                imprint(0, BoundingBox::new(0, 0, 40, 14)),
                imprint(1, BoundingBox::new(100, 100, 40, 14)),
                imprint(2, BoundingBox::new(400, 480, 100, 20)),
            ],
        );
        assert!(validate_image(&rec).is_empty());
    }

    #[test]
    fn nine_imprints_on_radphi_image() {
        let imps = (0..9).map(|i| imprint(i, BoundingBox::new(0, i * 20, 40, 14))).collect();
        let v = validate_image(&image(DatasetStyle::RadphiLike, imps));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "imprint count 9 exceeds 8");
        // the same record is fine under the MIDI-like limit
        let imps = (0..9).map(|i| imprint(i, BoundingBox::new(0, i * 20, 40, 14))).collect();
        assert!(validate_image(&image(DatasetStyle::MidiLike, imps)).is_empty());
    }

    #[test]
    fn box_past_right_edge() {
        let v = validate_image(&image(DatasetStyle::RadphiLike, vec![imprint(0, BoundingBox::new(500, 0, 100, 14))]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "box exceeds image bounds");
    }

    #[test]
    fn category_must_track_phi_flag() {
        let mut a = imprint(0, BoundingBox::new(0, 0, 10, 10));
        a.is_phi = true;
        let mut b = imprint(1, BoundingBox::new(20, 0, 10, 10));
        b.category = Some(PhiCategory::Date);
        let v = validate_image(&image(DatasetStyle::RadphiLike, vec![a, b]));
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn iou_of_identical_and_disjoint_boxes() {
        let a = BoundingBox::new(0, 0, 10, 10);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BoundingBox::new(10, 0, 10, 10)), 0.0);
        // half overlap: 50 / 150
        let b = BoundingBox::new(5, 0, 10, 10);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn category_parsing_is_lenient_on_case_and_plural() {
        assert_eq!(PhiCategory::parse("Name"), Some(PhiCategory::Name));
        assert_eq!(PhiCategory::parse("DATES"), Some(PhiCategory::Date));
        assert_eq!(PhiCategory::parse("addresses"), Some(PhiCategory::Address));
        assert_eq!(PhiCategory::parse("address"), Some(PhiCategory::Address));
        assert_eq!(PhiCategory::parse("age"), None);
    }

    #[test]
    fn imprint_serializes_box_field() {
        let json = serde_json::to_value(imprint(3, BoundingBox::new(1, 2, 3, 4))).unwrap();
        assert_eq!(json["box"]["w"], 3);
        assert!(json.get("category").is_none());
    }
}
