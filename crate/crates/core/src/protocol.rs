//! Wire behaviour of extraction and analysis calls: crop chunking, the
//! tagged-string codec, prompt construction and strict response parsing.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::PhiCategory;

pub const PROMPT_VERSION: &str = "v1";
pub const ANALYSIS_TEMPLATE: &str = include_str!("../prompts/analysis-v1.txt");
pub const EXTRACT_TEMPLATE: &str = include_str!("../prompts/extract-v1.txt");

/// Identity of one crop: the image it came from and its imprint id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CropRef {
    pub image_id: String,
    pub imprint_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_index: usize,
    pub crop_refs: Vec<CropRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("element {position}: missing or malformed tag in `{element}`")]
    MissingTag { position: usize, element: String },
    #[error("element {position}: opening tag <{open}> closed by </{close}>")]
    MismatchedTag { position: usize, open: u32, close: u32 },
    #[error("element {position}: duplicate index {index}")]
    DuplicateIndex { position: usize, index: u32 },
    #[error("response is not valid JSON of the expected shape: {0}")]
    Schema(String),
    #[error("response references id {0} which was not sent")]
    UnknownId(u32),
    #[error("response lists id {0} more than once")]
    DuplicateId(u32),
    #[error("item {id}: classification `{classification}` inconsistent with category {category:?}")]
    CategoryMismatch { id: u32, classification: String, category: Option<String> },
    #[error("alignment: expected {expected} extractions, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("alignment: ids {got:?} do not match the chunk's ids 0..{expected}")]
    IdMismatch { expected: usize, got: Vec<u32> },
}

/// Splits crops into consecutive chunks of at most `chunk_size`.
pub fn chunk_crops(crops: &[CropRef], chunk_size: usize) -> Vec<Chunk> {
    assert!(chunk_size >= 1, "chunk_size must be positive");
    crops.chunks(chunk_size).enumerate().map(|(chunk_index, c)| Chunk { chunk_index, crop_refs: c.to_vec() }).collect()
}

/// Wraps element `i` as `<i> text </i>`.
pub fn encode_tagged<S: AsRef<str>>(texts: &[S]) -> Vec<String> {
    texts.iter().enumerate().map(|(i, t)| format!("<{i}> {} </{i}>", t.as_ref())).collect()
}

fn tag_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)^\s*<(\d+)>(.*)</(\d+)>\s*$").unwrap())
}

/// Inverse of [`encode_tagged`]; payload whitespace next to tags is trimmed.
pub fn decode_tagged<S: AsRef<str>>(tagged: &[S]) -> Result<Vec<(u32, String)>, ProtocolError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(tagged.len());
    for (position, element) in tagged.iter().enumerate() {
        let element = element.as_ref();
        let missing = || ProtocolError::MissingTag { position, element: element.to_string() };
        let caps = tag_pattern().captures(element).ok_or_else(missing)?;
        let open: u32 = caps[1].parse().map_err(|_| missing())?;
        let close: u32 = caps[3].parse().map_err(|_| missing())?;
        if open != close {
            return Err(ProtocolError::MismatchedTag { position, open, close });
        }
        if !seen.insert(open) {
            return Err(ProtocolError::DuplicateIndex { position, index: open });
        }
        out.push((open, caps[2].trim().to_string()));
    }
    Ok(out)
}

/// Hex SHA-256 over both prompt templates; recorded in every run report.
pub fn prompt_hash() -> &'static str {
    static HASH: OnceLock<String> = OnceLock::new();
    HASH.get_or_init(|| {
        let mut h = Sha256::new();
        h.update(PROMPT_VERSION.as_bytes());
        h.update(ANALYSIS_TEMPLATE.as_bytes());
        h.update(EXTRACT_TEMPLATE.as_bytes());
        hex::encode(h.finalize())
    })
}

/// Analysis prompt: the fixed three-section template followed by the tagged
/// items, one per line, verbatim.
pub fn build_analysis_prompt<S: AsRef<str>>(tagged: &[S]) -> String {
    assert!(!tagged.is_empty(), "analysis prompt needs at least one item");
    let mut prompt = String::with_capacity(ANALYSIS_TEMPLATE.len() + tagged.len() * 48);
    prompt.push_str(ANALYSIS_TEMPLATE);
    for t in tagged {
        prompt.push_str(t.as_ref());
        prompt.push('\n');
    }
    prompt
}

pub fn build_extraction_prompt(n_crops: usize) -> String {
    assert!(n_crops > 0, "extraction prompt needs at least one crop");
    EXTRACT_TEMPLATE.replace("{{COUNT}}", &n_crops.to_string()).replace("{{LAST}}", &(n_crops - 1).to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    #[serde(rename = "PHI")]
    Phi,
    #[serde(rename = "non-PHI")]
    NonPhi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisItem {
    pub id: u32,
    pub classification: Classification,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<PhiCategory>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnalysisResponse {
    pub results: Vec<AnalysisItem>,
}

/// A parsed analysis reply plus the sent ids it did not classify.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnalysis {
    pub response: AnalysisResponse,
    pub unclassified: BTreeSet<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    id: u32,
    classification: String,
    #[serde(default)]
    category: Option<String>,
    rationale: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawResponse {
    results: Vec<RawItem>,
}

/// Removes a surrounding Markdown code fence, if any.
pub fn strip_code_fence(body: &str) -> &str {
    let trimmed = body.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    // optional language tag directly after the opening fence
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

pub fn parse_analysis_response(body: &str, sent_ids: &BTreeSet<u32>) -> Result<ParsedAnalysis, ProtocolError> {
    let raw: RawResponse =
        serde_json::from_str(strip_code_fence(body)).map_err(|e| ProtocolError::Schema(e.to_string()))?;
    let mut seen = BTreeSet::new();
    let mut results = Vec::with_capacity(raw.results.len());
    for item in raw.results {
        if !sent_ids.contains(&item.id) {
            return Err(ProtocolError::UnknownId(item.id));
        }
        if !seen.insert(item.id) {
            return Err(ProtocolError::DuplicateId(item.id));
        }
        let classification = match item.classification.trim().to_ascii_lowercase().as_str() {
            "phi" => Classification::Phi,
            "non-phi" | "non_phi" | "nonphi" => Classification::NonPhi,
            other => return Err(ProtocolError::Schema(format!("item {}: unknown classification `{other}`", item.id))),
        };
        let category = match item.category.as_deref().map(str::trim).filter(|c| !c.is_empty()) {
            None => None,
            Some(c) => Some(
                PhiCategory::parse(c)
                    .ok_or_else(|| ProtocolError::Schema(format!("item {}: unknown category `{c}`", item.id)))?,
            ),
        };
        if (classification == Classification::Phi) != category.is_some() {
            return Err(ProtocolError::CategoryMismatch {
                id: item.id,
                classification: item.classification,
                category: item.category,
            });
        }
        results.push(AnalysisItem { id: item.id, classification, category, rationale: item.rationale });
    }
    let unclassified = sent_ids.difference(&seen).copied().collect();
    Ok(ParsedAnalysis { response: AnalysisResponse { results }, unclassified })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionItem {
    pub id: u32,
    pub text: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawExtraction {
    List(Vec<ExtractionItem>),
    Wrapped { results: Vec<ExtractionItem> },
}

/// Text aligned to one crop of a chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedText {
    pub crop: CropRef,
    pub text: String,
}

/// Maps an id-keyed extraction reply back onto the chunk's crops. Ids are
/// positions within the chunk.
pub fn align_extraction(chunk: &Chunk, body: &str) -> Result<Vec<AlignedText>, ProtocolError> {
    let items = match serde_json::from_str::<RawExtraction>(strip_code_fence(body)) {
        Ok(RawExtraction::List(items)) | Ok(RawExtraction::Wrapped { results: items }) => items,
        Err(e) => return Err(ProtocolError::Schema(e.to_string())),
    };
    let expected = chunk.crop_refs.len();
    if items.len() != expected {
        return Err(ProtocolError::CountMismatch { expected, got: items.len() });
    }
    let by_id: BTreeMap<u32, String> = items.iter().map(|i| (i.id, i.text.clone())).collect();
    let ids_match = by_id.len() == expected && by_id.keys().copied().eq(0..expected as u32);
    if !ids_match {
        return Err(ProtocolError::IdMismatch { expected, got: items.iter().map(|i| i.id).collect() });
    }
    Ok(chunk
        .crop_refs
        .iter()
        .zip(by_id.into_values())
        .map(|(crop, text)| AlignedText { crop: crop.clone(), text })
        .collect())
}
