//! Synthetic benchmark datasets: generation, manifests and rasters.

pub mod font;
pub mod raster;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BoundingBox, DatasetStyle, ImageRecord, ImprintRecord, PhiCategory};
use crate::lexicon;
use crate::rng::{self, Purpose};
pub use raster::{render_image, Raster, RasterError};

/// Imprint padding on every side of the rendered text, pixels.
pub const BOX_PADDING: u32 = 2;
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_images: usize,
    pub style: DatasetStyle,
    pub phi_image_rate: f64,
    pub max_imprints: usize,
    pub font_height_range: [u32; 2],
    pub contrast_range: [f64; 2],
    pub image_size: [u32; 2],
    pub seed: u64,
    pub render_pixels: bool,
    /// How many imprints of one MIDI-like image may repeat the same date or
    /// identifier value.
    #[serde(default = "default_duplication")]
    pub duplication_factor: usize,
}

fn default_duplication() -> usize {
    3
}

impl GeneratorConfig {
    /// Defaults per style. PHI-image rates follow the reference corpora
    /// (779/1000 and 426/550 images carrying PHI).
    pub fn for_style(style: DatasetStyle, n_images: usize, seed: u64) -> Self {
        match style {
            DatasetStyle::RadphiLike => Self {
                n_images,
                style,
                phi_image_rate: 0.779,
                max_imprints: 8,
                font_height_range: [8, 28],
                contrast_range: [0.15, 1.0],
                image_size: [512, 512],
                seed,
                render_pixels: false,
                duplication_factor: 1,
            },
            DatasetStyle::MidiLike => Self {
                n_images,
                style,
                phi_image_rate: 426.0 / 550.0,
                max_imprints: 40,
                font_height_range: [8, 16],
                contrast_range: [0.6, 1.0],
                image_size: [768, 768],
                seed,
                render_pixels: false,
                duplication_factor: default_duplication(),
            },
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidConfig(m));
        let limit = self.style.max_imprints();
        if self.max_imprints == 0 || self.max_imprints > limit {
            return bad(format!("max_imprints {} must be in [1, {limit}] for this style", self.max_imprints));
        }
        if !(0.0..=1.0).contains(&self.phi_image_rate) {
            return bad(format!("phi_image_rate {} is not a probability", self.phi_image_rate));
        }
        let [fmin, fmax] = self.font_height_range;
        if fmin == 0 || fmin > fmax {
            return bad(format!("font_height_range [{fmin}, {fmax}] must be ordered and positive"));
        }
        let [clo, chi] = self.contrast_range;
        if !(clo > 0.0 && clo <= chi && chi <= 1.0) {
            return bad(format!("contrast_range [{clo}, {chi}] must be an ordered subrange of (0, 1]"));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return bad("image_size must be positive".into());
        }
        if self.duplication_factor == 0 {
            return bad("duplication_factor must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub images: usize,
    pub phi_images: usize,
    pub phi_imprints: usize,
}

impl DatasetCounts {
    pub fn from_records(records: &[ImageRecord]) -> Self {
        let phi_per_image: Vec<usize> = records.iter().map(|r| r.phi_imprints().count()).collect();
        Self {
            images: records.len(),
            phi_images: phi_per_image.iter().filter(|&&n| n > 0).count(),
            phi_imprints: phi_per_image.iter().sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub generator: GeneratorConfig,
    pub records: Vec<ImageRecord>,
    pub counts: DatasetCounts,
}

impl DatasetManifest {
    pub fn record(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization is infallible")
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("image {image_id}: could not place imprint {imprint_id} without overlap")]
    Placement { image_id: String, imprint_id: u32 },
    #[error("manifest parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("manifest integrity error: stored counts {stored:?} but records give {actual:?}")]
    Integrity { stored: DatasetCounts, actual: DatasetCounts },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Generates a manifest. Single-threaded and a pure function of `config`.
pub fn generate(config: &GeneratorConfig) -> Result<DatasetManifest, DatasetError> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.n_images);
    for index in 0..config.n_images {
        records.push(generate_image(config, index)?);
    }
    let counts = DatasetCounts::from_records(&records);
    Ok(DatasetManifest {
        dataset_id: format!("{}-n{}-s{}", config.style.short_name(), config.n_images, config.seed),
        generator: config.clone(),
        records,
        counts,
    })
}

const MIDI_CATEGORY_WEIGHTS: [(PhiCategory, u32); 6] = [
    (PhiCategory::Name, 2),
    (PhiCategory::Address, 1),
    (PhiCategory::Identifier, 3),
    (PhiCategory::Date, 4),
    (PhiCategory::Phone, 1),
    (PhiCategory::Email, 1),
];

fn draw_category<R: Rng + ?Sized>(rng: &mut R, style: DatasetStyle) -> PhiCategory {
    match style {
        DatasetStyle::RadphiLike => PhiCategory::ALL[rng.random_range(0..6)],
        DatasetStyle::MidiLike => {
            let total: u32 = MIDI_CATEGORY_WEIGHTS.iter().map(|(_, w)| w).sum();
            let mut ticket = rng.random_range(0..total);
            for (cat, w) in MIDI_CATEGORY_WEIGHTS {
                if ticket < w {
                    return cat;
                }
                ticket -= w;
            }
            unreachable!("ticket below total weight")
        }
    }
}

/// PHI texts for one image. MIDI-like images repeat date and identifier
/// values across up to `duplication_factor` imprints.
fn phi_texts<R: Rng + ?Sized>(rng: &mut R, config: &GeneratorConfig, count: usize) -> Vec<(PhiCategory, String)> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let cat = draw_category(rng, config.style);
        let repeatable =
            config.style == DatasetStyle::MidiLike && matches!(cat, PhiCategory::Date | PhiCategory::Identifier);
        if !repeatable {
            out.push((cat, lexicon::synth_phi(rng, cat)));
            continue;
        }
        let copies = rng.random_range(1..=config.duplication_factor).min(count - out.len());
        match cat {
            PhiCategory::Date => {
                let value = lexicon::synth_date(rng);
                for _ in 0..copies {
                    out.push((cat, lexicon::date_with_label(rng, &value)));
                }
            }
            _ => {
                let (label, value) = lexicon::synth_identifier_value(rng);
                for _ in 0..copies {
                    out.push((cat, format!("{label} {value}")));
                }
            }
        }
    }
    out
}

fn box_for(text: &str, font_height: u32) -> (u32, u32) {
    (font::text_width(text, font_height) + 2 * BOX_PADDING, font_height + 2 * BOX_PADDING)
}

fn generate_image(config: &GeneratorConfig, index: usize) -> Result<ImageRecord, DatasetError> {
    let mut rng = rng::stream(config.seed, Purpose::Generate, &[index as u64]);
    let image_id = format!("{}-{index:05}", config.style.short_name());
    let modality = lexicon::MODALITIES[index % lexicon::MODALITIES.len()].to_string();
    let [width, height] = config.image_size;

    let n = rng.random_range(1..=config.max_imprints);
    let has_phi = rng.random_bool(config.phi_image_rate);
    let n_phi = if has_phi { rng.random_range(1..=n.div_ceil(2)) } else { 0 };
    let mut texts: Vec<(Option<PhiCategory>, String)> =
        phi_texts(&mut rng, config, n_phi).into_iter().map(|(c, t)| (Some(c), t)).collect();
    while texts.len() < n {
        texts.push((None, lexicon::synth_non_phi(&mut rng, &modality)));
    }
    // interleave PHI and non-PHI positions
    for i in (1..texts.len()).rev() {
        let j = rng.random_range(0..=i);
        texts.swap(i, j);
    }

    let [clo, chi] = config.contrast_range;
    let contrasts: Vec<f64> = (0..n)
        .map(|_| if clo == chi { clo } else { (rng.random_range(clo..=chi) * 1000.0).round() / 1000.0 })
        .collect();
    let max_delta = (contrasts.iter().cloned().fold(0.0, f64::max) * 255.0).round() as u8;
    let mut background = rng.random_range(0..=255 - max_delta);
    if rng.random_bool(0.5) {
        background = 255 - background;
    }

    let [fmin, fmax] = config.font_height_range;
    let mut placed: Vec<ImprintRecord> = Vec::with_capacity(n);
    for (imprint_id, ((category, text), contrast)) in texts.into_iter().zip(contrasts).enumerate() {
        let imprint_id = imprint_id as u32;
        let mut font_height = rng.random_range(fmin..=fmax);
        let bbox = loop {
            let (w, h) = box_for(&text, font_height);
            if w <= width && h <= height {
                let found = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
                    let candidate =
                        BoundingBox::new(rng.random_range(0..=width - w), rng.random_range(0..=height - h), w, h);
                    (!placed.iter().any(|p| p.bbox.overlaps(&candidate))).then_some(candidate)
                });
                if let Some(b) = found {
                    break b;
                }
            }
            if font_height == 1 {
                return Err(DatasetError::Placement { image_id, imprint_id });
            }
            font_height -= 1;
        };
        placed.push(ImprintRecord {
            imprint_id,
            bbox,
            text,
            is_phi: category.is_some(),
            category,
            font_height,
            contrast,
        });
    }

    Ok(ImageRecord {
        image_id,
        width,
        height,
        modality,
        style: config.style,
        background,
        imprints: placed,
        pixel_path: None,
    })
}

/// Writes `manifest.json` (and, when `render_pixels` is set, one PGM per
/// image) into `dir`. Image paths are recorded relative to the manifest.
pub fn write_dataset(manifest: &mut DatasetManifest, dir: &Path) -> Result<PathBuf, DatasetError> {
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io { path: dir.to_path_buf(), source })?;
    if manifest.generator.render_pixels {
        for record in &mut manifest.records {
            let name = format!("{}.pgm", record.image_id);
            let path = dir.join(&name);
            render_image(record)?.write_pgm(&path)?;
            record.pixel_path = Some(name);
        }
    }
    let path = dir.join("manifest.json");
    save_manifest(manifest, &path)?;
    Ok(path)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    std::fs::write(path, manifest.to_canonical_json())
        .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest, DatasetError> {
    let manifest: DatasetManifest = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let actual = DatasetCounts::from_records(&manifest.records);
    if actual != manifest.counts {
        return Err(DatasetError::Integrity { stored: manifest.counts, actual });
    }
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    parse_manifest(&text)
}

/// Loads the raster for a record: from its pixel file when present
/// (relative to `base_dir`), otherwise by rendering it.
pub fn load_raster(record: &ImageRecord, base_dir: Option<&Path>) -> Result<Raster, RasterError> {
    match (&record.pixel_path, base_dir) {
        (Some(p), Some(base)) => Raster::read_pgm(&base.join(p)),
        (Some(p), None) => Raster::read_pgm(Path::new(p)),
        (None, _) => render_image(record),
    }
}
