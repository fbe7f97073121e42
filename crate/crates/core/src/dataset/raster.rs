//! 8-bit grayscale rasters, binary PGM (P5) I/O and imprint rendering.

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

use super::font;
use crate::domain::{BoundingBox, ImageRecord, ImprintRecord};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("imprint {imprint_id}: text `{text}` is {needed} px wide but its box is {available} px")]
    TextTooWide { imprint_id: u32, text: String, needed: u32, available: u32 },
    #[error("imprint {imprint_id}: font height {font_height} px exceeds box height {box_height} px")]
    TextTooTall { imprint_id: u32, font_height: u32, box_height: u32 },
    #[error("imprint {imprint_id}: box exceeds image bounds")]
    OutOfBounds { imprint_id: u32 },
    #[error("imprint {imprint_id}: contrast {contrast} not reachable from background {background}")]
    ContrastUnreachable { imprint_id: u32, contrast: f64, background: u8 },
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error("png encoding failed: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn filled(width: u32, height: u32, level: u8) -> Self {
        Self { width, height, pixels: vec![level; width as usize * height as usize] }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    /// Sub-raster under `bbox`, clipped to the image.
    pub fn crop(&self, bbox: &BoundingBox) -> Raster {
        let x0 = bbox.x.min(self.width);
        let y0 = bbox.y.min(self.height);
        let x1 = (bbox.right().min(self.width as u64)) as u32;
        let y1 = (bbox.bottom().min(self.height as u64)) as u32;
        let (w, h) = (x1 - x0, y1 - y0);
        let mut pixels = Vec::with_capacity(w as usize * h as usize);
        for y in y0..y1 {
            let row = y as usize * self.width as usize;
            pixels.extend_from_slice(&self.pixels[row + x0 as usize..row + x1 as usize]);
        }
        Raster { width: w, height: h, pixels }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Raster, RasterError> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(RasterError::Pgm("truncated header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| RasterError::Pgm(e.to_string()))?);
        }
        if fields[0] != "P5" {
            return Err(RasterError::Pgm(format!("unsupported magic `{}`", fields[0])));
        }
        let parse = |s: &str, what: &str| s.parse::<u32>().map_err(|_| RasterError::Pgm(format!("bad {what} `{s}`")));
        let width = parse(fields[1], "width")?;
        let height = parse(fields[2], "height")?;
        if parse(fields[3], "maxval")? != 255 {
            return Err(RasterError::Pgm("only maxval 255 is supported".into()));
        }
        // single whitespace byte separates header from data
        pos += 1;
        let need = width as usize * height as usize;
        let data = bytes.get(pos..pos + need).ok_or_else(|| RasterError::Pgm("truncated pixel data".into()))?;
        Ok(Raster { width, height, pixels: data.to_vec() })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), RasterError> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Raster, RasterError> {
        Raster::from_pgm(&std::fs::read(path)?)
    }

    pub fn to_png(&self) -> Result<Vec<u8>, RasterError> {
        let img = image::GrayImage::from_raw(self.width, self.height, self.pixels.clone())
            .ok_or_else(|| RasterError::Png("buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| RasterError::Png(e.to_string()))?;
        Ok(out.into_inner())
    }
}

/// Foreground gray level whose separation from `background` is `contrast`
/// of the full 8-bit range. Brightening is preferred when it fits.
pub fn foreground_level(background: u8, contrast: f64) -> Option<u8> {
    let delta = (contrast * 255.0).round() as i32;
    let bg = background as i32;
    if bg + delta <= 255 {
        Some((bg + delta) as u8)
    } else if bg - delta >= 0 {
        Some((bg - delta) as u8)
    } else {
        None
    }
}

/// Horizontal and vertical offset of the text block inside its box.
pub fn text_origin(imprint: &ImprintRecord) -> Result<(u32, u32), RasterError> {
    let needed = font::text_width(&imprint.text, imprint.font_height);
    if imprint.font_height > imprint.bbox.h {
        return Err(RasterError::TextTooTall {
            imprint_id: imprint.imprint_id,
            font_height: imprint.font_height,
            box_height: imprint.bbox.h,
        });
    }
    if needed > imprint.bbox.w {
        return Err(RasterError::TextTooWide {
            imprint_id: imprint.imprint_id,
            text: imprint.text.clone(),
            needed,
            available: imprint.bbox.w,
        });
    }
    Ok((imprint.bbox.x + (imprint.bbox.w - needed) / 2, imprint.bbox.y + (imprint.bbox.h - imprint.font_height) / 2))
}

/// Draws every imprint of `record` over a flat background.
pub fn render_image(record: &ImageRecord) -> Result<Raster, RasterError> {
    let mut raster = Raster::filled(record.width, record.height, record.background);
    for imp in &record.imprints {
        if !imp.bbox.fits_within(record.width, record.height) {
            return Err(RasterError::OutOfBounds { imprint_id: imp.imprint_id });
        }
        let (ox, oy) = text_origin(imp)?;
        let fg = foreground_level(record.background, imp.contrast).ok_or(RasterError::ContrastUnreachable {
            imprint_id: imp.imprint_id,
            contrast: imp.contrast,
            background: record.background,
        })?;
        let cell_w = font::cell_width(imp.font_height);
        for (i, c) in imp.text.chars().enumerate() {
            let cx = ox + i as u32 * cell_w;
            for py in 0..imp.font_height {
                for px in 0..cell_w {
                    if font::is_ink(c, px, py, cell_w, imp.font_height) {
                        raster.set(cx + px, oy + py, fg);
                    }
                }
            }
        }
    }
    Ok(raster)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DatasetStyle;

    fn record(bg: u8, imprint: ImprintRecord) -> ImageRecord {
        ImageRecord {
            image_id: "r".into(),
            width: 64,
            height: 32,
            modality: "CT".into(),
            style: DatasetStyle::RadphiLike,
            background: bg,
            imprints: vec![imprint],
            pixel_path: None,
        }
    }

    fn imprint(text: &str, fh: u32, contrast: f64, bbox: BoundingBox) -> ImprintRecord {
        ImprintRecord {
            imprint_id: 0,
            bbox,
            text: text.into(),
            is_phi: false,
            category: None,
            font_height: fh,
            contrast,
        }
    }

    #[test]
    fn max_contrast_on_black() {
        let bbox = BoundingBox::new(4, 4, 30, 18);
        let r = render_image(&record(0, imprint("AB", 14, 1.0, bbox))).unwrap();
        let mut ink = 0;
        for y in 0..r.height {
            for x in 0..r.width {
                let v = r.get(x, y);
                let inside = x >= bbox.x && x < bbox.x + bbox.w && y >= bbox.y && y < bbox.y + bbox.h;
                if v != 0 {
                    assert_eq!(v, 255);
                    assert!(inside, "ink at ({x},{y}) outside box");
                    ink += 1;
                }
            }
        }
        assert!(ink > 20);
    }

    #[test]
    fn low_contrast_level_is_arithmetic() {
        // 128 + round(0.1 * 255) = 128 + 26
        let expected = 128 + (0.1f64 * 255.0).round() as i32;
        let r = render_image(&record(128, imprint("X", 14, 0.1, BoundingBox::new(0, 0, 20, 16)))).unwrap();
        let fg = r.pixels.iter().copied().find(|&v| v != 128).unwrap();
        assert!((fg as i32 - expected).abs() <= 1);
        assert_eq!(foreground_level(250, 0.5), Some(250 - 128));
        assert_eq!(foreground_level(128, 1.0), None);
    }

    #[test]
    fn too_tall_and_too_wide_are_rejected() {
        let tall = render_image(&record(0, imprint("A", 20, 1.0, BoundingBox::new(0, 0, 30, 10))));
        assert!(matches!(tall, Err(RasterError::TextTooTall { imprint_id: 0, .. })));
        let wide = render_image(&record(0, imprint("ABCDEFGH", 14, 1.0, BoundingBox::new(0, 0, 20, 16))));
        let err = wide.unwrap_err();
        assert!(matches!(err, RasterError::TextTooWide { .. }));
        assert!(err.to_string().contains("imprint 0"));
    }

    #[test]
    fn pgm_round_trip_and_crop() {
        let r = render_image(&record(7, imprint("Hi", 10, 0.5, BoundingBox::new(2, 2, 20, 14)))).unwrap();
        let back = Raster::from_pgm(&r.to_pgm()).unwrap();
        assert_eq!(back, r);
        let c = r.crop(&BoundingBox::new(60, 30, 10, 10));
        assert_eq!((c.width, c.height), (4, 2));
        assert!(Raster::from_pgm(&r.to_pgm()[..20]).is_err());
        assert!(Raster::from_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn png_encoding_produces_signature() {
        let png = Raster::filled(3, 2, 9).to_png().unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }
}
