//! Font loading and word layout on a fixed canvas.
//!
//! Two faces ship with the crate (DejaVu Sans regular/bold) so the synthetic
//! engine works out of the box; an external font file can be supplied too.

use super::DataError;
use std::path::PathBuf;

static DEJAVU_REGULAR: &[u8] = include_bytes!("../../assets/DejaVuSans.ttf");
static DEJAVU_BOLD: &[u8] = include_bytes!("../../assets/DejaVuSans-Bold.ttf");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FontWeight {
    Regular,
    Bold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotLayout {
    /// Glyphs advance by their natural widths.
    Proportional,
    /// Every glyph occupies an equal-width slot.
    Monospaced,
}

#[derive(Clone, Debug)]
pub struct FontSpec {
    /// None → bundled DejaVu face chosen by `weight`.
    pub path: Option<PathBuf>,
    pub weight: FontWeight,
    pub layout: SlotLayout,
}

impl Default for FontSpec {
    fn default() -> Self {
        FontSpec { path: None, weight: FontWeight::Regular, layout: SlotLayout::Proportional }
    }
}

pub struct LoadedFont {
    pub font: fontdue::Font,
    pub layout: SlotLayout,
}

impl LoadedFont {
    pub fn load(spec: &FontSpec) -> Result<Self, DataError> {
        let bytes: Vec<u8> = match &spec.path {
            Some(p) => std::fs::read(p)?,
            None => match spec.weight {
                FontWeight::Regular => DEJAVU_REGULAR.to_vec(),
                FontWeight::Bold => DEJAVU_BOLD.to_vec(),
            },
        };
        let font = fontdue::Font::from_bytes(bytes, fontdue::FontSettings::default())
            .map_err(|e| DataError::Font(e.to_string()))?;
        Ok(LoadedFont { font, layout: spec.layout })
    }
}

/// A glyph rasterized and positioned on a canvas (pixel coordinates, y down).
pub struct PlacedGlyph {
    pub ch: char,
    pub x: i32,
    pub top: i32,
    pub width: usize,
    pub height: usize,
    /// Row-major coverage, 0..=255.
    pub coverage: Vec<u8>,
    /// Nominal center of the glyph's advance box, for degenerate fallbacks.
    pub anchor: (i32, i32),
}

/// Width of `label` at `px` under the given layout, plus the vertical band
/// (ascent − descent) the line occupies.
pub fn measure(font: &LoadedFont, label: &str, px: f32) -> (f32, f32) {
    let lm = font
        .font
        .horizontal_line_metrics(px)
        .expect("horizontal font metrics missing");
    let band = lm.ascent - lm.descent;
    let width = match font.layout {
        SlotLayout::Proportional => label
            .chars()
            .map(|c| font.font.metrics(c, px).advance_width)
            .sum(),
        SlotLayout::Monospaced => {
            let slot = label
                .chars()
                .map(|c| font.font.metrics(c, px).advance_width)
                .fold(0.0f32, f32::max);
            slot * label.chars().count() as f32
        }
    };
    (width, band)
}

/// Largest integer pixel size in [4, 64] whose rendering of `label` fits in
/// `max_w` × `max_h`. Falls back to 4 when nothing fits.
pub fn fit_px(font: &LoadedFont, label: &str, max_w: f32, max_h: f32) -> f32 {
    for px in (4..=64).rev() {
        let (w, band) = measure(font, label, px as f32);
        if w <= max_w && band <= max_h {
            return px as f32;
        }
    }
    4.0
}

/// Rasterize `label` left-to-right starting at `origin_x` with the text
/// baseline at row `baseline`.
pub fn layout_word(
    font: &LoadedFont, label: &str, px: f32, origin_x: f32, baseline: i32,
) -> Vec<PlacedGlyph> {
    let mut placed = Vec::with_capacity(label.chars().count());
    let slot = match font.layout {
        SlotLayout::Monospaced => label
            .chars()
            .map(|c| font.font.metrics(c, px).advance_width)
            .fold(0.0f32, f32::max),
        SlotLayout::Proportional => 0.0,
    };
    let mut pen = origin_x;
    for ch in label.chars() {
        let (metrics, coverage) = font.font.rasterize(ch, px);
        let advance = match font.layout {
            SlotLayout::Proportional => metrics.advance_width,
            SlotLayout::Monospaced => slot,
        };
        let centering = match font.layout {
            SlotLayout::Proportional => 0.0,
            SlotLayout::Monospaced => (slot - metrics.advance_width) * 0.5,
        };
        let x = (pen + centering + metrics.xmin as f32).round() as i32;
        let top = baseline - metrics.ymin - metrics.height as i32;
        let anchor = ((pen + advance * 0.5) as i32, baseline - (px * 0.3) as i32);
        placed.push(PlacedGlyph {
            ch,
            x,
            top,
            width: metrics.width,
            height: metrics.height,
            coverage,
            anchor,
        });
        pen += advance;
    }
    placed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fonts_load() {
        let reg = LoadedFont::load(&FontSpec::default()).unwrap();
        let bold = LoadedFont::load(&FontSpec {
            weight: FontWeight::Bold,
            ..FontSpec::default()
        })
        .unwrap();
        let (m, cov) = reg.font.rasterize('a', 20.0);
        assert!(m.width > 0 && m.height > 0);
        assert!(cov.iter().any(|&v| v > 128));
        let (mb, _) = bold.font.rasterize('a', 20.0);
        assert!(mb.advance_width >= m.advance_width);
    }

    #[test]
    fn rendering_is_deterministic() {
        let f = LoadedFont::load(&FontSpec::default()).unwrap();
        let a = layout_word(&f, "word", 18.0, 2.0, 24);
        let b = layout_word(&f, "word", 18.0, 2.0, 24);
        assert_eq!(a.len(), b.len());
        for (ga, gb) in a.iter().zip(b.iter()) {
            assert_eq!(ga.x, gb.x);
            assert_eq!(ga.coverage, gb.coverage);
        }
    }

    #[test]
    fn fit_px_respects_bounds() {
        let f = LoadedFont::load(&FontSpec::default()).unwrap();
        let px = fit_px(&f, "example", 126.0, 30.0);
        let (w, band) = measure(&f, "example", px);
        assert!(w <= 126.0 && band <= 30.0);
        // a longer word must not get a larger size
        let px_long = fit_px(&f, "exampleexampleexample", 126.0, 30.0);
        assert!(px_long <= px);
    }

    #[test]
    fn monospaced_slots_are_uniform() {
        let spec = FontSpec { layout: SlotLayout::Monospaced, ..FontSpec::default() };
        let f = LoadedFont::load(&spec).unwrap();
        let placed = layout_word(&f, "iiw", 20.0, 0.0, 24);
        // anchors are slot centers → evenly spaced
        let d1 = placed[1].anchor.0 - placed[0].anchor.0;
        let d2 = placed[2].anchor.0 - placed[1].anchor.0;
        assert!((d1 - d2).abs() <= 1);
    }
}
