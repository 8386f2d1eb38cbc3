//! Canonical mask rendering and styled image synthesis.
//!
//! Masks are always rendered straight, horizontal, centered — the canonical
//! layout the segmentation head is trained to reproduce. Input images get the
//! style randomness (colors, placement, curvature); geometric corruption
//! beyond that lives in `augment`.

use super::augment::{augment, AugmentConfig};
use super::font::{fit_px, layout_word, measure, LoadedFont};
use super::{DataError, TextSample, IMG_H, IMG_W, MASK_H, MASK_W};
use crate::tensor::Tensor;
use crate::vocab::{CharVocab, T_MAX};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Style knobs for `synthesize_image`. All randomness collapses to a fixed
/// plain rendering when the ranges are zeroed (`SynthConfig::plain`).
#[derive(Clone, Debug)]
pub struct SynthConfig {
    /// Random background/foreground colors (otherwise black on white).
    pub color: bool,
    /// Add a linear background gradient of up to this magnitude.
    pub bg_gradient: f64,
    /// Max vertical sine amplitude in pixels (curved text).
    pub curve_amp: f64,
    /// Glyph size factor range relative to the largest fitting size.
    pub scale: (f64, f64),
    /// Randomize horizontal/vertical placement (otherwise centered).
    pub jitter_position: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            color: true,
            bg_gradient: 0.2,
            curve_amp: 6.0,
            scale: (0.65, 1.0),
            jitter_position: true,
        }
    }
}

impl SynthConfig {
    /// Zero-randomness style: black text centered on a white background.
    pub fn plain() -> Self {
        SynthConfig {
            color: false,
            bg_gradient: 0.0,
            curve_amp: 0.0,
            scale: (1.0, 1.0),
            jitter_position: false,
        }
    }
}

fn validate<'a>(
    label: &'a str, vocab: &CharVocab,
) -> Result<(String, Vec<usize>), DataError> {
    assert!(!label.is_empty(), "label must be non-empty");
    let folded = vocab.fold_label(label);
    let n = folded.chars().count();
    if n > T_MAX {
        return Err(DataError::LabelTooLong(n, T_MAX));
    }
    let classes = folded.chars().map(|c| vocab.index_of(c).ok_or(DataError::UnknownCharacter(c)));
    let classes: Result<Vec<usize>, DataError> = classes.collect();
    Ok((folded, classes?))
}

/// Render the canonical class-aware glyph mask: 32×128, pixel = 1 + class
/// index of the covering glyph, 0 for background. Later characters win
/// overlaps; every character of the label is guaranteed ≥1 pixel.
pub fn render_canonical_mask(
    label: &str, vocab: &CharVocab, font: &LoadedFont,
) -> Result<Vec<u8>, DataError> {
    let (folded, classes) = validate(label, vocab)?;
    let (h, w) = (MASK_H, MASK_W);
    let px = fit_px(font, &folded, (w - 2) as f32, (h - 2) as f32);
    let (text_w, _) = measure(font, &folded, px);
    let lm = font.font.horizontal_line_metrics(px).expect("missing line metrics");
    let band = lm.ascent - lm.descent;
    let baseline = ((h as f32 - band) * 0.5 + lm.ascent).round() as i32;
    let origin_x = ((w as f32 - text_w) * 0.5).max(1.0);
    let placed = layout_word(font, &folded, px, origin_x, baseline);

    let mut mask = vec![0u8; h * w];
    for (glyph, &class) in placed.iter().zip(classes.iter()) {
        let value = (class + 1) as u8;
        for gy in 0..glyph.height {
            let y = glyph.top + gy as i32;
            if y < 0 || y >= h as i32 {
                continue;
            }
            for gx in 0..glyph.width {
                let x = glyph.x + gx as i32;
                if x < 0 || x >= w as i32 {
                    continue;
                }
                if glyph.coverage[gy * glyph.width + gx] >= 128 {
                    mask[y as usize * w + x as usize] = value;
                }
            }
        }
    }
    // guarantee presence: a glyph fully occluded or too thin to rasterize
    // still contributes one pixel at its anchor
    for (glyph, &class) in placed.iter().zip(classes.iter()) {
        let value = (class + 1) as u8;
        if mask.iter().any(|&m| m == value) {
            continue;
        }
        let x = glyph.anchor.0.clamp(0, w as i32 - 1) as usize;
        let y = glyph.anchor.1.clamp(0, h as i32 - 1) as usize;
        mask[y * w + x] = value;
    }
    Ok(mask)
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Render `label` into a styled 3×64×256 image. Deterministic in `rng`.
pub fn synthesize_image(
    label: &str, vocab: &CharVocab, font: &LoadedFont, config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>, DataError> {
    let (folded, _) = validate(label, vocab)?;
    let (h, w) = (IMG_H, IMG_W);

    // style draws happen in a fixed order so seeds replay exactly
    let bg: [f64; 3] = if config.color {
        [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
    } else {
        [1.0, 1.0, 1.0]
    };
    let fg: [f64; 3] = if config.color {
        let mut fg = [0.0; 3];
        let mut ok = false;
        for _ in 0..64 {
            fg = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            if (luma(fg) - luma(bg)).abs() >= 0.35 {
                ok = true;
                break;
            }
        }
        if !ok {
            fg = [1.0 - bg[0], 1.0 - bg[1], 1.0 - bg[2]];
        }
        fg
    } else {
        [0.0, 0.0, 0.0]
    };
    let grad = if config.bg_gradient > 0.0 {
        let mag = rng.gen_range(-config.bg_gradient..=config.bg_gradient);
        let horizontal: bool = rng.gen();
        Some((mag, horizontal))
    } else {
        None
    };

    let px_max = fit_px(font, &folded, (w - 16) as f32, (h - 16) as f32) as f64;
    let px = if config.scale.0 < config.scale.1 {
        (px_max * rng.gen_range(config.scale.0..=config.scale.1)).max(4.0)
    } else {
        (px_max * config.scale.0).max(4.0)
    } as f32;
    let (text_w, _) = measure(font, &folded, px);
    let lm = font.font.horizontal_line_metrics(px).expect("missing line metrics");
    let band = lm.ascent - lm.descent;

    let curve_amp = if config.curve_amp > 0.0 { rng.gen_range(0.0..=config.curve_amp) } else { 0.0 };
    let phase: f64 = if config.curve_amp > 0.0 { rng.gen_range(0.0..std::f64::consts::PI) } else { 0.0 };

    let max_x = (w as f32 - text_w - 4.0).max(4.0);
    let slack_y = (h as f32 - band - 2.0 * curve_amp as f32 - 4.0).max(0.0);
    let (origin_x, top_pad) = if config.jitter_position {
        (rng.gen_range(4.0..=max_x.max(4.001)), rng.gen_range(0.0..=slack_y.max(0.001)) + 2.0)
    } else {
        (((w as f32 - text_w) * 0.5).max(1.0), (h as f32 - band) * 0.5)
    };
    let baseline = (top_pad + curve_amp as f32 + lm.ascent).round() as i32;

    let mut img = Tensor::<f32>::zeros(vec![3, h, w]);
    for c in 0..3 {
        let base = bg[c] as f32;
        for y in 0..h {
            for x in 0..w {
                let mut v = base;
                if let Some((mag, horizontal)) = grad {
                    let t = if horizontal { x as f64 / (w - 1) as f64 } else { y as f64 / (h - 1) as f64 };
                    v += (mag * (t - 0.5)) as f32;
                }
                img.data[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }

    let placed = layout_word(font, &folded, px, origin_x, baseline);
    for glyph in placed.iter() {
        let t = (glyph.anchor.0 as f64) / (w as f64 - 1.0);
        let dy = (curve_amp * (std::f64::consts::PI * t + phase).sin()).round() as i32;
        for gy in 0..glyph.height {
            let y = glyph.top + dy + gy as i32;
            if y < 0 || y >= h as i32 {
                continue;
            }
            for gx in 0..glyph.width {
                let x = glyph.x + gx as i32;
                if x < 0 || x >= w as i32 {
                    continue;
                }
                let cov = glyph.coverage[gy * glyph.width + gx] as f32 / 255.0;
                if cov <= 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let i = (c * h + y as usize) * w + x as usize;
                    img.data[i] = img.data[i] * (1.0 - cov) + fg[c] as f32 * cov;
                }
            }
        }
    }
    Ok(img)
}

/// Draw a random label: mostly letter words, some alphanumeric, a sprinkle
/// of punctuation-bearing strings.
/// One complete training pair: styled+distorted image and canonical mask.
pub fn generate_sample(
    id: &str, label: &str, vocab: &CharVocab, font: &LoadedFont, style: &SynthConfig,
    aug: &AugmentConfig, rng: &mut ChaCha8Rng,
) -> Result<TextSample, DataError> {
    let (folded, _) = validate(label, vocab)?;
    let image = synthesize_image(label, vocab, font, style, rng)?;
    let image = augment(&image, aug, rng);
    let mask = render_canonical_mask(label, vocab, font)?;
    Ok(TextSample { id: id.to_string(), image, label: folded, mask })
}

/// Deterministic corpus: sample `i` draws from an RNG derived from
/// (seed, i) alone, so any subset can be regenerated independently.
pub fn generate_dataset(
    n: usize, seed: u64, vocab: &CharVocab, font: &LoadedFont, style: &SynthConfig,
    aug: &AugmentConfig,
) -> Result<Vec<TextSample>, DataError> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + i as u64);
            let label = sample_label(vocab, &mut rng);
            generate_sample(&format!("{i:06}"), &label, vocab, font, style, aug, &mut rng)
        })
        .collect()
}

pub fn sample_label(vocab: &CharVocab, rng: &mut ChaCha8Rng) -> String {
    let kind: f64 = rng.gen();
    let len = rng.gen_range(2..=8usize);
    let pick = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> char {
        vocab.char_of(rng.gen_range(lo..hi))
    };
    (0..len)
        .map(|_| {
            if kind < 0.8 {
                pick(rng, 10, 36) // letters
            } else if kind < 0.95 {
                pick(rng, 0, 36) // alphanumeric
            } else {
                pick(rng, 0, 68) // anything, punctuation included
            }
        })
        .collect()
}
