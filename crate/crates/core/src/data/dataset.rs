//! On-disk dataset format:
//!
//! ```text
//! dir/
//!   images/<id>.png   RGB 64×256
//!   masks/<id>.png    8-bit gray 32×128, pixel = segmentation class index
//!   labels.jsonl      {"id": ..., "text": ...} per line
//!   meta.json         {"schema": 1, "vocab_hash": ...}
//! ```

use super::{DataError, TextSample, DATASET_SCHEMA, IMG_H, IMG_W, MASK_H, MASK_W};
use crate::tensor::Tensor;
use crate::vocab::CharVocab;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Serialize, Deserialize)]
struct Meta {
    schema: u32,
    vocab_hash: String,
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    id: String,
    text: String,
}

pub struct DatasetWriter {
    dir: PathBuf,
    labels: BufWriter<File>,
    count: usize,
}

impl DatasetWriter {
    pub fn create(dir: &Path, vocab: &CharVocab) -> Result<Self, DataError> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let meta = Meta { schema: DATASET_SCHEMA, vocab_hash: vocab.hash() };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta).unwrap())?;
        let labels = BufWriter::new(File::create(dir.join("labels.jsonl"))?);
        Ok(DatasetWriter { dir: dir.to_path_buf(), labels, count: 0 })
    }

    pub fn write(&mut self, sample: &TextSample) -> Result<(), DataError> {
        assert_eq!(sample.image.shape, vec![3, IMG_H, IMG_W]);
        assert_eq!(sample.mask.len(), MASK_H * MASK_W);
        let mut rgb = image::RgbImage::new(IMG_W as u32, IMG_H as u32);
        for y in 0..IMG_H {
            for x in 0..IMG_W {
                let px = |c: usize| {
                    (sample.image.data[(c * IMG_H + y) * IMG_W + x].clamp(0.0, 1.0) * 255.0).round()
                        as u8
                };
                rgb.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        rgb.save(self.dir.join("images").join(format!("{}.png", sample.id)))
            .map_err(|e| DataError::CorruptRecord { id: sample.id.clone(), reason: e.to_string() })?;
        let mask = image::GrayImage::from_raw(MASK_W as u32, MASK_H as u32, sample.mask.clone())
            .expect("mask buffer size");
        mask.save(self.dir.join("masks").join(format!("{}.png", sample.id)))
            .map_err(|e| DataError::CorruptRecord { id: sample.id.clone(), reason: e.to_string() })?;
        let row = LabelRow { id: sample.id.clone(), text: sample.label.clone() };
        writeln!(self.labels, "{}", serde_json::to_string(&row).unwrap())?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize, DataError> {
        self.labels.flush()?;
        Ok(self.count)
    }
}

/// Convenience wrapper: write all samples in one call.
pub fn write_dataset(dir: &Path, samples: &[TextSample], vocab: &CharVocab) -> Result<usize, DataError> {
    let mut w = DatasetWriter::create(dir, vocab)?;
    for s in samples {
        w.write(s)?;
    }
    w.finish()
}

pub struct DatasetReader {
    dir: PathBuf,
    vocab: CharVocab,
    lines: Option<std::io::Lines<BufReader<File>>>,
}

impl DatasetReader {
    fn load_record(&self, row: LabelRow) -> Result<TextSample, DataError> {
        if let Some(bad) = row.text.chars().find(|&c| self.vocab.index_of(c).is_none()) {
            return Err(DataError::UnknownCharacter(bad));
        }
        let img_path = self.dir.join("images").join(format!("{}.png", row.id));
        let mask_path = self.dir.join("masks").join(format!("{}.png", row.id));
        if !mask_path.exists() {
            return Err(DataError::MissingMask(row.id));
        }
        let img = image::open(&img_path)
            .map_err(|e| DataError::CorruptRecord { id: row.id.clone(), reason: e.to_string() })?
            .into_rgb8();
        if img.width() != IMG_W as u32 || img.height() != IMG_H as u32 {
            return Err(DataError::CorruptRecord {
                id: row.id,
                reason: format!("image is {}×{}, expected {IMG_W}×{IMG_H}", img.width(), img.height()),
            });
        }
        let mut image = Tensor::<f32>::zeros(vec![3, IMG_H, IMG_W]);
        for y in 0..IMG_H {
            for x in 0..IMG_W {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    image.data[(c * IMG_H + y) * IMG_W + x] = p.0[c] as f32 / 255.0;
                }
            }
        }
        let mask_img = image::open(&mask_path)
            .map_err(|e| DataError::CorruptRecord { id: row.id.clone(), reason: e.to_string() })?
            .into_luma8();
        if mask_img.width() != MASK_W as u32 || mask_img.height() != MASK_H as u32 {
            return Err(DataError::CorruptRecord {
                id: row.id,
                reason: "bad mask dimensions".into(),
            });
        }
        let mask: Vec<u8> = mask_img.into_raw();
        if let Some(&bad) = mask.iter().find(|&&v| v as usize >= crate::vocab::SEG_CLASSES) {
            return Err(DataError::CorruptRecord {
                id: row.id,
                reason: format!("mask value {bad} out of range"),
            });
        }
        Ok(TextSample { id: row.id, image, label: row.text, mask })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<TextSample, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.as_mut()?.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(match serde_json::from_str::<LabelRow>(&line) {
                Ok(row) => self.load_record(row),
                Err(e) => Err(DataError::CorruptRecord {
                    id: "<labels.jsonl>".into(),
                    reason: e.to_string(),
                }),
            });
        }
    }
}

/// Open a dataset directory as a record stream. A directory with no
/// labels.jsonl yields an empty stream; a schema or vocabulary mismatch in
/// meta.json fails fast.
pub fn read_dataset(dir: &Path, vocab: &CharVocab) -> Result<DatasetReader, DataError> {
    let meta_path = dir.join("meta.json");
    if meta_path.exists() {
        let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
            .map_err(|e| DataError::CorruptRecord { id: "meta.json".into(), reason: e.to_string() })?;
        if meta.schema != DATASET_SCHEMA {
            return Err(DataError::SchemaVersionMismatch {
                found: meta.schema,
                expected: DATASET_SCHEMA,
            });
        }
        if meta.vocab_hash != vocab.hash() {
            return Err(DataError::VocabMismatch { found: meta.vocab_hash, expected: vocab.hash() });
        }
    }
    let labels_path = dir.join("labels.jsonl");
    let lines = if labels_path.exists() {
        Some(BufReader::new(File::open(&labels_path)?).lines())
    } else {
        None
    };
    Ok(DatasetReader { dir: dir.to_path_buf(), vocab: vocab.clone(), lines })
}

/// Read every record, dropping the ones that fail validation.
/// Returns (samples, skipped_count).
pub fn load_valid(dir: &Path, vocab: &CharVocab) -> Result<(Vec<TextSample>, usize), DataError> {
    let reader = read_dataset(dir, vocab)?;
    let mut out = Vec::new();
    let mut skipped = 0;
    for rec in reader {
        match rec {
            Ok(s) => out.push(s),
            Err(e) => {
                log::warn!("skipping record: {e}");
                skipped += 1;
            }
        }
    }
    Ok((out, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{render_canonical_mask, synthesize_image, SynthConfig};
    use crate::data::{FontSpec, LoadedFont};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn make_samples(n: usize) -> Vec<TextSample> {
        let vocab = CharVocab::standard();
        let font = LoadedFont::load(&FontSpec::default()).unwrap();
        let labels = ["cat", "dog42", "x!", "hello", "worlds", "a", "zz9", "mix-up", "q.e.d", "ten10"];
        (0..n)
            .map(|i| {
                let label = labels[i % labels.len()];
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                TextSample {
                    id: format!("{i:06}"),
                    image: synthesize_image(label, &vocab, &font, &SynthConfig::default(), &mut rng)
                        .unwrap(),
                    label: label.to_string(),
                    mask: render_canonical_mask(label, &vocab, &font).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn round_trip_ids_labels_masks() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = CharVocab::standard();
        let samples = make_samples(10);
        let n = write_dataset(dir.path(), &samples, &vocab).unwrap();
        assert_eq!(n, 10);
        let (back, skipped) = load_valid(dir.path(), &vocab).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(back.len(), 10);
        for (a, b) in samples.iter().zip(back.iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.mask, b.mask, "mask round-trip must be byte-identical");
            // image round-trips through u8 quantization
            let max_err = a
                .image
                .data
                .iter()
                .zip(b.image.data.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn unknown_character_record_is_skipped_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = CharVocab::standard();
        let samples = make_samples(3);
        write_dataset(dir.path(), &samples, &vocab).unwrap();
        // append a record whose label has an out-of-vocab char
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(dir.path().join("labels.jsonl"))
            .unwrap();
        writeln!(f, "{}", serde_json::to_string(&LabelRow { id: "000000".into(), text: "bad space".into() }).unwrap()).unwrap();
        drop(f);
        let recs: Vec<_> = read_dataset(dir.path(), &vocab).unwrap().collect();
        assert_eq!(recs.len(), 4);
        assert!(recs[..3].iter().all(|r| r.is_ok()));
        assert!(matches!(recs[3], Err(DataError::UnknownCharacter(' '))));
        let (ok, skipped) = load_valid(dir.path(), &vocab).unwrap();
        assert_eq!((ok.len(), skipped), (3, 1));
    }

    #[test]
    fn empty_directory_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = CharVocab::standard();
        let recs: Vec<_> = read_dataset(dir.path(), &vocab).unwrap().collect();
        assert!(recs.is_empty());
    }

    #[test]
    fn schema_mismatch_fails_fast() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = CharVocab::standard();
        write_dataset(dir.path(), &make_samples(1), &vocab).unwrap();
        fs::write(
            dir.path().join("meta.json"),
            serde_json::to_string(&Meta { schema: 99, vocab_hash: vocab.hash() }).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            read_dataset(dir.path(), &vocab),
            Err(DataError::SchemaVersionMismatch { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn missing_mask_is_record_error() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = CharVocab::standard();
        write_dataset(dir.path(), &make_samples(2), &vocab).unwrap();
        fs::remove_file(dir.path().join("masks").join("000001.png")).unwrap();
        let recs: Vec<_> = read_dataset(dir.path(), &vocab).unwrap().collect();
        assert!(recs[0].is_ok());
        assert!(matches!(&recs[1], Err(DataError::MissingMask(id)) if id == "000001"));
    }
}
