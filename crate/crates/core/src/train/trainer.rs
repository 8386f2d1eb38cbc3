//! Training loop, evaluation, and the deterministic replay machinery.
//!
//! Every source of randomness is a pure function of the run seed and a
//! counter, drawn from an independent ChaCha stream:
//!   * stream `0`            — parameter initialization,
//!   * stream `1000 + epoch` — the shuffle of that epoch,
//!   * stream `2_000_000 + step` — on-the-fly augmentation for that step.
//!
//! Because nothing depends on hidden RNG state, resuming from a checkpoint
//! at step `s` replays exactly the batches and augmentations an
//! uninterrupted run would have seen, and the loss trace continues
//! bit-for-bit.

use crate::data::dataset::load_valid;
use crate::data::{augment, compute_pixel_weights, AugmentConfig, TextSample, MASK_H, MASK_W};
use crate::model::cam::CamModel;
use crate::model::objective::{recognition_loss, segmentation_loss, total_loss, LossError};
use crate::model::{seg_pixel_accuracy, DecoderError};
use crate::tensor::Tensor;
use crate::train::checkpoint::{Checkpoint, CkptError};
use crate::train::config::{ConfigError, TrainConfig};
use crate::train::optim::{clip_grad_norm, AdamW};
use crate::train::schedule::lr_at;
use crate::vocab::{CharVocab, EOS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const FINAL_CKPT: &str = "ckpt-final.bin";
pub const METRICS_CSV: &str = "metrics.csv";
const CSV_HEADER: &str = "step,lr,loss_total,loss_rec,loss_seg,train_word_acc";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Checkpoint(#[from] CkptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("dataset at {0} contains no usable samples")]
    EmptyDataset(PathBuf),
    #[error("non-finite loss at step {step}; diagnostics written to {dump}")]
    NonFiniteLoss { step: u64, dump: PathBuf },
    #[error("checkpoint was trained with a different vocabulary (hash {found}, expected {expected})")]
    VocabMismatch { found: String, expected: String },
    #[error("checkpoint config differs from the requested config; resume requires an identical config")]
    ResumeConfigMismatch,
    #[error("label `{0}` contains characters outside the vocabulary")]
    BadLabel(String),
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    /// Steps completed by the end of this invocation (cumulative).
    pub steps_done: u64,
    /// Total steps the schedule spans.
    pub total_steps: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub last_loss_total: f64,
    pub last_train_word_acc: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct PredictionRecord {
    pub id: String,
    pub label: String,
    pub prediction: String,
    pub correct: bool,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalOutcome {
    pub n: usize,
    pub word_acc: f64,
    pub seg_pixel_acc: f64,
    pub predictions: Vec<PredictionRecord>,
}

/// Per-sample pieces the loop reuses every epoch.
struct Prepared {
    targets: Vec<Vec<usize>>,
    weights: Vec<Tensor<f32>>,
}

fn prepare(samples: &[TextSample], vocab: &CharVocab) -> Result<Prepared, TrainError> {
    let mut targets = Vec::with_capacity(samples.len());
    let mut weights = Vec::with_capacity(samples.len());
    for s in samples {
        let mut ids =
            vocab.encode(&s.label).map_err(|_| TrainError::BadLabel(s.label.clone()))?;
        ids.push(EOS);
        targets.push(ids);
        weights.push(compute_pixel_weights::<f32>(&s.mask, MASK_H, MASK_W)?);
    }
    Ok(Prepared { targets, weights })
}

fn augment_config(cfg: &TrainConfig) -> Option<AugmentConfig> {
    if !cfg.augment.enabled {
        return None;
    }
    let mut a = AugmentConfig::default();
    if !cfg.augment.perspective {
        a.p_perspective = 0.0;
    }
    if !cfg.augment.affine {
        a.p_affine = 0.0;
    }
    if !cfg.augment.rotation {
        a.p_rotation = 0.0;
    }
    if !cfg.augment.blur {
        a.p_blur = 0.0;
    }
    if !cfg.augment.noise {
        a.p_noise = 0.0;
    }
    Some(a)
}

fn stack_images(samples: &[&TextSample], aug: Option<(&AugmentConfig, &mut ChaCha8Rng)>) -> Tensor<f32> {
    let per = 3 * crate::data::IMG_H * crate::data::IMG_W;
    let mut x = Tensor::<f32>::zeros(&[samples.len(), 3, crate::data::IMG_H, crate::data::IMG_W]);
    match aug {
        None => {
            for (i, s) in samples.iter().enumerate() {
                x.data[i * per..(i + 1) * per].copy_from_slice(&s.image.data);
            }
        }
        Some((cfg, rng)) => {
            for (i, s) in samples.iter().enumerate() {
                let img = augment(&s.image, cfg, rng);
                x.data[i * per..(i + 1) * per].copy_from_slice(&img.data);
            }
        }
    }
    x
}

/// Fraction of sequences whose teacher-forced argmax matches the target at
/// every position. Cheap proxy logged during training; final accuracy comes
/// from [`evaluate_model`], which decodes greedily.
fn teacher_forced_word_acc(logits: &Tensor<f32>, targets: &[Vec<usize>]) -> f64 {
    let (n, t_pad, k) = logits.dims3();
    let mut correct = 0usize;
    for (i, tgt) in targets.iter().enumerate().take(n) {
        let mut ok = true;
        for (t, &want) in tgt.iter().enumerate().take(t_pad) {
            let row = &logits.data[(i * t_pad + t) * k..(i * t_pad + t + 1) * k];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best != want {
                ok = false;
                break;
            }
        }
        if ok {
            correct += 1;
        }
    }
    correct as f64 / n.max(1) as f64
}

fn shuffled_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + epoch);
    order.shuffle(&mut rng);
    order
}

/// Run (or continue) a training job.
///
/// * `resume` — checkpoint to restore; its config must equal `config`.
/// * `stop_after` — cap on the number of steps executed in *this*
///   invocation, used to split a run for resume testing. `None` runs to the
///   end of the schedule.
pub fn train(
    config: &TrainConfig, data_dir: &Path, out_dir: &Path, resume: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<TrainSummary, TrainError> {
    config.validate()?;
    let vocab = CharVocab::standard();
    let (samples, _skipped) = load_valid(data_dir, &vocab)?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset(data_dir.to_path_buf()));
    }
    let prep = prepare(&samples, &vocab)?;

    let n = samples.len();
    let batch = config.optim.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch) as u64;
    let total_steps = steps_per_epoch * config.optim.total_epochs as u64;
    let warmup_steps = steps_per_epoch * config.optim.warmup_epochs as u64;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = CamModel::<f32>::with_configs(
        config.variant()?.backbone_config(),
        config.decoder_config()?,
        config.fusion_spec()?,
        &mut rng,
    );
    let mut opt = {
        let refs = model.params_mut();
        AdamW::new(&refs, config.optim.beta1, config.optim.beta2, config.optim.weight_decay)
    };

    let mut start_step = 0u64;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.vocab_hash != vocab.hash() {
            return Err(TrainError::VocabMismatch {
                found: ckpt.vocab_hash.clone(),
                expected: vocab.hash(),
            });
        }
        if TrainConfig::from_toml(&ckpt.config_toml)? != *config {
            return Err(TrainError::ResumeConfigMismatch);
        }
        ckpt.apply(&mut model)?;
        ckpt.apply_opt(&mut opt)?;
        start_step = ckpt.step;
    }
    let end_step = match stop_after {
        Some(cap) => total_steps.min(start_step + cap),
        None => total_steps,
    };

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_CSV);
    let mut metrics = if start_step == 0 || !metrics_path.exists() {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "{CSV_HEADER}")?;
        f
    } else {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    };

    let aug_cfg = augment_config(config);
    let config_toml = config.to_toml();
    let mut last_loss = f64::NAN;
    let mut last_acc = 0.0;

    for step in start_step..end_step {
        let epoch = step / steps_per_epoch;
        let pos = (step % steps_per_epoch) as usize;
        let order = shuffled_order(n, config.seed, epoch);
        let idx = &order[pos * batch..((pos + 1) * batch).min(n)];
        let chosen: Vec<&TextSample> = idx.iter().map(|&i| &samples[i]).collect();

        let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
        aug_rng.set_stream(2_000_000 + step);
        let x = stack_images(&chosen, aug_cfg.as_ref().map(|c| (c, &mut aug_rng)));
        let targets: Vec<Vec<usize>> = idx.iter().map(|&i| prep.targets[i].clone()).collect();
        let gts: Vec<&[u8]> = idx.iter().map(|&i| samples[i].mask.as_slice()).collect();
        let weights: Vec<Tensor<f32>> = idx.iter().map(|&i| prep.weights[i].clone()).collect();

        let (logits, m, cache) = model.forward_train(&x, &targets, true)?;
        let (loss_rec, dlogits) = recognition_loss(&logits, &targets)?;
        let (loss_seg, mut dm) = segmentation_loss(&m, &gts, &weights)?;
        let report = total_loss(loss_rec, loss_seg, config.lambda);

        if !report.loss_total.is_finite() {
            let dump = out_dir.join("diagnostics.json");
            let diag = serde_json::json!({
                "step": step,
                "loss_total": format!("{}", report.loss_total),
                "loss_rec": format!("{}", report.loss_rec),
                "loss_seg": format!("{}", report.loss_seg),
                "lr": lr_at(step, total_steps, warmup_steps, config.optim.base_lr),
                "batch_ids": idx.iter().map(|&i| samples[i].id.clone()).collect::<Vec<_>>(),
            });
            std::fs::write(&dump, serde_json::to_string_pretty(&diag).unwrap())?;
            return Err(TrainError::NonFiniteLoss { step, dump });
        }

        model.zero_grad();
        let lam = config.lambda as f32;
        for v in dm.data.iter_mut() {
            *v *= lam;
        }
        model.backward(&cache, &dlogits, &dm);

        let lr = lr_at(step, total_steps, warmup_steps, config.optim.base_lr);
        {
            let mut refs = model.params_mut();
            clip_grad_norm(&mut refs, config.optim.grad_clip);
            opt.step(&mut refs, lr);
        }

        last_loss = report.loss_total;
        last_acc = teacher_forced_word_acc(&logits, &targets);
        let done = step + 1;
        if done % config.log.every as u64 == 0 || done == end_step {
            writeln!(
                metrics,
                "{},{},{},{},{},{}",
                done, lr, report.loss_total, report.loss_rec, report.loss_seg, last_acc
            )?;
        }
        if config.log.checkpoint_every > 0 && done % config.log.checkpoint_every as u64 == 0 {
            let ckpt = Checkpoint::capture(&config_toml, &vocab.hash(), done, &mut model, Some(&opt));
            ckpt.save(&out_dir.join(format!("ckpt-{done:06}.bin")))?;
        }
    }
    metrics.flush()?;

    let final_path = out_dir.join(FINAL_CKPT);
    let ckpt = Checkpoint::capture(&config_toml, &vocab.hash(), end_step, &mut model, Some(&opt));
    ckpt.save(&final_path)?;

    Ok(TrainSummary {
        steps_done: end_step,
        total_steps,
        final_checkpoint: final_path,
        metrics_csv: metrics_path,
        last_loss_total: last_loss,
        last_train_word_acc: last_acc,
    })
}

/// Rebuild the model a checkpoint was saved from and load its weights.
pub fn load_checkpoint_model(ckpt: &Checkpoint) -> Result<(TrainConfig, CamModel<f32>), TrainError> {
    let vocab = CharVocab::standard();
    if ckpt.vocab_hash != vocab.hash() {
        return Err(TrainError::VocabMismatch {
            found: ckpt.vocab_hash.clone(),
            expected: vocab.hash(),
        });
    }
    let config = TrainConfig::from_toml(&ckpt.config_toml)?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = CamModel::<f32>::with_configs(
        config.variant()?.backbone_config(),
        config.decoder_config()?,
        config.fusion_spec()?,
        &mut rng,
    );
    ckpt.apply(&mut model)?;
    Ok((config, model))
}

/// Greedy-decode every sample and score case-insensitive word accuracy plus
/// mask pixel accuracy.
pub fn evaluate_model(
    model: &mut CamModel<f32>, samples: &[TextSample], vocab: &CharVocab, batch: usize,
) -> EvalOutcome {
    let batch = batch.max(1);
    let mut predictions = Vec::with_capacity(samples.len());
    let mut words_ok = 0usize;
    let mut pix_ok = 0.0f64;
    let n_pix_per = (MASK_H * MASK_W) as f64;
    for chunk in samples.chunks(batch) {
        let refs: Vec<&TextSample> = chunk.iter().collect();
        let x = stack_images(&refs, None);
        let (preds, m) = model.recognize(&x, vocab);
        let gts: Vec<&[u8]> = chunk.iter().map(|s| s.mask.as_slice()).collect();
        pix_ok += seg_pixel_accuracy(&m, &gts) * (chunk.len() as f64) * n_pix_per;
        for (s, pred) in chunk.iter().zip(preds) {
            let correct = vocab.fold_label(&pred) == vocab.fold_label(&s.label);
            if correct {
                words_ok += 1;
            }
            predictions.push(PredictionRecord {
                id: s.id.clone(),
                label: s.label.clone(),
                prediction: pred,
                correct,
            });
        }
    }
    let n = samples.len();
    EvalOutcome {
        n,
        word_acc: words_ok as f64 / n.max(1) as f64,
        seg_pixel_acc: pix_ok / (n.max(1) as f64 * n_pix_per),
        predictions,
    }
}

/// Load a checkpoint and score it against a dataset directory.
pub fn evaluate_checkpoint(
    ckpt_path: &Path, data_dir: &Path,
) -> Result<(TrainConfig, EvalOutcome), TrainError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (config, mut model) = load_checkpoint_model(&ckpt)?;
    let vocab = CharVocab::standard();
    let (samples, _skipped) = load_valid(data_dir, &vocab)?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset(data_dir.to_path_buf()));
    }
    let outcome = evaluate_model(&mut model, &samples, &vocab, config.optim.batch_size);
    Ok((config, outcome))
}
