//! `cam` — command-line front end for the CAM scene-text recognizer.
//!
//! Subcommands cover the full artifact lifecycle: `synth` writes a paired
//! image/mask dataset, `train` fits a model from a TOML config, `eval` and
//! `infer` score or apply a checkpoint, `gradcheck` verifies analytic
//! gradients against finite differences, and `export-masks` dumps predicted
//! segmentation masks as PNGs.
//!
//! Exit codes: 0 success, 1 usage error, 2 verification failure (gradcheck),
//! 3 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cam_core::data::{
    generate_dataset, load_valid, write_dataset, AugmentConfig, FontSpec, LoadedFont, SynthConfig,
    IMG_H, IMG_W, MASK_H, MASK_W,
};
use cam_core::train::{self, Checkpoint, TrainConfig};
use cam_core::vocab::{CharVocab, SEG_CLASSES};
use cam_core::Tensor;

#[derive(Parser)]
#[command(name = "cam", version, about = "Scene-text recognition with canonical glyph masks")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a paired (distorted image, canonical glyph mask) dataset.
    Synth {
        /// Output dataset directory (created if absent).
        #[arg(long)]
        out: PathBuf,
        /// Number of samples to generate.
        #[arg(long)]
        n: usize,
        /// RNG seed; the corpus is a pure function of (seed, n).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TTF font file for rendering; defaults to the bundled face.
        #[arg(long)]
        font: Option<PathBuf>,
    },
    /// Train a model as described by a TOML config file.
    Train {
        /// Path to the TOML training config.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by `cam synth`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and metrics.csv.
        #[arg(long)]
        out: PathBuf,
        /// Optional checkpoint to resume from (config must match).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset; prints a JSON report.
    Eval {
        /// Checkpoint file written by `cam train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory to score against.
        #[arg(long)]
        data: PathBuf,
    },
    /// Recognize text in image files; prints one prediction per path.
    Infer {
        /// Checkpoint file written by `cam train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input images (PNG/JPEG, any size; resized to 256x64).
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Compare analytic gradients to finite differences per module.
    Gradcheck {
        /// Restrict to one module: rectifier, backbone, glyph_seg,
        /// align_fuse, decoder, or objective. Default: all six.
        #[arg(long)]
        module: Option<String>,
        /// RNG seed for probe sampling; same seed reproduces identical values.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write predicted argmax masks for a dataset as 8-bit grayscale PNGs.
    ExportMasks {
        /// Checkpoint file written by `cam train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory to run the model over.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for {id}.png mask images.
        #[arg(long)]
        out: PathBuf,
    },
}

enum AppError {
    /// Bad invocation or arguments → exit 1.
    Usage(String),
    /// A verification harness reported failures (details already printed) → exit 2.
    Verification,
    /// Anything that went wrong while doing the work → exit 3.
    Runtime(Box<dyn std::error::Error>),
}

impl<E: std::error::Error + 'static> From<E> for AppError {
    fn from(e: E) -> Self {
        AppError::Runtime(Box::new(e))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too; they are successes, not errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Verification) => ExitCode::from(2),
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Command) -> Result<(), AppError> {
    match cmd {
        Command::Synth { out, n, seed, font } => synth(&out, n, seed, font),
        Command::Train { config, data, out, resume } => train_cmd(&config, &data, &out, resume),
        Command::Eval { ckpt, data } => eval_cmd(&ckpt, &data),
        Command::Infer { ckpt, images } => infer(&ckpt, &images),
        Command::Gradcheck { module, seed } => gradcheck(module.as_deref(), seed),
        Command::ExportMasks { ckpt, data, out } => export_masks(&ckpt, &data, &out),
    }
}

fn synth(out: &Path, n: usize, seed: u64, font: Option<PathBuf>) -> Result<(), AppError> {
    let vocab = CharVocab::standard();
    let spec = FontSpec { path: font, ..FontSpec::default() };
    let loaded = LoadedFont::load(&spec)?;
    let samples =
        generate_dataset(n, seed, &vocab, &loaded, &SynthConfig::default(), &AugmentConfig::default())?;
    let count = write_dataset(out, &samples, &vocab)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn train_cmd(
    config: &Path, data: &Path, out: &Path, resume: Option<PathBuf>,
) -> Result<(), AppError> {
    let cfg = TrainConfig::load(config)?;
    let summary = train::train(&cfg, data, out, resume.as_deref(), None)?;
    println!(
        "finished step {}/{}: loss {:.6}, train word acc {:.4}",
        summary.steps_done, summary.total_steps, summary.last_loss_total, summary.last_train_word_acc
    );
    println!("checkpoint: {}", summary.final_checkpoint.display());
    println!("metrics:    {}", summary.metrics_csv.display());
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &Path) -> Result<(), AppError> {
    let (_, outcome) = train::evaluate_checkpoint(ckpt, data)?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(())
}

fn infer(ckpt: &Path, images: &[PathBuf]) -> Result<(), AppError> {
    let snapshot = Checkpoint::load(ckpt)?;
    let (_, mut model) = train::load_checkpoint_model(&snapshot)?;
    let vocab = CharVocab::standard();
    for path in images {
        let rgb = image::open(path)?.into_rgb8();
        let rgb = image::imageops::resize(
            &rgb,
            IMG_W as u32,
            IMG_H as u32,
            image::imageops::FilterType::Triangle,
        );
        let mut x = Tensor::<f32>::zeros(vec![1, 3, IMG_H, IMG_W]);
        for y in 0..IMG_H {
            for xx in 0..IMG_W {
                let p = rgb.get_pixel(xx as u32, y as u32);
                for c in 0..3 {
                    x.data[(c * IMG_H + y) * IMG_W + xx] = p.0[c] as f32 / 255.0;
                }
            }
        }
        let (texts, _) = model.recognize(&x, &vocab);
        println!("{}\t{}", path.display(), texts[0]);
    }
    Ok(())
}

fn gradcheck(module: Option<&str>, seed: u64) -> Result<(), AppError> {
    let reports = train::gradcheck::run(module, seed).map_err(AppError::Usage)?;
    println!("{:<12} {:>8} {:>8} {:>12} {:>8}  status", "module", "checked", "skipped", "max rel err", "tol");
    let mut all_ok = true;
    for r in &reports {
        let ok = r.passed();
        all_ok &= ok;
        println!(
            "{:<12} {:>8} {:>8} {:>12.3e} {:>8.0e}  {}",
            r.module,
            r.n_checked,
            r.n_skipped,
            r.max_err,
            r.tol,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if all_ok {
        Ok(())
    } else {
        Err(AppError::Verification)
    }
}

fn export_masks(ckpt: &Path, data: &Path, out: &Path) -> Result<(), AppError> {
    let snapshot = Checkpoint::load(ckpt)?;
    let (cfg, mut model) = train::load_checkpoint_model(&snapshot)?;
    let vocab = CharVocab::standard();
    let (samples, _) = load_valid(data, &vocab)?;
    std::fs::create_dir_all(out)?;
    let batch = cfg.optim.batch_size.max(1);
    let plane = IMG_H * IMG_W;
    for chunk in samples.chunks(batch) {
        let b = chunk.len();
        let mut x = Tensor::<f32>::zeros(vec![b, 3, IMG_H, IMG_W]);
        for (i, s) in chunk.iter().enumerate() {
            x.data[i * 3 * plane..(i + 1) * 3 * plane].copy_from_slice(&s.image.data);
        }
        let (_, m) = model.recognize(&x, &vocab);
        // m: [B, 69, 32, 128]; class 0 is background. Map the argmax class
        // index onto the full 8-bit range so masks are visible to the eye:
        // gray = idx * 255 / 68 (0 stays black, glyph classes brighten).
        let mpx = MASK_H * MASK_W;
        for (i, s) in chunk.iter().enumerate() {
            let mut gray = vec![0u8; mpx];
            for p in 0..mpx {
                let mut best = 0usize;
                let mut best_v = m.data[(i * SEG_CLASSES) * mpx + p];
                for k in 1..SEG_CLASSES {
                    let v = m.data[(i * SEG_CLASSES + k) * mpx + p];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                gray[p] = (best * 255 / (SEG_CLASSES - 1)) as u8;
            }
            let img = image::GrayImage::from_raw(MASK_W as u32, MASK_H as u32, gray)
                .expect("mask buffer matches dimensions");
            img.save(out.join(format!("{}.png", s.id)))?;
        }
    }
    println!("wrote {} masks to {}", samples.len(), out.display());
    Ok(())
}
