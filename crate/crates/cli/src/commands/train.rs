//! `towerseg train-cls` / `train-seg`: assemble datasets from the corpus's
//! train blocks, fit the requested model, and write a checkpoint plus the
//! per-epoch history.

use std::path::Path;

use towerseg_core::Real;
use towerseg_core::models::{Variant, save_classifier, save_segmenter};
use towerseg_core::nn::loss::class_balanced_weights;
use towerseg_core::training::{
    self, TrainConfig, TrainHistory, assemble_classification_set, assemble_segmentation_set,
    carve_validation,
};

use crate::cli::TrainArgs;
use crate::corpus::{Corpus, SplitSel};
use crate::errors::{CliError, CliResult, ensure_out_dir, write_text};
use crate::settings::{Settings, resolve_threads};

/// Which of the two models a `train-*` invocation fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classifier,
    Segmenter,
}

impl Task {
    fn stem(self) -> &'static str {
        match self {
            Task::Classifier => "classifier",
            Task::Segmenter => "segmenter",
        }
    }
}

pub fn parse_variant(raw: &str) -> Result<Variant, String> {
    match raw {
        "light" => Ok(Variant::Light),
        "full" => Ok(Variant::Full),
        other => Err(format!("expected light or full, got {other:?}")),
    }
}

/// Everything `train-*` resolved from flags, config file and defaults.
pub struct TrainSettings {
    pub train_cfg: TrainConfig,
    pub val_fraction: f64,
    pub window_side: f64,
    pub stride: f64,
    pub max_height: f32,
}

pub fn resolve(args: &TrainArgs) -> CliResult<(Settings, TrainSettings)> {
    let s = Settings::load(args.common.config.as_deref())?;
    let d = TrainConfig::default();
    let variant_raw: String = s.get("variant", args.variant.clone(), "light".into())?;
    let variant = parse_variant(&variant_raw).map_err(CliError::usage)?;
    let train_cfg = TrainConfig {
        epochs: s.get("epochs", args.epochs, d.epochs)?,
        batch_size: s.get("batch-size", args.batch_size, d.batch_size)?,
        n_points: s.get("n-points", args.n_points, d.n_points)?,
        initial_lr: s.get("lr", args.lr, d.initial_lr)?,
        plateau_patience: s.get("plateau-patience", args.plateau_patience, d.plateau_patience)?,
        early_stop_patience: s.get(
            "early-stop-patience",
            args.early_stop_patience,
            d.early_stop_patience,
        )?,
        beta: s.get("beta", args.beta, d.beta)?,
        sampler_mode: s.get("sampler", args.sampler, d.sampler_mode)?,
        use_color_nir: !s.get_switch("no-color", args.no_color)?,
        variant,
        seed: s.get("seed", args.seed, d.seed)?,
        background_keep_fraction_seg: s.get(
            "bg-keep-frac",
            args.bg_keep_frac,
            d.background_keep_fraction_seg,
        )?,
    };
    let window_side = s.get("window-side", args.window_side, 40.0)?;
    let settings = TrainSettings {
        train_cfg,
        val_fraction: s.get("val-fraction", args.val_fraction, training::DEFAULT_VAL_FRACTION)?,
        window_side,
        stride: s.get("stride", args.stride, window_side)?,
        max_height: s.get("max-height", args.max_height, 100.0)?,
    };
    Ok((s, settings))
}

fn report_history(history: &TrainHistory, out: &Path, stem: &str) -> CliResult<()> {
    let path = out.join(format!("{stem}_history.csv"));
    write_text(&path, &history.to_csv())?;
    let seconds: f64 = history.epochs.iter().map(|e| e.seconds).sum();
    println!(
        "trained {} epochs in {seconds:.1} s; best val loss {:.6}",
        history.epochs.len(),
        history.best_val_loss().unwrap_or(f64::NAN)
    );
    println!("history: {}", path.display());
    Ok(())
}

pub fn run(args: TrainArgs, task: Task) -> CliResult<()> {
    let (s, ts) = resolve(&args)?;
    let threads = resolve_threads(args.common.threads, &s, false)?;
    s.finish()?;
    if threads > 1 {
        eprintln!("note: training runs on one thread; --threads {threads} has no effect");
    }

    let corpus = Corpus::open(&args.input)?;
    ensure_out_dir(&args.out)?;

    let windows = super::sliding_windows(
        &corpus,
        &corpus.block_ids(SplitSel::Train),
        ts.window_side,
        ts.stride,
        ts.max_height,
    )?;
    let n_windows = windows.len();
    let (train_w, val_w) = carve_validation(windows, ts.val_fraction, ts.train_cfg.seed)?;
    println!(
        "windows: {n_windows} from {} train blocks ({} train / {} validation)",
        corpus.train.len(),
        train_w.len(),
        val_w.len()
    );

    let cfg = &ts.train_cfg;
    match task {
        Task::Classifier => {
            let train = assemble_classification_set::<Real>(&train_w, cfg)?;
            let val = assemble_classification_set::<Real>(&val_w, cfg)?;
            let counts = training::classification_counts(&train);
            let weights = class_balanced_weights(&counts, cfg.beta)?;
            println!(
                "classification set: {} train / {} val samples; counts {counts:?}; weights [{:.4}, {:.4}]",
                train.len(),
                val.len(),
                weights.weights[0],
                weights.weights[1]
            );
            let (mut model, history) = training::train_classifier(&train, &val, cfg)?;
            let path = args.out.join("classifier.ckpt");
            save_classifier(&path, &mut model, None)?;
            println!("checkpoint: {}", path.display());
            report_history(&history, &args.out, task.stem())
        }
        Task::Segmenter => {
            let train = assemble_segmentation_set::<Real>(&train_w, cfg)?;
            let val = assemble_segmentation_set::<Real>(&val_w, cfg)?;
            let counts = training::segmentation_counts(&train);
            let weights = class_balanced_weights(&counts, cfg.beta)?;
            println!(
                "segmentation set: {} train / {} val windows; point counts {counts:?}; weights [{:.4}, {:.4}]",
                train.len(),
                val.len(),
                weights.weights[0],
                weights.weights[1]
            );
            let (mut model, history) = training::train_segmenter(&train, &val, cfg)?;
            let path = args.out.join("segmenter.ckpt");
            save_segmenter(&path, &mut model, None)?;
            println!("checkpoint: {}", path.display());
            report_history(&history, &args.out, task.stem())
        }
    }
}
