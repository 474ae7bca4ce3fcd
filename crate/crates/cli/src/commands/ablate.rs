//! `towerseg ablate`: one-at-a-time factor study around the default
//! configuration. For each seed it retrains the affected model(s) with a
//! single factor changed — sampling strategy, color channels, or the
//! class-balancing exponent — and scores the resulting pipeline on the test
//! blocks, writing one CSV row per (seed, configuration).

use std::time::Instant;

use towerseg_core::Real;
use towerseg_core::cloud::{GroundModel, PointCloud};
use towerseg_core::evaluation::{Evaluation, evaluate_scene};
use towerseg_core::inference::{PipelineConfig, infer_scene};
use towerseg_core::models::Variant;
use towerseg_core::nn::loss::class_balanced_weights;
use towerseg_core::sampling::SamplerMode;
use towerseg_core::training::{
    self, TrainConfig, assemble_classification_set, assemble_segmentation_set, carve_validation,
};

use crate::cli::AblateArgs;
use crate::commands::csv_opt;
use crate::corpus::{Corpus, SplitSel};
use crate::errors::{CliError, CliResult, ensure_out_dir, write_text};
use crate::settings::{Settings, resolve_threads};

/// One factor setting; everything not mentioned stays at the default.
struct Config {
    label: &'static str,
    variant: Variant,
    use_color_nir: bool,
    sampler_mode: SamplerMode,
    beta: f64,
    /// Whether this configuration retrains the segmenter; when false the
    /// seed's baseline segmenter is reused (the factor only concerns the
    /// classifier).
    train_seg: bool,
}

const BASELINE: Config = Config {
    label: "baseline",
    variant: Variant::Light,
    use_color_nir: true,
    sampler_mode: SamplerMode::Constrained,
    beta: 0.999,
    train_seg: true,
};

fn configurations(include_full: bool) -> Vec<Config> {
    let mut list = vec![
        BASELINE,
        Config {
            label: "sampling=random",
            sampler_mode: SamplerMode::Random,
            ..BASELINE
        },
        Config {
            label: "color=off",
            use_color_nir: false,
            ..BASELINE
        },
        Config {
            label: "beta=0.9",
            beta: 0.9,
            train_seg: false,
            ..BASELINE
        },
        Config {
            label: "beta=0.9999",
            beta: 0.9999,
            train_seg: false,
            ..BASELINE
        },
    ];
    if include_full {
        list.push(Config {
            label: "variant=full",
            variant: Variant::Full,
            ..BASELINE
        });
    }
    list
}

pub const CSV_HEADER: &str = "seed,variant,rgb_nir,sampling,beta,weight_other,weight_tower,\
f1,iou_tower,iou_other,miou,cls_epochs,seg_epochs,seconds";

fn parse_seeds(raw: &str) -> CliResult<Vec<u64>> {
    let seeds: Result<Vec<u64>, _> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect();
    match seeds {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::usage(format!(
            "--seeds expects comma-separated integers, got {raw:?}"
        ))),
    }
}

fn evaluate_pipeline(
    test_blocks: &[(String, PointCloud, GroundModel)],
    cls: &mut towerseg_core::ClassifierR,
    seg: &mut towerseg_core::SegmenterR,
    pipeline: &PipelineConfig,
) -> CliResult<Evaluation> {
    let mut total = Evaluation::new();
    for (_, truth, ground) in test_blocks {
        let out = infer_scene(truth, ground, cls, seg, pipeline)?;
        total.merge(&evaluate_scene(truth, ground, &out, pipeline)?);
    }
    Ok(total)
}

pub fn run(args: AblateArgs) -> CliResult<()> {
    let s = Settings::load(args.common.config.as_deref())?;
    let d = TrainConfig::default();
    let base_cfg = TrainConfig {
        epochs: s.get("epochs", args.epochs, 8)?,
        batch_size: s.get("batch-size", args.batch_size, d.batch_size)?,
        n_points: s.get("n-points", args.n_points, 512)?,
        initial_lr: s.get("lr", args.lr, d.initial_lr)?,
        ..d
    };
    let seeds = parse_seeds(&s.get("seeds", args.seeds.clone(), "0,1,2".into())?)?;
    let val_fraction = s.get("val-fraction", args.val_fraction, training::DEFAULT_VAL_FRACTION)?;
    let window_side = s.get("window-side", args.window_side, 40.0)?;
    let stride = s.get("stride", args.stride, window_side)?;
    let max_height: f32 = s.get("max-height", args.max_height, 100.0)?;
    let threshold = s.get("threshold", args.threshold, 0.5)?;
    let include_full = s.get_switch("include-full", args.include_full)?;
    let threads = resolve_threads(args.common.threads, &s, false)?;
    s.finish()?;
    if threads > 1 {
        eprintln!("note: the ablation grid runs on one thread; --threads {threads} has no effect");
    }

    let corpus = Corpus::open(&args.input)?;
    ensure_out_dir(&args.out)?;

    let master = super::sliding_windows(
        &corpus,
        &corpus.block_ids(SplitSel::Train),
        window_side,
        stride,
        max_height,
    )?;
    let mut test_blocks = Vec::new();
    for id in corpus.block_ids(SplitSel::Test) {
        let (cloud, ground) = corpus.read_block(&id)?;
        test_blocks.push((id, cloud, ground));
    }
    if test_blocks.is_empty() {
        return Err(CliError::runtime("the corpus has no test blocks"));
    }
    println!(
        "ablation over {} seeds × {} configurations ({} train windows, {} test blocks)",
        seeds.len(),
        configurations(include_full).len(),
        master.len(),
        test_blocks.len()
    );

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for &seed in &seeds {
        let (train_w, val_w) = carve_validation(master.clone(), val_fraction, seed)?;
        let mut baseline_seg: Option<(towerseg_core::SegmenterR, usize)> = None;

        for spec in configurations(include_full) {
            let started = Instant::now();
            let cfg = TrainConfig {
                beta: spec.beta,
                sampler_mode: spec.sampler_mode,
                use_color_nir: spec.use_color_nir,
                variant: spec.variant,
                seed,
                ..base_cfg.clone()
            };

            let cls_train = assemble_classification_set::<Real>(&train_w, &cfg)?;
            let cls_val = assemble_classification_set::<Real>(&val_w, &cfg)?;
            let counts = training::classification_counts(&cls_train);
            let weights = class_balanced_weights(&counts, cfg.beta)?;
            let (mut cls, cls_hist) = training::train_classifier(&cls_train, &cls_val, &cfg)?;
            drop((cls_train, cls_val));

            let (mut seg, seg_epochs) = if spec.train_seg {
                let seg_train = assemble_segmentation_set::<Real>(&train_w, &cfg)?;
                let seg_val = assemble_segmentation_set::<Real>(&val_w, &cfg)?;
                let (seg, hist) = training::train_segmenter(&seg_train, &seg_val, &cfg)?;
                let epochs = hist.epochs.len();
                if spec.label == BASELINE.label {
                    baseline_seg = Some((seg.clone(), epochs));
                }
                (seg, Some(epochs))
            } else {
                let (seg, _) = baseline_seg
                    .clone()
                    .expect("the baseline configuration runs first and trains a segmenter");
                (seg, None)
            };

            let pipeline = PipelineConfig {
                window_side,
                stride,
                cls_threshold: threshold,
                n_points_cls: cfg.n_points,
                max_height,
                seed,
            };
            let eval = evaluate_pipeline(&test_blocks, &mut cls, &mut seg, &pipeline)?;
            let seconds = started.elapsed().as_secs_f64();

            csv.push_str(&format!(
                "{seed},{},{},{},{},{:.6},{:.6},{:.6},{},{},{:.6},{},{},{seconds:.1}\n",
                spec.variant,
                if spec.use_color_nir { "on" } else { "off" },
                spec.sampler_mode,
                spec.beta,
                weights.weights[0],
                weights.weights[1],
                eval.window_f1().value,
                csv_opt(eval.tower_iou()),
                csv_opt(eval.other_iou()),
                eval.miou(),
                cls_hist.epochs.len(),
                seg_epochs.map_or(String::new(), |e| e.to_string()),
            ));
            println!(
                "[seed {seed}] {}: f1 {:.4}, tower IoU {}, mIoU {:.4} ({seconds:.0} s)",
                spec.label,
                eval.window_f1().value,
                csv_opt(eval.tower_iou()),
                eval.miou()
            );
        }
    }

    let path = args.out.join("ablation.csv");
    write_text(&path, &csv)?;
    println!("out: {}", path.display());
    Ok(())
}
