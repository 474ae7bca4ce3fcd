//! `towerseg eval`: score predicted tiles against corpus ground truth. The
//! decision log written by `infer` is used when present; otherwise window
//! decisions are reconstructed from the predicted labels, so labeled tiles
//! alone are enough to evaluate.

use towerseg_core::cloud::{TileFormat, read_tile};
use towerseg_core::evaluation::{Evaluation, derive_decisions, evaluate_scene};
use towerseg_core::inference::{PipelineConfig, SceneInference, decisions_from_csv};

use crate::cli::EvalArgs;
use crate::commands::csv_opt;
use crate::corpus::{Corpus, SplitSel};
use crate::errors::{CliError, CliResult, ensure_out_dir, require_input, write_text};
use crate::settings::{Settings, resolve_threads};

use super::infer::{decisions_path, pred_tile_path};

pub fn run(args: EvalArgs) -> CliResult<()> {
    let s = Settings::load(args.common.config.as_deref())?;
    let d = PipelineConfig::default();
    let window_side = s.get("window-side", args.window_side, d.window_side)?;
    let pipeline = PipelineConfig {
        window_side,
        stride: s.get("stride", args.stride, window_side)?,
        max_height: s.get("max-height", args.max_height, d.max_height)?,
        ..d
    };
    let split: SplitSel = s.get("split", args.split, SplitSel::Test)?;
    let _threads = resolve_threads(args.common.threads, &s, false)?;
    s.finish()?;

    let corpus = Corpus::open(&args.truth)?;
    require_input(&args.pred, "prediction directory")?;

    let ids = corpus.block_ids(split);
    if ids.is_empty() {
        return Err(CliError::runtime("the selected split holds no blocks"));
    }

    let mut total = Evaluation::new();
    let mut derived = 0usize;
    for id in &ids {
        let (truth, ground) = corpus.read_block(id)?;
        let tile = pred_tile_path(&args.pred, id);
        require_input(&tile, "predicted tile")?;
        let labeled = read_tile(&tile, TileFormat::Binary)?;

        let log = decisions_path(&args.pred, id);
        let decisions = if log.exists() {
            let text = std::fs::read_to_string(&log)
                .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", log.display())))?;
            decisions_from_csv(&text)?
        } else {
            derived += 1;
            derive_decisions(&labeled, &ground, &pipeline)?
        };

        let scene = SceneInference { labeled, decisions };
        total.merge(&evaluate_scene(&truth, &ground, &scene, &pipeline)?);
    }

    println!("blocks: {}{}", ids.len(), match derived {
        0 => String::new(),
        n => format!(" ({n} without decision logs; decisions derived from labels)"),
    });
    let f1 = total.window_f1();
    println!(
        "window F1: {:.4}{}",
        f1.value,
        if f1.degenerate { " (degenerate: no positives)" } else { "" }
    );
    println!(
        "IoU tower: {}  IoU other: {}  mIoU: {:.4}",
        csv_opt(total.tower_iou()),
        csv_opt(total.other_iou()),
        total.miou()
    );
    print!("{}", total.full_report().to_csv());

    if let Some(out) = &args.out {
        ensure_out_dir(out)?;
        let summary = out.join("summary.csv");
        write_text(&summary, &total.summary_csv())?;
        write_text(&out.join("report.csv"), &total.full_report().to_csv())?;
        println!("out: {}", summary.display());
    }
    Ok(())
}
