//! `towerseg infer`: label whole scenes with the classify-then-segment
//! pipeline. Blocks are independent, so they fan out over worker threads;
//! every output file depends only on its own block and the seed, keeping
//! results identical at any thread count.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use towerseg_core::Real;
use towerseg_core::cloud::{TileFormat, write_tile};
use towerseg_core::inference::{Decision, PipelineConfig, decisions_to_csv, infer_scene};
use towerseg_core::models::{load_classifier, load_segmenter};

use crate::cli::InferArgs;
use crate::corpus::{Corpus, SplitSel};
use crate::errors::{CliError, CliResult, ensure_out_dir, require_input, write_text};
use crate::settings::{Settings, resolve_threads};

/// What one block's inference produced, for the run summary.
struct BlockOutcome {
    id: String,
    n_points: usize,
    segmented: usize,
    skipped: usize,
}

pub struct InferSettings {
    pub pipeline: PipelineConfig,
    pub split: SplitSel,
}

pub fn resolve(args: &InferArgs, s: &Settings) -> CliResult<InferSettings> {
    let d = PipelineConfig::default();
    let window_side = s.get("window-side", args.window_side, d.window_side)?;
    Ok(InferSettings {
        pipeline: PipelineConfig {
            window_side,
            stride: s.get("stride", args.stride, window_side)?,
            cls_threshold: s.get("threshold", args.threshold, d.cls_threshold)?,
            n_points_cls: s.get("n-points", args.n_points, d.n_points_cls)?,
            max_height: s.get("max-height", args.max_height, d.max_height)?,
            seed: s.get("seed", args.seed, d.seed)?,
        },
        split: s.get("split", args.split, SplitSel::Test)?,
    })
}

pub fn pred_tile_path(out: &Path, id: &str) -> PathBuf {
    out.join(format!("{id}.pred.pct1"))
}

pub fn decisions_path(out: &Path, id: &str) -> PathBuf {
    out.join(format!("{id}.decisions.csv"))
}

fn infer_block(
    corpus: &Corpus,
    out: &Path,
    id: &str,
    cls: &mut towerseg_core::ClassifierR,
    seg: &mut towerseg_core::SegmenterR,
    cfg: &PipelineConfig,
) -> CliResult<BlockOutcome> {
    let (cloud, ground) = corpus.read_block(id)?;
    let result = infer_scene(&cloud, &ground, cls, seg, cfg)?;
    write_tile(&result.labeled, &pred_tile_path(out, id), TileFormat::Binary)?;
    write_text(&decisions_path(out, id), &decisions_to_csv(&result.decisions))?;
    let segmented = result
        .decisions
        .iter()
        .filter(|d| d.decision == Decision::Segment)
        .count();
    Ok(BlockOutcome {
        id: id.to_string(),
        n_points: result.labeled.len(),
        segmented,
        skipped: result.decisions.len() - segmented,
    })
}

pub fn run(args: InferArgs) -> CliResult<()> {
    let s = Settings::load(args.common.config.as_deref())?;
    let settings = resolve(&args, &s)?;
    let threads = resolve_threads(args.common.threads, &s, true)?;
    s.finish()?;

    require_input(&args.cls, "classifier checkpoint")?;
    require_input(&args.seg, "segmenter checkpoint")?;
    let corpus = Corpus::open(&args.input)?;
    ensure_out_dir(&args.out)?;

    let (cls, _) = load_classifier::<Real>(&args.cls)?;
    let (seg, _) = load_segmenter::<Real>(&args.seg)?;

    let ids = corpus.block_ids(settings.split);
    if ids.is_empty() {
        return Err(CliError::runtime("the selected split holds no blocks"));
    }

    let mut outcomes: Vec<BlockOutcome> = Vec::with_capacity(ids.len());
    let workers = threads.min(ids.len());
    if workers <= 1 {
        let (mut cls, mut seg) = (cls, seg);
        for id in &ids {
            outcomes.push(infer_block(
                &corpus,
                &args.out,
                id,
                &mut cls,
                &mut seg,
                &settings.pipeline,
            )?);
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let collected: Mutex<Vec<BlockOutcome>> = Mutex::new(Vec::with_capacity(ids.len()));
        let first_error: Mutex<Option<CliError>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| {
                    let (mut cls, mut seg) = (cls.clone(), seg.clone());
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(id) = ids.get(i) else { break };
                        match infer_block(
                            &corpus,
                            &args.out,
                            id,
                            &mut cls,
                            &mut seg,
                            &settings.pipeline,
                        ) {
                            Ok(outcome) => collected.lock().unwrap().push(outcome),
                            Err(e) => {
                                first_error.lock().unwrap().get_or_insert(e);
                                break;
                            }
                        }
                    }
                });
            }
        });
        if let Some(e) = first_error.into_inner().unwrap() {
            return Err(e);
        }
        outcomes = collected.into_inner().unwrap();
        outcomes.sort_by(|a, b| a.id.cmp(&b.id));
    }

    let mut total_points = 0usize;
    let (mut total_seg, mut total_skip) = (0usize, 0usize);
    for o in &outcomes {
        println!(
            "{}: {} points, {} windows segmented, {} skipped",
            o.id, o.n_points, o.segmented, o.skipped
        );
        total_points += o.n_points;
        total_seg += o.segmented;
        total_skip += o.skipped;
    }
    println!(
        "labeled {} blocks ({total_points} points); {total_seg} windows segmented, {total_skip} skipped",
        outcomes.len()
    );
    println!("out: {}", args.out.display());
    Ok(())
}
