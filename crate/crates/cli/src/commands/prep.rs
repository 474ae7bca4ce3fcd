//! `towerseg prep`: materialize the preprocessing stages — height
//! normalization, height filtering, sliding-window tiling, and centred
//! tower-window extraction — as window indexes for inspection.

use towerseg_core::cloud::{WindowIndexEntry, write_window_index};
use towerseg_core::preprocess::{
    build_training_windows, compute_hag, filter_points, tile_sliding,
};

use crate::cli::PrepArgs;
use crate::corpus::{Corpus, SplitSel};
use crate::errors::{CliResult, ensure_out_dir};
use crate::settings::{Settings, resolve_threads};

fn entry(window: &towerseg_core::cloud::Window, window_id: String) -> WindowIndexEntry {
    WindowIndexEntry {
        window_id,
        source_block_id: window.source_block_id.clone(),
        center_x: window.center_x,
        center_y: window.center_y,
        side: window.side,
        contains_target: window.contains_target,
    }
}

pub fn run(args: PrepArgs) -> CliResult<()> {
    let s = Settings::load(args.common.config.as_deref())?;
    let window_side = s.get("window-side", args.window_side, 40.0)?;
    let stride = s.get("stride", args.stride, window_side)?;
    let split_side = s.get("split-side", args.split_side, 20.0)?;
    let min_tower_points = s.get("min-tower-points", args.min_tower_points, 20)?;
    let max_height = s.get("max-height", args.max_height, 100.0)?;
    let split: SplitSel = s.get("split", args.split, SplitSel::All)?;
    let _threads = resolve_threads(args.common.threads, &s, false)?;
    s.finish()?;

    let corpus = Corpus::open(&args.input)?;
    ensure_out_dir(&args.out)?;
    let (points, towers) = corpus.totals();
    println!(
        "corpus: {} blocks, {points} points, {towers} towers",
        corpus.blocks.len()
    );

    let mut sliding = Vec::new();
    let mut centred = Vec::new();
    let ids = corpus.block_ids(split);
    for id in &ids {
        let (cloud, ground) = corpus.read_block(id)?;
        let hag = compute_hag(&cloud, &ground)?;
        let kept = filter_points(&hag, max_height)?;

        for (i, w) in tile_sliding(&kept, id, window_side, stride)?.iter().enumerate() {
            sliding.push(entry(w, format!("{id}:w{i:05}")));
        }
        for (i, pair) in
            build_training_windows(&kept, id, split_side, window_side, min_tower_points)?
                .iter()
                .enumerate()
        {
            centred.push(entry(&pair.positive, format!("{id}:c{i:03}p")));
            if let Some(negative) = &pair.negative {
                centred.push(entry(negative, format!("{id}:c{i:03}n")));
            }
        }
    }

    let windows_path = args.out.join("windows.csv");
    let centred_path = args.out.join("centred.csv");
    write_window_index(&sliding, &windows_path)?;
    write_window_index(&centred, &centred_path)?;

    let positives = sliding.iter().filter(|e| e.contains_target).count();
    println!(
        "blocks: {}  windows: {}  with towers: {positives} ({:.1}%)",
        ids.len(),
        sliding.len(),
        100.0 * positives as f64 / sliding.len().max(1) as f64
    );
    println!("centred entries: {}", centred.len());
    println!("out: {} and {}", windows_path.display(), centred_path.display());
    Ok(())
}
