//! `towerseg synth`: generate a labeled corpus of procedural scenes.

use towerseg_core::synth::{CorpusConfig, SceneConfig, generate_corpus};

use crate::cli::SynthArgs;
use crate::errors::{CliResult, ensure_out_dir};
use crate::settings::{Settings, resolve_threads};

pub fn run(args: SynthArgs) -> CliResult<()> {
    let s = Settings::load(args.common.config.as_deref())?;
    let defaults = SceneConfig::default();

    let scene = SceneConfig {
        extent: {
            let side = s.get("extent", args.extent, defaults.extent.0)?;
            (side, side)
        },
        point_density: s.get("density", args.density, defaults.point_density)?,
        // Overridden per scene by the corpus prevalence target.
        tower_count: defaults.tower_count,
        tower_height_range: (
            s.get("height-min", args.height_min, defaults.tower_height_range.0)?,
            s.get("height-max", args.height_max, defaults.tower_height_range.1)?,
        ),
        tower_width_max: s.get("tower-width-max", args.tower_width_max, defaults.tower_width_max)?,
        tower_points_range: (
            s.get("tower-points-min", args.tower_points_min, defaults.tower_points_range.0)?,
            s.get("tower-points-max", args.tower_points_max, defaults.tower_points_range.1)?,
        ),
        veg_low_fraction: s.get("veg-low", args.veg_low, defaults.veg_low_fraction)?,
        veg_mid_fraction: s.get("veg-mid", args.veg_mid, defaults.veg_mid_fraction)?,
        veg_high_fraction: s.get("veg-high", args.veg_high, defaults.veg_high_fraction)?,
        color_signal: !s.get_switch("no-color-signal", args.no_color_signal)?,
        tower_grid_side: None,
        seed: 0,
    };
    let cfg = CorpusConfig {
        scene,
        n_scenes: s.get("scenes", args.scenes, 30)?,
        prevalence: s.get("prevalence", args.prevalence, 0.05)?,
        window_side: s.get("window-side", args.window_side, 40.0)?,
        holdout_fraction: s.get("holdout", args.holdout, 0.1)?,
        seed: s.get("seed", args.seed, 0)?,
    };
    // Scene generation is a single sequential stream per corpus so outputs
    // stay byte-stable; the flag is accepted for interface uniformity.
    let _threads = resolve_threads(args.common.threads, &s, true)?;
    s.finish()?;

    ensure_out_dir(&args.out)?;
    let summary = generate_corpus(&cfg, &args.out)?;

    let points: u64 = summary.blocks.iter().map(|(_, n, _)| n).sum();
    let towers: usize = summary.blocks.iter().map(|(_, _, t)| t).sum();
    println!(
        "corpus: {} scenes, {points} points, {towers} towers",
        summary.blocks.len()
    );
    println!(
        "split: {} train blocks, {} test blocks",
        summary.train.len(),
        summary.test.len()
    );
    println!("out: {}", args.out.display());
    Ok(())
}
