//! One module per subcommand, plus the window-building step they share.

pub mod ablate;
pub mod eval;
pub mod infer;
pub mod prep;
pub mod synth;
pub mod train;

use towerseg_core::cloud::Window;
use towerseg_core::preprocess::{compute_hag, filter_points, tile_sliding};

use crate::corpus::Corpus;
use crate::errors::CliResult;

/// Load the named blocks and cut each into sliding windows of the
/// height-filtered HAG cloud — the population inference windows come from.
pub fn sliding_windows(
    corpus: &Corpus,
    ids: &[String],
    side: f64,
    stride: f64,
    max_height: f32,
) -> CliResult<Vec<Window>> {
    let mut windows = Vec::new();
    for id in ids {
        let (cloud, ground) = corpus.read_block(id)?;
        let hag = compute_hag(&cloud, &ground)?;
        let kept = filter_points(&hag, max_height)?;
        windows.extend(tile_sliding(&kept, id, side, stride)?);
    }
    Ok(windows)
}

/// `Some(x)` formatted to six decimals, or an empty cell.
pub fn csv_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}
