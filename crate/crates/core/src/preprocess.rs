//! Scene preprocessing: height normalization, filtering, windowing, and
//! per-point feature construction.
//!
//! The stages run in a fixed order on each scene block:
//!
//! 1. [`compute_hag`] — subtract the ground raster, clamping at zero;
//! 2. [`filter_points`] — drop ground-level returns and outliers above a
//!    height cutoff;
//! 3. [`tile_sliding`] (inference) or [`build_training_windows`] (training)
//!    — cut the block into square windows;
//! 4. [`normalize_unit_sphere`] — build the 7-channel feature matrix of a
//!    window, with coordinates centred and scaled into the unit sphere.

use ndarray::Array2;

use crate::cloud::{ClassLabel, HeightFrame, PointCloud, PointRecord, Window};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Height cutoff (m) above which returns are treated as outliers.
pub const DEFAULT_MAX_HEIGHT: f32 = 100.0;
/// Side (m) of the fixed grid used to localize tower candidates.
pub const DEFAULT_SPLIT_SIDE: f64 = 20.0;
/// Side (m) of classification/segmentation windows.
pub const DEFAULT_WINDOW_SIDE: f64 = 40.0;
/// Minimum tower returns for a grid cell to seed a training window.
pub const DEFAULT_MIN_TOWER_POINTS: usize = 20;

/// Number of per-point feature channels.
pub const FEATURE_DIM: usize = 7;
/// Feature column indices: centred/scaled coordinates…
pub const COL_X: usize = 0;
pub const COL_Y: usize = 1;
pub const COL_Z: usize = 2;
/// …followed by radiometry.
pub const COL_INTENSITY: usize = 3;
pub const COL_GREEN: usize = 4;
pub const COL_BLUE: usize = 5;
pub const COL_NDVI: usize = 6;

/// Per-window network input: one row per point, [`FEATURE_DIM`] columns
/// `(x, y, z, intensity, green, blue, ndvi)`, coordinates normalized to the
/// unit sphere. The original centroid and scale are kept so predictions can
/// be related back to scene coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<S: Scalar> {
    pub data: Array2<S>,
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl<S: Scalar> FeatureMatrix<S> {
    /// Number of points (rows).
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    /// Zero the colour-derived channels (green, blue, NDVI), the ablation
    /// switch for running without RGB+NIR radiometry. Intensity is a LiDAR
    /// return property and is kept.
    pub fn zero_color_channels(&mut self) {
        for col in [COL_GREEN, COL_BLUE, COL_NDVI] {
            self.data.column_mut(col).fill(S::zero());
        }
    }
}

/// Normalized difference vegetation index of a single return.
///
/// Defined as `(nir - red) / (nir + red)`, with the convention that a zero
/// denominator yields 0. For channels in `[0, 1]` the result lies in
/// `[-1, 1]`.
pub fn ndvi(nir: f32, red: f32) -> f32 {
    let denom = nir + red;
    if denom == 0.0 { 0.0 } else { (nir - red) / denom }
}

/// Convert a cloud from absolute elevation to height above ground.
///
/// Each point's `z` becomes `max(0, z - ground(x, y))` using the nearest
/// (containing) raster cell; small negative residuals from ground-model
/// smoothing clamp to zero. Points outside the raster footprint are an
/// error naming the offending point index.
pub fn compute_hag(cloud: &PointCloud, ground: &crate::cloud::GroundModel) -> Result<PointCloud> {
    if cloud.height_frame != HeightFrame::Has {
        return Err(Error::InvalidData(
            "compute_hag expects a cloud in the absolute-height frame".into(),
        ));
    }
    ground.validate()?;
    let mut points = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points.iter().enumerate() {
        let elev = ground
            .elevation_at(f64::from(p.x), f64::from(p.y))
            .ok_or_else(|| {
                Error::InvalidData(format!(
                    "point {i} at ({}, {}) lies outside the ground raster",
                    p.x, p.y
                ))
            })?;
        let mut q = *p;
        q.z = (p.z - elev).max(0.0);
        points.push(q);
    }
    Ok(PointCloud::new(points, HeightFrame::Hag))
}

/// Keep returns strictly above ground and at or below `max_height`.
///
/// Ground-level returns (`z == 0` after HAG) carry no structure information
/// and points above the cutoff are sensor outliers; both are removed. Point
/// order is otherwise preserved.
pub fn filter_points(cloud: &PointCloud, max_height: f32) -> Result<PointCloud> {
    if cloud.height_frame != HeightFrame::Hag {
        return Err(Error::InvalidData(
            "filter_points expects a height-above-ground cloud".into(),
        ));
    }
    if !(max_height.is_finite() && max_height > 0.0) {
        return Err(Error::Config(format!(
            "max_height must be positive, got {max_height}"
        )));
    }
    let points: Vec<PointRecord> = cloud
        .points
        .iter()
        .filter(|p| p.z > 0.0 && p.z <= max_height)
        .copied()
        .collect();
    Ok(PointCloud::new(points, HeightFrame::Hag))
}

/// A sliding-window grid cell together with the indices of the points it
/// holds (indices into the cloud the grid was built from).
#[derive(Debug, Clone)]
pub(crate) struct GridCell {
    pub ix: usize,
    pub iy: usize,
    pub center_x: f64,
    pub center_y: f64,
    pub indices: Vec<usize>,
}

/// Assign every point to the sliding-window cells containing it.
///
/// Cells are anchored at the cloud's minimum corner; cell `(ix, iy)` covers
/// the half-open square `[min + i*stride, min + i*stride + side)`. With
/// `stride == side` this partitions the cloud. Only non-empty cells are
/// returned, ordered by `(iy, ix)`.
pub(crate) fn tile_assignments(
    cloud: &PointCloud,
    side: f64,
    stride: f64,
) -> Result<Vec<GridCell>> {
    if !(side.is_finite() && side > 0.0) {
        return Err(Error::Config(format!("window side must be positive, got {side}")));
    }
    if !(stride.is_finite() && stride > 0.0 && stride <= side) {
        return Err(Error::Config(format!(
            "stride must lie in (0, side]; got stride {stride}, side {side}"
        )));
    }
    if cloud.is_empty() {
        return Ok(Vec::new());
    }
    let (min_x, min_y) = (cloud.bounds.min_x, cloud.bounds.min_y);
    let span_x = cloud.bounds.max_x - min_x;
    let span_y = cloud.bounds.max_y - min_y;
    let nx = (span_x / stride).floor() as usize + 1;
    let ny = (span_y / stride).floor() as usize + 1;

    let mut cells: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (idx, p) in cloud.points.iter().enumerate() {
        let (px, py) = (f64::from(p.x) - min_x, f64::from(p.y) - min_y);
        // Cells whose half-open footprint [i*stride, i*stride + side)
        // contains the point: i in ((px - side)/stride, px/stride].
        let lo_x = ((px - side) / stride).floor() + 1.0;
        let lo_y = ((py - side) / stride).floor() + 1.0;
        let lo_x = lo_x.max(0.0) as usize;
        let lo_y = lo_y.max(0.0) as usize;
        let hi_x = ((px / stride).floor() as usize).min(nx - 1);
        let hi_y = ((py / stride).floor() as usize).min(ny - 1);
        for iy in lo_y..=hi_y {
            for ix in lo_x..=hi_x {
                let ox = ix as f64 * stride;
                let oy = iy as f64 * stride;
                if px >= ox && px < ox + side && py >= oy && py < oy + side {
                    cells.entry((iy, ix)).or_default().push(idx);
                }
            }
        }
    }

    Ok(cells
        .into_iter()
        .map(|((iy, ix), indices)| GridCell {
            ix,
            iy,
            center_x: min_x + ix as f64 * stride + side / 2.0,
            center_y: min_y + iy as f64 * stride + side / 2.0,
            indices,
        })
        .collect())
}

/// Cut a block into non-overlapping (or strided) square windows.
///
/// Every point lands in at least one window; with `stride == side` every
/// point lands in exactly one. Empty cells are skipped.
pub fn tile_sliding(
    cloud: &PointCloud,
    block_id: &str,
    side: f64,
    stride: f64,
) -> Result<Vec<Window>> {
    let cells = tile_assignments(cloud, side, stride)?;
    cells
        .into_iter()
        .map(|cell| {
            let points: Vec<PointRecord> =
                cell.indices.iter().map(|&i| cloud.points[i]).collect();
            Window::new(cell.center_x, cell.center_y, side, points, block_id)
        })
        .collect()
}

/// A positive training window centred on a tower candidate, paired with its
/// background twin (the same footprint with tower and power-line points
/// removed).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub positive: Window,
    /// `None` when removing towers and lines leaves the footprint empty.
    pub negative: Option<Window>,
}

/// Build centred training windows from a height-filtered block.
///
/// The block is scanned on a fixed `split_side` grid (anchored at the
/// minimum corner); each cell holding at least `min_tower_points` tower
/// returns seeds one window of side `window_side` centred on the centroid of
/// that cell's tower points. Each positive window is paired with a negative
/// twin: the identical footprint with `Tower` and `PowerLine` points
/// removed, so the classifier sees matched backgrounds.
pub fn build_training_windows(
    cloud: &PointCloud,
    block_id: &str,
    split_side: f64,
    window_side: f64,
    min_tower_points: usize,
) -> Result<Vec<TrainingPair>> {
    if cloud.height_frame != HeightFrame::Hag {
        return Err(Error::InvalidData(
            "build_training_windows expects a height-above-ground cloud".into(),
        ));
    }
    if !(split_side.is_finite() && split_side > 0.0) {
        return Err(Error::Config(format!(
            "split_side must be positive, got {split_side}"
        )));
    }
    if !(window_side.is_finite() && window_side > 0.0) {
        return Err(Error::Config(format!(
            "window_side must be positive, got {window_side}"
        )));
    }
    if min_tower_points == 0 {
        return Err(Error::Config("min_tower_points must be at least 1".into()));
    }
    if cloud.is_empty() {
        return Ok(Vec::new());
    }

    // Tower returns per split cell.
    let (min_x, min_y) = (cloud.bounds.min_x, cloud.bounds.min_y);
    let mut towers_per_cell: std::collections::BTreeMap<(i64, i64), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (idx, p) in cloud.points.iter().enumerate() {
        if p.label != ClassLabel::Tower {
            continue;
        }
        let cx = ((f64::from(p.x) - min_x) / split_side).floor() as i64;
        let cy = ((f64::from(p.y) - min_y) / split_side).floor() as i64;
        towers_per_cell.entry((cy, cx)).or_default().push(idx);
    }

    let mut pairs = Vec::new();
    for ((_cy, _cx), tower_idx) in towers_per_cell {
        if tower_idx.len() < min_tower_points {
            continue;
        }
        // Window centred on the centroid of this cell's tower returns.
        let mut cx = 0.0f64;
        let mut cy = 0.0f64;
        for &i in &tower_idx {
            cx += f64::from(cloud.points[i].x);
            cy += f64::from(cloud.points[i].y);
        }
        cx /= tower_idx.len() as f64;
        cy /= tower_idx.len() as f64;

        let half = window_side / 2.0;
        let member = |p: &PointRecord| {
            (f64::from(p.x) - cx).abs() <= half && (f64::from(p.y) - cy).abs() <= half
        };
        let positive_pts: Vec<PointRecord> =
            cloud.points.iter().filter(|p| member(p)).copied().collect();
        let negative_pts: Vec<PointRecord> = positive_pts
            .iter()
            .filter(|p| p.label != ClassLabel::Tower && p.label != ClassLabel::PowerLine)
            .copied()
            .collect();

        let positive = Window::new(cx, cy, window_side, positive_pts, block_id)?;
        debug_assert!(positive.contains_target);
        let negative = if negative_pts.is_empty() {
            None
        } else {
            Some(Window::new(cx, cy, window_side, negative_pts, block_id)?)
        };
        pairs.push(TrainingPair { positive, negative });
    }
    Ok(pairs)
}

/// Build the unit-sphere feature matrix of a window.
///
/// Coordinates are centred on the window's point centroid and divided by the
/// largest centroid distance, so every row's coordinate part has norm at
/// most 1 (exactly 1 for the farthest point, up to rounding). Radiometric
/// channels pass through unchanged except red and NIR, which fold into NDVI.
/// Windows whose points all coincide use scale 1 to stay finite.
pub fn normalize_unit_sphere<S: Scalar>(window: &Window) -> Result<FeatureMatrix<S>> {
    if window.is_empty() {
        return Err(Error::InvalidData(
            "cannot normalize an empty window".into(),
        ));
    }
    let n = window.len();
    let mut centroid = [0.0f64; 3];
    for p in &window.points {
        centroid[0] += f64::from(p.x);
        centroid[1] += f64::from(p.y);
        centroid[2] += f64::from(p.z);
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let mut scale = 0.0f64;
    for p in &window.points {
        let dx = f64::from(p.x) - centroid[0];
        let dy = f64::from(p.y) - centroid[1];
        let dz = f64::from(p.z) - centroid[2];
        scale = scale.max((dx * dx + dy * dy + dz * dz).sqrt());
    }
    if scale == 0.0 {
        scale = 1.0;
    }

    let mut data = Array2::<S>::zeros((n, FEATURE_DIM));
    for (i, p) in window.points.iter().enumerate() {
        data[[i, COL_X]] = S::of((f64::from(p.x) - centroid[0]) / scale);
        data[[i, COL_Y]] = S::of((f64::from(p.y) - centroid[1]) / scale);
        data[[i, COL_Z]] = S::of((f64::from(p.z) - centroid[2]) / scale);
        data[[i, COL_INTENSITY]] = S::of(f64::from(p.intensity));
        data[[i, COL_GREEN]] = S::of(f64::from(p.green));
        data[[i, COL_BLUE]] = S::of(f64::from(p.blue));
        data[[i, COL_NDVI]] = S::of(f64::from(ndvi(p.nir, p.red)));
    }
    Ok(FeatureMatrix {
        data,
        centroid,
        scale,
    })
}
