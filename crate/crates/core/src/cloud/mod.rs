//! Point-cloud data model: labelled points, clouds, ground rasters, windows,
//! and the train/test split over scene blocks.

mod io;

pub use io::{
    TileFormat, WindowIndexEntry, read_ground, read_tile, read_window_index, write_ground,
    write_tile, write_window_index,
};

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Semantic class of a LiDAR point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Tower,
    PowerLine,
    Ground,
    Background,
}

impl ClassLabel {
    /// Stable on-disk encoding.
    pub fn to_u8(self) -> u8 {
        match self {
            ClassLabel::Tower => 0,
            ClassLabel::PowerLine => 1,
            ClassLabel::Ground => 2,
            ClassLabel::Background => 3,
        }
    }

    /// Inverse of [`ClassLabel::to_u8`]; `None` for codes above 3.
    pub fn from_u8(code: u8) -> Option<ClassLabel> {
        match code {
            0 => Some(ClassLabel::Tower),
            1 => Some(ClassLabel::PowerLine),
            2 => Some(ClassLabel::Ground),
            3 => Some(ClassLabel::Background),
            _ => None,
        }
    }

    /// All labels in encoding order.
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::Tower,
        ClassLabel::PowerLine,
        ClassLabel::Ground,
        ClassLabel::Background,
    ];
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ClassLabel::Tower => "tower",
            ClassLabel::PowerLine => "power_line",
            ClassLabel::Ground => "ground",
            ClassLabel::Background => "background",
        };
        f.write_str(name)
    }
}

/// Reference frame of the `z` coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeightFrame {
    /// Height above sea level (raw survey frame).
    Has,
    /// Height above ground (after subtracting the ground model).
    Hag,
}

impl HeightFrame {
    pub fn to_u8(self) -> u8 {
        match self {
            HeightFrame::Has => 0,
            HeightFrame::Hag => 1,
        }
    }

    pub fn from_u8(code: u8) -> Option<HeightFrame> {
        match code {
            0 => Some(HeightFrame::Has),
            1 => Some(HeightFrame::Hag),
            _ => None,
        }
    }
}

/// One LiDAR return: position, radiometry, and semantic label.
///
/// Radiometric channels (`intensity`, `red`, `green`, `blue`, `nir`) are
/// normalized to `[0, 1]` at ingestion time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
    pub red: f32,
    pub green: f32,
    pub blue: f32,
    pub nir: f32,
    pub label: ClassLabel,
}

impl PointRecord {
    /// Check the per-point invariants: finite coordinates, radiometry in
    /// `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("x", self.x), ("y", self.y), ("z", self.z)] {
            if !v.is_finite() {
                return Err(Error::InvalidData(format!("non-finite {name}: {v}")));
            }
        }
        for (name, v) in [
            ("intensity", self.intensity),
            ("red", self.red),
            ("green", self.green),
            ("blue", self.blue),
            ("nir", self.nir),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidData(format!(
                    "{name} out of [0, 1]: {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Axis-aligned 3D bounding box (degenerate-to-zero for empty clouds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub min_z: f64,
    pub max_x: f64,
    pub max_y: f64,
    pub max_z: f64,
}

impl Bounds {
    /// Zero-volume bounds at the origin, used for empty clouds.
    pub const EMPTY: Bounds = Bounds {
        min_x: 0.0,
        min_y: 0.0,
        min_z: 0.0,
        max_x: 0.0,
        max_y: 0.0,
        max_z: 0.0,
    };

    /// Tight bounds over a point slice.
    pub fn of(points: &[PointRecord]) -> Bounds {
        if points.is_empty() {
            return Bounds::EMPTY;
        }
        let mut b = Bounds {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            min_z: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
            max_z: f64::NEG_INFINITY,
        };
        for p in points {
            b.min_x = b.min_x.min(f64::from(p.x));
            b.min_y = b.min_y.min(f64::from(p.y));
            b.min_z = b.min_z.min(f64::from(p.z));
            b.max_x = b.max_x.max(f64::from(p.x));
            b.max_y = b.max_y.max(f64::from(p.y));
            b.max_z = b.max_z.max(f64::from(p.z));
        }
        b
    }
}

/// A labelled point cloud with a declared height frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<PointRecord>,
    pub height_frame: HeightFrame,
    pub bounds: Bounds,
}

impl PointCloud {
    /// Build a cloud, computing bounds from the points.
    pub fn new(points: Vec<PointRecord>, height_frame: HeightFrame) -> PointCloud {
        let bounds = Bounds::of(&points);
        PointCloud {
            points,
            height_frame,
            bounds,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Check every per-point invariant plus the frame-specific rule that
    /// heights above ground are never negative.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::InvalidData(format!("point {i}: {e}")))?;
            if self.height_frame == HeightFrame::Hag && p.z < 0.0 {
                return Err(Error::InvalidData(format!(
                    "point {i}: negative height above ground: {}",
                    p.z
                )));
            }
        }
        Ok(())
    }

    /// Counts per class, in encoding order.
    pub fn class_counts(&self) -> [u64; 4] {
        let mut counts = [0u64; 4];
        for p in &self.points {
            counts[p.label.to_u8() as usize] += 1;
        }
        counts
    }
}

/// Rasterized ground elevation: a row-major grid of cell elevations.
///
/// Row 0 starts at `origin_y`, column 0 at `origin_x`; cell `(r, c)` covers
/// the half-open square `[origin + c*cell, origin + (c+1)*cell)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundModel {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub elevation: Vec<f32>,
}

impl GroundModel {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        cell_size: f64,
        rows: usize,
        cols: usize,
        elevation: Vec<f32>,
    ) -> Result<GroundModel> {
        let g = GroundModel {
            origin_x,
            origin_y,
            cell_size,
            rows,
            cols,
            elevation,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(Error::InvalidData(format!(
                "ground cell_size must be positive, got {}",
                self.cell_size
            )));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(Error::InvalidData("non-finite ground origin".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidData("ground raster has zero extent".into()));
        }
        if self.elevation.len() != self.rows * self.cols {
            return Err(Error::InvalidData(format!(
                "ground raster holds {} cells, expected {} ({} rows x {} cols)",
                self.elevation.len(),
                self.rows * self.cols,
                self.rows,
                self.cols
            )));
        }
        if let Some(bad) = self.elevation.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite ground elevation at cell {bad}"
            )));
        }
        Ok(())
    }

    /// Elevation of the cell containing `(x, y)`, or `None` outside the
    /// raster footprint. Lookup is nearest-cell (no interpolation).
    pub fn elevation_at(&self, x: f64, y: f64) -> Option<f32> {
        let fx = (x - self.origin_x) / self.cell_size;
        let fy = (y - self.origin_y) / self.cell_size;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (col, row) = (fx.floor() as usize, fy.floor() as usize);
        if row >= self.rows || col >= self.cols {
            return None;
        }
        Some(self.elevation[row * self.cols + col])
    }
}

/// A square, axis-aligned subset of a scene, used as the unit of
/// classification and segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub center_x: f64,
    pub center_y: f64,
    pub side: f64,
    pub points: Vec<PointRecord>,
    /// True iff any point is labelled `Tower`.
    pub contains_target: bool,
    /// Identifier of the scene block this window was cut from.
    pub source_block_id: String,
}

impl Window {
    /// Build a window, deriving `contains_target` and validating that every
    /// point lies inside the closed footprint.
    pub fn new(
        center_x: f64,
        center_y: f64,
        side: f64,
        points: Vec<PointRecord>,
        source_block_id: impl Into<String>,
    ) -> Result<Window> {
        if !(side.is_finite() && side > 0.0) {
            return Err(Error::InvalidData(format!(
                "window side must be positive, got {side}"
            )));
        }
        let half = side / 2.0;
        for (i, p) in points.iter().enumerate() {
            let (dx, dy) = (f64::from(p.x) - center_x, f64::from(p.y) - center_y);
            if dx.abs() > half || dy.abs() > half {
                return Err(Error::InvalidData(format!(
                    "point {i} at ({}, {}) lies outside the window footprint \
                     centered at ({center_x}, {center_y}) with side {side}",
                    p.x, p.y
                )));
            }
        }
        let contains_target = points.iter().any(|p| p.label == ClassLabel::Tower);
        Ok(Window {
            center_x,
            center_y,
            side,
            points,
            contains_target,
            source_block_id: source_block_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Stable 64-bit identity used to derive per-window random streams.
    pub fn stream_key(&self) -> u64 {
        let mut k = rng::tag(&self.source_block_id);
        for bits in [
            self.center_x.to_bits(),
            self.center_y.to_bits(),
            self.side.to_bits(),
        ] {
            k = k.rotate_left(17) ^ bits.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        }
        k
    }
}

/// Result of the block-level train/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// Hold out a fraction of the *tower-containing* blocks as the test set.
///
/// `ceil(holdout_fraction * |tower_blocks|)` tower blocks are drawn at random
/// (seeded); every other block — including all blocks without towers — goes
/// to the train side. This keeps the scarce positive blocks represented on
/// both sides while guaranteeing the test blocks are never observed during
/// training.
pub fn split_blocks_train_test(
    all_blocks: &BTreeSet<String>,
    tower_blocks: &BTreeSet<String>,
    holdout_fraction: f64,
    seed: u64,
) -> Result<BlockSplit> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout_fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    if let Some(stray) = tower_blocks.iter().find(|b| !all_blocks.contains(*b)) {
        return Err(Error::InvalidData(format!(
            "tower block {stray:?} is not among the listed blocks"
        )));
    }
    if tower_blocks.is_empty() {
        return Err(Error::InvalidData(
            "cannot split: no tower-containing blocks".into(),
        ));
    }
    let n_test = (holdout_fraction * tower_blocks.len() as f64).ceil() as usize;
    let mut candidates: Vec<&String> = tower_blocks.iter().collect();
    let mut r = rng::stream(seed, &[rng::tag("block-split")]);
    // Partial Fisher–Yates: the first n_test slots become the test set.
    for i in 0..n_test {
        let j = r.random_range(i..candidates.len());
        candidates.swap(i, j);
    }
    let test: BTreeSet<String> = candidates[..n_test].iter().map(|s| (*s).clone()).collect();
    let train: BTreeSet<String> = all_blocks.difference(&test).cloned().collect();
    Ok(BlockSplit { train, test })
}
