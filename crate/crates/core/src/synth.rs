//! Procedural generation of labeled desk-scale LiDAR scenes: smooth
//! heightfield ground, stratified vegetation clusters, lattice towers,
//! catenary power lines, and class-dependent radiometry.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{
    self as cloud_io, ClassLabel, GroundModel, HeightFrame, PointCloud, PointRecord,
    split_blocks_train_test,
};
use crate::error::{Error, Result};
use crate::rng;

/// Margin (m) kept between tower centers and analysis-grid lines when grid
/// avoidance is on, so a tower's full footprint stays inside one window.
pub const GRID_MARGIN: f64 = 10.0;
/// Margin (m) kept between tower centers and the scene boundary.
pub const EDGE_MARGIN: f64 = 20.0;
/// Minimum distance (m) between two tower centers.
pub const TOWER_SEPARATION: f64 = 40.0;

/// One scene's generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Scene footprint in meters (width, depth); points cover `[0, w) × [0, d)`.
    pub extent: (f64, f64),
    /// Target density in points/m² over the whole footprint.
    pub point_density: f64,
    pub tower_count: usize,
    /// Tower heights are drawn uniformly from this range (meters above ground).
    pub tower_height_range: (f64, f64),
    /// Maximum horizontal footprint width of a tower.
    pub tower_width_max: f64,
    /// Points per tower, drawn log-uniformly from this range.
    pub tower_points_range: (u64, u64),
    pub veg_low_fraction: f64,
    pub veg_mid_fraction: f64,
    pub veg_high_fraction: f64,
    /// When false, all classes share one radiometry distribution, removing
    /// any color/NDVI signal.
    pub color_signal: bool,
    /// `Some(side)`: keep tower centers at least [`GRID_MARGIN`] from the
    /// lines of a `side`-spaced analysis grid, so each tower falls inside
    /// exactly one window.
    pub tower_grid_side: Option<f64>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent: (320.0, 320.0),
            point_density: 8.0,
            tower_count: 3,
            tower_height_range: (10.0, 50.0),
            tower_width_max: 20.0,
            tower_points_range: (20, 2434),
            veg_low_fraction: 0.35,
            veg_mid_fraction: 0.25,
            veg_high_fraction: 0.08,
            color_signal: true,
            tower_grid_side: None,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, d) = self.extent;
        if !(w > 0.0 && d > 0.0 && w.is_finite() && d.is_finite()) {
            return Err(Error::Config(format!("extent must be positive, got {w}×{d}")));
        }
        if !(self.point_density > 0.0) {
            return Err(Error::Config(format!(
                "point density must be positive, got {}",
                self.point_density
            )));
        }
        let (h_lo, h_hi) = self.tower_height_range;
        if !(0.0 < h_lo && h_lo <= h_hi) {
            return Err(Error::Config(format!(
                "tower height range must be ordered and positive, got [{h_lo}, {h_hi}]"
            )));
        }
        let (p_lo, p_hi) = self.tower_points_range;
        if p_lo == 0 || p_lo > p_hi {
            return Err(Error::Config(format!(
                "tower points range must be ordered and positive, got [{p_lo}, {p_hi}]"
            )));
        }
        if !(self.tower_width_max > 0.0) {
            return Err(Error::Config("tower width must be positive".into()));
        }
        let fractions = [
            self.veg_low_fraction,
            self.veg_mid_fraction,
            self.veg_high_fraction,
        ];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || fractions.iter().sum::<f64>() > 1.0
        {
            return Err(Error::Config(format!(
                "vegetation fractions must be in [0,1] and sum to at most 1, got {fractions:?}"
            )));
        }
        if let Some(side) = self.tower_grid_side {
            if !(side > 2.0 * GRID_MARGIN) {
                return Err(Error::Config(format!(
                    "grid side {side} leaves no room between {GRID_MARGIN} m margins"
                )));
            }
        }
        Ok(())
    }
}

/// Where a tower was generated, for label-soundness checks and debugging.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerInfo {
    pub center_x: f64,
    pub center_y: f64,
    /// Horizontal radius bounding every point of this tower.
    pub radius: f64,
    /// Height above local ground.
    pub height: f64,
    pub base_elevation: f64,
    pub n_points: u64,
}

#[derive(Debug)]
pub struct GeneratedScene {
    pub cloud: PointCloud,
    pub ground: GroundModel,
    pub towers: Vec<TowerInfo>,
}

const GROUND_CELL: f64 = 10.0;
const BASE_ELEVATION: f64 = 100.0;

fn build_ground(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> GroundModel {
    let (w, d) = cfg.extent;
    let cols = (w / GROUND_CELL).ceil() as usize;
    let rows = (d / GROUND_CELL).ceil() as usize;
    // A handful of smooth bumps on a flat base.
    let bumps: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..w),
                rng.random_range(0.0..d),
                rng.random_range(-4.0..4.0),
                rng.random_range(30.0..90.0),
            )
        })
        .collect();
    let mut elevation = Vec::with_capacity(rows * cols);
    for iy in 0..rows {
        for ix in 0..cols {
            let cx = (ix as f64 + 0.5) * GROUND_CELL;
            let cy = (iy as f64 + 0.5) * GROUND_CELL;
            let mut z = BASE_ELEVATION;
            for &(bx, by, amp, sigma) in &bumps {
                let dist2 = (cx - bx).powi(2) + (cy - by).powi(2);
                z += amp * (-dist2 / (2.0 * sigma * sigma)).exp();
            }
            elevation.push(z as f32);
        }
    }
    GroundModel {
        origin_x: 0.0,
        origin_y: 0.0,
        cell_size: GROUND_CELL,
        rows,
        cols,
        elevation,
    }
}

fn far_from_grid(v: f64, side: f64) -> bool {
    let r = v.rem_euclid(side);
    r >= GRID_MARGIN && side - r >= GRID_MARGIN
}

fn place_towers(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    let (w, d) = cfg.extent;
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(cfg.tower_count);
    for i in 0..cfg.tower_count {
        let mut placed = false;
        for _ in 0..500 {
            let x = rng.random_range(0.0..w);
            let y = rng.random_range(0.0..d);
            if x < EDGE_MARGIN || w - x < EDGE_MARGIN || y < EDGE_MARGIN || d - y < EDGE_MARGIN {
                continue;
            }
            if let Some(side) = cfg.tower_grid_side {
                if !far_from_grid(x, side) || !far_from_grid(y, side) {
                    continue;
                }
            }
            if centers
                .iter()
                .any(|&(cx, cy)| ((cx - x).powi(2) + (cy - y).powi(2)).sqrt() < TOWER_SEPARATION)
            {
                continue;
            }
            centers.push((x, y));
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::InvalidData(format!(
                "could not place tower {} of {} after 500 attempts: extent {w}×{d} is too \
                 crowded for {TOWER_SEPARATION} m separations",
                i + 1,
                cfg.tower_count
            )));
        }
    }
    Ok(centers)
}

struct Radiometry {
    intensity: f32,
    r: f32,
    g: f32,
    b: f32,
    nir: f32,
}

fn draw_radiometry(class: ClassLabel, color_signal: bool, rng: &mut ChaCha8Rng) -> Radiometry {
    let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..hi) as f32;
    if !color_signal {
        // Every class shares one distribution: no spectral information.
        return Radiometry {
            intensity: u(rng, 0.1, 0.9),
            r: u(rng, 0.03, 0.7),
            g: u(rng, 0.2, 0.6),
            b: u(rng, 0.05, 0.5),
            nir: u(rng, 0.05, 0.95),
        };
    }
    match class {
        // Vegetation reflects strongly in near-infrared: high NDVI.
        ClassLabel::Background => Radiometry {
            intensity: u(rng, 0.1, 0.5),
            r: u(rng, 0.03, 0.25),
            g: u(rng, 0.2, 0.6),
            b: u(rng, 0.05, 0.3),
            nir: u(rng, 0.55, 0.95),
        },
        // Metal structures: low NDVI, bright but overlapping intensity.
        ClassLabel::Tower | ClassLabel::PowerLine => Radiometry {
            intensity: u(rng, 0.2, 0.9),
            r: u(rng, 0.25, 0.7),
            g: u(rng, 0.2, 0.5),
            b: u(rng, 0.2, 0.5),
            nir: u(rng, 0.05, 0.35),
        },
        ClassLabel::Ground => Radiometry {
            intensity: u(rng, 0.1, 0.6),
            r: u(rng, 0.15, 0.5),
            g: u(rng, 0.2, 0.5),
            b: u(rng, 0.1, 0.4),
            nir: u(rng, 0.2, 0.6),
        },
    }
}

fn push_point(
    points: &mut Vec<PointRecord>,
    x: f64,
    y: f64,
    z: f64,
    class: ClassLabel,
    color_signal: bool,
    rng: &mut ChaCha8Rng,
) {
    let rad = draw_radiometry(class, color_signal, rng);
    points.push(PointRecord {
        x: x as f32,
        y: y as f32,
        z: z as f32,
        intensity: rad.intensity,
        red: rad.r,
        green: rad.g,
        blue: rad.b,
        nir: rad.nir,
        label: class,
    });
}

/// Number of points for one tower, log-uniform over the configured range.
fn draw_tower_points(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> u64 {
    let (lo, hi) = cfg.tower_points_range;
    if lo == hi {
        return lo;
    }
    let ln = rng.random_range((lo as f64).ln()..(hi as f64).ln());
    (ln.exp().round() as u64).clamp(lo, hi)
}

struct TowerGeometry {
    half_width: f64,
    height: f64,
    azimuth: f64,
}

fn generate_tower(
    cfg: &SceneConfig,
    ground: &GroundModel,
    center: (f64, f64),
    points: &mut Vec<PointRecord>,
    rng: &mut ChaCha8Rng,
) -> TowerInfo {
    let (cx, cy) = center;
    let base_elevation = f64::from(ground.elevation_at(cx, cy).expect("towers placed inside"));
    let height = rng.random_range(cfg.tower_height_range.0..=cfg.tower_height_range.1);
    // Keep the whole footprint within the grid margin when avoidance is on.
    let footprint_cap = match cfg.tower_grid_side {
        Some(_) => cfg.tower_width_max.min(2.0 * (GRID_MARGIN - 0.5)),
        None => cfg.tower_width_max,
    };
    // `footprint` caps the horizontal diameter; the leg square's corners sit
    // on its circumscribed circle, so the square half-width is diameter/(2*sqrt2).
    let footprint = rng.random_range((footprint_cap * 0.3)..=footprint_cap);
    let geom = TowerGeometry {
        half_width: footprint / (2.0 * std::f64::consts::SQRT_2),
        height,
        azimuth: rng.random_range(0.0..std::f64::consts::PI),
    };
    let n_points = draw_tower_points(cfg, rng);

    let body_top = 0.8 * geom.height;
    let top_half = geom.half_width * 0.25;
    // Square of leg base corners, rotated by the tower azimuth.
    let (sin_a, cos_a) = geom.azimuth.sin_cos();
    let corner = |s: f64, t: f64, half: f64| -> (f64, f64) {
        let lx = s * half;
        let ly = t * half;
        (cx + lx * cos_a - ly * sin_a, cy + lx * sin_a + ly * cos_a)
    };
    let signs = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];

    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.3..0.3);
    for _ in 0..n_points {
        let roll: f64 = rng.random_range(0.0..1.0);
        let (px, py, hag) = if roll < 0.55 {
            // Sloped lattice leg.
            let (s, t) = signs[rng.random_range(0..4)];
            let f = rng.random_range(0.0..1.0);
            let half = geom.half_width + (top_half - geom.half_width) * f;
            let (bx, by) = corner(s, t, half);
            (bx, by, f * body_top)
        } else if roll < 0.75 {
            // Horizontal cross-bracing between two adjacent legs.
            let f = rng.random_range(0.1..1.0);
            let half = geom.half_width + (top_half - geom.half_width) * f;
            let pair = rng.random_range(0..4);
            let (a, b) = match pair {
                0 => (signs[0], signs[1]),
                1 => (signs[1], signs[3]),
                2 => (signs[3], signs[2]),
                _ => (signs[2], signs[0]),
            };
            let (ax, ay) = corner(a.0, a.1, half);
            let (bx, by) = corner(b.0, b.1, half);
            let t = rng.random_range(0.0..1.0);
            (ax + (bx - ax) * t, ay + (by - ay) * t, f * body_top)
        } else {
            // Head: crossarm segments above the body.
            let level = if rng.random_range(0.0..1.0) < 0.5 { 0.85 } else { 0.95 };
            let arm = geom.half_width * 0.8;
            let t = rng.random_range(-1.0..1.0);
            (
                cx + t * arm * cos_a,
                cy + t * arm * sin_a,
                level * geom.height,
            )
        };
        let x = px + jitter(rng);
        let y = py + jitter(rng);
        let hag = (hag + jitter(rng)).clamp(0.1, geom.height);
        push_point(
            points,
            x,
            y,
            base_elevation + hag,
            ClassLabel::Tower,
            cfg.color_signal,
            rng,
        );
    }

    TowerInfo {
        center_x: cx,
        center_y: cy,
        radius: footprint / 2.0 + 0.5,
        height: geom.height,
        base_elevation,
        n_points,
    }
}

fn generate_power_line(
    cfg: &SceneConfig,
    ground: &GroundModel,
    from: &TowerInfo,
    to: &TowerInfo,
    points: &mut Vec<PointRecord>,
    rng: &mut ChaCha8Rng,
) {
    let z0 = from.base_elevation + 0.9 * from.height;
    let z1 = to.base_elevation + 0.9 * to.height;
    let dx = to.center_x - from.center_x;
    let dy = to.center_y - from.center_y;
    let span = (dx * dx + dy * dy).sqrt();
    let sag = (0.04 * span).min(3.0);
    let n = (span * 1.2).round() as usize;
    for _ in 0..n {
        let t: f64 = rng.random_range(0.0..1.0);
        let x = from.center_x + dx * t + rng.random_range(-0.15..0.15);
        let y = from.center_y + dy * t + rng.random_range(-0.15..0.15);
        let catenary = z0 + (z1 - z0) * t - sag * 4.0 * t * (1.0 - t);
        let z = catenary + rng.random_range(-0.15..0.15);
        let floor = match ground.elevation_at(x, y) {
            Some(e) => f64::from(e) + 1.5,
            None => continue, // jittered off the raster edge: drop
        };
        push_point(
            points,
            x,
            y,
            z.max(floor),
            ClassLabel::PowerLine,
            cfg.color_signal,
            rng,
        );
    }
}

fn generate_vegetation(
    cfg: &SceneConfig,
    ground: &GroundModel,
    band: (f64, f64),
    target: usize,
    points: &mut Vec<PointRecord>,
    rng: &mut ChaCha8Rng,
) {
    let (w, d) = cfg.extent;
    let mut remaining = target;
    while remaining > 0 {
        let cluster = rng.random_range(30..=150).min(remaining);
        let ccx = rng.random_range(0.0..w);
        let ccy = rng.random_range(0.0..d);
        let radius = rng.random_range(2.0..8.0);
        for _ in 0..cluster {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let r = radius * rng.random_range(0.0f64..1.0).sqrt();
            let x = (ccx + r * ang.cos()).clamp(0.0, w - 1e-6);
            let y = (ccy + r * ang.sin()).clamp(0.0, d - 1e-6);
            let hag = rng.random_range(band.0..band.1);
            let elev = f64::from(ground.elevation_at(x, y).expect("clamped inside"));
            push_point(
                points,
                x,
                y,
                elev + hag,
                ClassLabel::Background,
                cfg.color_signal,
                rng,
            );
        }
        remaining -= cluster;
    }
}

/// Generate one scene. Deterministic per configuration (including seed).
pub fn generate_scene(cfg: &SceneConfig) -> Result<GeneratedScene> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, &[rng::tag("scene-gen")]);
    let (w, d) = cfg.extent;

    let ground = build_ground(cfg, &mut rng);
    let centers = place_towers(cfg, &mut rng)?;

    let mut points = Vec::new();
    let mut towers = Vec::with_capacity(centers.len());
    for center in centers {
        towers.push(generate_tower(cfg, &ground, center, &mut points, &mut rng));
    }
    for pair in towers.windows(2) {
        generate_power_line(cfg, &ground, &pair[0], &pair[1], &mut points, &mut rng);
    }

    let total_target = (cfg.point_density * w * d).round() as usize;
    let structure = points.len();
    let rest = total_target.saturating_sub(structure);
    let n_low = (rest as f64 * cfg.veg_low_fraction).round() as usize;
    let n_mid = (rest as f64 * cfg.veg_mid_fraction).round() as usize;
    let n_high = (rest as f64 * cfg.veg_high_fraction).round() as usize;
    generate_vegetation(cfg, &ground, (0.05, 3.0), n_low, &mut points, &mut rng);
    generate_vegetation(cfg, &ground, (3.0, 8.0), n_mid, &mut points, &mut rng);
    generate_vegetation(cfg, &ground, (8.0, 25.0), n_high, &mut points, &mut rng);

    let n_ground = rest.saturating_sub(n_low + n_mid + n_high);
    for _ in 0..n_ground {
        let x = rng.random_range(0.0..w);
        let y = rng.random_range(0.0..d);
        let elev = f64::from(ground.elevation_at(x, y).expect("inside extent"));
        push_point(
            &mut points,
            x,
            y,
            elev,
            ClassLabel::Ground,
            cfg.color_signal,
            &mut rng,
        );
    }

    // f32 rounding can push a coordinate drawn just under the extent onto
    // the boundary itself, outside the ground raster; nudge those back in.
    let (wf, df) = (w as f32, d as f32);
    for p in &mut points {
        if p.x >= wf {
            p.x = wf.next_down();
        }
        if p.y >= df {
            p.y = df.next_down();
        }
    }
    let cloud = PointCloud::new(points, HeightFrame::Has);
    Ok(GeneratedScene {
        cloud,
        ground,
        towers,
    })
}

/// Multi-scene corpus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    /// Per-scene template; its `seed` and `tower_count`/`tower_grid_side`
    /// fields are overridden per scene.
    pub scene: SceneConfig,
    pub n_scenes: usize,
    /// Target fraction of analysis windows containing a tower.
    pub prevalence: f64,
    /// Analysis window side used for prevalence accounting and grid
    /// avoidance.
    pub window_side: f64,
    /// Fraction of blocks held out for testing.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            scene: SceneConfig::default(),
            n_scenes: 30,
            prevalence: 0.05,
            window_side: 40.0,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

/// What [`generate_corpus`] wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSummary {
    /// `(block_id, point count, tower count)` per scene.
    pub blocks: Vec<(String, u64, usize)>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Generate `n_scenes` scenes under `out_dir`: binary tiles and ground
/// rasters in `blocks/`, plus `index.csv` and `split.csv`. Deterministic
/// per seed, byte for byte.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<CorpusSummary> {
    if cfg.n_scenes < 3 {
        return Err(Error::Config(format!(
            "a corpus needs at least 3 scenes, got {}",
            cfg.n_scenes
        )));
    }
    if !(cfg.prevalence > 0.0 && cfg.prevalence <= 1.0) {
        return Err(Error::Config(format!(
            "prevalence must lie in (0, 1], got {}",
            cfg.prevalence
        )));
    }
    let (w, d) = cfg.scene.extent;
    let windows_per_scene = (w / cfg.window_side).floor() * (d / cfg.window_side).floor();
    if windows_per_scene < 1.0 {
        return Err(Error::Config(format!(
            "extent {w}×{d} holds no {} m windows",
            cfg.window_side
        )));
    }
    let tower_count = ((cfg.prevalence * windows_per_scene).round() as usize).max(1);

    let blocks_dir = out_dir.join("blocks");
    std::fs::create_dir_all(&blocks_dir).map_err(|e| Error::io(&blocks_dir, e))?;

    let mut seed_rng = rng::stream(cfg.seed, &[rng::tag("corpus")]);
    let mut blocks = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes {
        let mut scene_cfg = cfg.scene.clone();
        scene_cfg.seed = rand::RngCore::next_u64(&mut seed_rng);
        scene_cfg.tower_count = tower_count;
        scene_cfg.tower_grid_side = Some(cfg.window_side);
        let scene = generate_scene(&scene_cfg)?;

        let block_id = format!("scene_{i:04}");
        let tile_path = blocks_dir.join(format!("{block_id}.pct1"));
        let ground_path = blocks_dir.join(format!("{block_id}.ground.csv"));
        cloud_io::write_tile(&scene.cloud, &tile_path, cloud_io::TileFormat::Binary)?;
        cloud_io::write_ground(&scene.ground, &ground_path)?;
        blocks.push((block_id, scene.cloud.points.len() as u64, scene.towers.len()));
    }

    let mut index = String::from("block_id,n_points,n_towers\n");
    for (id, n, t) in &blocks {
        index.push_str(&format!("{id},{n},{t}\n"));
    }
    let index_path = out_dir.join("index.csv");
    std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;

    let all: std::collections::BTreeSet<String> =
        blocks.iter().map(|(id, _, _)| id.clone()).collect();
    let with_towers: std::collections::BTreeSet<String> = blocks
        .iter()
        .filter(|(_, _, t)| *t > 0)
        .map(|(id, _, _)| id.clone())
        .collect();
    let split = split_blocks_train_test(&all, &with_towers, cfg.holdout_fraction, cfg.seed)?;

    let mut split_csv = String::from("block_id,role\n");
    for id in &split.train {
        split_csv.push_str(&format!("{id},train\n"));
    }
    for id in &split.test {
        split_csv.push_str(&format!("{id},test\n"));
    }
    let split_path = out_dir.join("split.csv");
    std::fs::write(&split_path, split_csv).map_err(|e| Error::io(&split_path, e))?;

    Ok(CorpusSummary {
        blocks,
        train: split.train.into_iter().collect(),
        test: split.test.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess;

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            extent: (160.0, 160.0),
            point_density: 2.0,
            tower_count: 2,
            tower_points_range: (60, 400),
            seed: 41,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn zero_towers_means_no_structure_labels() {
        let cfg = SceneConfig {
            tower_count: 0,
            ..small_cfg()
        };
        let scene = generate_scene(&cfg).unwrap();
        let counts = scene.cloud.class_counts();
        assert_eq!(counts[ClassLabel::Tower.to_u8() as usize], 0);
        assert_eq!(counts[ClassLabel::PowerLine.to_u8() as usize], 0);
        assert!(scene.towers.is_empty());
    }

    #[test]
    fn towers_respect_height_and_point_floors() {
        let scene = generate_scene(&small_cfg()).unwrap();
        assert_eq!(scene.towers.len(), 2);
        for tower in &scene.towers {
            assert!((10.0..=50.0).contains(&tower.height), "{}", tower.height);
            assert!(tower.n_points >= 20);
        }
        let counts = scene.cloud.class_counts();
        let expected: u64 = scene.towers.iter().map(|t| t.n_points).sum();
        assert_eq!(counts[ClassLabel::Tower.to_u8() as usize], expected);
    }

    #[test]
    fn density_lands_within_twenty_percent_of_target() {
        let cfg = small_cfg();
        let scene = generate_scene(&cfg).unwrap();
        let area = cfg.extent.0 * cfg.extent.1;
        let density = scene.cloud.points.len() as f64 / area;
        assert!(
            (density - cfg.point_density).abs() / cfg.point_density < 0.2,
            "density {density} vs target {}",
            cfg.point_density
        );
    }

    #[test]
    fn tower_points_stay_inside_their_bounding_cylinders() {
        let scene = generate_scene(&small_cfg()).unwrap();
        for p in &scene.cloud.points {
            if p.label != ClassLabel::Tower {
                continue;
            }
            let inside = scene.towers.iter().any(|t| {
                let dx = f64::from(p.x) - t.center_x;
                let dy = f64::from(p.y) - t.center_y;
                let hag = f64::from(p.z) - t.base_elevation;
                (dx * dx + dy * dy).sqrt() <= t.radius && (0.0..=t.height + 0.5).contains(&hag)
            });
            assert!(inside, "tower point ({}, {}, {}) outside every cylinder", p.x, p.y, p.z);
        }
    }

    #[test]
    fn default_strata_put_at_least_forty_percent_below_eight_meters() {
        let scene = generate_scene(&small_cfg()).unwrap();
        let ground = &scene.ground;
        let below: usize = scene
            .cloud
            .points
            .iter()
            .filter(|p| {
                let elev = ground
                    .elevation_at(f64::from(p.x), f64::from(p.y))
                    .unwrap_or(0.0);
                f64::from(p.z) - f64::from(elev) < 8.0
            })
            .count();
        let fraction = below as f64 / scene.cloud.points.len() as f64;
        assert!(fraction >= 0.4, "only {fraction:.2} below 8 m");
    }

    #[test]
    fn scenes_are_deterministic_per_seed() {
        let a = generate_scene(&small_cfg()).unwrap();
        let b = generate_scene(&small_cfg()).unwrap();
        assert_eq!(a.cloud.points, b.cloud.points);
        assert_eq!(a.ground, b.ground);
        assert_eq!(a.towers, b.towers);

        let other = generate_scene(&SceneConfig {
            seed: 42,
            ..small_cfg()
        })
        .unwrap();
        assert_ne!(a.cloud.points, other.cloud.points);
    }

    #[test]
    fn grid_avoidance_keeps_each_tower_in_one_window() {
        let cfg = SceneConfig {
            tower_grid_side: Some(40.0),
            tower_count: 3,
            extent: (200.0, 200.0),
            point_density: 1.0,
            seed: 7,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        for t in &scene.towers {
            for v in [t.center_x, t.center_y] {
                let r = v.rem_euclid(40.0);
                assert!(r >= GRID_MARGIN && 40.0 - r >= GRID_MARGIN, "{v}");
            }
            // Footprint entirely inside the window that holds the center.
            assert!(t.radius <= GRID_MARGIN);
        }
    }

    #[test]
    fn infeasible_placement_is_an_error() {
        let cfg = SceneConfig {
            extent: (60.0, 60.0),
            tower_count: 4,
            ..small_cfg()
        };
        let err = generate_scene(&cfg).unwrap_err();
        assert!(err.to_string().contains("place tower"), "{err}");
    }

    #[test]
    fn corpus_regeneration_is_byte_identical() {
        let cfg = CorpusConfig {
            scene: SceneConfig {
                extent: (120.0, 120.0),
                point_density: 1.0,
                tower_points_range: (40, 200),
                ..SceneConfig::default()
            },
            n_scenes: 3,
            prevalence: 0.2,
            window_side: 40.0,
            holdout_fraction: 0.34,
            seed: 9,
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let sum_a = generate_corpus(&cfg, dir_a.path()).unwrap();
        let sum_b = generate_corpus(&cfg, dir_b.path()).unwrap();
        assert_eq!(sum_a, sum_b);
        assert_eq!(sum_a.blocks.len(), 3);
        assert!(!sum_a.train.is_empty() && !sum_a.test.is_empty());

        for (id, _, _) in &sum_a.blocks {
            for suffix in [".pct1", ".ground.csv"] {
                let a = std::fs::read(dir_a.path().join("blocks").join(format!("{id}{suffix}")))
                    .unwrap();
                let b = std::fs::read(dir_b.path().join("blocks").join(format!("{id}{suffix}")))
                    .unwrap();
                assert_eq!(a, b, "{id}{suffix} differs between generations");
            }
        }
        for name in ["index.csv", "split.csv"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn prevalence_knob_controls_the_positive_window_rate() {
        let cfg = CorpusConfig {
            scene: SceneConfig {
                extent: (400.0, 400.0),
                point_density: 0.8,
                tower_points_range: (60, 300),
                ..SceneConfig::default()
            },
            n_scenes: 3,
            prevalence: 0.01,
            window_side: 40.0,
            holdout_fraction: 0.34,
            seed: 5,
        };
        let dir = tempfile::tempdir().unwrap();
        let summary = generate_corpus(&cfg, dir.path()).unwrap();

        let mut positive = 0usize;
        let mut total = 0usize;
        for (id, _, _) in &summary.blocks {
            let cloud = cloud_io::read_tile(
                &dir.path().join("blocks").join(format!("{id}.pct1")),
                cloud_io::TileFormat::Binary,
            )
            .unwrap();
            let ground =
                cloud_io::read_ground(&dir.path().join("blocks").join(format!("{id}.ground.csv")))
                    .unwrap();
            let hag = preprocess::compute_hag(&cloud, &ground).unwrap();
            let active = preprocess::filter_points(&hag, preprocess::DEFAULT_MAX_HEIGHT).unwrap();
            let windows = preprocess::tile_sliding(&active, id, 40.0, 40.0).unwrap();
            positive += windows.iter().filter(|w| w.contains_target).count();
            total += windows.len();
        }
        let rate = positive as f64 / total as f64;
        assert!(
            (0.005..=0.02).contains(&rate),
            "positive window rate {rate} outside [0.5%, 2%]"
        );
    }
}
