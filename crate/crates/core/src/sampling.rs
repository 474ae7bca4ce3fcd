//! Fixed-size window sampling.
//!
//! Networks consume a fixed number of points per window, but raw windows are
//! anywhere from a handful to hundreds of thousands of returns. The
//! height-constrained sampler removes low points first — vegetation and
//! near-ground clutter dominate there, while towers and conductors live up
//! high — through three strata: below `low_threshold` (3 m), below
//! `mid_threshold` (8 m), then everything. A plain uniform sampler is kept
//! as the ablation baseline. Windows short of points are padded by
//! duplicating random points.
//!
//! Sampling is deterministic per `(seed, window identity)`: the random
//! stream is derived from the window's block id and geometry, so re-running
//! a pipeline reproduces every sampled set bit-for-bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::Window;
use crate::error::{Error, Result};
use crate::rng;

/// Default height (m) under which points are removed first.
pub const DEFAULT_LOW_THRESHOLD: f32 = 3.0;
/// Default height (m) of the second removal stratum.
pub const DEFAULT_MID_THRESHOLD: f32 = 8.0;
/// Default number of points fed to the networks per window.
pub const DEFAULT_N_TARGET: usize = 2048;

/// Point-selection strategy for a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Height-constrained removal: low strata go first.
    Constrained,
    /// Uniform removal over all points (ablation baseline).
    Random,
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerMode::Constrained => "constrained",
            SamplerMode::Random => "random",
        })
    }
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<SamplerMode> {
        match s {
            "constrained" => Ok(SamplerMode::Constrained),
            "random" => Ok(SamplerMode::Random),
            other => Err(Error::Config(format!(
                "unknown sampler mode {other:?} (expected constrained|random)"
            ))),
        }
    }
}

/// Sampler parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Exact number of points per sampled window.
    pub n_target: usize,
    /// First removal stratum: points with `z < low_threshold`.
    pub low_threshold: f32,
    /// Second removal stratum: points with `z < mid_threshold`.
    pub mid_threshold: f32,
    pub mode: SamplerMode,
    /// Base seed; combined with the window identity per call.
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_target: DEFAULT_N_TARGET,
            low_threshold: DEFAULT_LOW_THRESHOLD,
            mid_threshold: DEFAULT_MID_THRESHOLD,
            mode: SamplerMode::Constrained,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_target == 0 {
            return Err(Error::Config("n_target must be at least 1".into()));
        }
        if !(self.low_threshold.is_finite()
            && self.mid_threshold.is_finite()
            && self.low_threshold > 0.0
            && self.mid_threshold > self.low_threshold)
        {
            return Err(Error::Config(format!(
                "height strata must satisfy 0 < low < mid; got low {}, mid {}",
                self.low_threshold, self.mid_threshold
            )));
        }
        Ok(())
    }
}

fn window_stream(cfg: &SamplerConfig, window: &Window) -> ChaCha8Rng {
    rng::stream(cfg.seed, &[rng::tag("sampler"), window.stream_key()])
}

/// Mark `remove` members of `stratum` dead, chosen uniformly without
/// replacement. `stratum` lists indices into `alive`.
fn kill_uniform(alive: &mut [bool], stratum: &mut Vec<usize>, remove: usize, r: &mut ChaCha8Rng) {
    debug_assert!(remove <= stratum.len());
    // Partial Fisher–Yates: the first `remove` slots are the victims.
    for i in 0..remove {
        let j = r.random_range(i..stratum.len());
        stratum.swap(i, j);
        alive[stratum[i]] = false;
    }
}

/// Pad `points` up to `n_target` by appending uniformly drawn duplicates.
fn pad_with_duplicates(
    window: &Window,
    n_target: usize,
    r: &mut ChaCha8Rng,
) -> Vec<crate::cloud::PointRecord> {
    let mut points = window.points.clone();
    while points.len() < n_target {
        let pick = r.random_range(0..window.points.len());
        points.push(window.points[pick]);
    }
    points
}

/// Sample a window down (or duplicate up) to exactly `cfg.n_target` points
/// using the configured strategy.
pub fn sample_window(window: &Window, cfg: &SamplerConfig) -> Result<Window> {
    match cfg.mode {
        SamplerMode::Constrained => constrained_sample(window, cfg),
        SamplerMode::Random => random_sample(window, cfg),
    }
}

/// Height-constrained sampling.
///
/// When the window holds more than `n_target` points, removal proceeds in
/// three stages, each drawing uniformly without replacement until the target
/// is met or the stage's stratum is exhausted: (1) points below
/// `low_threshold`, (2) points below `mid_threshold`, (3) all remaining
/// points. Survivors keep their original order. Consequently a point at or
/// above `low_threshold` is only ever removed once every lower point is
/// gone — tall structure is preserved as long as it fits the budget.
///
/// Windows with fewer than `n_target` points are padded by duplication;
/// windows with exactly `n_target` pass through unchanged.
pub fn constrained_sample(window: &Window, cfg: &SamplerConfig) -> Result<Window> {
    cfg.validate()?;
    if window.is_empty() {
        return Err(Error::InvalidData("cannot sample an empty window".into()));
    }
    let n = window.len();
    let mut r = window_stream(cfg, window);

    let points = if n > cfg.n_target {
        let mut alive = vec![true; n];
        let mut budget = n - cfg.n_target;
        // Stage strata are nested; each stage only sees still-alive points
        // below its threshold, which excludes whatever earlier stages took.
        for threshold in [Some(cfg.low_threshold), Some(cfg.mid_threshold), None] {
            if budget == 0 {
                break;
            }
            let mut stratum: Vec<usize> = (0..n)
                .filter(|&i| alive[i] && threshold.is_none_or(|t| window.points[i].z < t))
                .collect();
            let take = budget.min(stratum.len());
            kill_uniform(&mut alive, &mut stratum, take, &mut r);
            budget -= take;
        }
        debug_assert_eq!(budget, 0);
        (0..n)
            .filter(|&i| alive[i])
            .map(|i| window.points[i])
            .collect()
    } else if n < cfg.n_target {
        pad_with_duplicates(window, cfg.n_target, &mut r)
    } else {
        window.points.clone()
    };

    Window::new(
        window.center_x,
        window.center_y,
        window.side,
        points,
        window.source_block_id.clone(),
    )
}

/// Uniform sampling baseline: removal ignores height entirely.
pub fn random_sample(window: &Window, cfg: &SamplerConfig) -> Result<Window> {
    cfg.validate()?;
    if window.is_empty() {
        return Err(Error::InvalidData("cannot sample an empty window".into()));
    }
    let n = window.len();
    let mut r = window_stream(cfg, window);

    let points = if n > cfg.n_target {
        let mut alive = vec![true; n];
        let mut stratum: Vec<usize> = (0..n).collect();
        kill_uniform(&mut alive, &mut stratum, n - cfg.n_target, &mut r);
        (0..n)
            .filter(|&i| alive[i])
            .map(|i| window.points[i])
            .collect()
    } else if n < cfg.n_target {
        pad_with_duplicates(window, cfg.n_target, &mut r)
    } else {
        window.points.clone()
    };

    Window::new(
        window.center_x,
        window.center_y,
        window.side,
        points,
        window.source_block_id.clone(),
    )
}

/// Rigidly shift a window's points by one random planar offset.
///
/// A single `(dx, dy)` with both components uniform in
/// `[-max_shift, max_shift]` is applied to every point; the footprint stays
/// put and points pushed beyond it are dropped. Used to augment positive
/// training windows so towers appear off-centre. The result can be empty if
/// every point leaves the footprint.
pub fn augment_xy_jitter(window: &Window, max_shift: f64, seed: u64) -> Result<Window> {
    if !(max_shift.is_finite() && max_shift >= 0.0) {
        return Err(Error::Config(format!(
            "max_shift must be non-negative, got {max_shift}"
        )));
    }
    let mut r = rng::stream(seed, &[rng::tag("jitter"), window.stream_key()]);
    let dx = r.random_range(-max_shift..=max_shift);
    let dy = r.random_range(-max_shift..=max_shift);

    let half = window.side / 2.0;
    let shifted: Vec<crate::cloud::PointRecord> = window
        .points
        .iter()
        .filter_map(|p| {
            let mut q = *p;
            q.x = (f64::from(p.x) + dx) as f32;
            q.y = (f64::from(p.y) + dy) as f32;
            let inside = (f64::from(q.x) - window.center_x).abs() <= half
                && (f64::from(q.y) - window.center_y).abs() <= half;
            inside.then_some(q)
        })
        .collect();

    Window::new(
        window.center_x,
        window.center_y,
        window.side,
        shifted,
        window.source_block_id.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{ClassLabel, PointRecord};

    fn pt(x: f32, z: f32) -> PointRecord {
        PointRecord {
            x,
            y: 0.0,
            z,
            intensity: 0.5,
            red: 0.2,
            green: 0.3,
            blue: 0.1,
            nir: 0.4,
            label: if z >= 8.0 { ClassLabel::Tower } else { ClassLabel::Background },
        }
    }

    /// 10 low (z = 1), 5 mid (z = 5), 5 high (z = 12) points.
    fn strata_window() -> Window {
        let mut points = Vec::new();
        for i in 0..10 {
            points.push(pt(i as f32, 1.0));
        }
        for i in 0..5 {
            points.push(pt(10.0 + i as f32, 5.0));
        }
        for i in 0..5 {
            points.push(pt(15.0 + i as f32, 12.0));
        }
        Window::new(9.5, 0.0, 40.0, points, "blk").unwrap()
    }

    fn cfg(n_target: usize, mode: SamplerMode, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_target,
            mode,
            seed,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn output_size_is_exact_in_all_regimes() {
        let w = strata_window();
        for n_target in [1, 3, 19, 20, 21, 64] {
            for mode in [SamplerMode::Constrained, SamplerMode::Random] {
                let s = sample_window(&w, &cfg(n_target, mode, 7)).unwrap();
                assert_eq!(s.len(), n_target, "mode {mode}, target {n_target}");
            }
        }
    }

    #[test]
    fn low_stratum_is_consumed_before_any_higher_point() {
        let w = strata_window();
        // Budget 10 removals == exactly the low stratum.
        let s = constrained_sample(&w, &cfg(10, SamplerMode::Constrained, 3)).unwrap();
        let zs: Vec<f32> = s.points.iter().map(|p| p.z).collect();
        assert_eq!(zs, vec![5.0; 5].iter().chain(&[12.0; 5]).copied().collect::<Vec<_>>());
    }

    #[test]
    fn partial_removal_stays_inside_the_low_stratum() {
        let w = strata_window();
        // Budget 8 < 10 low points: mid and high must be untouched.
        let s = constrained_sample(&w, &cfg(12, SamplerMode::Constrained, 3)).unwrap();
        let low = s.points.iter().filter(|p| p.z < 3.0).count();
        let mid = s.points.iter().filter(|p| (3.0..8.0).contains(&p.z)).count();
        let high = s.points.iter().filter(|p| p.z >= 8.0).count();
        assert_eq!((low, mid, high), (2, 5, 5));
    }

    #[test]
    fn deep_budgets_cascade_through_the_strata() {
        let w = strata_window();
        // Budget 17: all 10 low, all 5 mid, then 2 of the 5 high points.
        let s = constrained_sample(&w, &cfg(3, SamplerMode::Constrained, 3)).unwrap();
        assert!(s.points.iter().all(|p| p.z == 12.0));
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn survivors_keep_their_original_order() {
        let w = strata_window();
        let s = constrained_sample(&w, &cfg(12, SamplerMode::Constrained, 9)).unwrap();
        let xs: Vec<f32> = s.points.iter().map(|p| p.x).collect();
        let mut sorted = xs.clone();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(xs, sorted, "x was constructed increasing, order must survive");
    }

    #[test]
    fn upsampling_appends_duplicates_after_the_originals() {
        let w = Window::new(
            1.5,
            0.0,
            10.0,
            vec![pt(0.0, 1.0), pt(1.0, 2.0), pt(2.0, 3.0), pt(3.0, 4.0)],
            "blk",
        )
        .unwrap();
        let s = sample_window(&w, &cfg(9, SamplerMode::Constrained, 5)).unwrap();
        assert_eq!(s.len(), 9);
        // Originals first, in order.
        assert_eq!(&s.points[..4], &w.points[..]);
        // Every appended point is a copy of an original.
        for extra in &s.points[4..] {
            assert!(w.points.contains(extra));
        }
    }

    #[test]
    fn equal_size_windows_pass_through_unchanged() {
        let w = strata_window();
        let s = sample_window(&w, &cfg(20, SamplerMode::Constrained, 11)).unwrap();
        assert_eq!(s.points, w.points);
    }

    #[test]
    fn sampling_is_deterministic_per_seed_and_window() {
        let w = strata_window();
        for mode in [SamplerMode::Constrained, SamplerMode::Random] {
            let a = sample_window(&w, &cfg(7, mode, 42)).unwrap();
            let b = sample_window(&w, &cfg(7, mode, 42)).unwrap();
            assert_eq!(a.points, b.points);
            let c = sample_window(&w, &cfg(7, mode, 43)).unwrap();
            assert_ne!(a.points, c.points, "different seed should reshuffle {mode}");
        }
    }

    #[test]
    fn random_mode_drops_high_points_that_constrained_protects() {
        let w = strata_window();
        let mut constrained_high = 0usize;
        let mut random_high = 0usize;
        for seed in 0..50 {
            let c = constrained_sample(&w, &cfg(10, SamplerMode::Constrained, seed)).unwrap();
            let r = random_sample(&w, &cfg(10, SamplerMode::Random, seed)).unwrap();
            constrained_high += c.points.iter().filter(|p| p.z >= 8.0).count();
            random_high += r.points.iter().filter(|p| p.z >= 8.0).count();
        }
        // Constrained always keeps all 5 high points (budget fits the low
        // stratum); uniform removal loses half of them in expectation.
        assert_eq!(constrained_high, 5 * 50);
        assert!(random_high < 5 * 50, "uniform sampling kept every high point across 50 seeds");
    }

    #[test]
    fn empty_windows_and_zero_targets_are_rejected() {
        let empty = Window::new(0.0, 0.0, 10.0, vec![], "b").unwrap();
        assert!(sample_window(&empty, &cfg(4, SamplerMode::Constrained, 0)).is_err());
        let w = strata_window();
        assert!(sample_window(&w, &cfg(0, SamplerMode::Constrained, 0)).is_err());
        let bad = SamplerConfig {
            low_threshold: 9.0,
            mid_threshold: 8.0,
            ..SamplerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn jitter_is_rigid_and_drops_escapees() {
        let w = Window::new(
            0.0,
            0.0,
            20.0,
            vec![pt(-9.0, 5.0), pt(0.0, 5.0), pt(9.0, 5.0)],
            "blk",
        )
        .unwrap();
        let j = augment_xy_jitter(&w, 5.0, 1234).unwrap();
        assert_eq!((j.center_x, j.center_y, j.side), (0.0, 0.0, 20.0));
        assert!(!j.is_empty());
        // Rigid: pairwise x-gaps of surviving points are preserved (the
        // construction spaced points 9 apart).
        if j.len() >= 2 {
            let dx = f64::from(j.points[1].x) - f64::from(j.points[0].x);
            assert!((dx - 9.0).abs() < 1e-4, "gap {dx}");
        }
        // The shift itself stays within its band.
        let shift = f64::from(j.points[0].x) - f64::from(
            w.points[(3 - j.len())..][0].x,
        );
        assert!(shift.abs() <= 5.0 + 1e-9);
        // Determinism.
        let j2 = augment_xy_jitter(&w, 5.0, 1234).unwrap();
        assert_eq!(j.points, j2.points);
    }

    #[test]
    fn zero_jitter_is_identity() {
        let w = strata_window();
        let j = augment_xy_jitter(&w, 0.0, 77).unwrap();
        assert_eq!(j.points, w.points);
    }
}
