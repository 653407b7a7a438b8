//! Time grids for the sampler.
//!
//! * uniform steps;
//! * an exponentially decaying grid anchored at `t = ½`, with steps
//!   proportional to `min{t, 1 − t}` (matched to `γ² = a t(1 − t)`);
//! * an asymmetric grid with `h_k = h_A t_{k+1}` below ½ and
//!   `h_k = h_B (1 − t_k)^{3/2}` above (matched to `γ² = (1 − t)² t`).
//!
//! The geometric grids are generated from ½ outward and the outermost
//! points are clamped to the requested `(t0, tN)`.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a grid was built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridLabel {
    Uniform,
    ExpDecay { h: f64 },
    Asymmetric { h_a: f64, h_b: f64 },
}

impl fmt::Display for GridLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridLabel::Uniform => write!(f, "uniform"),
            GridLabel::ExpDecay { h } => write!(f, "exp_decay(h={h})"),
            GridLabel::Asymmetric { h_a, h_b } => write!(f, "asymmetric(hA={h_a},hB={h_b})"),
        }
    }
}

/// Strictly increasing time points inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    label: GridLabel,
}

impl TimeGrid {
    /// Validates and wraps explicit points.
    pub fn new(points: Vec<f64>, label: GridLabel) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config("a grid needs at least two points".into()));
        }
        if points.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("grid points must lie in (0, 1)".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("grid points must be strictly increasing".into()));
        }
        Ok(Self { points, label })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn label(&self) -> GridLabel {
        self.label
    }

    /// Number of steps `N`.
    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn t0(&self) -> f64 {
        self.points[0]
    }

    pub fn tn(&self) -> f64 {
        *self.points.last().unwrap()
    }

    /// Step sizes `h_k = t_{k+1} − t_k`.
    pub fn steps(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Writes `k,t_k,h_k` rows; `h_N` is left empty.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "t_k", "h_k"])?;
        let steps = self.steps();
        for (k, t) in self.points.iter().enumerate() {
            let h = steps.get(k).map(|h| format!("{h:e}")).unwrap_or_default();
            w.write_record([k.to_string(), format!("{t:e}"), h])?;
        }
        w.flush().map_err(|e| Error::io("<grid csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(BufWriter::new(file))
    }
}

fn check_window(t0: f64, tn: f64) -> Result<()> {
    if !(0.0 < t0 && t0 < tn && tn < 1.0) {
        return Err(Error::Config(format!("need 0 < t0 < tN < 1, got t0 = {t0}, tN = {tn}")));
    }
    Ok(())
}

fn check_midpoint_window(t0: f64, tn: f64) -> Result<()> {
    check_window(t0, tn)?;
    if !(t0 < 0.5 && 0.5 < tn) {
        return Err(Error::Config(format!("grid anchored at 1/2 needs t0 < 1/2 < tN, got ({t0}, {tn})")));
    }
    Ok(())
}

/// `n + 1` equally spaced points from `t0` to `tn`.
pub fn uniform_grid(t0: f64, tn: f64, n: usize) -> Result<TimeGrid> {
    check_window(t0, tn)?;
    if n == 0 {
        return Err(Error::Config("uniform grid needs at least one step".into()));
    }
    let h = (tn - t0) / n as f64;
    let mut points: Vec<f64> = (0..=n).map(|k| t0 + k as f64 * h).collect();
    points[n] = tn;
    TimeGrid::new(points, GridLabel::Uniform)
}

/// Smallest `m ≥ 1` with `½ (1 − h)^m ≤ target`.
fn geometric_count(h: f64, target: f64) -> usize {
    let ratio = 1.0 - h;
    let estimate = ((target / 0.5).ln() / ratio.ln()).ceil().max(1.0) as usize;
    let mut m = estimate.saturating_sub(1).max(1);
    while 0.5 * ratio.powi(m as i32) > target {
        m += 1;
    }
    m
}

/// Exponentially decaying grid with parameter `h ∈ (0, 1)`.
///
/// Ideal points are `t_k = ½(1 − h)^{M−k}` for `k < M` and
/// `t_k = 1 − ½(1 − h)^{k−M}` for `k ≥ M`, with `M` the smallest integer such
/// that `½(1 − h)^M ≤ t0`; the end points are then clamped to `t0` and `tN`.
pub fn exp_decay_grid(t0: f64, tn: f64, h: f64) -> Result<TimeGrid> {
    check_midpoint_window(t0, tn)?;
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::Config(format!("exp-decay parameter h must lie in (0, 1), got {h}")));
    }
    let ratio = 1.0 - h;
    let lower = geometric_count(h, t0);
    let upper = geometric_count(h, 1.0 - tn);
    let mut points = Vec::with_capacity(lower + upper + 1);
    for k in 0..lower {
        points.push(0.5 * ratio.powi((lower - k) as i32));
    }
    points.push(0.5);
    for j in 1..=upper {
        points.push(1.0 - 0.5 * ratio.powi(j as i32));
    }
    points[0] = t0;
    *points.last_mut().unwrap() = tn;
    TimeGrid::new(points, GridLabel::ExpDecay { h })
}

/// Asymmetric grid: `t_k = (1 − h_A) t_{k+1}` below ½, built backward, and
/// `t_{k+1} = t_k + h_B (1 − t_k)^{3/2}` from ½ upward; ends clamped.
pub fn asymmetric_grid(t0: f64, tn: f64, h_a: f64, h_b: f64) -> Result<TimeGrid> {
    check_midpoint_window(t0, tn)?;
    if !(h_a > 0.0 && h_a <= 0.5) {
        return Err(Error::Config(format!("asymmetric grid needs hA in (0, 0.5], got {h_a}")));
    }
    if !(h_b > 0.0 && h_b < 1.0) {
        return Err(Error::Config(format!("asymmetric grid needs hB in (0, 1), got {h_b}")));
    }
    let lower = geometric_count(h_a, t0);
    let mut points: Vec<f64> = (0..lower).map(|k| 0.5 * (1.0 - h_a).powi((lower - k) as i32)).collect();
    points.push(0.5);
    let mut t = 0.5;
    while t < tn {
        t += h_b * (1.0 - t).powf(1.5);
        points.push(t);
    }
    points[0] = t0;
    *points.last_mut().unwrap() = tn;
    TimeGrid::new(points, GridLabel::Asymmetric { h_a, h_b })
}

fn lower_count_asymmetric(t0: f64, h_a: f64) -> usize {
    geometric_count(h_a, t0)
}

fn upper_count_asymmetric(tn: f64, h_b: f64) -> usize {
    let mut t = 0.5;
    let mut n = 0;
    while t < tn {
        t += h_b * (1.0 - t).powf(1.5);
        n += 1;
    }
    n
}

/// Largest parameter in `(0, hi]` whose non-increasing step count is at
/// least `target`, to bisection precision.
fn count_boundary(hi: f64, target: usize, count: &impl Fn(f64) -> usize) -> Option<f64> {
    if count(hi) >= target {
        return Some(hi);
    }
    let mut hi = hi;
    let mut lo = 0.5 * hi;
    while count(lo) < target {
        hi = lo;
        lo *= 0.5;
        if lo < 1e-12 {
            return None;
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// A parameter below `hi` whose step count equals `target`, taken from the
/// middle of the interval of such parameters so that no point sits at a
/// rounding distance from a clamped end. If the count jumps over `target`,
/// returns the parameter giving the smallest count above it.
fn solve_count(hi: f64, target: usize, count: impl Fn(f64) -> usize) -> Option<f64> {
    let upper = count_boundary(hi, target, &count)?;
    if count(upper) != target {
        return Some(upper);
    }
    let Some(lower) = count_boundary(upper, target + 1, &count) else {
        return Some(upper);
    };
    let mid = 0.5 * (lower + upper);
    Some(if count(mid) == target { mid } else { upper })
}

/// Exponentially decaying grid whose step count is `n`, choosing `h` by
/// bisection. When no `h` yields exactly `n` (possible only when both ends
/// gain a step at the same `h`), the nearest larger count is used.
pub fn exp_decay_grid_with_steps(t0: f64, tn: f64, n: usize) -> Result<TimeGrid> {
    check_midpoint_window(t0, tn)?;
    let count = |h: f64| geometric_count(h, t0) + geometric_count(h, 1.0 - tn);
    let coarsest = 1.0 - 1e-12;
    if count(coarsest) > n {
        return Err(Error::Config(format!(
            "exp-decay grid on ({t0}, {tn}) needs at least {} steps, asked for {n}",
            count(coarsest)
        )));
    }
    let h = solve_count(coarsest, n, count)
        .ok_or_else(|| Error::Config(format!("no exp-decay grid on ({t0}, {tn}) has {n} steps")))?;
    exp_decay_grid(t0, tn, h)
}

/// Asymmetric grid with `n` steps in total. The split between the two
/// segments is the one whose solved `h_A` and `h_B` are closest.
pub fn asymmetric_grid_with_steps(t0: f64, tn: f64, n: usize) -> Result<TimeGrid> {
    check_midpoint_window(t0, tn)?;
    let h_a_max = 0.5;
    let h_b_max = 1.0 - 1e-12;
    let min_lower = lower_count_asymmetric(t0, h_a_max);
    let min_upper = upper_count_asymmetric(tn, h_b_max);
    if n < min_lower + min_upper {
        return Err(Error::Config(format!(
            "asymmetric grid on ({t0}, {tn}) needs at least {} steps, asked for {n}",
            min_lower + min_upper
        )));
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for lower in min_lower..=n - min_upper {
        let upper = n - lower;
        let Some(h_a) = solve_count(h_a_max, lower, |h| lower_count_asymmetric(t0, h)) else {
            continue;
        };
        let Some(h_b) = solve_count(h_b_max, upper, |h| upper_count_asymmetric(tn, h)) else {
            continue;
        };
        if lower_count_asymmetric(t0, h_a) != lower || upper_count_asymmetric(tn, h_b) != upper {
            continue;
        }
        let gap = (h_a - h_b).abs();
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, h_a, h_b));
        }
    }
    let (_, h_a, h_b) =
        best.ok_or_else(|| Error::Config(format!("no asymmetric grid on ({t0}, {tn}) has {n} steps")))?;
    asymmetric_grid(t0, tn, h_a, h_b)
}

/// Schedule family, as named in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Uniform,
    ExpDecay,
    Asymmetric,
}

impl ScheduleKind {
    /// Grid of this family with `n` steps on `(t0, tn)`.
    pub fn grid_with_steps(self, t0: f64, tn: f64, n: usize) -> Result<TimeGrid> {
        match self {
            ScheduleKind::Uniform => uniform_grid(t0, tn, n),
            ScheduleKind::ExpDecay => exp_decay_grid_with_steps(t0, tn, n),
            ScheduleKind::Asymmetric => asymmetric_grid_with_steps(t0, tn, n),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Uniform => "uniform",
            ScheduleKind::ExpDecay => "exp_decay",
            ScheduleKind::Asymmetric => "asymmetric",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ScheduleKind::Uniform),
            "exp" | "exp_decay" | "exp-decay" => Ok(ScheduleKind::ExpDecay),
            "asymmetric" | "asym" => Ok(ScheduleKind::Asymmetric),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn uniform_examples() {
        let g = uniform_grid(0.1, 0.9, 4).unwrap();
        assert_close(g.points(), &[0.1, 0.3, 0.5, 0.7, 0.9], 1e-15);
        let g = uniform_grid(0.001, 0.999, 1).unwrap();
        assert_eq!(g.points(), &[0.001, 0.999]);
        assert!(uniform_grid(0.5, 0.4, 3).is_err());
        assert!(uniform_grid(0.1, 0.4, 0).is_err());
    }

    #[test]
    fn exp_decay_example() {
        let g = exp_decay_grid(0.125, 0.875, 0.5).unwrap();
        assert_eq!(g.points(), &[0.125, 0.25, 0.5, 0.75, 0.875]);
        assert_eq!(g.steps(), vec![0.125, 0.25, 0.25, 0.125]);
        assert_eq!(g.label(), GridLabel::ExpDecay { h: 0.5 });
    }

    #[test]
    fn exp_decay_contains_midpoint_and_respects_step_bound() {
        for h in [0.3, 0.1, 0.02] {
            let g = exp_decay_grid(0.001, 0.97, h).unwrap();
            assert!(g.points().contains(&0.5));
            let p = g.points();
            for (k, step) in g.steps().iter().enumerate() {
                let bound = h * p[k + 1].min(1.0 - p[k]);
                assert!(*step <= bound * (1.0 + 1e-12), "k={k}: {step} > {bound}");
            }
        }
        assert!(exp_decay_grid(0.001, 0.999, 1.0).is_err());
        assert!(exp_decay_grid(0.6, 0.999, 0.1).is_err());
    }

    #[test]
    fn asymmetric_recursions() {
        let g = asymmetric_grid(0.1, 0.9, 0.5, 0.1).unwrap();
        let p = g.points();
        let mid = p.iter().position(|t| *t == 0.5).unwrap();
        assert_close(&p[mid - 2..=mid], &[0.125, 0.25, 0.5], 0.0);
        assert!((p[mid + 1] - 0.5 - 0.1 * 0.5f64.powf(1.5)).abs() < 1e-15);
        assert!((0.1 * 0.5f64.powf(1.5) - 0.035355).abs() < 1e-6);
        assert!(asymmetric_grid(0.1, 0.9, 0.6, 0.1).is_err());
    }

    #[test]
    fn step_targeted_grids_hit_the_count() {
        for n in [10, 40, 160, 640] {
            let g = exp_decay_grid_with_steps(0.001, 0.999, n).unwrap();
            assert_eq!(g.n_steps(), n);
            assert_eq!((g.t0(), g.tn()), (0.001, 0.999));
        }
        for n in [13, 41] {
            assert_eq!(exp_decay_grid_with_steps(0.001, 0.97, n).unwrap().n_steps(), n);
        }
        for n in [10, 40, 160, 640] {
            let g = asymmetric_grid_with_steps(0.005, 0.9, n).unwrap();
            assert_eq!(g.n_steps(), n);
        }
        assert!(asymmetric_grid_with_steps(0.001, 0.97, 10).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        exp_decay_grid(0.125, 0.875, 0.5).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "k,t_k,h_k");
        assert_eq!(lines[1], "0,1.25e-1,1.25e-1");
        assert_eq!(lines[5], "4,8.75e-1,");
    }
}
