//! Time grids, waypoints, conditioning sets, realized trajectories, and the
//! synthetic processes that stand in for the data distribution.
//!
//! A `TimeGrid` holds the physical times `0 = t_0 < t_1 < ... < t_L` at which
//! the process is pinned to the data law. A `ConditioningSet` is the subset
//! of grid waypoints whose values are known in advance; `(0, x_0)` is always
//! a member. Synthetic processes provide exact joint sampling of the
//! waypoint values given a grid, plus (where used by oracles) the Gaussian
//! or Gaussian-mixture conditional of the next waypoint given the history.

use crate::kernels::GaussianMixtureNext;
use crate::rng::{purpose, Stream};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Default observation jitter for the non-Markov mixture process. Keeps the
/// waypoint law full-support instead of a point mass.
pub const DEFAULT_JITTER: f64 = 0.01;

/// Ascending physical times with `t_0 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Config("grid needs at least {0, t_l}".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::Config(format!("grid must start at 0, got {}", times[0])));
        }
        if !times.iter().all(|t| t.is_finite()) || !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("grid times must be finite and strictly increasing".into()));
        }
        Ok(TimeGrid { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Number of interior-plus-terminal waypoints L (grid has L + 1 points).
    pub fn segments(&self) -> usize {
        self.times.len() - 1
    }

    pub fn min_gap(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest grid time strictly greater than `t`.
    pub fn next_after(&self, t: f64) -> Option<f64> {
        self.times.iter().copied().find(|&tau| tau > t)
    }

    /// Largest grid time with `tau <= t`.
    pub fn prev_at_or_before(&self, t: f64) -> Option<f64> {
        self.times.iter().copied().rev().find(|&tau| tau <= t)
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&tau| tau == t)
    }
}

/// A (time, value) pair on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub time: f64,
    pub value: Vec<f64>,
}

/// The observed subset of waypoints. `(0, x_0)` is always present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningSet {
    observed: Vec<Waypoint>,
}

impl ConditioningSet {
    /// Build from waypoints; sorts by time and checks membership rules.
    pub fn new(grid: &TimeGrid, mut observed: Vec<Waypoint>) -> Result<Self> {
        observed.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
        if observed.is_empty() || observed[0].time != 0.0 {
            return Err(Error::Config("conditioning set must contain (0, x_0)".into()));
        }
        if observed.windows(2).any(|w| w[0].time == w[1].time) {
            return Err(Error::Config("conditioning times must be distinct".into()));
        }
        for w in &observed {
            if grid.index_of(w.time).is_none() {
                return Err(Error::Config(format!("conditioning time {} not on the grid", w.time)));
            }
        }
        Ok(ConditioningSet { observed })
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.observed
    }

    pub fn contains_time(&self, t: f64) -> bool {
        self.observed.iter().any(|w| w.time == t)
    }

    pub fn value_at(&self, t: f64) -> Option<&[f64]> {
        self.observed.iter().find(|w| w.time == t).map(|w| w.value.as_slice())
    }

    /// Most recent observed time at or before `t`.
    pub fn prev_observed(&self, t: f64) -> Option<&Waypoint> {
        self.observed.iter().rev().find(|w| w.time <= t)
    }

    /// Earliest observed constraint strictly after `t`, if any.
    pub fn next_constraint(&self, t: f64) -> Option<&Waypoint> {
        self.observed.iter().find(|w| w.time > t)
    }

    /// Insert a newly realized waypoint, keeping time order.
    pub fn absorb(&mut self, wp: Waypoint) {
        let pos = self.observed.partition_point(|w| w.time < wp.time);
        self.observed.insert(pos, wp);
    }
}

/// Segment lookup used by both training and sampling: the most recent
/// observed time, the next grid time, and the next future constraint.
pub fn locate_segment(
    grid: &TimeGrid,
    cond: &ConditioningSet,
    t: f64,
) -> Result<(f64, f64, Option<f64>)> {
    if !(0.0..grid.horizon()).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, {})", grid.horizon())));
    }
    let prev = cond
        .prev_observed(t)
        .ok_or_else(|| Error::Domain(format!("no observed waypoint at or before t = {t}")))?
        .time;
    let next_grid = grid
        .next_after(t)
        .ok_or_else(|| Error::Domain(format!("no grid time after t = {t}")))?;
    let next_constraint = cond.next_constraint(t).map(|w| w.time);
    Ok((prev, next_grid, next_constraint))
}

/// One realized trajectory: values at every grid time, plus an optional
/// dense discretization trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub grid: TimeGrid,
    pub waypoint_values: Vec<Vec<f64>>,
    pub trace: Option<Vec<(f64, Vec<f64>)>>,
    pub seed: u64,
}

impl PathSample {
    pub fn dim(&self) -> usize {
        self.waypoint_values[0].len()
    }
}

/// Write a batch of samples in the interchange CSV layout:
/// `sample_id,time,dim_0..dim_{d-1},is_waypoint,is_observed`.
pub fn write_samples_csv<W: Write>(
    out: &mut W,
    samples: &[PathSample],
    cond: &ConditioningSet,
    include_trace: bool,
) -> Result<()> {
    let dim = samples.first().map(|s| s.dim()).unwrap_or(0);
    write!(out, "sample_id,time")?;
    for d in 0..dim {
        write!(out, ",dim_{d}")?;
    }
    writeln!(out, ",is_waypoint,is_observed")?;
    for (id, s) in samples.iter().enumerate() {
        for (time, value) in s.grid.times().iter().zip(&s.waypoint_values) {
            write!(out, "{id},{time}")?;
            for v in value {
                write!(out, ",{v}")?;
            }
            let observed = cond.contains_time(*time) as u8;
            writeln!(out, ",1,{observed}")?;
        }
        if include_trace {
            if let Some(trace) = &s.trace {
                for (time, value) in trace {
                    write!(out, "{id},{time}")?;
                    for v in value {
                        write!(out, ",{v}")?;
                    }
                    writeln!(out, ",0,0")?;
                }
            }
        }
    }
    Ok(())
}

/// Parse the CSV layout written by [`write_samples_csv`]; trace rows are
/// folded back into each sample's trace.
pub fn read_samples_csv(text: &str) -> Result<Vec<PathSample>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty samples csv".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "sample_id" {
        return Err(Error::Config("unrecognized samples csv header".into()));
    }
    let dim = cols.len() - 4;
    let mut per_sample: Vec<(Vec<(f64, Vec<f64>)>, Vec<(f64, Vec<f64>)>)> = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Config(format!("bad csv row: {line}")));
        }
        let id: usize = fields[0].parse().map_err(|_| Error::Config(format!("bad sample id in {line}")))?;
        let time: f64 = fields[1].parse().map_err(|_| Error::Config(format!("bad time in {line}")))?;
        let value: Vec<f64> = fields[2..2 + dim]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::Config(format!("bad value in {line}"))))
            .collect::<Result<_>>()?;
        let is_waypoint = fields[2 + dim] == "1";
        while per_sample.len() <= id {
            per_sample.push((Vec::new(), Vec::new()));
        }
        if is_waypoint {
            per_sample[id].0.push((time, value));
        } else {
            per_sample[id].1.push((time, value));
        }
    }
    per_sample
        .into_iter()
        .enumerate()
        .map(|(id, (wps, trace))| {
            let grid = TimeGrid::new(wps.iter().map(|(t, _)| *t).collect())?;
            Ok(PathSample {
                grid,
                waypoint_values: wps.into_iter().map(|(_, v)| v).collect(),
                trace: if trace.is_empty() { None } else { Some(trace) },
                seed: id as u64,
            })
        })
        .collect()
}

/// Synthetic data processes playing the role of the data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticProcess {
    /// Discrete observations of a stationary-target OU process:
    /// `x_{t_{i+1}} = e^{-theta dt} x_{t_i} + N(0, s^2 (1 - e^{-2 theta dt}))`,
    /// coordinatewise, from a fixed `x0`. Exact joints exist on any grid.
    GaussianAr {
        mean_reversion: f64,
        stationary_std: f64,
        x0: Vec<f64>,
    },
    /// Equal mixture of two deterministic branches on a 4-point grid with
    /// N(0, jitter^2) observation noise: branch `b = +/-1` has waypoints
    /// `(0, b*0.5, -b*0.5, -b*0.5)`. Discretely Markov, yet no continuous
    /// Markov SDE matches its correlation pattern.
    MixtureNonMarkov { jitter: f64 },
    /// Standard Brownian motion started at `x0`, conditioned on
    /// `X(4/5) = -x0` and `X(1) = +x0`. Requires {0, 4/5, 1} on the grid.
    PinnedBrownian { x0: f64 },
}

impl SyntheticProcess {
    pub fn dim(&self) -> usize {
        match self {
            SyntheticProcess::GaussianAr { x0, .. } => x0.len(),
            _ => 1,
        }
    }

    /// The value the conditioning set pins at t = 0.
    pub fn initial_value(&self) -> Vec<f64> {
        match self {
            SyntheticProcess::GaussianAr { x0, .. } => x0.clone(),
            SyntheticProcess::MixtureNonMarkov { .. } => vec![0.0],
            SyntheticProcess::PinnedBrownian { x0 } => vec![*x0],
        }
    }

    /// Natural grid for processes that are only defined on one.
    pub fn natural_grid(&self) -> Option<TimeGrid> {
        match self {
            SyntheticProcess::MixtureNonMarkov { .. } => {
                Some(TimeGrid::new(vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap())
            }
            SyntheticProcess::PinnedBrownian { .. } => {
                Some(TimeGrid::new(vec![0.0, 0.8, 1.0]).unwrap())
            }
            SyntheticProcess::GaussianAr { .. } => None,
        }
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        match self {
            SyntheticProcess::GaussianAr { .. } => Ok(()),
            SyntheticProcess::MixtureNonMarkov { .. } => {
                if grid.times().len() == 4 {
                    Ok(())
                } else {
                    Err(Error::Config("mixture process needs a 4-point grid".into()))
                }
            }
            SyntheticProcess::PinnedBrownian { .. } => {
                for pin in [0.0, 0.8, 1.0] {
                    if grid.index_of(pin).is_none() {
                        return Err(Error::Config(format!(
                            "pinned Brownian process needs {pin} on the grid"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Branch values of the mixture process (before jitter), scaled to unit
    /// horizon position: index aligned with the 4-point grid.
    fn mixture_branch(b: f64) -> [f64; 4] {
        [0.0, 0.5 * b, -0.5 * b, -0.5 * b]
    }

    /// Draw one exact joint sample of all waypoint values on `grid`, using
    /// the caller's stream (training tuples draw data inline).
    pub fn sample_joint_with(&self, grid: &TimeGrid, rng: &mut Stream) -> Vec<Vec<f64>> {
        match self {
            SyntheticProcess::GaussianAr { mean_reversion, stationary_std, x0 } => {
                let mut values = Vec::with_capacity(grid.times().len());
                values.push(x0.clone());
                for w in grid.times().windows(2) {
                    let dt = w[1] - w[0];
                    let rho = (-mean_reversion * dt).exp();
                    let var = stationary_std * stationary_std * (1.0 - rho * rho);
                    let sd = var.max(0.0).sqrt();
                    let prev = values.last().unwrap();
                    let next: Vec<f64> = prev.iter().map(|&x| rho * x + sd * rng.normal()).collect();
                    values.push(next);
                }
                values
            }
            SyntheticProcess::MixtureNonMarkov { jitter } => {
                let b = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                Self::mixture_branch(b)
                    .iter()
                    .map(|&m| vec![m + jitter * rng.normal()])
                    .collect()
            }
            SyntheticProcess::PinnedBrownian { x0 } => {
                // Walk the grid left to right; each unpinned time is a
                // Brownian bridge draw between the current state and the next
                // pin, each pin is exact.
                let pins = [(0.8, -x0), (1.0, *x0)];
                let mut values = Vec::with_capacity(grid.times().len());
                values.push(vec![*x0]);
                for w in grid.times().windows(2) {
                    let (t_prev, t) = (w[0], w[1]);
                    let x_prev = values.last().unwrap()[0];
                    let (pin_t, pin_x) = pins
                        .iter()
                        .copied()
                        .find(|(pt, _)| *pt >= t)
                        .expect("grid checked to end at the final pin");
                    if pin_t == t {
                        values.push(vec![pin_x]);
                    } else {
                        let span = pin_t - t_prev;
                        let frac = (t - t_prev) / span;
                        let mean = x_prev + frac * (pin_x - x_prev);
                        let var = (t - t_prev) * (pin_t - t) / span;
                        values.push(vec![mean + var.sqrt() * rng.normal()]);
                    }
                }
                values
            }
        }
    }

    /// Conditional law of the waypoint at `grid[next_idx]` given the values
    /// at all earlier grid times, as a Gaussian mixture. This is the
    /// closed-form piece the oracle score needs.
    pub fn next_state_mixture(
        &self,
        grid: &TimeGrid,
        history: &[Vec<f64>],
        next_idx: usize,
    ) -> Result<GaussianMixtureNext> {
        if next_idx == 0 || next_idx >= grid.times().len() || history.len() < next_idx {
            return Err(Error::Domain(format!(
                "next_idx {next_idx} incompatible with history of {}",
                history.len()
            )));
        }
        match self {
            SyntheticProcess::GaussianAr { mean_reversion, stationary_std, .. } => {
                let dt = grid.times()[next_idx] - grid.times()[next_idx - 1];
                let rho = (-mean_reversion * dt).exp();
                let var = stationary_std * stationary_std * (1.0 - rho * rho);
                let mean: Vec<f64> = history[next_idx - 1].iter().map(|&x| rho * x).collect();
                GaussianMixtureNext::new(vec![1.0], vec![mean], var)
            }
            SyntheticProcess::MixtureNonMarkov { jitter } => {
                // Posterior over the branch given the jittered history.
                let var = jitter * jitter;
                let mut log_w = [0.0f64; 2];
                for (bi, b) in [1.0, -1.0].iter().enumerate() {
                    let branch = Self::mixture_branch(*b);
                    for (i, x) in history.iter().enumerate().take(next_idx) {
                        let d = x[0] - branch[i];
                        log_w[bi] -= d * d / (2.0 * var);
                    }
                }
                let m = log_w[0].max(log_w[1]);
                let w0 = (log_w[0] - m).exp();
                let w1 = (log_w[1] - m).exp();
                let z = w0 + w1;
                GaussianMixtureNext::new(
                    vec![w0 / z, w1 / z],
                    vec![
                        vec![Self::mixture_branch(1.0)[next_idx]],
                        vec![Self::mixture_branch(-1.0)[next_idx]],
                    ],
                    var,
                )
            }
            SyntheticProcess::PinnedBrownian { x0 } => {
                let t_prev = grid.times()[next_idx - 1];
                let t = grid.times()[next_idx];
                let x_prev = history[next_idx - 1][0];
                let pins = [(0.8, -x0), (1.0, *x0)];
                let (pin_t, pin_x) = pins.iter().copied().find(|(pt, _)| *pt >= t).unwrap();
                if pin_t == t {
                    GaussianMixtureNext::new(vec![1.0], vec![vec![pin_x]], 0.0)
                } else {
                    let span = pin_t - t_prev;
                    let mean = x_prev + (t - t_prev) / span * (pin_x - x_prev);
                    let var = (t - t_prev) * (pin_t - t) / span;
                    GaussianMixtureNext::new(vec![1.0], vec![vec![mean]], var)
                }
            }
        }
    }
}

/// Exact joint samples of the waypoint values for `n` trajectories. Each
/// trajectory draws from its own `(seed, index)` stream, so sharding over
/// workers cannot change the result.
pub fn sample_data_joint(
    proc: &SyntheticProcess,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<Vec<PathSample>> {
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    proc.check_grid(grid)?;
    Ok((0..n)
        .map(|i| {
            let mut rng = Stream::derive(seed, purpose::DATA, i as u64);
            PathSample {
                grid: grid.clone(),
                waypoint_values: proc.sample_joint_with(grid, &mut rng),
                trace: None,
                seed,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five_grid() -> TimeGrid {
        TimeGrid::new(vec![0.0, 0.25, 0.5, 0.75, 1.0]).unwrap()
    }

    fn cond(grid: &TimeGrid, times: &[f64]) -> ConditioningSet {
        let wps = times.iter().map(|&t| Waypoint { time: t, value: vec![0.0] }).collect();
        ConditioningSet::new(grid, wps).unwrap()
    }

    #[test]
    fn locate_segment_simple() {
        let grid = five_grid();
        let c = cond(&grid, &[0.0, 1.0]);
        assert_eq!(locate_segment(&grid, &c, 0.3).unwrap(), (0.0, 0.5, Some(1.0)));
    }

    #[test]
    fn locate_segment_mid_observed() {
        let grid = five_grid();
        let c = cond(&grid, &[0.0, 0.5, 1.0]);
        assert_eq!(locate_segment(&grid, &c, 0.6).unwrap(), (0.5, 0.75, Some(1.0)));
    }

    #[test]
    fn locate_segment_on_unobserved_grid_point() {
        let grid = five_grid();
        let c = cond(&grid, &[0.0, 1.0]);
        assert_eq!(locate_segment(&grid, &c, 0.25).unwrap(), (0.0, 0.5, Some(1.0)));
    }

    #[test]
    fn locate_segment_rejects_horizon() {
        let grid = five_grid();
        let c = cond(&grid, &[0.0, 1.0]);
        assert!(matches!(locate_segment(&grid, &c, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn locate_segment_piecewise_constant_with_jumps_on_event_times() {
        let grid = five_grid();
        let c = cond(&grid, &[0.0, 0.5, 1.0]);
        let mut jumps = Vec::new();
        let n = 20_000;
        let mut last = locate_segment(&grid, &c, 0.0).unwrap();
        for i in 1..n {
            let t = 0.9999999 * i as f64 / n as f64;
            let cur = locate_segment(&grid, &c, t).unwrap();
            if cur != last {
                jumps.push(t);
                last = cur;
            }
        }
        // Jumps may only happen when t crosses a grid or observed time.
        let event_times = [0.25, 0.5, 0.75];
        for j in &jumps {
            assert!(
                event_times.iter().any(|e| (j - e).abs() < 1e-3),
                "jump at {j} away from any event time"
            );
        }
        assert_eq!(jumps.len(), event_times.len());
    }

    #[test]
    fn mixture_branches_and_correlations() {
        let proc = SyntheticProcess::MixtureNonMarkov { jitter: DEFAULT_JITTER };
        let grid = proc.natural_grid().unwrap();
        let samples = sample_data_joint(&proc, &grid, 10_000, 7).unwrap();
        let col = |i: usize| samples.iter().map(|s| s.waypoint_values[i][0]).collect::<Vec<_>>();
        let (x1, x2, x3) = (col(1), col(2), col(3));
        for s in samples.iter().take(50) {
            let v1 = s.waypoint_values[1][0];
            let v2 = s.waypoint_values[2][0];
            let v3 = s.waypoint_values[3][0];
            if v1 > 0.0 {
                assert!((v1 - 0.5).abs() < 0.06 && (v2 + 0.5).abs() < 0.06 && (v3 + 0.5).abs() < 0.06);
            } else {
                assert!((v1 + 0.5).abs() < 0.06 && (v2 - 0.5).abs() < 0.06 && (v3 - 0.5).abs() < 0.06);
            }
        }
        let corr = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
            let (va, vb) = (
                a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n,
                b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n,
            );
            cov / (va * vb).sqrt()
        };
        assert!((corr(&x1, &x2) + 1.0).abs() < 0.01, "corr12 {}", corr(&x1, &x2));
        assert!((corr(&x2, &x3) - 1.0).abs() < 0.01, "corr23 {}", corr(&x2, &x3));
    }

    #[test]
    fn pinned_brownian_hits_pins_exactly() {
        let proc = SyntheticProcess::PinnedBrownian { x0: 1.0 };
        let grid = TimeGrid::new(vec![0.0, 0.4, 0.8, 0.9, 1.0]).unwrap();
        let samples = sample_data_joint(&proc, &grid, 200, 3).unwrap();
        for s in &samples {
            assert_eq!(s.waypoint_values[0][0], 1.0);
            assert_eq!(s.waypoint_values[2][0], -1.0);
            assert_eq!(s.waypoint_values[4][0], 1.0);
        }
        // Interior point at t = 0.4 is a bridge draw: mean 0, var 0.2.
        let xs: Vec<f64> = samples.iter().map(|s| s.waypoint_values[1][0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.12, "mean {mean}");
        assert!((var - 0.2).abs() < 0.06, "var {var}");
    }

    #[test]
    fn pinned_brownian_requires_pin_times() {
        let proc = SyntheticProcess::PinnedBrownian { x0: 1.0 };
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        assert!(sample_data_joint(&proc, &grid, 1, 0).is_err());
    }

    #[test]
    fn gaussian_ar_identity_transition_keeps_x0() {
        let proc = SyntheticProcess::GaussianAr {
            mean_reversion: 0.0,
            stationary_std: 0.5,
            x0: vec![1.5, -2.0],
        };
        let grid = five_grid();
        let samples = sample_data_joint(&proc, &grid, 10, 1).unwrap();
        for s in &samples {
            for v in &s.waypoint_values {
                assert_eq!(v, &vec![1.5, -2.0]);
            }
        }
    }

    #[test]
    fn data_sampling_is_reproducible() {
        let proc = SyntheticProcess::GaussianAr {
            mean_reversion: 1.0,
            stationary_std: 0.5,
            x0: vec![1.0],
        };
        let grid = five_grid();
        let a = sample_data_joint(&proc, &grid, 16, 99).unwrap();
        let b = sample_data_joint(&proc, &grid, 16, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn samples_csv_round_trip() {
        let proc = SyntheticProcess::GaussianAr {
            mean_reversion: 1.0,
            stationary_std: 0.5,
            x0: vec![1.0, 0.2],
        };
        let grid = five_grid();
        let samples = sample_data_joint(&proc, &grid, 4, 5).unwrap();
        let c = cond(&grid, &[0.0, 1.0]);
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &samples, &c, false).unwrap();
        let parsed = read_samples_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed.len(), samples.len());
        for (p, s) in parsed.iter().zip(&samples) {
            assert_eq!(p.grid, s.grid);
            assert_eq!(p.waypoint_values, s.waypoint_values);
        }
    }

    #[test]
    fn mixture_posterior_identifies_branch() {
        let proc = SyntheticProcess::MixtureNonMarkov { jitter: DEFAULT_JITTER };
        let grid = proc.natural_grid().unwrap();
        let history = vec![vec![0.003], vec![0.492]];
        let mix = proc.next_state_mixture(&grid, &history, 2).unwrap();
        assert!(mix.weights()[0] > 0.999, "posterior {:?}", mix.weights());
        assert!((mix.means()[0][0] + 0.5).abs() < 1e-12);
    }
}
