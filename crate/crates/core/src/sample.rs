//! Euler--Maruyama simulation of the learned (or oracle) SDE with
//! waypoint-adaptive stepping, any-subset conditioning, and teacher forcing.
//!
//! The stepper walks a uniform grid of `N` steps but never overshoots a
//! waypoint: when the next uniform step would cross one, it shortens the
//! step to land `eps_t` past the waypoint and banks the unused budget for
//! the following step. Each exceedance permanently advances the clock, so
//! the terminal time is exactly `t_l + crossings * eps_t` (up to float
//! accumulation), which the acceptance suite audits. Waypoint states are
//! read at `t_i + eps_t` and recorded as the `t_i` values.
//!
//! Method dispatch:
//! * `abc` integrates `dx = [-a(t) x + sigma(t)^2 f(...)] dt + sigma(t) dB`
//!   in physical time, optionally adding the analytic bridge pull toward the
//!   next observed future constraint;
//! * `chained-bridge` runs an auxiliary unit-time bridge per grid segment,
//!   mapped to physical time (drift scaled by `1/gap`, diffusion by
//!   `1/sqrt(gap)`), with state continuity across segments;
//! * `noise-to-data` is the same fractured construction with the state reset
//!   to standard normal noise after every waypoint.

use crate::kernels::oracle_score;
use crate::paths::{locate_segment, ConditioningSet, PathSample, SyntheticProcess, TimeGrid, Waypoint};
use crate::rng::{purpose, Stream};
use crate::schedule::VolatilitySchedule;
use crate::scorenet::{CondFeature, ScoreNetParams};
use crate::train::{bb_pull, BridgeSigmaScaling, CondMode, Method};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    /// Euler steps per unit horizon.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Waypoint time exceedance.
    #[serde(default = "default_eps_t")]
    pub eps_t: f64,
    /// Add the analytic pull toward the next observed future constraint.
    #[serde(default)]
    pub bb_drift: bool,
    #[serde(default = "default_bb_eps")]
    pub bb_eps: f64,
    /// Use the closed-form oracle score of the data process instead of a
    /// trained network (supported synthetic processes only).
    #[serde(default)]
    pub use_oracle_score: bool,
    /// Record the dense discretization trace.
    #[serde(default)]
    pub trace: bool,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Sample from the EMA weights of the checkpoint.
    #[serde(default)]
    pub use_ema: bool,
}

fn default_steps() -> usize {
    250
}
fn default_eps_t() -> f64 {
    1e-6
}
fn default_bb_eps() -> f64 {
    1e-7
}
fn default_n_samples() -> usize {
    100
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: default_steps(),
            eps_t: default_eps_t(),
            bb_drift: false,
            bb_eps: default_bb_eps(),
            use_oracle_score: false,
            trace: false,
            n_samples: default_n_samples(),
            use_ema: false,
        }
    }
}

/// Where the drift's score term comes from.
#[derive(Clone, Copy)]
pub enum ScoreSource<'a> {
    Network(&'a ScoreNetParams),
    Oracle(&'a SyntheticProcess),
}

/// Adaptive step decision: `(dt, new_leftover, crossed)` given the current
/// logical time, uniform step `h`, the next waypoint, and the banked budget.
/// The exceedance `eps_t` is not banked; it permanently advances the clock.
pub fn step_size(t: f64, h: f64, tau_next: f64, eps_t: f64, leftover: f64) -> (f64, f64, bool) {
    if t + h > tau_next + eps_t {
        let dt = tau_next + eps_t - t;
        (dt, h - (tau_next - t), true)
    } else {
        (h + leftover, 0.0, false)
    }
}

/// One finished trajectory plus the bookkeeping the invariants audit.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub sample: PathSample,
    pub terminal_time: f64,
    pub crossings: u64,
}

/// Everything fixed across trajectories of one sampling run.
pub struct Sampler<'a> {
    pub cfg: &'a SampleConfig,
    pub method: Method,
    pub sched: &'a VolatilitySchedule,
    /// Auxiliary-time schedule for the fractured baselines.
    pub aux_sched: Option<&'a VolatilitySchedule>,
    pub scaling: BridgeSigmaScaling,
    pub cond_mode: CondMode,
    pub score: ScoreSource<'a>,
}

/// Conditioning features as the network sees them at time `t`, after the
/// configured ablation truncation (future constraints always stay).
fn cond_features(cond: &ConditioningSet, t: f64, mode: CondMode) -> Vec<CondFeature> {
    let mut feats = Vec::new();
    let past: Vec<&Waypoint> = cond.waypoints().iter().filter(|w| w.time <= t).collect();
    match mode {
        CondMode::Full => {
            for w in &past {
                feats.push(CondFeature { time: w.time, value: w.value.clone(), is_future: false });
            }
        }
        CondMode::MarkovRecent => {
            let last = past.last().unwrap().time;
            for w in &past {
                if w.time == 0.0 || w.time == last {
                    feats.push(CondFeature { time: w.time, value: w.value.clone(), is_future: false });
                }
            }
        }
        CondMode::InitialOnly => {
            feats.push(CondFeature { time: past[0].time, value: past[0].value.clone(), is_future: false });
        }
    }
    for w in cond.waypoints().iter().filter(|w| w.time > t) {
        feats.push(CondFeature { time: w.time, value: w.value.clone(), is_future: true });
    }
    feats
}

impl<'a> Sampler<'a> {
    fn validate(&self, grid: &TimeGrid) -> Result<()> {
        let h = grid.horizon() / self.cfg.steps as f64;
        if 2.0 * h > grid.min_gap() {
            return Err(Error::Config(format!(
                "{} steps is too few for this grid: step {h:.4} must be at most half the min gap {:.4}",
                self.cfg.steps,
                grid.min_gap()
            )));
        }
        if self.cfg.eps_t >= grid.min_gap() {
            return Err(Error::Config("eps_t must be below the minimum grid gap".into()));
        }
        if self.method != Method::Abc && self.aux_sched.is_none() {
            return Err(Error::Config("fractured methods need an auxiliary schedule".into()));
        }
        if self.cfg.bb_drift && self.method != Method::Abc {
            return Err(Error::Config("bb_drift applies to the abc method only".into()));
        }
        Ok(())
    }

    /// Per-segment auxiliary schedule, honoring the sigma scaling option.
    fn segment_schedules(&self, grid: &TimeGrid) -> Result<Vec<Option<VolatilitySchedule>>> {
        if self.method == Method::Abc {
            return Ok(vec![None; grid.segments()]);
        }
        let aux = self.aux_sched.unwrap();
        grid.times()
            .windows(2)
            .map(|w| {
                let out = match self.scaling {
                    BridgeSigmaScaling::Shared => aux.clone(),
                    BridgeSigmaScaling::SqrtGap => aux.scaled_sigma((w[1] - w[0]).sqrt())?,
                };
                Ok(Some(out))
            })
            .collect()
    }

    /// Score-driven drift and the diffusion coefficient in physical time.
    #[allow(clippy::too_many_arguments)]
    fn drift_diffusion(
        &self,
        grid: &TimeGrid,
        cond: &ConditioningSet,
        realized: &[Option<Vec<f64>>],
        seg_scheds: &[Option<VolatilitySchedule>],
        next_idx: usize,
        t: f64,
        x: &[f64],
    ) -> Result<(Vec<f64>, f64)> {
        let t_prev = grid.times()[next_idx - 1];
        let t_next = grid.times()[next_idx];
        let feats = cond_features(cond, t, self.cond_mode);
        let history = |upto: usize| -> Vec<Vec<f64>> {
            realized[..upto]
                .iter()
                .map(|v| v.clone().expect("past waypoints are realized"))
                .collect()
        };
        match self.method {
            Method::Abc => {
                let mut score = match self.score {
                    ScoreSource::Network(params) => params.forward(t, t_next, x, &feats)?.output,
                    ScoreSource::Oracle(proc) => {
                        let hist = history(next_idx);
                        let mix = proc.next_state_mixture(grid, &hist, next_idx)?;
                        let t_eval = t.max(t_prev + 1e-9);
                        oracle_score(self.sched, t_eval, t_prev, t_next, &hist[next_idx - 1], &mix, x)?
                    }
                };
                if self.cfg.bb_drift {
                    if let ScoreSource::Network(_) = self.score {
                        if let Some(cst) = cond.next_constraint(t) {
                            let pull = bb_pull(self.sched, t, cst.time, x, &cst.value, self.cfg.bb_eps)?;
                            for (s, p) in score.iter_mut().zip(&pull) {
                                *s += p;
                            }
                        }
                    }
                }
                let a = self.sched.drift_coeff(t);
                let sig = self.sched.sigma(t);
                let drift = x.iter().zip(&score).map(|(&xv, &s)| -a * xv + sig * sig * s).collect();
                Ok((drift, sig))
            }
            Method::ChainedBridge | Method::NoiseToData => {
                let gap = t_next - t_prev;
                let tau = ((t - t_prev) / gap).clamp(0.0, 1.0 - 1e-12);
                let seg_sched = seg_scheds[next_idx - 1].as_ref().unwrap();
                let score = match self.score {
                    ScoreSource::Network(params) => params.forward(tau, 1.0, x, &feats)?.output,
                    ScoreSource::Oracle(proc) => {
                        let hist = history(next_idx);
                        let mix = proc.next_state_mixture(grid, &hist, next_idx)?;
                        let tau_eval = tau.max(1e-9);
                        oracle_score(seg_sched, tau_eval, 0.0, 1.0, &hist[next_idx - 1], &mix, x)?
                    }
                };
                let a_aux = seg_sched.drift_coeff(tau);
                let sig_aux = seg_sched.sigma(tau);
                let drift = x
                    .iter()
                    .zip(&score)
                    .map(|(&xv, &s)| (-a_aux * xv + sig_aux * sig_aux * s) / gap)
                    .collect();
                Ok((drift, sig_aux / gap.sqrt()))
            }
        }
    }

    /// Simulate one trajectory with its own `(seed, index)` noise stream.
    pub fn simulate(
        &self,
        grid: &TimeGrid,
        cond: &ConditioningSet,
        seed: u64,
        traj_index: u64,
    ) -> Result<Simulation> {
        self.validate(grid)?;
        let dim = cond.waypoints()[0].value.len();
        let horizon = grid.horizon();
        let h = horizon / self.cfg.steps as f64;
        let eps = self.cfg.eps_t;
        let seg_scheds = self.segment_schedules(grid)?;
        let mut rng = Stream::derive(seed, purpose::SIM, traj_index);

        let x0 = cond.value_at(0.0).expect("conditioning always pins t = 0").to_vec();
        let mut realized: Vec<Option<Vec<f64>>> = vec![None; grid.times().len()];
        realized[0] = Some(x0.clone());
        let mut cond_dyn = cond.clone();

        let mut x = match self.method {
            Method::NoiseToData => rng.normal_vec(dim),
            _ => x0.clone(),
        };
        let mut trace: Option<Vec<(f64, Vec<f64>)>> = self.cfg.trace.then(|| vec![(0.0, x.clone())]);

        let mut clock = 0.0f64;
        let mut shift = 0.0f64;
        let mut crossings = 0u64;
        let mut leftover = 0.0f64;

        while realized.iter().any(Option::is_none) {
            let t_log = clock - shift;
            let next_idx = realized.iter().position(Option::is_none).unwrap();
            let tau_next = grid.times()[next_idx];

            if t_log >= tau_next {
                // A uniform step landed exactly on the waypoint; record it
                // without an exceedance of its own.
                self.record_waypoint(grid, &mut cond_dyn, &mut realized, next_idx, &mut x, &mut rng, dim);
                continue;
            }

            let (dt, new_leftover, crossed) = step_size(t_log, h, tau_next, eps, leftover);
            leftover = new_leftover;

            // On crossing steps the remaining distance to the waypoint can be
            // arbitrarily small while dt includes the exceedance; evaluating
            // the (singular) pinning pull eps_t earlier keeps drift * dt at
            // the size of the actual gap instead of amplifying it.
            let t_eval = if crossed {
                (t_log - eps).max(grid.times()[next_idx - 1])
            } else {
                t_log
            };
            let (drift, diffusion) =
                self.drift_diffusion(grid, &cond_dyn, &realized, &seg_scheds, next_idx, t_eval, &x)?;
            let sqrt_dt = dt.sqrt();
            for k in 0..dim {
                x[k] += drift[k] * dt + diffusion * sqrt_dt * rng.normal();
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "state diverged at t = {t_log:.6} in trajectory {traj_index}"
                )));
            }
            clock += dt;
            if crossed {
                shift += eps;
                crossings += 1;
                self.record_waypoint(grid, &mut cond_dyn, &mut realized, next_idx, &mut x, &mut rng, dim);
            } else if clock - shift >= tau_next {
                self.record_waypoint(grid, &mut cond_dyn, &mut realized, next_idx, &mut x, &mut rng, dim);
            }
            if let Some(tr) = trace.as_mut() {
                tr.push((clock - shift, x.clone()));
            }
        }

        let waypoint_values = realized.into_iter().map(Option::unwrap).collect();
        Ok(Simulation {
            sample: PathSample { grid: grid.clone(), waypoint_values, trace, seed },
            terminal_time: clock,
            crossings,
        })
    }

    /// Record the waypoint value at `idx`: the pin for observed times
    /// (teacher forcing snaps the state), the current state otherwise, which
    /// then joins the conditioning set. Noise-to-data resets afterwards.
    fn record_waypoint(
        &self,
        grid: &TimeGrid,
        cond_dyn: &mut ConditioningSet,
        realized: &mut [Option<Vec<f64>>],
        idx: usize,
        x: &mut Vec<f64>,
        rng: &mut Stream,
        dim: usize,
    ) {
        let tau = grid.times()[idx];
        if let Some(pin) = cond_dyn.value_at(tau) {
            let pin = pin.to_vec();
            *x = pin.clone();
            realized[idx] = Some(pin);
        } else {
            realized[idx] = Some(x.clone());
            cond_dyn.absorb(Waypoint { time: tau, value: x.clone() });
        }
        if self.method == Method::NoiseToData && idx + 1 < grid.times().len() {
            *x = rng.normal_vec(dim);
        }
    }

    /// Simulate `n` trajectories; per-index noise streams make sharding
    /// over workers bit-equal to the sequential loop.
    pub fn simulate_batch(
        &self,
        grid: &TimeGrid,
        cond: &ConditioningSet,
        seed: u64,
        n: usize,
    ) -> Result<Vec<Simulation>> {
        (0..n)
            .into_par_iter()
            .map(|i| self.simulate(grid, cond, seed, i as u64))
            .collect()
    }
}

/// Segment lookup re-exported next to the sampler that uses it.
pub fn segment_of(grid: &TimeGrid, cond: &ConditioningSet, t: f64) -> Result<(f64, f64, Option<f64>)> {
    locate_segment(grid, cond, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;
    use crate::scorenet::{Activation, NetConfig};

    fn brownian() -> VolatilitySchedule {
        VolatilitySchedule::new(ScheduleKind::Constant { sigma: 1.0 }, 1.0).unwrap()
    }

    fn pin_cond(grid: &TimeGrid, pins: &[(f64, f64)]) -> ConditioningSet {
        ConditioningSet::new(
            grid,
            pins.iter().map(|&(t, v)| Waypoint { time: t, value: vec![v] }).collect(),
        )
        .unwrap()
    }

    fn zero_net() -> ScoreNetParams {
        ScoreNetParams::init(
            NetConfig {
                dim: 1,
                time_freqs: 2,
                embed_widths: vec![4],
                trunk_widths: vec![4],
                activation: Activation::Gelu,
            },
            0,
        )
        .unwrap()
    }

    fn abc_sampler<'a>(
        cfg: &'a SampleConfig,
        sched: &'a VolatilitySchedule,
        score: ScoreSource<'a>,
    ) -> Sampler<'a> {
        Sampler {
            cfg,
            method: Method::Abc,
            sched,
            aux_sched: None,
            scaling: BridgeSigmaScaling::Shared,
            cond_mode: CondMode::Full,
            score,
        }
    }

    #[test]
    fn step_size_shortens_before_a_waypoint() {
        let (dt, leftover, crossed) = step_size(0.498, 0.01, 0.5, 1e-6, 0.0);
        assert!(crossed);
        assert!((dt - (0.002 + 1e-6)).abs() < 1e-15);
        // The shortfall is banked; the exceedance itself is not repaid.
        assert!((leftover - 0.008).abs() < 1e-15);
    }

    #[test]
    fn step_size_uniform_away_from_waypoints() {
        let (dt, leftover, crossed) = step_size(0.3, 0.01, 0.5, 1e-6, 0.0);
        assert!(!crossed);
        assert_eq!(dt, 0.01);
        assert_eq!(leftover, 0.0);
        let (dt2, l2, c2) = step_size(0.5 + 1e-6, 0.01, 1.0, 1e-6, 0.008);
        assert!(!c2);
        assert!((dt2 - 0.018).abs() < 1e-15);
        assert_eq!(l2, 0.0);
    }

    #[test]
    fn terminal_time_accounts_every_exceedance() {
        // Random grids: terminal clock = t_l + crossings * eps_t.
        let sched = brownian();
        let net = zero_net();
        let cfg = SampleConfig { steps: 64, ..SampleConfig::default() };
        let mut rng = Stream::derive(77, purpose::ANALYSIS, 0);
        let mut tested = 0;
        for trial in 0..200u64 {
            let mut times = vec![0.0, 1.0];
            for _ in 0..rng.below(4) {
                times.push(0.05 + 0.9 * rng.uniform_half_open());
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            times.dedup_by(|a, b| (*a - *b).abs() < 0.04);
            let grid = match TimeGrid::new(times) {
                Ok(g) => g,
                Err(_) => continue,
            };
            if grid.min_gap() < 2.0 / 64.0 {
                continue;
            }
            let cond = pin_cond(&grid, &[(0.0, 0.3)]);
            let sampler = abc_sampler(&cfg, &sched, ScoreSource::Network(&net));
            let sim = sampler.simulate(&grid, &cond, trial, 0).unwrap();
            let expect = grid.horizon() + sim.crossings as f64 * cfg.eps_t;
            assert!(
                (sim.terminal_time - expect).abs() < 1e-9,
                "terminal {} vs {} ({} crossings)",
                sim.terminal_time,
                expect,
                sim.crossings
            );
            tested += 1;
        }
        assert!(tested >= 100, "only {tested} grids exercised");
    }

    #[test]
    fn zero_score_gives_pure_diffusion_marginals() {
        let sched = brownian();
        let net = zero_net();
        let cfg = SampleConfig { steps: 100, ..SampleConfig::default() };
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let cond = pin_cond(&grid, &[(0.0, 0.0)]);
        let sampler = abc_sampler(&cfg, &sched, ScoreSource::Network(&net));
        let sims = sampler.simulate_batch(&grid, &cond, 5, 4000).unwrap();
        for (idx, expect_var) in [(1usize, 0.5f64), (2, 1.0)] {
            let xs: Vec<f64> = sims.iter().map(|s| s.sample.waypoint_values[idx][0]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!(mean.abs() < 0.06, "mean {mean}");
            assert!((var - expect_var).abs() < 0.09, "var {var} vs {expect_var}");
        }
    }

    #[test]
    fn fully_observed_conditioning_teacher_forces_every_pin() {
        let sched = brownian();
        let net = zero_net();
        let cfg = SampleConfig { steps: 50, bb_drift: true, ..SampleConfig::default() };
        let grid = TimeGrid::new(vec![0.0, 0.3, 0.7, 1.0]).unwrap();
        let cond = pin_cond(&grid, &[(0.0, 1.0), (0.3, -0.2), (0.7, 0.4), (1.0, 0.9)]);
        let sampler = abc_sampler(&cfg, &sched, ScoreSource::Network(&net));
        let sim = sampler.simulate(&grid, &cond, 1, 0).unwrap();
        let flat: Vec<f64> = sim.sample.waypoint_values.iter().map(|v| v[0]).collect();
        assert_eq!(flat, vec![1.0, -0.2, 0.4, 0.9]);
    }

    #[test]
    fn pinned_brownian_oracle_hits_pins() {
        let sched = brownian();
        let proc = SyntheticProcess::PinnedBrownian { x0: 1.0 };
        let grid = proc.natural_grid().unwrap();
        let cond = pin_cond(&grid, &[(0.0, 1.0), (0.8, -1.0), (1.0, 1.0)]);
        let cfg = SampleConfig { steps: 400, trace: true, ..SampleConfig::default() };
        let sampler = abc_sampler(&cfg, &sched, ScoreSource::Oracle(&proc));
        let sims = sampler.simulate_batch(&grid, &cond, 9, 50).unwrap();
        for s in &sims {
            assert_eq!(s.sample.waypoint_values[1][0], -1.0);
            assert_eq!(s.sample.waypoint_values[2][0], 1.0);
        }
        // Even without teacher forcing the oracle drift lands on the pin:
        // the trace just before t = 0.8 must sit close to -1.
        let s = &sims[0];
        let trace = s.sample.trace.as_ref().unwrap();
        let before_pin = trace.iter().filter(|(t, _)| *t < 0.8).last().unwrap();
        assert!((before_pin.1[0] + 1.0).abs() < 0.05, "state near pin {}", before_pin.1[0]);
    }

    #[test]
    fn unobserved_pinned_oracle_still_reaches_pin_values() {
        // Only x0 observed; the oracle drift alone must reproduce the pinned
        // endpoint distribution.
        let sched = brownian();
        let proc = SyntheticProcess::PinnedBrownian { x0: 1.0 };
        let grid = proc.natural_grid().unwrap();
        let cond = pin_cond(&grid, &[(0.0, 1.0)]);
        let cfg = SampleConfig { steps: 1000, ..SampleConfig::default() };
        let sampler = abc_sampler(&cfg, &sched, ScoreSource::Oracle(&proc));
        let sims = sampler.simulate_batch(&grid, &cond, 10, 200).unwrap();
        let mean_dev = |idx: usize, pin: f64| {
            sims.iter().map(|s| (s.sample.waypoint_values[idx][0] - pin).abs()).sum::<f64>()
                / sims.len() as f64
        };
        assert!(mean_dev(1, -1.0) < 0.06, "mid {}", mean_dev(1, -1.0));
        assert!(mean_dev(2, 1.0) < 0.06, "end {}", mean_dev(2, 1.0));
    }

    #[test]
    fn gaussian_ar_oracle_matches_analytic_moments() {
        let sched = brownian();
        let theta = 1.0;
        let s_std = 0.5;
        let proc = SyntheticProcess::GaussianAr {
            mean_reversion: theta,
            stationary_std: s_std,
            x0: vec![1.0],
        };
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let cond = pin_cond(&grid, &[(0.0, 1.0)]);
        let cfg = SampleConfig { steps: 1000, ..SampleConfig::default() };
        let sampler = abc_sampler(&cfg, &sched, ScoreSource::Oracle(&proc));
        let n = 4000;
        let sims = sampler.simulate_batch(&grid, &cond, 11, n).unwrap();
        for (idx, t) in [(1usize, 0.5f64), (2, 1.0)] {
            let xs: Vec<f64> = sims.iter().map(|s| s.sample.waypoint_values[idx][0]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let expect_mean = (-theta * t).exp();
            let expect_var = s_std * s_std * (1.0 - (-2.0 * theta * t).exp());
            let se_mean = (expect_var / n as f64).sqrt();
            assert!(
                (mean - expect_mean).abs() < 4.0 * se_mean + 0.01,
                "t {t}: mean {mean} vs {expect_mean}"
            );
            assert!(
                (var - expect_var).abs() < 5.0 * expect_var * (2.0 / n as f64).sqrt() + 0.01,
                "t {t}: var {var} vs {expect_var}"
            );
        }
    }

    #[test]
    fn parallel_batches_equal_sequential_bitwise() {
        let sched = brownian();
        let net = zero_net();
        let cfg = SampleConfig { steps: 64, ..SampleConfig::default() };
        let grid = TimeGrid::new(vec![0.0, 0.4, 1.0]).unwrap();
        let cond = pin_cond(&grid, &[(0.0, 0.5)]);
        let sampler = abc_sampler(&cfg, &sched, ScoreSource::Network(&net));
        let par = sampler.simulate_batch(&grid, &cond, 21, 8).unwrap();
        let seq: Vec<Simulation> =
            (0..8).map(|i| sampler.simulate(&grid, &cond, 21, i).unwrap()).collect();
        for (a, b) in par.iter().zip(&seq) {
            let bits = |s: &Simulation| {
                s.sample
                    .waypoint_values
                    .iter()
                    .flat_map(|v| v.iter().map(|x| x.to_bits()))
                    .collect::<Vec<_>>()
            };
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn noise_to_data_jumps_while_bridges_stay_continuous() {
        let sched = brownian();
        let aux =
            VolatilitySchedule::new(ScheduleKind::CosineDecay { alpha: 3.0, eps: 0.04 }, 1.0).unwrap();
        let net = zero_net();
        let cfg = SampleConfig { steps: 200, trace: true, ..SampleConfig::default() };
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let cond = pin_cond(&grid, &[(0.0, 0.2)]);
        let max_jump = |method: Method, aux: Option<&VolatilitySchedule>| -> f64 {
            let sampler = Sampler {
                cfg: &cfg,
                method,
                sched: &sched,
                aux_sched: aux,
                scaling: BridgeSigmaScaling::Shared,
                cond_mode: CondMode::Full,
                score: ScoreSource::Network(&net),
            };
            let sims = sampler.simulate_batch(&grid, &cond, 31, 20).unwrap();
            sims.iter()
                .flat_map(|s| {
                    let tr = s.sample.trace.as_ref().unwrap();
                    tr.windows(2).map(|w| (w[1].1[0] - w[0].1[0]).abs()).collect::<Vec<_>>()
                })
                .fold(0.0, f64::max)
        };
        let abc_jump = max_jump(Method::Abc, None);
        let chained_jump = max_jump(Method::ChainedBridge, Some(&sched));
        let n2d_jump = max_jump(Method::NoiseToData, Some(&aux));
        // Continuous methods move by O(sqrt(dt)); the reset makes jumps O(1).
        assert!(abc_jump < 0.5, "abc jump {abc_jump}");
        assert!(chained_jump < 0.8, "chained jump {chained_jump}");
        assert!(n2d_jump > 0.8, "noise-to-data jump {n2d_jump}");
    }

    #[test]
    fn too_few_steps_is_a_config_error() {
        let sched = brownian();
        let net = zero_net();
        let cfg = SampleConfig { steps: 4, ..SampleConfig::default() };
        let grid = TimeGrid::new(vec![0.0, 0.1, 1.0]).unwrap();
        let cond = pin_cond(&grid, &[(0.0, 0.0)]);
        let sampler = abc_sampler(&cfg, &sched, ScoreSource::Network(&net));
        assert!(matches!(sampler.simulate(&grid, &cond, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn bb_drift_dominates_near_a_constraint() {
        // As t approaches the constraint with a fixed gap, the analytic pull
        // scales like gap / (remaining + bb_eps) and dwarfs any bounded
        // network output.
        let sched = brownian();
        let pull = bb_pull(&sched, 0.8 - 1e-4, 0.8, &[0.0], &[1.0], 1e-7).unwrap();
        assert!(pull[0] > 5000.0, "pull {}", pull[0]);
    }
}
