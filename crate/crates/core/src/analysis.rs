//! Statistical verification of generated path laws: quadratic-variation
//! estimation, marginal/joint moment checks, a two-sample energy-distance
//! permutation test, and the scripted pinned-Brownian comparison of the
//! continual SDE against stitched unit-time bridges.
//!
//! Quadratic variation is the law-determined pathwise functional that
//! separates the two constructions: on `[0, 4/5]` the conditioned process
//! accumulates `0.8` while the stitched bridges accumulate `5/4 * 0.8 = 1.0`,
//! even though both hit the same pins.

use crate::paths::{ConditioningSet, PathSample, SyntheticProcess, TimeGrid, Waypoint};
use crate::rng::{purpose, Stream};
use crate::sample::{SampleConfig, Sampler, ScoreSource, Simulation};
use crate::schedule::{ScheduleKind, VolatilitySchedule};
use crate::train::{BridgeSigmaScaling, CondMode, Method};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Windowed quadratic-variation estimate over a trajectory batch.
#[derive(Debug, Clone, PartialEq)]
pub struct QVEstimate {
    pub interval: (f64, f64),
    pub estimate: f64,
    pub std_error: f64,
}

/// Mean over trajectories of the summed squared increments whose endpoints
/// fall inside `[t_a, t_b]` (summed over state dimensions).
pub fn quadratic_variation(samples: &[PathSample], t_a: f64, t_b: f64) -> Result<QVEstimate> {
    if !(t_a < t_b) {
        return Err(Error::Domain(format!("bad window [{t_a}, {t_b}]")));
    }
    let mut per_traj = Vec::with_capacity(samples.len());
    for s in samples {
        let trace = s
            .trace
            .as_ref()
            .ok_or_else(|| Error::Domain("quadratic variation needs dense traces".into()))?;
        let (first, last) = (trace.first().unwrap().0, trace.last().unwrap().0);
        if first > t_a + 1e-9 || last < t_b - 1e-9 {
            return Err(Error::Domain(format!(
                "trace [{first}, {last}] does not cover window [{t_a}, {t_b}]"
            )));
        }
        let mut acc = 0.0;
        for w in trace.windows(2) {
            let (t0, x0) = (&w[0].0, &w[0].1);
            let (t1, x1) = (&w[1].0, &w[1].1);
            if *t0 >= t_a - 1e-12 && *t1 <= t_b + 1e-12 {
                acc += x0.iter().zip(x1).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
            }
        }
        per_traj.push(acc);
    }
    let n = per_traj.len() as f64;
    let mean = per_traj.iter().sum::<f64>() / n;
    let var = per_traj.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(QVEstimate { interval: (t_a, t_b), estimate: mean, std_error: (var / n).sqrt() })
}

/// Flatten each sample's waypoint values into one row.
fn waypoint_rows(samples: &[PathSample]) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| s.waypoint_values.iter().flatten().copied().collect())
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` between two sample sets.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let mut xy = 0.0;
    for x in a {
        for y in b {
            xy += dist(x, y);
        }
    }
    let mut xx = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            xx += dist(&a[i], &a[j]);
        }
    }
    let mut yy = 0.0;
    for i in 0..b.len() {
        for j in 0..b.len() {
            yy += dist(&b[i], &b[j]);
        }
    }
    2.0 * xy / (n * m) - xx / (n * n) - yy / (m * m)
}

/// Permutation test on the energy distance: returns `(statistic, p_value)`
/// with `p = (1 + #{perm >= observed}) / (1 + n_perm)`.
pub fn energy_permutation_test(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_perm: usize,
    seed: u64,
) -> (f64, f64) {
    let n = a.len();
    let m = b.len();
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b.iter()).collect();
    let total = n + m;
    // One distance matrix; permutations only re-index it.
    let mut d = vec![0.0; total * total];
    for i in 0..total {
        for j in (i + 1)..total {
            let v = dist(pooled[i], pooled[j]);
            d[i * total + j] = v;
            d[j * total + i] = v;
        }
    }
    let stat_of = |idx: &[usize]| -> f64 {
        let (ga, gb) = idx.split_at(n);
        let mut xy = 0.0;
        for &i in ga {
            for &j in gb {
                xy += d[i * total + j];
            }
        }
        let mut xx = 0.0;
        for &i in ga {
            for &j in ga {
                xx += d[i * total + j];
            }
        }
        let mut yy = 0.0;
        for &i in gb {
            for &j in gb {
                yy += d[i * total + j];
            }
        }
        2.0 * xy / (n * m) as f64 - xx / (n * n) as f64 - yy / (m * m) as f64
    };
    let mut idx: Vec<usize> = (0..total).collect();
    let observed = stat_of(&idx);
    let mut rng = Stream::derive(seed, purpose::ANALYSIS, 0xE);
    let mut count = 0usize;
    for _ in 0..n_perm {
        rng.shuffle(&mut idx);
        if stat_of(&idx) >= observed {
            count += 1;
        }
    }
    (observed, (1 + count) as f64 / (1 + n_perm) as f64)
}

/// Per-time, per-dimension moments of both sample sets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub time: f64,
    pub dim: usize,
    pub gen_mean: f64,
    pub gen_var: f64,
    pub ref_mean: f64,
    pub ref_var: f64,
}

/// Pearson correlation between two waypoint times, per dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrRow {
    pub t_a: f64,
    pub t_b: f64,
    pub dim: usize,
    pub generated: f64,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoSampleReport {
    pub moments: Vec<MomentRow>,
    pub correlations: Vec<CorrRow>,
    pub energy_distance: f64,
    pub p_value: f64,
}

impl TwoSampleReport {
    pub fn correlation(&self, t_a: f64, t_b: f64, dim: usize) -> Option<f64> {
        self.correlations
            .iter()
            .find(|c| c.t_a == t_a && c.t_b == t_b && c.dim == dim)
            .map(|c| c.generated)
    }
}

fn values_at(samples: &[PathSample], idx: usize, dim: usize) -> Vec<f64> {
    samples.iter().map(|s| s.waypoint_values[idx][dim]).collect()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
    cov / (va * vb).sqrt().max(1e-300)
}

/// Generated-vs-reference verification: per-time moments, waypoint-pair
/// correlations, and the energy-distance permutation test on concatenated
/// waypoint vectors.
pub fn joint_report(
    generated: &[PathSample],
    reference: &[PathSample],
    n_perm: usize,
    seed: u64,
) -> Result<TwoSampleReport> {
    let grid = &generated
        .first()
        .ok_or_else(|| Error::Domain("empty generated set".into()))?
        .grid;
    if reference.is_empty() || reference[0].grid != *grid {
        return Err(Error::Domain("generated and reference grids differ".into()));
    }
    let dim = generated[0].dim();
    let times = grid.times().to_vec();

    let mut moments = Vec::new();
    for (i, &time) in times.iter().enumerate() {
        for d in 0..dim {
            let (gm, gv) = mean_var(&values_at(generated, i, d));
            let (rm, rv) = mean_var(&values_at(reference, i, d));
            moments.push(MomentRow { time, dim: d, gen_mean: gm, gen_var: gv, ref_mean: rm, ref_var: rv });
        }
    }
    let mut correlations = Vec::new();
    for i in 0..times.len() {
        for j in (i + 1)..times.len() {
            for d in 0..dim {
                let g = pearson(&values_at(generated, i, d), &values_at(generated, j, d));
                let r = pearson(&values_at(reference, i, d), &values_at(reference, j, d));
                correlations.push(CorrRow { t_a: times[i], t_b: times[j], dim: d, generated: g, reference: r });
            }
        }
    }
    let (stat, p_value) =
        energy_permutation_test(&waypoint_rows(generated), &waypoint_rows(reference), n_perm, seed);
    Ok(TwoSampleReport { moments, correlations, energy_distance: stat, p_value })
}

/// Write `marginals.csv` rows for a report.
pub fn write_marginals_csv<W: Write>(out: &mut W, report: &TwoSampleReport) -> Result<()> {
    writeln!(out, "time,dim,gen_mean,gen_var,ref_mean,ref_var")?;
    for m in &report.moments {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            m.time, m.dim, m.gen_mean, m.gen_var, m.ref_mean, m.ref_var
        )?;
    }
    Ok(())
}

/// Write `joint_report.csv`: correlation rows then the two-sample summary.
pub fn write_joint_report_csv<W: Write>(out: &mut W, report: &TwoSampleReport) -> Result<()> {
    writeln!(out, "record,t_a,t_b,dim,generated,reference")?;
    for c in &report.correlations {
        writeln!(out, "corr,{},{},{},{},{}", c.t_a, c.t_b, c.dim, c.generated, c.reference)?;
    }
    writeln!(out, "energy_distance,,,,{},", report.energy_distance)?;
    writeln!(out, "p_value,,,,{},", report.p_value)?;
    Ok(())
}

/// Configuration of the pinned-Brownian comparison run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    #[serde(default = "default_toy_x0")]
    pub x0: f64,
    #[serde(default = "default_toy_trajectories")]
    pub trajectories: usize,
    #[serde(default = "default_toy_steps")]
    pub steps: usize,
}

fn default_toy_x0() -> f64 {
    1.0
}
fn default_toy_trajectories() -> usize {
    1000
}
fn default_toy_steps() -> usize {
    4000
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            x0: default_toy_x0(),
            trajectories: default_toy_trajectories(),
            steps: default_toy_steps(),
        }
    }
}

/// Mean/variance of one process at one checkpoint time.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMarginal {
    pub process: &'static str,
    pub time: f64,
    pub mean: f64,
    pub var: f64,
}

/// Everything the pinned-Brownian comparison asserts on.
#[derive(Debug, Clone)]
pub struct ToyReport {
    pub qv_x: QVEstimate,
    pub qv_y: QVEstimate,
    pub var_x_half: f64,
    pub var_y_half: f64,
    pub marginals: Vec<ToyMarginal>,
    /// (mean |value - pin|, max |value - pin|) over the two pinned times.
    pub pin_dev_x: (f64, f64),
    pub pin_dev_y: (f64, f64),
}

fn trace_values_at(sims: &[Simulation], t: f64) -> Vec<f64> {
    sims.iter()
        .map(|s| {
            let tr = s.sample.trace.as_ref().unwrap();
            let mut best = (f64::INFINITY, 0.0);
            for (time, x) in tr {
                let d = (time - t).abs();
                if d < best.0 {
                    best = (d, x[0]);
                }
            }
            best.1
        })
        .collect()
}

fn pin_deviation(sims: &[Simulation], idx: usize, pin: f64) -> (f64, f64) {
    let devs: Vec<f64> =
        sims.iter().map(|s| (s.sample.waypoint_values[idx][0] - pin).abs()).collect();
    let mean = devs.iter().sum::<f64>() / devs.len() as f64;
    (mean, devs.iter().cloned().fold(0.0, f64::max))
}

/// Simulate the conditioned continual SDE (analytic drift via the process
/// oracle) and the stitched unit-time bridges on the same pins, then compare
/// quadratic variations and intermediate marginals. Only the initial
/// condition is observed: the pins must be reached by the drift, not by
/// teacher forcing.
pub fn toy_experiment(
    cfg: &ToyConfig,
    seed: u64,
) -> Result<(ToyReport, Vec<Simulation>, Vec<Simulation>)> {
    let sched = VolatilitySchedule::new(ScheduleKind::Constant { sigma: 1.0 }, 1.0)?;
    let proc = SyntheticProcess::PinnedBrownian { x0: cfg.x0 };
    let grid = TimeGrid::new(vec![0.0, 0.8, 1.0])?;
    let cond = ConditioningSet::new(&grid, vec![Waypoint { time: 0.0, value: vec![cfg.x0] }])?;
    let sample_cfg = SampleConfig {
        steps: cfg.steps,
        trace: true,
        use_oracle_score: true,
        ..SampleConfig::default()
    };

    let run = |method: Method, aux: Option<&VolatilitySchedule>| -> Result<Vec<Simulation>> {
        let sampler = Sampler {
            cfg: &sample_cfg,
            method,
            sched: &sched,
            aux_sched: aux,
            scaling: BridgeSigmaScaling::Shared,
            cond_mode: CondMode::Full,
            score: ScoreSource::Oracle(&proc),
        };
        sampler.simulate_batch(&grid, &cond, seed, cfg.trajectories)
    };
    let sims_x = run(Method::Abc, None)?;
    let sims_y = run(Method::ChainedBridge, Some(&sched))?;

    let to_samples = |sims: &[Simulation]| sims.iter().map(|s| s.sample.clone()).collect::<Vec<_>>();
    let qv_x = quadratic_variation(&to_samples(&sims_x), 0.0, 0.8)?;
    let qv_y = quadratic_variation(&to_samples(&sims_y), 0.0, 0.8)?;

    let mut marginals = Vec::new();
    let mut var_x_half = 0.0;
    let mut var_y_half = 0.0;
    for &t in &[0.5, 0.8, 0.9, 1.0] {
        let xs = trace_values_at(&sims_x, t);
        let ys = trace_values_at(&sims_y, t);
        let (mx, vx) = mean_var(&xs);
        let (my, vy) = mean_var(&ys);
        if t == 0.5 {
            var_x_half = vx;
            var_y_half = vy;
        }
        marginals.push(ToyMarginal { process: "x", time: t, mean: mx, var: vx });
        marginals.push(ToyMarginal { process: "y", time: t, mean: my, var: vy });
    }

    let report = ToyReport {
        qv_x,
        qv_y,
        var_x_half,
        var_y_half,
        marginals,
        pin_dev_x: {
            let a = pin_deviation(&sims_x, 1, -cfg.x0);
            let b = pin_deviation(&sims_x, 2, cfg.x0);
            (a.0.max(b.0), a.1.max(b.1))
        },
        pin_dev_y: {
            let a = pin_deviation(&sims_y, 1, -cfg.x0);
            let b = pin_deviation(&sims_y, 2, cfg.x0);
            (a.0.max(b.0), a.1.max(b.1))
        },
    };
    Ok((report, sims_x, sims_y))
}

/// Write the toy artifacts (`qv.csv`, `marginals.csv`, `toy_overlay.svg`)
/// into `dir`.
pub fn write_toy_artifacts(
    dir: &Path,
    report: &ToyReport,
    sims_x: &[Simulation],
    sims_y: &[Simulation],
) -> Result<()> {
    let mut qv = std::fs::File::create(dir.join("qv.csv"))?;
    writeln!(qv, "process,window_start,window_end,estimate,std_error,expected")?;
    writeln!(
        qv,
        "x,{},{},{},{},0.8",
        report.qv_x.interval.0, report.qv_x.interval.1, report.qv_x.estimate, report.qv_x.std_error
    )?;
    writeln!(
        qv,
        "y,{},{},{},{},1.0",
        report.qv_y.interval.0, report.qv_y.interval.1, report.qv_y.estimate, report.qv_y.std_error
    )?;

    let mut marg = std::fs::File::create(dir.join("marginals.csv"))?;
    writeln!(marg, "process,time,mean,var")?;
    for m in &report.marginals {
        writeln!(marg, "{},{},{},{}", m.process, m.time, m.mean, m.var)?;
    }

    let svg = toy_overlay_svg(sims_x, sims_y);
    std::fs::write(dir.join("toy_overlay.svg"), svg)?;
    Ok(())
}

mod svg {
    //! Just enough hand-rolled SVG: polylines, lines, circles, text.

    pub struct Canvas {
        pub width: f64,
        pub height: f64,
        body: String,
    }

    impl Canvas {
        pub fn new(width: f64, height: f64) -> Self {
            Canvas { width, height, body: String::new() }
        }

        pub fn polyline(&mut self, pts: &[(f64, f64)], color: &str, width: f64, opacity: f64) {
            let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            self.body.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" opacity=\"{opacity}\"/>\n",
                coords.join(" ")
            ));
        }

        pub fn line(&mut self, a: (f64, f64), b: (f64, f64), color: &str, width: f64) {
            self.body.push_str(&format!(
                "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"{width}\"/>\n",
                a.0, a.1, b.0, b.1
            ));
        }

        pub fn circle(&mut self, c: (f64, f64), r: f64, color: &str) {
            self.body.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{r}\" fill=\"{color}\"/>\n",
                c.0, c.1
            ));
        }

        pub fn text(&mut self, at: (f64, f64), size: f64, content: &str) {
            self.body.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"{size}\" font-family=\"sans-serif\">{content}</text>\n",
                at.0, at.1
            ));
        }

        pub fn render(&self) -> String {
            format!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
                self.width, self.height, self.width, self.height, self.body
            )
        }
    }
}

/// Side-by-side trajectory overlay of the two constructions with the pins
/// marked; at most 40 trajectories per panel.
pub fn toy_overlay_svg(sims_x: &[Simulation], sims_y: &[Simulation]) -> String {
    use svg::Canvas;
    let (w, h) = (900.0, 420.0);
    let mut canvas = Canvas::new(w, h);
    let panel_w = 400.0;
    let panel_h = 320.0;
    let y_range = 3.2; // values plotted in [-1.6, 1.6]

    let mut draw_panel = |x_off: f64, sims: &[Simulation], color: &str, label: &str| {
        let to_px = |t: f64, v: f64| (x_off + t * panel_w, 60.0 + panel_h * (0.5 - v / y_range));
        canvas.line(to_px(0.0, 0.0), to_px(1.0, 0.0), "#cccccc", 1.0);
        for sim in sims.iter().take(40) {
            let tr = sim.sample.trace.as_ref().unwrap();
            let pts: Vec<(f64, f64)> = tr
                .iter()
                .step_by((tr.len() / 400).max(1))
                .map(|(t, x)| to_px(*t, x[0]))
                .collect();
            canvas.polyline(&pts, color, 0.7, 0.25);
        }
        for t in [0.5, 0.8, 0.9, 1.0] {
            canvas.line(to_px(t, -y_range / 2.0), to_px(t, y_range / 2.0), "#dddddd", 0.8);
        }
        for (t, v) in [(0.0, 1.0), (0.8, -1.0), (1.0, 1.0)] {
            canvas.circle(to_px(t, v), 3.5, "#222222");
        }
        canvas.text((x_off, 40.0), 16.0, label);
    };
    draw_panel(40.0, sims_x, "#1f77b4", "conditioned continual SDE");
    draw_panel(490.0, sims_y, "#d62728", "stitched unit-time bridges");
    canvas.render()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{SampleConfig, Sampler, ScoreSource};
    use crate::scorenet::{Activation, NetConfig, ScoreNetParams};

    fn brownian() -> VolatilitySchedule {
        VolatilitySchedule::new(ScheduleKind::Constant { sigma: 1.0 }, 1.0).unwrap()
    }

    fn brownian_traces(n: usize, steps: usize, seed: u64) -> Vec<PathSample> {
        let sched = brownian();
        let net = ScoreNetParams::init(
            NetConfig {
                dim: 1,
                time_freqs: 2,
                embed_widths: vec![4],
                trunk_widths: vec![4],
                activation: Activation::Gelu,
            },
            0,
        )
        .unwrap();
        let cfg = SampleConfig { steps, trace: true, ..SampleConfig::default() };
        let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        let cond =
            ConditioningSet::new(&grid, vec![Waypoint { time: 0.0, value: vec![0.0] }]).unwrap();
        let sampler = Sampler {
            cfg: &cfg,
            method: Method::Abc,
            sched: &sched,
            aux_sched: None,
            scaling: BridgeSigmaScaling::Shared,
            cond_mode: CondMode::Full,
            score: ScoreSource::Network(&net),
        };
        sampler
            .simulate_batch(&grid, &cond, seed, n)
            .unwrap()
            .into_iter()
            .map(|s| s.sample)
            .collect()
    }

    #[test]
    fn qv_of_unit_brownian_matches_window_length() {
        let samples = brownian_traces(400, 500, 3);
        let qv = quadratic_variation(&samples, 0.0, 0.8).unwrap();
        assert!(
            (qv.estimate - 0.8).abs() < 3.0 * qv.std_error + 0.01,
            "qv {} +- {}",
            qv.estimate,
            qv.std_error
        );
        // Unbiasedness at this scale: bias within 2 standard errors.
        assert!((qv.estimate - 0.8).abs() < 2.0 * qv.std_error + 0.005);
    }

    #[test]
    fn qv_rejects_missing_window() {
        let samples = brownian_traces(3, 100, 4);
        assert!(quadratic_variation(&samples, 0.5, 1.5).is_err());
        assert!(quadratic_variation(&samples, 0.9, 0.2).is_err());
    }

    #[test]
    fn energy_distance_of_identical_sets_is_zero() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 * 0.1, (i as f64).sin()]).collect();
        let stat = energy_distance(&rows, &rows);
        assert!(stat.abs() < 1e-12);
        let (s, p) = energy_permutation_test(&rows, &rows, 100, 5);
        assert!(s.abs() < 1e-12);
        assert!(p > 0.9, "p {p}");
    }

    #[test]
    fn energy_test_detects_a_mean_shift() {
        let mut rng = Stream::derive(6, purpose::ANALYSIS, 0);
        let a: Vec<Vec<f64>> = (0..80).map(|_| vec![rng.normal()]).collect();
        let b: Vec<Vec<f64>> = (0..80).map(|_| vec![rng.normal() + 1.5]).collect();
        let (_, p) = energy_permutation_test(&a, &b, 200, 7);
        assert!(p < 0.01, "p {p}");
    }

    #[test]
    fn permutation_test_is_exchangeable_under_the_null() {
        // Two halves of one sample set: rejection rate at level 0.05 stays
        // within 0.05 +- 0.02 over 500 repetitions.
        let mut rejections = 0;
        let reps = 500u64;
        for rep in 0..reps {
            let mut rng = Stream::derive(1000 + rep, purpose::ANALYSIS, 1);
            let a: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let b: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let (_, p) = energy_permutation_test(&a, &b, 200, 2000 + rep);
            if p <= 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        assert!((rate - 0.05).abs() <= 0.02, "rejection rate {rate}");
    }

    #[test]
    fn joint_report_requires_matching_grids() {
        let a = brownian_traces(8, 100, 1);
        let proc = SyntheticProcess::GaussianAr {
            mean_reversion: 1.0,
            stationary_std: 0.5,
            x0: vec![0.0],
        };
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let b = crate::paths::sample_data_joint(&proc, &grid, 8, 2).unwrap();
        assert!(joint_report(&a, &b, 50, 3).is_err());
    }

    #[test]
    fn joint_report_correlations_match_the_mixture_structure() {
        let proc = SyntheticProcess::MixtureNonMarkov { jitter: 0.01 };
        let grid = proc.natural_grid().unwrap();
        let a = crate::paths::sample_data_joint(&proc, &grid, 300, 5).unwrap();
        let b = crate::paths::sample_data_joint(&proc, &grid, 300, 6).unwrap();
        let report = joint_report(&a, &b, 50, 7).unwrap();
        let t = grid.times();
        let c12 = report.correlation(t[1], t[2], 0).unwrap();
        let c23 = report.correlation(t[2], t[3], 0).unwrap();
        assert!(c12 < -0.99, "corr12 {c12}");
        assert!(c23 > 0.99, "corr23 {c23}");
        // Same law on both sides: the test must not reject at tiny levels.
        assert!(report.p_value > 0.001);
    }

    #[test]
    fn toy_experiment_small_run_behaves() {
        let cfg = ToyConfig { x0: 1.0, trajectories: 120, steps: 800 };
        let (report, sims_x, sims_y) = toy_experiment(&cfg, 11).unwrap();
        assert!((report.qv_x.estimate - 0.8).abs() < 0.08, "qv x {}", report.qv_x.estimate);
        assert!((report.qv_y.estimate - 1.0).abs() < 0.10, "qv y {}", report.qv_y.estimate);
        let ratio = report.var_y_half / report.var_x_half;
        assert!((ratio - 1.25).abs() < 0.35, "variance ratio {ratio}");
        assert!(report.pin_dev_x.0 < 0.05, "x pin dev {}", report.pin_dev_x.0);
        assert!(report.pin_dev_y.0 < 0.05, "y pin dev {}", report.pin_dev_y.0);
        let svg = toy_overlay_svg(&sims_x, &sims_y);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
