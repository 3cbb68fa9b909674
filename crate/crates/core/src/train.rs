//! Path- and time-dependent bridge score matching over random grids and
//! any-subset conditioning.
//!
//! Each step draws a batch of tuples: a waypoint grid (always containing 0
//! and the horizon), a current time `t` clipped away from every grid time, a
//! joint data sample, an `x_t` from the noising kernel anchored at the
//! bracketing waypoints, and the non-singular score target. The regression
//! loss per tuple is `w(t, t_prev, t_next) * ||f - target||^2` with
//! `w = C_t(t_next, t_next) / Phi(t, t_next)`.
//!
//! The two baselines train the same network in auxiliary unit time
//! `tau = (t - t_prev)/(t_next - t_prev)` with their own volatility schedule:
//! `chained-bridge` keeps the previous waypoint as the left endpoint,
//! `noise-to-data` replaces it with a standard normal draw.
//!
//! Parallelism: tuples and per-sample gradients are computed on worker
//! threads keyed by `(seed, step, lane)`, then reduced in fixed lane order,
//! so any worker count replays the single-threaded result exactly.

use crate::kernels::{loss_weight, noising_kernel, score_target};
use crate::paths::{SyntheticProcess, TimeGrid};
use crate::rng::{purpose, Stream};
use crate::schedule::{ScheduleKind, VolatilitySchedule};
use crate::scorenet::{
    optimizer_step, Checkpoint, CondFeature, GradWorkspace, NetConfig, ScoreNetParams,
    CHECKPOINT_VERSION,
};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Generation method. The names are the config-file spelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Abc,
    ChainedBridge,
    NoiseToData,
}

/// How waypoint grids are drawn during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSampler {
    /// One fixed grid (required for processes defined on a fixed grid).
    Fixed { times: Vec<f64> },
    /// Interior count uniform on {0..=max_interior}, times iid uniform then
    /// sorted, rejected until all gaps exceed `min_gap`.
    Random {
        #[serde(default = "default_max_interior")]
        max_interior: usize,
        #[serde(default = "default_min_gap")]
        min_gap: f64,
    },
}

fn default_max_interior() -> usize {
    6
}
fn default_min_gap() -> f64 {
    0.02
}

/// Conditioning-set truncation, for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    /// Full path history plus any observed future.
    #[default]
    Full,
    /// Initial condition plus the most recent waypoint only.
    MarkovRecent,
    /// Initial condition only: the score sees `(t, x_t, x_0)` and nothing
    /// else of the path, i.e. a continuous-time Markov drift.
    InitialOnly,
}

/// Loss weight selection; `None` in the config resolves per method
/// (physical-time weight for abc and chained-bridge, unit for noise-to-data).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Physical,
    Unit,
}

/// Volatility scale of the fractured bridges relative to the primary
/// schedule: shared as-is, or multiplied by sqrt of the segment length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BridgeSigmaScaling {
    #[default]
    Shared,
    SqrtGap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    pub grid: GridSampler,
    #[serde(default)]
    pub non_causal: bool,
    #[serde(default = "default_future_prob")]
    pub future_include_prob: f64,
    #[serde(default)]
    pub cond_mode: CondMode,
    /// Residual parameterization: the network learns the score minus the
    /// analytic pull toward the next observed future constraint.
    #[serde(default)]
    pub bb_drift: bool,
    #[serde(default = "default_bb_eps")]
    pub bb_eps: f64,
    #[serde(default = "default_time_clip")]
    pub time_clip: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub bridge_sigma_scaling: BridgeSigmaScaling,
    /// Auxiliary-time schedule for the baselines. Defaults to the primary
    /// schedule (chained-bridge) or cosine decay (noise-to-data).
    #[serde(default)]
    pub aux_schedule: Option<ScheduleKind>,
    #[serde(default)]
    pub weight_mode: Option<WeightMode>,
    #[serde(default)]
    pub net: Option<NetConfig>,
}

fn default_steps() -> u64 {
    5000
}
fn default_batch() -> usize {
    64
}
fn default_lr_max() -> f64 {
    1e-3
}
fn default_lr_min() -> f64 {
    1e-5
}
fn default_warmup() -> u64 {
    500
}
fn default_clip_norm() -> f64 {
    5.0
}
fn default_ema_decay() -> f64 {
    0.999
}
fn default_future_prob() -> f64 {
    0.5
}
fn default_bb_eps() -> f64 {
    1e-7
}
fn default_time_clip() -> f64 {
    1e-4
}
fn default_checkpoint_every() -> u64 {
    1000
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than total steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if self.bb_drift && self.method != Method::Abc {
            return Err(Error::Config("bb_drift applies to the abc method only".into()));
        }
        if !(0.0..=1.0).contains(&self.future_include_prob) {
            return Err(Error::Config("future_include_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn resolved_weight_mode(&self) -> WeightMode {
        self.weight_mode.unwrap_or(match self.method {
            Method::Abc | Method::ChainedBridge => WeightMode::Physical,
            Method::NoiseToData => WeightMode::Unit,
        })
    }

    /// Auxiliary-time schedule on the unit interval for the baselines.
    pub fn resolved_aux_schedule(&self, primary: &VolatilitySchedule) -> Result<VolatilitySchedule> {
        let kind = match (&self.aux_schedule, self.method) {
            (Some(kind), _) => kind.clone(),
            (None, Method::NoiseToData) => ScheduleKind::CosineDecay { alpha: 3.0, eps: 0.04 },
            (None, _) => primary.kind().clone(),
        };
        VolatilitySchedule::new(kind, 1.0)
    }
}

/// One training example, fully materialized.
#[derive(Debug, Clone)]
pub struct TrainingTuple {
    pub grid: TimeGrid,
    pub data: Vec<Vec<f64>>,
    pub cond: Vec<CondFeature>,
    pub t: f64,
    pub t_prev: f64,
    pub t_next: f64,
    /// Times as the network sees them (physical for abc, auxiliary for the
    /// fractured baselines).
    pub net_t: f64,
    pub net_t_next: f64,
    pub x_t: Vec<f64>,
    pub target: Vec<f64>,
    pub weight: f64,
    /// Analytic pull toward the next future constraint when the residual
    /// parameterization is on.
    pub bb_term: Option<Vec<f64>>,
}

/// Per-step loss record; the CSV stream keeps the four audited columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub weighted_loss: f64,
    pub grad_norm: f64,
    pub segment: (f64, f64, f64),
    pub method: Method,
}

fn draw_grid(sampler: &GridSampler, rng: &mut Stream) -> Result<TimeGrid> {
    match sampler {
        GridSampler::Fixed { times } => TimeGrid::new(times.clone()),
        GridSampler::Random { max_interior, min_gap } => {
            let count = rng.below(max_interior + 1);
            for _ in 0..200 {
                let mut ts: Vec<f64> = (0..count).map(|_| rng.uniform_half_open()).collect();
                ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut all = vec![0.0];
                all.extend(ts);
                all.push(1.0);
                if all.windows(2).all(|w| w[1] - w[0] > *min_gap) {
                    return TimeGrid::new(all);
                }
            }
            Err(Error::Config(format!(
                "could not draw {count} interior times with min gap {min_gap} in 200 attempts"
            )))
        }
    }
}

/// Clip `t` so that `|t - tau| > clip` for every grid time.
fn clip_time(grid: &TimeGrid, t: f64, clip: f64) -> f64 {
    let horizon = grid.horizon();
    let mut t = t.clamp(clip, horizon - clip);
    for &tau in grid.times() {
        if (t - tau).abs() <= clip {
            t = if t >= tau { tau + clip } else { tau - clip };
        }
    }
    t.clamp(clip, horizon - clip)
}

pub fn sample_training_tuple(
    cfg: &TrainConfig,
    sched: &VolatilitySchedule,
    aux_sched: &VolatilitySchedule,
    proc: &SyntheticProcess,
    rng: &mut Stream,
) -> Result<TrainingTuple> {
    let grid = draw_grid(&cfg.grid, rng)?;
    proc.check_grid(&grid)?;
    let horizon = grid.horizon();
    let t = clip_time(&grid, horizon * rng.uniform_half_open(), cfg.time_clip);

    // Past times are always conditioned on; future times join with the
    // configured probability when non-causal training is on.
    let mut in_k: Vec<bool> = grid.times().iter().map(|&tau| tau <= t).collect();
    if cfg.non_causal {
        for (i, &tau) in grid.times().iter().enumerate() {
            if tau > t && rng.bernoulli(cfg.future_include_prob) {
                in_k[i] = true;
            }
        }
    }

    let data = proc.sample_joint_with(&grid, rng);

    let prev_idx = grid.times().iter().rposition(|&tau| tau <= t).unwrap();
    let next_idx = prev_idx + 1;
    let (t_prev, t_next) = (grid.times()[prev_idx], grid.times()[next_idx]);
    let x_next = &data[next_idx];

    // Bracketing frame per method: physical for abc, auxiliary for baselines.
    let gap = t_next - t_prev;
    let tau = (t - t_prev) / gap;
    let sigma_scale = match (cfg.method, cfg.bridge_sigma_scaling) {
        (Method::Abc, _) | (_, BridgeSigmaScaling::Shared) => 1.0,
        (_, BridgeSigmaScaling::SqrtGap) => gap.sqrt(),
    };
    let scale2 = sigma_scale * sigma_scale;

    let noise_left: Vec<f64>;
    let (kernel_sched, k_prev, k_next, k_t, x_left): (&VolatilitySchedule, f64, f64, f64, &[f64]) =
        match cfg.method {
            Method::Abc => (sched, t_prev, t_next, t, &data[prev_idx]),
            Method::ChainedBridge => (aux_sched, 0.0, 1.0, tau, &data[prev_idx]),
            Method::NoiseToData => {
                noise_left = rng.normal_vec(x_next.len());
                (aux_sched, 0.0, 1.0, tau, &noise_left)
            }
        };

    let nk = noising_kernel(kernel_sched, k_prev, k_next, x_left, x_next, k_t)?;
    let sd = (scale2 * nk.var).sqrt();
    let x_t: Vec<f64> = nk.mean.iter().map(|&m| m + sd * rng.normal()).collect();
    // Scaling sigma by c multiplies C by c^2: the target divides by it, the
    // weight multiplies by it, and the kernel mean is untouched (the gain is
    // a C-ratio).
    let target: Vec<f64> = score_target(kernel_sched, k_t, k_next, &x_t, x_next)?
        .iter()
        .map(|&s| s / scale2)
        .collect();

    let weight = match cfg.resolved_weight_mode() {
        WeightMode::Physical => loss_weight(sched, t, t_next)?,
        WeightMode::Unit => 1.0,
    };

    // Conditioning features, after ablation truncation.
    let mut cond: Vec<CondFeature> = Vec::new();
    for (i, &tau_i) in grid.times().iter().enumerate() {
        if !in_k[i] {
            continue;
        }
        let keep = match cfg.cond_mode {
            CondMode::Full => true,
            CondMode::MarkovRecent => tau_i > t || i == 0 || i == prev_idx,
            CondMode::InitialOnly => tau_i > t || i == 0,
        };
        if keep {
            cond.push(CondFeature { time: tau_i, value: data[i].clone(), is_future: tau_i > t });
        }
    }

    let bb_term = if cfg.bb_drift {
        cond.iter()
            .filter(|c| c.is_future)
            .min_by(|a, b| a.time.partial_cmp(&b.time).unwrap())
            .map(|c| bb_pull(sched, t, c.time, &x_t, &c.value, cfg.bb_eps))
            .transpose()?
    } else {
        None
    };

    let (net_t, net_t_next) = match cfg.method {
        Method::Abc => (t, t_next),
        Method::ChainedBridge | Method::NoiseToData => (tau, 1.0),
    };

    Ok(TrainingTuple {
        grid,
        data,
        cond,
        t,
        t_prev,
        t_next,
        net_t,
        net_t_next,
        x_t,
        target,
        weight,
        bb_term,
    })
}

/// Analytic Brownian-bridge style pull toward an observed future constraint:
/// `Phi(t, t_o) (x_o - Phi(t, t_o) x_t) / (C_t(t_o, t_o) + eps)`.
pub fn bb_pull(
    sched: &VolatilitySchedule,
    t: f64,
    t_constraint: f64,
    x_t: &[f64],
    x_constraint: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let phi = sched.resolvent(t, t_constraint)?;
    let c = sched.cov_kernel(t, t_constraint, t_constraint)?;
    Ok(x_t
        .iter()
        .zip(x_constraint)
        .map(|(&xt, &xo)| phi * (xo - phi * xt) / (c + eps))
        .collect())
}

/// Per-tuple loss and gradient contribution. The gradient of the averaged
/// batch loss is accumulated into `grad` (scaled by `inv_batch`).
/// Returns (raw squared error, weighted squared error).
pub fn tuple_loss_and_grad(
    params: &ScoreNetParams,
    tuple: &TrainingTuple,
    inv_batch: f64,
    grad: Option<&mut [f64]>,
) -> Result<(f64, f64)> {
    let cache = params.forward(tuple.net_t, tuple.net_t_next, &tuple.x_t, &tuple.cond)?;
    let zero = vec![0.0; tuple.x_t.len()];
    let bb = tuple.bb_term.as_deref().unwrap_or(&zero);
    let resid: Vec<f64> = cache
        .output
        .iter()
        .zip(bb)
        .zip(&tuple.target)
        .map(|((o, b), tgt)| o + b - tgt)
        .collect();
    let raw: f64 = resid.iter().map(|r| r * r).sum();
    if let Some(grad) = grad {
        let dl: Vec<f64> = resid.iter().map(|r| 2.0 * tuple.weight * r * inv_batch).collect();
        params.backward(&cache, &dl, grad)?;
    }
    Ok((raw, tuple.weight * raw))
}

/// Result of a training run: the final checkpoint holds both raw and EMA
/// parameters.
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub records: Vec<LossRecord>,
}

/// Artifact destinations for a training run.
pub struct TrainSink {
    pub losses_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainSink {
    pub fn none() -> Self {
        TrainSink { losses_csv: None, checkpoint_dir: None }
    }

    pub fn into_dir(dir: &Path) -> Self {
        TrainSink {
            losses_csv: Some(dir.join("losses.csv")),
            checkpoint_dir: Some(dir.to_path_buf()),
        }
    }
}

fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    if step <= cfg.warmup_steps {
        return cfg.lr_max * step as f64 / cfg.warmup_steps.max(1) as f64;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.steps - cfg.warmup_steps) as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Run the training loop: deterministic for a given seed at any worker
/// count. Emits `losses.csv` rows and periodic checkpoints when a sink is
/// provided; a non-finite loss aborts with the last good checkpoint named in
/// the error.
pub fn train(
    cfg: &TrainConfig,
    sched: &VolatilitySchedule,
    proc: &SyntheticProcess,
    seed: u64,
    sink: &TrainSink,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let aux_sched = cfg.resolved_aux_schedule(sched)?;
    let net_cfg = match cfg.net.clone() {
        Some(net) => net,
        None => NetConfig {
            dim: proc.dim(),
            time_freqs: 8,
            embed_widths: vec![64, 64],
            trunk_widths: vec![128, 128, 128],
            activation: crate::scorenet::Activation::Gelu,
        },
    };
    if net_cfg.dim != proc.dim() {
        return Err(Error::Config(format!(
            "net dim {} does not match process dim {}",
            net_cfg.dim,
            proc.dim()
        )));
    }
    let mut params = ScoreNetParams::init(net_cfg, seed)?;
    let mut ema = params.flat().to_vec();
    let mut ws = GradWorkspace::new(params.n_params());
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let mut losses_file = match &sink.losses_csv {
        Some(path) => {
            let mut f = std::fs::File::create(path)?;
            writeln!(f, "step,loss,weighted_loss,grad_norm")?;
            Some(f)
        }
        None => None,
    };
    let mut last_good: Option<PathBuf> = None;

    let inv_batch = 1.0 / cfg.batch as f64;
    for step in 1..=cfg.steps {
        // Tuples and per-sample gradients in parallel, reduced in lane order.
        let lanes: Vec<Result<(Vec<f64>, f64, f64, (f64, f64, f64))>> = (0..cfg.batch)
            .into_par_iter()
            .map(|lane| {
                let mut rng =
                    Stream::derive(seed, purpose::TRAIN, step * cfg.batch as u64 + lane as u64);
                let tuple = sample_training_tuple(cfg, sched, &aux_sched, proc, &mut rng)?;
                let mut grad = vec![0.0; params.n_params()];
                let (raw, weighted) =
                    tuple_loss_and_grad(&params, &tuple, inv_batch, Some(&mut grad))?;
                Ok((grad, raw, weighted, (tuple.t_prev, tuple.t, tuple.t_next)))
            })
            .collect();

        ws.zero_grad();
        let mut raw_sum = 0.0;
        let mut weighted_sum = 0.0;
        let mut segment = (0.0, 0.0, 0.0);
        for lane in lanes {
            let (grad, raw, weighted, seg) = lane?;
            for (g, s) in ws.grad.iter_mut().zip(&grad) {
                *g += s;
            }
            raw_sum += raw;
            weighted_sum += weighted;
            segment = seg;
        }
        let loss = raw_sum * inv_batch;
        let weighted_loss = weighted_sum * inv_batch;
        if !weighted_loss.is_finite() {
            let msg = match &last_good {
                Some(p) => {
                    format!("loss {weighted_loss} at step {step}; last good checkpoint {}", p.display())
                }
                None => format!("loss {weighted_loss} at step {step}; no checkpoint written yet"),
            };
            return Err(Error::NonFinite(msg));
        }

        let lr = lr_at(cfg, step);
        let grad_norm = optimizer_step(&mut params, &mut ema, &mut ws, lr, cfg.clip_norm, cfg.ema_decay)?;

        if let Some(f) = losses_file.as_mut() {
            writeln!(f, "{step},{loss},{weighted_loss},{grad_norm}")?;
        }
        records.push(LossRecord { step, loss, weighted_loss, grad_norm, segment, method: cfg.method });

        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            if let Some(dir) = &sink.checkpoint_dir {
                let ckpt = Checkpoint {
                    version: CHECKPOINT_VERSION,
                    step,
                    net: params.clone(),
                    ema: ema.clone(),
                    opt: ws.clone(),
                    rng: Stream::derive(seed, purpose::TRAIN, (step + 1) * cfg.batch as u64),
                };
                let path = dir.join(format!("ckpt_{step:07}.json"));
                ckpt.save(&path)?;
                last_good = Some(path);
            }
        }
    }

    if !params.all_finite() {
        return Err(Error::NonFinite("parameters left training non-finite".into()));
    }
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        step: cfg.steps,
        net: params,
        ema,
        opt: ws,
        rng: Stream::derive(seed, purpose::TRAIN, (cfg.steps + 1) * cfg.batch as u64),
    };
    Ok(TrainOutput { checkpoint, records })
}
