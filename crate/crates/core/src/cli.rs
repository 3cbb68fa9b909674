//! Command-line entry point: reproducible runs driven by one config file.
//!
//! ```text
//! sdebridge <COMMAND> <CONFIG.json> [key.path=value]...
//! ```
//!
//! Commands: `validate-kernels`, `train`, `sample`, `toy`, `report`.
//! Trailing `key.path=value` pairs (a leading `--` is accepted) override
//! config keys; `--workers=N` sizes the worker pool. Every command creates
//! the output directory, writes `config.lock.json` first, and exits 0 on
//! success, 2 on config/usage errors, 3 on numeric failures.

use crate::analysis::{
    joint_report, toy_experiment, write_joint_report_csv, write_marginals_csv, write_toy_artifacts,
};
use crate::config::{write_lock_file, RunConfig};
use crate::kernels::noising_kernel;
use crate::paths::{
    read_samples_csv, sample_data_joint, write_samples_csv, ConditioningSet, Waypoint,
};
use crate::rng::{purpose, Stream};
use crate::sample::{SampleConfig, Sampler, ScoreSource};
use crate::schedule::VolatilitySchedule;
use crate::scorenet::{Checkpoint, ScoreNetParams};
use crate::train::{train, BridgeSigmaScaling, CondMode, Method, TrainConfig, TrainSink};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "sdebridge", version, about = "Continuous-time process generation with data-to-data bridges")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    config: PathBuf,
    /// `key.path=value` overrides and `--workers=N`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the schedule's closed-form kernels against quadrature.
    ValidateKernels(RunArgs),
    /// Run bridge score matching and write checkpoints.
    Train(RunArgs),
    /// Simulate trajectories from a checkpoint or the oracle score.
    Sample(RunArgs),
    /// Reproduce the pinned-Brownian two-construction comparison.
    Toy(RunArgs),
    /// Compare generated samples against fresh reference data.
    Report(RunArgs),
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let (args, cmd): (&RunArgs, fn(&RunConfig, &Path) -> Result<()>) = match &cli.command {
        Command::ValidateKernels(a) => (a, cmd_validate_kernels),
        Command::Train(a) => (a, cmd_train),
        Command::Sample(a) => (a, cmd_sample),
        Command::Toy(a) => (a, cmd_toy),
        Command::Report(a) => (a, cmd_report),
    };
    match execute(args, cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(args: &RunArgs, cmd: fn(&RunConfig, &Path) -> Result<()>) -> Result<()> {
    let mut overrides = Vec::new();
    let mut workers = None;
    for raw in &args.overrides {
        let stripped = raw.trim_start_matches("--");
        if let Some(n) = stripped.strip_prefix("workers=") {
            workers =
                Some(n.parse::<usize>().map_err(|_| Error::Usage(format!("bad workers count {n:?}")))?);
        } else {
            overrides.push(raw.clone());
        }
    }
    if let Some(n) = workers {
        // Ignore the error when a pool already exists (tests call in-process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = RunConfig::load(&args.config, &overrides)?;
    let out_dir = cfg.resolved_out_dir();
    std::fs::create_dir_all(&out_dir)?;
    write_lock_file(&out_dir, &cfg)?;
    cmd(&cfg, &out_dir)
}

struct KernelCheck {
    name: &'static str,
    samples: usize,
    worst: f64,
    threshold: f64,
    pass: bool,
}

/// The kernel property suite for one schedule; any failed row is a numeric
/// error (exit 3), an unconstructible schedule never gets here (exit 2).
pub fn cmd_validate_kernels(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let sched = cfg.schedule.resolve(cfg.horizon(), config_base(cfg))?;
    let checks = kernel_property_suite(&sched, cfg.seed);
    let mut file = std::fs::File::create(out_dir.join("kernel_report.csv"))?;
    writeln!(file, "check,samples,worst,threshold,pass")?;
    let mut all_pass = true;
    for c in &checks {
        writeln!(file, "{},{},{},{},{}", c.name, c.samples, c.worst, c.threshold, c.pass as u8)?;
        println!("[{}] {}: worst {:.3e} (threshold {:.1e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.worst, c.threshold);
        all_pass &= c.pass;
    }
    if !all_pass {
        return Err(Error::Numeric("kernel validation failed; see kernel_report.csv".into()));
    }
    Ok(())
}

fn kernel_property_suite(sched: &VolatilitySchedule, seed: u64) -> Vec<KernelCheck> {
    let horizon = sched.horizon();
    let mut rng = Stream::derive(seed, purpose::ANALYSIS, 0xC0);
    let mut checks = Vec::new();

    // Closed-form vs quadrature on random (anchor, ta, tb) triples.
    let mut worst_cov = 0.0f64;
    let mut worst_phi = 0.0f64;
    let n = 200;
    for _ in 0..n {
        let mut ts = [
            horizon * rng.uniform_half_open(),
            horizon * rng.uniform_half_open(),
            horizon * rng.uniform_half_open(),
        ];
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (anchor, ta, tb) = (ts[0], ts[1].max(ts[0] + 1e-3 * horizon), ts[2].max(ts[1] + 1e-3));
        if tb > horizon {
            continue;
        }
        let c = sched.cov_kernel(anchor, ta, tb).unwrap();
        let q = sched.cov_kernel_quadrature(anchor, ta, tb).unwrap();
        worst_cov = worst_cov.max((c - q).abs() / q.abs().max(1e-30));
        let p = sched.resolvent(anchor, tb).unwrap();
        let pq = sched.resolvent_quadrature(anchor, tb).unwrap();
        worst_phi = worst_phi.max((p - pq).abs() / pq.abs());
    }
    checks.push(KernelCheck { name: "cov_closed_vs_quadrature", samples: n, worst: worst_cov, threshold: 1e-8, pass: worst_cov < 1e-8 });
    checks.push(KernelCheck { name: "phi_closed_vs_quadrature", samples: n, worst: worst_phi, threshold: 1e-8, pass: worst_phi < 1e-8 });

    // Resolvent semigroup and identity.
    let mut worst_semi = 0.0f64;
    for _ in 0..n {
        let mut ts = [
            horizon * rng.uniform_half_open(),
            horizon * rng.uniform_half_open(),
            horizon * rng.uniform_half_open(),
        ];
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lhs = sched.resolvent(ts[0], ts[1]).unwrap() * sched.resolvent(ts[1], ts[2]).unwrap();
        let rhs = sched.resolvent(ts[0], ts[2]).unwrap();
        worst_semi = worst_semi.max((lhs - rhs).abs());
        worst_semi = worst_semi.max((sched.resolvent(ts[0], ts[0]).unwrap() - 1.0).abs());
    }
    checks.push(KernelCheck { name: "phi_semigroup", samples: n, worst: worst_semi, threshold: 1e-12, pass: worst_semi < 1e-12 });

    // Cauchy-Schwarz strictness and symmetry.
    let mut cs_ok = true;
    let mut worst_sym = 0.0f64;
    for _ in 0..n {
        let anchor = 0.3 * horizon * rng.uniform_half_open();
        let ta = anchor + 0.05 * horizon + 0.4 * horizon * rng.uniform_half_open();
        let tb = ta + 0.05 * horizon * (1.0 + rng.uniform_half_open());
        if tb > horizon {
            continue;
        }
        let cab = sched.cov_kernel(anchor, ta, tb).unwrap();
        let caa = sched.cov_kernel(anchor, ta, ta).unwrap();
        let cbb = sched.cov_kernel(anchor, tb, tb).unwrap();
        cs_ok &= cab * cab < caa * cbb;
        let cba = sched.cov_kernel(anchor, tb, ta).unwrap();
        worst_sym = worst_sym.max((cab - cba).abs() / cab.abs().max(1e-30));
    }
    checks.push(KernelCheck { name: "cauchy_schwarz_strict", samples: n, worst: if cs_ok { 0.0 } else { 1.0 }, threshold: 1.0, pass: cs_ok });
    checks.push(KernelCheck { name: "cov_symmetry", samples: n, worst: worst_sym, threshold: 1e-12, pass: worst_sym < 1e-12 });

    // Noising-kernel endpoint degeneracy and interior positivity.
    let mut endpoints_exact = true;
    let mut interior_positive = true;
    for _ in 0..20 {
        let a = 0.8 * horizon * rng.uniform_half_open();
        let b = a + (0.05 + 0.15 * rng.uniform_half_open()) * horizon;
        if b > horizon {
            continue;
        }
        let (xp, xn) = ([rng.normal()], [rng.normal()]);
        let left = noising_kernel(sched, a, b, &xp, &xn, a).unwrap();
        let right = noising_kernel(sched, a, b, &xp, &xn, b).unwrap();
        endpoints_exact &= left.var == 0.0 && right.var == 0.0;
        endpoints_exact &= left.mean == xp.to_vec() && right.mean == xn.to_vec();
        for i in 1..=50 {
            let t = a + (b - a) * i as f64 / 51.0;
            let p = noising_kernel(sched, a, b, &xp, &xn, t).unwrap();
            interior_positive &= p.var > 0.0;
        }
    }
    checks.push(KernelCheck { name: "noising_var_endpoint_zero", samples: 20, worst: if endpoints_exact { 0.0 } else { 1.0 }, threshold: 1.0, pass: endpoints_exact });
    checks.push(KernelCheck { name: "noising_var_interior_positive", samples: 20 * 50, worst: if interior_positive { 0.0 } else { 1.0 }, threshold: 1.0, pass: interior_positive });

    checks
}

fn config_base(_cfg: &RunConfig) -> &Path {
    // Custom schedule CSVs resolve against the working directory; configs
    // carry relative paths from where the run is launched.
    Path::new(".")
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let train_cfg: &TrainConfig = cfg
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("train command needs a [train] section".into()))?;
    let sched = cfg.schedule.resolve(cfg.horizon(), config_base(cfg))?;
    let sink = TrainSink::into_dir(out_dir);
    let out = train(train_cfg, &sched, &cfg.process, cfg.seed, &sink)?;
    out.checkpoint.save(&out_dir.join("checkpoint.json"))?;
    let last = out.records.last().unwrap();
    println!(
        "trained {} steps; final loss {:.6}, weighted {:.6}",
        last.step, last.loss, last.weighted_loss
    );
    Ok(())
}

fn eval_conditioning(cfg: &RunConfig, grid: &crate::paths::TimeGrid) -> Result<ConditioningSet> {
    let mut pins = vec![Waypoint { time: 0.0, value: cfg.process.initial_value() }];
    if let Some(eval) = &cfg.eval {
        for p in &eval.pins {
            pins.push(Waypoint { time: p.time, value: p.value.clone() });
        }
    }
    ConditioningSet::new(grid, pins)
}

pub fn cmd_sample(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let sample_cfg = cfg.sample.clone().unwrap_or_default();
    let sched = cfg.schedule.resolve(cfg.horizon(), config_base(cfg))?;
    let grid = cfg.eval_grid()?;
    let cond = eval_conditioning(cfg, &grid)?;

    let (method, scaling, cond_mode, aux_sched) = match &cfg.train {
        Some(t) => (
            t.method,
            t.bridge_sigma_scaling,
            t.cond_mode,
            Some(t.resolved_aux_schedule(&sched)?),
        ),
        None => (Method::Abc, BridgeSigmaScaling::Shared, CondMode::Full, None),
    };

    let ckpt_net: Option<ScoreNetParams>;
    let score = if sample_cfg.use_oracle_score {
        ScoreSource::Oracle(&cfg.process)
    } else {
        let ckpt_path = out_dir.join("checkpoint.json");
        if !ckpt_path.exists() {
            return Err(Error::Config(format!(
                "no checkpoint at {}; train first or set sample.use_oracle_score",
                ckpt_path.display()
            )));
        }
        let ckpt = Checkpoint::load(&ckpt_path)?;
        ckpt_net = Some(if sample_cfg.use_ema { ckpt.ema_net()? } else { ckpt.net });
        ScoreSource::Network(ckpt_net.as_ref().unwrap())
    };

    let sampler = Sampler {
        cfg: &sample_cfg,
        method,
        sched: &sched,
        aux_sched: aux_sched.as_ref(),
        scaling,
        cond_mode,
        score,
    };
    let sims = sampler.simulate_batch(&grid, &cond, cfg.seed, sample_cfg.n_samples)?;
    let samples: Vec<_> = sims.iter().map(|s| s.sample.clone()).collect();

    let mut f = std::fs::File::create(out_dir.join("samples.csv"))?;
    write_samples_csv(&mut f, &samples, &cond, false)?;
    if sample_cfg.trace {
        let mut f = std::fs::File::create(out_dir.join("trace.csv"))?;
        write_samples_csv(&mut f, &samples, &cond, true)?;
    }
    println!("sampled {} trajectories on a {}-point grid", samples.len(), grid.times().len());
    Ok(())
}

pub fn cmd_toy(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let toy_cfg = cfg.toy.clone().unwrap_or_default();
    let (report, sims_x, sims_y) = toy_experiment(&toy_cfg, cfg.seed)?;
    write_toy_artifacts(out_dir, &report, &sims_x, &sims_y)?;
    println!(
        "qv[0,0.8]: continual {:.4} (expected 0.8), stitched {:.4} (expected 1.0); var ratio at t=1/2: {:.4}",
        report.qv_x.estimate,
        report.qv_y.estimate,
        report.var_y_half / report.var_x_half
    );
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let report_cfg = cfg.report.clone().unwrap_or_default();
    let samples_path = out_dir.join("samples.csv");
    if !samples_path.exists() {
        return Err(Error::Config(format!(
            "no generated samples at {}; run the sample command first",
            samples_path.display()
        )));
    }
    let generated = read_samples_csv(&std::fs::read_to_string(&samples_path)?)?;
    let grid = cfg.eval_grid()?;
    let n_ref = report_cfg.n_reference.unwrap_or(generated.len());
    let reference = sample_data_joint(&cfg.process, &grid, n_ref, cfg.seed)?;
    let report = joint_report(&generated, &reference, report_cfg.n_permutations, cfg.seed)?;

    let mut f = std::fs::File::create(out_dir.join("marginals.csv"))?;
    write_marginals_csv(&mut f, &report)?;
    let mut f = std::fs::File::create(out_dir.join("joint_report.csv"))?;
    write_joint_report_csv(&mut f, &report)?;
    println!(
        "energy distance {:.6}, permutation p-value {:.4} over {} permutations",
        report.energy_distance, report.p_value, report_cfg.n_permutations
    );
    Ok(())
}
