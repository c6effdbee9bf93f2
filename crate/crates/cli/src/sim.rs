use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use fractal_sgd::bench::{self, Measurement};
use fractal_sgd::config::{self, ExperimentConfig, Substrate};
use fractal_sgd::ffpe::{self, FfpeSolver, HomogenizationReport, SolverFaults};
use fractal_sgd::llc::{self, LlcEstimate, NetworkPotential, ToyModel};
use fractal_sgd::trainer::Checkpoint;
use fractal_sgd::validation::{self, CheckResult, Scale, ValidationOptions};

use crate::output::{self, num, OutDir};
use crate::{CliResult, Common, Failure, EXIT_CONFIG, EXIT_FAILED};

#[derive(Serialize)]
struct LlcReport {
    mode: &'static str,
    target: String,
    estimate: LlcEstimate,
    /// Exact coefficient of the toy potential.
    exact: Option<f64>,
    /// Volume-scaling oracle for toy potentials.
    volume_lambda: Option<f64>,
    wbic: Option<f64>,
}

pub fn llc(c: &Common, checkpoint: Option<&Path>) -> CliResult {
    let mut cfg = output::require_config(c.config.as_deref(), "llc")?;
    if let Some(s) = c.seed {
        cfg.run.seed = s;
    }
    let seed = cfg.run.seed;
    let report = match (checkpoint, &cfg.llc_toy) {
        (Some(path), _) => {
            let (train, _) = config::load_data(&cfg.data, config::data_dir_from_env().as_deref())?;
            let arch = cfg.architecture(&cfg.model.hidden, train.input_dim(), train.classes())?;
            let ck = Checkpoint::load(path, &arch)?;
            let minibatch = cfg.llc.minibatch.unwrap_or(train.len());
            let potential = NetworkPotential::new(&arch, &train, minibatch)?;
            let estimate = llc::estimate_llc(&ck.params.values, &potential, &cfg.llc, seed)?;
            let wbic = llc::wbic(estimate.center_loss, estimate.lambda_hat, train.len() as f64).ok();
            LlcReport {
                mode: "checkpoint",
                target: format!("{} (step {})", path.display(), ck.step),
                estimate,
                exact: None,
                volume_lambda: None,
                wbic,
            }
        }
        (None, Some(toy)) => {
            let p = toy.potential;
            let model = ToyModel {
                potential: p,
                sample_size: toy.sample_size,
            };
            let center = vec![0.0; p.dim()];
            let estimate = llc::estimate_llc(&center, &model, &cfg.llc, seed)?;
            let (radius, hi, lo) = validation::volume_settings(&p);
            let scan = llc::volume_scan(|w| p.value(w), &center, &llc::log_grid(hi, lo, 9), radius, 1_000_000, seed)?;
            LlcReport {
                mode: "toy",
                target: p.name(),
                estimate,
                exact: p.learning_coefficient(),
                volume_lambda: Some(scan.lambda),
                wbic: None,
            }
        }
        (None, None) => {
            return Err(Failure::new(EXIT_CONFIG, "`llc` needs --checkpoint or an [llc_toy] config section"));
        }
    };
    println!(
        "{}: λ̂ = {:.4} ± {:.4} ({} chains, {} dropped){}",
        report.target,
        report.estimate.lambda_hat,
        report.estimate.std_err,
        report.estimate.chains_used,
        report.estimate.chains_dropped,
        report.volume_lambda.map(|v| format!("; volume scaling {v:.4}")).unwrap_or_default()
    );
    let mut dir = OutDir::create(c.out.as_deref(), "llc", &cfg, seed)?;
    dir.write_json("llc.json", &report)?;
    dir.write_csv(
        "chains.csv",
        &["chain", "estimate"],
        report
            .estimate
            .chain_estimates
            .iter()
            .enumerate()
            .map(|(i, e)| vec![i.to_string(), num(*e)]),
    )?;
    dir.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct FfpeRun {
    alpha: f64,
    steps: usize,
    t_end: f64,
    max_mass_drift: f64,
    clipped_cells: usize,
    /// `None` when D varies in space and Boltzmann is not the steady state.
    l1_to_boltzmann: Option<f64>,
    #[serde(skip)]
    snapshots: Vec<(f64, Vec<f64>)>,
}

#[derive(Serialize)]
struct FfpeReport {
    runs: Vec<FfpeRun>,
    homogenization: Option<HomogenizationReport>,
}

fn solve(cfg: &ExperimentConfig, alpha: f64) -> fractal_sgd::Result<FfpeRun> {
    let f = &cfg.ffpe;
    let problem = f.problem(alpha)?;
    let stationary = ffpe::boltzmann_stationary(&problem).ok();
    let dx = problem.grid.dx();
    let mut s = FfpeSolver::new(problem, &f.initial_density()?)?;
    let every = f.snapshot_every.max(1);
    let mut snapshots = vec![(0.0, s.state().p.clone())];
    let mut drift: f64 = 0.0;
    for n in 1..=f.steps {
        drift = drift.max(s.step()?.mass_drift);
        if n % every == 0 || n == f.steps {
            snapshots.push((s.state().t, s.state().p.clone()));
        }
    }
    Ok(FfpeRun {
        alpha,
        steps: f.steps,
        t_end: s.state().t,
        max_mass_drift: drift,
        clipped_cells: s.clipped_total(),
        l1_to_boltzmann: stationary.map(|q| ffpe::l1_distance(&s.state().p, &q, dx)),
        snapshots,
    })
}

pub fn ffpe(c: &Common) -> CliResult {
    let cfg = output::require_config(c.config.as_deref(), "ffpe")?;
    let f = &cfg.ffpe;
    let grid = f.grid()?;
    let runs = f
        .alphas
        .par_iter()
        .map(|&a| solve(&cfg, a))
        .collect::<fractal_sgd::Result<Vec<_>>>()?;
    let homogenization = if f.diffusion_pattern.is_empty() {
        None
    } else {
        let v = f.problem(1.0)?.potential;
        Some(ffpe::effective_vs_resolved(
            grid,
            &v,
            &f.diffusion_pattern,
            f.period_cells,
            f.gamma,
            f.dt,
            f.dt * f.steps as f64,
            &f.initial_density()?,
        )?)
    };

    let mut dir = OutDir::create(c.out.as_deref(), "ffpe", &cfg, c.seed.unwrap_or(0))?;
    let xs = grid.centers();
    for r in &runs {
        let rows = r
            .snapshots
            .iter()
            .flat_map(|(t, p)| xs.iter().zip(p).map(move |(x, v)| vec![num(*t), num(*x), num(*v)]));
        dir.write_csv(&format!("density_alpha{}.csv", r.alpha), &["t", "x", "p"], rows)?;
        println!(
            "α = {}: t = {:.4}, max mass drift {:.2e}, L1 to Boltzmann {}",
            r.alpha,
            r.t_end,
            r.max_mass_drift,
            r.l1_to_boltzmann.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "n/a".into())
        );
    }
    if let Ok(q) = ffpe::boltzmann_stationary(&f.problem(1.0)?) {
        dir.write_csv("stationary.csv", &["x", "p"], xs.iter().zip(&q).map(|(x, p)| vec![num(*x), num(*p)]))?;
    }
    if let Some(h) = &homogenization {
        println!("homogenized D̂ = {:.4}, L1 distance {:.3e}", h.d_hat, h.l1_distance);
    }
    dir.write_json("ffpe.json", &FfpeReport { runs, homogenization })?;
    dir.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct BenchReport<'a> {
    substrate: Substrate,
    vertices: usize,
    walkers: usize,
    steps: usize,
    seed: u64,
    measurement: &'a Measurement,
    /// Exact gasket dimensions `(d_f, d_walk, d_s)`.
    exact: Option<(f64, f64, f64)>,
}

pub fn bench(c: &Common) -> CliResult {
    let mut cfg = output::require_config(c.config.as_deref(), "bench")?;
    if let Some(s) = c.seed {
        cfg.bench.seed = s;
    }
    let b = &cfg.bench;
    let h = b.half_width as f64;
    let (graph, radii, exact) = match b.substrate {
        Substrate::Gasket => {
            let side = f64::from(1u32 << b.level);
            let g = bench::build_gasket(b.level)?;
            let exact = (
                bench::GASKET_MASS_DIMENSION,
                bench::GASKET_WALKER_DIMENSION,
                bench::GASKET_SPECTRAL_DIMENSION,
            );
            (g, bench::radii_grid(side / 64.0, side / 2.0, 12), Some(exact))
        }
        Substrate::Chain => (bench::build_chain(b.half_width), bench::radii_grid((h / 300.0).max(2.0), h / 3.0, 10), None),
        Substrate::Lattice => (bench::build_lattice(b.half_width), bench::radii_grid((h / 40.0).max(2.0), 0.75 * h, 10), None),
    };
    log::info!("{}: {} walkers x {} steps", graph.name, b.walkers, b.steps);
    let m = bench::measure(&graph, &radii, b.steps, b.walkers, b.seed)?;
    let v = &m.verdict;
    println!(
        "{}: d_f {:.4}  d_walk {:.4}  d_s {:.4}  cross-identity error {:.4}  subdiffusive {}",
        v.name, v.d_f, v.d_walk, v.d_s, v.cross_identity_error, v.subdiffusive
    );
    let mut dir = OutDir::create(c.out.as_deref(), "bench", &cfg, b.seed)?;
    let e = &m.ensemble;
    dir.write_csv(
        "walk.csv",
        &["t", "msd", "return_prob"],
        (0..=e.steps).map(|t| vec![t.to_string(), num(e.msd[t]), num(e.return_prob[t])]),
    )?;
    dir.write_json(
        "bench.json",
        &BenchReport {
            substrate: b.substrate,
            vertices: graph.vertex_count(),
            walkers: b.walkers,
            steps: b.steps,
            seed: b.seed,
            measurement: &m,
            exact,
        },
    )?;
    dir.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct ValidationEcho<'a> {
    only: &'a [String],
    scale: Scale,
    seed: u64,
    flip_drift: bool,
}

pub fn validate(c: &Common, only: Vec<String>, quick: bool, flip_drift: bool) -> CliResult {
    let opts = ValidationOptions {
        only,
        scale: if quick { Scale::Quick } else { Scale::Full },
        faults: SolverFaults { flip_drift },
        seed: c.seed.unwrap_or(0),
    };
    let results = validation::run_validation(&opts)?;
    print_table(&results);
    if let Some(out) = &c.out {
        let echo = ValidationEcho {
            only: &opts.only,
            scale: opts.scale,
            seed: opts.seed,
            flip_drift,
        };
        let mut dir = OutDir::create(Some(out), "validate", &echo, opts.seed)?;
        dir.write_json("validation.json", &results)?;
        dir.finish()?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::new(EXIT_FAILED, format!("{failed} of {} checks failed", results.len())));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn print_table(results: &[CheckResult]) {
    println!("{:<11} {:<4} {:>11} {:>11}  claim", "group", "ok", "error", "margin");
    for r in results {
        println!(
            "{:<11} {:<4} {:>11.3e} {:>11.3e}  {} [{}]",
            r.group,
            if r.passed { "PASS" } else { "FAIL" },
            r.error,
            r.margin,
            r.claim,
            r.detail
        );
    }
}
