use serde::Serialize;

use fractal_sgd::config::{self, ExperimentConfig};
use fractal_sgd::trainer::{self, RunDiagnostics, RunOutput, RunSummary};

use crate::output::{self, OutDir};
use crate::{CliResult, Common, Failure, EXIT_DIVERGED};

#[derive(Serialize)]
struct RunRecord<'a> {
    summary: RunSummary,
    diagnostics: &'a RunDiagnostics,
}

/// `log.csv`, `summary.json` and checkpoints of one run under `prefix`.
fn write_run(dir: &mut OutDir, prefix: &str, out: &RunOutput) -> CliResult {
    let mut log = Vec::new();
    out.log.write_csv_to(&mut log)?;
    dir.write_bytes(&format!("{prefix}log.csv"), &log)?;
    let record = RunRecord {
        summary: trainer::finalize(&out.log)?,
        diagnostics: &out.diagnostics,
    };
    dir.write_json(&format!("{prefix}summary.json"), &record)?;
    for ck in &out.checkpoints {
        dir.write_bytes(&format!("{prefix}checkpoints/step-{:08}.ckpt", ck.step), &ck.to_bytes()?)?;
    }
    Ok(())
}

fn with_seed(mut cfg: ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    cfg
}

pub fn train(c: &Common) -> CliResult {
    let cfg = with_seed(output::require_config(c.config.as_deref(), "train")?, c.seed);
    let (train, test) = config::load_data(&cfg.data, config::data_dir_from_env().as_deref())?;
    let rc = cfg.run_config(&cfg.model.hidden, train.input_dim(), train.classes(), cfg.run.seed)?;
    log::info!(
        "training {:?} for {} epochs on {} samples",
        rc.arch.layer_widths,
        rc.epochs,
        train.len()
    );
    let out = trainer::train_run(&rc, &train, &test)?;
    let mut dir = OutDir::create(c.out.as_deref(), "train", &cfg, cfg.run.seed)?;
    write_run(&mut dir, "", &out)?;
    dir.finish()?;
    match &out.diagnostics.failure {
        Some(msg) => Err(Failure::new(EXIT_DIVERGED, format!("run diverged: {msg}"))),
        None => Ok(()),
    }
}

pub fn run_name(hidden: &[usize], seed: u64) -> String {
    let h: Vec<String> = hidden.iter().map(|w| w.to_string()).collect();
    format!("h{}-s{seed}", if h.is_empty() { "0".to_string() } else { h.join("x") })
}

pub fn ensemble(c: &Common, runs: Option<usize>) -> CliResult {
    let mut cfg = with_seed(output::require_config(c.config.as_deref(), "ensemble")?, c.seed);
    if let Some(n) = runs {
        cfg.ensemble.runs = n;
    }
    let (train, test) = config::load_data(&cfg.data, config::data_dir_from_env().as_deref())?;
    let members = cfg.ensemble_members();
    let rcs = members
        .iter()
        .map(|(h, s)| cfg.run_config(h, train.input_dim(), train.classes(), *s))
        .collect::<Result<Vec<_>, _>>()?;
    log::info!("training {} runs", rcs.len());
    let outs = trainer::ensemble(&rcs, &train, &test);

    let mut dir = OutDir::create(c.out.as_deref(), "ensemble", &cfg, cfg.run.seed)?;
    let mut rows = Vec::new();
    let mut diverged = 0;
    for ((hidden, seed), out) in members.iter().zip(outs) {
        let out = out?;
        let name = run_name(hidden, *seed);
        write_run(&mut dir, &format!("runs/{name}/"), &out)?;
        let summary = trainer::finalize(&out.log)?;
        let status = match &out.diagnostics.failure {
            Some(msg) => {
                diverged += 1;
                log::warn!("{name} diverged: {msg}");
                format!("diverged: {msg}")
            }
            None => "ok".to_string(),
        };
        let h: Vec<String> = hidden.iter().map(|w| w.to_string()).collect();
        rows.push(vec![
            name,
            h.join(" "),
            seed.to_string(),
            status,
            out.diagnostics.total_steps.to_string(),
            output::opt_num(summary.final_llc),
            output::num(summary.final_gen_error),
        ]);
    }
    dir.write_csv(
        "index.csv",
        &["run", "hidden", "seed", "status", "total_steps", "final_llc", "final_gen_error"],
        rows,
    )?;
    dir.finish()?;
    if diverged > 0 && diverged == members.len() {
        return Err(Failure::new(EXIT_DIVERGED, "every run diverged"));
    }
    Ok(())
}
