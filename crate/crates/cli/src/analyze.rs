use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fractal_sgd::analysis::{self, DimensionReport, EffectiveDiffusion, ExponentHistogram, FitWindow, LlcGeneralizationFit};
use fractal_sgd::config::{AnalysisConfig, ExperimentConfig};
use fractal_sgd::manifest::Manifest;
use fractal_sgd::trainer::{self, RunSummary, TrajectoryLog};
use fractal_sgd::Error;

use crate::output::{self, num, OutDir};
use crate::{CliResult, Common, Failure, EXIT_DATA};

pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");
pub const REPORT_FORMAT: &str = "fractal-sgd-report/1";
/// Fewest runs for the ensemble histogram.
pub const MIN_ENSEMBLE_RUNS: usize = 10;

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub run: String,
    pub telemetry_points: usize,
    pub dimensions: DimensionReport,
    pub summary: RunSummary,
    pub effective_diffusion: EffectiveDiffusion,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub format: &'static str,
    pub kind: &'static str,
    pub source: PathBuf,
    pub settings: AnalysisConfig,
    pub runs: Vec<RunReport>,
    pub lemma2_fraction: f64,
    pub corollary3_fraction: f64,
    pub histogram: Option<ExponentHistogram>,
    pub llc_generalization: Option<LlcGeneralizationFit>,
}

/// Config echo of an `analyze` manifest.
#[derive(Debug, Serialize, Deserialize)]
pub struct AnalyzeEcho {
    pub dir: PathBuf,
    pub analysis: AnalysisConfig,
}

fn settings_from_manifest(path: &Path) -> Option<AnalysisConfig> {
    let m = Manifest::read(path).ok()?;
    if let Ok(e) = serde_json::from_value::<AnalyzeEcho>(m.config.clone()) {
        return Some(e.analysis);
    }
    serde_json::from_value::<ExperimentConfig>(m.config).ok().map(|e| e.analysis)
}

/// Analysis settings: `--config` (TOML or any manifest), else the config
/// echo of the directory's manifest, else defaults.
fn settings(dir: &Path, c: &Common) -> CliResult<AnalysisConfig> {
    match c.config.as_deref() {
        Some(p) if p.extension().is_some_and(|e| e == "json") => settings_from_manifest(p).ok_or_else(|| {
            Error::Config {
                path: p.to_path_buf(),
                message: "not a manifest with analysis settings".into(),
            }
            .into()
        }),
        Some(p) => Ok(ExperimentConfig::load(p)?.analysis),
        None => Ok(settings_from_manifest(&dir.join("manifest.json")).unwrap_or_default()),
    }
}

/// `(name, log path)` for a run directory or every ok run of an ensemble.
fn discover(dir: &Path) -> CliResult<(bool, Vec<(String, PathBuf)>)> {
    let index = dir.join("index.csv");
    if index.exists() {
        let mut rdr = csv::Reader::from_path(&index).map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", index.display())))?;
        let mut runs = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", index.display())))?;
            if rec.get(3) == Some("ok") {
                let name = rec.get(0).unwrap_or_default().to_string();
                runs.push((name.clone(), dir.join("runs").join(&name).join("log.csv")));
            }
        }
        return Ok((true, runs));
    }
    let log = dir.join("log.csv");
    if log.exists() {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok((false, vec![(name, log)]));
    }
    Err(Failure::new(EXIT_DATA, format!("{}: no log.csv or index.csv", dir.display())))
}

pub fn analyze_log(name: &str, log: &TrajectoryLog, s: &AnalysisConfig) -> fractal_sgd::Result<RunReport> {
    let ts = log.times();
    let fit = analysis::fit_power_law(&ts, &log.displacement, FitWindow::discard_leading(&ts, s.discard_fraction))?;
    let llc = log.llc_values();
    if llc.is_empty() {
        return Err(Error::InsufficientData(format!("{name}: no LLC estimates in the log")));
    }
    let dimensions = analysis::dimension_report(fit, &llc, s.discard_fraction)?;
    let effective_diffusion = analysis::effective_diffusion(s.xi, dimensions.lambda_final, dimensions.d_s)?;
    Ok(RunReport {
        run: name.to_string(),
        telemetry_points: log.len(),
        summary: trainer::finalize(log)?,
        dimensions,
        effective_diffusion,
    })
}

pub fn build_report(source: &Path, ensemble: bool, logs: &[(String, TrajectoryLog)], s: &AnalysisConfig) -> fractal_sgd::Result<Report> {
    let runs = logs
        .iter()
        .map(|(name, log)| analyze_log(name, log, s))
        .collect::<fractal_sgd::Result<Vec<_>>>()?;
    let n = runs.len() as f64;
    let frac = |f: fn(&RunReport) -> bool| runs.iter().filter(|r| f(r)).count() as f64 / n;
    let (histogram, llc_generalization) = if ensemble {
        if runs.len() < MIN_ENSEMBLE_RUNS {
            return Err(Error::InsufficientData(format!(
                "ensemble analysis needs at least {MIN_ENSEMBLE_RUNS} completed runs, found {}",
                runs.len()
            )));
        }
        let exps: Vec<f64> = runs.iter().map(|r| r.dimensions.diffusion_exponent).collect();
        let finals: Vec<(f64, f64)> = runs
            .iter()
            .filter_map(|r| r.summary.final_llc.map(|l| (l, r.summary.final_gen_error)))
            .collect();
        let corr = match analysis::llc_vs_generalization(&finals) {
            Ok(f) => Some(f),
            Err(e) => {
                log::warn!("no LLC/generalization fit: {e}");
                None
            }
        };
        (Some(analysis::diffusion_exponent_histogram(&exps, s.histogram_bins)?), corr)
    } else {
        (None, None)
    };
    Ok(Report {
        format: REPORT_FORMAT,
        kind: if ensemble { "ensemble" } else { "run" },
        source: source.to_path_buf(),
        settings: s.clone(),
        lemma2_fraction: frac(|r| r.dimensions.lemma2_holds),
        corollary3_fraction: frac(|r| r.dimensions.corollary3_holds),
        runs,
        histogram,
        llc_generalization,
    })
}

pub fn analyze(dir: &Path, c: &Common) -> CliResult {
    let s = settings(dir, c)?;
    let (ensemble, paths) = discover(dir)?;
    let mut logs = Vec::new();
    for (name, path) in paths {
        let log = TrajectoryLog::read_csv(&path).map_err(|e| Failure::new(EXIT_DATA, e.to_string()))?;
        logs.push((name, log));
    }
    let report = build_report(dir, ensemble, &logs, &s)?;

    let out = c.out.clone().unwrap_or_else(|| dir.join("analysis"));
    let seed = c.seed.unwrap_or(0);
    let echo = AnalyzeEcho {
        dir: dir.to_path_buf(),
        analysis: s.clone(),
    };
    let mut od = OutDir::create(Some(&out), "analyze", &echo, seed)?;
    od.write_json("report.json", &report)?;
    od.write_bytes("report.schema.json", REPORT_SCHEMA.as_bytes())?;
    write_plots(&mut od, &logs, &report)?;
    od.finish()?;

    for r in &report.runs {
        let d = &r.dimensions;
        println!(
            "{:<16} slope {:.4} (R² {:.4})  d_s {:.4}  λ_final {:.4}  λ̄ {:.4}  lemma2 {}  corollary3 {}",
            r.run, d.fit.slope, d.fit.r_squared, d.d_s, d.lambda_final, d.lambda_bar, d.lemma2_holds, d.corollary3_holds
        );
    }
    if let Some(h) = &report.histogram {
        println!("diffusion exponent median {:.4}, range [{:.4}, {:.4}], concentrated high: {}", h.median, h.min, h.max, h.concentrated_high);
    }
    if let Some(f) = &report.llc_generalization {
        println!("final LLC vs generalization error: r = {:.4}, slope {:.4e}", f.pearson_r, f.fit.slope);
    }
    Ok(())
}

fn write_plots(od: &mut OutDir, logs: &[(String, TrajectoryLog)], report: &Report) -> CliResult {
    let mut disp = Vec::new();
    let mut llc = Vec::new();
    for ((name, log), r) in logs.iter().zip(&report.runs) {
        let fit = &r.dimensions.fit;
        for i in 0..log.len() {
            let t = log.steps[i] as f64;
            let fitted = if t > 0.0 { num((fit.intercept + fit.slope * t.ln()).exp()) } else { String::new() };
            disp.push(vec![
                name.clone(),
                log.steps[i].to_string(),
                num(log.displacement[i]),
                fitted,
                u8::from(t > 0.0 && fit.window.contains(t)).to_string(),
            ]);
            if let Some(v) = log.llc[i] {
                llc.push(vec![name.clone(), log.steps[i].to_string(), num(v), output::opt_num(log.llc_std_err[i])]);
            }
        }
    }
    od.write_csv("displacement.csv", &["run", "step", "displacement", "fitted", "in_window"], disp)?;
    od.write_csv("llc.csv", &["run", "step", "llc", "llc_std_err"], llc)?;
    od.write_csv(
        "dimensions.csv",
        &[
            "run",
            "slope",
            "r_squared",
            "d_s",
            "d_walk",
            "lambda_final",
            "lambda_bar",
            "margin_lemma2",
            "margin_corollary3",
            "diffusion_exponent",
        ],
        report.runs.iter().map(|r| {
            let d = &r.dimensions;
            vec![
                r.run.clone(),
                num(d.fit.slope),
                num(d.fit.r_squared),
                num(d.d_s),
                num(d.d_walk),
                num(d.lambda_final),
                num(d.lambda_bar),
                num(d.margin_lemma2),
                num(d.margin_corollary3),
                num(d.diffusion_exponent),
            ]
        }),
    )?;
    if let Some(h) = &report.histogram {
        od.write_csv(
            "histogram.csv",
            &["bin_lo", "bin_hi", "count"],
            h.counts
                .iter()
                .enumerate()
                .map(|(i, c)| vec![num(h.edges[i]), num(h.edges[i + 1]), c.to_string()]),
        )?;
    }
    if report.kind == "ensemble" {
        od.write_csv(
            "llc_vs_gen.csv",
            &["run", "final_llc", "final_gen_error"],
            report.runs.iter().filter_map(|r| {
                r.summary
                    .final_llc
                    .map(|l| vec![r.run.clone(), num(l), num(r.summary.final_gen_error)])
            }),
        )?;
    }
    Ok(())
}
