use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use fractal_sgd::analysis::{self, FitWindow};
use fractal_sgd::config::{self, ExperimentConfig};
use fractal_sgd::data::{write_idx_images, write_idx_labels};
use fractal_sgd::manifest::Manifest;
use fractal_sgd::trainer::{self, TrajectoryLog};

const TINY: &str = r#"
schema_version = 1

[data]
source = "blobs"
train_fraction = 0.75
split_seed = 0

[data.blobs]
classes = 3
dim = 4
per_class = 40
spread = 0.5
seed = 0

[model]
hidden = [8]
batch_norm = false

[optimizer]
kind = "sgd"
learning_rate = 0.05
batch_size = 10

[run]
epochs = 150
seed = 0
telemetry_every = 25
checkpoint_every = 100
llc_every = 50

[llc]
step_size = 1e-4
localization = 100.0
chains = 2
draws = 40
burn_in = 10
minibatch = 30

[ensemble]
runs = 10
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fractal-sgd"));
    c.env("RUST_LOG", "warn").env_remove("FRACTAL_SGD_DATA_DIR");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn fractal-sgd")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn workspace(config: &str) -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("tiny.toml");
    fs::write(&path, config).unwrap();
    (tmp, path)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["train", "--config", "nope.toml"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.toml"), "{}", stderr(&o));

    let o = run(&["train"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--config"));
}

#[test]
fn unknown_config_key_exits_2() {
    let (tmp, _) = workspace(&TINY.replace("batch_size = 10", "batch_size = 10\nmomentum = 0.9"));
    let o = run(&["train", "--config", "tiny.toml"], tmp.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_is_deterministic_and_manifest_reruns() {
    let (tmp, _) = workspace(TINY);
    let d = tmp.path();
    for out in ["a", "b"] {
        let o = run(&["train", "--config", "tiny.toml", "--out", out], d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = fs::read(d.join("a/log.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b/log.csv")).unwrap());

    let m = Manifest::read(&d.join("a/manifest.json")).unwrap();
    assert_eq!(m.command, "train");
    assert!(m.artifacts.iter().any(|x| x.path == Path::new("log.csv")));
    assert!(m.artifacts.iter().any(|x| x.path.starts_with("checkpoints")));
    assert!(m.verify(&d.join("a")).unwrap().is_empty());

    // Re-running from the manifest reproduces every artifact.
    let o = run(&["train", "--config", "a/manifest.json", "--out", "c"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(m.verify(&d.join("c")).unwrap().is_empty());
    let m2 = Manifest::read(&d.join("c/manifest.json")).unwrap();
    assert_eq!(m.run_id, m2.run_id);

    // The seed override changes the run id and the trajectory.
    let o = run(&["train", "--config", "tiny.toml", "--seed", "5", "--out", "s5"], d);
    assert_eq!(code(&o), 0);
    assert_ne!(Manifest::read(&d.join("s5/manifest.json")).unwrap().run_id, m.run_id);
    assert_ne!(fs::read(d.join("s5/log.csv")).unwrap(), a);

    // A manifest from another command is rejected.
    let o = run(&["ffpe", "--config", "a/manifest.json"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn cli_train_matches_library() {
    let (tmp, path) = workspace(TINY);
    let o = run(&["train", "--config", "tiny.toml", "--out", "cli"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let cfg = ExperimentConfig::load(&path).unwrap();
    let (train, test) = config::load_data(&cfg.data, None).unwrap();
    let rc = cfg.run_config(&cfg.model.hidden, train.input_dim(), train.classes(), cfg.run.seed).unwrap();
    let out = trainer::train_run(&rc, &train, &test).unwrap();
    let mut lib = Vec::new();
    out.log.write_csv_to(&mut lib).unwrap();
    assert_eq!(lib, fs::read(tmp.path().join("cli/log.csv")).unwrap());
}

#[test]
fn ensemble_member_equals_single_run() {
    let (tmp, _) = workspace(TINY);
    let d = tmp.path();
    assert_eq!(code(&run(&["train", "--config", "tiny.toml", "--out", "t"], d)), 0);
    let o = run(&["ensemble", "--config", "tiny.toml", "--runs", "1", "--out", "e"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(d.join("t/log.csv")).unwrap(),
        fs::read(d.join("e/runs/h8-s0/log.csv")).unwrap()
    );
    let index = fs::read_to_string(d.join("e/index.csv")).unwrap();
    assert!(index.starts_with("run,hidden,seed,status,total_steps,final_llc,final_gen_error\n"));
    assert!(index.contains("h8-s0,8,0,ok,"));

    // Under ten runs there is no ensemble histogram to build.
    let o = run(&["analyze", "e"], d);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

fn quantile_free_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn ensemble_analysis_matches_recomputation_and_schema() {
    let (tmp, _) = workspace(TINY);
    let d = tmp.path();
    let o = run(&["ensemble", "--config", "tiny.toml", "--out", "e"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["analyze", "e"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let report = read_json(&d.join("e/analysis/report.json"));
    let schema = read_json(&d.join("e/analysis/report.schema.json"));
    let compiled = jsonschema::JSONSchema::options()
        .with_draft(jsonschema::Draft::Draft202012)
        .compile(&schema)
        .unwrap();
    if let Err(errors) = compiled.validate(&report) {
        let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("report violates schema: {msgs:?}");
    }
    // The schema is strict enough to reject a stray field.
    let mut bad = report.clone();
    bad["extra"] = Value::Bool(true);
    assert!(!compiled.is_valid(&bad));

    // Recompute every exponent from the raw logs.
    let settings = ExperimentConfig::load(&d.join("tiny.toml")).unwrap().analysis;
    let mut exps = Vec::new();
    for s in 0..10 {
        let log = TrajectoryLog::read_csv(&d.join(format!("e/runs/h8-s{s}/log.csv"))).unwrap();
        let ts = log.times();
        let fit = analysis::fit_power_law(&ts, &log.displacement, FitWindow::discard_leading(&ts, settings.discard_fraction)).unwrap();
        let rep = analysis::dimension_report(fit, &log.llc_values(), settings.discard_fraction).unwrap();
        exps.push(rep.diffusion_exponent);
    }

    // Independent equal-width binning.
    let h = &report["histogram"];
    let bins = settings.histogram_bins;
    let lo = exps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0u64; bins];
    for &e in &exps {
        let k = (((e - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[k.min(bins - 1)] += 1;
    }
    let reported: Vec<u64> = h["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).collect();
    assert_eq!(reported, counts);
    let median = quantile_free_median(exps.clone());
    assert!((h["median"].as_f64().unwrap() - median).abs() < 1e-12);
    assert!((h["min"].as_f64().unwrap() - lo).abs() < 1e-12);
    assert!((h["max"].as_f64().unwrap() - hi).abs() < 1e-12);
    assert_eq!(h["concentrated_high"].as_bool().unwrap(), median > 0.5 * (lo + hi));

    // The CSV view agrees with the JSON view.
    let csv = fs::read_to_string(d.join("e/analysis/histogram.csv")).unwrap();
    let csv_counts: Vec<u64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(csv_counts, counts);
    assert!(Manifest::read(&d.join("e/analysis/manifest.json")).unwrap().verify(&d.join("e/analysis")).unwrap().is_empty());
}

#[test]
fn analyze_without_logs_exits_3() {
    let tmp = TempDir::new().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let o = run(&["analyze", "empty"], tmp.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn analyze_without_llc_telemetry_exits_5() {
    let (tmp, _) = workspace(&TINY.replace("llc_every = 50", "llc_every = 0"));
    let d = tmp.path();
    let o = run(&["train", "--config", "tiny.toml", "--out", "t"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["analyze", "t"], d);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

const IDX: &str = r#"
schema_version = 1

[data]
source = "idx"
train_fraction = 0.75
split_seed = 0

[data.idx]
images = "img.idx"
labels = "lbl.idx"
classes = 3
standardize = true

[model]
hidden = [6]
batch_norm = false

[optimizer]
kind = "sgd"
learning_rate = 0.05
batch_size = 10

[run]
epochs = 5
seed = 0
telemetry_every = 5
checkpoint_every = 100
llc_every = 0
"#;

fn write_idx(dir: &Path, n: usize) {
    let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
    let pixels: Vec<u8> = (0..n * 16).map(|k| ((k * 37 + labels[k / 16] as usize * 80) % 256) as u8).collect();
    write_idx_images(&dir.join("img.idx"), 4, 4, &pixels).unwrap();
    write_idx_labels(&dir.join("lbl.idx"), &labels).unwrap();
}

#[test]
fn idx_data_directory_from_environment() {
    let (tmp, _) = workspace(IDX);
    let d = tmp.path();
    let data = d.join("data");
    fs::create_dir(&data).unwrap();

    let o = bin().args(["train", "--config", "tiny.toml", "--out", "t"]).current_dir(d).env("FRACTAL_SGD_DATA_DIR", &data).output().unwrap();
    assert_eq!(code(&o), 3, "missing files: {}", stderr(&o));

    write_idx(&data, 60);
    let o = bin().args(["train", "--config", "tiny.toml", "--out", "t"]).current_dir(d).env("FRACTAL_SGD_DATA_DIR", &data).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // Label count disagreeing with the image count is a data error.
    write_idx_labels(&data.join("lbl.idx"), &[0, 1, 2]).unwrap();
    let o = bin().args(["train", "--config", "tiny.toml", "--out", "t2"]).current_dir(d).env("FRACTAL_SGD_DATA_DIR", &data).output().unwrap();
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

const FFPE: &str = r#"
schema_version = 1

[ffpe]
a = -2.0
b = 2.0
cells = 80
potential = "double_well"
diffusion = 0.5
gamma = 1.0
alphas = [0.5, 1.0]
dt = 0.05
steps = 200
snapshot_every = 100
initial = "pair"
initial_mean = 1.0
initial_std = 0.2
"#;

#[test]
fn ffpe_conserves_mass_and_writes_snapshots() {
    let (tmp, _) = workspace(FFPE);
    let o = run(&["ffpe", "--config", "tiny.toml", "--out", "f"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&tmp.path().join("f/ffpe.json"));
    for run in r["runs"].as_array().unwrap() {
        assert!(run["max_mass_drift"].as_f64().unwrap() < 1e-10);
    }
    let csv = fs::read_to_string(tmp.path().join("f/density_alpha0.5.csv")).unwrap();
    // Snapshots at t = 0, 100 and 200 steps over 80 cells.
    assert_eq!(csv.lines().count(), 1 + 3 * 80);
}

#[test]
fn bench_lattice_is_diffusive() {
    let cfg = "schema_version = 1\n\n[bench]\nsubstrate = \"lattice\"\nhalf_width = 60\nwalkers = 4000\nsteps = 600\nseed = 0\n";
    let (tmp, _) = workspace(cfg);
    let o = run(&["--jobs", "1", "bench", "--config", "tiny.toml", "--out", "b"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&tmp.path().join("b/bench.json"));
    let dw = r["measurement"]["verdict"]["d_walk"].as_f64().unwrap();
    assert!((dw - 2.0).abs() < 0.1, "d_walk {dw}");
}

#[test]
fn validate_subset_and_injected_fault() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["validate", "--only", "caputo,analysis", "--out", "v"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let results = read_json(&tmp.path().join("v/validation.json"));
    let groups: Vec<&str> = results.as_array().unwrap().iter().map(|r| r["group"].as_str().unwrap()).collect();
    assert!(groups.iter().all(|g| *g == "caputo" || *g == "analysis"));

    let o = run(&["validate", "--quick", "--only", "lemma1", "--inject-fault", "flip-drift"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).lines().any(|l| l.starts_with("lemma1") && l.contains("FAIL")));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 9);
}
