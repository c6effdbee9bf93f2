//! Deterministic training loop with displacement telemetry.
//!
//! A run is a pure function of its [`RunConfig`] and data: initialization,
//! shuffling and SGLD chains each draw from their own stream of the run seed.
//! Telemetry rows are written at step 0 and every `telemetry_every` optimizer
//! steps. Displacement is measured from the initial point `w0`, biases
//! included.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::analysis::trailing_mean;
use crate::data::{self, Dataset};
use crate::llc::{self, NetworkPotential, SgldConfig};
use crate::manifest::content_hash;
use crate::nn::{self, Architecture, OptimizerConfig, OptimizerState, ParamVector};
use crate::rng::{self, domain};
use crate::stats::Moments;
use crate::{Error, Result};

pub const DEFAULT_TELEMETRY_EVERY: u64 = 100;
pub const DEFAULT_KURTOSIS_THRESHOLD: f64 = 50.0;
/// Number of trailing estimates averaged into the final LLC and error.
pub const FINAL_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: Architecture,
    pub opt: OptimizerConfig,
    pub epochs: u64,
    pub seed: u64,
    #[serde(default = "default_telemetry")]
    pub telemetry_every: u64,
    /// `None` disables checkpoints.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    /// `None` disables LLC estimation.
    #[serde(default = "default_llc_every")]
    pub llc_every: Option<u64>,
    #[serde(default)]
    pub sgld: SgldConfig,
    #[serde(default = "default_kurtosis")]
    pub kurtosis_threshold: f64,
}

fn default_telemetry() -> u64 {
    DEFAULT_TELEMETRY_EVERY
}
fn default_llc_every() -> Option<u64> {
    Some(DEFAULT_TELEMETRY_EVERY)
}
fn default_kurtosis() -> f64 {
    DEFAULT_KURTOSIS_THRESHOLD
}

impl RunConfig {
    pub fn new(arch: Architecture, opt: OptimizerConfig, epochs: u64, seed: u64) -> Self {
        RunConfig {
            arch,
            opt,
            epochs,
            seed,
            telemetry_every: DEFAULT_TELEMETRY_EVERY,
            checkpoint_every: None,
            llc_every: Some(DEFAULT_TELEMETRY_EVERY),
            sgld: SgldConfig::default(),
            kurtosis_threshold: DEFAULT_KURTOSIS_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.opt.validate()?;
        if self.telemetry_every == 0 {
            return Err(Error::InvalidInput("telemetry_every must be at least 1".into()));
        }
        if self.checkpoint_every == Some(0) || self.llc_every == Some(0) {
            return Err(Error::InvalidInput("checkpoint_every and llc_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Content hash of the full configuration, seed included.
    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub run_id: String,
    pub steps: Vec<u64>,
    /// `R(t) = ||w(t) - w0||`.
    pub displacement: Vec<f64>,
    /// Distance from the previous telemetry point.
    pub increment: Vec<f64>,
    /// One row per telemetry point, one column per layer.
    pub per_layer: Vec<Vec<f64>>,
    pub train_loss: Vec<f64>,
    pub gen_error: Vec<f64>,
    pub llc: Vec<Option<f64>>,
    pub llc_std_err: Vec<Option<f64>>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Estimated LLC values in step order, skipping points without one.
    pub fn llc_values(&self) -> Vec<f64> {
        self.llc.iter().flatten().copied().collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|&s| s as f64).collect()
    }

    fn push(&mut self, row: Row) {
        self.steps.push(row.step);
        self.displacement.push(row.displacement);
        self.increment.push(row.increment);
        self.per_layer.push(row.per_layer);
        self.train_loss.push(row.train_loss);
        self.gen_error.push(row.gen_error);
        self.llc.push(row.llc);
        self.llc_std_err.push(row.llc_std_err);
    }

    /// Rows with `step > after`, for comparing a resumed run.
    pub fn tail_after(&self, after: u64) -> TrajectoryLog {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.steps[i] > after).collect();
        let pick = |v: &Vec<f64>| keep.iter().map(|&i| v[i]).collect();
        TrajectoryLog {
            run_id: self.run_id.clone(),
            steps: keep.iter().map(|&i| self.steps[i]).collect(),
            displacement: pick(&self.displacement),
            increment: pick(&self.increment),
            per_layer: keep.iter().map(|&i| self.per_layer[i].clone()).collect(),
            train_loss: pick(&self.train_loss),
            gen_error: pick(&self.gen_error),
            llc: keep.iter().map(|&i| self.llc[i]).collect(),
            llc_std_err: keep.iter().map(|&i| self.llc_std_err[i]).collect(),
        }
    }

    /// Columns: `step, displacement, increment, train_loss, gen_error, llc,
    /// llc_std_err, layer_0, layer_1, ...`. Missing LLC values are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let layers = self.per_layer.first().map_or(0, Vec::len);
        let mut header: Vec<String> = [
            "step",
            "displacement",
            "increment",
            "train_loss",
            "gen_error",
            "llc",
            "llc_std_err",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..layers).map(|l| format!("layer_{l}")));
        out.write_record(&header)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:e}"));
        for i in 0..self.len() {
            let mut rec = vec![
                self.steps[i].to_string(),
                format!("{:e}", self.displacement[i]),
                format!("{:e}", self.increment[i]),
                format!("{:e}", self.train_loss[i]),
                format!("{:e}", self.gen_error[i]),
                opt(self.llc[i]),
                opt(self.llc_std_err[i]),
            ];
            rec.extend(self.per_layer[i].iter().map(|x| format!("{x:e}")));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv_from(file)
    }

    pub fn read_csv_from<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let layers = rdr.headers()?.iter().filter(|h| h.starts_with("layer_")).count();
        let mut log = TrajectoryLog::default();
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidInput(format!("bad number {s:?} in trajectory log")))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 7 + layers {
                return Err(Error::InvalidInput(format!("row with {} fields", rec.len())));
            }
            log.push(Row {
                step: rec[0]
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad step {:?}", &rec[0])))?,
                displacement: num(&rec[1])?,
                increment: num(&rec[2])?,
                train_loss: num(&rec[3])?,
                gen_error: num(&rec[4])?,
                llc: opt(&rec[5])?,
                llc_std_err: opt(&rec[6])?,
                per_layer: (7..7 + layers).map(|j| num(&rec[j])).collect::<Result<_>>()?,
            });
        }
        Ok(log)
    }
}

struct Row {
    step: u64,
    displacement: f64,
    increment: f64,
    per_layer: Vec<f64>,
    train_loss: f64,
    gen_error: f64,
    llc: Option<f64>,
    llc_std_err: Option<f64>,
}

/// Run-level diagnostics that do not fit the per-row log.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunDiagnostics {
    /// Set when the loss went non-finite; the log holds rows up to then.
    pub failure: Option<String>,
    pub total_steps: u64,
    /// Excess kurtosis of per-step displacement increments.
    pub increment_kurtosis: f64,
    /// Kurtosis above the configured threshold: outside the theory regime.
    pub heavy_tailed: bool,
    pub in_theory_regime: bool,
    /// LLC estimates that failed (every chain diverged).
    pub llc_failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Position in the data stream: next epoch and batch within it.
    pub epoch: u64,
    pub batch: u64,
    pub params: ParamVector,
    pub optimizer: OptimizerState,
    /// Parameters at the last telemetry row, for the increment column.
    pub last_telemetry: ParamVector,
    pub moments: Moments,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    step: u64,
    epoch: u64,
    batch: u64,
    optimizer_step: u64,
    params: usize,
    first_moment: usize,
    second_moment: usize,
    moments: Moments,
}

const CHECKPOINT_FORMAT: &str = "fractal-sgd-checkpoint/1";

impl Checkpoint {
    /// `u64` LE header length, JSON header, then little-endian `f64`s:
    /// params, AdamW moments, last telemetry params.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            step: self.step,
            epoch: self.epoch,
            batch: self.batch,
            optimizer_step: self.optimizer.step,
            params: self.params.dim(),
            first_moment: self.optimizer.first_moment.len(),
            second_moment: self.optimizer.second_moment.len(),
            moments: self.moments,
        };
        let json = serde_json::to_vec(&header)?;
        let floats: Vec<f64> = self
            .params
            .values
            .iter()
            .chain(&self.optimizer.first_moment)
            .chain(&self.optimizer.second_moment)
            .chain(&self.last_telemetry.values)
            .copied()
            .collect();
        let mut out = vec![0u8; 8 + json.len() + 8 * floats.len()];
        LittleEndian::write_u64(&mut out[..8], json.len() as u64);
        out[8..8 + json.len()].copy_from_slice(&json);
        LittleEndian::write_f64_into(&floats, &mut out[8 + json.len()..]);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], arch: &Architecture) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("checkpoint: {m}"));
        if bytes.len() < 8 {
            return Err(bad("truncated header"));
        }
        let hlen = LittleEndian::read_u64(&bytes[..8]) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: CheckpointHeader = serde_json::from_slice(body)?;
        if h.format != CHECKPOINT_FORMAT {
            return Err(bad(&format!("unknown format {}", h.format)));
        }
        let payload = &bytes[8 + hlen..];
        let count = 2 * h.params + h.first_moment + h.second_moment;
        if payload.len() != 8 * count {
            return Err(bad(&format!("expected {count} values, found {} bytes", payload.len())));
        }
        let mut floats = vec![0.0; count];
        LittleEndian::read_f64_into(payload, &mut floats);
        let mut rest = floats.as_slice();
        let mut take = |n: usize| {
            let (a, b) = rest.split_at(n);
            rest = b;
            a.to_vec()
        };
        let params = ParamVector::from_values(arch, take(h.params))?;
        let first_moment = take(h.first_moment);
        let second_moment = take(h.second_moment);
        let last_telemetry = ParamVector::from_values(arch, take(h.params))?;
        Ok(Checkpoint {
            step: h.step,
            epoch: h.epoch,
            batch: h.batch,
            params,
            optimizer: OptimizerState {
                step: h.optimizer_step,
                first_moment,
                second_moment,
            },
            last_telemetry,
            moments: h.moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        data::write_all(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, arch: &Architecture) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, arch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub log: TrajectoryLog,
    pub diagnostics: RunDiagnostics,
    pub checkpoints: Vec<Checkpoint>,
    pub final_params: ParamVector,
}

/// Misclassification rate on `test`.
pub fn generalization_error(params: &ParamVector, arch: &Architecture, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InsufficientData("empty test set".into()));
    }
    let pred = nn::predict(params, &test.as_batch(), arch)?;
    let wrong = pred.iter().zip(test.labels()).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / test.len() as f64)
}

fn check_dims(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<()> {
    for (name, ds) in [("train", train), ("test", test)] {
        if ds.input_dim() != cfg.arch.input_dim() || ds.classes() != cfg.arch.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{name} set has {} features and {} classes, architecture expects {} and {}",
                ds.input_dim(),
                ds.classes(),
                cfg.arch.input_dim(),
                cfg.arch.output_dim()
            )));
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData("train and test sets must be nonempty".into()));
    }
    Ok(())
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    w0: ParamVector,
    log: TrajectoryLog,
    diag: RunDiagnostics,
    checkpoints: Vec<Checkpoint>,
}

impl Trainer<'_> {
    fn telemetry(&mut self, step: u64, params: &ParamVector, last: &ParamVector) -> Result<()> {
        let train_loss = nn::loss(params, &self.train.as_batch(), &self.cfg.arch)?;
        let gen_error = generalization_error(params, &self.cfg.arch, self.test)?;
        let (mut llc, mut llc_std_err) = (None, None);
        if let Some(every) = self.cfg.llc_every {
            if step > 0 && step.is_multiple_of(every) {
                let minibatch = self.cfg.sgld.minibatch.unwrap_or(self.train.len());
                let potential = NetworkPotential::new(&self.cfg.arch, self.train, minibatch)?;
                let seed = rng::derive_seed(self.cfg.seed, domain::LLC, step);
                match llc::estimate_llc(&params.values, &potential, &self.cfg.sgld, seed) {
                    Ok(est) => {
                        llc = Some(est.lambda_hat);
                        llc_std_err = Some(est.std_err);
                    }
                    Err(e) => {
                        log::warn!("LLC at step {step} failed: {e}");
                        self.diag.llc_failures += 1;
                    }
                }
            }
        }
        self.log.push(Row {
            step,
            displacement: nn::displacement(params, &self.w0)?,
            increment: nn::displacement(params, last)?,
            per_layer: nn::per_layer_displacement(params, &self.w0)?,
            train_loss,
            gen_error,
            llc,
            llc_std_err,
        });
        Ok(())
    }

    fn run(mut self, mut ck: Checkpoint, emit_start: bool) -> Result<RunOutput> {
        let cfg = self.cfg;
        if emit_start {
            let p = ck.params.clone();
            self.telemetry(ck.step, &p, &p)?;
        }
        let per_epoch = data::batches(self.train.len(), cfg.opt.batch_size, 0).len() as u64;
        'outer: while ck.epoch < cfg.epochs {
            let batches = data::batches(self.train.len(), cfg.opt.batch_size, data::epoch_seed(cfg.seed, ck.epoch));
            while ck.batch < per_epoch {
                let idx = &batches[ck.batch as usize];
                let sub = self.train.select(idx);
                let before = ck.params.clone();
                let grad = match nn::loss_and_grad(&ck.params, &sub.as_batch(), &cfg.arch) {
                    Ok((_, g)) => g,
                    Err(Error::NumericalOverflow(m)) => {
                        self.diag.failure = Some(format!("diverged at step {}: {m}", ck.step + 1));
                        break 'outer;
                    }
                    Err(e) => return Err(e),
                };
                nn::optimizer_step(&mut ck.params, &grad, &cfg.opt, &mut ck.optimizer)?;
                if !ck.params.is_finite() {
                    self.diag.failure = Some(format!("non-finite parameters at step {}", ck.step + 1));
                    break 'outer;
                }
                ck.moments.push(nn::displacement(&ck.params, &before)?);
                ck.step += 1;
                ck.batch += 1;
                if ck.batch == per_epoch {
                    ck.batch = 0;
                    ck.epoch += 1;
                }
                if ck.step.is_multiple_of(cfg.telemetry_every) {
                    let last = std::mem::replace(&mut ck.last_telemetry, ck.params.clone());
                    match self.telemetry(ck.step, &ck.params, &last) {
                        Ok(()) => {}
                        Err(Error::NumericalOverflow(m)) => {
                            self.diag.failure = Some(format!("diverged at step {}: {m}", ck.step));
                            break 'outer;
                        }
                        Err(e) => return Err(e),
                    }
                }
                if cfg.checkpoint_every.is_some_and(|c| ck.step.is_multiple_of(c)) {
                    self.checkpoints.push(ck.clone());
                }
                if ck.batch == 0 {
                    continue 'outer;
                }
            }
        }
        self.diag.total_steps = ck.step;
        self.diag.increment_kurtosis = ck.moments.excess_kurtosis();
        self.diag.heavy_tailed = self.diag.increment_kurtosis > cfg.kurtosis_threshold;
        self.diag.in_theory_regime = cfg.opt.in_theory_regime();
        if self.diag.heavy_tailed {
            log::warn!(
                "increment excess kurtosis {:.1} exceeds {}; run is outside the theory regime",
                self.diag.increment_kurtosis,
                cfg.kurtosis_threshold
            );
        }
        Ok(RunOutput {
            log: self.log,
            diagnostics: self.diag,
            checkpoints: self.checkpoints,
            final_params: ck.params,
        })
    }
}

fn trainer<'a>(cfg: &'a RunConfig, train: &'a Dataset, test: &'a Dataset) -> Result<Trainer<'a>> {
    cfg.validate()?;
    check_dims(cfg, train, test)?;
    Ok(Trainer {
        cfg,
        train,
        test,
        w0: nn::init_params(&cfg.arch, cfg.seed)?,
        log: TrajectoryLog {
            run_id: cfg.hash(),
            ..Default::default()
        },
        diag: RunDiagnostics::default(),
        checkpoints: Vec::new(),
    })
}

/// Train from initialization. Divergence ends the run early with
/// `diagnostics.failure` set and the partial log kept.
pub fn train_run(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    let t = trainer(cfg, train, test)?;
    let w0 = t.w0.clone();
    let start = Checkpoint {
        step: 0,
        epoch: 0,
        batch: 0,
        params: w0.clone(),
        optimizer: OptimizerState::default(),
        last_telemetry: w0,
        moments: Moments::default(),
    };
    t.run(start, true)
}

/// Continue from a checkpoint. The log holds only rows after the
/// checkpoint step; they equal the uninterrupted run's rows bitwise.
pub fn resume(cfg: &RunConfig, checkpoint: &Checkpoint, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    let t = trainer(cfg, train, test)?;
    t.run(checkpoint.clone(), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_llc: Option<f64>,
    pub final_gen_error: f64,
    /// Points averaged (fewer than the window on short logs).
    pub llc_points: usize,
    pub gen_points: usize,
}

/// Trailing-window means of the LLC and generalization error series.
pub fn finalize(log: &TrajectoryLog) -> Result<RunSummary> {
    if log.is_empty() {
        return Err(Error::InsufficientData("empty trajectory log".into()));
    }
    let llc = log.llc_values();
    if llc.len() < FINAL_WINDOW || log.gen_error.len() < FINAL_WINDOW {
        log::warn!(
            "only {} LLC and {} error points; averaging what is available",
            llc.len(),
            log.gen_error.len()
        );
    }
    Ok(RunSummary {
        final_llc: (!llc.is_empty()).then(|| trailing_mean(&llc, FINAL_WINDOW)),
        final_gen_error: trailing_mean(&log.gen_error, FINAL_WINDOW),
        llc_points: llc.len().min(FINAL_WINDOW),
        gen_points: log.gen_error.len().min(FINAL_WINDOW),
    })
}

/// Train every config. Runs are independent and results come back in input
/// order whatever the thread count; one failure does not stop the others.
pub fn ensemble(cfgs: &[RunConfig], train: &Dataset, test: &Dataset) -> Vec<Result<RunOutput>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        cfgs.par_iter().map(|c| train_run(c, train, test)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        cfgs.iter().map(|c| train_run(c, train, test)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_blobs, SplitSpec};

    fn setup() -> (Dataset, Dataset) {
        let ds = synth_blobs(3, 4, 40, 0.5, 7).unwrap();
        split(&ds, &SplitSpec::new(0.75, 7)).unwrap()
    }

    fn cfg(epochs: u64) -> RunConfig {
        let arch = Architecture::new(vec![4, 8, 3]).unwrap();
        let mut c = RunConfig::new(arch, OptimizerConfig::sgd(0.05, 10), epochs, 3);
        c.telemetry_every = 5;
        c.llc_every = None;
        c
    }

    #[test]
    fn zero_epochs_single_row() {
        let (tr, te) = setup();
        let out = train_run(&cfg(0), &tr, &te).unwrap();
        assert_eq!(out.log.steps, vec![0]);
        assert_eq!(out.log.displacement, vec![0.0]);
    }

    #[test]
    fn frozen_dynamics() {
        let (tr, te) = setup();
        let mut c = cfg(3);
        c.opt.learning_rate = 0.0;
        let out = train_run(&c, &tr, &te).unwrap();
        assert!(out.log.len() > 1);
        assert!(out.log.displacement.iter().all(|&r| r == 0.0));
        assert!(out.log.train_loss.iter().all(|&l| l == out.log.train_loss[0]));
    }

    #[test]
    fn series_share_length_and_telemetry_cadence() {
        let (tr, te) = setup();
        let out = train_run(&cfg(4), &tr, &te).unwrap();
        let l = &out.log;
        // 90 samples, batch 10: 9 steps per epoch, 36 steps
        assert_eq!(out.diagnostics.total_steps, 36);
        assert_eq!(l.steps, vec![0, 5, 10, 15, 20, 25, 30, 35]);
        for n in [l.displacement.len(), l.train_loss.len(), l.gen_error.len(), l.llc.len(), l.per_layer.len()] {
            assert_eq!(n, l.len());
        }
        assert!(l.displacement.iter().all(|&r| r >= 0.0));
        for (r, layers) in l.displacement.iter().zip(&l.per_layer) {
            let total: f64 = layers.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((total - r).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_identical() {
        let (tr, te) = setup();
        let a = train_run(&cfg(2), &tr, &te).unwrap();
        let b = train_run(&cfg(2), &tr, &te).unwrap();
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn divergence_keeps_partial_log() {
        let (tr, te) = setup();
        let mut c = cfg(50);
        c.opt.learning_rate = 1e6;
        let out = train_run(&c, &tr, &te).unwrap();
        assert!(out.diagnostics.failure.is_some());
        assert!(!out.log.is_empty());
    }

    #[test]
    fn dimension_mismatch() {
        let (tr, te) = setup();
        let mut c = cfg(1);
        c.arch = Architecture::new(vec![5, 8, 3]).unwrap();
        assert!(matches!(train_run(&c, &tr, &te), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn generalization_error_cases() {
        let (tr, _) = setup();
        let c = cfg(20);
        let out = train_run(&c, &tr, &tr).unwrap();
        let e = generalization_error(&out.final_params, &c.arch, &tr).unwrap();
        assert!((0.0..=1.0).contains(&e));
        // row permutation invariance
        let mut idx: Vec<usize> = (0..tr.len()).collect();
        idx.reverse();
        let e2 = generalization_error(&out.final_params, &c.arch, &tr.select(&idx)).unwrap();
        assert_eq!(e, e2);
    }

    #[test]
    fn finalize_trailing_means() {
        let mut log = TrajectoryLog::default();
        for i in 0..15u64 {
            log.push(Row {
                step: i * 100,
                displacement: 0.0,
                increment: 0.0,
                per_layer: vec![],
                train_loss: 0.0,
                gen_error: 0.25,
                llc: (i >= 5).then(|| (i - 4) as f64),
                llc_std_err: None,
            });
        }
        let s = finalize(&log).unwrap();
        assert_eq!(s.final_llc, Some(5.5));
        assert_eq!(s.final_gen_error, 0.25);
    }

    #[test]
    fn csv_round_trip() {
        let (tr, te) = setup();
        let mut c = cfg(2);
        c.llc_every = Some(10);
        c.sgld.draws = 20;
        c.sgld.burn_in = 5;
        let out = train_run(&c, &tr, &te).unwrap();
        let mut buf = Vec::new();
        out.log.write_csv_to(&mut buf).unwrap();
        let mut back = TrajectoryLog::read_csv_from(buf.as_slice()).unwrap();
        back.run_id = out.log.run_id.clone();
        assert_eq!(back, out.log);
        assert_eq!(finalize(&back).unwrap(), finalize(&out.log).unwrap());
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let (tr, te) = setup();
        let mut c = cfg(3);
        c.opt = OptimizerConfig::adamw(0.01, 0.01, 10);
        c.checkpoint_every = Some(9);
        let out = train_run(&c, &tr, &te).unwrap();
        let ck = &out.checkpoints[1];
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), &c.arch).unwrap();
        assert_eq!(&back, ck);
    }
}
