//! Local learning coefficient estimation.
//!
//! [`estimate_llc`] samples the tempered, localized posterior around a point
//! `w*` with SGLD and reports `λ̂ = m β (E[L_m(w)] - L_m(w*))`, `β = 1/log m`.
//! [`volume_scan`] measures the same exponent directly, as the slope of
//! `log V(ε)` against `log ε` where `V(ε)` is the fraction of a ball around
//! `w*` with `L(w) - L(w*) < ε`. On toy potentials the two must agree.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::{self, Architecture, ParamVector};
use crate::rng::{self, domain};
use crate::stats::{self, LinearFit};
use crate::{Error, Result};

/// Chains whose loss exceeds this are treated as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// A loss surface the sampler can explore.
pub trait Potential: Sync {
    fn dim(&self) -> usize;
    /// Number of training samples `m`; sets `β = 1/log m` and the `m β` scale.
    fn sample_size(&self) -> usize;
    /// Full empirical loss `L_m(w)`.
    fn loss(&self, w: &[f64]) -> Result<f64>;
    /// Unbiased minibatch estimate of the loss and its gradient.
    fn minibatch_loss_and_grad(&self, w: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)>;
}

/// Mean cross-entropy of an MLP on a dataset.
pub struct NetworkPotential<'a> {
    arch: &'a Architecture,
    data: &'a Dataset,
    minibatch: usize,
    template: ParamVector,
}

impl<'a> NetworkPotential<'a> {
    pub fn new(arch: &'a Architecture, data: &'a Dataset, minibatch: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InsufficientData("empty dataset".into()));
        }
        let template = ParamVector::from_values(arch, vec![0.0; arch.param_count()])?;
        Ok(NetworkPotential {
            arch,
            data,
            minibatch: minibatch.clamp(1, data.len()),
            template,
        })
    }

    fn params(&self, w: &[f64]) -> ParamVector {
        ParamVector {
            values: w.to_vec(),
            layer_offsets: self.template.layer_offsets.clone(),
        }
    }
}

impl Potential for NetworkPotential<'_> {
    fn dim(&self) -> usize {
        self.template.dim()
    }

    fn sample_size(&self) -> usize {
        self.data.len()
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        nn::loss(&self.params(w), &self.data.as_batch(), self.arch)
    }

    fn minibatch_loss_and_grad(&self, w: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        let p = self.params(w);
        let (loss, grad) = if self.minibatch >= self.data.len() {
            nn::loss_and_grad(&p, &self.data.as_batch(), self.arch)?
        } else {
            let idx = index::sample(rng, self.data.len(), self.minibatch).into_vec();
            let batch = self.data.select(&idx);
            nn::loss_and_grad(&p, &batch.as_batch(), self.arch)?
        };
        Ok((loss, grad.values))
    }
}

/// Analytic potentials with known learning coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyPotential {
    /// `||w||^2` in `dim` dimensions: regular, `λ = d/2`.
    Quadratic { dim: usize },
    /// `w^4`: `λ = 1/4`.
    Quartic,
    /// `w1^2 w2^2`: `λ = 1/2` with a logarithmic correction.
    ProductSquares,
    /// `slope * w`: no minimum anywhere.
    Linear { slope: f64 },
}

impl ToyPotential {
    pub fn dim(&self) -> usize {
        match *self {
            ToyPotential::Quadratic { dim } => dim,
            ToyPotential::Quartic | ToyPotential::Linear { .. } => 1,
            ToyPotential::ProductSquares => 2,
        }
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        match *self {
            ToyPotential::Quadratic { .. } => w.iter().map(|x| x * x).sum(),
            ToyPotential::Quartic => w[0].powi(4),
            ToyPotential::ProductSquares => (w[0] * w[1]).powi(2),
            ToyPotential::Linear { slope } => slope * w[0],
        }
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        match *self {
            ToyPotential::Quadratic { .. } => w.iter().map(|x| 2.0 * x).collect(),
            ToyPotential::Quartic => vec![4.0 * w[0].powi(3)],
            ToyPotential::ProductSquares => vec![2.0 * w[0] * w[1] * w[1], 2.0 * w[1] * w[0] * w[0]],
            ToyPotential::Linear { slope } => vec![slope],
        }
    }

    /// Exact learning coefficient at the origin, where one exists.
    pub fn learning_coefficient(&self) -> Option<f64> {
        match *self {
            ToyPotential::Quadratic { dim } => Some(dim as f64 / 2.0),
            ToyPotential::Quartic => Some(0.25),
            ToyPotential::ProductSquares => Some(0.5),
            ToyPotential::Linear { .. } => None,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            ToyPotential::Quadratic { dim } => format!("quadratic_d{dim}"),
            ToyPotential::Quartic => "quartic".into(),
            ToyPotential::ProductSquares => "product_squares".into(),
            ToyPotential::Linear { .. } => "linear".into(),
        }
    }
}

/// A toy potential standing in for an empirical loss over `sample_size` points.
#[derive(Debug, Clone, Copy)]
pub struct ToyModel {
    pub potential: ToyPotential,
    pub sample_size: usize,
}

impl Potential for ToyModel {
    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn sample_size(&self) -> usize {
        self.sample_size
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        Ok(self.potential.value(w))
    }

    fn minibatch_loss_and_grad(&self, w: &[f64], _rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        Ok((self.potential.value(w), self.potential.gradient(w)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgldConfig {
    /// SGLD step size ε; the injected noise has variance ε.
    pub step_size: f64,
    /// Strength of the Gaussian restraint `γ_loc (w - w*)`, about `100/δ²`.
    pub localization: f64,
    pub chains: usize,
    /// Total draws per chain, burn-in included.
    pub draws: usize,
    pub burn_in: usize,
    /// Minibatch size; `None` uses the full dataset.
    #[serde(default)]
    pub minibatch: Option<usize>,
    /// Override for `β`; defaults to `1/log m`.
    #[serde(default)]
    pub inverse_temperature: Option<f64>,
}

impl Default for SgldConfig {
    fn default() -> Self {
        SgldConfig {
            step_size: 1e-4,
            localization: 100.0,
            chains: 4,
            draws: 200,
            burn_in: 90,
            minibatch: None,
            inverse_temperature: None,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self, sample_size: usize) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.localization >= 0.0) {
            return Err(Error::InvalidInput("SGLD step size must be positive, localization nonnegative".into()));
        }
        if self.chains == 0 {
            return Err(Error::InvalidInput("need at least one chain".into()));
        }
        if self.draws <= self.burn_in {
            return Err(Error::InvalidInput(format!(
                "draws ({}) must exceed burn-in ({})",
                self.draws, self.burn_in
            )));
        }
        if self.inverse_temperature.is_none() && sample_size < 3 {
            return Err(Error::InvalidInput(format!("β = 1/log m needs m >= 3, got {sample_size}")));
        }
        Ok(())
    }

    pub fn beta(&self, sample_size: usize) -> f64 {
        self.inverse_temperature.unwrap_or_else(|| 1.0 / (sample_size as f64).ln())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlcEstimate {
    pub lambda_hat: f64,
    /// Standard error across chains.
    pub std_err: f64,
    pub chains_used: usize,
    pub chains_dropped: usize,
    pub negative_flag: bool,
    /// `L_m(w*)`.
    pub center_loss: f64,
    pub chain_estimates: Vec<f64>,
    pub beta: f64,
    pub sample_size: usize,
}

enum ChainOutcome {
    Ok(f64),
    Diverged(String),
}

fn run_chain(
    center: &[f64],
    potential: &dyn Potential,
    cfg: &SgldConfig,
    nbeta: f64,
    center_loss: f64,
    mut rng: ChaCha8Rng,
) -> ChainOutcome {
    let mut w = center.to_vec();
    let half = 0.5 * cfg.step_size;
    let noise = cfg.step_size.sqrt();
    let mut sum = 0.0;
    let mut kept = 0usize;
    for draw in 0..cfg.draws {
        let (loss, grad) = match potential.minibatch_loss_and_grad(&w, &mut rng) {
            Ok(v) => v,
            Err(e) => return ChainOutcome::Diverged(e.to_string()),
        };
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return ChainOutcome::Diverged(format!("loss {loss:e} at draw {draw}"));
        }
        if draw >= cfg.burn_in {
            sum += loss;
            kept += 1;
        }
        for ((wi, ci), gi) in w.iter_mut().zip(center).zip(&grad) {
            let z: f64 = rng.sample(StandardNormal);
            *wi += -half * (nbeta * gi + cfg.localization * (*wi - ci)) + noise * z;
        }
    }
    ChainOutcome::Ok(nbeta * (sum / kept as f64 - center_loss))
}

/// Localized-SGLD estimate of the learning coefficient at `center`.
/// Chains are independent, each seeded from `(seed, chain)`.
pub fn estimate_llc(center: &[f64], potential: &dyn Potential, cfg: &SgldConfig, seed: u64) -> Result<LlcEstimate> {
    let m = potential.sample_size();
    cfg.validate(m)?;
    if center.len() != potential.dim() {
        return Err(Error::ShapeMismatch(format!(
            "center has {} coordinates, potential {}",
            center.len(),
            potential.dim()
        )));
    }
    if center.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite center".into()));
    }
    let beta = cfg.beta(m);
    let nbeta = m as f64 * beta;
    let center_loss = potential.loss(center)?;

    let chain = |c: usize| {
        run_chain(
            center,
            potential,
            cfg,
            nbeta,
            center_loss,
            rng::stream(seed, domain::LLC_CHAIN, c as u64),
        )
    };
    #[cfg(feature = "parallel")]
    let outcomes: Vec<ChainOutcome> = {
        use rayon::prelude::*;
        (0..cfg.chains).into_par_iter().map(chain).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<ChainOutcome> = (0..cfg.chains).map(chain).collect();

    let mut chain_estimates = Vec::with_capacity(cfg.chains);
    let mut dropped = 0;
    for (c, o) in outcomes.into_iter().enumerate() {
        match o {
            ChainOutcome::Ok(v) => chain_estimates.push(v),
            ChainOutcome::Diverged(why) => {
                log::warn!("SGLD chain {c} dropped: {why}");
                dropped += 1;
            }
        }
    }
    if chain_estimates.is_empty() {
        return Err(Error::NumericalOverflow(format!("all {} SGLD chains diverged", cfg.chains)));
    }
    let lambda_hat = stats::mean(&chain_estimates);
    let std_err = stats::sample_std(&chain_estimates) / (chain_estimates.len() as f64).sqrt();
    Ok(LlcEstimate {
        lambda_hat,
        std_err,
        chains_used: chain_estimates.len(),
        chains_dropped: dropped,
        negative_flag: lambda_hat < 0.0,
        center_loss,
        chain_estimates,
        beta,
        sample_size: m,
    })
}

/// One estimate per checkpoint; each point seeds its chains from
/// `(seed, step)`, so repeated checkpoints give repeated estimates.
pub fn llc_series(
    checkpoints: &[(u64, ParamVector)],
    arch: &Architecture,
    data: &Dataset,
    cfg: &SgldConfig,
    seed: u64,
) -> Vec<Result<LlcEstimate>> {
    checkpoints
        .iter()
        .map(|(step, params)| {
            let potential = NetworkPotential::new(arch, data, cfg.minibatch.unwrap_or(data.len()))?;
            estimate_llc(&params.values, &potential, cfg, rng::derive_seed(seed, domain::LLC, *step))
        })
        .collect()
}

/// Fraction of estimates flagged negative (the point was not near a minimum).
pub fn near_stability_diagnostic(series: &[LlcEstimate]) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::InsufficientData("empty LLC series".into()));
    }
    Ok(series.iter().filter(|e| e.negative_flag).count() as f64 / series.len() as f64)
}

/// `WBIC = m L_m(w*) + λ log m`.
pub fn wbic(center_loss: f64, lambda: f64, m: f64) -> Result<f64> {
    if !(m >= 2.0) {
        return Err(Error::InvalidInput(format!("WBIC needs m >= 2, got {m}")));
    }
    Ok(m * center_loss + lambda * m.ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScan {
    /// Thresholds in decreasing order.
    pub epsilons: Vec<f64>,
    /// Fraction of the ball with `L - L(w*) < ε`.
    pub volumes: Vec<f64>,
    pub hits: Vec<u64>,
    /// Thresholds left out of the fit for having no hits.
    pub excluded: Vec<f64>,
    pub lambda: f64,
    pub fit: LinearFit,
}

/// Monte Carlo volume scaling of `{w in B(center, radius) : L(w) - L(center) < ε}`.
pub fn volume_scan(
    loss: impl Fn(&[f64]) -> f64,
    center: &[f64],
    epsilons: &[f64],
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<VolumeScan> {
    let d = center.len();
    if d == 0 || d > 4 {
        return Err(Error::InvalidInput(format!("volume scan supports 1..=4 dimensions, got {d}")));
    }
    if epsilons.len() < 3 || epsilons.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::InvalidInput("need at least 3 positive thresholds".into()));
    }
    let mut eps = epsilons.to_vec();
    eps.sort_by(|a, b| b.total_cmp(a));
    if (eps[0] / eps[eps.len() - 1]).log10() < 2.0 - 1e-9 {
        return Err(Error::InvalidInput("threshold grid must span at least two decades".into()));
    }
    let l0 = loss(center);
    let mut rng = rng::stream(seed, domain::VOLUME, 0);
    let mut hits = vec![0u64; eps.len()];
    let mut w = vec![0.0; d];
    let mut dir = vec![0.0; d];
    for _ in 0..samples {
        let norm = loop {
            dir.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
            let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                break n;
            }
        };
        let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
        for i in 0..d {
            w[i] = center[i] + r * dir[i] / norm;
        }
        let excess = loss(&w) - l0;
        // eps is decreasing, so hits form a prefix
        for (h, &e) in hits.iter_mut().zip(&eps) {
            if excess < e {
                *h += 1;
            } else {
                break;
            }
        }
    }
    let volumes: Vec<f64> = hits.iter().map(|&h| h as f64 / samples as f64).collect();
    let (mut lx, mut ly, mut excluded) = (Vec::new(), Vec::new(), Vec::new());
    for ((&e, &v), &h) in eps.iter().zip(&volumes).zip(&hits) {
        if h == 0 {
            log::warn!("volume scan: no samples below ε = {e:e}; excluded");
            excluded.push(e);
        } else {
            lx.push(e.ln());
            ly.push(v.ln());
        }
    }
    if lx.len() < 3 {
        return Err(Error::InsufficientData(format!("{} thresholds with hits", lx.len())));
    }
    let fit = stats::ols(&lx, &ly)?;
    Ok(VolumeScan {
        epsilons: eps,
        volumes,
        hits,
        excluded,
        lambda: fit.slope,
        fit,
    })
}

/// Geometric grid of `n` thresholds from `hi` down to `lo`.
pub fn log_grid(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    let (a, b) = (hi.ln(), lo.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(p: ToyPotential) -> ToyModel {
        ToyModel {
            potential: p,
            sample_size: 10_000,
        }
    }

    fn toy_cfg() -> SgldConfig {
        SgldConfig {
            step_size: 1e-4,
            localization: 1.0,
            chains: 8,
            draws: 3000,
            burn_in: 500,
            ..SgldConfig::default()
        }
    }

    #[test]
    fn quadratic_is_half_dimension() {
        for d in [1usize, 4] {
            let est = estimate_llc(&vec![0.0; d], &toy(ToyPotential::Quadratic { dim: d }), &toy_cfg(), 3).unwrap();
            let target = d as f64 / 2.0;
            assert!((est.lambda_hat - target).abs() < 0.2 * target, "d={d}: {est:?}");
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let m = toy(ToyPotential::Quartic);
        let a = estimate_llc(&[0.0], &m, &SgldConfig::default(), 5).unwrap();
        let b = estimate_llc(&[0.0], &m, &SgldConfig::default(), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn off_minimum_point_goes_negative() {
        let m = toy(ToyPotential::Linear { slope: 1.0 });
        let est = estimate_llc(&[0.0], &m, &toy_cfg(), 1).unwrap();
        assert!(est.negative_flag);
        assert!(est.chain_estimates.iter().all(|&v| v < 0.0));
    }

    #[test]
    fn divergent_chains_are_dropped() {
        let cfg = SgldConfig {
            step_size: 1.0,
            ..toy_cfg()
        };
        let err = estimate_llc(&[0.5], &toy(ToyPotential::Quartic), &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::NumericalOverflow(_)));
    }

    #[test]
    fn config_validation() {
        let bad = SgldConfig {
            draws: 10,
            burn_in: 10,
            ..SgldConfig::default()
        };
        assert!(bad.validate(100).is_err());
        assert!(SgldConfig::default().validate(2).is_err());
    }

    #[test]
    fn near_stability_fraction() {
        let mk = |v: f64| LlcEstimate {
            lambda_hat: v,
            std_err: 0.0,
            chains_used: 1,
            chains_dropped: 0,
            negative_flag: v < 0.0,
            center_loss: 0.0,
            chain_estimates: vec![v],
            beta: 1.0,
            sample_size: 10,
        };
        let all_pos: Vec<_> = [1.0, 2.0].map(mk).to_vec();
        assert_eq!(near_stability_diagnostic(&all_pos).unwrap(), 0.0);
        let mixed: Vec<_> = [1.0, -0.5, 2.0, 3.0].map(mk).to_vec();
        assert_eq!(near_stability_diagnostic(&mixed).unwrap(), 0.25);
        assert!(near_stability_diagnostic(&[]).is_err());
    }

    #[test]
    fn wbic_values() {
        assert_eq!(wbic(1.5, 0.0, 10.0).unwrap(), 15.0);
        let e = std::f64::consts::E;
        assert!((wbic(1.0, 2.0, e).unwrap() - (e + 2.0)).abs() < 1e-15);
        assert!(wbic(1.0, 3.0, 50.0).unwrap() > wbic(1.0, 2.0, 50.0).unwrap());
        assert!(wbic(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn volume_scan_quadratic_and_quartic() {
        let grid = log_grid(1e-1, 1e-4, 7);
        let q = volume_scan(|w| w[0] * w[0], &[0.0], &grid, 1.0, 200_000, 1).unwrap();
        assert!((q.lambda - 0.5).abs() < 0.05, "{}", q.lambda);
        let grid = log_grid(1e-1, 1e-6, 7);
        let q4 = volume_scan(|w| w[0].powi(4), &[0.0], &grid, 1.0, 200_000, 1).unwrap();
        assert!((q4.lambda - 0.25).abs() < 0.05, "{}", q4.lambda);
    }

    #[test]
    fn volume_scan_product_squares() {
        let grid = log_grid(1e-6, 1e-8, 5);
        let s = volume_scan(|w| (w[0] * w[1]).powi(2), &[0.0, 0.0], &grid, 1.0, 1_000_000, 2).unwrap();
        assert!((s.lambda - 0.5).abs() < 0.1, "{}", s.lambda);
    }

    #[test]
    fn volume_scan_rejects_narrow_grid() {
        assert!(volume_scan(|w| w[0] * w[0], &[0.0], &[0.1, 0.05, 0.01], 1.0, 100, 0).is_err());
    }

    #[test]
    fn zero_hit_thresholds_excluded() {
        let grid = log_grid(1e-1, 1e-12, 6);
        let s = volume_scan(|w| w[0] * w[0], &[0.0], &grid, 1.0, 1000, 0).unwrap();
        assert!(!s.excluded.is_empty());
    }
}
