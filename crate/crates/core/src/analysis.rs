//! Scaling-law analysis of displacement trajectories.
//!
//! The displacement of a walker on a fractal grows as `R(t) ~ t^(d_s / 2λ)`.
//! A straight-line fit of `log R` against `log t` therefore yields the slope
//! `1/ν`, and with the final LLC `λ` the spectral dimension
//! `d_s = 2 λ slope` and the walker dimension `d_walk = 2λ / d_s = 1/slope`.

use serde::{Deserialize, Serialize};

use crate::stats::{self, LinearFit};
use crate::{Error, Result};

/// Fraction of leading telemetry points treated as pre-asymptotic.
pub const DEFAULT_DISCARD_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitWindow {
    pub t_min: f64,
    pub t_max: f64,
}

impl FitWindow {
    pub const ALL: FitWindow = FitWindow {
        t_min: 0.0,
        t_max: f64::INFINITY,
    };

    /// Window starting after the first `fraction` of the (positive-time)
    /// points.
    pub fn discard_leading(ts: &[f64], fraction: f64) -> FitWindow {
        let positive: Vec<f64> = ts.iter().copied().filter(|&t| t > 0.0).collect();
        if positive.is_empty() {
            return FitWindow::ALL;
        }
        let skip = ((positive.len() as f64) * fraction).floor() as usize;
        let skip = skip.min(positive.len() - 1);
        FitWindow {
            t_min: positive[skip],
            t_max: f64::INFINITY,
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_min && t <= self.t_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// `1/ν = d_s / 2λ`.
    pub slope: f64,
    /// Intercept `c` of `log R = slope log t + c`.
    pub intercept: f64,
    pub r_squared: f64,
    pub window: FitWindow,
    pub points: usize,
}

impl PowerLawFit {
    /// `ν = 1/slope`, the walker exponent of `R ~ t^(1/ν)`.
    pub fn nu(&self) -> f64 {
        1.0 / self.slope
    }

    /// `ν >= 2`: displacement grows no faster than ordinary diffusion.
    pub fn is_subdiffusive(&self) -> bool {
        self.slope <= 0.5
    }
}

/// OLS fit of `log R` on `log t` over the points inside `window` with
/// `t > 0` and `R > 0`.
pub fn fit_power_law(ts: &[f64], rs: &[f64], window: FitWindow) -> Result<PowerLawFit> {
    if ts.len() != rs.len() {
        return Err(Error::ShapeMismatch(format!("{} times, {} displacements", ts.len(), rs.len())));
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) = ts
        .iter()
        .zip(rs)
        .filter(|&(&t, &r)| t > 0.0 && r > 0.0 && window.contains(t))
        .map(|(&t, &r)| (t.ln(), r.ln()))
        .unzip();
    if lx.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} positive points in the fit window, need 3",
            lx.len()
        )));
    }
    let LinearFit {
        slope,
        intercept,
        r_squared,
        n,
    } = stats::ols(&lx, &ly)?;
    Ok(PowerLawFit {
        slope,
        intercept,
        r_squared,
        window,
        points: n,
    })
}

/// `d_s = 2 λ slope`.
pub fn spectral_dimension(fit: &PowerLawFit, lambda_final: f64) -> Result<f64> {
    if !(fit.slope > 0.0) || !(lambda_final > 0.0) {
        return Err(Error::InvalidInput(format!(
            "spectral dimension needs positive slope and λ (slope {}, λ {lambda_final})",
            fit.slope
        )));
    }
    Ok(2.0 * lambda_final * fit.slope)
}

/// `d_walk = 2λ / d_s`; 2 is ordinary diffusion.
pub fn walker_dimension(lambda: f64, d_s: f64) -> f64 {
    2.0 * lambda / d_s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityVerdict {
    pub lambda_final: f64,
    /// Mean of the retained LLC series (time average).
    pub lambda_bar: f64,
    pub lemma2_holds: bool,
    pub corollary3_holds: bool,
    pub margin_lemma2: f64,
    pub margin_corollary3: f64,
    pub retained: usize,
    /// Fewer than ten estimates were available.
    pub short_series: bool,
}

/// Mean of the last `k` values (all of them when fewer are available).
pub fn trailing_mean(xs: &[f64], k: usize) -> f64 {
    let start = xs.len().saturating_sub(k);
    stats::mean(&xs[start..])
}

/// Test `d_s <= λ_final` and `d_s <= λ̄`, with `λ_final` the trailing-10 mean
/// and `λ̄` the mean after discarding the leading `discard_fraction` of the
/// series.
pub fn check_inequalities(llc: &[f64], d_s: f64, discard_fraction: f64) -> Result<InequalityVerdict> {
    if llc.is_empty() {
        return Err(Error::InsufficientData("empty LLC series".into()));
    }
    if llc.iter().all(|&v| v < 0.0) {
        return Err(Error::InvalidInput("every LLC estimate is negative".into()));
    }
    let short_series = llc.len() < 10;
    if short_series {
        log::warn!("LLC series has {} points; inequality check is indicative only", llc.len());
    }
    let skip = ((llc.len() as f64) * discard_fraction).floor() as usize;
    let retained = &llc[skip.min(llc.len() - 1)..];
    let lambda_final = trailing_mean(llc, 10);
    let lambda_bar = stats::mean(retained);
    Ok(InequalityVerdict {
        lambda_final,
        lambda_bar,
        lemma2_holds: d_s <= lambda_final,
        corollary3_holds: d_s <= lambda_bar,
        margin_lemma2: lambda_final - d_s,
        margin_corollary3: lambda_bar - d_s,
        retained: retained.len(),
        short_series,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub fit: PowerLawFit,
    pub d_s: f64,
    /// `1/slope`.
    pub nu: f64,
    pub d_walk: f64,
    pub lambda_final: f64,
    pub lambda_bar: f64,
    pub lemma2_holds: bool,
    pub corollary3_holds: bool,
    /// Smaller of the two inequality margins.
    pub margin: f64,
    pub margin_lemma2: f64,
    pub margin_corollary3: f64,
    pub subdiffusive: bool,
    /// Exponent `2 - 1/ν_w` of the effective diffusion coefficient, `ν_w = d_s/2λ`.
    pub diffusion_exponent: f64,
}

/// Combine a displacement fit and an LLC series into the full report.
pub fn dimension_report(fit: PowerLawFit, llc: &[f64], discard_fraction: f64) -> Result<DimensionReport> {
    if llc.is_empty() {
        return Err(Error::InsufficientData("empty LLC series".into()));
    }
    let lambda_final = trailing_mean(llc, 10);
    let d_s = spectral_dimension(&fit, lambda_final)?;
    let v = check_inequalities(llc, d_s, discard_fraction)?;
    let eff = effective_diffusion(1.0, lambda_final, d_s)?;
    Ok(DimensionReport {
        fit,
        d_s,
        nu: fit.nu(),
        d_walk: walker_dimension(lambda_final, d_s),
        lambda_final,
        lambda_bar: v.lambda_bar,
        lemma2_holds: v.lemma2_holds,
        corollary3_holds: v.corollary3_holds,
        margin: v.margin_lemma2.min(v.margin_corollary3),
        margin_lemma2: v.margin_lemma2,
        margin_corollary3: v.margin_corollary3,
        subdiffusive: fit.is_subdiffusive(),
        diffusion_exponent: eff.exponent(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveDiffusion {
    pub xi: f64,
    /// `ν_w = d_s / 2λ`.
    pub nu_w: f64,
    /// `D_ξ = ξ^(2 - 1/ν_w)`.
    pub d_xi: f64,
}

impl EffectiveDiffusion {
    pub fn exponent(&self) -> f64 {
        2.0 - 1.0 / self.nu_w
    }
}

pub fn effective_diffusion(xi: f64, lambda_w: f64, d_s: f64) -> Result<EffectiveDiffusion> {
    if !(xi > 0.0 && lambda_w > 0.0 && d_s > 0.0) {
        return Err(Error::InvalidInput(format!(
            "effective diffusion needs positive ξ, λ, d_s (got {xi}, {lambda_w}, {d_s})"
        )));
    }
    Ok(effective_diffusion_from_nu(xi, d_s / (2.0 * lambda_w)))
}

pub fn effective_diffusion_from_nu(xi: f64, nu_w: f64) -> EffectiveDiffusion {
    EffectiveDiffusion {
        xi,
        nu_w,
        d_xi: xi.powf(2.0 - 1.0 / nu_w),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub median: f64,
    pub skewness: f64,
    pub min: f64,
    pub max: f64,
    /// Median lies above the midpoint of the observed range.
    pub concentrated_high: bool,
}

/// Histogram of per-run diffusion exponents with equal-width bins over the
/// observed range (a single bin when all values coincide).
pub fn diffusion_exponent_histogram(exponents: &[f64], bins: usize) -> Result<ExponentHistogram> {
    if exponents.is_empty() || bins == 0 {
        return Err(Error::InsufficientData("no exponents or zero bins".into()));
    }
    if exponents.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite exponent".into()));
    }
    let min = exponents.iter().copied().fold(f64::INFINITY, f64::min);
    let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (edges, counts) = if max == min {
        (vec![min, max], vec![exponents.len()])
    } else {
        let width = (max - min) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| min + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &e in exponents {
            let i = (((e - min) / width).floor() as usize).min(bins - 1);
            counts[i] += 1;
        }
        (edges, counts)
    };
    let median = stats::median(exponents);
    Ok(ExponentHistogram {
        edges,
        counts,
        median,
        skewness: stats::skewness(exponents),
        min,
        max,
        concentrated_high: max > min && median > 0.5 * (min + max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlcGeneralizationFit {
    /// Generalization error regressed on final LLC.
    pub fit: LinearFit,
    pub pearson_r: f64,
    pub points: usize,
}

pub fn llc_vs_generalization(finals: &[(f64, f64)]) -> Result<LlcGeneralizationFit> {
    if finals.len() < 5 {
        return Err(Error::InsufficientData(format!("{} points, need 5", finals.len())));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = finals.iter().copied().unzip();
    let pearson_r = stats::pearson(&x, &y)?;
    Ok(LlcGeneralizationFit {
        fit: stats::ols(&x, &y)?,
        pearson_r,
        points: finals.len(),
    })
}
