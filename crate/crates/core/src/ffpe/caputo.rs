use statrs::function::gamma::gamma;

use crate::{Error, Result};

/// L1 discretization of the Caputo derivative of order `alpha` on a uniform
/// grid with step `dt`:
///
/// `D^α f(t_n) ≈ dt^-α / Γ(2-α) Σ_{k=0}^{n-1} b_k (f_{n-k} - f_{n-k-1})`,
/// `b_k = (k+1)^(1-α) - k^(1-α)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaputoKernel {
    pub alpha: f64,
    pub dt: f64,
    /// `b_0, b_1, ...`; grown on demand.
    pub weights: Vec<f64>,
    /// `dt^-α / Γ(2-α)`.
    pub scale: f64,
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("fractional order must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

impl CaputoKernel {
    pub fn new(alpha: f64, dt: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        Ok(CaputoKernel {
            alpha,
            dt,
            weights: vec![1.0],
            scale: dt.powf(-alpha) / gamma(2.0 - alpha),
        })
    }

    pub fn weight(&mut self, k: usize) -> f64 {
        while self.weights.len() <= k {
            let j = self.weights.len() as f64;
            let e = 1.0 - self.alpha;
            self.weights.push((j + 1.0).powf(e) - j.powf(e));
        }
        self.weights[k]
    }
}

/// Caputo derivative of uniformly sampled `f(t_0), ..., f(t_n)`. Entry 0 is
/// zero; `alpha = 1` gives backward differences.
pub fn caputo_derivative(samples: &[f64], alpha: f64, dt: f64) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData("need at least two samples".into()));
    }
    let mut kernel = CaputoKernel::new(alpha, dt)?;
    let diffs: Vec<f64> = samples.windows(2).map(|w| w[1] - w[0]).collect();
    let mut out = vec![0.0; samples.len()];
    for n in 1..samples.len() {
        let mut acc = 0.0;
        for k in 0..n {
            acc += kernel.weight(k) * diffs[n - 1 - k];
        }
        out[n] = kernel.scale * acc;
    }
    Ok(out)
}
