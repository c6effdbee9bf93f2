//! One-dimensional time-fractional Fokker-Planck solver.
//!
//! Solves `D_t^α p = ∂x (D(x) ∂x p + γ p ∂x V)` on `[a, b]` with reflecting
//! walls. Space is a conservative finite-volume scheme with
//! Scharfetter-Gummel fluxes, for which the discrete Boltzmann density
//! `exp(-γV/D)` is an exact zero-flux state when `D` is constant. Time uses
//! the implicit L1 scheme with the full Caputo history.

mod caputo;

use serde::{Deserialize, Serialize};

use crate::llc::Potential;
use crate::{Error, Result};

pub use caputo::{caputo_derivative, CaputoKernel};

/// Hard limit on per-step relative mass drift.
pub const MASS_DRIFT_LIMIT: f64 = 1e-8;
/// Negative density below this magnitude is rounding noise.
pub const NEGATIVE_TOLERANCE: f64 = 1e-12;
/// Largest `max D / min D` accepted as "constant" diffusion.
pub const CONSTANT_D_RATIO: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub a: f64,
    pub b: f64,
    pub cells: usize,
}

impl Grid {
    pub fn new(a: f64, b: f64, cells: usize) -> Result<Self> {
        if !(b > a) || cells < 3 {
            return Err(Error::InvalidInput(format!("grid [{a}, {b}] with {cells} cells")));
        }
        Ok(Grid { a, b, cells })
    }

    pub fn dx(&self) -> f64 {
        (self.b - self.a) / self.cells as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.cells).map(|i| self.a + (i as f64 + 0.5) * dx).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfpeProblem {
    pub grid: Grid,
    /// Potential at cell centers.
    pub potential: Vec<f64>,
    /// Diffusion coefficient per cell.
    pub diffusion: Vec<f64>,
    pub gamma: f64,
    pub alpha: f64,
    pub dt: f64,
}

impl FfpeProblem {
    pub fn new(
        grid: Grid,
        potential: impl Fn(f64) -> f64,
        diffusion: impl Fn(f64) -> f64,
        gamma: f64,
        alpha: f64,
        dt: f64,
    ) -> Result<Self> {
        let xs = grid.centers();
        Self::from_values(
            grid,
            xs.iter().map(|&x| potential(x)).collect(),
            xs.iter().map(|&x| diffusion(x)).collect(),
            gamma,
            alpha,
            dt,
        )
    }

    pub fn from_values(
        grid: Grid,
        potential: Vec<f64>,
        diffusion: Vec<f64>,
        gamma: f64,
        alpha: f64,
        dt: f64,
    ) -> Result<Self> {
        let p = FfpeProblem {
            grid,
            potential,
            diffusion,
            gamma,
            alpha,
            dt,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.cells;
        if self.potential.len() != n || self.diffusion.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} cells but {} potential and {} diffusion values",
                self.potential.len(),
                self.diffusion.len()
            )));
        }
        if self.potential.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("potential must be finite".into()));
        }
        if self.diffusion.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidInput("diffusion must be positive".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidInput(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {}", self.dt)));
        }
        caputo::check_alpha(self.alpha)
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mut p = self.clone();
        p.alpha = alpha;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfpeState {
    /// Density per cell; `Σ p dx = 1`.
    pub p: Vec<f64>,
    pub t: f64,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    /// `|mass - initial mass|` after the step.
    pub mass_drift: f64,
    /// Cells below `-NEGATIVE_TOLERANCE` that had to be clipped.
    pub clipped: usize,
}

/// Test hooks for mutation checks; never set in normal use.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolverFaults {
    pub flip_drift: bool,
}

/// `B(z) = z / (e^z - 1)`.
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        1.0 - z / 2.0 + z * z / 12.0
    } else {
        z / z.exp_m1()
    }
}

/// Tridiagonal generator `A` with `(A p)_i = (F_{i-1/2} - F_{i+1/2}) / dx`.
/// Columns sum to zero, so `A` conserves mass exactly.
#[derive(Debug, Clone)]
pub struct FluxOperator {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl FluxOperator {
    pub fn new(problem: &FfpeProblem, faults: SolverFaults) -> Self {
        let n = problem.grid.cells;
        let dx = problem.grid.dx();
        let sign = if faults.flip_drift { -1.0 } else { 1.0 };
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n - 1 {
            let (d0, d1) = (problem.diffusion[i], problem.diffusion[i + 1]);
            let d_face = 2.0 * d0 * d1 / (d0 + d1);
            let du = sign * problem.gamma * (problem.potential[i + 1] - problem.potential[i]) / d_face;
            let c = d_face / (dx * dx);
            // F = c dx (B(du) p_i - B(-du) p_{i+1}) flows from i to i + 1
            let out_of_i = c * bernoulli(du);
            let out_of_next = c * bernoulli(-du);
            diag[i] -= out_of_i;
            upper[i] += out_of_next;
            diag[i + 1] -= out_of_next;
            lower[i + 1] += out_of_i;
        }
        FluxOperator { lower, diag, upper }
    }

    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let n = p.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * p[i];
                if i > 0 {
                    v += self.lower[i] * p[i - 1];
                }
                if i + 1 < n {
                    v += self.upper[i] * p[i + 1];
                }
                v
            })
            .collect()
    }
}

/// Prefactored `(I - μA)` for the Thomas algorithm.
#[derive(Debug, Clone)]
struct Tridiagonal {
    lower: Vec<f64>,
    upper_prime: Vec<f64>,
    denom: Vec<f64>,
}

impl Tridiagonal {
    fn new(op: &FluxOperator, mu: f64) -> Self {
        let n = op.diag.len();
        let lower: Vec<f64> = op.lower.iter().map(|v| -mu * v).collect();
        let upper: Vec<f64> = op.upper.iter().map(|v| -mu * v).collect();
        let diag: Vec<f64> = op.diag.iter().map(|v| 1.0 - mu * v).collect();
        let mut upper_prime = vec![0.0; n];
        let mut denom = vec![0.0; n];
        denom[0] = diag[0];
        upper_prime[0] = upper[0] / denom[0];
        for i in 1..n {
            denom[i] = diag[i] - lower[i] * upper_prime[i - 1];
            upper_prime[i] = upper[i] / denom[i];
        }
        Tridiagonal {
            lower,
            upper_prime,
            denom,
        }
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut y = vec![0.0; n];
        y[0] = rhs[0] / self.denom[0];
        for i in 1..n {
            y[i] = (rhs[i] - self.lower[i] * y[i - 1]) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            y[i] -= self.upper_prime[i] * y[i + 1];
        }
        y
    }
}

pub struct FfpeSolver {
    problem: FfpeProblem,
    kernel: CaputoKernel,
    system: Tridiagonal,
    state: FfpeState,
    /// `p^j - p^{j-1}` for every completed step `j`.
    increments: Vec<Vec<f64>>,
    initial_mass: f64,
    clipped_total: usize,
}

impl FfpeSolver {
    pub fn new(problem: FfpeProblem, initial: &[f64]) -> Result<Self> {
        Self::with_faults(problem, initial, SolverFaults::default())
    }

    #[doc(hidden)]
    pub fn with_faults(problem: FfpeProblem, initial: &[f64], faults: SolverFaults) -> Result<Self> {
        problem.validate()?;
        if initial.len() != problem.grid.cells || initial.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidInput("initial density must be nonnegative on every cell".into()));
        }
        let p = normalize(initial, problem.grid.dx())?;
        let kernel = CaputoKernel::new(problem.alpha, problem.dt)?;
        // μ = Γ(2-α) dt^α, the inverse of the kernel's leading coefficient
        let mu = 1.0 / kernel.scale;
        let system = Tridiagonal::new(&FluxOperator::new(&problem, faults), mu);
        let initial_mass = mass(&p, problem.grid.dx());
        Ok(FfpeSolver {
            problem,
            kernel,
            system,
            state: FfpeState { p, t: 0.0, step: 0 },
            increments: Vec::new(),
            initial_mass,
            clipped_total: 0,
        })
    }

    pub fn problem(&self) -> &FfpeProblem {
        &self.problem
    }

    pub fn state(&self) -> &FfpeState {
        &self.state
    }

    pub fn clipped_total(&self) -> usize {
        self.clipped_total
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let n = self.state.step + 1;
        let mut rhs = self.state.p.clone();
        // memory: - Σ_{k=1}^{n-1} b_k (p^{n-k} - p^{n-k-1})
        if self.problem.alpha < 1.0 {
            for k in 1..n {
                let b = self.kernel.weight(k);
                let inc = &self.increments[n - k - 1];
                for (r, d) in rhs.iter_mut().zip(inc) {
                    *r -= b * d;
                }
            }
        }
        let mut next = self.system.solve(&rhs);
        let mut clipped = 0;
        for v in &mut next {
            if *v < 0.0 {
                if *v < -NEGATIVE_TOLERANCE {
                    clipped += 1;
                }
                *v = 0.0;
            }
        }
        if clipped > 0 {
            log::warn!("step {n}: clipped {clipped} negative cells");
        }
        self.clipped_total += clipped;
        let drift = (mass(&next, self.problem.grid.dx()) - self.initial_mass).abs();
        if drift > MASS_DRIFT_LIMIT {
            return Err(Error::MassDrift { step: n, drift });
        }
        if self.problem.alpha < 1.0 {
            self.increments
                .push(next.iter().zip(&self.state.p).map(|(a, b)| a - b).collect());
        }
        self.state.p = next;
        self.state.step = n;
        self.state.t = n as f64 * self.problem.dt;
        Ok(StepReport {
            mass_drift: drift,
            clipped,
        })
    }

    /// Advance `steps` steps; returns the largest mass drift seen.
    pub fn run(&mut self, steps: usize) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..steps {
            worst = worst.max(self.step()?.mass_drift);
        }
        Ok(worst)
    }
}

pub fn mass(p: &[f64], dx: f64) -> f64 {
    p.iter().sum::<f64>() * dx
}

pub fn normalize(p: &[f64], dx: f64) -> Result<Vec<f64>> {
    let m = mass(p, dx);
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::InvalidInput("density has no mass".into()));
    }
    Ok(p.iter().map(|v| v / m).collect())
}

/// `∫ |p - q| dx` on the grid.
pub fn l1_distance(p: &[f64], q: &[f64], dx: f64) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() * dx
}

/// Grid-normalized `exp(-γV/D)` for an (approximately) constant `D`.
pub fn boltzmann_stationary(problem: &FfpeProblem) -> Result<Vec<f64>> {
    problem.validate()?;
    let dmin = problem.diffusion.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = problem.diffusion.iter().copied().fold(0.0, f64::max);
    if dmax / dmin > CONSTANT_D_RATIO {
        return Err(Error::HypothesisViolated(format!(
            "stationary Boltzmann form needs approximately constant diffusion; max/min = {:.3} > {CONSTANT_D_RATIO}",
            dmax / dmin
        )));
    }
    let d = problem.diffusion.iter().sum::<f64>() / problem.diffusion.len() as f64;
    let vmin = problem.potential.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = problem
        .potential
        .iter()
        .map(|v| (-problem.gamma * (v - vmin) / d).exp())
        .collect();
    normalize(&raw, problem.grid.dx())
}

/// Deviation from `p_s^{m D} ∝ exp(-m V)`: the spread (max absolute
/// deviation from the grid mean) of `m D log p_s + m V` over cells.
pub fn posterior_identity_check(p_s: &[f64], potential: &[f64], m: f64, d_xi: f64) -> Result<f64> {
    if p_s.len() != potential.len() || p_s.is_empty() {
        return Err(Error::ShapeMismatch("density and potential lengths differ".into()));
    }
    if p_s.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::InvalidInput("density must be positive for the log form".into()));
    }
    let dev: Vec<f64> = p_s
        .iter()
        .zip(potential)
        .map(|(p, v)| m * d_xi * p.ln() + m * v)
        .collect();
    // shift by one cell first so the sum runs over small residuals
    let base = dev[0];
    let mean = base + dev.iter().map(|d| d - base).sum::<f64>() / dev.len() as f64;
    Ok(dev.iter().map(|d| (d - mean).abs()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogenizationReport {
    pub period_cells: usize,
    pub d_hat: f64,
    /// L1 distance between resolved and homogenized densities at `t_end`.
    pub l1_distance: f64,
    pub t_end: f64,
    /// The period is not small against the domain.
    pub coarse_period: bool,
}

/// Harmonic mean over one period: the 1-D homogenized coefficient.
pub fn harmonic_mean(values: &[f64]) -> f64 {
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// Solve with a periodic, cell-resolved `D(x)` (each entry of `pattern`
/// repeated over `period_cells / pattern.len()` cells) and with its harmonic
/// mean, both at `α = 1`, and compare at `t_end`.
pub fn effective_vs_resolved(
    grid: Grid,
    potential: &[f64],
    pattern: &[f64],
    period_cells: usize,
    gamma: f64,
    dt: f64,
    t_end: f64,
    initial: &[f64],
) -> Result<HomogenizationReport> {
    if pattern.is_empty() || period_cells == 0 || !period_cells.is_multiple_of(pattern.len()) {
        return Err(Error::InvalidInput("period must be a positive multiple of the pattern length".into()));
    }
    let coarse_period = period_cells * 10 > grid.cells;
    if coarse_period {
        log::warn!("diffusion period of {period_cells} cells is not small against {} cells", grid.cells);
    }
    let run = period_cells / pattern.len();
    let resolved: Vec<f64> = (0..grid.cells).map(|i| pattern[(i / run) % pattern.len()]).collect();
    let d_hat = harmonic_mean(pattern);
    let steps = (t_end / dt).round() as usize;
    let solve = |diffusion: Vec<f64>| -> Result<Vec<f64>> {
        let problem = FfpeProblem::from_values(grid, potential.to_vec(), diffusion, gamma, 1.0, dt)?;
        let mut s = FfpeSolver::new(problem, initial)?;
        s.run(steps)?;
        Ok(s.state.p.clone())
    };
    let fine = solve(resolved)?;
    let coarse = solve(vec![d_hat; grid.cells])?;
    Ok(HomogenizationReport {
        period_cells,
        d_hat,
        l1_distance: l1_distance(&fine, &coarse, grid.dx()),
        t_end: steps as f64 * dt,
        coarse_period,
    })
}

/// Loss along `center + x direction` at each `x`, for building a 1-D
/// potential from a network loss surface.
pub fn loss_slice(potential: &dyn Potential, center: &[f64], direction: &[f64], xs: &[f64]) -> Result<Vec<f64>> {
    if center.len() != direction.len() {
        return Err(Error::ShapeMismatch("center and direction differ in length".into()));
    }
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::InvalidInput("zero direction".into()));
    }
    xs.iter()
        .map(|&x| {
            let w: Vec<f64> = center.iter().zip(direction).map(|(c, d)| c + x * d / norm).collect();
            potential.loss(&w)
        })
        .collect()
}

pub fn double_well(x: f64) -> f64 {
    (x * x - 1.0).powi(2)
}

pub fn gaussian_density(grid: &Grid, mean: f64, std: f64) -> Vec<f64> {
    grid.centers()
        .iter()
        .map(|x| (-0.5 * ((x - mean) / std).powi(2)).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(-3.0, 3.0, 240).unwrap()
    }

    #[test]
    fn flat_potential_keeps_uniform() {
        let g = grid();
        for alpha in [0.5, 1.0] {
            let p = FfpeProblem::new(g, |_| 0.7, |x| 0.5 + 0.2 * x.sin().abs(), 1.0, alpha, 0.01).unwrap();
            let mut s = FfpeSolver::new(p, &vec![1.0; g.cells]).unwrap();
            s.run(50).unwrap();
            let u = 1.0 / (g.b - g.a);
            assert!(s.state().p.iter().all(|v| (v - u).abs() < 1e-12));
        }
    }

    #[test]
    fn ornstein_uhlenbeck_relaxation() {
        // V = k x^2 / 2: mean decays as e^{-γk t}, variance relaxes to D/(γk)
        let (k, gamma, d) = (2.0, 1.0, 0.5);
        let g = Grid::new(-5.0, 5.0, 800).unwrap();
        let dt = 1e-3;
        let p = FfpeProblem::new(g, |x| 0.5 * k * x * x, |_| d, gamma, 1.0, dt).unwrap();
        let (m0, s0) = (1.0, 0.3);
        let mut s = FfpeSolver::new(p, &gaussian_density(&g, m0, s0)).unwrap();
        let steps = 500;
        s.run(steps).unwrap();
        let t = steps as f64 * dt;
        let xs = g.centers();
        let dx = g.dx();
        let mean: f64 = xs.iter().zip(&s.state().p).map(|(x, p)| x * p).sum::<f64>() * dx;
        let var: f64 = xs.iter().zip(&s.state().p).map(|(x, p)| (x - mean).powi(2) * p).sum::<f64>() * dx;
        let rate = gamma * k;
        let mean_exact = m0 * (-rate * t).exp();
        let var_eq = d / rate;
        let var_exact = var_eq + (s0 * s0 - var_eq) * (-2.0 * rate * t).exp();
        assert!((mean - mean_exact).abs() / mean_exact < 0.01, "{mean} vs {mean_exact}");
        assert!((var - var_exact).abs() / var_exact < 0.01, "{var} vs {var_exact}");
    }

    #[test]
    fn boltzmann_examples() {
        let g = grid();
        let flat = FfpeProblem::new(g, |_| 3.0, |_| 0.5, 1.0, 1.0, 0.1).unwrap();
        let u = boltzmann_stationary(&flat).unwrap();
        assert!(u.iter().all(|v| (v - u[0]).abs() < 1e-15));

        let g = Grid::new(-2.0, 2.0, 400).unwrap();
        let dw = FfpeProblem::new(g, double_well, |_| 0.5, 1.0, 1.0, 0.1).unwrap();
        let p = boltzmann_stationary(&dw).unwrap();
        for i in 0..200 {
            assert!((p[i] - p[399 - i]).abs() < 1e-12);
        }
        let xs = g.centers();
        let peak = (0..200).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert!((xs[peak] + 1.0).abs() <= g.dx());

        let varying = FfpeProblem::new(g, double_well, |x| 0.5 + 0.1 * x.abs(), 1.0, 1.0, 0.1).unwrap();
        assert!(matches!(boltzmann_stationary(&varying), Err(Error::HypothesisViolated(_))));
    }

    #[test]
    fn posterior_identity_exact_and_perturbed() {
        let g = Grid::new(-2.0, 2.0, 200).unwrap();
        let d = 0.5;
        let prob = FfpeProblem::new(g, double_well, |_| d, 1.0, 1.0, 0.1).unwrap();
        let ps = boltzmann_stationary(&prob).unwrap();
        let m = 50.0;
        assert!(posterior_identity_check(&ps, &prob.potential, m, d).unwrap() < 1e-12);
        // normalization constant does not matter
        let scaled: Vec<f64> = ps.iter().map(|p| 7.3 * p).collect();
        assert!(posterior_identity_check(&scaled, &prob.potential, m, d).unwrap() < 1e-12);
        // ±1% alternating perturbation shifts each cell by about m D 0.01
        let perturbed: Vec<f64> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| p * if i % 2 == 0 { 1.01 } else { 0.99 })
            .collect();
        let dev = posterior_identity_check(&perturbed, &prob.potential, m, d).unwrap();
        let predicted = m * d * 0.01;
        assert!(dev / predicted > 0.5 && dev / predicted < 2.0, "{dev} vs {predicted}");
    }

    #[test]
    fn harmonic_mean_homogenization() {
        assert!((harmonic_mean(&[1.0, 3.0]) - 1.5).abs() < 1e-15);
        let g = grid();
        let v = vec![0.0; g.cells];
        let init = gaussian_density(&g, 0.0, 0.4);
        let r = effective_vs_resolved(g, &v, &[0.8], 4, 1.0, 1e-3, 0.05, &init).unwrap();
        assert_eq!(r.d_hat, 0.8);
        assert!(r.l1_distance < 1e-12);
    }

    #[test]
    fn rejects_bad_problems() {
        let g = grid();
        assert!(FfpeProblem::new(g, |_| 0.0, |_| -1.0, 1.0, 1.0, 0.1).is_err());
        assert!(FfpeProblem::new(g, |_| 0.0, |_| 1.0, 1.0, 0.0, 0.1).is_err());
        assert!(FfpeProblem::new(g, |_| f64::NAN, |_| 1.0, 1.0, 1.0, 0.1).is_err());
    }
}
