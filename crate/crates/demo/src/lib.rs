//! WebAssembly bindings for the static page in `www/`.

use wasm_bindgen::prelude::*;

use fractal_sgd::analysis::{self, FitWindow};
use fractal_sgd::bench;
use fractal_sgd::config::{FfpeConfig, PotentialKind};
use fractal_sgd::ffpe::{self, FfpeSolver};

fn js(e: fractal_sgd::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Fractional Fokker-Planck relaxation from a two-bump density.
#[wasm_bindgen]
pub struct Relaxation {
    solver: FfpeSolver,
    xs: Vec<f64>,
    stationary: Vec<f64>,
    dx: f64,
}

#[wasm_bindgen]
impl Relaxation {
    /// `potential` is `"double_well"` or `"quadratic"`.
    #[wasm_bindgen(constructor)]
    pub fn new(potential: &str, alpha: f64, diffusion: f64, dt: f64, cells: usize) -> Result<Relaxation, JsError> {
        let potential = match potential {
            "double_well" => PotentialKind::DoubleWell,
            "quadratic" => PotentialKind::Quadratic,
            other => return Err(JsError::new(&format!("unknown potential `{other}`"))),
        };
        let cfg = FfpeConfig {
            potential,
            diffusion,
            dt,
            cells,
            alphas: vec![alpha],
            ..FfpeConfig::default()
        };
        let problem = cfg.problem(alpha).map_err(js)?;
        let stationary = ffpe::boltzmann_stationary(&problem).map_err(js)?;
        let dx = problem.grid.dx();
        let xs = problem.grid.centers();
        let solver = FfpeSolver::new(problem, &cfg.initial_density().map_err(js)?).map_err(js)?;
        Ok(Relaxation { solver, xs, stationary, dx })
    }

    /// Advance `n` steps; returns the largest mass drift seen.
    pub fn advance(&mut self, n: usize) -> Result<f64, JsError> {
        let mut drift: f64 = 0.0;
        for _ in 0..n {
            drift = drift.max(self.solver.step().map_err(js)?.mass_drift);
        }
        Ok(drift)
    }

    pub fn time(&self) -> f64 {
        self.solver.state().t
    }

    pub fn steps(&self) -> usize {
        self.solver.state().step
    }

    pub fn xs(&self) -> Vec<f64> {
        self.xs.clone()
    }

    pub fn density(&self) -> Vec<f64> {
        self.solver.state().p.clone()
    }

    pub fn stationary(&self) -> Vec<f64> {
        self.stationary.clone()
    }

    pub fn l1_to_stationary(&self) -> f64 {
        ffpe::l1_distance(&self.solver.state().p, &self.stationary, self.dx)
    }
}

/// Random walks on a Sierpinski gasket.
#[wasm_bindgen]
pub struct GasketWalk {
    msd: Vec<f64>,
    d_f: f64,
    d_walk: f64,
    d_s: f64,
    window: (usize, usize),
}

#[wasm_bindgen]
impl GasketWalk {
    #[wasm_bindgen(constructor)]
    pub fn new(level: u32, walkers: usize, steps: usize, seed: u64) -> Result<GasketWalk, JsError> {
        if level > 9 {
            return Err(JsError::new("level must be at most 9"));
        }
        let g = bench::build_gasket(level).map_err(js)?;
        let side = f64::from(1u32 << level);
        let m = bench::measure(&g, &bench::radii_grid((side / 64.0).max(1.0), side / 2.0, 12), steps, walkers, seed).map_err(js)?;
        Ok(GasketWalk {
            msd: m.ensemble.msd,
            d_f: m.verdict.d_f,
            d_walk: m.verdict.d_walk,
            d_s: m.verdict.d_s,
            window: m.window,
        })
    }

    pub fn msd(&self) -> Vec<f64> {
        self.msd.clone()
    }

    pub fn d_f(&self) -> f64 {
        self.d_f
    }

    pub fn d_walk(&self) -> f64 {
        self.d_walk
    }

    pub fn d_s(&self) -> f64 {
        self.d_s
    }

    pub fn window_start(&self) -> usize {
        self.window.0
    }

    pub fn window_end(&self) -> usize {
        self.window.1
    }

    pub fn exact_d_f() -> f64 {
        bench::GASKET_MASS_DIMENSION
    }

    pub fn exact_d_walk() -> f64 {
        bench::GASKET_WALKER_DIMENSION
    }

    pub fn exact_d_s() -> f64 {
        bench::GASKET_SPECTRAL_DIMENSION
    }
}

/// Log-log least squares of `rs` against `ts` after dropping the leading
/// `discard` fraction of the time range. Returns `[slope, intercept, r²]`.
#[wasm_bindgen]
pub fn power_law_fit(ts: &[f64], rs: &[f64], discard: f64) -> Result<Vec<f64>, JsError> {
    let fit = analysis::fit_power_law(ts, rs, FitWindow::discard_leading(ts, discard)).map_err(js)?;
    Ok(vec![fit.slope, fit.intercept, fit.r_squared])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relaxation_approaches_boltzmann() {
        let mut r = Relaxation::new("double_well", 1.0, 0.5, 0.05, 100).unwrap();
        let start = r.l1_to_stationary();
        let drift = r.advance(400).unwrap();
        assert!(drift < 1e-10);
        assert!(r.l1_to_stationary() < 1e-3 * start.max(1.0));
        assert_eq!(r.steps(), 400);
    }

    #[test]
    fn gasket_walk_is_subdiffusive() {
        let w = GasketWalk::new(7, 2000, 1500, 0).unwrap();
        assert!(w.d_walk() > 2.1, "{}", w.d_walk());
        assert_eq!(w.msd().len(), 1501);
    }

    #[test]
    fn exact_power_law() {
        let ts: Vec<f64> = (1..50).map(f64::from).collect();
        let rs: Vec<f64> = ts.iter().map(|t| 3.0 * t.powf(0.4)).collect();
        let f = power_law_fit(&ts, &rs, 0.1).unwrap();
        assert!((f[0] - 0.4).abs() < 1e-12);
        assert!((f[1] - 3f64.ln()).abs() < 1e-12);
    }
}
