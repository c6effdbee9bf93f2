use fractal_sgd::ffpe::{self, FfpeProblem, FfpeSolver, Grid};

fn bern(z: f64) -> f64 {
    if z.abs() < 1e-10 {
        1.0 - z / 2.0
    } else {
        z / z.exp_m1()
    }
}

/// Dense backward-Euler reference for `∂p/∂t = ∂x(γ V' p + D ∂x p)` with
/// exponentially fitted fluxes and zero-flux walls.
struct Reference {
    matrix: Vec<Vec<f64>>,
}

impl Reference {
    fn new(v: &[f64], d: &[f64], gamma: f64, dx: f64, dt: f64) -> Self {
        let n = v.len();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = 1.0;
        }
        for i in 0..n - 1 {
            let dh = 2.0 * d[i] * d[i + 1] / (d[i] + d[i + 1]);
            let z = gamma * (v[i + 1] - v[i]) / dh;
            // flux i -> i+1 = dh/dx (B(z) p_i - B(-z) p_{i+1})
            let k = dt * dh / (dx * dx);
            a[i][i] += k * bern(z);
            a[i][i + 1] -= k * bern(-z);
            a[i + 1][i + 1] += k * bern(-z);
            a[i + 1][i] -= k * bern(z);
        }
        Reference { matrix: a }
    }

    fn step(&self, p: &[f64]) -> Vec<f64> {
        let n = p.len();
        let mut a = self.matrix.clone();
        let mut b = p.to_vec();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for k in col..n {
                        a[row][k] -= f * a[col][k];
                    }
                    b[row] -= f * b[col];
                }
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }
}

#[test]
fn alpha_one_matches_dense_classical_reference() {
    let grid = Grid::new(-2.0, 2.0, 80).unwrap();
    let xs = grid.centers();
    let v: Vec<f64> = xs.iter().map(|x| ffpe::double_well(*x) + 0.3 * x).collect();
    let d: Vec<f64> = xs.iter().map(|x| 0.4 + 0.2 * (3.0 * x).sin().powi(2)).collect();
    let (gamma, dt) = (1.5, 0.002);
    let p0 = ffpe::gaussian_density(&grid, 0.7, 0.3);
    let problem = FfpeProblem::from_values(grid, v.clone(), d.clone(), gamma, 1.0, dt).unwrap();
    let mut solver = FfpeSolver::new(problem, &p0).unwrap();
    let reference = Reference::new(&v, &d, gamma, grid.dx(), dt);
    let mut q = solver.state().p.clone();
    for step in 0..300 {
        // one step from the same state each time
        let expected = reference.step(&solver.state().p);
        solver.step().unwrap();
        let err = solver.state().p.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "step {step}: {err:e}");
        q = reference.step(&q);
    }
    let drift = solver.state().p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-10, "accumulated {drift:e}");
}

#[test]
fn mass_conserved_every_step_for_all_orders() {
    let grid = Grid::new(-2.0, 2.0, 100).unwrap();
    let p0 = ffpe::gaussian_density(&grid, -1.2, 0.25);
    for alpha in [0.3, 0.5, 0.75, 1.0] {
        let problem = FfpeProblem::new(grid, ffpe::double_well, |x| 0.3 + 0.2 * x.cos(), 1.0, alpha, 0.05).unwrap();
        let mut s = FfpeSolver::new(problem, &p0).unwrap();
        let m0 = ffpe::mass(&s.state().p, grid.dx());
        for _ in 0..400 {
            s.step().unwrap();
            let m = ffpe::mass(&s.state().p, grid.dx());
            assert!((m - m0).abs() <= 1e-10, "α={alpha}: {m}");
            assert!(s.state().p.iter().all(|&p| p >= 0.0));
        }
    }
}

/// First time the density is within L1 0.1 of the stationary state.
fn hitting_time(alpha: f64) -> f64 {
    let grid = Grid::new(-4.0, 4.0, 120).unwrap();
    let dt = 0.02;
    let problem = FfpeProblem::new(grid, |x| 0.5 * x * x, |_| 0.5, 1.0, alpha, dt).unwrap();
    let stationary = ffpe::boltzmann_stationary(&problem).unwrap();
    let mut s = FfpeSolver::new(problem, &ffpe::gaussian_density(&grid, 1.0, 0.3)).unwrap();
    for _ in 0..5000 {
        s.step().unwrap();
        if ffpe::l1_distance(&s.state().p, &stationary, grid.dx()) < 0.1 {
            return s.state().t;
        }
    }
    f64::INFINITY
}

#[test]
fn relaxation_slows_as_order_decreases() {
    let times: Vec<f64> = [1.0, 0.75, 0.5].iter().map(|&a| hitting_time(a)).collect();
    assert!(times.iter().all(|t| t.is_finite()), "{times:?}");
    assert!(times[0] < times[1] && times[1] < times[2], "{times:?}");
}

#[test]
fn homogenized_distance_shrinks_with_period() {
    let grid = Grid::new(-2.0, 2.0, 240).unwrap();
    let v: Vec<f64> = grid.centers().iter().map(|x| ffpe::double_well(*x)).collect();
    let p0 = ffpe::gaussian_density(&grid, 0.8, 0.3);
    let distances: Vec<f64> = [24, 12, 6, 2]
        .iter()
        .map(|&period| {
            let r = ffpe::effective_vs_resolved(grid, &v, &[1.0, 3.0], period, 1.0, 0.001, 0.2, &p0).unwrap();
            assert!((r.d_hat - 1.5).abs() < 1e-15);
            r.l1_distance
        })
        .collect();
    assert!(distances.windows(2).all(|w| w[1] < w[0]), "{distances:?}");
}
