//! Random walks on graphs with exactly known dimensions.
//!
//! The Sierpinski gasket has `d_f = ln 3 / ln 2`, `d_walk = ln 5 / ln 2` and
//! `d_s = 2 ln 3 / ln 5`; chains and square lattices are the diffusive
//! controls. The estimators here are the ones trusted on weight
//! trajectories, so they have to recover these values first.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, domain};
use crate::stats::{self, LinearFit};
use crate::{Error, Result};

pub const GASKET_MASS_DIMENSION: f64 = 1.584_962_500_721_156; // ln 3 / ln 2
pub const GASKET_WALKER_DIMENSION: f64 = 2.321_928_094_887_362; // ln 5 / ln 2
pub const GASKET_SPECTRAL_DIMENSION: f64 = 1.365_212_388_591_004; // 2 ln 3 / ln 5

const SQRT3_2: f64 = 0.866_025_403_784_438_6;

#[derive(Debug, Clone, PartialEq)]
pub struct FractalGraph {
    pub name: String,
    /// Planar embedding of each vertex.
    pub vertices: Vec<[f64; 2]>,
    /// CSR adjacency: neighbours of `v` are `neighbors[offsets[v]..offsets[v + 1]]`.
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub level: u32,
    pub origin: usize,
}

impl FractalGraph {
    fn from_edges(name: String, vertices: Vec<[f64; 2]>, edges: &[(usize, usize)], level: u32, origin: usize) -> Self {
        let n = vertices.len();
        let mut deg = vec![0usize; n];
        for &(a, b) in edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        let mut offsets = vec![0usize; n + 1];
        for v in 0..n {
            offsets[v + 1] = offsets[v] + deg[v];
        }
        let mut fill = offsets[..n].to_vec();
        let mut neighbors = vec![0usize; offsets[n]];
        for &(a, b) in edges {
            neighbors[fill[a]] = b;
            fill[a] += 1;
            neighbors[fill[b]] = a;
            fill[b] += 1;
        }
        FractalGraph {
            name,
            vertices,
            offsets,
            neighbors,
            level,
            origin,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn neighbors_of(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.vertex_count()).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    pub fn is_connected(&self) -> bool {
        let n = self.vertex_count();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &u in self.neighbors_of(v) {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == n
    }
}

/// Sierpinski gasket graph of the given level with side `2^level`, origin
/// at the bottom-left corner. Level 0 is a single triangle.
pub fn build_gasket(level: u32) -> Result<FractalGraph> {
    if level > 10 {
        return Err(Error::InvalidInput(format!("gasket level {level} exceeds 10")));
    }
    // triangular-lattice coordinates (a, b) of the unit triangles' corners
    let mut corners: Vec<(i64, i64)> = vec![(0, 0)];
    for l in 0..level {
        let s = 1i64 << l;
        let mut next = Vec::with_capacity(corners.len() * 3);
        for &(a, b) in &corners {
            next.push((a, b));
            next.push((a + s, b));
            next.push((a, b + s));
        }
        corners = next;
    }
    let mut index: HashMap<(i64, i64), usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut id = |p: (i64, i64), vertices: &mut Vec<[f64; 2]>| {
        *index.entry(p).or_insert_with(|| {
            vertices.push([p.0 as f64 + 0.5 * p.1 as f64, SQRT3_2 * p.1 as f64]);
            vertices.len() - 1
        })
    };
    let mut edges = Vec::with_capacity(corners.len() * 3);
    for &(a, b) in &corners {
        let p = id((a, b), &mut vertices);
        let q = id((a + 1, b), &mut vertices);
        let r = id((a, b + 1), &mut vertices);
        edges.extend([(p, q), (q, r), (r, p)]);
    }
    Ok(FractalGraph::from_edges(format!("gasket-{level}"), vertices, &edges, level, 0))
}

/// Path of `2 half + 1` vertices with the origin in the middle.
pub fn build_chain(half: usize) -> FractalGraph {
    let n = 2 * half + 1;
    let vertices = (0..n).map(|i| [i as f64 - half as f64, 0.0]).collect();
    let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
    FractalGraph::from_edges(format!("chain-{n}"), vertices, &edges, 0, half)
}

/// `(2 half + 1)^2` square lattice with the origin at the center.
pub fn build_lattice(half: usize) -> FractalGraph {
    let side = 2 * half + 1;
    let at = |i: usize, j: usize| i * side + j;
    let mut vertices = Vec::with_capacity(side * side);
    let mut edges = Vec::new();
    for i in 0..side {
        for j in 0..side {
            vertices.push([i as f64 - half as f64, j as f64 - half as f64]);
            if i + 1 < side {
                edges.push((at(i, j), at(i + 1, j)));
            }
            if j + 1 < side {
                edges.push((at(i, j), at(i, j + 1)));
            }
        }
    }
    FractalGraph::from_edges(format!("lattice-{side}"), vertices, &edges, 0, at(half, half))
}

pub fn build_complete(n: usize) -> FractalGraph {
    let vertices = (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            [a.cos(), a.sin()]
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            edges.push((a, b));
        }
    }
    FractalGraph::from_edges(format!("complete-{n}"), vertices, &edges, 0, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkEnsemble {
    pub steps: usize,
    pub walkers: usize,
    /// Mean squared Euclidean displacement from the origin, per time.
    pub msd: Vec<f64>,
    /// Fraction of walkers at the origin, per time.
    pub return_prob: Vec<f64>,
}

/// Walkers are simulated in fixed blocks whose partial sums are merged in
/// block order, so results do not depend on the thread count.
const WALKER_BLOCK: usize = 512;

fn walk_block(graph: &FractalGraph, steps: usize, first: usize, count: usize, seed: u64) -> (Vec<f64>, Vec<u64>) {
    let mut sq = vec![0.0; steps + 1];
    let mut home = vec![0u64; steps + 1];
    let origin = graph.origin;
    let [ox, oy] = graph.vertices[origin];
    for w in first..first + count {
        let mut rng = rng::stream(seed, domain::WALKER, w as u64);
        let mut v = origin;
        home[0] += 1;
        for t in 1..=steps {
            let nb = graph.neighbors_of(v);
            v = nb[rng.random_range(0..nb.len())];
            let [x, y] = graph.vertices[v];
            sq[t] += (x - ox) * (x - ox) + (y - oy) * (y - oy);
            if v == origin {
                home[t] += 1;
            }
        }
    }
    (sq, home)
}

/// Simple random walks (uniform over neighbours) started at the origin.
pub fn simulate_walks(graph: &FractalGraph, steps: usize, walkers: usize, seed: u64) -> Result<WalkEnsemble> {
    if walkers == 0 {
        return Err(Error::InvalidInput("need at least one walker".into()));
    }
    if graph.degree(graph.origin) == 0 {
        return Err(Error::InvalidInput("origin is isolated".into()));
    }
    let blocks: Vec<(usize, usize)> = (0..walkers)
        .step_by(WALKER_BLOCK)
        .map(|s| (s, WALKER_BLOCK.min(walkers - s)))
        .collect();
    let run = |&(first, count): &(usize, usize)| walk_block(graph, steps, first, count, seed);
    #[cfg(feature = "parallel")]
    let partials: Vec<_> = {
        use rayon::prelude::*;
        blocks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<_> = blocks.iter().map(run).collect();

    let mut sq = vec![0.0; steps + 1];
    let mut home = vec![0u64; steps + 1];
    for (s, h) in partials {
        for t in 0..=steps {
            sq[t] += s[t];
            home[t] += h[t];
        }
    }
    let n = walkers as f64;
    Ok(WalkEnsemble {
        steps,
        walkers,
        msd: sq.iter().map(|s| s / n).collect(),
        return_prob: home.iter().map(|&h| h as f64 / n).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionFit {
    pub dimension: f64,
    pub fit: LinearFit,
}

/// Slope of `log M(r)` against `log r`, `M(r)` the number of vertices within
/// Euclidean distance `r` of the origin.
pub fn mass_dimension(graph: &FractalGraph, radii: &[f64]) -> Result<DimensionFit> {
    if radii.len() < 3 || radii.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::InsufficientData("need at least 3 positive radii".into()));
    }
    let (lo, hi) = radii
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    if hi / lo < 10.0 - 1e-9 {
        return Err(Error::InvalidInput("radii must span at least one decade".into()));
    }
    let [ox, oy] = graph.vertices[graph.origin];
    let mut dist: Vec<f64> = graph
        .vertices
        .iter()
        .map(|[x, y]| ((x - ox).powi(2) + (y - oy).powi(2)).sqrt())
        .collect();
    dist.sort_by(f64::total_cmp);
    let (lx, ly): (Vec<f64>, Vec<f64>) = radii
        .iter()
        .map(|&r| {
            let count = dist.partition_point(|&d| d <= r + 1e-9);
            (r.ln(), (count as f64).ln())
        })
        .unzip();
    let fit = stats::ols(&lx, &ly)?;
    Ok(DimensionFit {
        dimension: fit.slope,
        fit,
    })
}

fn window_points(series: &[f64], t_min: usize, t_max: usize, even_only: bool) -> (Vec<f64>, Vec<f64>) {
    (t_min.max(1)..=t_max.min(series.len() - 1))
        .filter(|t| !even_only || t % 2 == 0)
        .filter(|&t| series[t] > 0.0)
        .map(|t| ((t as f64).ln(), series[t].ln()))
        .unzip()
}

/// `d_s = -2 slope` of `log P_0(t)` on even `t` within `[t_min, t_max]`.
pub fn spectral_from_return(ensemble: &WalkEnsemble, t_min: usize, t_max: usize) -> Result<DimensionFit> {
    let (lx, ly) = window_points(&ensemble.return_prob, t_min, t_max, true);
    if lx.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} even times with returns in [{t_min}, {t_max}]",
            lx.len()
        )));
    }
    let fit = stats::ols(&lx, &ly)?;
    if fit.slope > -0.01 {
        return Err(Error::InvalidInput(format!(
            "return probability is flat (slope {:.4}) in [{t_min}, {t_max}]; window is saturated by the finite graph",
            fit.slope
        )));
    }
    Ok(DimensionFit {
        dimension: -2.0 * fit.slope,
        fit,
    })
}

/// `d_walk = 2 / slope` of `log MSD` against `log t` within `[t_min, t_max]`.
pub fn walker_from_msd(ensemble: &WalkEnsemble, t_min: usize, t_max: usize) -> Result<DimensionFit> {
    let (lx, ly) = window_points(&ensemble.msd, t_min, t_max, true);
    if lx.len() < 3 {
        return Err(Error::InsufficientData("too few MSD points in window".into()));
    }
    let fit = stats::ols(&lx, &ly)?;
    if !(fit.slope > 0.0) {
        return Err(Error::InvalidInput("MSD does not grow in window".into()));
    }
    Ok(DimensionFit {
        dimension: 2.0 / fit.slope,
        fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstrateVerdict {
    pub name: String,
    pub d_f: f64,
    pub d_walk: f64,
    pub d_s: f64,
    /// `|d_s - 2 d_f / d_walk| / d_s`.
    pub cross_identity_error: f64,
    pub subdiffusive: bool,
}

impl SubstrateVerdict {
    pub fn new(name: &str, d_f: f64, d_walk: f64, d_s: f64) -> Self {
        SubstrateVerdict {
            name: name.to_string(),
            d_f,
            d_walk,
            d_s,
            cross_identity_error: (d_s - 2.0 * d_f / d_walk).abs() / d_s,
            subdiffusive: d_walk > 2.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub verdict: SubstrateVerdict,
    pub mass_fit: DimensionFit,
    pub walk_fit: DimensionFit,
    pub return_fit: DimensionFit,
    /// Time window `[steps/200, steps/2]` used by both walk fits.
    pub window: (usize, usize),
    pub ensemble: WalkEnsemble,
}

/// All three dimensions of one substrate from a single walk ensemble.
pub fn measure(graph: &FractalGraph, radii: &[f64], steps: usize, walkers: usize, seed: u64) -> Result<Measurement> {
    let mass_fit = mass_dimension(graph, radii)?;
    let ensemble = simulate_walks(graph, steps, walkers, seed)?;
    let window = (steps / 200, steps / 2);
    let walk_fit = walker_from_msd(&ensemble, window.0, window.1)?;
    let return_fit = spectral_from_return(&ensemble, window.0, window.1)?;
    Ok(Measurement {
        verdict: SubstrateVerdict::new(&graph.name, mass_fit.dimension, walk_fit.dimension, return_fit.dimension),
        mass_fit,
        walk_fit,
        return_fit,
        window,
        ensemble,
    })
}

/// Geometric grid of radii between `lo` and `hi`.
pub fn radii_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_gaskets() {
        let g0 = build_gasket(0).unwrap();
        assert_eq!((g0.vertex_count(), g0.edge_count()), (3, 3));
        let g1 = build_gasket(1).unwrap();
        assert_eq!((g1.vertex_count(), g1.edge_count()), (6, 9));
        assert_eq!(build_gasket(2).unwrap().vertex_count(), 15);
        assert!(build_gasket(11).is_err());
    }

    #[test]
    fn gasket_counts_by_induction() {
        // V(n) = 3 V(n-1) - 3 (three shared corners), E(n) = 3 E(n-1)
        let (mut v, mut e) = (3usize, 3usize);
        for level in 0..=7 {
            let g = build_gasket(level).unwrap();
            assert_eq!(g.vertex_count(), v);
            assert_eq!(g.vertex_count(), 3 * (3usize.pow(level) + 1) / 2);
            assert_eq!(g.edge_count(), e);
            assert_eq!(g.edge_count(), 3usize.pow(level + 1));
            assert!(g.is_connected());
            assert!(g.max_degree() <= 4);
            v = 3 * v - 3;
            e *= 3;
        }
    }

    #[test]
    fn zero_steps() {
        let g = build_gasket(2).unwrap();
        let e = simulate_walks(&g, 0, 10, 0).unwrap();
        assert_eq!(e.msd, vec![0.0]);
        assert_eq!(e.return_prob, vec![1.0]);
    }

    #[test]
    fn complete_graph_return_probability() {
        // P0(t) = 1/4 + (3/4)(-1/3)^t on K4
        let g = build_complete(4);
        let e = simulate_walks(&g, 30, 40_000, 1).unwrap();
        for t in 10..=30 {
            let exact = 0.25 + 0.75 * (-1.0f64 / 3.0).powi(t as i32);
            let sd = (exact * (1.0 - exact) / 40_000.0).sqrt();
            assert!((e.return_prob[t] - exact).abs() < 5.0 * sd, "t={t}");
        }
    }

    #[test]
    fn walks_deterministic() {
        let g = build_gasket(4).unwrap();
        let a = simulate_walks(&g, 50, 1500, 9).unwrap();
        let b = simulate_walks(&g, 50, 1500, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chain_and_lattice_mass_dimension() {
        let chain = build_chain(500);
        let d = mass_dimension(&chain, &radii_grid(5.0, 400.0, 10)).unwrap();
        assert!((d.dimension - 1.0).abs() < 0.05, "{}", d.dimension);
        let lat = build_lattice(150);
        let d = mass_dimension(&lat, &radii_grid(5.0, 140.0, 10)).unwrap();
        assert!((d.dimension - 2.0).abs() < 0.1, "{}", d.dimension);
        assert!(mass_dimension(&lat, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn gasket_mass_dimension() {
        let g = build_gasket(8).unwrap();
        let d = mass_dimension(&g, &radii_grid(4.0, 128.0, 12)).unwrap();
        assert!((d.dimension - GASKET_MASS_DIMENSION).abs() < 0.05 * GASKET_MASS_DIMENSION, "{}", d.dimension);
    }

    #[test]
    fn chain_spectral_dimension() {
        let chain = build_chain(400);
        let e = simulate_walks(&chain, 2000, 20_000, 3).unwrap();
        let d = spectral_from_return(&e, 20, 2000).unwrap();
        assert!((d.dimension - 1.0).abs() < 0.1, "{}", d.dimension);
        let w = walker_from_msd(&e, 20, 2000).unwrap();
        assert!((w.dimension - 2.0).abs() < 0.1, "{}", w.dimension);
    }

    #[test]
    fn saturated_window_is_diagnosed() {
        let g = build_gasket(2).unwrap();
        let e = simulate_walks(&g, 400, 5000, 0).unwrap();
        let err = spectral_from_return(&e, 200, 400).unwrap_err();
        assert!(err.to_string().contains("saturated"));
    }
}
