//! Euler–Maruyama simulation of `dX = b(X)dt + √ε σ(X) dW` on the torus and
//! estimators built on the resulting occupation measures.
//!
//! Every chain draws from its own ChaCha stream selected by `(seed, chain)`;
//! the step counter is the position in that stream. Chains run in parallel
//! and are merged in chain order, so results do not depend on scheduling.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aubry::ClassSystem;
use crate::fieldlang::EvalError;
use crate::potential::{dijkstra, EdgeWeight, GridField, PeriodicGrid, PotentialSolver};
use crate::srgeom::SRStructure;

#[derive(Debug, Error)]
pub enum StochasticError {
    #[error("invalid run: {0}")]
    Run(String),
    #[error("ball of radius {radius} around {center:?} contains no cell")]
    EmptyBall { center: Vec<f64>, radius: f64 },
    #[error("radius {radius} is below twice the grid spacing {min}")]
    RadiusTooSmall { radius: f64, min: f64 },
    #[error("only {survivors} of the ladder values have a nonzero ball measure; at least 3 are needed")]
    Undersampled { survivors: usize },
    #[error("ε ladder must hold at least 3 strictly decreasing positive values")]
    Ladder,
    #[error("need δ₁ < δ₀ < ½·(min class distance = {min_distance}); got δ₁ = {delta1}, δ₀ = {delta0}")]
    Deltas { delta0: f64, delta1: f64, min_distance: f64 },
    #[error("grid mismatch between histogram and solver")]
    Grid,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SDERun {
    pub eps: f64,
    pub dt: f64,
    pub horizon: f64,
    pub burn_in: f64,
    pub seed: u64,
    pub chains: usize,
    /// Common start; when absent each chain starts uniformly at random.
    pub start: Option<Vec<f64>>,
}

/// Largest `|b(x)| = |σ(x)b̄(x)|` over a lattice of up to 4096 points.
pub fn max_drift_speed(s: &SRStructure) -> Result<f64, EvalError> {
    let geom = s.geometry();
    let d = geom.dim();
    let per_axis = (4096f64.powf(1.0 / d as f64).floor() as usize).clamp(2, 64);
    let total = per_axis.pow(d as u32);
    let mut ev = s.evaluator::<f64>();
    let mut b = vec![0.0; d];
    let mut best = 0.0f64;
    for k in 0..total {
        let mut rem = k;
        let x: Vec<f64> = geom
            .periods()
            .iter()
            .map(|&p| {
                let i = rem % per_axis;
                rem /= per_axis;
                p * i as f64 / per_axis as f64
            })
            .collect();
        ev.drift(&x, &mut b)?;
        best = best.max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(best)
}

impl SDERun {
    /// Step bound `min(ε/10, 10⁻²·min period / max|b|)`; only the second
    /// term applies at `ε = 0`.
    pub fn step_bound(s: &SRStructure, eps: f64) -> Result<f64, EvalError> {
        let pmin = s.geometry().periods().iter().copied().fold(f64::INFINITY, f64::min);
        let speed = max_drift_speed(s)?;
        let flow = if speed > 0.0 { 1e-2 * pmin / speed } else { f64::INFINITY };
        let noise = if eps > 0.0 { eps / 10.0 } else { f64::INFINITY };
        let dt = flow.min(noise);
        Ok(if dt.is_finite() { dt } else { 1e-2 * pmin })
    }

    pub fn new(
        s: &SRStructure,
        eps: f64,
        horizon: f64,
        burn_in: f64,
        seed: u64,
        chains: usize,
    ) -> Result<Self, EvalError> {
        Ok(SDERun { eps, dt: Self::step_bound(s, eps)?, horizon, burn_in, seed, chains, start: None })
    }

    pub fn validate(&self, s: &SRStructure) -> Result<(), StochasticError> {
        let bad = |m: String| Err(StochasticError::Run(m));
        if !(self.eps >= 0.0) || !(self.dt > 0.0) || !(self.horizon > 0.0) {
            return bad(format!(
                "need ε ≥ 0, dt > 0, T > 0 (ε = {}, dt = {}, T = {})",
                self.eps, self.dt, self.horizon
            ));
        }
        if !(0.0..self.horizon).contains(&self.burn_in) {
            return bad(format!("burn-in {} outside [0, T)", self.burn_in));
        }
        if self.chains == 0 {
            return bad("at least one chain".into());
        }
        let bound = Self::step_bound(s, self.eps)?;
        if self.dt > bound * (1.0 + 1e-12) {
            return bad(format!("dt = {} exceeds the stability bound {bound}", self.dt));
        }
        if let Some(x) = &self.start {
            if x.len() != s.dim() {
                return bad(format!("start point has {} coordinates, expected {}", x.len(), s.dim()));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn burn_steps(&self) -> usize {
        (self.burn_in / self.dt).round() as usize
    }
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Drives one chain, calling `visit(k, x_k)` for `k = 0..=steps` with `x_k`
/// the wrapped state before step `k`. Returning `false` stops the chain.
pub fn run_chain(
    s: &SRStructure,
    run: &SDERun,
    chain: usize,
    mut visit: impl FnMut(usize, &[f64]) -> bool,
) -> Result<(), EvalError> {
    let geom = s.geometry();
    let (d, r) = (s.dim(), s.rank());
    let mut rng = chain_rng(run.seed, chain);
    let mut x: Vec<f64> = match &run.start {
        Some(p) => geom.wrap(p),
        None => geom.periods().iter().map(|&p| rng.random_range(0.0..p)).collect(),
    };
    let mut ev = s.evaluator::<f64>();
    let mut b = vec![0.0; d];
    let mut sig = vec![0.0; d * r];
    let mut z = vec![0.0; r];
    let amp = (run.eps * run.dt).sqrt();
    let n = run.steps();
    for k in 0..=n {
        if !visit(k, &x) || k == n {
            break;
        }
        ev.drift(&x, &mut b)?;
        if amp > 0.0 {
            ev.sigma(&x, &mut sig)?;
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
        }
        for i in 0..d {
            let mut noise = 0.0;
            if amp > 0.0 {
                for k2 in 0..r {
                    noise += sig[i * r + k2] * z[k2];
                }
            }
            x[i] += b[i] * run.dt + amp * noise;
        }
        geom.wrap_in_place(&mut x);
    }
    Ok(())
}

/// The wrapped trajectory of one chain.
pub fn simulate_path(s: &SRStructure, run: &SDERun, chain: usize) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut out = Vec::with_capacity(run.steps() + 1);
    run_chain(s, run, chain, |_, x| {
        out.push(x.to_vec());
        true
    })?;
    Ok(out)
}

/// Classical RK4 integration of `ẋ = b(x)`, wrapped after every step.
pub fn rk4_flow(s: &SRStructure, x0: &[f64], dt: f64, steps: usize) -> Result<Vec<Vec<f64>>, EvalError> {
    let geom = s.geometry();
    let d = s.dim();
    let mut ev = s.evaluator::<f64>();
    let mut x = geom.wrap(x0);
    let mut out = vec![x.clone()];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    for _ in 0..steps {
        ev.drift(&x, &mut k1)?;
        (0..d).for_each(|i| tmp[i] = x[i] + 0.5 * dt * k1[i]);
        ev.drift(&tmp, &mut k2)?;
        (0..d).for_each(|i| tmp[i] = x[i] + 0.5 * dt * k2[i]);
        ev.drift(&tmp, &mut k3)?;
        (0..d).for_each(|i| tmp[i] = x[i] + dt * k3[i]);
        ev.drift(&tmp, &mut k4)?;
        (0..d).for_each(|i| x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        geom.wrap_in_place(&mut x);
        out.push(x.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupationHistogram {
    pub grid: PeriodicGrid,
    /// Residence time per cell, summed over chains.
    pub time: Vec<f64>,
    pub total: f64,
    /// Per-chain residence time, kept for bootstrap estimates.
    pub per_chain: Vec<Vec<f64>>,
    /// Residence time in the first and second halves of the post-burn-in window.
    pub halves: [Vec<f64>; 2],
    pub run: SDERun,
}

impl OccupationHistogram {
    pub fn fractions(&self) -> Vec<f64> {
        self.time.iter().map(|t| t / self.total).collect()
    }

    pub fn to_field(&self) -> GridField<f64> {
        GridField::new(self.grid.clone(), "occupation", self.fractions())
            .with_meta("eps", self.run.eps)
            .with_meta("seed", self.run.seed)
            .with_meta("chains", self.run.chains)
    }

    pub fn argmax(&self) -> usize {
        (0..self.time.len()).fold(0, |b, i| if self.time[i] > self.time[b] { i } else { b })
    }

    /// Total-variation distance between the normalized half-window histograms.
    pub fn stationarity_tv(&self) -> f64 {
        let (a, b) = (&self.halves[0], &self.halves[1]);
        let (za, zb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
        if za == 0.0 || zb == 0.0 {
            return 1.0;
        }
        0.5 * a.iter().zip(b).map(|(x, y)| (x / za - y / zb).abs()).sum::<f64>()
    }
}

/// Occupation histogram on `grid`: after burn-in each visited state adds
/// `dt` to the cell of its nearest node.
pub fn simulate(s: &SRStructure, grid: &PeriodicGrid, run: &SDERun) -> Result<OccupationHistogram, StochasticError> {
    run.validate(s)?;
    let n = run.steps();
    let burn = run.burn_steps();
    let mid = burn + (n - burn) / 2;
    let chains: Vec<(Vec<f64>, Vec<f64>)> = (0..run.chains)
        .into_par_iter()
        .map(|c| {
            let mut h = vec![0.0; grid.len()];
            let mut first = vec![0.0; grid.len()];
            run_chain(s, run, c, |k, x| {
                if k >= burn && k < n {
                    let cell = grid.nearest_node(x);
                    h[cell] += run.dt;
                    if k < mid {
                        first[cell] += run.dt;
                    }
                }
                true
            })?;
            Ok((h, first))
        })
        .collect::<Result<_, EvalError>>()?;
    let mut time = vec![0.0; grid.len()];
    let mut halves = [vec![0.0; grid.len()], vec![0.0; grid.len()]];
    for (h, first) in &chains {
        for i in 0..grid.len() {
            time[i] += h[i];
            halves[0][i] += first[i];
            halves[1][i] += h[i] - first[i];
        }
    }
    let total = time.iter().sum();
    Ok(OccupationHistogram {
        grid: grid.clone(),
        time,
        total,
        per_chain: chains.into_iter().map(|c| c.0).collect(),
        halves,
        run: run.clone(),
    })
}

#[derive(Clone, Copy)]
pub enum BallMetric<'a> {
    Flat,
    Cc(&'a PotentialSolver<'a>),
}

/// Cells whose centers lie within `radius` of `center`.
pub fn ball_cells(
    grid: &PeriodicGrid,
    center: &[f64],
    radius: f64,
    metric: BallMetric<'_>,
) -> Result<Vec<usize>, StochasticError> {
    let min = 2.0 * grid.max_spacing();
    if radius < min * (1.0 - 1e-12) {
        return Err(StochasticError::RadiusTooSmall { radius, min });
    }
    let cells: Vec<usize> = match metric {
        BallMetric::Flat => {
            let geom = grid.geometry();
            (0..grid.len()).filter(|&i| geom.flat_distance(&grid.coords(i), center) <= radius).collect()
        }
        BallMetric::Cc(solver) => {
            if solver.grid != *grid {
                return Err(StochasticError::Grid);
            }
            let d = dijkstra(&solver.graph, &[grid.nearest_node(center)], None, EdgeWeight::Length);
            (0..grid.len()).filter(|&i| d[i] <= radius).collect()
        }
    };
    if cells.is_empty() {
        return Err(StochasticError::EmptyBall { center: center.to_vec(), radius });
    }
    Ok(cells)
}

pub fn ball_measure(
    hist: &OccupationHistogram,
    center: &[f64],
    radius: f64,
    metric: BallMetric<'_>,
) -> Result<f64, StochasticError> {
    let cells = ball_cells(&hist.grid, center, radius, metric)?;
    Ok(cells.iter().map(|&i| hist.time[i]).sum::<f64>() / hist.total)
}

/// Fraction of time each chain spends in `cells`.
pub fn per_chain_measure(hist: &OccupationHistogram, cells: &[usize]) -> Vec<f64> {
    hist.per_chain
        .iter()
        .map(|h| {
            let tot: f64 = h.iter().sum();
            cells.iter().map(|&i| h[i]).sum::<f64>() / tot
        })
        .collect()
}

/// Occupation fraction of the cells within flat distance `radius` of a point set.
pub fn set_measure(hist: &OccupationHistogram, points: &[Vec<f64>], radius: f64) -> f64 {
    let cells = hist.grid.nodes_near_set(points, radius);
    cells.iter().map(|&i| hist.time[i]).sum::<f64>() / hist.total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTemplate {
    pub horizon: f64,
    pub burn_in: f64,
    pub chains: usize,
    pub seed: u64,
    pub bootstrap: usize,
    /// Horizon doublings allowed when the half-window diagnostic exceeds
    /// `stationarity_tol` or the ball is empty.
    pub max_escalations: usize,
    pub stationarity_tol: f64,
}

impl Default for SweepTemplate {
    fn default() -> Self {
        SweepTemplate {
            horizon: 2000.0,
            burn_in: 20.0,
            chains: 64,
            seed: 1,
            bootstrap: 200,
            max_escalations: 0,
            stationarity_tol: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub eps: f64,
    pub dt: f64,
    pub horizon: f64,
    pub measure: f64,
    /// `−(ε/2)·ln(measure)`; infinite when the ball was never visited.
    #[serde(with = "crate::extreal::scalar")]
    pub y: f64,
    pub stderr: f64,
    pub stationarity_tv: f64,
    pub dropped: bool,
    #[serde(skip)]
    pub per_chain: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub center: Vec<f64>,
    pub radius: f64,
    pub points: Vec<SweepPoint>,
    pub lambda: f64,
    pub slope: f64,
    /// Root-mean-square residual of the affine fit.
    pub fit_residual: f64,
    /// Standard deviation of λ̂ over chain-bootstrap resamples.
    pub bootstrap_se: f64,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,measure,y,stderr,horizon,dropped\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{},{},{}", p.eps, p.measure, p.y, p.stderr, p.horizon, p.dropped);
        }
        s
    }
}

/// Least-squares fit `y = λ + c·ε`; returns `(λ, c, rms residual)`.
pub fn affine_fit(eps: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = eps.len() as f64;
    let mx = eps.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = eps.iter().map(|e| (e - mx) * (e - mx)).sum();
    let sxy: f64 = eps.iter().zip(y).map(|(e, v)| (e - mx) * (v - my)).sum();
    let c = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let lambda = my - c * mx;
    let rms = (eps.iter().zip(y).map(|(e, v)| (v - lambda - c * e).powi(2)).sum::<f64>() / n).sqrt();
    (lambda, c, rms)
}

/// Fits the level `λ̂(x)` of `−(ε/2)·ln μ_ε(B_ρ(x))` along a ladder of ε.
pub fn epsilon_sweep(
    s: &SRStructure,
    grid: &PeriodicGrid,
    center: &[f64],
    radius: f64,
    ladder: &[f64],
    template: &SweepTemplate,
    metric: BallMetric<'_>,
) -> Result<SweepResult, StochasticError> {
    if ladder.len() < 3 || ladder.windows(2).any(|w| !(w[1] < w[0])) || ladder.iter().any(|&e| !(e > 0.0)) {
        return Err(StochasticError::Ladder);
    }
    let cells = ball_cells(grid, center, radius, metric)?;
    let mut points = Vec::with_capacity(ladder.len());
    for &eps in ladder {
        let mut horizon = template.horizon;
        let mut escalations = 0;
        loop {
            let mut run = SDERun::new(s, eps, horizon, template.burn_in, template.seed, template.chains)?;
            run.start = None;
            let hist = simulate(s, grid, &run)?;
            let measure = cells.iter().map(|&i| hist.time[i]).sum::<f64>() / hist.total;
            let tv = hist.stationarity_tv();
            if (measure == 0.0 || tv > template.stationarity_tol) && escalations < template.max_escalations {
                escalations += 1;
                horizon *= 2.0;
                continue;
            }
            let per_chain = per_chain_measure(&hist, &cells);
            let c = per_chain.len() as f64;
            let mean = per_chain.iter().sum::<f64>() / c;
            let var = per_chain.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (c - 1.0).max(1.0);
            points.push(SweepPoint {
                eps,
                dt: run.dt,
                horizon,
                measure,
                y: -0.5 * eps * measure.ln(),
                stderr: (var / c).sqrt(),
                stationarity_tv: tv,
                dropped: measure == 0.0,
                per_chain,
            });
            break;
        }
    }
    let kept: Vec<&SweepPoint> = points.iter().filter(|p| !p.dropped).collect();
    if kept.len() < 3 {
        return Err(StochasticError::Undersampled { survivors: kept.len() });
    }
    let e: Vec<f64> = kept.iter().map(|p| p.eps).collect();
    let y: Vec<f64> = kept.iter().map(|p| p.y).collect();
    let (lambda, slope, fit_residual) = affine_fit(&e, &y);

    let mut rng = ChaCha8Rng::seed_from_u64(template.seed ^ 0xb007_57a9);
    let mut lambdas = Vec::with_capacity(template.bootstrap);
    for _ in 0..template.bootstrap {
        let mut be = Vec::new();
        let mut by = Vec::new();
        for p in &kept {
            let c = p.per_chain.len();
            let m = (0..c).map(|_| p.per_chain[rng.random_range(0..c)]).sum::<f64>() / c as f64;
            if m > 0.0 {
                be.push(p.eps);
                by.push(-0.5 * p.eps * m.ln());
            }
        }
        if be.len() >= 3 {
            lambdas.push(affine_fit(&be, &by).0);
        }
    }
    let bootstrap_se = if lambdas.len() > 1 {
        let m = lambdas.iter().sum::<f64>() / lambdas.len() as f64;
        (lambdas.iter().map(|l| (l - m).powi(2)).sum::<f64>() / (lambdas.len() - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(SweepResult { center: center.to_vec(), radius, points, lambda, slope, fit_residual, bootstrap_se })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwChainStats {
    pub eps: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub counts: Vec<Vec<u64>>,
    pub p_hat: Vec<Vec<f64>>,
    /// `−(ε/2)·ln P̂(i→j)`; infinite for unobserved transitions.
    #[serde(with = "crate::extreal::matrix")]
    pub exponents: Vec<Vec<f64>>,
    pub low_confidence: Vec<bool>,
    /// Occupation fraction of each `V_i = B_{δ₁}(K_i)`.
    pub v_measure: Vec<f64>,
}

/// Minimum flat distance between points of different classes.
pub fn min_class_distance(grid: &PeriodicGrid, cs: &ClassSystem) -> f64 {
    let geom = grid.geometry();
    let mut best = f64::INFINITY;
    for (i, a) in cs.classes.iter().enumerate() {
        for b in &cs.classes[i + 1..] {
            for p in &a.points {
                for q in &b.points {
                    best = best.min(geom.flat_distance(p, q));
                }
            }
        }
    }
    best
}

const IN_D: i32 = -1;
const BETWEEN: i32 = -2;

/// Tallies the transitions of the embedded chain `Z_n`. Region membership
/// is read off the cell of the nearest grid node: `V_i` cells lie within
/// `δ₁` of `K_i` and `D` is the set of cells farther than `δ₀` from every
/// class. Chain `c` starts on class `c mod m`.
pub fn fw_chain_stats(
    s: &SRStructure,
    grid: &PeriodicGrid,
    cs: &ClassSystem,
    delta0: f64,
    delta1: f64,
    run: &SDERun,
) -> Result<FwChainStats, StochasticError> {
    let min_distance = min_class_distance(grid, cs);
    if !(delta1 > 0.0 && delta1 < delta0 && 2.0 * delta0 < min_distance) {
        return Err(StochasticError::Deltas { delta0, delta1, min_distance });
    }
    run.validate(s)?;
    let m = cs.len();
    let mut region = vec![IN_D; grid.len()];
    for c in &cs.classes {
        for i in grid.nodes_near_set(&c.points, delta0) {
            region[i] = BETWEEN;
        }
    }
    for (k, c) in cs.classes.iter().enumerate() {
        for i in grid.nodes_near_set(&c.points, delta1) {
            region[i] = k as i32;
        }
    }
    let burn = run.burn_steps();
    let n = run.steps();
    let per: Vec<(Vec<Vec<u64>>, Vec<f64>)> = (0..run.chains)
        .into_par_iter()
        .map(|c| {
            let mut r = run.clone();
            r.start = Some(cs.classes[c % m].points[0].clone());
            let mut counts = vec![vec![0u64; m]; m];
            let mut v_time = vec![0.0; m];
            let mut last: Option<usize> = None;
            let mut excursion = false;
            run_chain(s, &r, c, |k, x| {
                let g = region[grid.nearest_node(x)];
                if k >= burn && k < n && g >= 0 {
                    v_time[g as usize] += r.dt;
                }
                match (last, excursion) {
                    (None, _) if g >= 0 => last = Some(g as usize),
                    (Some(_), false) if g == IN_D => excursion = true,
                    (Some(i), true) if g >= 0 => {
                        if k >= burn {
                            counts[i][g as usize] += 1;
                        }
                        last = Some(g as usize);
                        excursion = false;
                    }
                    _ => {}
                }
                true
            })?;
            Ok((counts, v_time))
        })
        .collect::<Result<_, EvalError>>()?;
    let mut counts = vec![vec![0u64; m]; m];
    let mut v_time = vec![0.0; m];
    for (c, v) in &per {
        for i in 0..m {
            v_time[i] += v[i];
            for j in 0..m {
                counts[i][j] += c[i][j];
            }
        }
    }
    let total_time = run.chains as f64 * (n - burn) as f64 * run.dt;
    let p_hat: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| {
            let t: u64 = row.iter().sum();
            row.iter().map(|&v| if t == 0 { 0.0 } else { v as f64 / t as f64 }).collect()
        })
        .collect();
    let exponents = p_hat
        .iter()
        .map(|row| row.iter().map(|&p| if p > 0.0 { -0.5 * run.eps * p.ln() } else { f64::INFINITY }).collect())
        .collect();
    Ok(FwChainStats {
        eps: run.eps,
        delta0,
        delta1,
        low_confidence: counts.iter().map(|r| r.iter().sum::<u64>() < 50).collect(),
        counts,
        p_hat,
        exponents,
        v_measure: v_time.iter().map(|t| t / total_time).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srgeom::TorusGeometry;

    fn circle(bbar: &str) -> SRStructure {
        SRStructure::from_strings(TorusGeometry::new(vec![1.0]).unwrap(), &[vec!["1".into()]], &[bbar.into()]).unwrap()
    }

    fn well() -> SRStructure {
        circle("-sin(2*pi*x1)")
    }

    #[test]
    fn step_bound_and_validation() {
        let s = well();
        let dt = SDERun::step_bound(&s, 0.15).unwrap();
        assert!((dt - 0.01).abs() < 1e-3, "{dt}");
        assert!((SDERun::step_bound(&s, 0.05).unwrap() - 0.005).abs() < 1e-12);
        let mut run = SDERun::new(&s, 0.1, 10.0, 1.0, 1, 2).unwrap();
        run.validate(&s).unwrap();
        run.dt *= 2.0;
        assert!(run.validate(&s).is_err());
        run.dt /= 2.0;
        run.burn_in = 20.0;
        assert!(run.validate(&s).is_err());
    }

    #[test]
    fn noiseless_run_follows_flow() {
        let s = well();
        let mut run = SDERun::new(&s, 0.0, 10.0, 0.0, 3, 1).unwrap();
        run.start = Some(vec![0.3]);
        let em = simulate_path(&s, &run, 0).unwrap();
        let rk = rk4_flow(&s, &[0.3], run.dt, run.steps()).unwrap();
        let geom = s.geometry();
        let dev = em.iter().zip(&rk).map(|(a, b)| geom.flat_distance(a, b)).fold(0.0, f64::max);
        // Lip(b) = 2π on the circle
        assert!(dev <= 10.0 * run.dt * 2.0 * std::f64::consts::PI * 10.0, "{dev}");
        assert!(dev <= 0.05);
    }

    #[test]
    fn histogram_mass_and_determinism() {
        let s = well();
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 64).unwrap();
        let run = SDERun::new(&s, 0.15, 50.0, 5.0, 9, 4).unwrap();
        let h = simulate(&s, &grid, &run).unwrap();
        let expect = (run.horizon - run.burn_in) * run.chains as f64;
        assert!((h.total - expect).abs() <= run.dt * run.chains as f64 + 1e-9);
        assert_eq!(h, simulate(&s, &grid, &run).unwrap());
        let other = SDERun { seed: 10, ..run.clone() };
        assert_ne!(h.time, simulate(&s, &grid, &other).unwrap().time);
        let coarse = PeriodicGrid::uniform(s.geometry().clone(), 16).unwrap();
        let long = SDERun { horizon: 400.0, ..run.clone() };
        assert_eq!(coarse.nearest_node(&[0.0]), simulate(&s, &coarse, &long).unwrap().argmax());
        let whole = ball_measure(&h, &[0.0], 0.5, BallMetric::Flat).unwrap();
        assert!((whole - 1.0).abs() < 1e-12);
        let field = h.to_field();
        assert!((field.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ball_measure_properties() {
        let s = well();
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 128).unwrap();
        let run = SDERun::new(&s, 0.15, 200.0, 5.0, 2, 4).unwrap();
        let h = simulate(&s, &grid, &run).unwrap();
        let half = ball_measure(&h, &[0.5], 0.05, BallMetric::Flat).unwrap();
        assert!(half > 0.0 && half < 0.2, "{half}");
        let a = ball_measure(&h, &[0.2], 0.05, BallMetric::Flat).unwrap();
        let b = ball_measure(&h, &[0.35], 0.05, BallMetric::Flat).unwrap();
        let cells_a = ball_cells(&grid, &[0.2], 0.05, BallMetric::Flat).unwrap();
        let cells_b = ball_cells(&grid, &[0.35], 0.05, BallMetric::Flat).unwrap();
        let mut union = cells_a.clone();
        union.extend(&cells_b);
        let joint = union.iter().map(|&i| h.time[i]).sum::<f64>() / h.total;
        assert!((joint - (a + b)).abs() < 1e-12);
        assert!(matches!(
            ball_measure(&h, &[0.5], 0.001, BallMetric::Flat),
            Err(StochasticError::RadiusTooSmall { .. })
        ));
        let solver = PotentialSolver::with_defaults(&s, grid.clone()).unwrap();
        let cc = ball_measure(&h, &[0.5], 0.05, BallMetric::Cc(&solver)).unwrap();
        assert!((cc - half).abs() < 0.05);
    }

    #[test]
    fn sweep_rejects_bad_ladders() {
        let s = well();
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 64).unwrap();
        let t = SweepTemplate { horizon: 5.0, burn_in: 1.0, chains: 2, ..Default::default() };
        for ladder in [vec![0.2, 0.1], vec![0.1, 0.2, 0.05], vec![0.3, 0.2, 0.0]] {
            assert!(matches!(
                epsilon_sweep(&s, &grid, &[0.5], 0.05, &ladder, &t, BallMetric::Flat),
                Err(StochasticError::Ladder)
            ));
        }
    }

    #[test]
    fn sweep_on_stable_point_levels_near_zero() {
        let s = well();
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 128).unwrap();
        let t = SweepTemplate { horizon: 100.0, burn_in: 5.0, chains: 8, bootstrap: 50, ..Default::default() };
        let r = epsilon_sweep(&s, &grid, &[0.0], 0.05, &[0.25, 0.18, 0.12, 0.08], &t, BallMetric::Flat).unwrap();
        assert!(r.lambda.abs() < 0.05, "{r:?}");
        assert!(r.bootstrap_se.is_finite());
        assert!(r.to_csv().lines().count() == 5);
    }

    #[test]
    fn affine_fit_is_exact_on_lines() {
        let (l, c, r) = affine_fit(&[0.1, 0.2, 0.3], &[1.2, 1.7, 2.2]);
        assert!((l - 0.7).abs() < 1e-12 && (c - 5.0).abs() < 1e-12 && r < 1e-12);
    }

    #[test]
    fn fw_chain_preconditions_and_rows() {
        let s = well();
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 128).unwrap();
        let solver = PotentialSolver::with_defaults(&s, grid.clone()).unwrap();
        let cs = ClassSystem::from_clouds(
            &solver,
            vec![("A1".into(), vec![vec![0.0]]), ("A2".into(), vec![vec![0.5]])],
            0.03,
        )
        .unwrap();
        let run = SDERun::new(&s, 0.2, 200.0, 0.0, 4, 4).unwrap();
        assert!(matches!(fw_chain_stats(&s, &grid, &cs, 0.05, 0.1, &run), Err(StochasticError::Deltas { .. })));
        assert!(matches!(fw_chain_stats(&s, &grid, &cs, 0.3, 0.1, &run), Err(StochasticError::Deltas { .. })));
        let st = fw_chain_stats(&s, &grid, &cs, 0.1, 0.05, &run).unwrap();
        for (i, row) in st.p_hat.iter().enumerate() {
            let n: u64 = st.counts[i].iter().sum();
            if n > 0 {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1.0 / (n as f64).sqrt());
            }
        }
        assert!(st.counts[0][0] > st.counts[0][1]);
        assert!(st.v_measure[0] > st.v_measure[1]);
    }
}
