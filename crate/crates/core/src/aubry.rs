//! Static classes of the Aubry set.
//!
//! Classes are harvested as limit sets of the flow of `b` (both time
//! directions), merged when they are equivalent under `Φ̂(p,q)+Φ̂(q,p) ≈ 0`,
//! and classified: a class is stable when every other class costs a positive
//! amount to reach from it.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::c_b;
use crate::fieldlang::{parse, EvalError, Expr, ParseError};
use crate::potential::{GridField, PeriodicGrid, PotentialError, PotentialSolver};
use crate::srgeom::{SRStructure, TorusGeometry};

#[derive(Debug, Error)]
pub enum AubryError {
    #[error("no static class was detected")]
    NoClasses,
    #[error("class {class} fails internal equivalence: Φ̂({p:?},{q:?}) + Φ̂({q:?},{p:?}) = {value} > {tol}")]
    NotEquivalent { class: String, p: Vec<f64>, q: Vec<f64>, value: f64, tol: f64 },
    #[error("point {point:?} lies within the snap radius of class {class}; use that class")]
    InsideClass { point: Vec<f64>, class: String },
    #[error("point {point:?} is equivalent to class {class} (Φ̂ round trip {value}); use that class")]
    EquivalentToClass { point: Vec<f64>, class: String, value: f64 },
    #[error("invalid manual class {label}: {reason}")]
    Manual { label: String, reason: String },
    #[error("cannot parse level set of class {label}: {source}")]
    LevelSet {
        label: String,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactClass {
    pub label: String,
    pub points: Vec<Vec<f64>>,
    pub stable: bool,
    pub snap_radius: f64,
}

/// An admissible collection: classes, `Φ̂(K_i,K_j)` and the tolerances used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSystem {
    pub classes: Vec<CompactClass>,
    #[serde(with = "crate::extreal::matrix")]
    pub phi: Vec<Vec<f64>>,
    pub tol_static: f64,
    pub snap_radius: f64,
}

impl ClassSystem {
    /// Computes the potential matrix for the given point clouds and
    /// classifies stability.
    pub fn from_clouds(
        solver: &PotentialSolver<'_>,
        clouds: Vec<(String, Vec<Vec<f64>>)>,
        tol_static: f64,
    ) -> Result<Self, AubryError> {
        if clouds.is_empty() {
            return Err(AubryError::NoClasses);
        }
        let sets: Vec<Vec<Vec<f64>>> = clouds.iter().map(|(_, p)| p.clone()).collect();
        let phi = solver.potential_matrix(&sets)?;
        let stable = classify_stability(&phi, tol_static);
        let snap = solver.spec.snap_radius;
        let classes = clouds
            .into_iter()
            .zip(stable)
            .map(|((label, points), stable)| CompactClass { label, points, stable, snap_radius: snap })
            .collect();
        Ok(ClassSystem { classes, phi, tol_static, snap_radius: snap })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn stable_mask(&self) -> Vec<bool> {
        self.classes.iter().map(|c| c.stable).collect()
    }

    pub fn point_sets(&self) -> Vec<Vec<Vec<f64>>> {
        self.classes.iter().map(|c| c.points.clone()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("class system serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Class `i` is stable iff `min_{j≠i} Φ̂(K_i,K_j) > tol`. A lone class is stable.
pub fn classify_stability(phi: &[Vec<f64>], tol: f64) -> Vec<bool> {
    let m = phi.len();
    (0..m).map(|i| (0..m).filter(|&j| j != i).all(|j| phi[i][j] > tol)).collect()
}

/// `4·(c_b/2)·max Δ_j`.
pub fn default_tol_static(s: &SRStructure, grid: &PeriodicGrid) -> Result<f64, EvalError> {
    Ok(2.0 * c_b(s)? * grid.max_spacing())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowDirection {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Time integrated before recording, in units of `min period / max|b|`.
    pub transient: f64,
    /// Length of the recorded trailing window, same units.
    pub window: f64,
    /// Points closer than this to a cell already visited are dropped; also
    /// the per-step displacement target of the adaptive step.
    pub cell: f64,
    /// Clouds whose Hausdorff distance is below this are merged.
    pub cluster_tol: f64,
}

impl FlowParams {
    pub fn for_grid(grid: &PeriodicGrid) -> Self {
        let h = grid.max_spacing();
        FlowParams { transient: 50.0, window: 100.0, cell: h, cluster_tol: 4.0 * h }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowLimits {
    pub clouds: Vec<Vec<Vec<f64>>>,
    /// Seeds whose trailing window did not settle, with the reason.
    pub skipped: Vec<(usize, String)>,
}

struct Flow<'a> {
    s: &'a SRStructure,
    sign: f64,
    h_max: f64,
    target_step: f64,
}

impl Flow<'_> {
    fn rhs(&self, ev: &mut crate::srgeom::Evaluator<'_, f64>, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        ev.drift(x, out)?;
        out.iter_mut().for_each(|v| *v *= self.sign);
        Ok(())
    }

    /// One RK4 step whose size keeps the displacement near `target_step`.
    fn step(&self, ev: &mut crate::srgeom::Evaluator<'_, f64>, x: &mut [f64]) -> Result<f64, EvalError> {
        let d = x.len();
        let mut k1 = vec![0.0; d];
        self.rhs(ev, x, &mut k1)?;
        let speed = k1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = if speed > 0.0 { (self.target_step / speed).min(self.h_max) } else { self.h_max };
        let mut y = vec![0.0; d];
        let mut k2 = vec![0.0; d];
        let mut k3 = vec![0.0; d];
        let mut k4 = vec![0.0; d];
        for j in 0..d {
            y[j] = x[j] + 0.5 * h * k1[j];
        }
        self.rhs(ev, &y, &mut k2)?;
        for j in 0..d {
            y[j] = x[j] + 0.5 * h * k2[j];
        }
        self.rhs(ev, &y, &mut k3)?;
        for j in 0..d {
            y[j] = x[j] + h * k3[j];
        }
        self.rhs(ev, &y, &mut k4)?;
        for j in 0..d {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        self.s.geometry().wrap_in_place(x);
        Ok(h)
    }
}

/// Characteristic time `min period / max|b|` over the probe lattice.
fn time_scale(s: &SRStructure) -> Result<f64, EvalError> {
    let mut ev = s.evaluator::<f64>();
    let mut b = vec![0.0; s.dim()];
    let mut vmax: f64 = 0.0;
    for p in s.geometry().probe_lattice() {
        ev.drift(&p, &mut b)?;
        vmax = vmax.max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let lmin = s.geometry().periods().iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(if vmax > 0.0 { lmin / vmax } else { 1.0 })
}

/// Keeps the first point falling in each cell of side `cell`.
fn dedup_cells(geom: &TorusGeometry, points: &[Vec<f64>], cell: f64) -> Vec<Vec<f64>> {
    let mut seen: BTreeMap<Vec<i64>, Vec<f64>> = BTreeMap::new();
    for p in points {
        let key: Vec<i64> = p
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let n = (geom.periods()[j] / cell).round().max(1.0) as i64;
                ((geom.wrap_coord(j, v) / geom.periods()[j] * n as f64).round() as i64).rem_euclid(n)
            })
            .collect();
        seen.entry(key).or_insert_with(|| p.clone());
    }
    seen.into_values().collect()
}

/// Every point of `a` has a point of `b` within `tol`.
fn directed_within(geom: &TorusGeometry, a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> bool {
    a.iter().all(|p| b.iter().any(|q| geom.flat_distance(p, q) <= tol))
}

pub fn hausdorff_within(geom: &TorusGeometry, a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> bool {
    directed_within(geom, a, b, tol) && directed_within(geom, b, a, tol)
}

/// Hausdorff distance between two finite clouds on the torus.
pub fn hausdorff_distance(geom: &TorusGeometry, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let dir = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        x.par_iter()
            .map(|p| y.iter().map(|q| geom.flat_distance(p, q)).fold(f64::INFINITY, f64::min))
            .reduce(|| 0.0, f64::max)
    };
    dir(a, b).max(dir(b, a))
}

/// Points of the trailing window, or why the trajectory was discarded.
type TrailingWindow = Result<Vec<Vec<f64>>, String>;

/// Integrates `ẋ = ±b(x)` from every seed, records a trailing window and
/// clusters the windows across seeds.
pub fn flow_limit_sets(
    s: &SRStructure,
    seeds: &[Vec<f64>],
    direction: FlowDirection,
    params: &FlowParams,
) -> Result<FlowLimits, AubryError> {
    let tau = time_scale(s)?;
    let flow = Flow {
        s,
        sign: if direction == FlowDirection::Forward { 1.0 } else { -1.0 },
        h_max: 0.02 * tau,
        target_step: 0.25 * params.cell,
    };
    let geom = s.geometry();
    let windows: Vec<Result<TrailingWindow, EvalError>> = seeds
        .par_iter()
        .map(|seed| {
            let mut ev = s.evaluator::<f64>();
            let mut x = geom.wrap(seed);
            let mut t = 0.0;
            while t < params.transient * tau {
                t += flow.step(&mut ev, &mut x)?;
            }
            let mut first = Vec::new();
            let mut second = Vec::new();
            let half = params.window * tau / 2.0;
            let mut w = 0.0;
            while w < 2.0 * half {
                if w < half {
                    first.push(x.clone());
                } else {
                    second.push(x.clone());
                }
                w += flow.step(&mut ev, &mut x)?;
            }
            second.push(x.clone());
            let a = dedup_cells(geom, &first, params.cell);
            let b = dedup_cells(geom, &second, params.cell);
            if !hausdorff_within(geom, &a, &b, params.cluster_tol) {
                return Ok(Err(format!(
                    "trailing window not settled (half-window Hausdorff distance {:.3e})",
                    hausdorff_distance(geom, &a, &b)
                )));
            }
            let mut all = first;
            all.extend(second);
            Ok(Ok(dedup_cells(geom, &all, params.cell)))
        })
        .collect();

    let mut clouds: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut skipped = Vec::new();
    for (k, w) in windows.into_iter().enumerate() {
        match w? {
            Err(reason) => skipped.push((k, reason)),
            Ok(cloud) => match clouds.iter().position(|c| hausdorff_within(geom, c, &cloud, params.cluster_tol)) {
                Some(i) => {
                    let mut merged = std::mem::take(&mut clouds[i]);
                    merged.extend(cloud);
                    clouds[i] = dedup_cells(geom, &merged, params.cell);
                }
                None => clouds.push(cloud),
            },
        }
    }
    Ok(FlowLimits { clouds, skipped })
}

/// Zeros of `b` found by Newton iteration (pseudo-inverse steps) from every
/// seed, deduplicated.
pub fn find_equilibria(s: &SRStructure, seeds: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EvalError> {
    let d = s.dim();
    let jac: Vec<_> = s.drift_jacobian().iter().map(Expr::compile).collect();
    let geom = s.geometry();
    let found: Vec<Option<Vec<f64>>> = seeds
        .par_iter()
        .map(|seed| -> Result<Option<Vec<f64>>, EvalError> {
            let mut ev = s.evaluator::<f64>();
            let mut stack = Vec::new();
            let mut x = seed.clone();
            let mut b = vec![0.0; d];
            for _ in 0..60 {
                ev.drift(&x, &mut b)?;
                let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    return Ok(Some(geom.wrap(&x)));
                }
                let mut jm = DMatrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        jm[(i, j)] = jac[i * d + j].eval(&x, &mut stack)?;
                    }
                }
                let rhs = DVector::from_vec(b.clone());
                let svd = jm.svd(true, true);
                let dx = match svd.solve(&rhs, 1e-12) {
                    Ok(v) => v,
                    Err(_) => return Ok(None),
                };
                let step = dx.norm();
                let lmax = geom.periods().iter().cloned().fold(0.0, f64::max);
                let scale = if step > 0.25 * lmax { 0.25 * lmax / step } else { 1.0 };
                for j in 0..d {
                    x[j] -= scale * dx[j];
                }
            }
            ev.drift(&x, &mut b)?;
            let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok((norm < 1e-10).then(|| geom.wrap(&x)))
        })
        .collect::<Result<_, _>>()?;
    let mut out: Vec<Vec<f64>> = Vec::new();
    for p in found.into_iter().flatten() {
        if !out.iter().any(|q| geom.flat_distance(&p, q) < 1e-6) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Uniform seed lattice with `n` points per axis.
pub fn seed_lattice(geom: &TorusGeometry, n: usize) -> Vec<Vec<f64>> {
    let d = geom.dim();
    let total = n.pow(d as u32);
    (0..total)
        .map(|mut k| {
            let mut p = vec![0.0; d];
            for j in (0..d).rev() {
                p[j] = (k % n) as f64 * geom.periods()[j] / n as f64;
                k /= n;
            }
            p
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    pub seeds_per_axis: usize,
    pub flow: FlowParams,
    pub tol_static: f64,
    /// Points per class used for the internal-equivalence check.
    pub equivalence_samples: usize,
}

impl DetectionParams {
    pub fn defaults(s: &SRStructure, grid: &PeriodicGrid) -> Result<Self, EvalError> {
        Ok(DetectionParams {
            seeds_per_axis: 4,
            flow: FlowParams::for_grid(grid),
            tol_static: default_tol_static(s, grid)?,
            equivalence_samples: 4,
        })
    }
}

/// Harvests forward and backward limit sets, merges equivalent clouds,
/// verifies internal equivalence and builds the class system. Classes are
/// labelled `A1, A2, …` in order of their smallest snapped node index.
pub fn detect_static_classes(
    solver: &PotentialSolver<'_>,
    params: &DetectionParams,
) -> Result<ClassSystem, AubryError> {
    let s = solver.structure;
    let geom = s.geometry();
    let mut seeds = seed_lattice(geom, params.seeds_per_axis);
    let eq_seeds = seed_lattice(geom, (2 * params.seeds_per_axis).max(8).min(if s.dim() > 2 { 8 } else { 64 }));
    seeds.extend(find_equilibria(s, &eq_seeds)?);

    let mut clouds = Vec::new();
    for dir in [FlowDirection::Forward, FlowDirection::Backward] {
        clouds.extend(flow_limit_sets(s, &seeds, dir, &params.flow)?.clouds);
    }
    // clouds found in both directions (e.g. equilibria seeds) collapse here
    let mut distinct: Vec<Vec<Vec<f64>>> = Vec::new();
    for c in clouds {
        match distinct.iter().position(|d| hausdorff_within(geom, d, &c, params.flow.cluster_tol)) {
            Some(i) => {
                let mut m = std::mem::take(&mut distinct[i]);
                m.extend(c);
                distinct[i] = dedup_cells(geom, &m, params.flow.cell);
            }
            None => distinct.push(c),
        }
    }
    if distinct.is_empty() {
        return Err(AubryError::NoClasses);
    }

    let fields: Vec<GridField<f64>> =
        distinct.par_iter().map(|c| solver.potential_from_set(c)).collect::<Result<_, _>>()?;
    let nodes: Vec<Vec<usize>> = distinct.iter().map(|c| solver.snap(c)).collect();
    let n = distinct.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        if p[i] != i {
            let r = find(p, p[i]);
            p[i] = r;
        }
        p[i]
    }
    for i in 0..n {
        for j in i + 1..n {
            let round = fields[i].min_over(&nodes[j]) + fields[j].min_over(&nodes[i]);
            if round <= params.tol_static {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().extend(distinct[i].iter().cloned());
    }
    let mut merged: Vec<(usize, Vec<Vec<f64>>)> = groups
        .into_values()
        .map(|pts| {
            let pts = dedup_cells(geom, &pts, params.flow.cell);
            (solver.snap(&pts)[0], pts)
        })
        .collect();
    merged.sort_by_key(|(k, _)| *k);

    let labelled: Vec<(String, Vec<Vec<f64>>)> =
        merged.into_iter().enumerate().map(|(i, (_, p))| (format!("A{}", i + 1), p)).collect();
    for (label, pts) in &labelled {
        check_internal_equivalence(solver, label, pts, params.equivalence_samples, params.tol_static)?;
    }
    ClassSystem::from_clouds(solver, labelled, params.tol_static)
}

/// `Φ̂(p,q)+Φ̂(q,p) ≤ tol` for evenly spaced sample pairs of the cloud.
pub fn check_internal_equivalence(
    solver: &PotentialSolver<'_>,
    label: &str,
    points: &[Vec<f64>],
    samples: usize,
    tol: f64,
) -> Result<(), AubryError> {
    let k = samples.clamp(1, points.len().max(1));
    let picks: Vec<&Vec<f64>> = (0..k).map(|i| &points[i * points.len() / k]).collect();
    let fields: Vec<Vec<f64>> = picks
        .par_iter()
        .map(|p| solver.field_from_nodes(&[solver.grid.nearest_node(p)], "probe").map(|f| f.values))
        .collect::<Result<_, _>>()?;
    for a in 0..k {
        for b in a + 1..k {
            let ia = solver.grid.nearest_node(picks[a]);
            let ib = solver.grid.nearest_node(picks[b]);
            let v = fields[a][ib] + fields[b][ia];
            if v > tol {
                return Err(AubryError::NotEquivalent {
                    class: label.to_string(),
                    p: picks[a].clone(),
                    q: picks[b].clone(),
                    value: v,
                    tol,
                });
            }
        }
    }
    Ok(())
}

/// A class given explicitly instead of detected: a point list, or the grid
/// nodes where `|f(x)| ≤ tol` for a level-set expression `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualClass {
    pub label: String,
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub level_set: Option<String>,
    #[serde(default)]
    pub level_tol: Option<f64>,
}

impl ManualClass {
    pub fn resolve(&self, grid: &PeriodicGrid) -> Result<Vec<Vec<f64>>, AubryError> {
        let err = |reason: &str| AubryError::Manual { label: self.label.clone(), reason: reason.into() };
        let d = grid.dim();
        let mut out: Vec<Vec<f64>> = Vec::new();
        for p in &self.points {
            if p.len() != d {
                return Err(err(&format!("point {p:?} has {} coordinates, expected {d}", p.len())));
            }
            out.push(grid.geometry().wrap(p));
        }
        if let Some(text) = &self.level_set {
            let f = parse(text, d).map_err(|source| AubryError::LevelSet { label: self.label.clone(), source })?;
            let prog = f.compile();
            let tol = self.level_tol.unwrap_or(grid.max_spacing());
            let mut stack = Vec::new();
            for i in 0..grid.len() {
                let x = grid.coords(i);
                if prog.eval(&x, &mut stack)?.abs() <= tol {
                    out.push(x);
                }
            }
        }
        if out.is_empty() {
            return Err(err("no points"));
        }
        Ok(out)
    }
}

pub fn manual_class_system(
    solver: &PotentialSolver<'_>,
    specs: &[ManualClass],
    tol_static: f64,
) -> Result<ClassSystem, AubryError> {
    let clouds = specs
        .iter()
        .map(|m| Ok((m.label.clone(), m.resolve(&solver.grid)?)))
        .collect::<Result<Vec<_>, AubryError>>()?;
    ClassSystem::from_clouds(solver, clouds, tol_static)
}

/// Appends the singleton `{x}` (snapped to its nearest node only) as an
/// unstable class, extending the matrix with `Φ̂` to and from `x`. The class
/// fields `Φ̂(K_i,·)` may be supplied to avoid recomputing them.
pub fn extend_with_point(
    cs: &ClassSystem,
    solver: &PotentialSolver<'_>,
    fields: Option<&[GridField<f64>]>,
    x: &[f64],
) -> Result<ClassSystem, AubryError> {
    let geom = solver.grid.geometry();
    let xw = geom.wrap(x);
    for c in &cs.classes {
        if c.points.iter().any(|p| geom.flat_distance(p, &xw) <= cs.snap_radius) {
            return Err(AubryError::InsideClass { point: xw, class: c.label.clone() });
        }
    }
    let owned;
    let fields = match fields {
        Some(f) => f,
        None => {
            owned = solver.class_fields(&cs.point_sets())?;
            &owned
        }
    };
    let xi = solver.grid.nearest_node(&xw);
    let from_x = solver.field_from_nodes(&[xi], "from_x")?;
    let m = cs.len();
    let mut phi = cs.phi.clone();
    let mut last = vec![0.0; m + 1];
    for (i, c) in cs.classes.iter().enumerate() {
        let to_class = from_x.min_over(&solver.snap(&c.points));
        let to_x = fields[i].values[xi];
        if to_class + to_x <= cs.tol_static {
            return Err(AubryError::EquivalentToClass { point: xw, class: c.label.clone(), value: to_class + to_x });
        }
        phi[i].push(to_x);
        last[i] = to_class;
    }
    phi.push(last);
    let mut classes = cs.classes.clone();
    classes.push(CompactClass { label: "x".into(), points: vec![xw], stable: false, snap_radius: cs.snap_radius });
    Ok(ClassSystem { classes, phi, tol_static: cs.tol_static, snap_radius: cs.snap_radius })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldlang::Expr;
    use std::f64::consts::{FRAC_1_PI, PI};

    fn circle(bbar: &str) -> SRStructure {
        let g = TorusGeometry::new(vec![1.0]).unwrap();
        SRStructure::new(g, vec![vec![Expr::one()]], vec![parse(bbar, 1).unwrap()]).unwrap()
    }

    fn torus_b1() -> SRStructure {
        let p = |t: &str| parse(t, 3).unwrap();
        SRStructure::new(
            TorusGeometry::standard(3).unwrap(),
            vec![vec![p("cos(x3)"), p("0")], vec![p("sin(x3)"), p("0")], vec![p("0"), p("1")]],
            vec![p("1"), p("sin(x3 - 1)")],
        )
        .unwrap()
    }

    #[test]
    fn single_well_classes() {
        let s = circle("-sin(2*pi*x1)");
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 256).unwrap();
        let solver = PotentialSolver::with_defaults(&s, grid.clone()).unwrap();
        let params = DetectionParams::defaults(&s, &grid).unwrap();
        let cs = detect_static_classes(&solver, &params).unwrap();
        assert_eq!(cs.len(), 2);
        assert!(cs.classes[0].points.iter().all(|p| geom_dist(&s, p, &[0.0]) < 0.01));
        assert!(cs.classes[1].points.iter().all(|p| geom_dist(&s, p, &[0.5]) < 0.01));
        assert_eq!(cs.stable_mask(), vec![true, false]);
        assert!((cs.phi[0][1] - FRAC_1_PI).abs() < 0.02);
        assert!(cs.phi[1][0] <= cs.tol_static);
        let back = ClassSystem::from_json(&cs.to_json()).unwrap();
        assert_eq!(back, cs);
    }

    fn geom_dist(s: &SRStructure, a: &[f64], b: &[f64]) -> f64 {
        s.geometry().flat_distance(a, b)
    }

    #[test]
    fn flow_limits_on_torus() {
        let s = torus_b1();
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 24).unwrap();
        let params = FlowParams::for_grid(&grid);
        let seeds = vec![vec![0.3, 1.0, 0.0], vec![2.0, 5.0, 3.0], vec![4.0, 0.5, 5.5]];
        let fwd = flow_limit_sets(&s, &seeds, FlowDirection::Forward, &params).unwrap();
        assert_eq!(fwd.clouds.len(), 1);
        assert!(fwd.clouds[0].iter().all(|p| (p[2] - (1.0 + PI)).abs() < 1e-6));
        let bwd = flow_limit_sets(&s, &seeds, FlowDirection::Backward, &params).unwrap();
        assert_eq!(bwd.clouds.len(), 1);
        assert!(bwd.clouds[0].iter().all(|p| (p[2] - 1.0).abs() < 1e-6));
    }

    #[test]
    fn equilibrium_seed_is_its_own_limit() {
        let s = circle("-sin(2*pi*x1)");
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 64).unwrap();
        let eq = find_equilibria(&s, &seed_lattice(s.geometry(), 8)).unwrap();
        assert_eq!(eq.len(), 2);
        let out = flow_limit_sets(&s, &[vec![0.5]], FlowDirection::Forward, &FlowParams::for_grid(&grid)).unwrap();
        assert_eq!(out.clouds, vec![vec![vec![0.5]]]);
    }

    #[test]
    fn extension_by_a_point() {
        let s = circle("-sin(2*pi*x1)");
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 256).unwrap();
        let solver = PotentialSolver::with_defaults(&s, grid.clone()).unwrap();
        let tol = default_tol_static(&s, &grid).unwrap();
        let manual = vec![
            ManualClass { label: "A1".into(), points: vec![vec![0.0]], level_set: None, level_tol: None },
            ManualClass { label: "A2".into(), points: vec![vec![0.5]], level_set: None, level_tol: None },
        ];
        let cs = manual_class_system(&solver, &manual, tol).unwrap();
        let ext = extend_with_point(&cs, &solver, None, &[0.2]).unwrap();
        assert_eq!(ext.len(), 3);
        assert!(!ext.classes[2].stable);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(ext.phi[i][j], cs.phi[i][j]);
            }
        }
        // 0.2 drains into the well for free
        assert!(ext.phi[2][0] <= tol);
        assert!(matches!(extend_with_point(&cs, &solver, None, &[0.001]), Err(AubryError::InsideClass { .. })));
    }

    #[test]
    fn level_set_classes() {
        let grid = PeriodicGrid::uniform(TorusGeometry::standard(2).unwrap(), 16).unwrap();
        let whole = ManualClass { label: "T".into(), points: vec![], level_set: Some("0".into()), level_tol: None };
        assert_eq!(whole.resolve(&grid).unwrap().len(), 256);
        let empty = ManualClass { label: "E".into(), points: vec![], level_set: None, level_tol: None };
        assert!(empty.resolve(&grid).is_err());
        let bad = ManualClass { label: "B".into(), points: vec![vec![1.0]], level_set: None, level_tol: None };
        assert!(bad.resolve(&grid).is_err());
    }

    #[test]
    fn stability_rule() {
        assert_eq!(classify_stability(&[vec![0.0]], 0.1), vec![true]);
        let phi = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(classify_stability(&phi, 0.1), vec![false, true]);
    }
}
