//! The selected solution `ψ(x) = min_i W(A_i) + Φ̂(A_i,x)`, its normalization
//! `φ = ψ − W_min`, and structural checks on both.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{c_b, hamiltonian};
use crate::aubry::{extend_with_point, AubryError, ClassSystem};
use crate::fieldlang::EvalError;
use crate::graphcalc::{compute_w, GraphError, GraphResult};
use crate::potential::{dijkstra, EdgeWeight, GridField, PeriodicGrid, PotentialError, PotentialSolver};

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("min over all classes and min over stable classes differ at node {node} {coords:?}: {all} vs {stable} (tol {tol})")]
    Representation { node: usize, coords: Vec<f64>, all: f64, stable: f64, tol: f64 },
    #[error("inconsistent inputs: {0}")]
    Shape(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Aubry(#[from] AubryError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub labels: Vec<String>,
    pub stable: Vec<bool>,
    #[serde(with = "crate::extreal::vec")]
    pub w: Vec<f64>,
    pub w_min: f64,
    pub tol_static: f64,
    pub grid_dims: Vec<usize>,
    pub periods: Vec<f64>,
    /// Largest nodewise gap between the all-class and stable-class minima.
    pub representation_gap: f64,
}

#[derive(Debug, Clone)]
pub struct SelectedSolution {
    pub psi: GridField<f64>,
    pub phi: GridField<f64>,
    /// Index of the class attaining the minimum at each node.
    pub argmin_class: Vec<usize>,
    pub summary: SelectionSummary,
}

impl SelectedSolution {
    pub fn class_values(&self) -> &[f64] {
        &self.summary.w
    }

    pub fn w_min(&self) -> f64 {
        self.summary.w_min
    }

    /// Writes `psi.wkgf`, `phi.wkgf` and `selection.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SelectorError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.psi.write_wkgf(dir.join("psi.wkgf"))?;
        self.phi.write_wkgf(dir.join("phi.wkgf"))?;
        std::fs::write(dir.join("selection.json"), serde_json::to_string_pretty(&self.summary)?)?;
        Ok(())
    }
}

/// `ψ = min_i W(A_i) + Φ̂(A_i,·)` over all classes, cross-checked nodewise
/// against the minimum over stable classes only.
pub fn assemble_psi(
    cs: &ClassSystem,
    result: &GraphResult,
    fields: &[GridField<f64>],
) -> Result<SelectedSolution, SelectorError> {
    let m = cs.len();
    if m == 0 || result.w.len() != m || fields.len() != m {
        return Err(SelectorError::Shape(format!(
            "{m} classes, {} class values, {} fields",
            result.w.len(),
            fields.len()
        )));
    }
    let grid = fields[0].grid.clone();
    if fields.iter().any(|f| f.grid != grid) {
        return Err(SelectorError::Shape("fields live on different grids".into()));
    }
    let stable = cs.stable_mask();
    let w = &result.w;
    let per_node: Vec<(f64, usize, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|n| {
            let (mut all, mut arg, mut st) = (f64::INFINITY, 0, f64::INFINITY);
            for i in 0..m {
                let v = w[i] + fields[i].values[n];
                if v < all {
                    all = v;
                    arg = i;
                }
                if stable[i] && v < st {
                    st = v;
                }
            }
            (all, arg, st)
        })
        .collect();
    let mut gap = 0.0f64;
    let mut worst = 0;
    for (n, &(all, _, st)) in per_node.iter().enumerate() {
        let g = (st - all).abs();
        if g > gap || (g.is_nan() && !gap.is_nan()) {
            gap = g;
            worst = n;
        }
    }
    if !(gap <= cs.tol_static) {
        let (all, _, st) = per_node[worst];
        return Err(SelectorError::Representation {
            node: worst,
            coords: grid.coords(worst),
            all,
            stable: st,
            tol: cs.tol_static,
        });
    }
    let psi_vals: Vec<f64> = per_node.iter().map(|t| t.0).collect();
    let argmin_class = per_node.iter().map(|t| t.1).collect();
    let w_min = result.w_min;
    let psi = GridField::new(grid.clone(), "psi", psi_vals).with_meta("w_min", w_min);
    let phi = psi.map("phi", |v| v - w_min).with_meta("w_min", w_min);
    Ok(SelectedSolution {
        psi,
        phi,
        argmin_class,
        summary: SelectionSummary {
            labels: cs.classes.iter().map(|c| c.label.clone()).collect(),
            stable,
            w: w.clone(),
            w_min,
            tol_static: cs.tol_static,
            grid_dims: grid.dims().to_vec(),
            periods: grid.geometry().periods().to_vec(),
            representation_gap: gap,
        },
    })
}

/// `W({x})` for the collection extended by the singleton `{x}`.
pub fn phi_at_point_via_graphs(
    cs: &ClassSystem,
    solver: &PotentialSolver<'_>,
    fields: Option<&[GridField<f64>]>,
    x: &[f64],
) -> Result<f64, SelectorError> {
    let ext = extend_with_point(cs, solver, fields, x)?;
    let mask = ext.stable_mask();
    let r = compute_w(&ext.phi, &mask)?;
    Ok(r.w[cs.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominationParams {
    pub pairs: usize,
    /// Number of distinct `q` nodes; each costs one shortest-path solve.
    pub sources: usize,
    pub seed: u64,
    /// Exclusion radius around class neighbourhoods and the cut locus, in cells.
    pub exclusion_cells: usize,
}

impl Default for DominationParams {
    fn default() -> Self {
        DominationParams { pairs: 1000, sources: 16, seed: 0x5eed, exclusion_cells: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub count: usize,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

impl ResidualStats {
    pub fn from_values(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return ResidualStats { count: 0, median: f64::NAN, p90: f64::NAN, max: f64::NAN };
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
        ResidualStats { count: v.len(), median: q(0.5), p90: q(0.9), max: v[v.len() - 1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominationReport {
    pub pairs: usize,
    /// Pairs with `ψ(p) − ψ(q) > Φ̂(q,p) + tol_static`.
    pub violations: usize,
    pub worst_excess: f64,
    /// Pairs with `|ψ(p) − ψ(q)| > (c_b/2)·d_cc(p,q) + tol_static`.
    pub lipschitz_violations: usize,
    pub min_phi: f64,
    pub residual: ResidualStats,
}

impl DominationReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Nodes within `cells` grid steps (in every axis) of a marked node.
pub fn dilate(grid: &PeriodicGrid, marked: &[bool], cells: usize) -> Vec<bool> {
    let mut out = marked.to_vec();
    let d = grid.dim();
    let c = cells as i64;
    for (n, &on) in marked.iter().enumerate() {
        if !on {
            continue;
        }
        let mut off = vec![-c; d];
        loop {
            out[grid.offset(n, &off)] = true;
            let mut k = 0;
            while k < d {
                off[k] += 1;
                if off[k] <= c {
                    break;
                }
                off[k] = -c;
                k += 1;
            }
            if k == d {
                break;
            }
        }
    }
    out
}

/// Centered-difference gradient of a grid field at node `n`.
pub fn centered_gradient(field: &GridField<f64>, n: usize) -> Vec<f64> {
    let grid = &field.grid;
    let d = grid.dim();
    (0..d)
        .map(|j| {
            let mut e = vec![0i64; d];
            e[j] = 1;
            let up = field.values[grid.offset(n, &e)];
            e[j] = -1;
            let down = field.values[grid.offset(n, &e)];
            (up - down) / (2.0 * grid.spacing(j))
        })
        .collect()
}

/// Nodes excluded from the residual statistic: class neighbourhoods and the
/// cut locus, each dilated by `cells`.
pub fn kink_mask(sol: &SelectedSolution, cs: &ClassSystem, cells: usize) -> Vec<bool> {
    let grid = &sol.psi.grid;
    let mut marked = vec![false; grid.len()];
    for c in &cs.classes {
        for n in grid.nodes_near_set(&c.points, cs.snap_radius) {
            marked[n] = true;
        }
    }
    let d = grid.dim();
    for n in 0..grid.len() {
        for j in 0..d {
            let mut e = vec![0i64; d];
            e[j] = 1;
            if sol.argmin_class[grid.offset(n, &e)] != sol.argmin_class[n] {
                marked[n] = true;
            }
        }
    }
    dilate(grid, &marked, cells)
}

/// `|H(x, Dψ)|` at every node outside `excluded`.
pub fn hamiltonian_residuals(
    solver: &PotentialSolver<'_>,
    psi: &GridField<f64>,
    excluded: &[bool],
) -> Result<Vec<f64>, SelectorError> {
    let s = solver.structure;
    let grid = &psi.grid;
    (0..grid.len())
        .into_par_iter()
        .filter(|&n| !excluded[n])
        .map(|n| {
            let p = centered_gradient(psi, n);
            Ok(hamiltonian(s, &grid.coords(n), &p)?.abs())
        })
        .collect()
}

/// Sampled `ψ(p) − ψ(q) ≤ Φ̂(q,p)` and Lipschitz checks plus the residual
/// distribution of `|H(x,Dψ)|` away from kinks.
pub fn domination_check(
    sol: &SelectedSolution,
    cs: &ClassSystem,
    solver: &PotentialSolver<'_>,
    params: &DominationParams,
) -> Result<DominationReport, SelectorError> {
    let grid = &sol.psi.grid;
    if *grid != solver.grid {
        return Err(SelectorError::Shape("solution and solver grids differ".into()));
    }
    let n = grid.len();
    let psi = &sol.psi.values;
    let tol = cs.tol_static;
    let half_cb = 0.5 * c_b(solver.structure)?;
    let sources = params.sources.clamp(1, params.pairs.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let plan: Vec<(usize, Vec<usize>)> = (0..sources)
        .map(|k| {
            let count = params.pairs / sources + usize::from(k < params.pairs % sources);
            let q = rng.random_range(0..n);
            let ps = (0..count).map(|_| rng.random_range(0..n)).collect();
            (q, ps)
        })
        .collect();
    let outcomes: Vec<(usize, f64, usize)> = plan
        .par_iter()
        .map(|(q, ps)| {
            let phi_q = dijkstra(&solver.graph, &[*q], None, EdgeWeight::Action);
            let dist_q = dijkstra(&solver.graph, &[*q], None, EdgeWeight::Length);
            let mut viol = 0;
            let mut worst = f64::NEG_INFINITY;
            let mut lip = 0;
            for &p in ps {
                let excess = psi[p] - psi[*q] - phi_q[p];
                worst = worst.max(excess);
                if excess > tol {
                    viol += 1;
                }
                if (psi[p] - psi[*q]).abs() > half_cb * dist_q[p] + tol {
                    lip += 1;
                }
            }
            (viol, worst, lip)
        })
        .collect();
    let excluded = kink_mask(sol, cs, params.exclusion_cells);
    let residual = ResidualStats::from_values(hamiltonian_residuals(solver, &sol.psi, &excluded)?);
    Ok(DominationReport {
        pairs: params.pairs,
        violations: outcomes.iter().map(|o| o.0).sum(),
        worst_excess: outcomes.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max),
        lipschitz_violations: outcomes.iter().map(|o| o.2).sum(),
        min_phi: sol.phi.min(),
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySample {
    pub x: Vec<f64>,
    pub assembled: f64,
    pub via_graphs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub samples: Vec<ConsistencySample>,
    /// Draws rejected because they sit inside or are equivalent to a class.
    pub rejected: usize,
    pub max_gap: f64,
    pub bound: f64,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.max_gap <= self.bound
    }

    /// No admissible point was found, e.g. when one class covers the torus.
    pub fn is_vacuous(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Compares `ψ` at `count` random points with `W({x})` from the extended
/// collection. Points that fall inside or are equivalent to a class are
/// redrawn, since the extended collection is not admissible there.
pub fn consistency_square(
    sol: &SelectedSolution,
    cs: &ClassSystem,
    solver: &PotentialSolver<'_>,
    fields: &[GridField<f64>],
    count: usize,
    seed: u64,
) -> Result<ConsistencyReport, SelectorError> {
    let geom = solver.grid.geometry().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    let mut rejected = 0;
    let limit = 50 * count.max(1);
    while samples.len() < count && samples.len() + rejected < limit {
        let x: Vec<f64> = geom.periods().iter().map(|&p| rng.random_range(0.0..p)).collect();
        match phi_at_point_via_graphs(cs, solver, Some(fields), &x) {
            Ok(via_graphs) => {
                let assembled = sol.psi.values[solver.grid.nearest_node(&x)];
                samples.push(ConsistencySample { x, assembled, via_graphs });
            }
            Err(SelectorError::Aubry(AubryError::InsideClass { .. } | AubryError::EquivalentToClass { .. })) => {
                rejected += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let max_gap = samples.iter().map(|s| (s.assembled - s.via_graphs).abs()).fold(0.0, f64::max);
    Ok(ConsistencyReport { samples, rejected, max_gap, bound: 2.0 * cs.tol_static })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aubry::{detect_static_classes, DetectionParams};
    use crate::srgeom::{SRStructure, TorusGeometry};
    use std::f64::consts::FRAC_1_PI;

    fn circle(bbar: &str) -> SRStructure {
        SRStructure::from_strings(TorusGeometry::new(vec![1.0]).unwrap(), &[vec!["1".into()]], &[bbar.into()]).unwrap()
    }

    struct Setup<'a> {
        solver: PotentialSolver<'a>,
        cs: ClassSystem,
        fields: Vec<GridField<f64>>,
        sol: SelectedSolution,
    }

    fn setup(s: &SRStructure, n: usize) -> Setup<'_> {
        let grid = PeriodicGrid::uniform(s.geometry().clone(), n).unwrap();
        let solver = PotentialSolver::with_defaults(s, grid.clone()).unwrap();
        let cs = detect_static_classes(&solver, &DetectionParams::defaults(s, &grid).unwrap()).unwrap();
        let fields = solver.class_fields(&cs.point_sets()).unwrap();
        let r = compute_w(&cs.phi, &cs.stable_mask()).unwrap();
        let sol = assemble_psi(&cs, &r, &fields).unwrap();
        Setup { solver, cs, fields, sol }
    }

    #[test]
    fn single_well_selection() {
        let s = circle("-sin(2*pi*x1)");
        let st = setup(&s, 256);
        let sol = &st.sol;
        assert_eq!(sol.w_min(), 0.0);
        for (i, c) in st.cs.classes.iter().enumerate() {
            let at = sol.psi.min_over(&st.solver.snap(&c.points));
            assert!((at - sol.class_values()[i]).abs() <= st.cs.tol_static);
        }
        assert!((sol.phi.at(&[0.5]) - FRAC_1_PI).abs() < 0.02);
        assert!(sol.phi.min() >= -st.cs.tol_static);

        let rep = consistency_square(sol, &st.cs, &st.solver, &st.fields, 100, 1).unwrap();
        assert_eq!(rep.samples.len(), 100);
        assert!(rep.passed(), "{}", rep.max_gap);

        let dom = domination_check(sol, &st.cs, &st.solver, &DominationParams::default()).unwrap();
        assert!(dom.passed(), "{dom:?}");
        assert_eq!(dom.lipschitz_violations, 0);
        assert!(dom.residual.median <= 0.05, "{dom:?}");

        let inside = phi_at_point_via_graphs(&st.cs, &st.solver, Some(&st.fields), &[0.0]);
        assert!(matches!(inside, Err(SelectorError::Aubry(AubryError::InsideClass { .. }))));
    }

    #[test]
    fn basin_point_routes_through_stable_class() {
        let s = circle("-sin(2*pi*x1)");
        let st = setup(&s, 128);
        let x = [0.2];
        let v = st.fields[0].values[st.solver.grid.nearest_node(&x)];
        let w = phi_at_point_via_graphs(&st.cs, &st.solver, Some(&st.fields), &x).unwrap();
        assert!((w - (st.sol.class_values()[0] + v)).abs() <= st.cs.tol_static);
    }

    #[test]
    fn single_class_and_tampering() {
        let s = circle("0");
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 32).unwrap();
        let solver = PotentialSolver::with_defaults(&s, grid).unwrap();
        let cs = ClassSystem::from_clouds(&solver, vec![("A1".into(), vec![vec![0.25]])], 0.1).unwrap();
        let fields = solver.class_fields(&cs.point_sets()).unwrap();
        let r = compute_w(&cs.phi, &cs.stable_mask()).unwrap();
        let sol = assemble_psi(&cs, &r, &fields).unwrap();
        assert_eq!(sol.psi.values, fields[0].values);
        assert_eq!(sol.phi.values, sol.psi.values);

        let st = circle("-sin(2*pi*x1)");
        let mut setup = setup(&st, 128);
        let i = setup.solver.grid.nearest_node(&[0.3]);
        setup.sol.psi.values[i] += 1.0;
        let dom = domination_check(&setup.sol, &setup.cs, &setup.solver, &DominationParams::default()).unwrap();
        assert!(!dom.passed());
    }

    #[test]
    fn representation_mismatch_is_reported() {
        let s = circle("-sin(2*pi*x1)");
        let st = setup(&s, 64);
        let mut r = compute_w(&st.cs.phi, &st.cs.stable_mask()).unwrap();
        r.w[1] = -1.0;
        assert!(matches!(assemble_psi(&st.cs, &r, &st.fields), Err(SelectorError::Representation { .. })));
    }

    #[test]
    fn save_writes_artifacts() {
        let s = circle("-sin(2*pi*x1)");
        let st = setup(&s, 32);
        let dir = tempfile::tempdir().unwrap();
        st.sol.save(dir.path()).unwrap();
        let phi = GridField::<f64>::read_wkgf(dir.path().join("phi.wkgf")).unwrap();
        assert_eq!(phi.values, st.sol.phi.values);
        let sum: SelectionSummary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("selection.json")).unwrap()).unwrap();
        assert_eq!(sum, st.sol.summary);
    }

    #[test]
    fn dilation_covers_cube() {
        let g = PeriodicGrid::uniform(TorusGeometry::standard(2).unwrap(), 16).unwrap();
        let mut m = vec![false; g.len()];
        m[0] = true;
        assert_eq!(dilate(&g, &m, 2).iter().filter(|&&b| b).count(), 25);
    }
}
