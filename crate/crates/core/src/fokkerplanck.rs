//! Stationary Fokker–Planck density for nondegenerate diffusions and the
//! log-density `φ_ε = −(ε/2) ln m_ε`.
//!
//! The operator `L*m = (ε/2) Σ D_ij(a^{ij} m) − div(b m)` is discretized in
//! flux form. Along each axis the face flux of `u = a^{jj} m` uses the
//! Scharfetter–Gummel weights with the cell Péclet number
//! `Pe = (2/ε) ∫ b_j / a^{jj}` (Simpson rule over the cell edge), which is
//! upwind for large `Pe` and centered for small `Pe`. Mixed derivatives use
//! the centered four-point stencil. Every flux leaves one cell and enters
//! another, so the column sums of the assembled matrix vanish.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fieldlang::{EvalError, Expr, Program};
use crate::potential::{GridField, PeriodicGrid};
use crate::scalar::Scalar;
use crate::selector::ResidualStats;
use crate::srgeom::SRStructure;

#[derive(Debug, Error)]
pub enum FpError {
    #[error("the density solve needs a square frame (d = r); got d = {d}, r = {r}")]
    NotSquare { d: usize, r: usize },
    #[error("diffusion matrix is not positive definite at node {node} {coords:?} (min eigenvalue {min_eig})")]
    NotPositiveDefinite { node: usize, coords: Vec<f64>, min_eig: f64 },
    #[error("ε must be positive, got {0}")]
    Eps(f64),
    #[error("no convergence after {iterations} iterations (residual {residual})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("density lost positivity at node {0}")]
    NonPositive(usize),
    #[error("field grid differs from the solver grid")]
    Grid,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Sparse `L*` in compressed rows.
#[derive(Debug, Clone)]
pub struct FpOperator {
    pub grid: PeriodicGrid,
    pub eps: f64,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    pub max_diag: f64,
}

/// `B(z) = z / (eᶻ − 1)`.
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

fn eval_all(progs: &[Program], x: &[f64], stack: &mut Vec<f64>) -> Result<Vec<f64>, EvalError> {
    progs.iter().map(|p| p.eval(x, stack)).collect()
}

/// Symbolic `a^{ij} = Σ_k σ_ik σ_jk`, row-major.
fn diffusion_exprs(s: &SRStructure) -> Vec<Expr> {
    let (d, r) = (s.dim(), s.rank());
    let cols: Vec<Vec<Expr>> = (0..r).map(|k| s.frame_field(k)).collect();
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(Expr::sum((0..r).map(|k| Expr::product(vec![cols[k][i].clone(), cols[k][j].clone()])).collect()));
        }
    }
    out
}

/// Checks `r = d` and that `a(x)` is positive definite at every node.
pub fn check_nondegenerate(s: &SRStructure, grid: &PeriodicGrid) -> Result<(), FpError> {
    let (d, r) = (s.dim(), s.rank());
    if d != r {
        return Err(FpError::NotSquare { d, r });
    }
    let bad = (0..grid.len())
        .into_par_iter()
        .map_init(
            || (s.evaluator::<f64>(), vec![0.0; d * d]),
            |(ev, a), n| -> Result<Option<(usize, f64)>, EvalError> {
                ev.diffusion(&grid.coords(n), a)?;
                let min = SymmetricEigen::new(DMatrix::from_row_slice(d, d, a)).eigenvalues.min();
                Ok((!(min > 1e-8)).then_some((n, min)))
            },
        )
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .next();
    match bad {
        Some((node, min_eig)) => Err(FpError::NotPositiveDefinite { node, coords: grid.coords(node), min_eig }),
        None => Ok(()),
    }
}

impl FpOperator {
    pub fn build(s: &SRStructure, grid: &PeriodicGrid, eps: f64) -> Result<Self, FpError> {
        if !(eps > 0.0) {
            return Err(FpError::Eps(eps));
        }
        check_nondegenerate(s, grid)?;
        let d = s.dim();
        let n = grid.len();
        let half = 0.5 * eps;
        let a_progs: Vec<Program> = diffusion_exprs(s).iter().map(Expr::compile).collect();
        let b_progs: Vec<Program> = s.drift_field().iter().map(Expr::compile).collect();

        // (row, col, value) triplets, produced per node and merged per row
        let rows: Vec<Vec<(usize, usize, f64)>> = (0..n)
            .into_par_iter()
            .map_init(Vec::new, |stack, i| -> Result<Vec<(usize, usize, f64)>, EvalError> {
                let x = grid.coords(i);
                let a_i = eval_all(&a_progs, &x, stack)?;
                let mut out = Vec::new();
                for j in 0..d {
                    let h = grid.spacing(j);
                    let mut e = vec![0i64; d];
                    e[j] = 1;
                    let nb = grid.offset(i, &e);
                    // unwrapped neighbour coordinates keep the Simpson rule on one edge
                    let mut xm = x.clone();
                    xm[j] += 0.5 * h;
                    let mut xn = x.clone();
                    xn[j] += h;
                    let v = |p: &[f64], stack: &mut Vec<f64>| -> Result<f64, EvalError> {
                        Ok(b_progs[j].eval(p, stack)? / a_progs[j * d + j].eval(p, stack)?)
                    };
                    let integral = h / 6.0 * (v(&x, stack)? + 4.0 * v(&xm, stack)? + v(&xn, stack)?);
                    let pe = integral / half;
                    let a_n = a_progs[j * d + j].eval(&xn, stack)?;
                    let k = half / (h * h);
                    let w_i = k * bernoulli(-pe) * a_i[j * d + j];
                    let w_n = k * bernoulli(pe) * a_n;
                    // flux i → nb is w_i m_i − w_n m_nb
                    out.push((i, i, -w_i));
                    out.push((i, nb, w_n));
                    out.push((nb, i, w_i));
                    out.push((nb, nb, -w_n));
                }
                for p in 0..d {
                    for q in p + 1..d {
                        let c = 2.0 * half / (4.0 * grid.spacing(p) * grid.spacing(q));
                        for (sp, sq, sign) in [(1i64, 1i64, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)] {
                            let mut off = vec![0i64; d];
                            off[p] = sp;
                            off[q] = sq;
                            let nb = grid.offset(i, &off);
                            let a_nb = a_progs[p * d + q].eval(&grid.coords(nb), stack)?;
                            out.push((i, nb, sign * c * a_nb));
                        }
                    }
                }
                Ok(out)
            })
            .collect::<Result<_, _>>()?;
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for trip in rows {
            for (r, c, v) in trip {
                per_row[r].push((c, v));
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut max_diag = 0.0f64;
        offsets.push(0);
        for (r, mut row) in per_row.into_iter().enumerate() {
            row.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut v = 0.0;
                while k < row.len() && row[k].0 == c {
                    v += row[k].1;
                    k += 1;
                }
                if c == r {
                    max_diag = max_diag.max(v.abs());
                }
                cols.push(c);
                vals.push(v);
            }
            offsets.push(cols.len());
        }
        Ok(FpOperator { grid: grid.clone(), eps, offsets, cols, vals, max_diag })
    }

    pub fn apply<T: Scalar>(&self, m: &[T], vals: &[T], out: &mut [T]) {
        out.par_iter_mut().enumerate().for_each(|(r, o)| {
            let mut acc = T::zero();
            for k in self.offsets[r]..self.offsets[r + 1] {
                acc = acc + vals[k] * m[self.cols[k]];
            }
            *o = acc;
        });
    }

    /// `Σ_r L*_{rc}` for every column `c`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.grid.len()];
        for r in 0..self.grid.len() {
            for k in self.offsets[r]..self.offsets[r + 1] {
                s[self.cols[k]] += self.vals[k];
            }
        }
        s
    }

    /// Largest column sum relative to the largest diagonal entry.
    pub fn conservation_defect(&self) -> f64 {
        self.column_sums().iter().fold(0.0f64, |m, v| m.max(v.abs())) / self.max_diag.max(1.0)
    }

    /// Whether every off-diagonal entry is nonnegative, which together with
    /// `τ·max|diag| ≤ 1` keeps the explicit step positivity preserving.
    pub fn is_metzler(&self) -> bool {
        (0..self.grid.len())
            .all(|r| (self.offsets[r]..self.offsets[r + 1]).all(|k| self.cols[k] == r || self.vals[k] >= 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpParams {
    /// Stop when `Σ|L*m|·cell volume` drops to this value.
    pub tol: f64,
    pub max_iter: usize,
    /// Step as a fraction of `1/max|diag|`.
    pub step_fraction: f64,
}

impl Default for FpParams {
    fn default() -> Self {
        FpParams { tol: 1e-10, max_iter: 20_000_000, step_fraction: 0.9 }
    }
}

#[derive(Debug, Clone)]
pub struct FpSolution<T: Scalar> {
    pub eps: f64,
    pub density: GridField<T>,
    pub phi_eps: GridField<T>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpSummary {
    pub eps: f64,
    pub residual: f64,
    pub iterations: usize,
    pub mass: f64,
    pub min_density: f64,
}

impl<T: Scalar> FpSolution<T> {
    pub fn summary(&self) -> FpSummary {
        let vol = self.density.grid.cell_volume();
        FpSummary {
            eps: self.eps,
            residual: self.residual,
            iterations: self.iterations,
            mass: self.density.values.iter().map(|v| v.as_f64()).sum::<f64>() * vol,
            min_density: self.density.min().as_f64(),
        }
    }
}

/// Stationary density by power iteration on `m ← m + τ L*m`, renormalized to
/// unit mass after every step.
pub fn stationary_solve<T: Scalar>(
    s: &SRStructure,
    grid: &PeriodicGrid,
    eps: f64,
    params: &FpParams,
) -> Result<FpSolution<T>, FpError> {
    let op = FpOperator::build(s, grid, eps)?;
    solve_with_operator(&op, params)
}

pub fn solve_with_operator<T: Scalar>(op: &FpOperator, params: &FpParams) -> Result<FpSolution<T>, FpError> {
    let grid = &op.grid;
    let n = grid.len();
    let vol = grid.cell_volume();
    let vals: Vec<T> = op.vals.iter().map(|&v| T::lit(v)).collect();
    let tau = T::lit(params.step_fraction / op.max_diag.max(f64::MIN_POSITIVE));
    let total = T::lit(vol * n as f64);
    let mut m = vec![T::one() / total; n];
    let mut lm = vec![T::zero(); n];
    let mut residual = f64::INFINITY;
    let mut it = 0;
    while it < params.max_iter {
        op.apply(&m, &vals, &mut lm);
        residual = lm.iter().map(|v| v.abs().as_f64()).sum::<f64>() * vol;
        if residual <= params.tol {
            break;
        }
        for (mi, li) in m.iter_mut().zip(&lm) {
            *mi = *mi + tau * *li;
        }
        let mass: T = m.iter().copied().sum::<T>() * T::lit(vol);
        m.iter_mut().for_each(|v| *v = *v / mass);
        it += 1;
    }
    if residual > params.tol {
        return Err(FpError::NoConvergence { iterations: it, residual });
    }
    if let Some(i) = m.iter().position(|v| !(*v > T::zero())) {
        return Err(FpError::NonPositive(i));
    }
    let half = T::lit(0.5 * op.eps);
    let phi: Vec<T> = m.iter().map(|v| -half * v.ln()).collect();
    let density = GridField::new(grid.clone(), "density", m).with_meta("eps", op.eps);
    let phi_eps = GridField::new(grid.clone(), "phi_eps", phi).with_meta("eps", op.eps);
    Ok(FpSolution { eps: op.eps, density, phi_eps, residual, iterations: it })
}

#[derive(Debug, Clone)]
pub struct HjvResidual {
    pub field: GridField<f64>,
    pub stats: ResidualStats,
}

/// Second-order centered differences of a periodic field at node `n`:
/// gradient and row-major Hessian.
pub fn centered_derivatives(field: &GridField<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let grid = &field.grid;
    let d = grid.dim();
    let v = &field.values;
    let at = |off: &[i64]| v[grid.offset(n, off)];
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    for i in 0..d {
        let h = grid.spacing(i);
        let mut e = vec![0i64; d];
        e[i] = 1;
        let up = at(&e);
        e[i] = -1;
        let down = at(&e);
        grad[i] = (up - down) / (2.0 * h);
        hess[i * d + i] = (up - 2.0 * v[n] + down) / (h * h);
        for j in i + 1..d {
            let mut o = vec![0i64; d];
            let mut corner = |si: i64, sj: i64| {
                o[i] = si;
                o[j] = sj;
                at(&o)
            };
            let mixed = (corner(1, 1) - corner(1, -1) - corner(-1, 1) + corner(-1, -1)) / (4.0 * h * grid.spacing(j));
            hess[i * d + j] = mixed;
            hess[j * d + i] = mixed;
        }
    }
    (grad, hess)
}

/// Evaluates the viscous Hamilton–Jacobi residual
/// `(ε/2)[(ε/2)Σ D_ij a^{ij} − Σ(a^{ij} D_ij φ + 2 D_i a^{ij} D_j φ) − div b] + |Dφσ|² + b·Dφ`
/// at `φ_ε` of a density solve. Coefficient derivatives are symbolic.
pub fn hjv_residual<T: Scalar>(s: &SRStructure, sol: &FpSolution<T>) -> Result<HjvResidual, FpError> {
    let phi = sol.phi_eps.to_f64();
    let grid = phi.grid.clone();
    let d = s.dim();
    let a = diffusion_exprs(s);
    let a2: Vec<Expr> = (0..d * d).map(|k| a[k].differentiate(k / d).differentiate(k % d)).collect();
    let a2_sum = Expr::sum(a2).compile();
    // c_j = Σ_i D_i a^{ij}
    let c: Vec<Program> =
        (0..d).map(|j| Expr::sum((0..d).map(|i| a[i * d + j].differentiate(i)).collect()).compile()).collect();
    let div_b = Expr::sum((0..d).map(|i| s.drift_field()[i].differentiate(i)).collect()).compile();
    let a_progs: Vec<Program> = a.iter().map(Expr::compile).collect();
    let b_progs: Vec<Program> = s.drift_field().iter().map(Expr::compile).collect();
    let half = 0.5 * sol.eps;
    let vals: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map_init(Vec::new, |stack, n| -> Result<f64, EvalError> {
            let x = grid.coords(n);
            let (g, hs) = centered_derivatives(&phi, n);
            let av = eval_all(&a_progs, &x, stack)?;
            let bv = eval_all(&b_progs, &x, stack)?;
            let cv = eval_all(&c, &x, stack)?;
            let mut second = 0.0;
            let mut quad = 0.0;
            for i in 0..d {
                for j in 0..d {
                    second += av[i * d + j] * hs[i * d + j];
                    quad += av[i * d + j] * g[i] * g[j];
                }
            }
            let first: f64 = (0..d).map(|j| 2.0 * cv[j] * g[j]).sum();
            let drift: f64 = (0..d).map(|i| bv[i] * g[i]).sum();
            let inner = half * a2_sum.eval(&x, stack)? - second - first - div_b.eval(&x, stack)?;
            Ok(half * inner + quad + drift)
        })
        .collect::<Result<_, _>>()?;
    let stats = ResidualStats::from_values(vals.iter().map(|v| v.abs()).collect());
    Ok(HjvResidual { field: GridField::new(grid, "hjv_residual", vals), stats })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    /// `sup |(φ_ε − min φ_ε) − (φ − min φ)|`.
    pub sup_gap: f64,
    /// Largest centered-difference gradient of `φ_ε`.
    pub max_gradient: f64,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTable {
    /// Gaps strictly decrease along the ladder (ordered by decreasing ε).
    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].sup_gap < w[0].sup_gap)
    }

    pub fn gradient_bound(&self) -> f64 {
        self.rows.iter().map(|r| r.max_gradient).fold(0.0, f64::max)
    }

    /// Gradient grows at every rung and more than doubles overall.
    pub fn gradient_blowup(&self) -> bool {
        let g: Vec<f64> = self.rows.iter().map(|r| r.max_gradient).collect();
        g.len() >= 2 && g.windows(2).all(|w| w[1] > w[0]) && g[g.len() - 1] > 2.0 * g[0]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,sup_gap,max_gradient,iterations,residual\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.eps, r.sup_gap, r.max_gradient, r.iterations, r.residual));
        }
        s
    }
}

/// Min-pinned sup distance between two fields on the same grid.
pub fn pinned_sup_gap(a: &GridField<f64>, b: &GridField<f64>) -> f64 {
    let (ma, mb) = (a.min(), b.min());
    a.values.iter().zip(&b.values).map(|(x, y)| ((x - ma) - (y - mb)).abs()).fold(0.0, f64::max)
}

pub fn convergence_study<T: Scalar>(
    s: &SRStructure,
    grid: &PeriodicGrid,
    ladder: &[f64],
    phi: &GridField<f64>,
    params: &FpParams,
) -> Result<ConvergenceTable, FpError> {
    if phi.grid != *grid {
        return Err(FpError::Grid);
    }
    let mut order = ladder.to_vec();
    order.sort_by(|a, b| b.total_cmp(a));
    let rows = order
        .iter()
        .map(|&eps| {
            let sol = stationary_solve::<T>(s, grid, eps, params)?;
            let pe = sol.phi_eps.to_f64();
            let max_gradient = (0..grid.len())
                .map(|n| crate::selector::centered_gradient(&pe, n).iter().map(|g| g * g).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            Ok(ConvergenceRow {
                eps,
                sup_gap: pinned_sup_gap(&pe, phi),
                max_gradient,
                iterations: sol.iterations,
                residual: sol.residual,
            })
        })
        .collect::<Result<_, FpError>>()?;
    Ok(ConvergenceTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srgeom::TorusGeometry;
    use std::f64::consts::TAU;

    fn structure(periods: Vec<f64>, sigma: &[&[&str]], bbar: &[&str]) -> SRStructure {
        SRStructure::from_strings(
            TorusGeometry::new(periods).unwrap(),
            &sigma.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect::<Vec<_>>(),
            &bbar.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn gradient_well() -> SRStructure {
        structure(vec![1.0], &[&["1"]], &["-sin(2*pi*x1)"])
    }

    fn v(x: f64) -> f64 {
        (1.0 - (TAU * x).cos()) / TAU
    }

    #[test]
    fn gradient_case_matches_gibbs_density() {
        let s = gradient_well();
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 256).unwrap();
        let eps = 0.1;
        let sol = stationary_solve::<f64>(&s, &grid, eps, &FpParams::default()).unwrap();
        let xs = grid.all_coords();
        let gibbs: Vec<f64> = xs.iter().map(|x| (-2.0 * v(x[0]) / eps).exp()).collect();
        let z: f64 = gibbs.iter().sum::<f64>() * grid.cell_volume();
        let err = sol.density.values.iter().zip(&gibbs).map(|(m, g)| (m - g / z).abs() / (g / z)).fold(0.0, f64::max);
        assert!(err <= 1e-4, "{err}");
        let sum = sol.summary();
        assert!((sum.mass - 1.0).abs() < 1e-12);
        assert!(sum.min_density > 0.0);

        let res = hjv_residual(&s, &sol).unwrap();
        assert!(res.stats.median <= 1e-3 * (1.0 + eps), "{:?}", res.stats);
    }

    #[test]
    fn zero_drift_gives_uniform_density() {
        let s = structure(vec![1.0, 2.0], &[&["1", "0"], &["0", "1"]], &["0", "0"]);
        let grid = PeriodicGrid::new(s.geometry().clone(), vec![16, 16]).unwrap();
        let sol = stationary_solve::<f64>(&s, &grid, 0.3, &FpParams::default()).unwrap();
        assert_eq!(sol.iterations, 0);
        for m in &sol.density.values {
            assert!((m - 0.5).abs() < 1e-12);
        }
        let res = hjv_residual(&s, &sol).unwrap();
        assert!(res.stats.max < 1e-12);
        let zero = GridField::constant(grid.clone(), "phi", 0.0);
        let table = convergence_study::<f64>(&s, &grid, &[0.2, 0.1], &zero, &FpParams::default()).unwrap();
        assert!(table.rows.iter().all(|r| r.sup_gap < 1e-12));
    }

    #[test]
    fn operator_conserves_mass() {
        let s = structure(
            vec![1.0, 1.0],
            &[&["1 + 0.2*sin(2*pi*x2)", "0.3"], &["0.1*cos(2*pi*x1)", "1"]],
            &["sin(2*pi*x1)", "cos(2*pi*(x1 + x2))"],
        );
        let grid = PeriodicGrid::new(s.geometry().clone(), vec![16, 20]).unwrap();
        let op = FpOperator::build(&s, &grid, 0.2).unwrap();
        assert!(op.conservation_defect() < 1e-13, "{}", op.conservation_defect());
        let one_d = FpOperator::build(
            &gradient_well(),
            &PeriodicGrid::uniform(TorusGeometry::new(vec![1.0]).unwrap(), 64).unwrap(),
            0.01,
        )
        .unwrap();
        assert!(one_d.is_metzler());
        let sol = solve_with_operator::<f64>(&op, &FpParams::default()).unwrap();
        assert!(sol.density.min() > 0.0);
    }

    #[test]
    fn degenerate_frames_are_rejected() {
        let s = structure(vec![TAU, TAU], &[&["1"], &["0"]], &["1"]);
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 16).unwrap();
        assert!(matches!(
            stationary_solve::<f64>(&s, &grid, 0.1, &FpParams::default()),
            Err(FpError::NotSquare { .. })
        ));
        let s = structure(vec![1.0], &[&["sin(2*pi*(x1 - 0.3125))"]], &["0"]);
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 16).unwrap();
        match stationary_solve::<f64>(&s, &grid, 0.1, &FpParams::default()) {
            Err(FpError::NotPositiveDefinite { node, .. }) => assert!(node == 5 || node == 13),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            stationary_solve::<f64>(&gradient_well(), &grid, 0.0, &FpParams::default()),
            Err(FpError::Eps(_))
        ));
    }

    #[test]
    fn single_precision_solve() {
        let s = gradient_well();
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 64).unwrap();
        let params = FpParams { tol: 1e-4, ..Default::default() };
        let single = stationary_solve::<f32>(&s, &grid, 0.2, &params).unwrap();
        let double = stationary_solve::<f64>(&s, &grid, 0.2, &params).unwrap();
        for (a, b) in single.density.values.iter().zip(&double.density.values) {
            assert!((*a as f64 - b).abs() < 1e-3 * b);
        }
    }

    #[test]
    fn convergence_to_selected_solution() {
        let s = gradient_well();
        let grid = PeriodicGrid::uniform(s.geometry().clone(), 256).unwrap();
        let phi = GridField::from_fn(grid.clone(), "phi", |x| v(x[0]));
        let table = convergence_study::<f64>(&s, &grid, &[0.05, 0.2, 0.1], &phi, &FpParams::default()).unwrap();
        assert_eq!(table.rows.iter().map(|r| r.eps).collect::<Vec<_>>(), vec![0.2, 0.1, 0.05]);
        // φ_ε = V + const here, so the pinned gap is discretization error only
        assert!(table.rows.iter().all(|r| r.sup_gap < 1e-4), "{table:?}");
        assert!(!table.gradient_blowup());
        assert!((table.gradient_bound() - 1.0).abs() < 0.01);
    }
}
