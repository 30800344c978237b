//! Torus geometry, horizontal frames and the Hörmander bracket condition.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fieldlang::{self, EvalError, Expr, ParseError, Program};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("expected {expected} periods, got {got}")]
    PeriodCount { expected: usize, got: usize },
    #[error("period {index} must be positive and finite, got {value}")]
    BadPeriod { index: usize, value: f64 },
    #[error("frame must have {rows} rows of {cols} expressions")]
    FrameShape { rows: usize, cols: usize },
    #[error("rank {rank} exceeds dimension {dim}")]
    RankTooLarge { rank: usize, dim: usize },
    #[error("drift coefficients must have {expected} entries, got {got}")]
    DriftShape { expected: usize, got: usize },
    #[error("frame loses rank at {point:?}: smallest singular value {sv:e}")]
    RankDeficient { point: Vec<f64>, sv: f64 },
    #[error("cannot parse {what}: {source}")]
    Parse {
        what: String,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// The flat torus `R^d / (L_1 Z × … × L_d Z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusGeometry {
    periods: Vec<f64>,
}

impl TorusGeometry {
    pub fn new(periods: Vec<f64>) -> Result<Self, GeomError> {
        if periods.is_empty() {
            return Err(GeomError::ZeroDimension);
        }
        for (index, &value) in periods.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(GeomError::BadPeriod { index, value });
            }
        }
        Ok(TorusGeometry { periods })
    }

    /// `d` copies of `2π`.
    pub fn standard(dim: usize) -> Result<Self, GeomError> {
        Self::new(vec![std::f64::consts::TAU; dim])
    }

    pub fn dim(&self) -> usize {
        self.periods.len()
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    pub fn wrap_coord(&self, j: usize, v: f64) -> f64 {
        let l = self.periods[j];
        let w = v.rem_euclid(l);
        // rem_euclid can round up to exactly l
        if w >= l {
            0.0
        } else {
            w
        }
    }

    pub fn wrap(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(j, &v)| self.wrap_coord(j, v)).collect()
    }

    pub fn wrap_in_place(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = self.wrap_coord(j, *v);
        }
    }

    /// Signed minimal-image difference `y - x` along axis `j`.
    pub fn delta(&self, j: usize, x: f64, y: f64) -> f64 {
        let l = self.periods[j];
        let mut d = (y - x).rem_euclid(l);
        if d > 0.5 * l {
            d -= l;
        }
        d
    }

    /// Flat (Euclidean) periodic distance.
    pub fn flat_distance(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.dim()).map(|j| self.delta(j, x[j], y[j]).powi(2)).sum::<f64>().sqrt()
    }

    /// Default probe set: 5 points per axis, pseudo-randomly subsampled to
    /// at most 10⁴ probes in high dimension.
    pub fn probe_lattice(&self) -> Vec<Vec<f64>> {
        const PER_AXIS: usize = 5;
        const CAP: usize = 10_000;
        let d = self.dim();
        let total = (PER_AXIS as f64).powi(d as i32);
        let point = |mut k: usize| -> Vec<f64> {
            let mut x = vec![0.0; d];
            for j in (0..d).rev() {
                x[j] = self.periods[j] * (k % PER_AXIS) as f64 / PER_AXIS as f64;
                k /= PER_AXIS;
            }
            x
        };
        if total <= CAP as f64 {
            (0..PER_AXIS.pow(d as u32)).map(point).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1a77);
            (0..CAP)
                .map(|_| {
                    (0..d).map(|j| self.periods[j] * rng.random_range(0..PER_AXIS) as f64 / PER_AXIS as f64).collect()
                })
                .collect()
        }
    }
}

/// A vector field given by one expression per coordinate.
pub type VectorField = Vec<Expr>;

/// Lie bracket `[V, W] = DV·W − DW·V`, the sign convention under which
/// `[cos x₃ ∂₁ + sin x₃ ∂₂, ∂₃] = −sin x₃ ∂₁ + cos x₃ ∂₂`.
pub fn lie_bracket(v: &[Expr], w: &[Expr]) -> VectorField {
    assert_eq!(v.len(), w.len(), "vector fields over different dimensions");
    let d = v.len();
    (0..d)
        .map(|i| {
            let mut terms = Vec::with_capacity(2 * d);
            for j in 0..d {
                terms.push(Expr::product(vec![v[i].differentiate(j), w[j].clone()]));
                terms.push(Expr::neg(Expr::product(vec![w[i].differentiate(j), v[j].clone()])));
            }
            Expr::sum(terms)
        })
        .collect()
}

/// Horizontal frame `σ = [σ_1 … σ_r]` and drift coefficients `b̄`, with the
/// drift `b = σ b̄` and diffusion `a = σσᵗ` derived from them.
#[derive(Debug, Clone)]
pub struct SRStructure {
    geometry: TorusGeometry,
    rank: usize,
    /// Row-major `d × r`.
    sigma: Vec<Expr>,
    bbar: Vec<Expr>,
    drift: Vec<Expr>,
    sigma_prog: Vec<Program>,
    bbar_prog: Vec<Program>,
    drift_prog: Vec<Program>,
}

impl SRStructure {
    /// `sigma` holds `d` rows of `r` expressions each.
    pub fn new(geometry: TorusGeometry, sigma: Vec<Vec<Expr>>, bbar: Vec<Expr>) -> Result<Self, GeomError> {
        let d = geometry.dim();
        let r = sigma.first().map(Vec::len).unwrap_or(0);
        if sigma.len() != d || r == 0 || sigma.iter().any(|row| row.len() != r) {
            return Err(GeomError::FrameShape { rows: d, cols: r.max(1) });
        }
        if r > d {
            return Err(GeomError::RankTooLarge { rank: r, dim: d });
        }
        if bbar.len() != r {
            return Err(GeomError::DriftShape { expected: r, got: bbar.len() });
        }
        let sigma: Vec<Expr> = sigma.into_iter().flatten().collect();
        let drift: Vec<Expr> = (0..d)
            .map(|i| {
                Expr::sum((0..r).map(|k| Expr::product(vec![sigma[i * r + k].clone(), bbar[k].clone()])).collect())
            })
            .collect();
        let s = SRStructure {
            sigma_prog: sigma.iter().map(Expr::compile).collect(),
            bbar_prog: bbar.iter().map(Expr::compile).collect(),
            drift_prog: drift.iter().map(Expr::compile).collect(),
            geometry,
            rank: r,
            sigma,
            bbar,
            drift,
        };
        s.check_frame_rank(&s.geometry.probe_lattice())?;
        Ok(s)
    }

    /// Builds from expression strings (`sigma[i][k]` is component `i` of `σ_k`).
    pub fn from_strings(geometry: TorusGeometry, sigma: &[Vec<String>], bbar: &[String]) -> Result<Self, GeomError> {
        let d = geometry.dim();
        let parse =
            |what: String, text: &str| fieldlang::parse(text, d).map_err(|source| GeomError::Parse { what, source });
        let sigma = sigma
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter().enumerate().map(|(k, t)| parse(format!("sigma[{i}][{k}]"), t)).collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let bbar =
            bbar.iter().enumerate().map(|(k, t)| parse(format!("bbar[{k}]"), t)).collect::<Result<Vec<_>, _>>()?;
        Self::new(geometry, sigma, bbar)
    }

    pub fn geometry(&self) -> &TorusGeometry {
        &self.geometry
    }

    pub fn dim(&self) -> usize {
        self.geometry.dim()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Column `k` of the frame as a vector field.
    pub fn frame_field(&self, k: usize) -> VectorField {
        (0..self.dim()).map(|i| self.sigma[i * self.rank + k].clone()).collect()
    }

    pub fn drift_field(&self) -> &[Expr] {
        &self.drift
    }

    pub fn bbar_exprs(&self) -> &[Expr] {
        &self.bbar
    }

    /// Symbolic Jacobian `∂b_i/∂x_j`, row-major.
    pub fn drift_jacobian(&self) -> Vec<Expr> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                out.push(self.drift[i].differentiate(j));
            }
        }
        out
    }

    pub fn evaluator<T: Scalar>(&self) -> Evaluator<'_, T> {
        Evaluator { s: self, stack: Vec::with_capacity(16) }
    }

    /// Verifies `σ(x)` has full column rank at every probe.
    pub fn check_frame_rank(&self, probes: &[Vec<f64>]) -> Result<(), GeomError> {
        let mut ev = self.evaluator::<f64>();
        let (d, r) = (self.dim(), self.rank);
        let mut buf = vec![0.0; d * r];
        for p in probes {
            ev.sigma(p, &mut buf)?;
            let m = DMatrix::from_row_slice(d, r, &buf);
            let sv = m.singular_values();
            let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
            if min <= 1e-10 {
                return Err(GeomError::RankDeficient { point: p.clone(), sv: min });
            }
        }
        Ok(())
    }

    /// Probes where an expression of `σ` or `b̄` is not periodic with the
    /// declared periods (difference above 1e-9).
    pub fn periodicity_warnings(&self, probes: &[Vec<f64>]) -> Vec<String> {
        let mut out = Vec::new();
        let named = self
            .sigma
            .iter()
            .enumerate()
            .map(|(n, e)| (format!("sigma[{}][{}]", n / self.rank, n % self.rank), e))
            .chain(self.bbar.iter().enumerate().map(|(k, e)| (format!("bbar[{k}]"), e)));
        for (name, e) in named {
            'probe: for p in probes {
                for j in 0..self.dim() {
                    let mut q = p.clone();
                    q[j] += self.geometry.periods()[j];
                    if let (Ok(a), Ok(b)) = (e.eval(p.as_slice()), e.eval(q.as_slice())) {
                        let a: f64 = a;
                        let b: f64 = b;
                        if (a - b).abs() > 1e-9 {
                            out.push(format!(
                                "{name} is not {}-periodic in x{} (at {:?})",
                                self.geometry.periods()[j],
                                j + 1,
                                p
                            ));
                            break 'probe;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Reusable evaluation scratch for one thread.
pub struct Evaluator<'a, T: Scalar> {
    s: &'a SRStructure,
    stack: Vec<T>,
}

impl<'a, T: Scalar> Evaluator<'a, T> {
    /// Writes `σ(x)` row-major into `out` (`d·r` entries).
    pub fn sigma(&mut self, x: &[T], out: &mut [T]) -> Result<(), EvalError> {
        for (o, p) in out.iter_mut().zip(&self.s.sigma_prog) {
            *o = p.eval(x, &mut self.stack)?;
        }
        Ok(())
    }

    pub fn bbar(&mut self, x: &[T], out: &mut [T]) -> Result<(), EvalError> {
        for (o, p) in out.iter_mut().zip(&self.s.bbar_prog) {
            *o = p.eval(x, &mut self.stack)?;
        }
        Ok(())
    }

    /// Drift `b(x) = σ(x) b̄(x)`.
    pub fn drift(&mut self, x: &[T], out: &mut [T]) -> Result<(), EvalError> {
        for (o, p) in out.iter_mut().zip(&self.s.drift_prog) {
            *o = p.eval(x, &mut self.stack)?;
        }
        Ok(())
    }

    /// Diffusion matrix `a = σσᵗ`, row-major `d × d`.
    pub fn diffusion(&mut self, x: &[T], out: &mut [T]) -> Result<(), EvalError> {
        let (d, r) = (self.s.dim(), self.s.rank);
        let mut sig = vec![T::zero(); d * r];
        self.sigma(x, &mut sig)?;
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..r).map(|k| sig[i * r + k] * sig[j * r + k]).sum();
            }
        }
        Ok(())
    }
}

/// Norm of the horizontal vector `σ(x)ξ` in the sub-Riemannian metric, which
/// is the Euclidean norm of its control coordinates.
pub fn metric_norm<T: Scalar>(_s: &SRStructure, _x: &[T], xi: &[T]) -> T {
    xi.iter().map(|&v| v * v).sum::<T>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HormanderReport {
    pub satisfied: bool,
    pub depth: usize,
    /// Numerical rank of the bracket span at each probe, in probe order.
    pub ranks: Vec<usize>,
    pub min_rank: usize,
    /// Number of distinct nonzero bracket fields collected.
    pub fields: usize,
}

/// Frame fields followed by right-nested brackets `[σ_i, X]` up to `depth`.
pub fn bracket_fields(s: &SRStructure, depth: usize) -> Vec<VectorField> {
    let base: Vec<VectorField> = (0..s.rank()).map(|k| s.frame_field(k)).collect();
    let mut all = base.clone();
    let mut level = base.clone();
    for _ in 1..depth {
        let mut next = Vec::new();
        for x in &level {
            for b in &base {
                let br = lie_bracket(b, x);
                if br.iter().all(Expr::is_zero) {
                    continue;
                }
                next.push(br);
            }
        }
        all.extend(next.iter().cloned());
        level = next;
    }
    all
}

/// Numerical certificate of the bracket-generating condition at `probes`.
///
/// The rank test uses an SVD with relative tolerance `1e-8` of the largest
/// singular value. Passing is evidence at the probes, not a proof.
pub fn hormander_check(s: &SRStructure, depth: usize, probes: &[Vec<f64>]) -> HormanderReport {
    assert!(depth >= 1, "bracket depth must be at least 1");
    assert!(!probes.is_empty(), "at least one probe is required");
    let d = s.dim();
    let fields = bracket_fields(s, depth);
    let progs: Vec<Vec<Program>> = fields.iter().map(|f| f.iter().map(Expr::compile).collect()).collect();
    let ranks: Vec<usize> = probes
        .par_iter()
        .map(|p| {
            let mut stack = Vec::new();
            let n = progs.len();
            let mut m = DMatrix::<f64>::zeros(d, n);
            for (c, prog) in progs.iter().enumerate() {
                for i in 0..d {
                    // non-evaluable components count as zero
                    m[(i, c)] = prog[i].eval(p, &mut stack).unwrap_or(0.0);
                }
            }
            numerical_rank(&m, 1e-8)
        })
        .collect();
    let min_rank = ranks.iter().cloned().min().unwrap_or(0);
    HormanderReport { satisfied: min_rank == d, depth, ranks, min_rank, fields: fields.len() }
}

/// Rank via SVD with relative tolerance `rel_tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > rel_tol * max).count()
}
