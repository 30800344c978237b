//! Horizontal paths, the Mañé Lagrangian `L(x,v) = ¼‖v − b(x)‖²_D`, its
//! action, the large-deviation rate functional and the Hamiltonian
//! `H(x,p) = |pσ(x)|² + p·b(x)`.

use crate::fieldlang::EvalError;
use crate::scalar::Scalar;
use crate::srgeom::SRStructure;

/// Piecewise-constant control path with explicit-Euler states.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizontalPath<T: Scalar> {
    pub start: Vec<T>,
    pub step: T,
    pub controls: Vec<Vec<T>>,
}

impl<T: Scalar> HorizontalPath<T> {
    pub fn new(start: Vec<T>, step: T, controls: Vec<Vec<T>>) -> Self {
        assert!(step > T::zero(), "path step must be positive");
        HorizontalPath { start, step, controls }
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn total_time(&self) -> T {
        self.step * T::from_usize(self.controls.len()).unwrap()
    }

    /// States `x_0 … x_N`, with `x_{k+1} = wrap(x_k + h σ(x_k) ξ_k)`.
    pub fn states(&self, s: &SRStructure) -> Result<Vec<Vec<T>>, EvalError> {
        let (d, r) = (s.dim(), s.rank());
        let periods: Vec<T> = s.geometry().periods().iter().map(|&l| T::lit(l)).collect();
        let mut ev = s.evaluator::<T>();
        let mut sig = vec![T::zero(); d * r];
        let mut out = Vec::with_capacity(self.controls.len() + 1);
        let mut x = self.start.clone();
        wrap(&mut x, &periods);
        out.push(x.clone());
        for xi in &self.controls {
            ev.sigma(&x, &mut sig)?;
            for i in 0..d {
                let v: T = (0..r).map(|k| sig[i * r + k] * xi[k]).sum();
                x[i] = x[i] + self.step * v;
            }
            wrap(&mut x, &periods);
            out.push(x.clone());
        }
        Ok(out)
    }

    /// The drift path from `start`: `ξ_k = b̄(x_k)`.
    pub fn follow_drift(s: &SRStructure, start: Vec<T>, step: T, n: usize) -> Result<Self, EvalError> {
        let (d, r) = (s.dim(), s.rank());
        let periods: Vec<T> = s.geometry().periods().iter().map(|&l| T::lit(l)).collect();
        let mut ev = s.evaluator::<T>();
        let mut sig = vec![T::zero(); d * r];
        let mut controls = Vec::with_capacity(n);
        let mut x = start.clone();
        for _ in 0..n {
            let mut bb = vec![T::zero(); r];
            ev.bbar(&x, &mut bb)?;
            ev.sigma(&x, &mut sig)?;
            for i in 0..d {
                let v: T = (0..r).map(|k| sig[i * r + k] * bb[k]).sum();
                x[i] = x[i] + step * v;
            }
            wrap(&mut x, &periods);
            controls.push(bb);
        }
        Ok(HorizontalPath::new(start, step, controls))
    }
}

fn wrap<T: Scalar>(x: &mut [T], periods: &[T]) {
    for (v, &l) in x.iter_mut().zip(periods) {
        let mut w = *v % l;
        if w < T::zero() {
            w = w + l;
        }
        if w >= l {
            w = T::zero();
        }
        *v = w;
    }
}

/// `¼|ξ − b̄(x)|²`, the Lagrangian at the horizontal velocity `σ(x)ξ`.
pub fn lagrangian<T: Scalar>(s: &SRStructure, x: &[T], xi: &[T]) -> Result<T, EvalError> {
    let mut bb = vec![T::zero(); s.rank()];
    s.evaluator::<T>().bbar(x, &mut bb)?;
    Ok(quarter_sq_dist(xi, &bb))
}

fn quarter_sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let sq: T = a.iter().zip(b).map(|(&u, &v)| (u - v) * (u - v)).sum();
    sq / T::lit(4.0)
}

/// Left-endpoint quadrature `h Σ_k L(x_k, ξ_k)`.
pub fn action<T: Scalar>(s: &SRStructure, path: &HorizontalPath<T>) -> Result<T, EvalError> {
    let states = path.states(s)?;
    let mut ev = s.evaluator::<T>();
    let mut bb = vec![T::zero(); s.rank()];
    let mut total = T::zero();
    for (x, xi) in states.iter().zip(&path.controls) {
        ev.bbar(x, &mut bb)?;
        total = total + quarter_sq_dist(xi, &bb);
    }
    Ok(total * path.step)
}

/// `I = ½∫|ξ − b̄|² = 2∫L`.
pub fn rate_functional<T: Scalar>(s: &SRStructure, path: &HorizontalPath<T>) -> Result<T, EvalError> {
    Ok(T::lit(2.0) * action(s, path)?)
}

/// `H(x,p) = |pσ(x)|² + p·b(x)` for a covector `p ∈ R^d`.
pub fn hamiltonian<T: Scalar>(s: &SRStructure, x: &[T], p: &[T]) -> Result<T, EvalError> {
    let (d, r) = (s.dim(), s.rank());
    let mut ev = s.evaluator::<T>();
    let mut sig = vec![T::zero(); d * r];
    let mut bb = vec![T::zero(); r];
    ev.sigma(x, &mut sig)?;
    ev.bbar(x, &mut bb)?;
    Ok(hamiltonian_from(&sig, &bb, p, r))
}

/// Hamiltonian from pre-evaluated `σ` (row-major) and `b̄`.
pub fn hamiltonian_from<T: Scalar>(sigma: &[T], bbar: &[T], p: &[T], r: usize) -> T {
    let d = p.len();
    let mut h = T::zero();
    for k in 0..r {
        let q: T = (0..d).map(|i| p[i] * sigma[i * r + k]).sum();
        h = h + q * q + q * bbar[k];
    }
    h
}

/// `C_b = ½(1 + max‖b‖_D)²`, maximized over the probe lattice and polished
/// by a local pattern search around the best probe.
pub fn c_b(s: &SRStructure) -> Result<f64, EvalError> {
    Ok(0.5 * (1.0 + max_drift_norm(s)?).powi(2))
}

/// `max_x |b̄(x)|`, which equals `max_x ‖b(x)‖_D`.
pub fn max_drift_norm(s: &SRStructure) -> Result<f64, EvalError> {
    let mut ev = s.evaluator::<f64>();
    let mut bb = vec![0.0; s.rank()];
    let mut norm = |x: &[f64]| -> Result<f64, EvalError> {
        ev.bbar(x, &mut bb)?;
        Ok(bb.iter().map(|v| v * v).sum::<f64>().sqrt())
    };
    let probes = s.geometry().probe_lattice();
    let mut best_x = probes[0].clone();
    let mut best = f64::NEG_INFINITY;
    for p in &probes {
        let v = norm(p)?;
        if v > best {
            best = v;
            best_x = p.clone();
        }
    }
    let periods = s.geometry().periods().to_vec();
    let mut step: Vec<f64> = periods.iter().map(|l| l / 10.0).collect();
    for _ in 0..200 {
        let mut improved = false;
        for j in 0..best_x.len() {
            for sign in [1.0, -1.0] {
                let mut y = best_x.clone();
                y[j] += sign * step[j];
                let v = norm(&y)?;
                if v > best {
                    best = v;
                    best_x = y;
                    improved = true;
                }
            }
        }
        if !improved {
            step.iter_mut().for_each(|h| *h *= 0.5);
            if step.iter().zip(&periods).all(|(h, l)| *h < 1e-12 * l) {
                break;
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldlang::{parse, Expr};
    use crate::srgeom::TorusGeometry;
    use proptest::prelude::*;

    fn circle_well() -> SRStructure {
        let g = TorusGeometry::new(vec![1.0]).unwrap();
        SRStructure::new(g, vec![vec![Expr::one()]], vec![parse("-sin(2*pi*x1)", 1).unwrap()]).unwrap()
    }

    fn torus_b1() -> SRStructure {
        let g = TorusGeometry::standard(3).unwrap();
        let p = |t: &str| parse(t, 3).unwrap();
        SRStructure::new(
            g,
            vec![vec![p("cos(x3)"), p("0")], vec![p("sin(x3)"), p("0")], vec![p("0"), p("1")]],
            vec![p("1"), p("sin(x3 - 1)")],
        )
        .unwrap()
    }

    fn flat_circle() -> SRStructure {
        let g = TorusGeometry::new(vec![1.0]).unwrap();
        SRStructure::new(g, vec![vec![Expr::one()]], vec![Expr::zero()]).unwrap()
    }

    #[test]
    fn lagrangian_examples() {
        let s = torus_b1();
        let x = [0.2, 0.7, 1.0];
        assert_eq!(lagrangian(&s, &x, &[1.0, 0.0]).unwrap(), 0.0);
        let x = [0.2, 0.7, 2.0];
        let bb = [1.0, (1.0f64).sin()];
        assert!(lagrangian(&s, &x, &bb).unwrap().abs() < 1e-15);
        let eta = [0.3, -0.4];
        let l = lagrangian(&s, &x, &[bb[0] + eta[0], bb[1] + eta[1]]).unwrap();
        assert!((l - 0.25 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn action_examples() {
        let s = flat_circle();
        let path = HorizontalPath::new(vec![0.0f64], 0.01, vec![vec![1.0]; 100]);
        assert!((action(&s, &path).unwrap() - 0.25).abs() < 1e-12);
        assert!((path.total_time() - 1.0).abs() < 1e-12);
        let empty = HorizontalPath::new(vec![0.3f64], 0.01, vec![]);
        assert_eq!(action(&s, &empty).unwrap(), 0.0);
        let s = torus_b1();
        let drift = HorizontalPath::follow_drift(&s, vec![0.1, 0.2, 2.0], 0.01, 500).unwrap();
        assert_eq!(action(&s, &drift).unwrap(), 0.0);
        assert_eq!(rate_functional(&s, &drift).unwrap(), 0.0);
    }

    #[test]
    fn hamiltonian_examples() {
        let s = circle_well();
        assert_eq!(hamiltonian(&s, &[0.3], &[0.0]).unwrap(), 0.0);
        let g = TorusGeometry::new(vec![1.0, 1.0]).unwrap();
        let id = SRStructure::new(
            g,
            vec![vec![Expr::one(), Expr::zero()], vec![Expr::zero(), Expr::one()]],
            vec![Expr::zero(), Expr::zero()],
        )
        .unwrap();
        assert_eq!(hamiltonian(&id, &[0.1, 0.2], &[1.0, 0.0]).unwrap(), 1.0);
        for k in 0..50 {
            let x = k as f64 / 50.0;
            let p = (std::f64::consts::TAU * x).sin();
            assert!(hamiltonian(&s, &[x], &[p]).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn c_b_examples() {
        assert_eq!(c_b(&flat_circle()).unwrap(), 0.5);
        assert!((c_b(&circle_well()).unwrap() - 2.0).abs() < 1e-9);
        let expected = 0.5 * (1.0 + 2f64.sqrt()).powi(2);
        assert!((c_b(&torus_b1()).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn action_is_generic_over_scalar() {
        let s = flat_circle();
        let path = HorizontalPath::new(vec![0.0f32], 0.01, vec![vec![1.0f32]; 100]);
        assert!((action(&s, &path).unwrap() - 0.25).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn action_nonnegative_and_rate_is_twice_action(
            start in prop::array::uniform3(0.0f64..std::f64::consts::TAU),
            ctrl in prop::collection::vec(prop::array::uniform2(-2.0f64..2.0), 0..40),
        ) {
            let s = torus_b1();
            let path = HorizontalPath::new(
                start.to_vec(), 0.05, ctrl.iter().map(|c| c.to_vec()).collect());
            let a = action(&s, &path).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert_eq!(rate_functional(&s, &path).unwrap(), 2.0 * a);
        }

        #[test]
        fn hamiltonian_bounded_below(
            x in prop::array::uniform3(0.0f64..std::f64::consts::TAU),
            p in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let s = torus_b1();
            let mut bb = [0.0f64; 2];
            s.evaluator().bbar(&x, &mut bb).unwrap();
            let floor = -0.25 * (bb[0] * bb[0] + bb[1] * bb[1]);
            prop_assert!(hamiltonian(&s, &x, &p).unwrap() >= floor - 1e-12);
        }

        #[test]
        fn unit_speed_paths_respect_c_b(
            start in prop::array::uniform3(0.0f64..std::f64::consts::TAU),
            angles in prop::collection::vec(0.0f64..std::f64::consts::TAU, 1..60),
        ) {
            let s = torus_b1();
            let cb = c_b(&s).unwrap();
            let controls: Vec<Vec<f64>> = angles.iter().map(|a| vec![a.cos(), a.sin()]).collect();
            let path = HorizontalPath::new(start.to_vec(), 0.02, controls);
            // the path has unit speed, so its length bounds the distance travelled
            let len = path.total_time();
            prop_assert!(rate_functional(&s, &path).unwrap() <= cb * len + 1e-12);
        }
    }
}
