//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line per criterion with its wall time, and exits nonzero when a
//! criterion fails that is not listed in `KNOWN_FAILURES`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wkam_core::aubry::{classify_stability, detect_static_classes, hausdorff_distance, ClassSystem};
use wkam_core::fokkerplanck::{stationary_solve, FpParams};
use wkam_core::graphcalc::{
    compute_w, metric_closure, min_igraph_brute, min_igraph_edmonds, stationary_by_graphs, stationary_direct,
    w_properties_check, w_tilde,
};
use wkam_core::potential::{GridField, PeriodicGrid, PotentialSolver};
use wkam_core::scenario::{MetricKind, Scenario};
use wkam_core::selector::{assemble_psi, consistency_square, SelectedSolution};
use wkam_core::srgeom::{hormander_check, SRStructure, TorusGeometry};
use wkam_core::stochastic::{epsilon_sweep, fw_chain_stats, BallMetric, SDERun, SweepResult};

/// Criteria that fail at desk scale for reasons analysed in the README.
const KNOWN_FAILURES: &[u32] = &[7];

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome { passed, detail: detail.into() }
    }
}

type Check = Result<Outcome, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

/// Everything about one built-in scenario that several criteria share.
struct Loaded {
    sc: Scenario,
    s: SRStructure,
    grid: PeriodicGrid,
}

impl Loaded {
    fn builtin(name: &str) -> Result<Self, String> {
        let sc = Scenario::builtin(name).map_err(err)?;
        Self::from(sc)
    }

    fn from(sc: Scenario) -> Result<Self, String> {
        let s = sc.structure().map_err(err)?;
        let grid = sc.grid().map_err(err)?;
        Ok(Loaded { sc, s, grid })
    }

    fn solver(&self) -> Result<PotentialSolver<'_>, String> {
        PotentialSolver::new(&self.s, self.grid.clone(), self.sc.control_spec(&self.s, &self.grid)).map_err(err)
    }
}

struct Selected {
    cs: ClassSystem,
    fields: Vec<GridField<f64>>,
    sol: SelectedSolution,
}

fn select(l: &Loaded, solver: &PotentialSolver<'_>) -> Result<Selected, String> {
    let params = l.sc.detection_params(&l.s, &l.grid).map_err(err)?;
    let cs = detect_static_classes(solver, &params).map_err(err)?;
    let fields = solver.class_fields(&cs.point_sets()).map_err(err)?;
    let w = compute_w(&cs.phi, &cs.stable_mask()).map_err(err)?;
    let sol = assemble_psi(&cs, &w, &fields).map_err(err)?;
    Ok(Selected { cs, fields, sol })
}

fn circle_with_dims(n: usize) -> Result<Loaded, String> {
    let mut sc = Scenario::builtin("circle-single-well").map_err(err)?;
    sc.grid.dims = vec![n];
    Loaded::from(sc)
}

fn criterion_1() -> Check {
    let l = Loaded::builtin("torus3-b1")?;
    let probes = l.s.geometry().probe_lattice();
    let rep = hormander_check(&l.s, 2, &probes);
    let full = rep.satisfied && probes.len() == 125 && rep.ranks.iter().all(|&r| r == 3);

    let geom = TorusGeometry::standard(3).map_err(err)?;
    let single = SRStructure::from_strings(
        geom,
        &[vec!["cos(x3)".into()], vec!["sin(x3)".into()], vec!["0".into()]],
        &["1".into()],
    )
    .map_err(err)?;
    let degenerate = hormander_check(&single, 2, &probes);
    Ok(Outcome::new(
        full && !degenerate.satisfied,
        format!(
            "torus3-b1: rank {} at {} probes; single field: satisfied={} (min rank {})",
            rep.min_rank,
            probes.len(),
            degenerate.satisfied,
            degenerate.min_rank
        ),
    ))
}

fn criterion_2() -> Check {
    let exact = 1.0 / std::f64::consts::PI;
    let mut errors = Vec::new();
    for n in [128, 256, 512] {
        let l = circle_with_dims(n)?;
        let solver = l.solver()?;
        let phi = solver.potential_from_set(&[vec![0.0]]).map_err(err)?;
        errors.push((n, phi.at(&[0.5]) - exact));
    }
    let e256 = errors[1].1.abs();
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0].1.abs() / w[1].1.abs()).collect();
    let halving = ratios.iter().all(|r| (1.5..=2.5).contains(r));
    Ok(Outcome::new(
        e256 <= 0.02 && halving,
        format!(
            "errors {:?}, error ratios {:?}",
            errors.iter().map(|(n, e)| format!("{n}: {e:+.3e}")).collect::<Vec<_>>(),
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
    ))
}

fn torus_plane(grid: &PeriodicGrid, x3: f64) -> Vec<Vec<f64>> {
    let dims = grid.dims();
    let mut pts = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            pts.push(vec![i as f64 * grid.spacing(0), j as f64 * grid.spacing(1), x3]);
        }
    }
    pts
}

fn criterion_3(l: &Loaded, sel: &Selected) -> Check {
    let cs = &sel.cs;
    if cs.len() != 2 {
        return Ok(Outcome::new(false, format!("{} classes detected", cs.len())));
    }
    let geom = l.grid.geometry();
    let cells = 2.0 * l.grid.max_spacing();
    let targets = [1.0, 1.0 + std::f64::consts::PI];
    let mut dists = Vec::new();
    for (c, &x3) in cs.classes.iter().zip(&targets) {
        dists.push(hausdorff_distance(geom, &c.points, &torus_plane(&l.grid, x3)));
    }
    let (a21, a12) = (cs.phi[1][0], cs.phi[0][1]);
    let passed = dists.iter().all(|&d| d <= cells) && (a21 - 2.0).abs() <= 0.1 && a12 <= 0.05;
    Ok(Outcome::new(
        passed,
        format!(
            "Hausdorff {:?} (limit {cells:.3}); Φ̂(A2,A1) = {a21:.4}, Φ̂(A1,A2) = {a12:.4}",
            dists.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>()
        ),
    ))
}

fn random_matrix(rng: &mut ChaCha8Rng, m: usize) -> Vec<Vec<f64>> {
    (0..m).map(|i| (0..m).map(|j| if i == j { 0.0 } else { rng.random_range(0.0..10.0) }).collect()).collect()
}

/// Random stochastic matrix; a cyclic backbone keeps it irreducible while
/// about a third of the other entries are zero.
fn random_chain(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..n)
                .map(|j| {
                    if j == (i + 1) % n {
                        rng.random_range(0.05..1.0)
                    } else if rng.random_bool(0.35) {
                        0.0
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
                .collect();
            let z: f64 = row.iter().sum();
            row.iter().map(|v| v / z).collect()
        })
        .collect()
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let c = random_matrix(&mut rng, 6);
        for root in 0..6 {
            let (a, _) = min_igraph_brute(&c, root).map_err(err)?;
            let (b, _) = min_igraph_edmonds(&c, root).map_err(err)?;
            if a != b {
                mismatches += 1;
            }
        }
    }
    let mut worst_tv: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let p = random_chain(&mut rng, n);
        let a = stationary_by_graphs(&p).map_err(err)?;
        let b = stationary_direct(&p).map_err(err)?;
        worst_tv = worst_tv.max(0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>());
    }
    let mut prop_failures = 0;
    for _ in 0..1000 {
        let m = rng.random_range(2..=6);
        // unstable classes get a free exit to some stable class
        let mut c = random_matrix(&mut rng, m);
        let stable: Vec<bool> = (0..m).map(|i| i == 0 || rng.random_bool(0.5)).collect();
        let stable_idx: Vec<usize> = (0..m).filter(|&i| stable[i]).collect();
        for j in 0..m {
            if !stable[j] {
                c[j][stable_idx[rng.random_range(0..stable_idx.len())]] = 0.0;
            }
        }
        let c = metric_closure(&c);
        if classify_stability(&c, 0.0) != stable {
            return Err("generated stability mask disagrees with the matrix".into());
        }
        let r = compute_w(&c, &stable).map_err(err)?;
        if !w_properties_check(&c, &stable, &r, 1e-9).map_err(err)?.all_pass() {
            prop_failures += 1;
        }
    }
    Ok(Outcome::new(
        mismatches == 0 && worst_tv <= 1e-10 && prop_failures == 0,
        format!(
            "brute/arborescence mismatches {mismatches}; worst TV {worst_tv:.2e}; property failures {prop_failures}"
        ),
    ))
}

fn consistency(l: &Loaded, solver: &PotentialSolver<'_>, sel: &Selected, seed: u64) -> Result<(bool, String), String> {
    let rep = consistency_square(&sel.sol, &sel.cs, solver, &sel.fields, 100, seed).map_err(err)?;
    Ok((
        rep.passed() && rep.samples.len() == 100,
        format!(
            "{}: {} points, max gap {:.3e} ≤ {:.3e} ({} redrawn)",
            l.sc.name,
            rep.samples.len(),
            rep.max_gap,
            rep.bound,
            rep.rejected
        ),
    ))
}

fn criterion_5(
    circle: (&Loaded, &PotentialSolver<'_>, &Selected),
    torus: (&Loaded, &PotentialSolver<'_>, &Selected),
) -> Check {
    let (p1, d1) = consistency(circle.0, circle.1, circle.2, 5)?;
    let (p2, d2) = consistency(torus.0, torus.1, torus.2, 5)?;
    Ok(Outcome::new(p1 && p2, format!("{d1}; {d2}")))
}

fn criterion_6(l: &Loaded, sel: &Selected) -> Check {
    let v = |x: f64| (1.0 - (std::f64::consts::TAU * x).cos()) / std::f64::consts::TAU;
    let mut gaps = Vec::new();
    let mut gibbs_err: f64 = 0.0;
    for eps in [0.2, 0.1, 0.05] {
        let sol = stationary_solve::<f64>(&l.s, &l.grid, eps, &FpParams::default()).map_err(err)?;
        gaps.push(wkam_core::fokkerplanck::pinned_sup_gap(&sol.phi_eps, &sel.sol.phi));
        let g: Vec<f64> = l.grid.all_coords().iter().map(|x| (-2.0 * v(x[0]) / eps).exp()).collect();
        let z = g.iter().sum::<f64>() * l.grid.cell_volume();
        for (m, gi) in sol.density.values.iter().zip(&g) {
            gibbs_err = gibbs_err.max((m - gi / z).abs() / (gi / z));
        }
    }
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    Ok(Outcome::new(
        decreasing && gaps[2] <= 0.06 && gibbs_err <= 1e-4,
        format!("sup gaps {gaps:?} (strictly decreasing: {decreasing}); Gibbs relative error {gibbs_err:.2e}"),
    ))
}

fn sweep(l: &Loaded, solver: Option<&PotentialSolver<'_>>, seed: u64) -> Result<SweepResult, String> {
    let st = l.sc.stochastic.as_ref().ok_or("scenario has no stochastic section")?;
    let metric = match (st.metric, solver) {
        (MetricKind::Cc, Some(s)) => BallMetric::Cc(s),
        (MetricKind::Cc, None) => return Err("cc metric needs a solver".into()),
        (MetricKind::Flat, _) => BallMetric::Flat,
    };
    epsilon_sweep(&l.s, &l.grid, &st.center, st.radius, &st.ladder, &st.template(seed), metric).map_err(err)
}

fn criterion_7(circle: &Loaded, torus: &Loaded, torus_solver: &PotentialSolver<'_>) -> (Check, Option<SweepResult>) {
    let pi = std::f64::consts::PI;
    let c = match sweep(circle, None, circle.sc.seed) {
        Ok(r) => r,
        Err(e) => return (Err(format!("circle-single-well: {e}")), None),
    };
    let circle_ok = c.lambda >= 0.8 / pi && c.lambda <= 1.2 / pi;
    let circle_detail =
        format!("circle-single-well λ̂ = {:.4} = {:.3}/π (se {:.1e})", c.lambda, c.lambda * pi, c.bootstrap_se);
    let (torus_ok, torus_detail) = match sweep(torus, Some(torus_solver), torus.sc.seed) {
        Ok(t) => {
            ((1.5..=2.5).contains(&t.lambda), format!("torus3-b1 λ̂ = {:.4} (se {:.1e})", t.lambda, t.bootstrap_se))
        }
        Err(e) => (false, format!("torus3-b1: {e}")),
    };
    (Ok(Outcome::new(circle_ok && torus_ok, format!("{circle_detail}; {torus_detail}"))), Some(c))
}

fn criterion_8(l: &Loaded, sel: &Selected) -> Check {
    let st = l.sc.stochastic.as_ref().ok_or("no stochastic section")?;
    let fw = st.fw.as_ref().ok_or("no fw section")?;
    let cs = &sel.cs;
    let stable = cs.stable_mask();
    let (ks, ku) = match (stable.iter().position(|&s| s), stable.iter().position(|&s| !s)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Ok(Outcome::new(false, "need one stable and one unstable class")),
    };
    let stats_at = |eps: f64| {
        let run = SDERun::new(&l.s, eps, st.horizon, st.burn_in, l.sc.seed, st.chains).map_err(err)?;
        fw_chain_stats(&l.s, &l.grid, cs, fw.delta0, fw.delta1, &run).map_err(err)
    };
    let main = stats_at(fw.eps)?;
    let exponent = main.exponents[ks][ku];
    let target = cs.phi[ks][ku];
    let rel = (exponent - target).abs() / target;
    let mut ladder = st.ladder.clone();
    ladder.sort_by(|a, b| b.total_cmp(a));
    let mut v_stable = Vec::new();
    for &eps in &ladder {
        v_stable.push(stats_at(eps)?.v_measure[ks]);
    }
    let increasing = v_stable.windows(2).all(|w| w[1] > w[0]);
    Ok(Outcome::new(
        rel <= 0.25 && increasing,
        format!(
            "ε = {}: exponent {exponent:.4} vs Φ̂ = {target:.4} ({:.1}% off, {} transitions); μ̂(V_stable) along ε {ladder:?}: {:?}",
            fw.eps,
            100.0 * rel,
            main.counts[ks].iter().sum::<u64>(),
            v_stable.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    ))
}

fn criterion_9() -> Check {
    let l = Loaded::builtin("circle-three-class")?;
    let solver = l.solver()?;
    let params = l.sc.detection_params(&l.s, &l.grid).map_err(err)?;
    let cs = detect_static_classes(&solver, &params).map_err(err)?;
    if cs.len() != 3 {
        return Ok(Outcome::new(false, format!("{} classes detected", cs.len())));
    }
    let mask = cs.stable_mask();
    let w = compute_w(&cs.phi, &mask).map_err(err)?;
    let restricted = solver.restricted_potential_matrix(&cs.point_sets()).map_err(err)?;
    let wt = w_tilde(&restricted, &mask).map_err(err)?;
    let gaps: Vec<f64> = w.w.iter().zip(&wt.w).map(|(a, b)| (a - b).abs()).collect();
    let bound = 2.0 * cs.tol_static;
    Ok(Outcome::new(
        gaps.iter().all(|&g| g <= bound),
        format!(
            "W = {:?}, W̃ = {:?}, max gap {:.2e} ≤ {bound:.2e}",
            w.w,
            wt.w,
            gaps.iter().fold(0.0f64, |a, &b| a.max(b))
        ),
    ))
}

fn criterion_10(l: &Loaded, first: Option<&SweepResult>) -> Check {
    let base = match first {
        Some(r) => r.clone(),
        None => sweep(l, None, l.sc.seed)?,
    };
    let again = sweep(l, None, l.sc.seed)?;
    let identical = base.to_csv() == again.to_csv();
    let other = sweep(l, None, l.sc.seed + 1)?;
    let diff = (base.lambda - other.lambda).abs();
    let allowed = 2.0 * (base.bootstrap_se.powi(2) + other.bootstrap_se.powi(2)).sqrt();
    Ok(Outcome::new(
        identical && diff <= allowed,
        format!(
            "same seed identical CSV: {identical}; λ̂ {:.4} vs {:.4} (seed {}), |Δ| = {diff:.2e} ≤ {allowed:.2e}",
            base.lambda,
            other.lambda,
            l.sc.seed + 1
        ),
    ))
}

struct Report {
    failures: Vec<u32>,
}

impl Report {
    fn record(&mut self, n: u32, started: Instant, check: Check) {
        let elapsed = secs(started.elapsed());
        match check {
            Ok(o) => {
                let tag = if o.passed { "PASS" } else { "FAIL" };
                println!("criterion {n:>2}: {tag} [{elapsed}] {}", o.detail);
                if !o.passed {
                    self.failures.push(n);
                }
            }
            Err(e) => {
                println!("criterion {n:>2}: FAIL [{elapsed}] error: {e}");
                self.failures.push(n);
            }
        }
    }
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    }
}

fn main() {
    let total = Instant::now();
    let mut report = Report { failures: Vec::new() };

    let t = Instant::now();
    report.record(1, t, guarded(criterion_1));
    let t = Instant::now();
    report.record(2, t, guarded(criterion_2));

    let t = Instant::now();
    let torus = guarded(|| Loaded::builtin("torus3-b1"));
    let torus_solver = torus.as_ref().map_err(Clone::clone).and_then(|l| guarded(|| l.solver()));
    let torus_sel = match (&torus, &torus_solver) {
        (Ok(l), Ok(s)) => guarded(|| select(l, s)),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    report.record(
        3,
        t,
        torus_sel.as_ref().map_err(Clone::clone).and_then(|sel| criterion_3(torus.as_ref().unwrap(), sel)),
    );

    let t = Instant::now();
    report.record(4, t, guarded(criterion_4));

    let circle = guarded(|| Loaded::builtin("circle-single-well"));
    let circle_solver = circle.as_ref().map_err(Clone::clone).and_then(|l| guarded(|| l.solver()));
    let circle_sel = match (&circle, &circle_solver) {
        (Ok(l), Ok(s)) => guarded(|| select(l, s)),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };

    let t = Instant::now();
    let c5 = match (&circle, &circle_solver, &circle_sel, &torus, &torus_solver, &torus_sel) {
        (Ok(cl), Ok(cs), Ok(csel), Ok(tl), Ok(ts), Ok(tsel)) => guarded(|| criterion_5((cl, cs, csel), (tl, ts, tsel))),
        _ => Err("scenario setup failed".into()),
    };
    report.record(5, t, c5);

    let t = Instant::now();
    let c6 = match (&circle, &circle_sel) {
        (Ok(l), Ok(sel)) => guarded(|| criterion_6(l, sel)),
        _ => Err("scenario setup failed".into()),
    };
    report.record(6, t, c6);

    let t = Instant::now();
    let mut circle_sweep = None;
    let c7 = match (&circle, &torus, &torus_solver) {
        (Ok(c), Ok(tl), Ok(ts)) => guarded(|| {
            let (check, sweep) = criterion_7(c, tl, ts);
            circle_sweep = sweep;
            check
        }),
        _ => Err("scenario setup failed".into()),
    };
    report.record(7, t, c7);

    let t = Instant::now();
    let c8 = match (&circle, &circle_sel) {
        (Ok(l), Ok(sel)) => guarded(|| criterion_8(l, sel)),
        _ => Err("scenario setup failed".into()),
    };
    report.record(8, t, c8);

    let t = Instant::now();
    report.record(9, t, guarded(criterion_9));

    let t = Instant::now();
    let c10 = match &circle {
        Ok(l) => guarded(|| criterion_10(l, circle_sweep.as_ref())),
        Err(e) => Err(e.clone()),
    };
    report.record(10, t, c10);

    let unexpected: Vec<u32> = report.failures.iter().copied().filter(|n| !KNOWN_FAILURES.contains(n)).collect();
    let fixed: Vec<u32> = KNOWN_FAILURES.iter().copied().filter(|n| !report.failures.contains(n)).collect();
    println!(
        "acceptance: {} of 10 criteria pass in {}; failing {:?} (known: {:?})",
        10 - report.failures.len(),
        secs(total.elapsed()),
        report.failures,
        KNOWN_FAILURES
    );
    if !fixed.is_empty() {
        println!("acceptance: known failures now passing: {fixed:?}");
    }
    if !unexpected.is_empty() {
        println!("acceptance: unexpected failures {unexpected:?}");
        std::process::exit(1);
    }
}
