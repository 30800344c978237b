use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use wkam_core::action::c_b;
use wkam_core::aubry::{detect_static_classes, manual_class_system, ClassSystem};
use wkam_core::fokkerplanck::{
    hjv_residual, pinned_sup_gap, stationary_solve, ConvergenceRow, ConvergenceTable, FpParams,
};
use wkam_core::graphcalc::{compute_w, matrix_to_csv, w_properties_check, w_tilde, GraphResult};
use wkam_core::potential::{GridField, PeriodicGrid, PotentialSolver};
use wkam_core::scenario::{ClassMode, MetricKind, Scenario};
use wkam_core::selector::{
    assemble_psi, centered_gradient, consistency_square, domination_check, ConsistencyReport, DominationParams,
    SelectedSolution,
};
use wkam_core::srgeom::{hormander_check, SRStructure};
use wkam_core::stochastic::{epsilon_sweep, fw_chain_stats, simulate, BallMetric, FwChainStats, SDERun, SweepResult};

pub const STAGES: [&str; 8] = ["hormander", "potential", "classes", "graphs", "select", "simulate", "fp", "verify"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` needs {}, which is missing (produced by the `{producer}` stage)", path.display())]
    Missing { stage: &'static str, producer: &'static str, path: PathBuf },
    #[error("stage `{stage}` failed: {message}")]
    Numerical { stage: &'static str, message: String },
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("i/o error at {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { stage: "verify", .. } => 4,
            CliError::Missing { .. } => 2,
            CliError::Numerical { .. } => 3,
            CliError::Verify(_) => 4,
            CliError::Io { .. } => 1,
        }
    }
}

fn num<E: Display>(stage: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::Numerical { stage, message: e.to_string() }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Parses `all` or a comma separated list, returned in pipeline order.
pub fn parse_stages(text: &str) -> Result<Vec<&'static str>, CliError> {
    if text.trim() == "all" {
        return Ok(STAGES.to_vec());
    }
    let wanted: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if let Some(bad) = wanted.iter().find(|w| !STAGES.contains(w)) {
        return Err(CliError::Config(format!("unknown stage `{bad}`; expected `all` or some of {}", STAGES.join(","))));
    }
    if wanted.is_empty() {
        return Err(CliError::Config("no stages selected".into()));
    }
    Ok(STAGES.iter().copied().filter(|s| wanted.contains(s)).collect())
}

#[derive(Serialize, Deserialize)]
struct Matrix {
    #[serde(with = "wkam_core::extreal::matrix")]
    matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub struct Pipeline<'a> {
    sc: &'a Scenario,
    s: &'a SRStructure,
    grid: PeriodicGrid,
    root: PathBuf,
    seed: u64,
    tol_static: f64,
    solver: OnceCell<PotentialSolver<'a>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(sc: &'a Scenario, s: &'a SRStructure, out: &Path, seed: u64) -> Result<Self, CliError> {
        let cfg = |e: wkam_core::scenario::ScenarioError| CliError::Config(e.to_string());
        let grid = sc.grid().map_err(cfg)?;
        let tol_static = sc.tol_static(s, &grid).map_err(cfg)?;
        Ok(Pipeline { sc, s, grid, root: out.join(&sc.name), seed, tol_static, solver: OnceCell::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    fn solver(&self, stage: &'static str) -> Result<&PotentialSolver<'a>, CliError> {
        if self.solver.get().is_none() {
            let spec = self.sc.control_spec(self.s, &self.grid);
            let solver = PotentialSolver::new(self.s, self.grid.clone(), spec).map_err(num(stage))?;
            let _ = self.solver.set(solver);
        }
        Ok(self.solver.get().expect("solver initialised"))
    }

    fn require(&self, stage: &'static str, producer: &'static str, name: &str) -> Result<PathBuf, CliError> {
        let path = self.dir(producer).join(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::Missing { stage, producer, path })
        }
    }

    fn read_text(&self, stage: &'static str, producer: &'static str, name: &str) -> Result<String, CliError> {
        let path = self.require(stage, producer, name)?;
        std::fs::read_to_string(&path).map_err(io_err(&path))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(
        &self,
        stage: &'static str,
        producer: &'static str,
        name: &str,
    ) -> Result<T, CliError> {
        let text = self.read_text(stage, producer, name)?;
        serde_json::from_str(&text).map_err(num(stage))
    }

    fn read_field(&self, stage: &'static str, producer: &'static str, name: &str) -> Result<GridField<f64>, CliError> {
        let path = self.require(stage, producer, name)?;
        GridField::read_wkgf(&path).map_err(num(stage))
    }

    fn write(&self, stage: &str, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let dir = self.dir(stage);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(io_err(&path))
    }

    fn write_json(&self, stage: &str, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.write(stage, name, text)
    }

    fn write_field(&self, stage: &'static str, name: &str, field: &GridField<f64>) -> Result<(), CliError> {
        self.write(stage, name, field.to_wkgf_bytes())
    }

    pub fn run(&self, stages: &[&'static str]) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        self.write_root("scenario.toml", self.sc.to_toml())?;
        for &stage in stages {
            let dir = self.dir(stage);
            if dir.is_dir() {
                std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
            }
            eprintln!("[wkam] {}: {stage}", self.sc.name);
            let started = std::time::Instant::now();
            let outcome = match stage {
                "hormander" => self.hormander(),
                "potential" => self.potential(),
                "classes" => self.classes(),
                "graphs" => self.graphs(),
                "select" => self.select(),
                "simulate" => self.simulate(),
                "fp" => self.fp(),
                "verify" => self.verify(),
                other => Err(CliError::Config(format!("unknown stage `{other}`"))),
            };
            // artifacts written before a failure are still recorded
            self.record_manifest(stage)?;
            outcome?;
            eprintln!("[wkam] {}: {stage} done in {:.2}s", self.sc.name, started.elapsed().as_secs_f64());
        }
        Ok(())
    }

    fn write_root(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes).map_err(io_err(&path))
    }

    fn record_manifest(&self, stage: &str) -> Result<(), CliError> {
        let path = self.root.join("manifest.json");
        let mut manifest: Value = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_else(|_| json!({})),
            Err(_) => json!({}),
        };
        if !manifest.is_object() {
            manifest = json!({});
        }
        let mut files = BTreeMap::new();
        let dir = self.dir(stage);
        if dir.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(io_err(&dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for p in entries {
                let bytes = std::fs::read(&p).map_err(io_err(&p))?;
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                files.insert(name, hex::encode(Sha256::digest(&bytes)));
            }
        }
        let obj = manifest.as_object_mut().expect("object");
        obj.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        obj.insert("scenario".into(), json!(self.sc.name));
        obj.insert("seed".into(), json!(self.seed));
        obj.insert(
            "tolerances".into(),
            json!({ "tol_static": self.tol_static, "grid_dims": self.grid.dims(), "max_spacing": self.grid.max_spacing() }),
        );
        let stages = obj.entry("stages").or_insert_with(|| json!({}));
        if !stages.is_object() {
            *stages = json!({});
        }
        stages.as_object_mut().expect("object").insert(stage.to_string(), json!({ "files": files }));
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(io_err(&path))
    }

    fn hormander(&self) -> Result<(), CliError> {
        let probes = self.s.geometry().probe_lattice();
        let report = hormander_check(self.s, self.sc.hormander.depth, &probes);
        let warnings = self.s.periodicity_warnings(&probes);
        self.write_json("hormander", "hormander.json", &json!({ "report": report, "periodicity_warnings": warnings }))?;
        if !report.satisfied {
            return Err(CliError::Numerical {
                stage: "hormander",
                message: format!("bracket span has rank {} < {} at some probe", report.min_rank, self.s.dim()),
            });
        }
        Ok(())
    }

    fn potential(&self) -> Result<(), CliError> {
        const STAGE: &str = "potential";
        let solver = self.solver(STAGE)?;
        let g = &solver.graph;
        let degrees = (0..g.node_count()).map(|i| g.out_degree(i));
        let (min_deg, max_deg) = degrees.fold((usize::MAX, 0), |(a, b), d| (a.min(d), b.max(d)));
        let cb = c_b(self.s).map_err(num(STAGE))?;
        let mut oracles = Vec::new();
        for o in &self.sc.verify.phi_at {
            oracles.push(json!({ "x": o.x, "node": self.grid.nearest_node(&o.x) }));
        }
        self.write_json(
            STAGE,
            "graph.json",
            &json!({
                "nodes": g.node_count(),
                "edges": g.edge_count(),
                "min_out_degree": min_deg,
                "max_out_degree": max_deg,
                "spec": solver.spec,
                "c_b": cb,
                "tol_static": self.tol_static,
                "oracle_nodes": oracles,
            }),
        )
    }

    fn classes(&self) -> Result<(), CliError> {
        const STAGE: &str = "classes";
        let solver = self.solver(STAGE)?;
        let cs = match self.sc.classes.mode {
            ClassMode::Auto => {
                let params = self.sc.detection_params(self.s, &self.grid).map_err(num(STAGE))?;
                detect_static_classes(solver, &params)
            }
            ClassMode::Manual => manual_class_system(solver, &self.sc.classes.manual, self.tol_static),
        }
        .map_err(num(STAGE))?;
        let fields = solver.class_fields(&cs.point_sets()).map_err(num(STAGE))?;
        self.write(STAGE, "classes.json", cs.to_json() + "\n")?;
        self.write(STAGE, "phi.csv", matrix_to_csv(&cs.phi))?;
        for (c, f) in cs.classes.iter().zip(&fields) {
            self.write_field(STAGE, &format!("field_{}.wkgf", c.label), f)?;
        }
        Ok(())
    }

    fn load_classes(&self, stage: &'static str) -> Result<ClassSystem, CliError> {
        let text = self.read_text(stage, "classes", "classes.json")?;
        ClassSystem::from_json(&text).map_err(num(stage))
    }

    fn load_class_fields(&self, stage: &'static str, cs: &ClassSystem) -> Result<Vec<GridField<f64>>, CliError> {
        cs.classes.iter().map(|c| self.read_field(stage, "classes", &format!("field_{}.wkgf", c.label))).collect()
    }

    fn graphs(&self) -> Result<(), CliError> {
        const STAGE: &str = "graphs";
        let cs = self.load_classes(STAGE)?;
        let mask = cs.stable_mask();
        let result = compute_w(&cs.phi, &mask).map_err(num(STAGE))?;
        let props = w_properties_check(&cs.phi, &mask, &result, cs.tol_static).map_err(num(STAGE))?;
        self.write_json(STAGE, "W.json", &result)?;
        self.write_json(STAGE, "properties.json", &props)?;

        let solver = self.solver(STAGE)?;
        let restricted = solver.restricted_potential_matrix(&cs.point_sets()).map_err(num(STAGE))?;
        let tilde = match w_tilde(&restricted, &mask) {
            Ok(r) => json!({ "restricted": Matrix { matrix: restricted }, "result": r }),
            Err(e) => json!({ "restricted": Matrix { matrix: restricted }, "error": e.to_string() }),
        };
        self.write_json(STAGE, "W_tilde.json", &tilde)?;
        if !props.all_pass() {
            return Err(CliError::Numerical { stage: STAGE, message: props.violations.join("; ") });
        }
        Ok(())
    }

    fn selected(
        &self,
        stage: &'static str,
        cs: &ClassSystem,
    ) -> Result<(SelectedSolution, Vec<GridField<f64>>), CliError> {
        let result: GraphResult = self.read_json(stage, "graphs", "W.json")?;
        let fields = self.load_class_fields(stage, cs)?;
        let sol = assemble_psi(cs, &result, &fields).map_err(num(stage))?;
        Ok((sol, fields))
    }

    fn domination_params(&self) -> DominationParams {
        DominationParams {
            pairs: self.sc.selection.domination_pairs,
            sources: self.sc.selection.domination_sources,
            seed: self.seed ^ 0x5eed,
            ..DominationParams::default()
        }
    }

    fn select(&self) -> Result<(), CliError> {
        const STAGE: &str = "select";
        let cs = self.load_classes(STAGE)?;
        let (sol, fields) = self.selected(STAGE, &cs)?;
        sol.save(self.dir(STAGE)).map_err(num(STAGE))?;
        let solver = self.solver(STAGE)?;
        let dom = domination_check(&sol, &cs, solver, &self.domination_params()).map_err(num(STAGE))?;
        self.write_json(STAGE, "domination.json", &json!({ "passed": dom.passed(), "report": dom }))?;
        let cons = consistency_square(&sol, &cs, solver, &fields, self.sc.selection.consistency_samples, self.seed)
            .map_err(num(STAGE))?;
        self.write_json(
            STAGE,
            "consistency.json",
            &json!({ "passed": cons.passed(), "vacuous": cons.is_vacuous(), "report": cons }),
        )
    }

    fn simulate(&self) -> Result<(), CliError> {
        const STAGE: &str = "simulate";
        let Some(st) = &self.sc.stochastic else {
            return self.write_json(STAGE, "simulate.json", &json!({ "skipped": "no [stochastic] section" }));
        };
        let metric = match st.metric {
            MetricKind::Flat => BallMetric::Flat,
            MetricKind::Cc => BallMetric::Cc(self.solver(STAGE)?),
        };
        let sweep =
            epsilon_sweep(self.s, &self.grid, &st.center, st.radius, &st.ladder, &st.template(self.seed), metric)
                .map_err(num(STAGE))?;
        self.write(STAGE, "sweep.csv", sweep.to_csv())?;
        self.write_json(STAGE, "sweep.json", &sweep)?;

        let eps_min = st.ladder.iter().copied().fold(f64::INFINITY, f64::min);
        let run = SDERun::new(self.s, eps_min, st.horizon, st.burn_in, self.seed, st.chains).map_err(num(STAGE))?;
        let hist = simulate(self.s, &self.grid, &run).map_err(num(STAGE))?;
        self.write_field(STAGE, "occupation.wkgf", &hist.to_field())?;

        if let Some(fw) = &st.fw {
            let cs = self.load_classes(STAGE)?;
            let horizon = fw.horizon.unwrap_or(st.horizon);
            let chains = fw.chains.unwrap_or(st.chains);
            let run = SDERun::new(self.s, fw.eps, horizon, st.burn_in, self.seed, chains).map_err(num(STAGE))?;
            let stats = fw_chain_stats(self.s, &self.grid, &cs, fw.delta0, fw.delta1, &run).map_err(num(STAGE))?;
            self.write_json(STAGE, "fw.json", &json!({ "stats": stats, "phi": Matrix { matrix: cs.phi.clone() } }))?;
        }
        Ok(())
    }

    fn fp(&self) -> Result<(), CliError> {
        const STAGE: &str = "fp";
        let Some(cfg) = &self.sc.fp else {
            return self.write_json(STAGE, "fp.json", &json!({ "skipped": "no [fp] section" }));
        };
        if self.s.rank() != self.s.dim() {
            return self.write_json(STAGE, "fp.json", &json!({ "skipped": "degenerate diffusion (rank < dimension)" }));
        }
        let phi = self.read_field(STAGE, "select", "phi.wkgf")?;
        let params = FpParams { tol: cfg.tol, max_iter: cfg.max_iter, ..FpParams::default() };
        let mut ladder = cfg.ladder.clone();
        ladder.sort_by(|a, b| b.total_cmp(a));
        let mut rows = Vec::new();
        let mut last = None;
        for &eps in &ladder {
            let sol = stationary_solve::<f64>(self.s, &self.grid, eps, &params).map_err(num(STAGE))?;
            let pe = sol.phi_eps.to_f64();
            let max_gradient = (0..self.grid.len())
                .map(|n| centered_gradient(&pe, n).iter().map(|g| g * g).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            rows.push(ConvergenceRow {
                eps,
                sup_gap: pinned_sup_gap(&pe, &phi),
                max_gradient,
                iterations: sol.iterations,
                residual: sol.residual,
            });
            last = Some(sol);
        }
        let table = ConvergenceTable { rows };
        let sol = last.expect("nonempty ladder");
        let hjv = hjv_residual(self.s, &sol).map_err(num(STAGE))?;
        self.write(STAGE, "convergence.csv", table.to_csv())?;
        self.write_field(STAGE, "density.wkgf", &sol.density)?;
        self.write_field(STAGE, "phi_eps.wkgf", &sol.phi_eps)?;
        self.write_json(
            STAGE,
            "fp.json",
            &json!({
                "table": table,
                "strictly_decreasing": table.strictly_decreasing(),
                "gradient_bound": table.gradient_bound(),
                "gradient_blowup": table.gradient_blowup(),
                "final": sol.summary(),
                "hjv_residual": hjv.stats,
            }),
        )
    }

    fn verify(&self) -> Result<(), CliError> {
        const STAGE: &str = "verify";
        let v = &self.sc.verify;
        let mut checks = Vec::new();
        let mut check = |name: &str, passed: bool, detail: String| {
            checks.push(Check { name: name.to_string(), passed, detail });
        };

        let horm: Value = self.read_json(STAGE, "hormander", "hormander.json")?;
        let satisfied = horm["report"]["satisfied"].as_bool().unwrap_or(false);
        check("hormander", satisfied, format!("min rank {}", horm["report"]["min_rank"]));

        let cs = self.load_classes(STAGE)?;
        if let Some(n) = v.class_count {
            check("class_count", cs.len() == n, format!("{} classes, expected {n}", cs.len()));
        }
        let stored: GraphResult = self.read_json(STAGE, "graphs", "W.json")?;
        let mask = cs.stable_mask();
        let fresh = compute_w(&cs.phi, &mask).map_err(num(STAGE))?;
        let same = fresh.w.iter().zip(&stored.w).all(|(a, b)| a == b || (a - b).abs() <= 1e-12);
        check("w_recomputed", same && fresh.w.len() == stored.w.len(), format!("stored {:?}", stored.w));
        let props = w_properties_check(&cs.phi, &mask, &stored, cs.tol_static).map_err(num(STAGE))?;
        check("w_properties", props.all_pass(), format!("max violation {:.3e}", props.max_violation));

        let phi = self.read_field(STAGE, "select", "phi.wkgf")?;
        let (reference, _) = self.selected(STAGE, &cs)?;
        if phi.grid != reference.phi.grid {
            return Err(CliError::Numerical {
                stage: STAGE,
                message: "phi.wkgf grid differs from the scenario grid".into(),
            });
        }
        let gap = phi.values.iter().zip(&reference.phi.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        check("phi_matches_assembly", gap <= 1e-9, format!("max |phi - assembled| = {gap:.3e}"));

        let w_min = reference.w_min();
        let loaded = SelectedSolution {
            psi: phi.map("psi", |x| x + w_min),
            phi: phi.clone(),
            argmin_class: reference.argmin_class.clone(),
            summary: reference.summary.clone(),
        };
        let dom = domination_check(&loaded, &cs, self.solver(STAGE)?, &self.domination_params()).map_err(num(STAGE))?;
        check(
            "domination",
            dom.passed(),
            format!("{} of {} pairs violate, worst excess {:.3e}", dom.violations, dom.pairs, dom.worst_excess),
        );
        let cons: Value = self.read_json(STAGE, "select", "consistency.json")?;
        let cons: ConsistencyReport = serde_json::from_value(cons["report"].clone()).map_err(num(STAGE))?;
        let detail = if cons.is_vacuous() {
            format!("vacuous: all {} draws lie in or are equivalent to a class", cons.rejected)
        } else {
            format!("{} points, max gap {:.3e}, bound {:.3e}", cons.samples.len(), cons.max_gap, cons.bound)
        };
        check("consistency", cons.passed(), detail);

        for (k, o) in v.phi_at.iter().enumerate() {
            let got = phi.at(&o.x);
            check(
                &format!("phi_at[{k}]"),
                (got - o.value).abs() <= o.tol,
                format!("phi({:?}) = {got:.5}, expected {} ± {}", o.x, o.value, o.tol),
            );
        }

        if let Some(st) = &self.sc.stochastic {
            let sweep: SweepResult = self.read_json(STAGE, "simulate", "sweep.json")?;
            if let Some([lo, hi]) = v.lambda_range {
                check(
                    "lambda",
                    sweep.lambda >= lo && sweep.lambda <= hi,
                    format!("λ̂ = {:.5} (se {:.2e}), range [{lo}, {hi}]", sweep.lambda, sweep.bootstrap_se),
                );
            }
            if st.fw.is_some() {
                if let Some(rel) = v.fw_rel_tol {
                    let fw: Value = self.read_json(STAGE, "simulate", "fw.json")?;
                    let stats: FwChainStats = serde_json::from_value(fw["stats"].clone()).map_err(num(STAGE))?;
                    let abs = v.fw_abs_tol.unwrap_or(0.0);
                    let mut worst: f64 = 0.0;
                    let mut compared = 0;
                    for i in 0..cs.len() {
                        if stats.low_confidence[i] {
                            continue;
                        }
                        for j in 0..cs.len() {
                            let (e, p) = (stats.exponents[i][j], cs.phi[i][j]);
                            if i == j || !e.is_finite() || !p.is_finite() {
                                continue;
                            }
                            compared += 1;
                            worst = worst.max((e - p).abs() - (rel * p + abs));
                        }
                    }
                    check(
                        "fw_exponents",
                        compared > 0 && worst <= 0.0,
                        format!("{compared} transitions compared, worst excess {worst:.3e}"),
                    );
                }
            }
        }

        if self.sc.fp.is_some() && self.s.rank() == self.s.dim() {
            let fp: Value = self.read_json(STAGE, "fp", "fp.json")?;
            let table: ConvergenceTable = serde_json::from_value(fp["table"].clone()).map_err(num(STAGE))?;
            if let Some(limit) = v.fp_final_gap {
                let last = table.rows.last().map(|r| r.sup_gap).unwrap_or(f64::INFINITY);
                check("fp_final_gap", last <= limit, format!("final sup gap {last:.4e}, limit {limit}"));
            }
            if v.fp_strictly_decreasing {
                let gaps: Vec<f64> = table.rows.iter().map(|r| r.sup_gap).collect();
                check("fp_strictly_decreasing", table.strictly_decreasing(), format!("gaps {gaps:?}"));
            }
        }

        let failed: Vec<String> =
            checks.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect();
        self.write_json(STAGE, "verify.json", &json!({ "passed": failed.is_empty(), "checks": checks }))?;
        for c in &checks {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(CliError::Verify(failed.join("; ")))
        }
    }
}

/// Writes a `.csv` next to every `.wkgf` below `dir`; returns the files written.
pub fn export_dir(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> =
            std::fs::read_dir(&d).map_err(io_err(&d))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "wkgf") {
                let field = GridField::<f64>::read_wkgf(&p).map_err(num("export"))?;
                let target = p.with_extension("csv");
                std::fs::write(&target, field.to_csv()).map_err(io_err(&target))?;
                out.push(target);
            }
        }
    }
    Ok(out)
}
