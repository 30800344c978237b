//! Grid discretization of the Mañé potential.
//!
//! The torus is sampled on a uniform periodic grid and horizontal curves are
//! replaced by walks on a control graph. Every edge `x → y` carries the least
//! action of a constant-velocity horizontal segment realizing the snapped
//! displacement `δ = y − x`, optimized over the traversal time:
//!
//! ```text
//! min_t  t·¼|η/t − b̄(x)|²  =  ½(|η||b̄(x)| − η·b̄(x)),   η = σ(x)⁺δ
//! ```
//!
//! Shortest paths on this graph give `Φ̂`, the restricted `Φ̃`, the Peierls
//! barrier through a class system and a Carnot–Carathéodory distance proxy.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fieldlang::EvalError;
use crate::scalar::Scalar;
use crate::srgeom::{SRStructure, TorusGeometry};

pub const WKGF_MAGIC: &[u8; 4] = b"WKGF";
pub const WKGF_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid control graph specification: {0}")]
    Spec(String),
    #[error("control graph is not strongly connected: node {to} is unreachable from node {from}")]
    Disconnected { from: usize, to: usize },
    #[error("source set is empty")]
    EmptySource,
    #[error("class list is empty")]
    EmptyClasses,
    #[error("classes {0} and {1} overlap (distance within twice the snap radius)")]
    Overlap(usize, usize),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed field file: {0}")]
    Format(String),
}

/// Uniform node lattice `k_j Δ_j` on the torus, row-major with the last index fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicGrid {
    geometry: TorusGeometry,
    dims: Vec<usize>,
    strides: Vec<usize>,
}

impl PeriodicGrid {
    pub fn new(geometry: TorusGeometry, dims: Vec<usize>) -> Result<Self, PotentialError> {
        if dims.len() != geometry.dim() {
            return Err(PotentialError::Grid(format!(
                "{} axis sizes given for a {}-dimensional torus",
                dims.len(),
                geometry.dim()
            )));
        }
        if let Some(j) = dims.iter().position(|&n| n < 2) {
            return Err(PotentialError::Grid(format!("axis {} needs at least 2 nodes", j + 1)));
        }
        let total = dims.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n));
        if total.is_none_or(|t| t > u32::MAX as usize) {
            return Err(PotentialError::Grid("too many nodes".into()));
        }
        let mut strides = vec![1usize; dims.len()];
        for j in (0..dims.len().saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * dims[j + 1];
        }
        Ok(PeriodicGrid { geometry, dims, strides })
    }

    pub fn uniform(geometry: TorusGeometry, n: usize) -> Result<Self, PotentialError> {
        let d = geometry.dim();
        Self::new(geometry, vec![n; d])
    }

    pub fn geometry(&self) -> &TorusGeometry {
        &self.geometry
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, j: usize) -> f64 {
        self.geometry.periods()[j] / self.dims[j] as f64
    }

    pub fn max_spacing(&self) -> f64 {
        (0..self.dim()).map(|j| self.spacing(j)).fold(0.0, f64::max)
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|j| self.spacing(j)).product()
    }

    pub fn index_of(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(k, s)| k * s).sum()
    }

    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        let mut rest = idx;
        for j in 0..self.dim() {
            out[j] = rest / self.strides[j];
            rest %= self.strides[j];
        }
        out
    }

    pub fn coords(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx).iter().enumerate().map(|(j, &k)| k as f64 * self.spacing(j)).collect()
    }

    /// Node reached from `idx` by the integer offset `off`, wrapping every axis.
    pub fn offset(&self, idx: usize, off: &[i64]) -> usize {
        let mut out = 0usize;
        let mut rest = idx;
        for j in 0..self.dim() {
            let k = (rest / self.strides[j]) as i64;
            rest %= self.strides[j];
            let n = self.dims[j] as i64;
            out += ((k + off[j]).rem_euclid(n) as usize) * self.strides[j];
        }
        out
    }

    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for j in 0..self.dim() {
            let n = self.dims[j] as i64;
            let k = (self.geometry.wrap_coord(j, x[j]) / self.spacing(j)).round() as i64;
            idx += (k.rem_euclid(n) as usize) * self.strides[j];
        }
        idx
    }

    /// Nodes within flat distance `radius` of `x`; falls back to the nearest
    /// node when the ball contains none.
    pub fn nodes_within(&self, x: &[f64], radius: f64) -> Vec<usize> {
        let d = self.dim();
        let xw = self.geometry.wrap(x);
        let mut lo = vec![0i64; d];
        let mut hi = vec![0i64; d];
        for j in 0..d {
            let h = self.spacing(j);
            let span = ((radius / h).ceil() as i64).min(self.dims[j] as i64 / 2);
            let c = (xw[j] / h).round() as i64;
            lo[j] = c - span - 1;
            hi[j] = c + span + 1;
            if hi[j] - lo[j] + 1 > self.dims[j] as i64 {
                lo[j] = 0;
                hi[j] = self.dims[j] as i64 - 1;
            }
        }
        let mut out = Vec::new();
        let mut cur = lo.clone();
        loop {
            let mut sq = 0.0;
            for j in 0..d {
                let dj = self.geometry.delta(j, xw[j], cur[j] as f64 * self.spacing(j));
                sq += dj * dj;
            }
            if sq <= radius * radius * (1.0 + 1e-12) {
                let mut idx = 0;
                for j in 0..d {
                    idx += (cur[j].rem_euclid(self.dims[j] as i64) as usize) * self.strides[j];
                }
                out.push(idx);
            }
            let mut j = d;
            loop {
                if j == 0 {
                    out.sort_unstable();
                    out.dedup();
                    if out.is_empty() {
                        out.push(self.nearest_node(&xw));
                    }
                    return out;
                }
                j -= 1;
                cur[j] += 1;
                if cur[j] <= hi[j] {
                    break;
                }
                cur[j] = lo[j];
            }
        }
    }

    /// Sorted union of `nodes_within` over a point cloud.
    pub fn nodes_near_set(&self, points: &[Vec<f64>], radius: f64) -> Vec<usize> {
        let mut mark = vec![false; self.len()];
        for p in points {
            for i in self.nodes_within(p, radius) {
                mark[i] = true;
            }
        }
        mark.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn all_coords(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.coords(i)).collect()
    }
}

/// A scalar field sampled at the nodes of a periodic grid. `+∞` marks
/// unreachable nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField<T: Scalar> {
    pub grid: PeriodicGrid,
    pub name: String,
    pub values: Vec<T>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Scalar> GridField<T> {
    pub fn new(grid: PeriodicGrid, name: impl Into<String>, values: Vec<T>) -> Self {
        assert_eq!(values.len(), grid.len(), "field length must match the grid");
        GridField { grid, name: name.into(), values, metadata: BTreeMap::new() }
    }

    pub fn constant(grid: PeriodicGrid, name: impl Into<String>, v: T) -> Self {
        let n = grid.len();
        Self::new(grid, name, vec![v; n])
    }

    pub fn from_fn(grid: PeriodicGrid, name: impl Into<String>, f: impl Fn(&[f64]) -> T) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.coords(i))).collect();
        Self::new(grid, name, values)
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn at(&self, x: &[f64]) -> T {
        self.values[self.grid.nearest_node(x)]
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v < self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn min_over(&self, nodes: &[usize]) -> T {
        nodes.iter().map(|&i| self.values[i]).fold(T::infinity(), T::min)
    }

    pub fn map(&self, name: impl Into<String>, f: impl Fn(T) -> T) -> Self {
        GridField {
            grid: self.grid.clone(),
            name: name.into(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_f64(&self) -> GridField<f64> {
        GridField {
            grid: self.grid.clone(),
            name: self.name.clone(),
            values: self.values.iter().map(|v| v.as_f64()).collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_wkgf_bytes(&self) -> Vec<u8> {
        let d = self.grid.dim();
        let mut out = Vec::with_capacity(16 + 12 * d + self.name.len() + 8 * self.values.len());
        out.extend_from_slice(WKGF_MAGIC);
        out.extend_from_slice(&WKGF_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for &n in self.grid.dims() {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for &l in self.grid.geometry().periods() {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }

    pub fn write_wkgf(&self, path: impl AsRef<Path>) -> Result<(), PotentialError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_wkgf_bytes())?;
        Ok(())
    }

    pub fn from_wkgf_bytes(bytes: &[u8]) -> Result<Self, PotentialError> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        if cur.take(4)? != WKGF_MAGIC {
            return Err(PotentialError::Format("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != WKGF_VERSION {
            return Err(PotentialError::Format(format!("unsupported version {version}")));
        }
        let d = cur.u32()? as usize;
        if d == 0 || d > 16 {
            return Err(PotentialError::Format(format!("implausible dimension {d}")));
        }
        let dims = (0..d).map(|_| cur.u32().map(|n| n as usize)).collect::<Result<Vec<_>, _>>()?;
        let periods = (0..d).map(|_| cur.f64()).collect::<Result<Vec<_>, _>>()?;
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| PotentialError::Format("name is not UTF-8".into()))?;
        let geometry = TorusGeometry::new(periods).map_err(|e| PotentialError::Format(e.to_string()))?;
        let grid = PeriodicGrid::new(geometry, dims)?;
        if bytes.len() - cur.pos != 8 * grid.len() {
            return Err(PotentialError::Format(format!(
                "expected {} values, found {} bytes",
                grid.len(),
                bytes.len() - cur.pos
            )));
        }
        let values = (0..grid.len()).map(|_| cur.f64().map(T::lit)).collect::<Result<Vec<_>, _>>()?;
        Ok(GridField::new(grid, name, values))
    }

    pub fn read_wkgf(path: impl AsRef<Path>) -> Result<Self, PotentialError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_wkgf_bytes(&buf)
    }

    /// One row per node: coordinates, then the value.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for j in 0..self.grid.dim() {
            let _ = write!(s, "x{},", j + 1);
        }
        s.push_str(&self.name);
        s.push('\n');
        for i in 0..self.grid.len() {
            for c in self.grid.coords(i) {
                let _ = write!(s, "{c},");
            }
            let _ = writeln!(s, "{}", self.values[i].as_f64());
        }
        s
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PotentialError> {
        if self.pos + n > self.bytes.len() {
            return Err(PotentialError::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PotentialError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, PotentialError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parameters of the control graph.
///
/// From each node `x` and each unit control direction `u` the walker moves by
/// `σ(x)u`, rescaled to Euclidean length `step·k` for every multiplier `k`,
/// and snaps to the nearest node. The drift direction `b̄(x)/|b̄(x)|` is
/// always added when `include_drift` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGraphSpec {
    pub step: f64,
    pub multipliers: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
    pub include_drift: bool,
    /// Multipliers used for the drift direction only. Longer edges along the
    /// drift reduce the angular snapping error of near-free moves.
    #[serde(default = "default_drift_multipliers")]
    pub drift_multipliers: Vec<f64>,
    pub snap_radius: f64,
    #[serde(default)]
    pub forbidden: Vec<usize>,
}

impl ControlGraphSpec {
    pub fn default_for(s: &SRStructure, grid: &PeriodicGrid) -> Self {
        let h = grid.max_spacing();
        ControlGraphSpec {
            step: h,
            multipliers: vec![1.0, 2.0],
            directions: default_directions(s.rank()),
            include_drift: true,
            drift_multipliers: default_drift_multipliers(),
            snap_radius: 1.5 * h,
            forbidden: Vec::new(),
        }
    }

    pub fn validate(&self, rank: usize) -> Result<(), PotentialError> {
        let bad = |m: &str| Err(PotentialError::Spec(m.to_string()));
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step must be positive");
        }
        if self.multipliers.is_empty() || self.multipliers.iter().any(|&k| !(k > 0.0)) {
            return bad("multipliers must be positive and nonempty");
        }
        if self.directions.is_empty() && !self.include_drift {
            return bad("no control directions");
        }
        if self.directions.iter().any(|u| u.len() != rank) {
            return bad("direction length differs from the frame rank");
        }
        if !(self.snap_radius > 0.0) {
            return bad("snap radius must be positive");
        }
        Ok(())
    }
}

fn default_drift_multipliers() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0]
}

/// `±1` for rank 1, 32 equally spaced angles for rank 2, and the axis plus
/// sign-diagonal directions otherwise.
pub fn default_directions(r: usize) -> Vec<Vec<f64>> {
    match r {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..32)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / 32.0;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let mut out = Vec::new();
            for k in 0..r {
                for sgn in [1.0, -1.0] {
                    let mut u = vec![0.0; r];
                    u[k] = sgn;
                    out.push(u);
                }
            }
            let norm = (r as f64).sqrt();
            for mask in 0..(1usize << r) {
                out.push((0..r).map(|k| if mask >> k & 1 == 1 { -1.0 } else { 1.0 } / norm).collect());
            }
            out
        }
    }
}

/// Compressed adjacency of the control graph.
#[derive(Debug, Clone)]
pub struct ControlGraph {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    costs: Vec<f64>,
    lengths: Vec<f64>,
}

impl ControlGraph {
    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// `(target, action cost, control length)` for every edge leaving `i`.
    pub fn edges(&self, i: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (self.offsets[i]..self.offsets[i + 1]).map(move |e| (self.targets[e] as usize, self.costs[e], self.lengths[e]))
    }

    /// First `(from, to)` pair, over non-forbidden nodes, with `to` unreachable from `from`.
    pub fn connectivity_violation(&self, forbidden: &[bool]) -> Option<(usize, usize)> {
        let n = self.node_count();
        let root = (0..n).find(|&i| !forbidden[i])?;
        let fwd = self.reach(root, forbidden, false);
        if let Some(k) = (0..n).find(|&k| !forbidden[k] && !fwd[k]) {
            return Some((root, k));
        }
        let bwd = self.reach(root, forbidden, true);
        (0..n).find(|&k| !forbidden[k] && !bwd[k]).map(|k| (k, root))
    }

    fn reach(&self, root: usize, forbidden: &[bool], reverse: bool) -> Vec<bool> {
        let n = self.node_count();
        let adj: Vec<Vec<usize>>;
        let mut seen = vec![false; n];
        let mut stack = vec![root];
        seen[root] = true;
        if reverse {
            let mut rev = vec![Vec::new(); n];
            for i in 0..n {
                for (j, _, _) in self.edges(i) {
                    rev[j].push(i);
                }
            }
            adj = rev;
            while let Some(i) = stack.pop() {
                for &j in &adj[i] {
                    if !seen[j] && !forbidden[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        } else {
            while let Some(i) = stack.pop() {
                for (j, _, _) in self.edges(i) {
                    if !seen[j] && !forbidden[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        seen
    }
}

/// Builds the control graph and checks strong connectivity over the
/// non-forbidden nodes.
pub fn build_control_graph(
    s: &SRStructure,
    grid: &PeriodicGrid,
    spec: &ControlGraphSpec,
) -> Result<ControlGraph, PotentialError> {
    let graph = build_unchecked(s, grid, spec)?;
    let forbidden = forbidden_mask(grid.len(), &spec.forbidden);
    if let Some((from, to)) = graph.connectivity_violation(&forbidden) {
        return Err(PotentialError::Disconnected { from, to });
    }
    Ok(graph)
}

fn forbidden_mask(n: usize, nodes: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &i in nodes {
        if i < n {
            m[i] = true;
        }
    }
    m
}

type NodeEdges = Vec<(u32, f64, f64)>;

fn build_unchecked(
    s: &SRStructure,
    grid: &PeriodicGrid,
    spec: &ControlGraphSpec,
) -> Result<ControlGraph, PotentialError> {
    let (d, r) = (s.dim(), s.rank());
    if grid.geometry() != s.geometry() {
        return Err(PotentialError::Grid("grid geometry differs from the structure".into()));
    }
    spec.validate(r)?;
    let forbidden = forbidden_mask(grid.len(), &spec.forbidden);
    let spacing: Vec<f64> = (0..d).map(|j| grid.spacing(j)).collect();

    let per_node: Vec<Result<NodeEdges, EvalError>> = (0..grid.len())
        .into_par_iter()
        .map_init(
            || (s.evaluator::<f64>(), vec![0.0; d * r], vec![0.0; r]),
            |(ev, sig, bb), i| {
                let x = grid.coords(i);
                ev.sigma(&x, sig)?;
                ev.bbar(&x, bb)?;
                Ok(node_edges(grid, spec, &forbidden, &spacing, i, sig, bb, d, r))
            },
        )
        .collect();

    let mut offsets = Vec::with_capacity(grid.len() + 1);
    let mut targets = Vec::new();
    let mut costs = Vec::new();
    let mut lengths = Vec::new();
    offsets.push(0);
    for edges in per_node {
        for (t, c, l) in edges? {
            targets.push(t);
            costs.push(c);
            lengths.push(l);
        }
        offsets.push(targets.len());
    }
    Ok(ControlGraph { offsets, targets, costs, lengths })
}

#[allow(clippy::too_many_arguments)]
fn node_edges(
    grid: &PeriodicGrid,
    spec: &ControlGraphSpec,
    forbidden: &[bool],
    spacing: &[f64],
    i: usize,
    sig: &[f64],
    bb: &[f64],
    d: usize,
    r: usize,
) -> NodeEdges {
    let sigma = DMatrix::from_row_slice(d, r, sig);
    let gram = sigma.transpose() * &sigma;
    let pinv = match gram.try_inverse() {
        Some(g) => g * sigma.transpose(),
        None => return Vec::new(),
    };
    let bnorm = bb.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut dirs: Vec<(Vec<f64>, &[f64])> =
        spec.directions.iter().map(|u| (u.clone(), spec.multipliers.as_slice())).collect();
    if spec.include_drift && bnorm > 0.0 {
        let ks = if spec.drift_multipliers.is_empty() { &spec.multipliers } else { &spec.drift_multipliers };
        dirs.push((bb.iter().map(|v| v / bnorm).collect(), ks.as_slice()));
    }

    let mut offsets: Vec<Vec<i64>> = Vec::new();
    let mut v = vec![0.0; d];
    for (u, ks) in &dirs {
        for j in 0..d {
            v[j] = (0..r).map(|k| sig[j * r + k] * u[k]).sum();
        }
        let vn = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if vn == 0.0 {
            continue;
        }
        for &k in ks.iter() {
            let scale = spec.step * k / vn;
            let off: Vec<i64> = (0..d).map(|j| (v[j] * scale / spacing[j]).round() as i64).collect();
            if off.iter().any(|&o| o != 0) && !offsets.contains(&off) {
                offsets.push(off);
            }
        }
    }

    let mut out = Vec::with_capacity(offsets.len());
    let mut delta = vec![0.0; d];
    for off in &offsets {
        let t = grid.offset(i, off);
        if t == i || forbidden[t] {
            continue;
        }
        for j in 0..d {
            delta[j] = off[j] as f64 * spacing[j];
        }
        let mut eta_norm_sq = 0.0;
        let mut eta_dot_b = 0.0;
        for k in 0..r {
            let e: f64 = (0..d).map(|j| pinv[(k, j)] * delta[j]).sum();
            eta_norm_sq += e * e;
            eta_dot_b += e * bb[k];
        }
        let eta_norm = eta_norm_sq.sqrt();
        let cost = (0.5 * (eta_norm * bnorm - eta_dot_b)).max(0.0);
        out.push((t as u32, cost, eta_norm));
    }
    out
}

#[derive(Copy, Clone, PartialEq)]
struct HeapItem {
    dist: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Which edge weight a shortest-path query uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeWeight {
    Action,
    Length,
}

/// Multi-source Dijkstra. Forbidden nodes are never entered (sources are
/// allowed even if marked). Unreached nodes keep `+∞`.
pub fn dijkstra(graph: &ControlGraph, sources: &[usize], forbidden: Option<&[bool]>, weight: EdgeWeight) -> Vec<f64> {
    let n = graph.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        dist[s] = 0.0;
        heap.push(HeapItem { dist: 0.0, node: s });
    }
    while let Some(HeapItem { dist: du, node: u }) = heap.pop() {
        if du > dist[u] {
            continue;
        }
        for (v, c, l) in graph.edges(u) {
            if forbidden.is_some_and(|f| f[v]) {
                continue;
            }
            let w = match weight {
                EdgeWeight::Action => c,
                EdgeWeight::Length => l,
            };
            let nd = du + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(HeapItem { dist: nd, node: v });
            }
        }
    }
    dist
}

/// A structure, a grid, a control specification and the graph they define.
/// All shortest-path queries go through this.
pub struct PotentialSolver<'a> {
    pub structure: &'a SRStructure,
    pub grid: PeriodicGrid,
    pub spec: ControlGraphSpec,
    pub graph: ControlGraph,
}

impl<'a> PotentialSolver<'a> {
    pub fn new(structure: &'a SRStructure, grid: PeriodicGrid, spec: ControlGraphSpec) -> Result<Self, PotentialError> {
        let graph = build_control_graph(structure, &grid, &spec)?;
        Ok(PotentialSolver { structure, grid, spec, graph })
    }

    pub fn with_defaults(structure: &'a SRStructure, grid: PeriodicGrid) -> Result<Self, PotentialError> {
        let spec = ControlGraphSpec::default_for(structure, &grid);
        Self::new(structure, grid, spec)
    }

    pub fn snap(&self, points: &[Vec<f64>]) -> Vec<usize> {
        self.grid.nodes_near_set(points, self.spec.snap_radius)
    }

    fn base_forbidden(&self) -> Option<Vec<bool>> {
        if self.spec.forbidden.is_empty() {
            None
        } else {
            Some(forbidden_mask(self.grid.len(), &self.spec.forbidden))
        }
    }

    pub fn field_from_nodes(&self, nodes: &[usize], name: &str) -> Result<GridField<f64>, PotentialError> {
        if nodes.is_empty() {
            return Err(PotentialError::EmptySource);
        }
        let f = self.base_forbidden();
        let d = dijkstra(&self.graph, nodes, f.as_deref(), EdgeWeight::Action);
        Ok(GridField::new(self.grid.clone(), name, d))
    }

    /// `Φ̂(source, ·)`.
    pub fn potential_from_set(&self, source: &[Vec<f64>]) -> Result<GridField<f64>, PotentialError> {
        if source.is_empty() {
            return Err(PotentialError::EmptySource);
        }
        self.field_from_nodes(&self.snap(source), "potential")
    }

    /// Fails with the first pair of classes closer than twice the snap radius.
    pub fn check_disjoint(&self, classes: &[Vec<Vec<f64>>]) -> Result<(), PotentialError> {
        let geom = self.grid.geometry();
        let lim = 2.0 * self.spec.snap_radius;
        for i in 0..classes.len() {
            for j in i + 1..classes.len() {
                let close = classes[i].par_iter().any(|p| classes[j].iter().any(|q| geom.flat_distance(p, q) <= lim));
                if close {
                    return Err(PotentialError::Overlap(i, j));
                }
            }
        }
        Ok(())
    }

    /// `Φ̂(K_i, ·)` for each class, in class order.
    pub fn class_fields(&self, classes: &[Vec<Vec<f64>>]) -> Result<Vec<GridField<f64>>, PotentialError> {
        if classes.is_empty() {
            return Err(PotentialError::EmptyClasses);
        }
        if classes.iter().any(|c| c.is_empty()) {
            return Err(PotentialError::EmptySource);
        }
        classes.par_iter().enumerate().map(|(i, c)| Ok(self.potential_from_set(c)?.with_meta("class", i))).collect()
    }

    /// `Φ̂(K_i, K_j)` from precomputed class fields.
    pub fn matrix_from_fields(&self, fields: &[GridField<f64>], classes: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
        let nodes: Vec<Vec<usize>> = classes.iter().map(|c| self.snap(c)).collect();
        let m = classes.len();
        let mut phi = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    phi[i][j] = fields[i].min_over(&nodes[j]);
                }
            }
        }
        phi
    }

    pub fn potential_matrix(&self, classes: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>, PotentialError> {
        self.check_disjoint(classes)?;
        let fields = self.class_fields(classes)?;
        Ok(self.matrix_from_fields(&fields, classes))
    }

    /// `Φ̃(K_i, K_j)`: walks avoid every node snapped to a third class.
    pub fn restricted_potential_matrix(&self, classes: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>, PotentialError> {
        if classes.is_empty() {
            return Err(PotentialError::EmptyClasses);
        }
        self.check_disjoint(classes)?;
        let m = classes.len();
        let nodes: Vec<Vec<usize>> = classes.iter().map(|c| self.snap(c)).collect();
        let base = self.base_forbidden().unwrap_or_else(|| vec![false; self.grid.len()]);
        let pairs: Vec<(usize, usize)> =
            (0..m).flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        let vals: Vec<f64> = pairs
            .par_iter()
            .map(|&(i, j)| {
                let mut mask = base.clone();
                for (l, ns) in nodes.iter().enumerate() {
                    if l != i && l != j {
                        ns.iter().for_each(|&k| mask[k] = true);
                    }
                }
                let d = dijkstra(&self.graph, &nodes[i], Some(&mask), EdgeWeight::Action);
                nodes[j].iter().map(|&k| d[k]).fold(f64::INFINITY, f64::min)
            })
            .collect();
        let mut out = vec![vec![0.0; m]; m];
        for (&(i, j), v) in pairs.iter().zip(vals) {
            out[i][j] = v;
        }
        Ok(out)
    }

    /// `min_i Φ̂(x, K_i) + Φ̂(K_i, y)`.
    pub fn peierls_barrier(&self, classes: &[Vec<Vec<f64>>], x: &[f64], y: &[f64]) -> Result<f64, PotentialError> {
        if classes.is_empty() {
            return Err(PotentialError::EmptyClasses);
        }
        let fields = self.class_fields(classes)?;
        self.peierls_with_fields(classes, &fields, x, y)
    }

    pub fn peierls_with_fields(
        &self,
        classes: &[Vec<Vec<f64>>],
        fields: &[GridField<f64>],
        x: &[f64],
        y: &[f64],
    ) -> Result<f64, PotentialError> {
        let from_x = self.field_from_nodes(&[self.grid.nearest_node(x)], "from_x")?;
        let yi = self.grid.nearest_node(y);
        Ok(classes
            .iter()
            .zip(fields)
            .map(|(c, f)| from_x.min_over(&self.snap(c)) + f.values[yi])
            .fold(f64::INFINITY, f64::min))
    }

    /// Shortest control length between the nodes nearest to `x` and `y`.
    pub fn cc_distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = self.cc_distance_field(x);
        d[self.grid.nearest_node(y)]
    }

    pub fn cc_distance_field(&self, x: &[f64]) -> Vec<f64> {
        let f = self.base_forbidden();
        dijkstra(&self.graph, &[self.grid.nearest_node(x)], f.as_deref(), EdgeWeight::Length)
    }
}

/// One-shot wrappers around [`PotentialSolver`].
pub fn potential_from_set(
    s: &SRStructure,
    grid: &PeriodicGrid,
    spec: &ControlGraphSpec,
    source: &[Vec<f64>],
) -> Result<GridField<f64>, PotentialError> {
    PotentialSolver::new(s, grid.clone(), spec.clone())?.potential_from_set(source)
}

pub fn potential_matrix(
    s: &SRStructure,
    grid: &PeriodicGrid,
    spec: &ControlGraphSpec,
    classes: &[Vec<Vec<f64>>],
) -> Result<Vec<Vec<f64>>, PotentialError> {
    PotentialSolver::new(s, grid.clone(), spec.clone())?.potential_matrix(classes)
}

pub fn restricted_potential_matrix(
    s: &SRStructure,
    grid: &PeriodicGrid,
    spec: &ControlGraphSpec,
    classes: &[Vec<Vec<f64>>],
) -> Result<Vec<Vec<f64>>, PotentialError> {
    PotentialSolver::new(s, grid.clone(), spec.clone())?.restricted_potential_matrix(classes)
}

pub fn peierls_barrier(
    s: &SRStructure,
    grid: &PeriodicGrid,
    spec: &ControlGraphSpec,
    classes: &[Vec<Vec<f64>>],
    x: &[f64],
    y: &[f64],
) -> Result<f64, PotentialError> {
    PotentialSolver::new(s, grid.clone(), spec.clone())?.peierls_barrier(classes, x, y)
}

pub fn cc_distance(
    s: &SRStructure,
    grid: &PeriodicGrid,
    spec: &ControlGraphSpec,
    x: &[f64],
    y: &[f64],
) -> Result<f64, PotentialError> {
    Ok(PotentialSolver::new(s, grid.clone(), spec.clone())?.cc_distance(x, y))
}
