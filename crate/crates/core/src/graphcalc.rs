//! `{i}`-graphs and the quantities built from them.
//!
//! An `{i}`-graph on `m` indices has one arrow `k → l` leaving every `k ≠ i`
//! and no cycles, so it is a spanning in-tree rooted at `i`. Arrow maps are
//! 0-based here; `+∞` entries of a cost matrix mean the arrow is absent.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ENUMERATION: usize = 9;
pub const BRUTE_FORCE_LIMIT: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("graph size {0} outside 1..={MAX_ENUMERATION}")]
    SizeOutOfRange(usize),
    #[error("root {root} out of range for {m} indices")]
    RootOutOfRange { root: usize, m: usize },
    #[error("matrix is not square or is empty")]
    Shape,
    #[error("matrix entry ({0},{1}) is negative or NaN")]
    BadEntry(usize, usize),
    #[error("no stable class in the mask")]
    NoStable,
    #[error("W̃ of stable class {0} is infinite (restricted potentials disconnect it)")]
    Disconnected(usize),
    #[error("transition matrix is not row-stochastic at row {0}")]
    NotStochastic(usize),
    #[error("chain is reducible: no spanning in-tree reaches state {0}")]
    Reducible(usize),
    #[error("sandwich hypothesis violated at state {state}, block {block}: {value} not in [{lo}, {hi}]")]
    Hypothesis { state: usize, block: usize, value: f64, lo: f64, hi: f64 },
    #[error("stationary solve failed: {0}")]
    Solve(String),
    #[error("malformed matrix text: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IGraph {
    pub root: usize,
    /// `arrows[k]` is the head of the arrow leaving `k`; `None` at the root.
    pub arrows: Vec<Option<usize>>,
}

impl IGraph {
    pub fn size(&self) -> usize {
        self.arrows.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.arrows.iter().enumerate().filter_map(|(k, a)| a.map(|l| (k, l)))
    }

    /// Every non-root index has one arrow and following arrows reaches the root.
    pub fn is_valid(&self) -> bool {
        let m = self.size();
        if self.root >= m || self.arrows[self.root].is_some() {
            return false;
        }
        (0..m).all(|k| {
            let mut cur = k;
            for _ in 0..m {
                if cur == self.root {
                    return true;
                }
                match self.arrows[cur] {
                    Some(l) if l < m && l != cur => cur = l,
                    _ => return false,
                }
            }
            cur == self.root
        })
    }

    /// `Σ_{(k→l)} c[k][l]` accumulated in increasing `k`.
    pub fn weight(&self, c: &[Vec<f64>]) -> f64 {
        self.edges().map(|(k, l)| c[k][l]).sum()
    }

    pub fn product(&self, p: &[Vec<f64>]) -> f64 {
        self.edges().map(|(k, l)| p[k][l]).product()
    }
}

/// Odometer over arrow maps in lexicographic order, keeping the acyclic ones.
pub struct IGraphIter {
    m: usize,
    root: usize,
    /// Current head per index (root slot unused).
    heads: Vec<usize>,
    done: bool,
}

impl IGraphIter {
    fn first_head(k: usize) -> usize {
        usize::from(k == 0)
    }

    fn advance(&mut self) {
        for k in (0..self.m).rev() {
            if k == self.root {
                continue;
            }
            let mut next = self.heads[k] + 1;
            if next == k {
                next += 1;
            }
            if next < self.m {
                self.heads[k] = next;
                return;
            }
            self.heads[k] = Self::first_head(k);
        }
        self.done = true;
    }

    fn current(&self) -> IGraph {
        IGraph { root: self.root, arrows: (0..self.m).map(|k| (k != self.root).then_some(self.heads[k])).collect() }
    }
}

impl Iterator for IGraphIter {
    type Item = IGraph;

    fn next(&mut self) -> Option<IGraph> {
        while !self.done {
            let g = self.current();
            self.advance();
            if g.is_valid() {
                return Some(g);
            }
        }
        None
    }
}

pub fn enumerate_igraphs(m: usize, root: usize) -> Result<IGraphIter, GraphError> {
    if m == 0 || m > MAX_ENUMERATION {
        return Err(GraphError::SizeOutOfRange(m));
    }
    if root >= m {
        return Err(GraphError::RootOutOfRange { root, m });
    }
    Ok(IGraphIter { m, root, heads: (0..m).map(IGraphIter::first_head).collect(), done: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphResult {
    #[serde(with = "crate::extreal::vec")]
    pub w: Vec<f64>,
    #[serde(with = "crate::extreal::scalar")]
    pub w_min: f64,
    /// A minimizing graph per root; `None` when `W = +∞`.
    pub graphs: Vec<Option<IGraph>>,
    pub stable: Vec<bool>,
}

fn check_matrix(c: &[Vec<f64>]) -> Result<usize, GraphError> {
    let m = c.len();
    if m == 0 || c.iter().any(|r| r.len() != m) {
        return Err(GraphError::Shape);
    }
    for (i, row) in c.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v.is_nan() || v < 0.0 {
                return Err(GraphError::BadEntry(i, j));
            }
        }
    }
    Ok(m)
}

/// Minimal `{root}`-graph by exhaustive enumeration; ties keep the
/// lexicographically first graph.
pub fn min_igraph_brute(c: &[Vec<f64>], root: usize) -> Result<(f64, Option<IGraph>), GraphError> {
    let m = check_matrix(c)?;
    let mut best = (f64::INFINITY, None);
    for g in enumerate_igraphs(m, root)? {
        let w = g.weight(c);
        if w < best.0 {
            best = (w, Some(g));
        }
    }
    Ok(best)
}

/// Minimal `{root}`-graph as a minimum arborescence of the reversed digraph
/// (Chu–Liu/Edmonds). The returned weight is re-accumulated in canonical
/// order so it matches [`min_igraph_brute`] bit for bit on the same graph.
pub fn min_igraph_edmonds(c: &[Vec<f64>], root: usize) -> Result<(f64, Option<IGraph>), GraphError> {
    let m = check_matrix(c)?;
    if root >= m {
        return Err(GraphError::RootOutOfRange { root, m });
    }
    // reversed edge l → k stands for the arrow k → l
    let mut edges = Vec::new();
    for k in 0..m {
        for l in 0..m {
            if k != l && c[k][l].is_finite() {
                edges.push(Edge { from: l, to: k, w: c[k][l], orig: edges.len() });
            }
        }
    }
    let arrows_of: Vec<(usize, usize)> = edges.iter().map(|e| (e.to, e.from)).collect();
    match arborescence(m, root, &edges) {
        None => Ok((f64::INFINITY, None)),
        Some(chosen) => {
            let mut arrows = vec![None; m];
            for e in chosen {
                let (k, l) = arrows_of[e];
                arrows[k] = Some(l);
            }
            let g = IGraph { root, arrows };
            debug_assert!(g.is_valid());
            Ok((g.weight(c), Some(g)))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    from: usize,
    to: usize,
    w: f64,
    orig: usize,
}

/// Original indices of the edges of a minimum spanning arborescence rooted
/// at `root`, or `None` if some node cannot be reached.
fn arborescence(n: usize, root: usize, edges: &[Edge]) -> Option<Vec<usize>> {
    let mut best: Vec<Option<usize>> = vec![None; n];
    for (e, edge) in edges.iter().enumerate() {
        if edge.to == root || edge.from == edge.to {
            continue;
        }
        match best[edge.to] {
            Some(b) if edges[b].w <= edge.w => {}
            _ => best[edge.to] = Some(e),
        }
    }
    if (0..n).any(|v| v != root && best[v].is_none()) {
        return None;
    }

    // look for a cycle among the chosen edges
    let mut color = vec![0u8; n];
    let mut cycle: Option<Vec<usize>> = None;
    'outer: for start in 0..n {
        let mut path = Vec::new();
        let mut v = start;
        while color[v] == 0 && v != root {
            color[v] = 1;
            path.push(v);
            v = edges[best[v].unwrap()].from;
        }
        if v != root && color[v] == 1 {
            let pos = path.iter().position(|&u| u == v).unwrap();
            cycle = Some(path[pos..].to_vec());
            break 'outer;
        }
        for u in path {
            color[u] = 2;
        }
    }
    let Some(cycle) = cycle else {
        return Some((0..n).filter(|&v| v != root).map(|v| edges[best[v].unwrap()].orig).collect());
    };

    let mut in_cycle = vec![false; n];
    for &v in &cycle {
        in_cycle[v] = true;
    }
    let c = n - cycle.len();
    let mut map = vec![usize::MAX; n];
    let mut next = 0;
    for v in 0..n {
        if !in_cycle[v] {
            map[v] = next;
            next += 1;
        }
    }
    for &v in &cycle {
        map[v] = c;
    }
    let mut sub = Vec::new();
    // sub edge position → position in `edges`
    let mut back = Vec::new();
    for (e, edge) in edges.iter().enumerate() {
        let (u, v) = (map[edge.from], map[edge.to]);
        if u == v {
            continue;
        }
        let w = if in_cycle[edge.to] { edge.w - edges[best[edge.to].unwrap()].w } else { edge.w };
        sub.push(Edge { from: u, to: v, w, orig: sub.len() });
        back.push(e);
    }
    let chosen = arborescence(c + 1, map[root], &sub)?;
    let mut result = Vec::with_capacity(n - 1);
    let mut entered = usize::MAX;
    for s in chosen {
        let e = back[s];
        if in_cycle[edges[e].to] {
            entered = edges[e].to;
        }
        result.push(edges[e].orig);
    }
    for &v in &cycle {
        if v != entered {
            result.push(edges[best[v].unwrap()].orig);
        }
    }
    Some(result)
}

/// `W(K_i) = min_{g∈G{i}} Σ c(k,l)` for every `i` and `W_min` over stable classes.
pub fn compute_w(c: &[Vec<f64>], stable: &[bool]) -> Result<GraphResult, GraphError> {
    let m = check_matrix(c)?;
    if stable.len() != m {
        return Err(GraphError::Shape);
    }
    if !stable.iter().any(|&s| s) {
        return Err(GraphError::NoStable);
    }
    let per_root: Vec<(f64, Option<IGraph>)> = (0..m)
        .into_par_iter()
        .map(|i| if m <= BRUTE_FORCE_LIMIT { min_igraph_brute(c, i) } else { min_igraph_edmonds(c, i) })
        .collect::<Result<_, _>>()?;
    let (w, graphs): (Vec<f64>, Vec<Option<IGraph>>) = per_root.into_iter().unzip();
    let w_min = w.iter().zip(stable).filter(|(_, &s)| s).map(|(&v, _)| v).fold(f64::INFINITY, f64::min);
    Ok(GraphResult { w, w_min, graphs, stable: stable.to_vec() })
}

/// The same computation over restricted potentials; an infinite value at a
/// stable class is an error.
pub fn w_tilde(c_tilde: &[Vec<f64>], stable: &[bool]) -> Result<GraphResult, GraphError> {
    let r = compute_w(c_tilde, stable)?;
    if let Some(i) = (0..r.w.len()).find(|&i| stable[i] && r.w[i].is_infinite()) {
        return Err(GraphError::Disconnected(i));
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WPropertiesReport {
    /// `W` of every stable class equals `W` computed on the stable submatrix.
    pub stable_submatrix: bool,
    /// `W(K_j) = min_{stable i} W(K_i) + Φ(K_i,K_j)` for all `j`.
    pub stable_representation: bool,
    /// `W(K_j) ≤ W(K_i) + Φ(K_i,K_j)` for all `i, j`.
    pub domination: bool,
    pub max_violation: f64,
    pub violations: Vec<String>,
}

impl WPropertiesReport {
    pub fn all_pass(&self) -> bool {
        self.stable_submatrix && self.stable_representation && self.domination
    }
}

pub fn w_properties_check(
    c: &[Vec<f64>],
    stable: &[bool],
    result: &GraphResult,
    tol: f64,
) -> Result<WPropertiesReport, GraphError> {
    let m = check_matrix(c)?;
    let w = &result.w;
    let mut rep = WPropertiesReport {
        stable_submatrix: true,
        stable_representation: true,
        domination: true,
        max_violation: 0.0,
        violations: Vec::new(),
    };
    let idx: Vec<usize> = (0..m).filter(|&i| stable[i]).collect();
    let sub: Vec<Vec<f64>> = idx.iter().map(|&a| idx.iter().map(|&b| c[a][b]).collect()).collect();
    let sub_w = compute_w(&sub, &vec![true; idx.len()])?;
    for (pos, &i) in idx.iter().enumerate() {
        let gap = (sub_w.w[pos] - w[i]).abs();
        if gap > tol || (sub_w.w[pos].is_infinite() != w[i].is_infinite()) {
            rep.stable_submatrix = false;
            rep.max_violation = rep.max_violation.max(gap);
            rep.violations.push(format!("stable submatrix W({i}) = {} vs {}", sub_w.w[pos], w[i]));
        }
    }
    for j in 0..m {
        let rhs = idx.iter().map(|&i| w[i] + c[i][j]).fold(f64::INFINITY, f64::min);
        let gap = (rhs - w[j]).abs();
        if gap > tol {
            rep.stable_representation = false;
            rep.max_violation = rep.max_violation.max(gap);
            rep.violations.push(format!("W({j}) = {} but stable minimum gives {rhs}", w[j]));
        }
        for i in 0..m {
            let excess = w[j] - (w[i] + c[i][j]);
            if excess > tol {
                rep.domination = false;
                rep.max_violation = rep.max_violation.max(excess);
                rep.violations.push(format!("W({j}) exceeds W({i}) + Φ({i},{j}) by {excess}"));
            }
        }
    }
    Ok(rep)
}

/// Shortest-path closure, so that `c[i][j] ≤ c[i][k] + c[k][j]` holds.
pub fn metric_closure(c: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = c.len();
    let mut d = c.to_vec();
    for k in 0..m {
        for i in 0..m {
            for j in 0..m {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

fn check_stochastic(p: &[Vec<f64>]) -> Result<usize, GraphError> {
    let n = check_matrix(p)?;
    for (i, row) in p.iter().enumerate() {
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 || row.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NotStochastic(i));
        }
    }
    Ok(n)
}

/// `q_i = Σ_{g∈G{i}} Π P_{kl}` (off-diagonal tree weights), unnormalized.
pub fn tree_weights(p: &[Vec<f64>]) -> Result<Vec<f64>, GraphError> {
    let n = check_matrix(p)?;
    (0..n).map(|i| Ok(enumerate_igraphs(n, i)?.map(|g| g.product(p)).sum())).collect()
}

/// Stationary distribution by the Markov-chain tree formula.
pub fn stationary_by_graphs(p: &[Vec<f64>]) -> Result<Vec<f64>, GraphError> {
    let n = check_stochastic(p)?;
    if n > 8 {
        return Err(GraphError::SizeOutOfRange(n));
    }
    let q = tree_weights(p)?;
    if let Some(i) = q.iter().position(|&v| v <= 0.0) {
        return Err(GraphError::Reducible(i));
    }
    let z: f64 = q.iter().sum();
    Ok(q.iter().map(|v| v / z).collect())
}

/// Stationary distribution from `(Pᵗ − I)π = 0`, `Σπ = 1` by LU with one
/// balance equation replaced by the normalization.
pub fn stationary_direct(p: &[Vec<f64>]) -> Result<Vec<f64>, GraphError> {
    let n = check_stochastic(p)?;
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = p[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    let mut rhs = DVector::<f64>::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    rhs[n - 1] = 1.0;
    let sol = a.lu().solve(&rhs).ok_or_else(|| GraphError::Solve("singular system (reducible chain?)".into()))?;
    Ok(sol.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedBoundsReport {
    /// Block masses `ν(X_i)` of the exact stationary law of the kernel.
    pub nu: Vec<f64>,
    /// Tree-formula stationary law of the bounding matrix.
    pub p: Vec<f64>,
    pub a: f64,
    /// Largest `max(ν_i/p_i, p_i/ν_i)`.
    pub worst_ratio: f64,
    /// `a⁻¹p_i ≤ ν(X_i) ≤ a p_i` for all `i`.
    pub holds_with_a: bool,
    /// The same with the factor `a^{2(m−1)}`, which the tree formula guarantees.
    pub holds_with_tree_factor: bool,
}

impl AggregatedBoundsReport {
    pub fn holds(&self) -> bool {
        self.holds_with_tree_factor
    }
}

/// Compares the block masses of a finite kernel's stationary law with the
/// stationary law of a bounding block matrix. The sandwich hypothesis
/// `a⁻¹P_{ij} ≤ K(x,X_j) ≤ a P_{ij}` is re-verified at every state first.
pub fn aggregated_bounds_check(
    kernel: &[Vec<f64>],
    partition: &[usize],
    p_bounds: &[Vec<f64>],
    a: f64,
) -> Result<AggregatedBoundsReport, GraphError> {
    let n = check_stochastic(kernel)?;
    let m = check_stochastic(p_bounds)?;
    if partition.len() != n || partition.iter().any(|&b| b >= m) || !(a >= 1.0) {
        return Err(GraphError::Shape);
    }
    let slack = 1e-12;
    for x in 0..n {
        let i = partition[x];
        let mut to_block = vec![0.0; m];
        for y in 0..n {
            to_block[partition[y]] += kernel[x][y];
        }
        for (j, &value) in to_block.iter().enumerate() {
            let (lo, hi) = (p_bounds[i][j] / a, p_bounds[i][j] * a);
            if value < lo - slack || value > hi + slack {
                return Err(GraphError::Hypothesis { state: x, block: j, value, lo, hi });
            }
        }
    }
    let stat = stationary_direct(kernel)?;
    let mut nu = vec![0.0; m];
    for x in 0..n {
        nu[partition[x]] += stat[x];
    }
    let p = stationary_by_graphs(p_bounds)?;
    let worst_ratio = nu.iter().zip(&p).map(|(&v, &q)| (v / q).max(q / v)).fold(1.0, f64::max);
    let tree_factor = a.powi(2 * (m as i32 - 1));
    let rel = 1e-10;
    Ok(AggregatedBoundsReport {
        holds_with_a: worst_ratio <= a * (1.0 + rel),
        holds_with_tree_factor: worst_ratio <= tree_factor * (1.0 + rel),
        nu,
        p,
        a,
        worst_ratio,
    })
}

/// Matrix as CSV; infinite entries are written as `inf`.
pub fn matrix_to_csv(c: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in c {
        let cells: Vec<String> = row
            .iter()
            .map(|v| {
                if v.is_infinite() {
                    if *v > 0.0 {
                        "inf".into()
                    } else {
                        "-inf".into()
                    }
                } else {
                    format!("{v}")
                }
            })
            .collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<Vec<Vec<f64>>, GraphError> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| GraphError::Parse(format!("{c:?}: {e}"))))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    check_matrix(&rows)?;
    Ok(rows)
}
