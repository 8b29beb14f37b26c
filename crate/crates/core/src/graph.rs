//! Bipartite successive-behavior graph and the parameter-free jumping graph
//! convolution over it.
//!
//! Node layout: products occupy `0..n_products`, training sequences occupy
//! `n_products..n_products + n_sequences`. The propagation operator is
//! `F = omega * I + (1 - omega) * D^-1 A`, with isolated nodes copying their
//! own row (their row of `F` is the identity row).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use sha2::{Digest, Sha256};

use crate::corpus::SuccessiveSequence;
use crate::error::{Error, Result};
use crate::matrix::{axpy, Matrix};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorGraph {
    n_products: usize,
    n_sequences: usize,
    /// CSR offsets over all nodes.
    offsets: Vec<usize>,
    /// CSR neighbor lists; each list sorted ascending.
    neighbors: Vec<u32>,
}

impl BehaviorGraph {
    /// Build from `(product, sequence)` pairs with local sequence indices.
    /// Duplicate pairs collapse to a single unweighted edge.
    pub fn from_edges(
        n_products: usize,
        n_sequences: usize,
        edges: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let n = n_products + n_sequences;
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (p, s) in edges {
            if p as usize >= n_products || s as usize >= n_sequences {
                return Err(Error::Shape(format!(
                    "edge ({p}, {s}) out of range for {n_products} products, {n_sequences} sequences"
                )));
            }
            let sn = (n_products + s as usize) as u32;
            adj[p as usize].push(sn);
            adj[sn as usize].push(p);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut list in adj {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(&list);
            offsets.push(neighbors.len());
        }
        Ok(Self {
            n_products,
            n_sequences,
            offsets,
            neighbors,
        })
    }

    pub fn n_products(&self) -> usize {
        self.n_products
    }

    pub fn n_sequences(&self) -> usize {
        self.n_sequences
    }

    pub fn n_nodes(&self) -> usize {
        self.n_products + self.n_sequences
    }

    /// Number of undirected edges.
    pub fn n_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    #[inline]
    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    #[inline]
    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n_nodes()).map(|i| self.degree(i)).collect()
    }

    pub fn is_product(&self, node: usize) -> bool {
        node < self.n_products
    }

    /// Edges as `(product, local sequence index)`, product-major ascending.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.n_edges());
        for p in 0..self.n_products {
            for &s in self.neighbors(p) {
                out.push((p as u32, s - self.n_products as u32));
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_nodes();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &u in self.neighbors(v) {
                let u = u as usize;
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == n
    }

    /// Text edge list: header `n_products n_sequences n_edges`, then one
    /// `product_index \t sequence_index` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {}", self.n_products, self.n_sequences, self.n_edges());
        for (p, q) in self.edges() {
            let _ = writeln!(s, "{p}\t{q}");
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty graph file".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("bad graph header {header:?}: {e}")))?;
        if nums.len() != 3 {
            return Err(Error::Parse(format!("bad graph header {header:?}")));
        }
        let mut edges = Vec::with_capacity(nums[2]);
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split('\t');
            let parse = |t: Option<&str>| -> Result<u32> {
                t.and_then(|x| x.trim().parse().ok())
                    .ok_or_else(|| Error::Parse(format!("graph line {}: {line:?}", i + 2)))
            };
            let p = parse(it.next())?;
            let q = parse(it.next())?;
            edges.push((p, q));
        }
        let g = Self::from_edges(nums[0], nums[1], edges)?;
        if g.n_edges() != nums[2] {
            return Err(Error::Parse(format!(
                "graph header declares {} edges, file has {}",
                nums[2],
                g.n_edges()
            )));
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_edge_list(&text)
    }

    /// Short content hash used to tag enriched embeddings and checkpoints.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_edge_list().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// One node per training sequence (in the given order); an edge joins product
/// `i` and sequence `S` iff `i` occurs in `S`.
pub fn build_graph(train_sequences: &[SuccessiveSequence], n_products: usize) -> Result<BehaviorGraph> {
    let edges = train_sequences
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| seq.interactions.iter().map(move |it| (it.product, s as u32)));
    BehaviorGraph::from_edges(n_products, train_sequences.len(), edges)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig {
    /// Self-loop weight.
    pub omega: f64,
    /// Jumping (initial-residual) weight.
    pub beta: f64,
    pub layers: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            omega: 0.1,
            beta: 0.1,
            layers: 4,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::Config(format!("omega={} not in [0,1]", self.omega)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta={} not in [0,1]", self.beta)));
        }
        Ok(())
    }
}

fn check_input(graph: &BehaviorGraph, h: &Matrix) -> Result<()> {
    if h.rows() != graph.n_nodes() {
        return Err(Error::Shape(format!(
            "feature matrix has {} rows, graph has {} nodes",
            h.rows(),
            graph.n_nodes()
        )));
    }
    Ok(())
}

/// `out = F h` without allocation checks.
fn apply_f(graph: &BehaviorGraph, h: &Matrix, omega: f64, out: &mut Matrix) {
    let mix = 1.0 - omega;
    for i in 0..graph.n_nodes() {
        let nb = graph.neighbors(i);
        let row = out.row_mut(i);
        let own = h.row(i);
        if nb.is_empty() {
            row.copy_from_slice(own);
            continue;
        }
        let w = mix / nb.len() as f64;
        for (r, o) in row.iter_mut().zip(own) {
            *r = omega * o;
        }
        for &j in nb {
            axpy(w, h.row(j as usize), row);
        }
    }
}

/// `out = F^T g`. Used to push gradients back through propagation.
fn apply_f_transpose(graph: &BehaviorGraph, g: &Matrix, omega: f64, out: &mut Matrix) {
    let mix = 1.0 - omega;
    for j in 0..graph.n_nodes() {
        let nb = graph.neighbors(j);
        let row = out.row_mut(j);
        let own = g.row(j);
        if nb.is_empty() {
            row.copy_from_slice(own);
            continue;
        }
        for (r, o) in row.iter_mut().zip(own) {
            *r = omega * o;
        }
        // F[i][j] = mix / deg(i) for each neighbor i of j (neighbors are never isolated).
        for &i in nb {
            let i = i as usize;
            axpy(mix / graph.degree(i) as f64, g.row(i), row);
        }
    }
}

/// `(omega I + (1 - omega) D^-1 A) h`
pub fn propagate_once(graph: &BehaviorGraph, h: &Matrix, omega: f64) -> Result<Matrix> {
    check_input(graph, h)?;
    let mut out = Matrix::zeros(h.rows(), h.cols());
    apply_f(graph, h, omega, &mut out);
    Ok(out)
}

/// `F^T g`
pub fn propagate_transpose(graph: &BehaviorGraph, g: &Matrix, omega: f64) -> Result<Matrix> {
    check_input(graph, g)?;
    let mut out = Matrix::zeros(g.rows(), g.cols());
    apply_f_transpose(graph, g, omega, &mut out);
    Ok(out)
}

/// Node representations after `config.layers` jumping convolution layers.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedEmbeddings {
    pub matrix: Matrix,
    pub config: PropagationConfig,
    pub graph_fingerprint: String,
}

impl EnrichedEmbeddings {
    pub fn n_products(&self) -> usize {
        self.matrix.rows()
    }

    pub fn product_row(&self, product: usize) -> &[f64] {
        self.matrix.row(product)
    }
}

fn jumping_iterate(graph: &BehaviorGraph, h0: &Matrix, config: &PropagationConfig) -> Matrix {
    let mut current = h0.clone();
    let mut mixed = Matrix::zeros(h0.rows(), h0.cols());
    let beta = config.beta;
    for _ in 0..config.layers {
        for ((m, a), b) in mixed
            .as_mut_slice()
            .iter_mut()
            .zip(h0.as_slice())
            .zip(current.as_slice())
        {
            *m = beta * a + (1.0 - beta) * b;
        }
        apply_f(graph, &mixed, config.omega, &mut current);
    }
    current
}

/// `H~(l) = F (beta H0 + (1 - beta) H~(l-1))` for `l = 1..L`, `H~(0) = H0`.
pub fn jumping_propagate(
    graph: &BehaviorGraph,
    h0: &Matrix,
    config: &PropagationConfig,
) -> Result<EnrichedEmbeddings> {
    config.validate()?;
    check_input(graph, h0)?;
    if !h0.is_finite() {
        return Err(Error::NonFinite("initial embeddings contain NaN/inf".into()));
    }
    Ok(EnrichedEmbeddings {
        matrix: jumping_iterate(graph, h0, config),
        config: *config,
        graph_fingerprint: graph.fingerprint(),
    })
}

/// `jumping_propagate` without the fingerprint, for the training hot path.
pub(crate) fn jumping_matrix(graph: &BehaviorGraph, h0: &Matrix, config: &PropagationConfig) -> Result<Matrix> {
    config.validate()?;
    check_input(graph, h0)?;
    if !h0.is_finite() {
        return Err(Error::NonFinite("initial embeddings contain NaN/inf".into()));
    }
    Ok(jumping_iterate(graph, h0, config))
}

/// Pull `grad` (dLoss / dH~(L)) back to dLoss / dH0 through the jumping
/// recursion. The map is linear, so this is the exact adjoint.
pub fn jumping_backward(
    graph: &BehaviorGraph,
    grad: &Matrix,
    config: &PropagationConfig,
) -> Result<Matrix> {
    check_input(graph, grad)?;
    let beta = config.beta;
    let mut upstream = grad.clone();
    let mut acc = Matrix::zeros(grad.rows(), grad.cols());
    let mut through = Matrix::zeros(grad.rows(), grad.cols());
    for _ in 0..config.layers {
        apply_f_transpose(graph, &upstream, config.omega, &mut through);
        acc.add_scaled(beta, &through);
        through.scale(1.0 - beta);
        std::mem::swap(&mut upstream, &mut through);
    }
    acc.add_scaled(1.0, &upstream);
    Ok(acc)
}

/// Closed form `((1-b)^L F^L + b * sum_{k=1..L} (1-b)^(k-1) F^k) H0`,
/// accumulating `F^k H0` by repeated sparse products.
pub fn closed_form_propagate(
    graph: &BehaviorGraph,
    h0: &Matrix,
    config: &PropagationConfig,
) -> Result<Matrix> {
    config.validate()?;
    check_input(graph, h0)?;
    if !h0.is_finite() {
        return Err(Error::NonFinite("initial embeddings contain NaN/inf".into()));
    }
    let l = config.layers;
    if l == 0 {
        return Ok(h0.clone());
    }
    let beta = config.beta;
    let mut power = h0.clone();
    let mut next = Matrix::zeros(h0.rows(), h0.cols());
    let mut out = Matrix::zeros(h0.rows(), h0.cols());
    for k in 1..=l {
        apply_f(graph, &power, config.omega, &mut next);
        std::mem::swap(&mut power, &mut next);
        out.add_scaled(beta * (1.0 - beta).powi(k as i32 - 1), &power);
    }
    out.add_scaled((1.0 - beta).powi(l as i32), &power);
    Ok(out)
}

/// `sum_k sum_{i,j} a_ij (H_ik - H_jk)^2` over ordered pairs, so every
/// undirected edge counts twice.
pub fn diversity(graph: &BehaviorGraph, h: &Matrix) -> f64 {
    let mut total = 0.0;
    for p in 0..graph.n_products() {
        let hp = h.row(p);
        for &s in graph.neighbors(p) {
            let hs = h.row(s as usize);
            total += hp
                .iter()
                .zip(hs)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    2.0 * total
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TheoremStatus {
    HypothesesMet,
    HypothesesUnmet(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerDiversity {
    pub layer: usize,
    pub with_jump: f64,
    pub plain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    pub status: TheoremStatus,
    pub omega: f64,
    pub beta: f64,
    pub initial: f64,
    pub layers: Vec<LayerDiversity>,
    /// Layers where the jumping variant is not strictly more diverse.
    pub violations: Vec<usize>,
}

impl TheoremReport {
    pub fn tail_with_jump(&self) -> f64 {
        self.layers.last().map_or(self.initial, |l| l.with_jump)
    }

    /// `Omega(H(last)) / Omega(H(1))` for plain stacking.
    pub fn plain_decay(&self) -> f64 {
        match (self.layers.first(), self.layers.last()) {
            (Some(a), Some(b)) if a.plain > 0.0 => b.plain / a.plain,
            _ => 1.0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,omega,beta,omega_jump_diversity,omega_plain_diversity\n");
        let _ = writeln!(s, "0,{},{},{:e},{:e}", self.omega, self.beta, self.initial, self.initial);
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{:e},{:e}",
                l.layer, self.omega, self.beta, l.with_jump, l.plain
            );
        }
        s
    }
}

/// Per-layer diversity with and without jumping connections for
/// `l = 1..=max_layers`. Out-of-range hypotheses are reported, not rejected.
pub fn verify_theorem1(
    graph: &BehaviorGraph,
    h0: &Matrix,
    omega: f64,
    beta: f64,
    max_layers: usize,
) -> Result<TheoremReport> {
    check_input(graph, h0)?;
    let initial = diversity(graph, h0);
    let mut unmet = Vec::new();
    if !(initial > 0.0) {
        unmet.push(format!("initial diversity {initial} is not > 0"));
    }
    if !(omega > 0.5 && omega < 1.0) {
        unmet.push(format!("omega={omega} not in (0.5, 1)"));
    }
    if !(beta > 0.0 && beta < 1.0) {
        unmet.push(format!("beta={beta} not in (0, 1)"));
    }
    let status = if unmet.is_empty() {
        TheoremStatus::HypothesesMet
    } else {
        TheoremStatus::HypothesesUnmet(format!("theorem hypotheses unmet: {}", unmet.join("; ")))
    };

    let n = h0.rows();
    let d = h0.cols();
    let mut plain = h0.clone();
    let mut jump = h0.clone();
    let mut scratch = Matrix::zeros(n, d);
    let mut mixed = Matrix::zeros(n, d);
    let mut layers = Vec::with_capacity(max_layers);
    let mut violations = Vec::new();
    for l in 1..=max_layers {
        apply_f(graph, &plain, omega, &mut scratch);
        std::mem::swap(&mut plain, &mut scratch);
        for ((m, a), b) in mixed
            .as_mut_slice()
            .iter_mut()
            .zip(h0.as_slice())
            .zip(jump.as_slice())
        {
            *m = beta * a + (1.0 - beta) * b;
        }
        apply_f(graph, &mixed, omega, &mut jump);
        let entry = LayerDiversity {
            layer: l,
            with_jump: diversity(graph, &jump),
            plain: diversity(graph, &plain),
        };
        if !(entry.with_jump > entry.plain) {
            violations.push(l);
        }
        layers.push(entry);
    }
    Ok(TheoremReport {
        status,
        omega,
        beta,
        initial,
        layers,
        violations,
    })
}

/// `g_l(lambda) = (1 - (1 - omega) lambda)^l`
pub fn plain_coefficient(lambda: f64, omega: f64, l: usize) -> f64 {
    (1.0 - (1.0 - omega) * lambda).powi(l as i32)
}

/// `f_l(lambda) = (1-b)^l g_l + b * sum_{k=1..l} (1-b)^(k-1) g_k`
pub fn jump_coefficient(lambda: f64, omega: f64, beta: f64, l: usize) -> f64 {
    let mut sum = 0.0;
    for k in 1..=l {
        sum += (1.0 - beta).powi(k as i32 - 1) * plain_coefficient(lambda, omega, k);
    }
    (1.0 - beta).powi(l as i32) * plain_coefficient(lambda, omega, l) + beta * sum
}

/// `lim_{l->inf} f_l(lambda) = b (1 - (1-w) lambda) / (1 - (1-b)(1 - (1-w) lambda))`
pub fn jump_limit_coefficient(lambda: f64, omega: f64, beta: f64) -> f64 {
    let m = 1.0 - (1.0 - omega) * lambda;
    beta * m / (1.0 - (1.0 - beta) * m)
}

pub const DEFAULT_SPECTRAL_CAP: usize = 2000;

#[derive(Debug, Clone)]
pub struct SpectralDiagnostics {
    /// Eigenvalues of `I - D^-1 A`, ascending.
    pub eigenvalues: Vec<f64>,
    /// `lim f_l(lambda)` per eigenvalue for the requested omega/beta.
    pub limit_coefficients: Vec<f64>,
    pub omega: f64,
    pub beta: f64,
    /// Orthonormal eigenvectors of the symmetric normalized Laplacian,
    /// column `i` paired with `eigenvalues[i]`.
    eigenvectors: DMatrix<f64>,
    sqrt_degrees: Vec<f64>,
}

impl SpectralDiagnostics {
    /// Analytic `lim_{l->inf} Omega(H~(l))` for initial features `h0`:
    /// `2 * sum_k sum_i f_inf(lambda_i)^2 lambda_i c_ik^2`, with `c = V^T D^1/2 h0`.
    pub fn jump_diversity_limit(&self, h0: &Matrix) -> f64 {
        self.weighted_sum(h0, |i| {
            let f = self.limit_coefficients[i];
            f * f * self.eigenvalues[i]
        })
    }

    /// `Omega(H(l))` evaluated through the spectrum (plain stacking).
    pub fn plain_diversity_at(&self, h0: &Matrix, l: usize) -> f64 {
        self.weighted_sum(h0, |i| {
            let g = plain_coefficient(self.eigenvalues[i], self.omega, l);
            g * g * self.eigenvalues[i]
        })
    }

    /// `Omega(H~(l))` evaluated through the spectrum (jumping).
    pub fn jump_diversity_at(&self, h0: &Matrix, l: usize) -> f64 {
        self.weighted_sum(h0, |i| {
            let f = jump_coefficient(self.eigenvalues[i], self.omega, self.beta, l);
            f * f * self.eigenvalues[i]
        })
    }

    fn weighted_sum(&self, h0: &Matrix, weight: impl Fn(usize) -> f64) -> f64 {
        let n = self.eigenvalues.len();
        let weights: Vec<f64> = (0..n).map(&weight).collect();
        let mut total = 0.0;
        for k in 0..h0.cols() {
            let scaled: Vec<f64> = (0..n).map(|r| self.sqrt_degrees[r] * h0.get(r, k)).collect();
            for (i, w) in weights.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                let c: f64 = self
                    .eigenvectors
                    .column(i)
                    .iter()
                    .zip(&scaled)
                    .map(|(v, s)| v * s)
                    .sum();
                total += w * c * c;
            }
        }
        2.0 * total
    }
}

/// Dense spectrum of the random-walk Laplacian. Computed through the
/// similar symmetric matrix `I - D^-1/2 A D^-1/2`; isolated nodes get a zero row.
pub fn spectral_diagnostics(
    graph: &BehaviorGraph,
    omega: f64,
    beta: f64,
    cap: usize,
) -> Result<SpectralDiagnostics> {
    let n = graph.n_nodes();
    if n > cap {
        return Err(Error::GraphTooLarge { nodes: n, cap });
    }
    let sqrt_degrees: Vec<f64> = (0..n).map(|i| (graph.degree(i) as f64).sqrt()).collect();
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        if graph.degree(i) == 0 {
            continue;
        }
        lap[(i, i)] = 1.0;
        for &j in graph.neighbors(i) {
            let j = j as usize;
            lap[(i, j)] = -1.0 / (sqrt_degrees[i] * sqrt_degrees[j]);
        }
    }
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut eigenvectors = DMatrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    let limit_coefficients = eigenvalues
        .iter()
        .map(|&l| jump_limit_coefficient(l, omega, beta))
        .collect();
    Ok(SpectralDiagnostics {
        eigenvalues,
        limit_coefficients,
        omega,
        beta,
        eigenvectors,
        sqrt_degrees,
    })
}
