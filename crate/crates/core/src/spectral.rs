//! Linear consensus-error analysis: the block gossip operator, the
//! disagreement projector, the contraction matrix `M` and its spectral norm.
//!
//! Stacked vectors are node-major (`e[i*d + p]` is coordinate `p` of node
//! `i`); the block gossip operator acts on parameter-major vectors
//! (`v[p*n + i]`), and commutation matrices translate between the two.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fragmentation::{FragmentMap, FragmentScheme};
use crate::linalg::{
    self, commutation_matrix, kronecker, largest_eigenvalue_gram, largest_eigenvalue_op,
    DenseMatrix, DEFAULT_EIGEN_TOL,
};
use crate::metrics::{fmt_real, write_comment};
use crate::rng::{Purpose, Substreams};
use crate::topology::{sample_fragment_matrices, GossipMatrix, TopologyMode};

/// Tolerance for the `P e0 = e0` precondition of the recursion.
pub const SUBSPACE_TOL: f64 = 1e-10;

/// `Σ_k Π_k ⊗ W_k`: parameter `p`'s `n x n` diagonal block is `W_{χ(p)}`.
pub fn block_gossip(ws: &[GossipMatrix], fm: &FragmentMap) -> Result<DenseMatrix> {
    check_matrices(ws, fm)?;
    let n = ws[0].nodes();
    let d = fm.dim();
    let mut total = DenseMatrix::zeros(n * d, n * d);
    for (k, w) in ws.iter().enumerate() {
        let term = kronecker(&fm.projector(k)?, w.weights())?;
        total = total.add(&term)?;
    }
    Ok(total)
}

/// `(I_n - 11ᵀ/n) ⊗ I_d`.
pub fn disagreement_projector(n: usize, d: usize) -> Result<DenseMatrix> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "projector needs n, d >= 1 (got n={n}, d={d})"
        )));
    }
    let centering = DenseMatrix::identity(n).sub(&DenseMatrix::new(n, n, vec![1.0 / n as f64; n * n])?)?;
    kronecker(&centering, &DenseMatrix::identity(d))
}

/// `I_d - 2ηA`, the map applied by one gradient step on `(x-x*)ᵀA(x-x*)`.
pub fn gradient_factor(a: &DenseMatrix, eta: f64) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("{}x{} curvature matrix", a.rows(), a.cols())));
    }
    DenseMatrix::identity(a.rows()).sub(&a.scale(2.0 * eta))
}

/// `M = P K_{n,d} 𝐖 K_{d,n} (I_n ⊗ (I_d - 2ηA))`, multiplied right to left.
pub fn build_m(ws: &[GossipMatrix], fm: &FragmentMap, a: &DenseMatrix, eta: f64) -> Result<DenseMatrix> {
    check_matrices(ws, fm)?;
    if a.rows() != fm.dim() || !a.is_square() {
        return Err(Error::Dimension(format!(
            "{}x{} curvature matrix for dimension {}",
            a.rows(),
            a.cols(),
            fm.dim()
        )));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("step size must be > 0, got {eta}")));
    }
    let n = ws[0].nodes();
    let d = fm.dim();
    let grad = kronecker(&DenseMatrix::identity(n), &gradient_factor(a, eta)?)?;
    let to_param = commutation_matrix(d, n)?;
    let to_node = commutation_matrix(n, d)?;
    let m = to_param.matmul(&grad)?;
    let m = block_gossip(ws, fm)?.matmul(&m)?;
    let m = to_node.matmul(&m)?;
    disagreement_projector(n, d)?.matmul(&m)
}

/// `λ_max(MᵀM)`, the squared spectral norm of `M`.
pub fn contraction_factor(m: &DenseMatrix, tol: f64) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{}x{} contraction matrix", m.rows(), m.cols())));
    }
    largest_eigenvalue_gram(m, tol).map(|v| v.max(0.0))
}

/// `M` applied without materializing it: gradient factor per node,
/// fragment-wise gossip, then removal of the network mean.
pub struct ContractionOp<'a> {
    ws: &'a [GossipMatrix],
    fm: &'a FragmentMap,
    g: &'a DenseMatrix,
}

impl<'a> ContractionOp<'a> {
    pub fn new(ws: &'a [GossipMatrix], fm: &'a FragmentMap, g: &'a DenseMatrix) -> Result<Self> {
        check_matrices(ws, fm)?;
        if g.rows() != fm.dim() || !g.is_square() {
            return Err(Error::Dimension("gradient factor does not match the fragment map".into()));
        }
        Ok(Self { ws, fm, g })
    }

    fn nodes(&self) -> usize {
        self.ws[0].nodes()
    }

    pub fn dim(&self) -> usize {
        self.nodes() * self.fm.dim()
    }

    /// `out = M e`.
    pub fn apply(&self, e: &[f64], out: &mut [f64]) {
        let (n, d) = (self.nodes(), self.fm.dim());
        let mut half = vec![0.0; n * d];
        for i in 0..n {
            self.g.matvec_into(&e[i * d..(i + 1) * d], &mut half[i * d..(i + 1) * d]);
        }
        out.fill(0.0);
        for (k, w) in self.ws.iter().enumerate() {
            let coords = self.fm.indices(k).expect("checked fragment count");
            for i in 0..n {
                for &(j, weight) in w.row_entries(i) {
                    for &p in coords {
                        out[i * d + p] += weight * half[j * d + p];
                    }
                }
            }
        }
        center(out, n, d);
    }

    /// `out = Mᵀ e`.
    pub fn apply_transpose(&self, e: &[f64], out: &mut [f64]) {
        let (n, d) = (self.nodes(), self.fm.dim());
        let mut centered = e.to_vec();
        center(&mut centered, n, d);
        let mut mixed = vec![0.0; n * d];
        for (k, w) in self.ws.iter().enumerate() {
            let coords = self.fm.indices(k).expect("checked fragment count");
            for i in 0..n {
                for &(j, weight) in w.row_entries(i) {
                    for &p in coords {
                        mixed[j * d + p] += weight * centered[i * d + p];
                    }
                }
            }
        }
        // The gradient factor is symmetric.
        for i in 0..n {
            self.g.matvec_into(&mixed[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
        }
    }

    /// `λ_max(MᵀM)` through products with `M` and `Mᵀ`.
    pub fn contraction_factor(&self, tol: f64) -> Result<f64> {
        let mut tmp = vec![0.0; self.dim()];
        largest_eigenvalue_op(self.dim(), tol, |x, out| {
            self.apply(x, &mut tmp);
            self.apply_transpose(&tmp, out);
        })
        .map(|v| v.max(0.0))
    }
}

fn center(v: &mut [f64], n: usize, d: usize) {
    for p in 0..d {
        let mean = (0..n).map(|i| v[i * d + p]).sum::<f64>() / n as f64;
        for i in 0..n {
            v[i * d + p] -= mean;
        }
    }
}

fn check_matrices(ws: &[GossipMatrix], fm: &FragmentMap) -> Result<()> {
    if ws.len() != fm.fragments() {
        return Err(Error::Dimension(format!(
            "{} gossip matrices for {} fragments",
            ws.len(),
            fm.fragments()
        )));
    }
    let n = ws[0].nodes();
    if ws.iter().any(|w| w.nodes() != n) {
        return Err(Error::Dimension("gossip matrices differ in size".into()));
    }
    Ok(())
}

/// Everything but `K` and the seed of a contraction experiment.
#[derive(Debug, Clone)]
pub struct SpectralSetup {
    pub nodes: usize,
    pub a: DenseMatrix,
    pub eta: f64,
    pub topology: TopologyMode,
    pub scheme: FragmentScheme,
    /// Label of the curvature matrix, carried into reports.
    pub correlation: String,
}

impl SpectralSetup {
    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    fn fragment_map(&self, k: usize) -> Result<FragmentMap> {
        FragmentMap::new(self.dim(), k, self.scheme)
    }

    /// Per-fragment matrices of `round` for the run seeded by `seed`.
    pub fn matrices(&self, k: usize, seed: u64, round: usize) -> Result<Vec<GossipMatrix>> {
        sample_fragment_matrices(self.topology, self.nodes, k, &Substreams::new(seed), round as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub k: usize,
    pub seed: u64,
    pub rho: f64,
    pub eta: f64,
    pub correlation: String,
    pub topology: TopologyMode,
}

/// `ρ(MᵀM)` for every `(K, seed)`, using round 0's matrices of each seed,
/// sorted by `(K, seed)`.
pub fn sweep_k(setup: &SpectralSetup, ks: &[usize], seeds: &[u64]) -> Result<Vec<ContractionReport>> {
    let g = gradient_factor(&setup.a, setup.eta)?;
    let mut out = Vec::with_capacity(ks.len() * seeds.len());
    for &k in ks {
        let fm = setup.fragment_map(k)?;
        for &seed in seeds {
            let ws = setup.matrices(k, seed, 0)?;
            let rho = ContractionOp::new(&ws, &fm, &g)?.contraction_factor(DEFAULT_EIGEN_TOL)?;
            out.push(ContractionReport {
                k,
                seed,
                rho,
                eta: setup.eta,
                correlation: setup.correlation.clone(),
                topology: setup.topology,
            });
        }
    }
    out.sort_by_key(|r| (r.k, r.seed));
    Ok(out)
}

/// A standard normal stacked vector, projected onto the disagreement
/// subspace and scaled to unit norm.
pub fn initial_error(n: usize, d: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument("a disagreement vector needs at least two nodes".into()));
    }
    let mut rng = Substreams::new(seed).stream(Purpose::ConsensusStart, 0, 0);
    let mut e: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    center(&mut e, n, d);
    let len = linalg::norm(&e);
    e.iter_mut().for_each(|v| *v /= len);
    Ok(e)
}

/// `‖e_t‖²` for `t = 0..=rounds` under `e_{t+1} = M_t e_t`, with fresh
/// per-fragment matrices every round.
pub fn consensus_recursion(
    e0: &[f64],
    setup: &SpectralSetup,
    k: usize,
    rounds: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (n, d) = (setup.nodes, setup.dim());
    if e0.len() != n * d {
        return Err(Error::Dimension(format!("error vector of length {} for n*d = {}", e0.len(), n * d)));
    }
    let mut projected = e0.to_vec();
    center(&mut projected, n, d);
    let off = projected
        .iter()
        .zip(e0)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if off > SUBSPACE_TOL {
        return Err(Error::InvalidArgument(format!(
            "initial error leaves the disagreement subspace by {off:e}"
        )));
    }
    let fm = setup.fragment_map(k)?;
    let g = gradient_factor(&setup.a, setup.eta)?;
    let mut e = e0.to_vec();
    let mut next = vec![0.0; e.len()];
    let mut trace = Vec::with_capacity(rounds + 1);
    trace.push(linalg::dot(&e, &e));
    for t in 0..rounds {
        let ws = setup.matrices(k, seed, t)?;
        ContractionOp::new(&ws, &fm, &g)?.apply(&e, &mut next);
        std::mem::swap(&mut e, &mut next);
        trace.push(linalg::dot(&e, &e));
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusRow {
    pub k: usize,
    pub seed: u64,
    pub round: usize,
    pub consensus_sq: f64,
}

/// The recursion for every `(K, seed)`, each seed starting from
/// [`initial_error`] of that seed.
pub fn consensus_sweep(
    setup: &SpectralSetup,
    ks: &[usize],
    seeds: &[u64],
    rounds: usize,
) -> Result<Vec<ConsensusRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        for &seed in seeds {
            let e0 = initial_error(setup.nodes, setup.dim(), seed)?;
            let trace = consensus_recursion(&e0, setup, k, rounds, seed)?;
            rows.extend(trace.into_iter().enumerate().map(|(round, consensus_sq)| ConsensusRow {
                k,
                seed,
                round,
                consensus_sq,
            }));
        }
    }
    Ok(rows)
}

pub fn write_rho_csv(reports: &[ContractionReport], path: &Path, comment: Option<&str>) -> Result<()> {
    write_lines(path, comment, "K,seed,rho", reports.iter().map(|r| {
        format!("{},{},{}", r.k, r.seed, fmt_real(r.rho))
    }))
}

pub fn write_consensus_csv(rows: &[ConsensusRow], path: &Path, comment: Option<&str>) -> Result<()> {
    write_lines(path, comment, "K,seed,round,consensus_sq", rows.iter().map(|r| {
        format!("{},{},{},{}", r.k, r.seed, r.round, fmt_real(r.consensus_sq))
    }))
}

fn write_lines(
    path: &Path,
    comment: Option<&str>,
    header: &str,
    lines: impl Iterator<Item = String>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(c) = comment {
        write_comment(&mut out, c).map_err(io)?;
    }
    writeln!(out, "{header}").map_err(io)?;
    for line in lines {
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}
