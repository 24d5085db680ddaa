//! Random communication matrices: the EL-Local push pattern and static
//! regular graphs, sampled independently per fragment and per round.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::{Purpose, Stream, Substreams};

/// Row-sum tolerance for gossip matrices.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Restart budget of the regular-graph pairing construction.
pub const REGULAR_RETRY_CAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyMode {
    /// No communication: every node keeps its own model.
    Identity,
    /// Exact averaging over all nodes.
    Complete,
    /// Every node pushes to `out_degree` distinct random peers.
    ElLocal { out_degree: usize },
    /// A uniformly drawn undirected `degree`-regular graph.
    Regular { degree: usize },
}

impl TopologyMode {
    /// The same family with its degree parameter replaced.
    pub fn with_degree(self, degree: usize) -> Self {
        match self {
            TopologyMode::ElLocal { .. } => TopologyMode::ElLocal { out_degree: degree },
            TopologyMode::Regular { .. } => TopologyMode::Regular { degree },
            other => other,
        }
    }

    pub fn degree(&self) -> Option<usize> {
        match *self {
            TopologyMode::ElLocal { out_degree } => Some(out_degree),
            TopologyMode::Regular { degree } => Some(degree),
            _ => None,
        }
    }
}

/// One round of exchange for one fragment: a row-stochastic, nonnegative
/// `n x n` matrix together with who sent to whom.
#[derive(Debug, Clone, PartialEq)]
pub struct GossipMatrix {
    weights: DenseMatrix,
    send_sets: Vec<Vec<usize>>,
    row_entries: Vec<Vec<(usize, f64)>>,
}

impl GossipMatrix {
    /// Validates `weights` and derives the send sets from its sparsity.
    pub fn from_weights(weights: DenseMatrix) -> Result<Self> {
        let n = weights.rows();
        if !weights.is_square() || n == 0 {
            return Err(Error::Dimension(format!(
                "gossip matrix must be square and non-empty, got {}x{}",
                weights.rows(),
                weights.cols()
            )));
        }
        let mut send_sets = vec![Vec::new(); n];
        for i in 0..n {
            let row = weights.row(i);
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidArgument(format!("row {i} has a negative weight")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidArgument(format!("row {i} sums to {sum}, not 1")));
            }
            for (j, &w) in row.iter().enumerate() {
                if j != i && w > 0.0 {
                    send_sets[j].push(i);
                }
            }
        }
        Ok(Self::assemble(weights, send_sets))
    }

    fn assemble(weights: DenseMatrix, send_sets: Vec<Vec<usize>>) -> Self {
        let row_entries = (0..weights.rows())
            .map(|i| {
                weights
                    .row(i)
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|&(_, w)| w != 0.0)
                    .collect()
            })
            .collect();
        Self {
            weights,
            send_sets,
            row_entries,
        }
    }

    /// Builds the receiver-side equal-weight matrix from inbound lists:
    /// a node with `m` inbound senders gives itself and each sender `1/(m+1)`.
    fn from_inbound(inbound: &[Vec<usize>], send_sets: Vec<Vec<usize>>) -> Self {
        let n = inbound.len();
        let mut w = DenseMatrix::zeros(n, n);
        for (i, senders) in inbound.iter().enumerate() {
            let share = 1.0 / (senders.len() + 1) as f64;
            w[(i, i)] = share;
            for &j in senders {
                w[(i, j)] = share;
            }
        }
        Self::assemble(w, send_sets)
    }

    pub fn identity(n: usize) -> Self {
        Self::assemble(DenseMatrix::identity(n), vec![Vec::new(); n])
    }

    /// `(1/n) 1 1ᵀ`.
    pub fn complete(n: usize) -> Self {
        let w = DenseMatrix::new(n, n, vec![1.0 / n as f64; n * n])
            .expect("uniform matrix is well-formed");
        let sends = (0..n).map(|j| (0..n).filter(|&i| i != j).collect()).collect();
        Self::assemble(w, sends)
    }

    pub fn nodes(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    /// Receivers of sender `j`.
    pub fn send_set(&self, j: usize) -> &[usize] {
        &self.send_sets[j]
    }

    /// Nonzero `(column, weight)` pairs of row `i`.
    pub fn row_entries(&self, i: usize) -> &[(usize, f64)] {
        &self.row_entries[i]
    }

    /// `W x` for a vector indexed by node.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.row_entries
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }
}

/// Each sender picks `s` distinct receivers uniformly from the other nodes.
pub fn sample_el_local(n: usize, s: usize, rng: &mut Stream) -> Result<GossipMatrix> {
    if n < 2 || s == 0 || s > n - 1 {
        return Err(Error::InvalidArgument(format!(
            "EL-Local needs n >= 2 and 1 <= s <= n-1 (got n={n}, s={s})"
        )));
    }
    let mut inbound = vec![Vec::new(); n];
    let mut send_sets = Vec::with_capacity(n);
    for j in 0..n {
        let mut targets: Vec<usize> = index::sample(rng, n - 1, s)
            .into_iter()
            .map(|t| if t >= j { t + 1 } else { t })
            .collect();
        targets.sort_unstable();
        for &i in &targets {
            inbound[i].push(j);
        }
        send_sets.push(targets);
    }
    Ok(GossipMatrix::from_inbound(&inbound, send_sets))
}

/// A random simple `r`-regular graph with weight `1/(r+1)` on every
/// neighbour and on the node itself.
///
/// Points are paired one at a time, rejecting pairs that would create a
/// self-loop or a repeated edge; a dead end restarts the construction.
pub fn sample_regular_topology(n: usize, r: usize, rng: &mut Stream) -> Result<GossipMatrix> {
    if r >= n || (n * r) % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "no {r}-regular graph on {n} nodes (need r < n and n*r even)"
        )));
    }
    for _ in 0..REGULAR_RETRY_CAP {
        if let Some(adj) = try_pairing(n, r, rng) {
            let mut inbound = adj;
            inbound.iter_mut().for_each(|v| v.sort_unstable());
            let sends = inbound.clone();
            return Ok(GossipMatrix::from_inbound(&inbound, sends));
        }
    }
    Err(Error::TopologyRetries {
        nodes: n,
        degree: r,
        attempts: REGULAR_RETRY_CAP,
        seed_info: "caller-supplied stream".into(),
    })
}

fn try_pairing(n: usize, r: usize, rng: &mut Stream) -> Option<Vec<Vec<usize>>> {
    let mut points: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, r)).collect();
    let mut adj = vec![Vec::with_capacity(r); n];
    let suitable = |adj: &[Vec<usize>], u: usize, v: usize| u != v && !adj[u].contains(&v);

    while !points.is_empty() {
        let len = points.len();
        let mut chosen = None;
        for _ in 0..(4 * len).max(16) {
            let a = rng.gen_range(0..len);
            let b = rng.gen_range(0..len);
            if a != b && suitable(&adj, points[a], points[b]) {
                chosen = Some((a, b));
                break;
            }
        }
        if chosen.is_none() {
            let candidates: Vec<(usize, usize)> = (0..len)
                .flat_map(|a| ((a + 1)..len).map(move |b| (a, b)))
                .filter(|&(a, b)| suitable(&adj, points[a], points[b]))
                .collect();
            if candidates.is_empty() {
                return None;
            }
            chosen = Some(candidates[rng.gen_range(0..candidates.len())]);
        }
        let (a, b) = chosen?;
        let (u, v) = (points[a], points[b]);
        adj[u].push(v);
        adj[v].push(u);
        let (hi, lo) = if a > b { (a, b) } else { (b, a) };
        points.swap_remove(hi);
        points.swap_remove(lo);
    }
    Some(adj)
}

/// One matrix from the chosen family.
pub fn sample(mode: TopologyMode, n: usize, rng: &mut Stream) -> Result<GossipMatrix> {
    match mode {
        TopologyMode::Identity => Ok(GossipMatrix::identity(n)),
        TopologyMode::Complete => Ok(GossipMatrix::complete(n)),
        TopologyMode::ElLocal { out_degree } => sample_el_local(n, out_degree, rng),
        TopologyMode::Regular { degree } => sample_regular_topology(n, degree, rng),
    }
}

/// `k` independent matrices for `round`; fragment `f` always draws from the
/// `(Gossip, round, f)` substream.
pub fn sample_fragment_matrices(
    mode: TopologyMode,
    n: usize,
    k: usize,
    streams: &Substreams,
    round: u64,
) -> Result<Vec<GossipMatrix>> {
    if k == 0 {
        return Err(Error::InvalidArgument("at least one fragment is required".into()));
    }
    (0..k)
        .map(|f| {
            let mut rng = streams.stream(Purpose::Gossip, round, f as u64);
            sample(mode, n, &mut rng).map_err(|e| match e {
                Error::TopologyRetries {
                    nodes,
                    degree,
                    attempts,
                    ..
                } => Error::TopologyRetries {
                    nodes,
                    degree,
                    attempts,
                    seed_info: format!("master {}, round {round}, fragment {f}", streams.master()),
                },
                other => other,
            })
        })
        .collect()
}
