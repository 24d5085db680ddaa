//! Local objectives: the correlated quadratic used by the consensus analysis
//! and a linear-softmax classifier over synthetic Gaussian blobs, plus the
//! label-skewed data partitioning used for heterogeneity experiments.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, DEFAULT_EIGEN_TOL};
use crate::rng::Stream;

/// Distance of each class mean from the origin in [`synth_dataset`].
pub const CLASS_MEAN_SCALE: f64 = 1.0;

/// A differentiable local objective held by one node.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    /// Full (expected) local loss.
    fn loss(&self, x: &[f64]) -> f64;

    /// One stochastic gradient; deterministic objectives ignore `rng`.
    fn stochastic_grad(&self, x: &[f64], rng: &mut Stream) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorrelationKind {
    /// `A[i,j] = rho^|i-j|`.
    Toeplitz { rho: f64 },
    /// Unit diagonal, `within` inside each of `blocks` contiguous groups and
    /// `across` between groups.
    Block { blocks: usize, within: f64, across: f64 },
}

impl CorrelationKind {
    /// Short filesystem-friendly name.
    pub fn label(&self) -> String {
        match *self {
            CorrelationKind::Toeplitz { rho } => format!("toeplitz_rho{rho}"),
            CorrelationKind::Block {
                blocks,
                within,
                across,
            } => format!("block{blocks}_w{within}_a{across}"),
        }
    }
}

/// Builds a correlation matrix and checks that it is positive definite.
pub fn make_correlation_matrix(kind: CorrelationKind, d: usize) -> Result<DenseMatrix> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be >= 1".into()));
    }
    let mut a = DenseMatrix::zeros(d, d);
    match kind {
        CorrelationKind::Toeplitz { rho } => {
            if !(rho.abs() < 1.0) {
                return Err(Error::InvalidArgument(format!("Toeplitz needs |rho| < 1, got {rho}")));
            }
            for i in 0..d {
                for j in 0..d {
                    a[(i, j)] = rho.powi(i.abs_diff(j) as i32);
                }
            }
        }
        CorrelationKind::Block {
            blocks,
            within,
            across,
        } => {
            if blocks == 0 || blocks > d {
                return Err(Error::InvalidArgument(format!(
                    "block count must be in 1..={d}, got {blocks}"
                )));
            }
            let block_of = |i: usize| i * blocks / d;
            for i in 0..d {
                for j in 0..d {
                    a[(i, j)] = if i == j {
                        1.0
                    } else if block_of(i) == block_of(j) {
                        within
                    } else {
                        across
                    };
                }
            }
        }
    }
    let min = smallest_eigenvalue(&a)?;
    if min <= 0.0 {
        return Err(Error::NotPositiveDefinite(min));
    }
    Ok(a)
}

fn smallest_eigenvalue(a: &DenseMatrix) -> Result<f64> {
    Ok(-linalg::largest_eigenvalue_symmetric(&a.scale(-1.0), DEFAULT_EIGEN_TOL)?)
}

/// `f(x) = (x - x*)ᵀ A (x - x*)` with `A` symmetric positive definite.
#[derive(Debug, Clone)]
pub struct QuadraticTask {
    a: DenseMatrix,
    x_star: Vec<f64>,
    lambda_max: f64,
}

impl QuadraticTask {
    pub fn new(a: DenseMatrix, x_star: Vec<f64>) -> Result<Self> {
        if !a.is_square() || a.rows() != x_star.len() {
            return Err(Error::Dimension(format!(
                "{}x{} matrix with an optimum of length {}",
                a.rows(),
                a.cols(),
                x_star.len()
            )));
        }
        let asym = a.relative_asymmetry();
        if asym > 1e-12 {
            return Err(Error::NotSymmetric(asym));
        }
        let min = smallest_eigenvalue(&a)?;
        if min <= 0.0 {
            return Err(Error::NotPositiveDefinite(min));
        }
        let lambda_max = linalg::largest_eigenvalue_symmetric(&a, DEFAULT_EIGEN_TOL)?;
        Ok(Self {
            a,
            x_star,
            lambda_max,
        })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn optimum(&self) -> &[f64] {
        &self.x_star
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    fn offset(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.x_star.len() {
            return Err(Error::Dimension(format!(
                "point of length {} for a {}-dimensional quadratic",
                x.len(),
                self.x_star.len()
            )));
        }
        Ok(x.iter().zip(&self.x_star).map(|(a, b)| a - b).collect())
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let v = self.offset(x)?;
        Ok(linalg::dot(&v, &self.a.matvec(&v)?))
    }

    /// `2 A (x - x*)`.
    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = self.offset(x)?;
        Ok(self.a.matvec(&v)?.into_iter().map(|g| 2.0 * g).collect())
    }
}

impl Objective for QuadraticTask {
    fn dim(&self) -> usize {
        self.x_star.len()
    }

    fn loss(&self, x: &[f64]) -> f64 {
        self.value(x).expect("dimension checked by the engine")
    }

    fn stochastic_grad(&self, x: &[f64], _rng: &mut Stream) -> Vec<f64> {
        self.grad(x).expect("dimension checked by the engine")
    }
}

/// Labelled samples, features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::InvalidArgument("dataset needs dim >= 1 and classes >= 1".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Dimension(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= class count {classes}")));
        }
        Ok(Self {
            dim,
            classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// One sample per row, label in the last column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut header: Vec<String> = (0..self.dim).map(|f| format!("f{f}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features(i).iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads [`Dataset::write_csv`] output; the class count is `max label + 1`
    /// unless given.
    pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        let cols = r.headers().map_err(|e| Error::csv(path, e))?.len();
        if cols < 2 {
            return Err(Error::csv(path, "need at least one feature column and a label"));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            for f in rec.iter().take(cols - 1) {
                features.push(f.trim().parse::<f64>().map_err(|e| Error::csv(path, e))?);
            }
            labels.push(rec[cols - 1].trim().parse::<usize>().map_err(|e| Error::csv(path, e))?);
        }
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        Self::new(cols - 1, classes, features, labels)
    }
}

/// Gaussian blobs: class `c` is centred on `CLASS_MEAN_SCALE * e_c` with
/// isotropic noise of standard deviation `spread`. Samples are class-major.
pub fn synth_dataset(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    rng: &mut Stream,
) -> Result<Dataset> {
    if classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::InvalidArgument("class, dimension and sample counts must be >= 1".into()));
    }
    if classes > dim {
        return Err(Error::InvalidArgument(format!(
            "{classes} simplex vertices do not fit in dimension {dim}"
        )));
    }
    if !(spread >= 0.0) {
        return Err(Error::InvalidArgument(format!("spread must be >= 0, got {spread}")));
    }
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            for f in 0..dim {
                let mean = if f == c { CLASS_MEAN_SCALE } else { 0.0 };
                let noise: f64 = rng.sample(StandardNormal);
                features.push(mean + spread * noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(dim, classes, features, labels)
}

/// Linear softmax classifier. Parameters are the `classes x dim` weight
/// matrix (row-major) followed by `classes` biases when `bias` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearSoftmax {
    pub classes: usize,
    pub dim: usize,
    pub bias: bool,
}

impl LinearSoftmax {
    pub fn param_dim(&self) -> usize {
        self.classes * self.dim + if self.bias { self.classes } else { 0 }
    }

    fn check(&self, data: &Dataset, x: &[f64]) -> Result<()> {
        if data.dim() != self.dim || data.classes() != self.classes {
            return Err(Error::Dimension(format!(
                "model for {} classes x {} features, dataset has {} x {}",
                self.classes,
                self.dim,
                data.classes(),
                data.dim()
            )));
        }
        if x.len() != self.param_dim() {
            return Err(Error::Dimension(format!(
                "{} parameters for a model of size {}",
                x.len(),
                self.param_dim()
            )));
        }
        Ok(())
    }

    fn logits(&self, x: &[f64], feats: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let w = &x[c * self.dim..(c + 1) * self.dim];
            *o = linalg::dot(w, feats);
            if self.bias {
                *o += x[self.classes * self.dim + c];
            }
        }
    }

    /// Writes softmax probabilities into `out` and returns log-sum-exp.
    fn probabilities(&self, x: &[f64], feats: &[f64], out: &mut [f64]) -> f64 {
        self.logits(x, feats, out);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        out.iter_mut().for_each(|o| *o /= sum);
        max + sum.ln()
    }

    pub fn predict(&self, x: &[f64], feats: &[f64]) -> usize {
        let mut logits = vec![0.0; self.classes];
        self.logits(x, feats, &mut logits);
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
            .0
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, data: &Dataset, x: &[f64]) -> Result<f64> {
        self.check(data, x)?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
        }
        let correct = (0..data.len())
            .filter(|&i| self.predict(x, data.features(i)) == data.labels()[i])
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, data: &Dataset, x: &[f64], batch: &[usize]) -> Result<f64> {
        self.check_batch(data, x, batch)?;
        let mut probs = vec![0.0; self.classes];
        let mut logits = vec![0.0; self.classes];
        let total: f64 = batch
            .iter()
            .map(|&i| {
                let lse = self.probabilities(x, data.features(i), &mut probs);
                self.logits(x, data.features(i), &mut logits);
                lse - logits[data.labels()[i]]
            })
            .sum();
        Ok(total / batch.len() as f64)
    }

    fn check_batch(&self, data: &Dataset, x: &[f64], batch: &[usize]) -> Result<()> {
        self.check(data, x)?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(bad) = batch.iter().find(|&&i| i >= data.len()) {
            return Err(Error::InvalidArgument(format!(
                "sample index {bad} out of range for {} samples",
                data.len()
            )));
        }
        Ok(())
    }
}

/// Mean cross-entropy over `batch` and its exact gradient.
pub fn softmax_loss_grad(
    model: &LinearSoftmax,
    data: &Dataset,
    x: &[f64],
    batch: &[usize],
) -> Result<(f64, Vec<f64>)> {
    model.check_batch(data, x, batch)?;
    let mut grad = vec![0.0; model.param_dim()];
    let mut probs = vec![0.0; model.classes];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for &i in batch {
        let feats = data.features(i);
        let label = data.labels()[i];
        let lse = model.probabilities(x, feats, &mut probs);
        let w = &x[label * model.dim..(label + 1) * model.dim];
        let mut true_logit = linalg::dot(w, feats);
        if model.bias {
            true_logit += x[model.classes * model.dim + label];
        }
        loss += lse - true_logit;
        for (c, &p) in probs.iter().enumerate() {
            let coeff = scale * (p - if c == label { 1.0 } else { 0.0 });
            for (g, &f) in grad[c * model.dim..(c + 1) * model.dim].iter_mut().zip(feats) {
                *g += coeff * f;
            }
            if model.bias {
                grad[model.classes * model.dim + c] += coeff;
            }
        }
    }
    Ok((loss * scale, grad))
}

/// One node's share of a classification dataset. Each stochastic gradient
/// averages `batch_size` samples drawn with replacement from the shard.
#[derive(Debug, Clone)]
pub struct ShardObjective {
    pub model: LinearSoftmax,
    pub data: Arc<Dataset>,
    pub shard: Vec<usize>,
    pub batch_size: usize,
}

impl Objective for ShardObjective {
    fn dim(&self) -> usize {
        self.model.param_dim()
    }

    fn loss(&self, x: &[f64]) -> f64 {
        self.model
            .loss(&self.data, x, &self.shard)
            .expect("shard validated at construction")
    }

    fn stochastic_grad(&self, x: &[f64], rng: &mut Stream) -> Vec<f64> {
        let batch: Vec<usize> = (0..self.batch_size)
            .map(|_| self.shard[rng.gen_range(0..self.shard.len())])
            .collect();
        softmax_loss_grad(&self.model, &self.data, x, &batch)
            .expect("shard validated at construction")
            .1
    }
}

/// Per-node sample indices into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn nodes(&self) -> usize {
        self.shards.len()
    }

    /// True when shards are disjoint, non-empty and cover `0..len`.
    pub fn is_exact(&self, len: usize) -> bool {
        let mut seen = vec![false; len];
        for shard in &self.shards {
            if shard.is_empty() {
                return false;
            }
            for &i in shard {
                if i >= len || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// How labels are spread over nodes. Serialized as the string `"iid"` or as
/// the Dirichlet concentration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Heterogeneity {
    Iid(IidTag),
    Dirichlet(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IidTag {
    Iid,
}

impl Heterogeneity {
    pub const IID: Heterogeneity = Heterogeneity::Iid(IidTag::Iid);

    pub fn label(&self) -> String {
        match self {
            Heterogeneity::Iid(_) => "iid".into(),
            Heterogeneity::Dirichlet(a) => format!("{a}"),
        }
    }

    pub fn partition(&self, labels: &[usize], n: usize, rng: &mut Stream) -> Result<Partition> {
        match *self {
            Heterogeneity::Iid(_) => iid_partition(labels.len(), n, rng),
            Heterogeneity::Dirichlet(alpha) => dirichlet_partition(labels, n, alpha, rng),
        }
    }
}

/// Shuffled, near-equal split.
pub fn iid_partition(len: usize, n: usize, rng: &mut Stream) -> Result<Partition> {
    if n == 0 || len < n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {len} samples over {n} nodes"
        )));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    let mut shards = vec![Vec::new(); n];
    for (pos, i) in idx.into_iter().enumerate() {
        shards[pos % n].push(i);
    }
    shards.iter_mut().for_each(|s| s.sort_unstable());
    Ok(Partition { shards })
}

/// Label-skewed split: each class is divided among nodes in proportions drawn
/// from a symmetric Dirichlet(`alpha`), with largest-remainder rounding.
/// Nodes left empty take one sample from the currently largest node.
pub fn dirichlet_partition(labels: &[usize], n: usize, alpha: f64, rng: &mut Stream) -> Result<Partition> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one node".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive and finite, got {alpha}")));
    }
    if labels.len() < n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} samples over {n} nodes",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];

    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let mut props: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            // Every draw underflowed; the limit of a tiny-alpha Dirichlet is a
            // uniformly chosen vertex.
            let pick = rng.gen_range(0..n);
            props.iter_mut().enumerate().for_each(|(i, p)| *p = if i == pick { 1.0 } else { 0.0 });
        }
        let counts = largest_remainder(&props, members.len());
        let mut start = 0;
        for (node, count) in counts.into_iter().enumerate() {
            shards[node].extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }

    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..n)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("n >= 1");
        let moved = shards[largest].pop().expect("largest shard is non-empty");
        shards[empty].push(moved);
    }
    shards.iter_mut().for_each(|s| s.sort_unstable());
    Ok(Partition { shards })
}

fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Stream {
        Stream::seed_from_u64(seed)
    }

    /// Central finite difference of a scalar function.
    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut p = x.to_vec();
        for i in 0..x.len() {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            g[i] = (up - down) / (2.0 * h);
        }
        g
    }

    #[test]
    fn toeplitz_examples() {
        let a = make_correlation_matrix(CorrelationKind::Toeplitz { rho: 0.0 }, 5).unwrap();
        assert_eq!(a, DenseMatrix::identity(5));
        let a = make_correlation_matrix(CorrelationKind::Toeplitz { rho: 0.5 }, 3).unwrap();
        let expected =
            DenseMatrix::from_rows(&[[1.0, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 1.0]]).unwrap();
        assert_eq!(a, expected);
        assert!(make_correlation_matrix(CorrelationKind::Toeplitz { rho: 1.0 }, 3).is_err());
    }

    #[test]
    fn block_example_is_spd() {
        let kind = CorrelationKind::Block {
            blocks: 2,
            within: 0.9,
            across: 0.0,
        };
        let a = make_correlation_matrix(kind, 4).unwrap();
        assert_eq!(a[(0, 1)], 0.9);
        assert_eq!(a[(1, 2)], 0.0);
        // Spectrum {1.9, 1.9, 0.1, 0.1}.
        let min = smallest_eigenvalue(&a).unwrap();
        assert!((min - 0.1).abs() < 1e-9);
    }

    #[test]
    fn block_rejects_indefinite() {
        let kind = CorrelationKind::Block {
            blocks: 2,
            within: 0.2,
            across: 0.9,
        };
        match make_correlation_matrix(kind, 4) {
            Err(Error::NotPositiveDefinite(min)) => assert!(min < 0.0),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn documented_correlation_ranges_are_spd() {
        for rho in [-0.95, -0.5, 0.0, 0.3, 0.9, 0.99] {
            for d in [1, 2, 7, 16] {
                assert!(make_correlation_matrix(CorrelationKind::Toeplitz { rho }, d).is_ok());
            }
        }
        for blocks in [1, 2, 4] {
            for within in [0.0, 0.5, 0.8, 0.95] {
                let kind = CorrelationKind::Block {
                    blocks,
                    within,
                    across: 0.0,
                };
                assert!(make_correlation_matrix(kind, 16).is_ok());
            }
        }
    }

    #[test]
    fn quadratic_gradient_examples() {
        let a = make_correlation_matrix(CorrelationKind::Toeplitz { rho: 0.6 }, 4).unwrap();
        let x_star = vec![1.0, -2.0, 0.5, 3.0];
        let q = QuadraticTask::new(a, x_star.clone()).unwrap();
        assert_eq!(q.grad(&x_star).unwrap(), vec![0.0; 4]);

        let id = QuadraticTask::new(DenseMatrix::identity(3), vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(id.grad(&[2.0, 0.0, 4.0]).unwrap(), vec![2.0, -2.0, 6.0]);
        assert!(id.grad(&[1.0]).is_err());

        let mut r = rng(8);
        let x: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        let fd = fd_grad(|p| q.value(p).unwrap(), &x, 1e-5);
        for (g, f) in q.grad(&x).unwrap().iter().zip(&fd) {
            assert!((g - f).abs() < 1e-5, "{g} vs {f}");
        }
    }

    #[test]
    fn quadratic_rejects_non_spd() {
        let a = DenseMatrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(
            QuadraticTask::new(a, vec![0.0; 2]),
            Err(Error::NotPositiveDefinite(_))
        ));
        let asym = DenseMatrix::from_rows(&[[1.0, 0.1], [0.0, 1.0]]).unwrap();
        assert!(QuadraticTask::new(asym, vec![0.0; 2]).is_err());
    }

    fn blobs(seed: u64) -> (LinearSoftmax, Dataset) {
        let data = synth_dataset(3, 4, 5, 0.5, &mut rng(seed)).unwrap();
        let model = LinearSoftmax {
            classes: 3,
            dim: 4,
            bias: true,
        };
        (model, data)
    }

    #[test]
    fn softmax_uniform_loss() {
        let (model, data) = blobs(1);
        let x = vec![0.0; model.param_dim()];
        let (loss, _) = softmax_loss_grad(&model, &data, &x, &[0, 3, 7]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let (model, data) = blobs(2);
        let mut r = rng(3);
        let x: Vec<f64> = (0..model.param_dim()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let batch = [4];
        let (_, g) = softmax_loss_grad(&model, &data, &x, &batch).unwrap();
        let fd = fd_grad(|p| model.loss(&data, p, &batch).unwrap(), &x, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_batch_duplication_is_invariant() {
        let (model, data) = blobs(4);
        let x: Vec<f64> = (0..model.param_dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let (l1, g1) = softmax_loss_grad(&model, &data, &x, &[1, 6, 11]).unwrap();
        let (l2, g2) = softmax_loss_grad(&model, &data, &x, &[1, 6, 11, 1, 6, 11]).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_rejects_bad_batches() {
        let (model, data) = blobs(5);
        let x = vec![0.0; model.param_dim()];
        assert!(softmax_loss_grad(&model, &data, &x, &[]).is_err());
        assert!(softmax_loss_grad(&model, &data, &x, &[data.len()]).is_err());
        assert!(softmax_loss_grad(&model, &data, &x[1..], &[0]).is_err());
    }

    #[test]
    fn synth_dataset_shapes() {
        let d = synth_dataset(4, 6, 1, 0.0, &mut rng(0)).unwrap();
        assert_eq!(d.len(), 4);
        for c in 0..4 {
            let mut mean = vec![0.0; 6];
            mean[c] = CLASS_MEAN_SCALE;
            assert_eq!(d.features(c), &mean[..]);
            assert_eq!(d.labels()[c], c);
        }
        let d = synth_dataset(3, 5, 7, 0.3, &mut rng(1)).unwrap();
        assert_eq!(d.len(), 21);
        assert_eq!(d, synth_dataset(3, 5, 7, 0.3, &mut rng(1)).unwrap());
        assert!(synth_dataset(5, 4, 1, 0.1, &mut rng(1)).is_err());
    }

    #[test]
    fn noiseless_blobs_are_linearly_separable() {
        // The weight matrix [I | 0] scores class c by feature c alone.
        let data = synth_dataset(4, 16, 10, 0.0, &mut rng(9)).unwrap();
        let model = LinearSoftmax {
            classes: 4,
            dim: 16,
            bias: true,
        };
        let mut x = vec![0.0; model.param_dim()];
        for c in 0..4 {
            x[c * 16 + c] = 1.0;
        }
        assert_eq!(model.accuracy(&data, &x).unwrap(), 1.0);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let d = synth_dataset(3, 4, 6, 0.7, &mut rng(12)).unwrap();
        d.write_csv(&path).unwrap();
        assert_eq!(Dataset::read_csv(&path, Some(3)).unwrap(), d);
    }

    fn entropy(hist: &[usize]) -> f64 {
        let total: usize = hist.iter().sum();
        hist.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    }

    #[test]
    fn dirichlet_single_node_gets_everything() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let p = dirichlet_partition(&labels, 1, 0.1, &mut rng(0)).unwrap();
        assert_eq!(p.shards, vec![(0..30).collect::<Vec<_>>()]);
    }

    #[test]
    fn dirichlet_large_alpha_is_near_iid() {
        let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        for seed in 0..20 {
            let p = dirichlet_partition(&labels, 2, 1e6, &mut rng(seed)).unwrap();
            for shard in &p.shards {
                let ones = shard.iter().filter(|&&i| labels[i] == 1).count() as f64;
                let frac = ones / shard.len() as f64;
                assert!((frac - 0.5).abs() <= 0.05, "class share {frac}");
            }
        }
    }

    #[test]
    fn dirichlet_small_alpha_skews_labels() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let global = entropy(&[50, 50, 50, 50]);
        let mut mean = 0.0;
        for seed in 0..20 {
            let p = dirichlet_partition(&labels, 4, 0.05, &mut rng(seed)).unwrap();
            for shard in &p.shards {
                let mut h = [0usize; 4];
                shard.iter().for_each(|&i| h[labels[i]] += 1);
                mean += entropy(&h);
            }
        }
        mean /= 80.0;
        assert!(mean < global, "{mean} vs {global}");
    }

    #[test]
    fn partitions_are_exact() {
        let labels: Vec<usize> = (0..97).map(|i| (i * 7) % 5).collect();
        for seed in 0..30 {
            for alpha in [0.01, 0.1, 1.0, 100.0] {
                let p = dirichlet_partition(&labels, 12, alpha, &mut rng(seed)).unwrap();
                assert!(p.is_exact(labels.len()));
                assert_eq!(p.nodes(), 12);
            }
            assert!(iid_partition(97, 12, &mut rng(seed)).unwrap().is_exact(97));
        }
        assert!(dirichlet_partition(&labels[..3], 4, 1.0, &mut rng(0)).is_err());
        assert!(dirichlet_partition(&labels, 4, 0.0, &mut rng(0)).is_err());
    }

    #[test]
    fn heterogeneity_serializes_as_string_or_number() {
        #[derive(Serialize, Deserialize)]
        struct Holder {
            alpha: Heterogeneity,
        }
        let h: Holder = toml::from_str("alpha = \"iid\"").unwrap();
        assert_eq!(h.alpha, Heterogeneity::IID);
        let h: Holder = toml::from_str("alpha = 0.1").unwrap();
        assert_eq!(h.alpha, Heterogeneity::Dirichlet(0.1));
        assert_eq!(toml::to_string(&Holder { alpha: Heterogeneity::IID }).unwrap().trim(), "alpha = \"iid\"");
    }
}
