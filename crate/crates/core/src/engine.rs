//! Round-by-round execution: local SGD, per-fragment gossip, fragment-wise
//! aggregation, and metric recording.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::fragmentation::FragmentMap;
use crate::metrics::{self, Evaluator, MetricsRow, MetricsTrace};
use crate::rng::{Purpose, Stream, Substreams};
use crate::tasks::{
    make_correlation_matrix, synth_dataset, Dataset, LinearSoftmax, Objective, QuadraticTask,
    ShardObjective,
};
use crate::topology::{sample_fragment_matrices, GossipMatrix};

/// All node models stacked node-major: node `i` owns `data[i*d..(i+1)*d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedState {
    nodes: usize,
    dim: usize,
    data: Vec<f64>,
}

impl StackedState {
    pub fn zeros(nodes: usize, dim: usize) -> Self {
        Self {
            nodes,
            dim,
            data: vec![0.0; nodes * dim],
        }
    }

    pub fn from_flat(nodes: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if nodes == 0 || dim == 0 || data.len() != nodes * dim {
            return Err(Error::Dimension(format!(
                "{} values for {nodes} nodes of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("state has non-finite entries".into()));
        }
        Ok(Self { nodes, dim, data })
    }

    pub fn from_nodes(rows: Vec<Vec<f64>>) -> Result<Self> {
        let nodes = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("node vectors differ in length".into()));
        }
        Self::from_flat(nodes, dim, rows.concat())
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Coordinate-wise network average.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.nodes {
            for (m, v) in mean.iter_mut().zip(self.node(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.nodes as f64);
        mean
    }

    /// One row per node: `node,x0,x1,...`.
    pub fn write_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        if let Some(c) = comment {
            metrics::write_comment(&mut out, c).map_err(io)?;
        }
        let header: Vec<String> = std::iter::once("node".to_string())
            .chain((0..self.dim).map(|p| format!("x{p}")))
            .collect();
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for i in 0..self.nodes {
            let row: Vec<String> = self.node(i).iter().map(|&v| metrics::fmt_real(v)).collect();
            writeln!(out, "{i},{}", row.join(",")).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// `steps` SGD steps from `x` with step size `eta`.
pub fn local_update(
    x: &[f64],
    task: &dyn Objective,
    steps: usize,
    eta: f64,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("at least one local step is required".into()));
    }
    if x.len() != task.dim() {
        return Err(Error::Dimension(format!(
            "model of length {} for an objective of dimension {}",
            x.len(),
            task.dim()
        )));
    }
    let mut cur = x.to_vec();
    for step in 0..steps {
        let g = task.stochastic_grad(&cur, rng);
        for (c, gi) in cur.iter_mut().zip(&g) {
            *c -= eta * gi;
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step });
        }
    }
    Ok(cur)
}

/// Fragment-wise gossip: for every node `i` and fragment `k`, the new
/// fragment-`k` coordinates are `Σ_j W_k[i,j] x_j` restricted to fragment `k`.
pub fn exchange_and_aggregate(
    states: &StackedState,
    ws: &[GossipMatrix],
    fm: &FragmentMap,
) -> Result<StackedState> {
    if ws.len() != fm.fragments() {
        return Err(Error::Dimension(format!(
            "{} gossip matrices for {} fragments",
            ws.len(),
            fm.fragments()
        )));
    }
    if states.dim() != fm.dim() {
        return Err(Error::Dimension(format!(
            "state dimension {} but fragment map covers {}",
            states.dim(),
            fm.dim()
        )));
    }
    if let Some(w) = ws.iter().find(|w| w.nodes() != states.nodes()) {
        return Err(Error::Dimension(format!(
            "{}-node gossip matrix for {} nodes",
            w.nodes(),
            states.nodes()
        )));
    }
    let mut out = StackedState::zeros(states.nodes(), states.dim());
    for (k, w) in ws.iter().enumerate() {
        let coords = fm.indices(k)?;
        for i in 0..states.nodes() {
            let dst = out.node_mut(i);
            for &(j, weight) in w.row_entries(i) {
                let src = states.node(j);
                for &p in coords {
                    dst[p] += weight * src[p];
                }
            }
        }
    }
    Ok(out)
}

struct QuadraticEval(Arc<QuadraticTask>);

impl Evaluator for QuadraticEval {
    fn perf(&self, x: &[f64]) -> f64 {
        self.0.loss(x)
    }
}

struct AccuracyEval {
    model: LinearSoftmax,
    test: Dataset,
}

impl Evaluator for AccuracyEval {
    fn perf(&self, x: &[f64]) -> f64 {
        self.model.accuracy(&self.test, x).expect("test set validated")
    }
}

/// Scores models on the held-out set of a classification task.
pub fn accuracy_evaluator(model: LinearSoftmax, test: Dataset) -> Box<dyn Evaluator> {
    Box::new(AccuracyEval { model, test })
}

/// A fully materialized run: tasks, data shards, fragment map and the
/// starting state, all derived from the config and its seed.
pub struct Experiment {
    config: ExperimentConfig,
    streams: Substreams,
    fm: FragmentMap,
    objectives: Vec<Arc<dyn Objective>>,
    quadratic: Option<Arc<QuadraticTask>>,
    evaluator: Box<dyn Evaluator>,
    initial: StackedState,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: MetricsTrace,
    pub final_state: StackedState,
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let streams = Substreams::new(config.seed);
        let n = config.nodes;
        let d = config.param_dim();
        let fm = FragmentMap::new(d, config.fragments, config.fragment_scheme)?;

        let mut quadratic = None;
        let (objectives, evaluator): (Vec<Arc<dyn Objective>>, Box<dyn Evaluator>) = match config.task {
            TaskSpec::Quadratic {
                dim,
                correlation,
                optimum_scale,
            } => {
                let a = make_correlation_matrix(correlation, dim)?;
                let mut rng = streams.stream(Purpose::Optimum, 0, 0);
                let x_star = gaussian(&mut rng, dim, optimum_scale);
                let task = Arc::new(QuadraticTask::new(a, x_star)?);
                let objs = (0..n).map(|_| task.clone() as Arc<dyn Objective>).collect();
                quadratic = Some(task.clone());
                (objs, Box::new(QuadraticEval(task)))
            }
            TaskSpec::Classification {
                classes,
                feature_dim,
                per_class,
                test_per_class,
                spread,
                batch_size,
                alpha,
                bias,
            } => {
                let model = LinearSoftmax {
                    classes,
                    dim: feature_dim,
                    bias,
                };
                let train = Arc::new(synth_dataset(
                    classes,
                    feature_dim,
                    per_class,
                    spread,
                    &mut streams.stream(Purpose::Dataset, 0, 0),
                )?);
                let test = synth_dataset(
                    classes,
                    feature_dim,
                    test_per_class,
                    spread,
                    &mut streams.stream(Purpose::TestSet, 0, 0),
                )?;
                let partition =
                    alpha.partition(train.labels(), n, &mut streams.stream(Purpose::Partition, 0, 0))?;
                let objs = partition
                    .shards
                    .into_iter()
                    .map(|shard| {
                        Arc::new(ShardObjective {
                            model,
                            data: train.clone(),
                            shard,
                            batch_size,
                        }) as Arc<dyn Objective>
                    })
                    .collect();
                (objs, accuracy_evaluator(model, test))
            }
        };

        let mut initial = StackedState::zeros(n, d);
        for i in 0..n {
            let key = if config.init.shared { 0 } else { i as u64 };
            let x0 = gaussian(&mut streams.stream(Purpose::Init, key, 0), d, config.init.scale);
            initial.node_mut(i).copy_from_slice(&x0);
        }

        Ok(Self {
            config: config.clone(),
            streams,
            fm,
            objectives,
            quadratic,
            evaluator,
            initial,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn fragment_map(&self) -> &FragmentMap {
        &self.fm
    }

    pub fn initial_state(&self) -> &StackedState {
        &self.initial
    }

    pub fn objective(&self, node: usize) -> &dyn Objective {
        self.objectives[node].as_ref()
    }

    /// The shared objective of a quadratic run.
    pub fn quadratic_task(&self) -> Option<&QuadraticTask> {
        self.quadratic.as_deref()
    }

    pub fn evaluator(&self) -> &dyn Evaluator {
        self.evaluator.as_ref()
    }

    /// Substream feeding node `node`'s local steps in `round`.
    pub fn sgd_stream(&self, round: usize, node: usize) -> Stream {
        self.streams.stream(Purpose::LocalSgd, round as u64, node as u64)
    }

    /// The per-fragment matrices used in `round` (round 0's when static).
    pub fn gossip_matrices(&self, round: usize) -> Result<Vec<GossipMatrix>> {
        let r = if self.config.static_topology { 0 } else { round as u64 };
        sample_fragment_matrices(
            self.config.topology,
            self.config.nodes,
            self.config.fragments,
            &self.streams,
            r,
        )
    }

    /// Local phase of one round for every node.
    pub fn local_phase(&self, state: &StackedState, round: usize) -> Result<StackedState> {
        let cfg = &self.config;
        let updated: Vec<Result<Vec<f64>>> = (0..cfg.nodes)
            .into_par_iter()
            .map(|i| {
                let mut rng = self.sgd_stream(round, i);
                local_update(state.node(i), self.objective(i), cfg.local_steps, cfg.step_size, &mut rng)
                    .map_err(|e| match e {
                        Error::NonFinite { .. } => Error::Divergence {
                            round,
                            node: i,
                            eta: cfg.step_size,
                        },
                        other => other,
                    })
            })
            .collect();
        let mut out = StackedState::zeros(cfg.nodes, state.dim());
        for (i, x) in updated.into_iter().enumerate() {
            out.node_mut(i).copy_from_slice(&x?);
        }
        Ok(out)
    }

    /// Global objective `(1/n) Σ_i F_i` at the network-average model.
    pub fn global_loss(&self, state: &StackedState) -> f64 {
        let mean = state.mean();
        self.objectives.iter().map(|o| o.loss(&mean)).sum::<f64>() / self.objectives.len() as f64
    }

    pub fn measure(&self, state: &StackedState, round: usize) -> MetricsRow {
        let perf = metrics::per_node_perf(state, self.evaluator());
        MetricsRow {
            round,
            node_avg: perf.iter().sum::<f64>() / perf.len() as f64,
            model_avg: metrics::model_average_eval(state, self.evaluator()),
            consensus_dist: metrics::consensus_distance(state),
            node_stddev: metrics::node_perf_stddev(&perf),
            global_loss: self.global_loss(state),
        }
    }

    pub fn run(&self) -> Result<RunOutput> {
        let cfg = &self.config;
        let mut state = self.initial.clone();
        let mut trace = MetricsTrace::new();
        let mut static_ws: Option<Vec<GossipMatrix>> = None;
        for t in 0..cfg.rounds {
            let half = self.local_phase(&state, t)?;
            let ws = if cfg.static_topology {
                if static_ws.is_none() {
                    static_ws = Some(self.gossip_matrices(0)?);
                }
                static_ws.clone().expect("just set")
            } else {
                self.gossip_matrices(t)?
            };
            state = exchange_and_aggregate(&half, &ws, &self.fm)?;
            let round = t + 1;
            if round % cfg.metrics_every == 0 || round == cfg.rounds {
                trace.push(self.measure(&state, round))?;
            }
        }
        Ok(RunOutput {
            trace,
            final_state: state,
        })
    }
}

fn gaussian(rng: &mut Stream, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Builds and runs `config`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    Experiment::build(config)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::InitSpec;
    use crate::fragmentation::FragmentScheme;
    use crate::linalg::DenseMatrix;
    use crate::tasks::CorrelationKind;
    use crate::topology::TopologyMode;
    use rand::SeedableRng;

    fn quad_config() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: 1,
            seed: 3,
            nodes: 4,
            rounds: 5,
            local_steps: 2,
            step_size: 0.05,
            fragments: 2,
            fragment_scheme: FragmentScheme::Contiguous,
            topology: TopologyMode::ElLocal { out_degree: 1 },
            static_topology: false,
            metrics_every: 1,
            task: TaskSpec::Quadratic {
                dim: 4,
                correlation: CorrelationKind::Toeplitz { rho: 0.5 },
                optimum_scale: 1.0,
            },
            init: InitSpec::default(),
        }
    }

    #[test]
    fn local_update_examples() {
        let task = QuadraticTask::new(DenseMatrix::identity(1), vec![0.0]).unwrap();
        let mut rng = Stream::seed_from_u64(0);
        assert_eq!(local_update(&[1.0], &task, 4, 0.0, &mut rng).unwrap(), vec![1.0]);
        assert_eq!(local_update(&[1.0], &task, 1, 0.25, &mut rng).unwrap(), vec![0.5]);
    }

    #[test]
    fn local_update_matches_closed_form() {
        let a = make_correlation_matrix(CorrelationKind::Toeplitz { rho: 0.7 }, 3).unwrap();
        let x_star = vec![0.5, -1.0, 2.0];
        let task = QuadraticTask::new(a.clone(), x_star.clone()).unwrap();
        let x0 = vec![3.0, 1.0, -2.0];
        let eta = 0.1;
        // (I - 2ηA)^3 (x0 - x*) + x*
        let step = DenseMatrix::identity(3).sub(&a.scale(2.0 * eta)).unwrap();
        let mut v: Vec<f64> = x0.iter().zip(&x_star).map(|(a, b)| a - b).collect();
        for _ in 0..3 {
            v = step.matvec(&v).unwrap();
        }
        let expected: Vec<f64> = v.iter().zip(&x_star).map(|(a, b)| a + b).collect();
        let got = local_update(&x0, &task, 3, eta, &mut Stream::seed_from_u64(1)).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn local_update_reports_divergence() {
        let task = QuadraticTask::new(DenseMatrix::identity(1), vec![0.0]).unwrap();
        let err = local_update(&[1.0], &task, 2000, 10.0, &mut Stream::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    fn grid(n: usize, d: usize) -> StackedState {
        let rows = (0..n)
            .map(|i| (0..d).map(|p| (i * 10 + p) as f64).collect())
            .collect();
        StackedState::from_nodes(rows).unwrap()
    }

    #[test]
    fn identity_gossip_keeps_state() {
        let s = grid(3, 4);
        let fm = FragmentMap::new(4, 2, FragmentScheme::RoundRobin).unwrap();
        let ws = vec![GossipMatrix::identity(3), GossipMatrix::identity(3)];
        assert_eq!(exchange_and_aggregate(&s, &ws, &fm).unwrap(), s);
    }

    #[test]
    fn full_averaging_single_fragment() {
        let s = StackedState::from_nodes(vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]]).unwrap();
        let fm = FragmentMap::new(2, 1, FragmentScheme::Contiguous).unwrap();
        let out = exchange_and_aggregate(&s, &[GossipMatrix::complete(3)], &fm).unwrap();
        for i in 0..3 {
            assert!((out.node(i)[0] - 3.0).abs() < 1e-15);
            assert!((out.node(i)[1] - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn per_fragment_independence() {
        let s = StackedState::from_nodes(vec![vec![1.0, 4.0], vec![3.0, 8.0]]).unwrap();
        let fm = FragmentMap::new(2, 2, FragmentScheme::Contiguous).unwrap();
        let ws = vec![GossipMatrix::identity(2), GossipMatrix::complete(2)];
        let out = exchange_and_aggregate(&s, &ws, &fm).unwrap();
        assert_eq!(out.node(0), &[1.0, 6.0]);
        assert_eq!(out.node(1), &[3.0, 6.0]);
    }

    #[test]
    fn exchange_rejects_mismatch() {
        let s = grid(3, 4);
        let fm = FragmentMap::new(4, 2, FragmentScheme::Contiguous).unwrap();
        assert!(exchange_and_aggregate(&s, &[GossipMatrix::identity(3)], &fm).is_err());
        let ws = vec![GossipMatrix::identity(2), GossipMatrix::identity(2)];
        assert!(exchange_and_aggregate(&s, &ws, &fm).is_err());
    }

    #[test]
    fn fragment_isolation() {
        let mut rng = Stream::seed_from_u64(4);
        let fm = FragmentMap::new(6, 3, FragmentScheme::Shuffled { seed: 1 }).unwrap();
        let ws: Vec<GossipMatrix> = (0..3)
            .map(|_| crate::topology::sample_el_local(5, 2, &mut rng).unwrap())
            .collect();
        let s = StackedState::from_flat(5, 6, gaussian(&mut rng, 30, 1.0)).unwrap();
        let base = exchange_and_aggregate(&s, &ws, &fm).unwrap();
        for q in 0..3 {
            let mut zeroed = s.clone();
            for i in 0..5 {
                for &p in fm.indices(q).unwrap() {
                    zeroed.node_mut(i)[p] = 0.0;
                }
            }
            let out = exchange_and_aggregate(&zeroed, &ws, &fm).unwrap();
            for i in 0..5 {
                for p in 0..6 {
                    if fm.fragment_of(p) != q {
                        assert_eq!(out.node(i)[p], base.node(i)[p]);
                    }
                }
            }
        }
    }

    #[test]
    fn frozen_run_keeps_initial_state() {
        let mut cfg = quad_config();
        cfg.step_size = 0.0;
        cfg.topology = TopologyMode::Identity;
        let exp = Experiment::build(&cfg).unwrap();
        let out = exp.run().unwrap();
        assert_eq!(&out.final_state, exp.initial_state());
        assert_eq!(out.trace.len(), 5);
    }

    #[test]
    fn single_node_is_plain_gradient_descent() {
        let mut cfg = quad_config();
        cfg.nodes = 1;
        cfg.topology = TopologyMode::Identity;
        cfg.rounds = 7;
        let exp = Experiment::build(&cfg).unwrap();
        let out = exp.run().unwrap();
        let TaskSpec::Quadratic { dim, correlation, .. } = cfg.task else { unreachable!() };
        let a = make_correlation_matrix(correlation, dim).unwrap();
        let step = DenseMatrix::identity(dim).sub(&a.scale(2.0 * cfg.step_size)).unwrap();
        let x0 = exp.initial_state().node(0).to_vec();
        let mut probe = Stream::seed_from_u64(0);
        let x_star: Vec<f64> = {
            // The optimum is the fixed point of a gradient step.
            let g = exp.objective(0).stochastic_grad(&x0, &mut probe);
            let inv = a.scale(2.0);
            let v = solve_spd(&inv, &g);
            x0.iter().zip(&v).map(|(x, d)| x - d).collect()
        };
        let mut v: Vec<f64> = x0.iter().zip(&x_star).map(|(a, b)| a - b).collect();
        for _ in 0..(cfg.rounds * cfg.local_steps) {
            v = step.matvec(&v).unwrap();
        }
        let expected_loss = exp.objective(0).loss(&x_star.iter().zip(&v).map(|(a, b)| a + b).collect::<Vec<_>>());
        let got = out.trace.last().unwrap().global_loss;
        assert!((got - expected_loss).abs() < 1e-10, "{got} vs {expected_loss}");
    }

    /// Gaussian elimination, test-only.
    fn solve_spd(a: &DenseMatrix, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = (0..n).map(|i| {
            let mut r = a.row(i).to_vec();
            r.push(b[i]);
            r
        }).collect();
        for c in 0..n {
            let piv = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
            m.swap(c, piv);
            for r in 0..n {
                if r != c {
                    let f = m[r][c] / m[c][c];
                    for k in c..=n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
        (0..n).map(|i| m[i][n] / m[i][i]).collect()
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = quad_config();
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.final_state, b.final_state);
    }

    #[test]
    fn metrics_cadence_keeps_final_round() {
        let mut cfg = quad_config();
        cfg.rounds = 7;
        cfg.metrics_every = 3;
        let out = run(&cfg).unwrap();
        let rounds: Vec<usize> = out.trace.rows().iter().map(|r| r.round).collect();
        assert_eq!(rounds, vec![3, 6, 7]);
        let mut dense = cfg.clone();
        dense.metrics_every = 1;
        let full = run(&dense).unwrap();
        assert_eq!(full.final_state, out.final_state);
        assert_eq!(full.trace.rows()[5], out.trace.rows()[1]);
    }

    #[test]
    fn divergence_names_round() {
        let mut cfg = quad_config();
        cfg.step_size = 50.0;
        cfg.local_steps = 50;
        match run(&cfg) {
            Err(Error::Divergence { round, eta, .. }) => {
                assert_eq!(eta, 50.0);
                assert!(round < cfg.rounds);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn micro_testset_hand_evaluation() {
        // Two features, two classes, no bias. Node 0 scores class c by
        // feature c; node 1 by the opposite feature.
        let test = Dataset::new(2, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 1.0], vec![0, 1, 1]).unwrap();
        let model = LinearSoftmax {
            classes: 2,
            dim: 2,
            bias: false,
        };
        let eval = accuracy_evaluator(model, test);
        let s = StackedState::from_nodes(vec![vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 0.0]]).unwrap();
        // Node 0 predicts (0, 1, 0): 2/3 correct. Node 1 predicts (1, 0, 1): 1/3.
        let per = metrics::per_node_perf(&s, eval.as_ref());
        assert!((per[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((per[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((metrics::node_average_eval(&s, eval.as_ref()) - 0.5).abs() < 1e-15);
        // The average model scores both classes equally on every sample and
        // breaks ties toward class 0: (0, 0, 0) gives 1/3.
        assert!((metrics::model_average_eval(&s, eval.as_ref()) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_at_optimum_scores_zero() {
        let cfg = quad_config();
        let exp = Experiment::build(&cfg).unwrap();
        let TaskSpec::Quadratic { .. } = cfg.task else { unreachable!() };
        let mut rng = Stream::seed_from_u64(0);
        let probe = exp.initial_state().node(0).to_vec();
        let g = exp.objective(0).stochastic_grad(&probe, &mut rng);
        let a = make_correlation_matrix(CorrelationKind::Toeplitz { rho: 0.5 }, 4).unwrap();
        let v = solve_spd(&a.scale(2.0), &g);
        let x_star: Vec<f64> = probe.iter().zip(&v).map(|(x, d)| x - d).collect();
        let s = StackedState::from_nodes(vec![x_star.clone(); 4]).unwrap();
        assert!(metrics::node_average_eval(&s, exp.evaluator()) < 1e-20);
        assert!(exp.global_loss(&s) < 1e-20);
    }

    #[test]
    fn state_csv_has_one_row_per_node() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.csv");
        grid(3, 2).write_csv(&path, Some("seed = 1")).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# seed = 1");
        assert_eq!(lines[1], "node,x0,x1");
        assert_eq!(lines.len(), 5);
    }
}
