//! Evaluation metrics, the EL-Local mixing constant, and CSV traces.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::engine::StackedState;
use crate::error::{Error, Result};

pub const TRACE_HEADER: [&str; 6] = [
    "round",
    "node_avg",
    "model_avg",
    "consensus_dist",
    "node_stddev",
    "global_loss",
];

/// Mixing constant of EL-Local gossip with out-degree `s` on `n` nodes:
/// `(1/s)(1 - (1 - s/(n-1))^n) - 1/(n-1)`.
pub fn beta_s(s: usize, n: usize) -> Result<f64> {
    if n < 2 || s == 0 || s > n - 1 {
        return Err(Error::InvalidArgument(format!(
            "beta_s needs n >= 2 and 1 <= s <= n-1 (got s={s}, n={n})"
        )));
    }
    let (s, m) = (s as f64, (n - 1) as f64);
    Ok((1.0 - (1.0 - s / m).powi(n as i32)) / s - 1.0 / m)
}

/// Mean Euclidean distance of node models from the network-average model.
pub fn consensus_distance(states: &StackedState) -> f64 {
    let mean = states.mean();
    let total: f64 = (0..states.nodes())
        .map(|i| {
            states
                .node(i)
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / states.nodes() as f64
}

/// Squared norm of the stacked deviation `‖X - X̄‖²`.
pub fn consensus_sq(states: &StackedState) -> f64 {
    let mean = states.mean();
    (0..states.nodes())
        .map(|i| {
            states
                .node(i)
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

/// `(1/n²) Σ_{i,j} ‖x_i - x_j‖²`, computed as `(2/n) ‖X - X̄‖²`.
pub fn pairwise_disagreement(states: &StackedState) -> f64 {
    2.0 * consensus_sq(states) / states.nodes() as f64
}

/// Population standard deviation.
pub fn node_perf_stddev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Scores one parameter vector: accuracy for classifiers, loss for the
/// quadratic task.
pub trait Evaluator: Sync {
    fn perf(&self, x: &[f64]) -> f64;
}

pub fn per_node_perf(states: &StackedState, eval: &dyn Evaluator) -> Vec<f64> {
    (0..states.nodes()).map(|i| eval.perf(states.node(i))).collect()
}

pub fn node_average_eval(states: &StackedState, eval: &dyn Evaluator) -> f64 {
    let perf = per_node_perf(states, eval);
    perf.iter().sum::<f64>() / perf.len() as f64
}

pub fn model_average_eval(states: &StackedState, eval: &dyn Evaluator) -> f64 {
    eval.perf(&states.mean())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub node_avg: f64,
    pub model_avg: f64,
    pub consensus_dist: f64,
    pub node_stddev: f64,
    pub global_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTrace {
    rows: Vec<MetricsRow>,
}

impl MetricsTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.round <= last.round {
                return Err(Error::InvalidArgument(format!(
                    "round {} recorded after round {}",
                    row.round, last.round
                )));
            }
        }
        if row.consensus_dist < 0.0 || row.node_stddev < 0.0 {
            return Err(Error::InvalidArgument("negative distance or deviation".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Formats a real with 17 significant digits, enough to round-trip any f64.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `# `-prefixed comment lines.
pub fn write_comment(out: &mut impl Write, comment: &str) -> std::io::Result<()> {
    for line in comment.lines() {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

/// Writes the trace as CSV, preceded by `comment` as `#` lines.
pub fn write_trace(trace: &MetricsTrace, path: &Path, comment: Option<&str>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(c) = comment {
        write_comment(&mut out, c).map_err(io)?;
    }
    writeln!(out, "{}", TRACE_HEADER.join(",")).map_err(io)?;
    for r in trace.rows() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            fmt_real(r.node_avg),
            fmt_real(r.model_avg),
            fmt_real(r.consensus_dist),
            fmt_real(r.node_stddev),
            fmt_real(r.global_loss)
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_trace(path: &Path) -> Result<MetricsTrace> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(Error::csv(path, format!("unexpected header {header:?}")));
    }
    let mut trace = MetricsTrace::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let real = |i: usize| -> Result<f64> { rec[i].parse().map_err(|e| Error::csv(path, e)) };
        trace.push(MetricsRow {
            round: rec[0].parse().map_err(|e| Error::csv(path, e))?,
            node_avg: real(1)?,
            model_avg: real(2)?,
            consensus_dist: real(3)?,
            node_stddev: real(4)?,
            global_loss: real(5)?,
        })?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn states(rows: &[&[f64]]) -> StackedState {
        StackedState::from_nodes(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn beta_examples() {
        for n in 2..=50 {
            assert!(beta_s(n - 1, n).unwrap().abs() < 1e-15);
        }
        assert_eq!(beta_s(1, 2).unwrap(), 0.0);
        assert!((beta_s(1, 3).unwrap() - 0.375).abs() < 1e-15);
        assert!(beta_s(0, 3).is_err());
        assert!(beta_s(3, 3).is_err());
        assert!(beta_s(1, 1).is_err());
    }

    #[test]
    fn beta_range_scan() {
        for n in (2..=10_000).step_by(37).chain([9_999, 10_000]) {
            for s in [1, 2, 3, n / 2, n - 1] {
                if s == 0 || s > n - 1 {
                    continue;
                }
                let b = beta_s(s, n).unwrap();
                assert!((-1e-15..1.0).contains(&b), "beta_{s}(n={n}) = {b}");
            }
        }
    }

    #[test]
    fn consensus_distance_examples() {
        assert_eq!(consensus_distance(&states(&[&[1.0, 2.0], &[1.0, 2.0]])), 0.0);
        assert_eq!(consensus_distance(&states(&[&[0.0], &[2.0]])), 1.0);
        let a = states(&[&[0.0, 1.0], &[2.0, -1.0], &[5.0, 3.0]]);
        let b = states(&[&[10.0, -6.0], &[12.0, -8.0], &[15.0, -4.0]]);
        assert!((consensus_distance(&a) - consensus_distance(&b)).abs() < 1e-12);
    }

    #[test]
    fn stddev_examples() {
        assert_eq!(node_perf_stddev(&[0.3, 0.3, 0.3]), 0.0);
        assert_eq!(node_perf_stddev(&[0.0, 2.0]), 1.0);
        assert_eq!(node_perf_stddev(&[1.0, 4.0, 2.0]), node_perf_stddev(&[4.0, 2.0, 1.0]));
    }

    struct SumEval;
    impl Evaluator for SumEval {
        fn perf(&self, x: &[f64]) -> f64 {
            x.iter().sum()
        }
    }

    #[test]
    fn identical_nodes_give_equal_averages() {
        let s = states(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(node_average_eval(&s, &SumEval), model_average_eval(&s, &SumEval));
    }

    #[test]
    fn trace_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let empty = MetricsTrace::new();
        write_trace(&empty, &path, None).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().trim(), TRACE_HEADER.join(","));

        let mut t = MetricsTrace::new();
        for r in 1..=3 {
            t.push(MetricsRow {
                round: r * 5,
                node_avg: 0.1 * r as f64 + 1e-17,
                model_avg: std::f64::consts::PI / r as f64,
                consensus_dist: 1.0 / 3.0,
                node_stddev: 2f64.sqrt(),
                global_loss: 1e-300,
            })
            .unwrap();
        }
        write_trace(&t, &path, Some("schema_version = 1\nseed = 3")).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# schema_version = 1\n# seed = 3\n"));
        let back = read_trace(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.len(), 3);
    }

    #[test]
    fn trace_rejects_non_increasing_rounds() {
        let row = MetricsRow {
            round: 2,
            node_avg: 0.0,
            model_avg: 0.0,
            consensus_dist: 0.0,
            node_stddev: 0.0,
            global_loss: 0.0,
        };
        let mut t = MetricsTrace::new();
        t.push(row).unwrap();
        assert!(t.push(row).is_err());
    }

    proptest! {
        #[test]
        fn consensus_zero_iff_equal(
            base in proptest::collection::vec(-5.0f64..5.0, 3),
            delta in -1.0f64..1.0,
            node in 0usize..4,
        ) {
            let mut rows: Vec<Vec<f64>> = vec![base.clone(); 4];
            rows[node][1] += delta;
            let s = StackedState::from_nodes(rows).unwrap();
            let dist = consensus_distance(&s);
            if delta == 0.0 {
                prop_assert!(dist == 0.0);
            } else {
                prop_assert!(dist > 1e-12 * delta.abs().min(1.0) || delta.abs() < 1e-12);
            }
        }

        #[test]
        fn stddev_bounded_by_range(values in proptest::collection::vec(-100.0f64..100.0, 1..20)) {
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(node_perf_stddev(&values) <= max - min + 1e-12);
        }
    }
}
