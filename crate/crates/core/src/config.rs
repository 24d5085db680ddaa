//! TOML configuration files for training runs, spectral studies and sweeps.
//!
//! Every file carries `schema_version = 1` at the top level. Unknown keys
//! are rejected. See the README for annotated examples.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fragmentation::FragmentScheme;
use crate::tasks::{CorrelationKind, Heterogeneity};
use crate::topology::TopologyMode;

pub const SCHEMA_VERSION: u32 = 1;

fn schema_v1() -> u32 {
    SCHEMA_VERSION
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn unit() -> f64 {
    1.0
}

/// Starting point of every node: `scale * N(0, I)`, either one draw shared
/// by all nodes or an independent draw per node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    #[serde(default = "unit")]
    pub scale: f64,
    #[serde(default)]
    pub shared: bool,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            scale: 1.0,
            shared: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Identical quadratic at every node; the optimum is `optimum_scale * N(0, I)`.
    Quadratic {
        dim: usize,
        correlation: CorrelationKind,
        #[serde(default = "unit")]
        optimum_scale: f64,
    },
    /// Linear softmax on Gaussian blobs, split over nodes by `alpha`.
    Classification {
        classes: usize,
        feature_dim: usize,
        per_class: usize,
        test_per_class: usize,
        spread: f64,
        batch_size: usize,
        alpha: Heterogeneity,
        #[serde(default = "yes")]
        bias: bool,
    },
}

impl TaskSpec {
    /// Length of the model vector.
    pub fn param_dim(&self) -> usize {
        match *self {
            TaskSpec::Quadratic { dim, .. } => dim,
            TaskSpec::Classification {
                classes,
                feature_dim,
                bias,
                ..
            } => classes * feature_dim + if bias { classes } else { 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_v1")]
    pub schema_version: u32,
    pub seed: u64,
    pub nodes: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub step_size: f64,
    pub fragments: usize,
    #[serde(default)]
    pub fragment_scheme: FragmentScheme,
    pub topology: TopologyMode,
    /// Reuse the round-0 matrices in every round.
    #[serde(default)]
    pub static_topology: bool,
    #[serde(default = "one")]
    pub metrics_every: usize,
    pub task: TaskSpec,
    #[serde(default)]
    pub init: InitSpec,
}

impl ExperimentConfig {
    pub fn param_dim(&self) -> usize {
        self.task.param_dim()
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.schema_version)?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.nodes == 0 {
            return bad("nodes must be >= 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.local_steps == 0 {
            return bad("local_steps must be >= 1".into());
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return bad(format!("step_size must be finite and >= 0, got {}", self.step_size));
        }
        if self.metrics_every == 0 {
            return bad("metrics_every must be >= 1".into());
        }
        let d = self.param_dim();
        if d == 0 {
            return bad("model dimension must be >= 1".into());
        }
        if self.fragments == 0 || self.fragments > d || d % self.fragments != 0 {
            return bad(format!(
                "fragments = {} must divide the model dimension {d}",
                self.fragments
            ));
        }
        if !(self.init.scale >= 0.0) {
            return bad("init.scale must be >= 0".into());
        }
        check_topology(self.topology, self.nodes)?;
        if let TaskSpec::Classification {
            classes,
            feature_dim,
            per_class,
            test_per_class,
            spread,
            batch_size,
            alpha,
            ..
        } = self.task
        {
            if classes == 0 || feature_dim < classes || per_class == 0 || test_per_class == 0 {
                return bad("classification needs 1 <= classes <= feature_dim and non-zero sample counts".into());
            }
            if classes * per_class < self.nodes {
                return bad(format!(
                    "{} training samples cannot cover {} nodes",
                    classes * per_class,
                    self.nodes
                ));
            }
            if batch_size == 0 || !(spread >= 0.0) {
                return bad("batch_size must be >= 1 and spread >= 0".into());
            }
            if let Heterogeneity::Dirichlet(a) = alpha {
                if !(a > 0.0) || !a.is_finite() {
                    return bad(format!("alpha must be \"iid\" or a positive number, got {a}"));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = parse_versioned(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

fn check_topology(mode: TopologyMode, n: usize) -> Result<()> {
    match mode {
        TopologyMode::ElLocal { out_degree } if n < 2 || out_degree == 0 || out_degree >= n => {
            Err(Error::Config(format!(
                "el_local out_degree = {out_degree} needs 1 <= out_degree <= nodes - 1 (nodes = {n})"
            )))
        }
        TopologyMode::Regular { degree } if degree >= n || (degree * n) % 2 != 0 => {
            Err(Error::Config(format!(
                "regular degree = {degree} is infeasible on {n} nodes"
            )))
        }
        _ => Ok(()),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_versioned<T: DeserializeOwned>(text: &str) -> Result<T> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if !table.contains_key("schema_version") {
        return Err(Error::Config("missing required key `schema_version`".into()));
    }
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

/// Step size used by spectral studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSizePolicy {
    /// `1 / (4 λ_max(A))`, written as the string `"auto"`.
    Auto(AutoTag),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl StepSizePolicy {
    pub const AUTO: StepSizePolicy = StepSizePolicy::Auto(AutoTag::Auto);

    pub fn resolve(&self, lambda_max: f64) -> f64 {
        match *self {
            StepSizePolicy::Auto(_) => 1.0 / (4.0 * lambda_max),
            StepSizePolicy::Fixed(eta) => eta,
        }
    }
}

impl Default for StepSizePolicy {
    fn default() -> Self {
        Self::AUTO
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    pub schema_version: u32,
    pub nodes: usize,
    pub dim: usize,
    pub fragment_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Length of the consensus-error recursion.
    pub rounds: usize,
    pub topology: TopologyMode,
    pub correlations: Vec<CorrelationKind>,
    #[serde(default)]
    pub fragment_scheme: FragmentScheme,
    #[serde(default)]
    pub step_size: StepSizePolicy,
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        check_version(self.schema_version)?;
        if self.nodes == 0 || self.dim == 0 {
            return Err(Error::Config("nodes and dim must be >= 1".into()));
        }
        if self.fragment_counts.is_empty() || self.seeds.is_empty() || self.correlations.is_empty() {
            return Err(Error::Config(
                "fragment_counts, seeds and correlations must be non-empty".into(),
            ));
        }
        if let Some(k) = self
            .fragment_counts
            .iter()
            .find(|&&k| k == 0 || k > self.dim || self.dim % k != 0)
        {
            return Err(Error::Config(format!(
                "fragment count {k} does not divide dim = {}",
                self.dim
            )));
        }
        if let StepSizePolicy::Fixed(eta) = self.step_size {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(Error::Config(format!("step_size must be > 0, got {eta}")));
            }
        }
        check_topology(self.topology, self.nodes)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = parse_versioned(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Axes of a sweep; absent axes keep the base experiment's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub fragments: Vec<usize>,
    #[serde(default)]
    pub degrees: Vec<usize>,
    #[serde(default)]
    pub alphas: Vec<Heterogeneity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub schema_version: u32,
    pub experiment: ExperimentConfig,
    pub sweep: SweepAxes,
}

/// One point of a sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub index: usize,
    pub fragments: usize,
    pub degree: Option<usize>,
    pub alpha: Option<Heterogeneity>,
    pub config: ExperimentConfig,
}

impl SweepCell {
    pub fn name(&self) -> String {
        let mut name = format!("cell{:03}_K{}", self.index, self.fragments);
        if let Some(d) = self.degree {
            name.push_str(&format!("_deg{d}"));
        }
        if let Some(a) = self.alpha {
            name.push_str(&format!("_alpha{}", a.label()));
        }
        name
    }
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = parse_versioned(text)?;
        check_version(cfg.schema_version)?;
        cfg.experiment.validate()?;
        if !cfg.sweep.degrees.is_empty() && cfg.experiment.topology.degree().is_none() {
            return Err(Error::Config(
                "sweep.degrees needs an el_local or regular topology".into(),
            ));
        }
        if !cfg.sweep.alphas.is_empty()
            && !matches!(cfg.experiment.task, TaskSpec::Classification { .. })
        {
            return Err(Error::Config("sweep.alphas needs a classification task".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Cartesian product of the axes, fragments varying slowest.
    /// Cells are not validated here; invalid cells fail when run.
    pub fn cells(&self) -> Vec<SweepCell> {
        let base = &self.experiment;
        let ks: Vec<usize> = if self.sweep.fragments.is_empty() {
            vec![base.fragments]
        } else {
            self.sweep.fragments.clone()
        };
        let degrees: Vec<Option<usize>> = if self.sweep.degrees.is_empty() {
            vec![None]
        } else {
            self.sweep.degrees.iter().copied().map(Some).collect()
        };
        let alphas: Vec<Option<Heterogeneity>> = if self.sweep.alphas.is_empty() {
            vec![None]
        } else {
            self.sweep.alphas.iter().copied().map(Some).collect()
        };
        let mut cells = Vec::new();
        for &k in &ks {
            for &degree in &degrees {
                for &alpha in &alphas {
                    let mut config = base.clone();
                    config.fragments = k;
                    if let Some(d) = degree {
                        config.topology = config.topology.with_degree(d);
                    }
                    if let (Some(a), TaskSpec::Classification { alpha: slot, .. }) =
                        (alpha, &mut config.task)
                    {
                        *slot = a;
                    }
                    cells.push(SweepCell {
                        index: cells.len(),
                        fragments: k,
                        degree,
                        alpha,
                        config,
                    });
                }
            }
        }
        cells
    }
}
