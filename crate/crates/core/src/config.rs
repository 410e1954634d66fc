//! Experiment configuration files (TOML). Unknown keys are errors.
//!
//! ```toml
//! seed = 1
//! modes = ["SyncBaseline", "DominoRow"]
//!
//! [model]
//! hidden = 5120
//! layers = 40
//! heads = 40
//! vocab = 50257
//! seq_len = 1024
//! micro_batch = 8
//!
//! [cluster]
//! nodes = 1
//!
//! [sweep]
//! nodes = [1, 2, 4]
//! p1 = [2, 4]
//! cuda_graph = [false, true]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cost::ClusterSpec;
use crate::schedule::{BlockLayout, BlockShape, Mode, PartitionPlan};
use crate::verify::{GridSpec, Tolerances};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(m: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(m.into()))
}

fn default_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub cluster: ClusterSpec,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn four() -> usize {
    4
}

fn two() -> usize {
    2
}

/// GPT-style model dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Samples per iteration processed by the tensor-parallel group.
    pub micro_batch: usize,
    #[serde(default = "four")]
    pub ffn_mult: usize,
    #[serde(default = "two")]
    pub dtype_bytes: usize,
    #[serde(default)]
    pub layout: BlockLayout,
}

/// Slicing used by Domino modes when the sweep gives no `p1` / `p2` axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub p1: usize,
    pub p2: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { p1: 2, p2: 2 }
    }
}

/// Sweep axes. An empty axis means "the base value only".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub nodes: Vec<usize>,
    pub seq: Vec<usize>,
    pub micro_batch: Vec<usize>,
    pub p1: Vec<usize>,
    pub p2: Vec<usize>,
    pub cuda_graph: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub grid: GridSpec,
    pub tolerances: Tolerances,
}

/// One (nodes, seq, micro-batch) point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub nodes: usize,
    pub seq: usize,
    pub micro_batch: usize,
}

fn or_base<T: Copy>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    /// Truncated SHA-256 of the canonical JSON form of the whole config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn model(&self) -> Result<&ModelConfig, ConfigError> {
        self.model.as_ref().ok_or_else(|| ConfigError::Invalid("this command needs a [model] section".into()))
    }

    pub fn sweep_points(&self) -> Result<Vec<SweepPoint>, ConfigError> {
        let m = self.model()?;
        let mut out = Vec::new();
        for nodes in or_base(&self.sweep.nodes, self.cluster.nodes) {
            for seq in or_base(&self.sweep.seq, m.seq_len) {
                for micro_batch in or_base(&self.sweep.micro_batch, m.micro_batch) {
                    out.push(SweepPoint { nodes, seq, micro_batch });
                }
            }
        }
        Ok(out)
    }

    pub fn cluster_at(&self, nodes: usize, cuda_graph: bool) -> ClusterSpec {
        ClusterSpec { nodes, cuda_graph, ..self.cluster.clone() }
    }

    pub fn graph_axis(&self) -> Vec<bool> {
        or_base(&self.sweep.cuda_graph, self.cluster.cuda_graph)
    }

    pub fn shape_at(&self, p: &SweepPoint) -> Result<BlockShape, ConfigError> {
        let m = self.model()?;
        Ok(BlockShape {
            layers: m.layers,
            batch: p.micro_batch,
            seq: p.seq,
            hidden: m.hidden,
            heads: m.heads,
            ffn: m.ffn_mult * m.hidden,
            n: p.nodes * self.cluster.devices_per_node,
            dtype_bytes: m.dtype_bytes,
            layout: m.layout,
        })
    }

    /// Candidate plans of `mode` at a point, from the p1 / p2 axes (or the
    /// `[plan]` values when an axis is empty).
    pub fn candidate_plans(&self, mode: Mode, p: &SweepPoint) -> Result<Vec<PartitionPlan>, ConfigError> {
        let m = self.model()?;
        let p1s: Vec<usize> = or_base(&self.sweep.p1, self.plan.p1).into_iter().filter(|&v| v >= 2).collect();
        let p2s: Vec<usize> = or_base(&self.sweep.p2, self.plan.p2).into_iter().filter(|&v| v >= 2).collect();
        let plans: Vec<PartitionPlan> = match mode {
            Mode::SyncBaseline | Mode::MegatronAsync | Mode::OptimalNoComm => vec![PartitionPlan::baseline()],
            Mode::DominoRow => p1s.iter().map(|&a| PartitionPlan::row(a)).collect(),
            Mode::DominoCol => p2s.iter().map(|&b| PartitionPlan::col(b)).collect(),
            Mode::DominoHybrid => p1s.iter().flat_map(|&a| p2s.iter().map(move |&b| PartitionPlan::hybrid(a, b))).collect(),
        };
        let plans: Vec<PartitionPlan> = plans.into_iter().filter(|pl| pl.validate(p.micro_batch, m.hidden).is_ok()).collect();
        if plans.is_empty() {
            return invalid(format!(
                "no valid partition for {mode} at micro_batch {} (p1 axis {p1s:?}, p2 axis {p2s:?})",
                p.micro_batch
            ));
        }
        Ok(plans)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.modes.is_empty() {
            return invalid("modes must not be empty");
        }
        self.cluster.validate().map_err(ConfigError::Invalid)?;
        if self.sweep.nodes.contains(&0) || self.sweep.seq.contains(&0) || self.sweep.micro_batch.contains(&0) {
            return invalid("sweep axes must hold positive values");
        }
        if self.plan.p1 == 0 || self.plan.p2 == 0 || self.sweep.p1.contains(&0) || self.sweep.p2.contains(&0) {
            return invalid("partition counts must be positive");
        }
        let g = &self.verify.grid;
        let t = &self.verify.tolerances;
        if [t.forward_abs, t.grad_abs, t.fd_rel, t.fd_eps, t.fd_floor].iter().any(|v| !(*v > 0.0)) {
            return invalid("verify tolerances must be positive");
        }
        if !(0.0..1.0).contains(&g.dropout) || !(g.eps > 0.0) || g.layers == 0 {
            return invalid("verify grid needs dropout in [0, 1), positive eps and layers");
        }
        if let Some(m) = &self.model {
            if [m.hidden, m.layers, m.heads, m.vocab, m.seq_len, m.micro_batch, m.ffn_mult, m.dtype_bytes].contains(&0) {
                return invalid("model dimensions must be positive");
            }
            for p in self.sweep_points()? {
                let shape = self.shape_at(&p)?;
                shape.validate().map_err(|e| ConfigError::Invalid(format!("at {p:?}: {e}")))?;
                for &mode in &self.modes {
                    self.candidate_plans(mode, &p)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        seed = 3
        [model]
        hidden = 1024
        layers = 2
        heads = 16
        vocab = 1000
        seq_len = 128
        micro_batch = 4
    "#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(c.modes, Mode::ALL.to_vec());
        assert_eq!(c.cluster, ClusterSpec::dgx_h100(1));
        assert_eq!(c.sweep_points().unwrap().len(), 1);
        assert_eq!(c.model().unwrap().ffn_mult, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = format!("{BASE}\nbatch_sise = 3\n");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(ConfigError::Parse(_))));
        let bad = BASE.replace("layers = 2", "layers = 2\nlayer = 3");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = format!("{BASE}\n[cluster]\nintra_bandwidth = 1.0\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn divisibility_checked() {
        let bad = BASE.replace("micro_batch = 4", "micro_batch = 3");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(ConfigError::Invalid(_))));
        let bad = BASE.replace("hidden = 1024", "hidden = 1020");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = ExperimentConfig::from_toml(BASE).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.cluster.inter_bw = 200.0;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn candidate_plans_follow_axes() {
        let text = format!("{BASE}\n[sweep]\np1 = [1, 2, 4]\np2 = [2]\n");
        let c = ExperimentConfig::from_toml(&text).unwrap();
        let p = c.sweep_points().unwrap()[0];
        assert_eq!(c.candidate_plans(Mode::DominoRow, &p).unwrap(), vec![PartitionPlan::row(2), PartitionPlan::row(4)]);
        assert_eq!(
            c.candidate_plans(Mode::DominoHybrid, &p).unwrap(),
            vec![PartitionPlan::hybrid(2, 2), PartitionPlan::hybrid(4, 2)]
        );
        assert_eq!(c.candidate_plans(Mode::MegatronAsync, &p).unwrap(), vec![PartitionPlan::baseline()]);
    }
}
