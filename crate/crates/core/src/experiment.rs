//! Runners behind the `domino` binary: simulation tables, plan sweeps,
//! equivalence verification and model sizing. Output is CSV or JSON lines,
//! and the rows come out in the same order on every run.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, ModelConfig, SweepPoint};
use crate::cost::{comm_ratio, mode_schedule, model_size, simulate, TimelineResult};
use crate::engine::EngineError;
use crate::schedule::{Mode, PartitionPlan, ScheduleError};
use crate::verify::{run_point, EquivalenceReport};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    Jsonl,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(format!("unknown format `{other}` (expected csv or jsonl)")),
        }
    }
}

/// Write `rows` with a header (CSV) or one object per line (JSONL).
pub fn write_records<T: Serialize, W: Write>(rows: &[T], format: OutputFormat, mut out: W) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        OutputFormat::Jsonl => {
            for r in rows {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

/// One row of the `simulate` table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRecord {
    pub mode: Mode,
    pub nodes: usize,
    pub devices: usize,
    pub seq: usize,
    pub micro_batch: usize,
    pub p1: usize,
    pub p2: usize,
    pub iter_time_s: f64,
    pub comm_total_s: f64,
    pub comm_exposed_s: f64,
    pub comm_ratio: f64,
    pub hidden_fraction: f64,
    pub speedup_vs_sync: f64,
    pub speedup_vs_optimal: f64,
    pub config_hash: String,
}

/// One evaluated (mode, plan, graph flag) candidate.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub mode: Mode,
    pub plan: PartitionPlan,
    pub cuda_graph: bool,
    pub result: TimelineResult,
}

/// Every candidate of `mode` at a point, in plan then graph-axis order.
pub fn evaluate_mode(cfg: &ExperimentConfig, p: &SweepPoint, mode: Mode) -> Result<Vec<Candidate>> {
    let shape = cfg.shape_at(p)?;
    let mut out = Vec::new();
    for plan in cfg.candidate_plans(mode, p)? {
        let dag = mode_schedule(&shape, &plan, mode)?;
        for g in cfg.graph_axis() {
            let result = simulate(&dag, &cfg.cluster_at(p.nodes, g))?;
            out.push(Candidate { mode, plan, cuda_graph: g, result });
        }
    }
    Ok(out)
}

/// Fastest candidate; the first one wins ties.
pub fn best(cands: &[Candidate]) -> &Candidate {
    let mut b = &cands[0];
    for c in &cands[1..] {
        if c.result.iteration_time < b.result.iteration_time {
            b = c;
        }
    }
    b
}

fn sim_point(cfg: &ExperimentConfig, p: &SweepPoint, hash: &str) -> Result<Vec<SimRecord>> {
    let sync = evaluate_mode(cfg, p, Mode::SyncBaseline)?;
    let opt = evaluate_mode(cfg, p, Mode::OptimalNoComm)?;
    let t_sync = best(&sync).result.iteration_time;
    let t_opt = best(&opt).result.iteration_time;
    let mut rows = Vec::with_capacity(cfg.modes.len());
    for &mode in &cfg.modes {
        let cands = match mode {
            Mode::SyncBaseline => sync.clone(),
            Mode::OptimalNoComm => opt.clone(),
            _ => evaluate_mode(cfg, p, mode)?,
        };
        let c = best(&cands);
        let r = &c.result;
        rows.push(SimRecord {
            mode,
            nodes: p.nodes,
            devices: p.nodes * cfg.cluster.devices_per_node,
            seq: p.seq,
            micro_batch: p.micro_batch,
            p1: c.plan.p1,
            p2: c.plan.p2,
            iter_time_s: r.iteration_time,
            comm_total_s: r.comm_total,
            comm_exposed_s: r.comm_exposed,
            comm_ratio: comm_ratio(r),
            hidden_fraction: r.hidden_fraction,
            speedup_vs_sync: t_sync / r.iteration_time,
            speedup_vs_optimal: t_opt / r.iteration_time,
            config_hash: hash.to_string(),
        });
    }
    Ok(rows)
}

/// One row per (point, mode). Each mode reports its fastest plan and graph
/// setting; speedups are against the fastest sync and no-comm runs.
pub fn simulate_records(cfg: &ExperimentConfig) -> Result<Vec<SimRecord>> {
    let hash = cfg.hash();
    let points = cfg.sweep_points()?;
    let per_point: Vec<Vec<SimRecord>> =
        points.par_iter().map(|p| sim_point(cfg, p, &hash)).collect::<Result<_>>()?;
    Ok(per_point.into_iter().flatten().collect())
}

/// One ranked Domino candidate of the `sweep` table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub nodes: usize,
    pub devices: usize,
    pub seq: usize,
    pub micro_batch: usize,
    pub mode: Mode,
    pub p1: usize,
    pub p2: usize,
    pub cuda_graph: bool,
    pub iter_time_s: f64,
    pub comm_ratio: f64,
    pub speedup_vs_sync: f64,
    pub rank: usize,
    pub chosen: bool,
    pub config_hash: String,
}

fn sweep_point(cfg: &ExperimentConfig, p: &SweepPoint, hash: &str) -> Result<Vec<SweepRecord>> {
    let t_sync = best(&evaluate_mode(cfg, p, Mode::SyncBaseline)?).result.iteration_time;
    let mut cands = Vec::new();
    for &mode in cfg.modes.iter().filter(|m| m.is_domino()) {
        cands.extend(evaluate_mode(cfg, p, mode)?);
    }
    // Stable sort keeps config order among equal times.
    cands.sort_by(|a, b| a.result.iteration_time.total_cmp(&b.result.iteration_time));
    Ok(cands
        .iter()
        .enumerate()
        .map(|(i, c)| SweepRecord {
            nodes: p.nodes,
            devices: p.nodes * cfg.cluster.devices_per_node,
            seq: p.seq,
            micro_batch: p.micro_batch,
            mode: c.mode,
            p1: c.plan.p1,
            p2: c.plan.p2,
            cuda_graph: c.cuda_graph,
            iter_time_s: c.result.iteration_time,
            comm_ratio: comm_ratio(&c.result),
            speedup_vs_sync: t_sync / c.result.iteration_time,
            rank: i + 1,
            chosen: i == 0,
            config_hash: hash.to_string(),
        })
        .collect())
}

/// Every Domino candidate at every point, ranked fastest first per point.
pub fn sweep_records(cfg: &ExperimentConfig) -> Result<Vec<SweepRecord>> {
    let hash = cfg.hash();
    let points = cfg.sweep_points()?;
    let per_point: Vec<Vec<SweepRecord>> =
        points.par_iter().map(|p| sweep_point(cfg, p, &hash)).collect::<Result<_>>()?;
    Ok(per_point.into_iter().flatten().collect())
}

/// Flat form of an [`EquivalenceReport`] for tabular output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyRecord {
    pub mode: String,
    pub scheme: String,
    pub layout: String,
    pub layers: usize,
    pub batch: usize,
    pub seq: usize,
    pub hidden: usize,
    pub heads: usize,
    pub n: usize,
    pub p1: usize,
    pub p2: usize,
    pub max_abs_forward_diff: f64,
    pub max_abs_grad_diff: f64,
    pub fd_rel_err: f64,
    pub volume_match: bool,
    pub replicas_agree: bool,
    pub failed_audits: String,
    pub pass: bool,
    pub config_hash: String,
}

impl VerifyRecord {
    pub fn from_report(r: &EquivalenceReport, hash: &str) -> Self {
        Self {
            mode: r.mode.clone(),
            scheme: r.scheme.clone(),
            layout: serde_json::to_value(r.layout).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
            layers: r.layers,
            batch: r.batch,
            seq: r.seq,
            hidden: r.hidden,
            heads: r.heads,
            n: r.n,
            p1: r.p1,
            p2: r.p2,
            max_abs_forward_diff: r.max_abs_forward_diff,
            max_abs_grad_diff: r.max_abs_grad_diff,
            fd_rel_err: r.fd_rel_err,
            volume_match: r.volume_match,
            replicas_agree: r.replicas_agree,
            failed_audits: r.failed_audits().join(";"),
            pass: r.pass,
            config_hash: hash.to_string(),
        }
    }
}

/// Equivalence reports over the configured grid, restricted to `cfg.modes`.
pub fn verify_reports(cfg: &ExperimentConfig) -> Result<Vec<EquivalenceReport>> {
    let grid = &cfg.verify.grid;
    let points: Vec<_> = grid.points().into_iter().filter(|p| cfg.modes.contains(&p.mode)).collect();
    let reports = points
        .par_iter()
        .map(|p| run_point(p, grid, &cfg.verify.tolerances, cfg.seed))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(reports)
}

pub fn verify_records(cfg: &ExperimentConfig) -> Result<Vec<VerifyRecord>> {
    let hash = cfg.hash();
    Ok(verify_reports(cfg)?.iter().map(|r| VerifyRecord::from_report(r, &hash)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSizeRecord {
    pub name: String,
    pub hidden: usize,
    pub layers: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub params: u128,
    pub params_billion: f64,
}

pub fn model_size_record(name: &str, hidden: usize, layers: usize, vocab: usize, seq_len: usize) -> Result<ModelSizeRecord> {
    let params = model_size(hidden as u64, layers as u64, vocab as u64, seq_len as u64).map_err(ConfigError::Invalid)?;
    Ok(ModelSizeRecord {
        name: name.to_string(),
        hidden,
        layers,
        vocab,
        seq_len,
        params,
        params_billion: params as f64 / 1e9,
    })
}

impl ModelConfig {
    pub fn size_record(&self) -> Result<ModelSizeRecord> {
        model_size_record(self.name.as_deref().unwrap_or(""), self.hidden, self.layers, self.vocab, self.seq_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig::from_toml(
            r#"
            [model]
            hidden = 1024
            layers = 2
            heads = 16
            vocab = 1000
            seq_len = 256
            micro_batch = 4
            [sweep]
            nodes = [1, 2]
            p1 = [2, 4]
            cuda_graph = [false, true]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn simulate_rows_and_columns() {
        let cfg = small();
        let rows = simulate_records(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * Mode::ALL.len());
        let mut buf = Vec::new();
        write_records(&rows, OutputFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "mode,nodes,devices,seq,micro_batch,p1,p2,iter_time_s,comm_total_s,comm_exposed_s,comm_ratio,\
             hidden_fraction,speedup_vs_sync,speedup_vs_optimal,config_hash"
        );
        for r in &rows {
            assert!(r.speedup_vs_optimal <= 1.0 + 1e-12, "{r:?}");
            if r.mode == Mode::OptimalNoComm {
                assert_eq!(r.comm_ratio, 0.0);
            }
        }
    }

    #[test]
    fn sweep_ranks_each_point() {
        let cfg = small();
        let rows = sweep_records(&cfg).unwrap();
        for nodes in [1, 2] {
            let pts: Vec<_> = rows.iter().filter(|r| r.nodes == nodes).collect();
            assert_eq!(pts.iter().filter(|r| r.chosen).count(), 1);
            assert!(pts.windows(2).all(|w| w[0].iter_time_s <= w[1].iter_time_s));
            assert_eq!(pts.last().unwrap().rank, pts.len());
        }
    }

    #[test]
    fn jsonl_one_object_per_line() {
        let rec = model_size_record("toy", 1, 1, 6, 6).unwrap();
        assert_eq!(rec.params, 37);
        let mut buf = Vec::new();
        write_records(&[rec.clone(), rec], OutputFormat::Jsonl, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["params"], 37);
    }
}
