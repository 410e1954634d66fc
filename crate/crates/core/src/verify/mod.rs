//! Oracles for the engine: a scalar-loop single-device reference, finite
//! differences, byte counters and audits of the executed event DAG.

mod reference;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::build_schedule;
use crate::engine::{comm_volume, wrong_axis_volume, BlockParams, EngineConfig, EngineError, TpEngine};
use crate::schedule::{BlockLayout, BlockShape, EventKind, Mode, PartitionPlan, ScheduleDag, Scheme};
use crate::tensor::Tensor;

pub use reference::{single_device_reference, Reference};

/// Pass thresholds of an equivalence report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub forward_abs: f64,
    pub grad_abs: f64,
    pub fd_rel: f64,
    pub fd_eps: f64,
    /// Lower bound on the denominator of the finite-difference relative error.
    pub fd_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { forward_abs: 1e-9, grad_abs: 1e-9, fd_rel: 1e-6, fd_eps: 1e-3, fd_floor: 1e-3 }
    }
}

/// Axes of the equivalence grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub workers: Vec<usize>,
    pub p1: Vec<usize>,
    pub p2: Vec<usize>,
    pub batch: Vec<usize>,
    pub seq: Vec<usize>,
    pub hidden: Vec<usize>,
    pub heads: usize,
    pub ffn_mult: usize,
    pub layers: usize,
    pub layouts: Vec<BlockLayout>,
    pub dropout: f64,
    pub eps: f64,
    /// Coordinates probed per parameter tensor by the finite-difference check.
    pub fd_probes: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            workers: vec![2, 4],
            p1: vec![1, 2, 4],
            p2: vec![1, 2, 4],
            batch: vec![4, 8],
            seq: vec![8, 16],
            hidden: vec![16, 32],
            heads: 4,
            ffn_mult: 4,
            layers: 1,
            layouts: vec![BlockLayout::PreNorm],
            dropout: 0.1,
            eps: 1e-5,
            fd_probes: 2,
        }
    }
}

/// One executable point of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub mode: Mode,
    pub plan: PartitionPlan,
    pub shape: BlockShape,
}

impl GridSpec {
    /// Every (mode, plan, dims, N) combination the divisibility rules allow.
    /// `p1 = p2 = 1` runs both baseline modes.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &layout in &self.layouts {
            for &n in &self.workers {
                for &batch in &self.batch {
                    for &seq in &self.seq {
                        for &hidden in &self.hidden {
                            let shape = BlockShape {
                                layers: self.layers,
                                batch,
                                seq,
                                hidden,
                                heads: self.heads,
                                ffn: self.ffn_mult * hidden,
                                n,
                                dtype_bytes: 8,
                                layout,
                            };
                            if shape.validate().is_err() || self.heads % n != 0 {
                                continue;
                            }
                            for &p1 in &self.p1 {
                                for &p2 in &self.p2 {
                                    let runs: Vec<(Mode, PartitionPlan)> = match (p1, p2) {
                                        (1, 1) => vec![
                                            (Mode::SyncBaseline, PartitionPlan::baseline()),
                                            (Mode::MegatronAsync, PartitionPlan::baseline()),
                                        ],
                                        (_, 1) => vec![(Mode::DominoRow, PartitionPlan::row(p1))],
                                        (1, _) => vec![(Mode::DominoCol, PartitionPlan::col(p2))],
                                        _ => vec![(Mode::DominoHybrid, PartitionPlan::hybrid(p1, p2))],
                                    };
                                    for (mode, plan) in runs {
                                        if plan.validate(batch, hidden).is_ok() {
                                            out.push(GridPoint { mode, plan, shape });
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditItem {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl AuditItem {
    fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), pass, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub mode: String,
    pub scheme: String,
    pub layout: BlockLayout,
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
    pub dag_audit: Vec<AuditItem>,
    pub pass: bool,
}

impl EquivalenceReport {
    pub fn failed_audits(&self) -> Vec<&str> {
        self.dag_audit.iter().filter(|a| !a.pass).map(|a| a.name.as_str()).collect()
    }
}

fn ancestors(dag: &ScheduleDag, id: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![id];
    while let Some(v) = stack.pop() {
        for &d in &dag.get(v).deps {
            if seen.insert(d) {
                stack.push(d);
            }
        }
    }
    seen
}

fn with_prefix<'a>(dag: &'a ScheduleDag, prefix: &'a str) -> impl Iterator<Item = usize> + 'a {
    dag.events().iter().filter(move |e| e.label.starts_with(prefix)).map(|e| e.id)
}

/// Check the dependency rules of `plan` on an executed DAG, over every edge.
pub fn audit_dag_dependencies(dag: &ScheduleDag, plan: &PartitionPlan, mode: Mode) -> Vec<AuditItem> {
    let mut out = Vec::new();
    out.push(match dag.validate() {
        Ok(()) => AuditItem::new("well_formed", true, "acyclic, every collective waited once"),
        Err(e) => AuditItem::new("well_formed", false, e.to_string()),
    });

    // Edges joining events of two different μ-batches.
    let mut cross = Vec::new();
    for e in dag.events() {
        for &d in &e.deps {
            let dep = dag.get(d);
            if let (Some(a), Some(b)) = (e.micro, dep.micro) {
                if a != b {
                    cross.push(format!("{} -> {}", dep.label, e.label));
                }
            }
        }
    }
    let barriers: Vec<&str> = dag
        .events()
        .iter()
        .filter(|e| matches!(e.kind, EventKind::Barrier))
        .map(|e| e.label.as_str())
        .collect();
    if plan.scheme == Scheme::RowInput || plan.scheme == Scheme::Baseline {
        out.push(AuditItem::new("no_cross_micro_edges", cross.is_empty(), cross.join("; ")));
        out.push(AuditItem::new("no_barriers", barriers.is_empty(), barriers.join("; ")));
    } else {
        // Cross-μ-batch coupling may only happen through barriers.
        out.push(AuditItem::new("cross_micro_only_via_barriers", cross.is_empty(), cross.join("; ")));
    }

    if matches!(plan.scheme, Scheme::ColWeight | Scheme::Hybrid) {
        let mut problems = Vec::new();
        let layers = dag.events().iter().filter(|e| e.label.starts_with("fwd.mid[")).filter_map(|e| block_of(&e.label)).max().map_or(0, |b| b + 1);
        for b in 0..layers {
            for sub in ["attn", "mlp"] {
                let bar_label = format!("sync:fwd.{sub}[{b}]");
                let Some(bar) = dag.find(&bar_label) else {
                    problems.push(format!("missing {bar_label}"));
                    continue;
                };
                let parts: Vec<usize> = with_prefix(dag, &format!("fwd.ar.{sub}[{b}.")).collect();
                if parts.len() != plan.p1 * plan.p2 {
                    problems.push(format!("{bar_label}: {} partial outputs", parts.len()));
                }
                for p in parts {
                    if !bar.deps.contains(&p) {
                        problems.push(format!("{} not into {bar_label}", dag.get(p).label));
                    }
                }
                let next: Vec<String> = match sub {
                    "attn" => (0..plan.p1).map(|m| format!("fwd.mid[{b}.{m}]")).collect(),
                    _ if b + 1 < layers => (0..plan.p1).map(|m| format!("fwd.attn[{}.{m}]", b + 1)).collect(),
                    _ => (0..plan.p1).map(|m| format!("fwd.out[{b}.{m}]")).collect(),
                };
                for l in next {
                    match dag.find(&l) {
                        Some(e) if ancestors(dag, e.id).contains(&bar.id) => {}
                        _ => problems.push(format!("{l} not ordered after {bar_label}")),
                    }
                }
            }
            if plan.scheme == Scheme::Hybrid {
                for sub in ["mlp", "attn"] {
                    let bar_label = format!("sync:bwd.{sub}[{b}]");
                    let Some(bar) = dag.find(&bar_label) else {
                        problems.push(format!("missing {bar_label}"));
                        continue;
                    };
                    for p in with_prefix(dag, &format!("bwd.ar.{sub}[{b}.")) {
                        if !bar.deps.contains(&p) {
                            problems.push(format!("{} not into {bar_label}", dag.get(p).label));
                        }
                    }
                }
            }
        }
        out.push(AuditItem::new("concat_barriers", problems.is_empty(), problems.join("; ")));
    }

    // Backward issue order within each μ-batch.
    let pos = |l: &str| dag.find(l).map(|e| e.id);
    let mut order_problems = Vec::new();
    let mut checked = 0;
    for e in dag.events() {
        let Some(rest) = e.label.strip_prefix("bwd.ar.") else { continue };
        let (sub, idx) = rest.split_once('[').unwrap_or((rest, ""));
        let dg = pos(&format!("bwd.{sub}.dgrad[{idx}"));
        let wg = pos(&format!("bwd.{sub}.wgrad[{idx}"));
        let ok = match (dg, wg) {
            (Some(d), Some(w)) if mode == Mode::SyncBaseline => d < w && w < e.id,
            (Some(d), Some(w)) => d < e.id && e.id < w,
            _ => false,
        };
        checked += 1;
        if !ok {
            order_problems.push(e.label.clone());
        }
    }
    let rule = if mode == Mode::SyncBaseline { "dgrad < wgrad < allreduce" } else { "dgrad < allreduce < wgrad" };
    out.push(AuditItem::new(
        "backward_issue_order",
        order_problems.is_empty() && checked > 0,
        if order_problems.is_empty() { format!("{checked} collectives: {rule}") } else { order_problems.join("; ") },
    ));
    out
}

fn block_of(label: &str) -> Option<usize> {
    let inner = label.split_once('[')?.1;
    inner.split(['.', ']']).next()?.parse().ok()
}

/// Events must agree in label, kind, stream, μ-batch and dependencies.
pub fn compare_dags(a: &ScheduleDag, b: &ScheduleDag) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("{} events vs {}", a.len(), b.len()));
    }
    for (x, y) in a.events().iter().zip(b.events()) {
        if x != y {
            return Err(format!("first difference at event {}: `{}` vs `{}`", x.id, x.label, y.label));
        }
    }
    Ok(())
}

/// Largest relative error between finite differences of `loss` and the
/// analytic gradient, at the coordinates `probes` of `params`.
///
/// Uses the fourth-order central stencil
/// `(-L(+2e) + 8 L(+e) - 8 L(-e) + L(-2e)) / 12e`. The relative error of one
/// coordinate is `|fd - g| / max(|fd|, |g|, floor)`.
pub fn finite_difference_check<F>(loss: F, params: &[f64], analytic: &[f64], probes: &[usize], eps: f64, floor: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for &i in probes {
        let orig = p[i];
        let mut at = |d: f64| {
            p[i] = orig + d;
            loss(&p)
        };
        // Differences of symmetric pairs first, so a flat direction gives 0.
        let d1 = at(eps) - at(-eps);
        let d2 = at(2.0 * eps) - at(-2.0 * eps);
        let fd = (8.0 * d1 - d2) / (12.0 * eps);
        p[i] = orig;
        let g = analytic[i];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(floor);
        worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    worst
}

fn point_seed(seed: u64, p: &GridPoint) -> u64 {
    let s = &p.shape;
    let mut h = seed ^ 0x5851_F42D_4C95_7F2D;
    for v in [s.n, s.batch, s.seq, s.hidden, s.layers, s.layout as usize, p.plan.p1, p.plan.p2, p.mode as usize] {
        h = (h ^ v as u64).wrapping_mul(0x100_0000_01B3).rotate_left(23);
    }
    h
}

fn flatten(x: &Tensor, params: &[BlockParams]) -> Vec<f64> {
    let mut v = x.data().to_vec();
    for p in params {
        for t in p.tensors() {
            v.extend_from_slice(t.data());
        }
    }
    v
}

fn unflatten(v: &[f64], x: &Tensor, params: &[BlockParams]) -> (Tensor, Vec<BlockParams>) {
    let mut x = x.clone();
    let mut off = x.len();
    x.data_mut().copy_from_slice(&v[..off]);
    let mut ps = params.to_vec();
    for p in &mut ps {
        for t in p.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
    }
    (x, ps)
}

/// Run one grid point against the oracles.
pub fn run_point(point: &GridPoint, spec: &GridSpec, tol: &Tolerances, seed: u64) -> Result<EquivalenceReport, EngineError> {
    let s = point.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(point_seed(seed, point));
    let cfg = EngineConfig { shape: s, dropout: spec.dropout, eps: spec.eps, mask_seed: rng.random() };
    let params: Vec<BlockParams> = (0..s.layers).map(|_| BlockParams::random(s.hidden, s.ffn, &mut rng)).collect();
    let x = Tensor::random(&[s.rows(), s.hidden], 1.0, &mut rng);
    let g = Tensor::random(&[s.rows(), s.hidden], 1.0, &mut rng);
    let group_seed: u64 = rng.random();

    let oracle = single_device_reference(&cfg, &params, &x, &g)?;
    let mut engine = TpEngine::new(cfg, &params, group_seed)?;
    let run = engine.run(&x, &g, &point.plan, point.mode)?;

    let fwd = run.outputs.iter().map(|y| y.max_abs_diff(&oracle.y)).fold(0.0, f64::max);
    let mut grad = run.d_input.iter().map(|d| d.max_abs_diff(&oracle.d_x)).fold(0.0, f64::max);
    for (a, b) in run.grads.iter().zip(&oracle.grads) {
        grad = grad.max(a.max_abs_diff(b));
    }

    let planned = comm_volume(&point.plan, &s)?.total() * s.layers as u64;
    let baseline = comm_volume(&PartitionPlan::baseline(), &s)?.total() * s.layers as u64;
    let volume_match = run.payload_bytes == planned && planned == baseline && run.dag.total_comm_bytes() == baseline;

    // Finite differences of L = Σ y ⊙ g through the engine's own forward pass.
    let flat = flatten(&x, &params);
    let analytic = flatten(&run.d_input[0], &run.grads);
    let mut probes = Vec::new();
    let mut off = 0;
    let mut sizes = vec![x.len()];
    for p in &params {
        sizes.extend(p.tensors().iter().map(|t| t.len()));
    }
    for len in sizes {
        for _ in 0..spec.fd_probes {
            probes.push(off + rng.random_range(0..len));
        }
        off += len;
    }
    let loss = |v: &[f64]| -> f64 {
        let (xp, pp) = unflatten(v, &x, &params);
        let mut e = TpEngine::new(cfg, &pp, group_seed).expect("same shapes as the checked run");
        let y = e.forward(&xp, &point.plan, point.mode).expect("same plan as the checked run");
        y[0].dot(&g).expect("same shape")
    };
    let fd = finite_difference_check(loss, &flat, &analytic, &probes, tol.fd_eps, tol.fd_floor);

    let mut audit = audit_dag_dependencies(&run.dag, &point.plan, point.mode);
    let expected = build_schedule(&s, &point.plan, point.mode)?;
    audit.push(match compare_dags(&run.dag, &expected) {
        Ok(()) => AuditItem::new("matches_cost_model_schedule", true, format!("{} events", run.dag.len())),
        Err(e) => AuditItem::new("matches_cost_model_schedule", false, e),
    });
    let pass = fwd <= tol.forward_abs
        && grad <= tol.grad_abs
        && fd <= tol.fd_rel
        && volume_match
        && run.replicas_agree
        && audit.iter().all(|a| a.pass);
    Ok(EquivalenceReport {
        mode: point.mode.name().to_string(),
        scheme: format!("{:?}", point.plan.scheme),
        layout: s.layout,
        layers: s.layers,
        batch: s.batch,
        seq: s.seq,
        hidden: s.hidden,
        heads: s.heads,
        n: s.n,
        p1: point.plan.p1,
        p2: point.plan.p2,
        max_abs_forward_diff: fwd,
        max_abs_grad_diff: grad,
        fd_rel_err: fd,
        volume_match,
        replicas_agree: run.replicas_agree,
        dag_audit: audit,
        pass,
    })
}

/// Reports for every grid point, in grid order. Points run in parallel.
pub fn run_equivalence_grid(spec: &GridSpec, tol: &Tolerances, seed: u64) -> Result<Vec<EquivalenceReport>, EngineError> {
    spec.points().par_iter().map(|p| run_point(p, spec, tol, seed)).collect()
}

/// Volume of the rejected column split of `X` next to the baseline volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrongAxisReport {
    pub n: usize,
    pub baseline_bytes: u64,
    pub wrong_axis_bytes: u64,
}

pub fn wrong_axis_diagnostic(shape: &BlockShape) -> Result<WrongAxisReport, EngineError> {
    Ok(WrongAxisReport {
        n: shape.n,
        baseline_bytes: comm_volume(&PartitionPlan::baseline(), shape)?.total(),
        wrong_axis_bytes: wrong_axis_volume(shape),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dropout, matmul, DropoutMask};

    #[test]
    fn fd_quadratic_matmul() {
        // L = ||X W||² / 2 over W.
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, -0.5, 0.3]).unwrap();
        let w = vec![0.2, -0.7, 1.1, 0.4];
        let loss = |v: &[f64]| {
            let y = matmul(&x, &Tensor::new(vec![2, 2], v.to_vec()).unwrap()).unwrap();
            0.5 * y.dot(&y).unwrap()
        };
        let y = matmul(&x, &Tensor::new(vec![2, 2], w.clone()).unwrap()).unwrap();
        let g = matmul(&x.transpose().unwrap(), &y).unwrap();
        let err = finite_difference_check(loss, &w, g.data(), &[0, 1, 2, 3], 1e-5, 1e-12);
        assert!(err <= 1e-8, "{err}");
        // A sign flip in the backward must be caught.
        let flipped: Vec<f64> = g.data().iter().map(|v| -v).collect();
        assert!(finite_difference_check(loss, &w, &flipped, &[0, 1, 2, 3], 1e-5, 1e-12) > 1.0);
    }

    #[test]
    fn fd_with_fixed_dropout_mask() {
        let mask = DropoutMask::generate(4, &[1, 4], 0.5).unwrap();
        let loss = |v: &[f64]| {
            let t = Tensor::new(vec![1, 4], v.iter().map(|a| a * a).collect()).unwrap();
            dropout(&t, &mask).unwrap().sum()
        };
        let p = vec![0.3, -1.2, 0.8, 2.0];
        let g: Vec<f64> = p.iter().zip(mask.mask().data()).map(|(a, m)| 2.0 * a * m * mask.keep_scale()).collect();
        assert!(finite_difference_check(loss, &p, &g, &[0, 1, 2, 3], 1e-5, 1e-12) <= 1e-8);
    }

    #[test]
    fn grid_points_cover_every_scheme() {
        let pts = GridSpec::default().points();
        for mode in [Mode::SyncBaseline, Mode::MegatronAsync, Mode::DominoRow, Mode::DominoCol, Mode::DominoHybrid] {
            assert!(pts.iter().any(|p| p.mode == mode), "{mode}");
        }
        assert!(pts.iter().all(|p| p.plan.validate(p.shape.batch, p.shape.hidden).is_ok()));
    }

    #[test]
    fn wrong_axis_is_n_squared() {
        for n in [2, 3, 4] {
            let shape = BlockShape { layers: 1, batch: 4, seq: 8, hidden: 12 * n, heads: n, ffn: 48 * n, n, dtype_bytes: 4, layout: BlockLayout::PreNorm };
            let r = wrong_axis_diagnostic(&shape).unwrap();
            assert_eq!(r.wrong_axis_bytes, (n * n) as u64 * r.baseline_bytes);
        }
    }
}
