//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the lines show up in plain `cargo test` output.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use domino_core::collectives::TPGroup;
use domino_core::config::ExperimentConfig;
use domino_core::cost::{build_schedule, model_size};
use domino_core::engine::comm_volume;
use domino_core::experiment::{simulate_records, SimRecord};
use domino_core::schedule::{BlockLayout, EventKind, Mode, PartitionPlan, Scheme};
use domino_core::tensor::Tensor;
use domino_core::verify::{audit_dag_dependencies, run_equivalence_grid, wrong_axis_diagnostic, GridSpec, Tolerances};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned thresholds.
const FORWARD_ABS: f64 = 1e-9;
const GRAD_ABS: f64 = 1e-9;
const FD_REL: f64 = 1e-6;
const GRID_SECONDS: f64 = 60.0;
const RATIO_BAND: (f64, f64) = (0.15, 0.50);
const ORDER_SLACK: f64 = 1e-12;
const ROW_SPEEDUP_BAND: (f64, f64) = (1.05, 1.4);
const ROW_VS_OPTIMAL_MIN: f64 = 0.85;
const COL_HIDDEN_BAND: (f64, f64) = (0.4, 0.8);
const SIZE_REL: f64 = 0.05;

// Parameter counts of public GPT-3 shapes, computed by hand from
// 12 l h^2 + 13 l h + (V + s) h with V = 50257 and s = 2048.
const FIXTURES: [(&str, u64, u64, u128, f64); 2] = [
    ("GPT-3 6.7B", 4096, 32, 6_658_396_160, 6.7e9),
    ("GPT-3 13B", 5120, 40, 12_853_376_000, 13.0e9),
];

type Outcome = Result<String, String>;

fn check(ok: bool, pass: String, fail: impl FnOnce() -> String) -> Outcome {
    if ok { Ok(pass) } else { Err(fail()) }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs().join(name)).expect("bundled config loads")
}

fn ac1_equivalence() -> Outcome {
    let tol = Tolerances { forward_abs: FORWARD_ABS, grad_abs: GRAD_ABS, fd_rel: FD_REL, ..Tolerances::default() };
    let spec = GridSpec::default();
    let t0 = Instant::now();
    let reports = run_equivalence_grid(&spec, &tol, 11).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let schemes: std::collections::BTreeSet<_> = reports.iter().map(|r| r.scheme.clone()).collect();
    let bad: Vec<_> = reports.iter().filter(|r| !r.pass).collect();
    let worst = |f: fn(&domino_core::verify::EquivalenceReport) -> f64| reports.iter().map(f).fold(0.0, f64::max);
    let summary = format!(
        "{} points, schemes {:?}, max fwd {:.1e}, max grad {:.1e}, max fd {:.1e}, {:.1} s",
        reports.len(),
        schemes,
        worst(|r| r.max_abs_forward_diff),
        worst(|r| r.max_abs_grad_diff),
        worst(|r| r.fd_rel_err),
        secs
    );
    check(bad.is_empty() && schemes.len() == 4 && secs <= GRID_SECONDS, summary.clone(), || {
        format!("{summary}; {} failing, first {:?}", bad.len(), bad.first())
    })
}

fn ac2_volume() -> Outcome {
    let points = GridSpec::default().points();
    let mut problems = Vec::new();
    for p in &points {
        let planned = comm_volume(&p.plan, &p.shape).map_err(|e| e.to_string())?.total();
        let base = comm_volume(&PartitionPlan::baseline(), &p.shape).map_err(|e| e.to_string())?.total();
        let dag = build_schedule(&p.shape, &p.plan, p.mode).map_err(|e| e.to_string())?;
        if planned != base || dag.total_comm_bytes() != base * p.shape.layers as u64 {
            problems.push(format!("{} {}", p.mode, p.plan));
        }
        let w = wrong_axis_diagnostic(&p.shape).map_err(|e| e.to_string())?;
        if w.wrong_axis_bytes != (p.shape.n * p.shape.n) as u64 * w.baseline_bytes {
            problems.push(format!("wrong axis at n={}", p.shape.n));
        }
    }
    // Bytes the engine actually pushed through the group.
    for (mode, plan) in [
        (Mode::SyncBaseline, PartitionPlan::baseline()),
        (Mode::DominoRow, PartitionPlan::row(2)),
        (Mode::DominoCol, PartitionPlan::col(4)),
        (Mode::DominoHybrid, PartitionPlan::hybrid(2, 2)),
    ] {
        let shape = common::small_shape(2, 8, 8, 16, 2, BlockLayout::PreNorm);
        let (mut e, _, x, d) = common::engine(shape, 0.1, 4);
        let run = e.run(&x, &d, &plan, mode).map_err(|e| e.to_string())?;
        if run.payload_bytes != 2 * 4 * shape.activation_bytes() {
            problems.push(format!("engine {mode} moved {}", run.payload_bytes));
        }
    }
    check(problems.is_empty(), format!("{} grid points integer-equal, wrong axis = N^2 x baseline", points.len()), || problems.join(", "))
}

fn ac3_allreduce() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut problems = Vec::new();
    let mut cases = 0;
    for n in 1..=8usize {
        for len in [n, 3 * n, 5 * n, 64 * n] {
            let bufs: Vec<Tensor> = (0..n)
                .map(|_| Tensor::new(vec![len], (0..len).map(|_| rng.random_range(-1e3..1e3)).collect()).unwrap())
                .collect();
            // Direct elementwise sum in ascending rank order.
            let mut direct = vec![0.0f64; len];
            direct.copy_from_slice(bufs[0].data());
            for b in &bufs[1..] {
                for (a, v) in direct.iter_mut().zip(b.data()) {
                    *a += v;
                }
            }
            let mut g = TPGroup::with_dtype_bytes(n, rng.random(), 2);
            let h = g.allreduce_sum_async("ac3", bufs).unwrap();
            g.wait(&h).unwrap();
            for t in g.take(h).unwrap() {
                if t.data().iter().zip(&direct).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    problems.push(format!("sum mismatch n={n} len={len}"));
                }
            }
            let rec = &g.records()[0];
            let payload = (len * 2) as u64;
            if rec.payload_bytes != payload || rec.bytes_sent.iter().any(|&b| b * n as u64 != 2 * (n as u64 - 1) * payload) {
                problems.push(format!("bytes n={n} len={len}: {:?}", rec.bytes_sent));
            }
            cases += 1;
        }
    }
    check(problems.is_empty(), format!("{cases} ring reductions bit-exact, 2(N-1)/N bytes per worker"), || problems.join(", "))
}

fn ac4_schedule() -> Outcome {
    let shape = common::small_shape(1, 4, 4, 16, 2, BlockLayout::PreNorm);
    let (mut e, _, x, d) = common::engine(shape, 0.0, 1);
    let run = e.run(&x, &d, &PartitionPlan::row(2), Mode::DominoRow).map_err(|e| e.to_string())?;
    let golden = [
        "fwd.attn[0.0]", "fwd.ar.attn[0.0]", "fwd.attn[0.1]", "fwd.ar.attn[0.1]",
        "wait:fwd.ar.attn[0.0]", "fwd.mid[0.0]", "wait:fwd.ar.attn[0.1]", "fwd.mid[0.1]",
        "fwd.mlp[0.0]", "fwd.ar.mlp[0.0]", "fwd.mlp[0.1]", "fwd.ar.mlp[0.1]",
        "wait:fwd.ar.mlp[0.0]", "fwd.out[0.0]", "wait:fwd.ar.mlp[0.1]", "fwd.out[0.1]",
        "bwd.mlp.dgrad[0.0]", "bwd.ar.mlp[0.0]", "bwd.mlp.wgrad[0.0]",
        "bwd.mlp.dgrad[0.1]", "bwd.ar.mlp[0.1]", "bwd.mlp.wgrad[0.1]",
    ];
    let labels = run.dag.labels();
    if labels.len() < golden.len() || labels[..golden.len()] != golden {
        return Err(format!("trace differs: {:?}", &labels[..golden.len().min(labels.len())]));
    }
    let mut audited = 0;
    let mut problems = Vec::new();
    for layers in [1, 2] {
        let shape = common::small_shape(layers, 8, 8, 16, 2, BlockLayout::PreNorm);
        for (mode, plan) in [
            (Mode::DominoRow, PartitionPlan::row(2)),
            (Mode::DominoRow, PartitionPlan::row(4)),
            (Mode::DominoCol, PartitionPlan::col(2)),
            (Mode::DominoHybrid, PartitionPlan::hybrid(2, 2)),
            (Mode::MegatronAsync, PartitionPlan::baseline()),
        ] {
            let (mut e, _, x, d) = common::engine(shape, 0.1, 2);
            let dag = e.run(&x, &d, &plan, mode).map_err(|e| e.to_string())?.dag;
            let items = audit_dag_dependencies(&dag, &plan, mode);
            let want: &[&str] = match plan.scheme {
                Scheme::RowInput => &["no_cross_micro_edges", "no_barriers", "backward_issue_order"],
                Scheme::ColWeight | Scheme::Hybrid => &["cross_micro_only_via_barriers", "concat_barriers", "backward_issue_order"],
                Scheme::Baseline => &["backward_issue_order"],
            };
            for w in want {
                if !items.iter().any(|a| a.name == *w && a.pass) {
                    problems.push(format!("{mode} {plan}: {w}"));
                }
            }
            if matches!(plan.scheme, Scheme::ColWeight | Scheme::Hybrid)
                && !dag.events().iter().any(|e| matches!(e.kind, EventKind::Barrier))
            {
                problems.push(format!("{mode} {plan}: no barrier"));
            }
            audited += 1;
        }
    }
    check(problems.is_empty(), format!("golden trace matches, {audited} executed DAGs audited"), || problems.join(", "))
}

fn sim(name: &str) -> Result<Vec<SimRecord>, String> {
    simulate_records(&load(name)).map_err(|e| e.to_string())
}

fn ac5_comm_ratio() -> Outcome {
    let rows = sim("gpt13b.toml")?;
    let sync: Vec<&SimRecord> = rows.iter().filter(|r| r.mode == Mode::SyncBaseline).collect();
    let ratios: Vec<f64> = sync.iter().map(|r| r.comm_ratio).collect();
    let nodes: Vec<usize> = sync.iter().map(|r| r.nodes).collect();
    let mono = ratios.windows(2).all(|w| w[0] < w[1]);
    let band = ratios.iter().all(|r| (RATIO_BAND.0..=RATIO_BAND.1).contains(r));
    let text = format!("GPT-13B nodes {nodes:?}: sync comm ratio {:?}", ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>());
    check(mono && band && nodes == [1, 2, 4], text.clone(), || text)
}

fn ac6_speedup() -> Outcome {
    let mut problems = Vec::new();
    let mut single = Vec::new();
    for name in ["gpt13b.toml", "gpt6.7b.toml"] {
        let rows = sim(name)?;
        for chunk in rows.chunks(Mode::ALL.len()) {
            let t = |m: Mode| chunk.iter().find(|r| r.mode == m).unwrap().iter_time_s;
            let domino = [Mode::DominoRow, Mode::DominoCol, Mode::DominoHybrid].map(t).into_iter().fold(f64::INFINITY, f64::min);
            let (opt, meg, sync) = (t(Mode::OptimalNoComm), t(Mode::MegatronAsync), t(Mode::SyncBaseline));
            let at = format!("{name} n{} s{} b{}", chunk[0].nodes, chunk[0].seq, chunk[0].micro_batch);
            if !(opt <= domino + ORDER_SLACK && domino <= meg + ORDER_SLACK && meg <= sync + ORDER_SLACK) {
                problems.push(format!("{at}: order opt {opt:.4e} domino {domino:.4e} meg {meg:.4e} sync {sync:.4e}"));
            }
            if chunk[0].nodes == 1 {
                let row = chunk.iter().find(|r| r.mode == Mode::DominoRow).unwrap();
                single.push((row.speedup_vs_sync, row.speedup_vs_optimal));
                if !(ROW_SPEEDUP_BAND.0..=ROW_SPEEDUP_BAND.1).contains(&row.speedup_vs_sync) || row.speedup_vs_optimal < ROW_VS_OPTIMAL_MIN {
                    problems.push(format!("{at}: row speedup {:.3}, vs optimal {:.3}", row.speedup_vs_sync, row.speedup_vs_optimal));
                }
            }
        }
    }
    let lo = single.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let hi = single.iter().map(|s| s.0).fold(0.0, f64::max);
    let opt = single.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    check(
        problems.is_empty() && !single.is_empty(),
        format!("ordering holds; {} single-node configs: row speedup {lo:.3}..{hi:.3}, vs optimal >= {opt:.3}", single.len()),
        || problems.join("; "),
    )
}

fn ac7_hiding() -> Outcome {
    let mut problems = Vec::new();
    let mut col = Vec::new();
    let mut n = 0;
    for name in ["gpt13b.toml", "gpt6.7b.toml"] {
        for chunk in sim(name)?.chunks(Mode::ALL.len()).filter(|c| c[0].nodes == 1) {
            let h = |m: Mode| chunk.iter().find(|r| r.mode == m).unwrap().hidden_fraction;
            let (row, c) = (h(Mode::DominoRow), h(Mode::DominoCol));
            let at = format!("{name} s{} b{}", chunk[0].seq, chunk[0].micro_batch);
            if row != 1.0 {
                problems.push(format!("{at}: row hidden {row}"));
            }
            if !(COL_HIDDEN_BAND.0..=COL_HIDDEN_BAND.1).contains(&c) || c > row {
                problems.push(format!("{at}: col hidden {c:.3}"));
            }
            col.push(c);
            n += 1;
        }
    }
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(0.0, f64::max);
    check(problems.is_empty() && n > 0, format!("{n} single-node configs: row hidden = 1.0, col hidden {lo:.3}..{hi:.3}"), || problems.join("; "))
}

fn ac8_model_size() -> Outcome {
    let toy = model_size(1, 1, 11, 1).map_err(|e| e.clone())?;
    let mut parts = vec![format!("model_size(1,1,11,1) = {toy}")];
    let mut ok = toy == 37;
    for (name, h, l, frozen, nominal) in FIXTURES {
        let v = model_size(h, l, 50257, 2048)?;
        let rel = (v as f64 - nominal).abs() / nominal;
        ok &= v == frozen && rel <= SIZE_REL;
        parts.push(format!("{name} {v} ({:+.2}% of nominal)", 100.0 * (v as f64 - nominal) / nominal));
    }
    let text = parts.join(", ");
    check(ok, text.clone(), || text)
}

fn ac9_determinism() -> Outcome {
    let bin = PathBuf::from(env!("CARGO_BIN_EXE_domino"));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let verify_cfg = dir.path().join("verify.toml");
    std::fs::write(
        &verify_cfg,
        "seed = 5\n[verify.grid]\nworkers = [2, 4]\nbatch = [4]\nseq = [8]\nhidden = [16, 32]\nlayouts = [\"pre_norm\", \"post_norm\"]\n",
    )
    .map_err(|e| e.to_string())?;
    let mut sizes = Vec::new();
    for (cmd, cfg, fmt) in [
        ("simulate", configs().join("gpt13b.toml"), "csv"),
        ("simulate", configs().join("gpt6.7b.toml"), "jsonl"),
        ("sweep", configs().join("gpt6.7b.toml"), "csv"),
        ("verify", verify_cfg.clone(), "csv"),
    ] {
        let mut outs = Vec::new();
        for k in 0..2 {
            let out = dir.path().join(format!("{cmd}.{k}.{fmt}"));
            let st = Command::new(&bin)
                .args([cmd, "--config", cfg.to_str().unwrap(), "--seed", "9", "--format", fmt, "--out", out.to_str().unwrap()])
                .output()
                .map_err(|e| e.to_string())?;
            if !st.status.success() {
                return Err(format!("{cmd} exited {:?}: {}", st.status.code(), String::from_utf8_lossy(&st.stderr)));
            }
            outs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
        }
        if outs[0] != outs[1] || outs[0].is_empty() {
            return Err(format!("{cmd} {fmt} outputs differ"));
        }
        sizes.push(format!("{cmd}/{fmt} {} B", outs[0].len()));
    }
    Ok(format!("byte-identical reruns: {}", sizes.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("AC1 equivalence grid", ac1_equivalence),
        ("AC2 volume invariance", ac2_volume),
        ("AC3 allreduce", ac3_allreduce),
        ("AC4 schedule fidelity", ac4_schedule),
        ("AC5 comm ratio", ac5_comm_ratio),
        ("AC6 speedup ordering", ac6_speedup),
        ("AC7 hiding fractions", ac7_hiding),
        ("AC8 model size", ac8_model_size),
        ("AC9 determinism", ac9_determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(msg) => println!("{name}: PASS ({msg})"),
            Err(msg) => {
                failed += 1;
                println!("{name}: FAIL ({msg})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
