#![allow(dead_code)]

use domino_core::engine::{BlockParams, EngineConfig, TpEngine};
use domino_core::schedule::{BlockLayout, BlockShape, EventKind, ScheduleDag};
use domino_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn small_shape(layers: usize, batch: usize, seq: usize, hidden: usize, n: usize, layout: BlockLayout) -> BlockShape {
    BlockShape { layers, batch, seq, hidden, heads: 4, ffn: 4 * hidden, n, dtype_bytes: 8, layout }
}

/// Engine with random parameters, plus an input and an output gradient.
pub fn engine(shape: BlockShape, dropout: f64, seed: u64) -> (TpEngine, Vec<BlockParams>, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<BlockParams> = (0..shape.layers).map(|_| BlockParams::random(shape.hidden, shape.ffn, &mut rng)).collect();
    let rows = shape.rows();
    let x = Tensor::random(&[rows, shape.hidden], 1.0, &mut rng);
    let d_out = Tensor::random(&[rows, shape.hidden], 1.0, &mut rng);
    let cfg = EngineConfig { shape, dropout, eps: 1e-5, mask_seed: seed ^ 0xD0 };
    (TpEngine::new(cfg, &params, seed).unwrap(), params, x, d_out)
}

/// Copy of `dag` with `edit` applied to each event's dependency list.
pub fn rewire(dag: &ScheduleDag, mut edit: impl FnMut(usize, &str, &mut Vec<usize>)) -> ScheduleDag {
    let mut out = ScheduleDag::new();
    for e in dag.events() {
        let mut deps = e.deps.clone();
        edit(e.id, &e.label, &mut deps);
        out.push(e.label.clone(), e.kind.clone(), e.lane, e.micro, deps);
    }
    out
}

pub fn is_barrier(k: &EventKind) -> bool {
    matches!(k, EventKind::Barrier)
}
