//! Desk-scale laboratory for communication-hiding tensor parallelism.
//!
//! * [`tensor`]: dense `f64` kernels with explicit backward passes.
//! * [`collectives`]: a simulated tensor-parallel group with ring AllReduce.
//! * [`engine`]: baseline and sliced (row / column / hybrid) execution of
//!   transformer sub-layers and blocks over a simulated group.
//! * [`schedule`]: timed event DAGs shared by the engine and the cost model.
//! * [`cost`]: analytic kernel/collective timing and a discrete-event
//!   simulator over schedule DAGs.
//! * [`verify`]: single-device oracles, finite differences and DAG audits.
//! * [`config`] / [`experiment`]: strict experiment configs and the command
//!   runners behind the `domino` binary.

pub mod tensor;
pub mod collectives;
pub mod engine;
pub mod schedule;
pub mod cost;
pub mod verify;
pub mod config;
pub mod experiment;
