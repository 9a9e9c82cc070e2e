//! Grammar-guided evolution of learning-rate optimizers and schedules.

pub mod bench;
pub mod data;
pub mod dsge;
pub mod evolve;
pub mod grammar;
pub mod hyperopt;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sched;
pub mod standard;
pub mod tensor;
