//! Degradation-aware multi-view feature enhancement.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors and a define-by-run reverse-mode tape.
//! * [`degrade`]: deterministic synthesis of six degradation kinds.
//! * [`ssm`]: ZOH discretization, sequential/parallel scans, selective scan.
//! * [`router`]: Gumbel-softmax semantic routing and token reordering.
//! * [`gendeg`]: the degradation-representation learner and its losses.
//! * [`mvssem`]: the multi-view state-space enhancement network.
//! * [`harness`]: optimizer, metrics, persistence, training and evaluation.

pub mod degrade;
pub mod error;
pub mod gendeg;
pub mod harness;
pub mod mvssem;
pub mod nn;
pub mod rng;
pub mod router;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{ParamId, ParamStore, Tape, Tensor, Var};
