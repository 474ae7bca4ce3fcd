//! Explicitly differentiated neural-network engine.
//!
//! Small, fixed architectures do not need a taped autograd system: every
//! operation here implements its forward pass and a hand-derived backward
//! pass, with [`gradcheck`] providing the finite-difference oracle that
//! keeps the derivatives honest. Dense math rides on `ndarray` matrix
//! multiplication; everything else is written out.
//!
//! * [`tensor`] — parameter storage with an accumulated gradient;
//! * [`ops`] — stateless ops (ReLU, log-softmax, point max-pooling);
//! * [`layers`] — parameterized layers (linear, batch norm, dropout);
//! * [`loss`] — class-balanced weights and weighted NLL;
//! * [`optim`] — Adam with bias correction and a plateau LR schedule;
//! * [`gradcheck`] — central finite differences and error reporting.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use tensor::Tensor;

/// Forward-pass mode: training uses batch statistics, dropout, and caches
/// for the backward pass; evaluation is deterministic and side-effect free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
