//! Small reverse-mode automatic differentiation engine over dense `f64`
//! tensors, with the convolution, normalization and classification
//! primitives needed by the networks in `fbnet`.
//!
//! A [`Graph`] is a per-step tape. Parameters live in [`ParamSet`]s outside
//! the tape and are exposed to it through a [`Binding`]; after
//! [`Graph::backward`] the binding collects named gradients that an
//! optimizer such as [`Adam`] applies back to the set.

mod graph;
mod ops;
mod optim;
mod params;
mod tensor;

pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use ops::ConvSpec;
pub use optim::{Adam, AdamState};
pub use params::{Binding, ParamSet};
pub use tensor::Tensor;
