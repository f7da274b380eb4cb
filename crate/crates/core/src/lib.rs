//! SimO loss and anchor-free contrastive learning on a small reverse-mode
//! autodiff engine.
//!
//! * [`diff`]: tensors and a tape with gradients for every op the model uses.
//! * [`simo`]: the ratio-form similarity/orthogonality loss.
//! * [`semimetric`]: the induced pair functions and executable property checks.
//! * [`model`]: the MLP encoder, classifier head and checkpoint format.
//! * [`afcl`]: class-structured batches, the three-term loss and training.
//! * [`data`]: synthetic clusters and the CIFAR-10 record format.
//! * [`diagnostics`]: similarity matrices, effective rank and exports.
//! * [`cli`]: the `simo` command-line tool.

pub mod afcl;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod diff;
pub mod model;
pub mod optim;
pub mod semimetric;
pub mod simo;
