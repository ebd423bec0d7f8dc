//! Distillation-aware student architecture search.
//!
//! A teacher network's channels are wrapped in multiplicative gates; the
//! gate scaling factors and the network weights are optimized jointly — SGD
//! with momentum on the weights, an accelerated proximal gradient recursion
//! with FLOPs-weighted soft-thresholding on the gates — until the gated
//! model's effective FLOPs drop below a budget. The surviving subgraph is
//! extracted as a student architecture, which can then be trained from
//! scratch or under knowledge distillation from the teacher.
//!
//! Start with the runnable programs under `examples/`:
//!
//! ```text
//! cargo run --release -p gatesearch --example flops_report
//! cargo run --release -p gatesearch --example grad_check
//! cargo run --release -p gatesearch --example lasso_apg
//! cargo run --release -p gatesearch --example search_toy
//! cargo run --release -p gatesearch --example distill_student
//! cargo run --release -p gatesearch --example export_vis
//! ```
//!
//! The same functionality is scriptable through the `gatesearch` binary; see
//! [`cli`] and the repository README.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod graph;
pub mod losses;
pub mod optim;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
