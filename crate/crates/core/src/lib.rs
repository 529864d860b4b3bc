//! Differentially private fine-tuning of small pretrained networks.
//!
//! The crate bundles a minimal per-example neural-network substrate, DP-SGD
//! step machinery, a Renyi-DP accountant with noise calibration, layer
//! selection strategies for fine-tuning, dataset tooling and an experiment
//! harness that sweeps strategies over privacy budgets.

pub mod accountant;
pub mod data;
pub mod finetune;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod tensor;

pub use tensor::Tensor;
