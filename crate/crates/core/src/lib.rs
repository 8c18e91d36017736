//! Hybrid attention / selective-SSM language models on a small reverse-mode
//! tensor engine: conversion from attention, distillation, and greedy
//! speculative decoding with recurrent state snapshots.

pub mod autodiff;
pub mod checkpoint;
pub mod conversion;
pub mod corpus;
pub mod decode;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod speculative;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use model::{HybridLM, HybridModelSpec, LayerKind};
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type HybridLM32 = model::HybridLM<f32>;
pub type HybridLM64 = model::HybridLM<f64>;
pub type InferenceModel32 = decode::InferenceModel<f32>;
pub type InferenceModel64 = decode::InferenceModel<f64>;
