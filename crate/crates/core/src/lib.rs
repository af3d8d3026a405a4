//! Broad convolutional architecture search: cell grammar, broad network builder,
//! shared weight store, LSTM controller and the search loop.

pub mod builder;
pub mod cell;
pub mod checkpoint;
pub mod cli;
pub mod controller;
pub mod data;
pub mod exec;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod weights;
