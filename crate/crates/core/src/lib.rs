pub mod adversary;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod sim;
pub mod tensor;
