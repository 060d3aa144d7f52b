pub mod analysis;
pub mod certify;
pub mod cli;
pub mod config;
pub mod engine;
pub mod geometry;
pub mod kernels;
pub mod lyapunov;
pub mod manifest;
pub mod quadrature;
pub mod rates;
pub mod stats;
