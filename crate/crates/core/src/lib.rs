pub mod scalar;
pub mod tensor;
pub mod fem;
pub mod geometry;
pub mod meshgen;
pub mod model;
pub mod sdf;
pub mod dataset;
pub mod train;
pub mod eval;
pub mod store;
pub mod report;
pub mod cli;
