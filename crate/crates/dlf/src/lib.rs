pub mod codec;
pub mod config;
pub mod dataset;
pub mod entropy;
pub mod eval;
pub mod error;
pub mod imageio;
pub mod network;
pub mod nn;
pub mod params;
pub mod quant;
pub mod training;
