pub mod checksum;
pub mod config;
pub mod cube;
pub mod entropy;
pub mod error;
pub mod line_predictor;
pub mod nn;
pub mod rwkv;
pub mod spectral;
pub mod weights;
pub mod pipeline;
pub mod codec;
pub mod report;
pub mod bench;
pub mod selftest;
