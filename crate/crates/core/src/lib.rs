pub mod ablation;
pub mod aggregate;
pub mod array_file;
pub mod autograd;
pub mod config;
pub mod decoder;
pub mod efficiency;
pub mod encoders;
pub mod error;
pub mod export;
pub mod hrm;
pub mod kv;
pub mod nn;
pub mod sdm;
pub mod tensor;
pub mod train;
pub mod types;
pub mod model;
