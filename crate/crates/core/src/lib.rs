pub mod dataset;
pub mod device;
pub mod eval;
pub mod gtmap;
pub mod nn;
pub mod oracle;
pub mod predictor;
pub mod seed;
