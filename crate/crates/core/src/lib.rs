pub mod corpus;
pub mod dsp;
pub mod mcem;
pub mod metrics;
pub mod nmf;
pub mod vae;
