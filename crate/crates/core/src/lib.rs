pub mod hosvd;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod segnet;
pub mod synth;
pub mod train;
