//! Graph neural network vulnerability detection over code property graphs:
//! graph ingestion, BPE tokenization, a small autodiff engine, the model and
//! its training and evaluation protocols.

pub mod codetok;
pub mod dataset;
pub mod features;
pub mod graph_ir;
pub mod model;
pub mod nn;
pub mod protocol;
pub mod synthetic;
pub mod tensor;
pub mod train;
