//! Communicative message passing transformer (CoMPT) for molecular
//! property prediction: SMILES parsing, featurization, a small reverse-mode
//! tensor engine, the encoder itself, dataset handling and training.

pub mod chem;
pub mod datasets;
pub mod diagnostics;
pub mod featurize;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod train;
