pub mod checkpoint;
pub mod chem;
pub mod config;
pub mod data;
pub mod heap;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod mol_encoder;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
