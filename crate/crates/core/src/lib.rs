//! WeightVault core: model math, compression, the versioned weight store,
//! licensing masks and the wire formats shared by server and client.

pub mod compress;
pub mod licensing;
pub mod nn;
pub mod rng;
pub mod store;
pub mod versioning;
pub mod weightfile;
pub mod wire;
