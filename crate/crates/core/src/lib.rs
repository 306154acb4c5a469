//! Deep Koopman identification of vehicle dynamics in the Frenet frame, a
//! ridge-regression LTI baseline, and lifted-space MPC closing the loop on a
//! nonlinear bicycle-model plant.

pub mod datagen;
pub mod eval;
pub mod koopman;
pub mod linalg;
pub mod lti;
pub mod mpc;
pub mod plant;
pub mod units;

pub use linalg::{LinalgError, Matrix};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
