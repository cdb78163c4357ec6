//! Power-amplifier-aware zero-forcing precoding for downlink cell-free
//! massive MIMO OFDM.
//!
//! The crate is organised bottom-up:
//!
//! * [`scenario`]: geometry, large-scale fading, antenna correlation and
//!   SNR targets, i.e. everything that only changes with second-order
//!   statistics.
//! * [`channel`]: per-AP Kronecker channel synthesis and normalisation.
//! * [`precoding`]: conventional ZF and the PA-consumption-optimal precoder
//!   with its per-antenna power fixed point.
//! * [`rmt`]: deterministic equivalents of the per-AP powers, computed from
//!   statistics only, and the resulting AP activation decision.
//! * [`consumption`]: transmit, PA and network power plus gain ratios.
//! * [`harness`]: seeded Monte-Carlo experiments and CSV output.

pub mod channel;
pub mod consumption;
pub mod error;
pub mod harness;
mod linalg;
pub mod precoding;
pub mod rmt;
pub mod scenario;

pub use error::{Error, Result};

/// Complex sample type used throughout.
pub type C64 = num_complex::Complex64;
/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;
