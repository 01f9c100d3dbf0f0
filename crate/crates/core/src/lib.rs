//! Max-min fair computation offloading for multi-server mobile edge
//! computing with rate-splitting multiple access.

pub mod barrier;
pub mod baselines;
pub mod config;
pub mod error;
pub mod harness;
pub mod matching;
pub mod rates;
pub mod sca;
pub mod scenario;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/system-model.md")]
    pub mod system_model {}
    #[doc = include_str!("../../../book/src/rates.md")]
    pub mod rates {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    pub mod schedule {}
    #[doc = include_str!("../../../book/src/power-allocation.md")]
    pub mod power_allocation {}
    #[doc = include_str!("../../../book/src/matching.md")]
    pub mod matching {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    pub mod benchmarks {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}
