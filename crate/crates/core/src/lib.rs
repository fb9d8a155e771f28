//! Weighted Q-learning for dynamic treatment regimes when covariates are
//! missing not at random.

pub mod data;
pub mod ee;
pub mod error;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod linmodel;
pub mod qlearn;
pub mod sa;
pub mod simbench;
pub mod stats;

pub use data::{complete_upto, validate, CompleteMask, Dataset, FinalOutcome, Stage};
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/qlearning.md")]
    mod qlearning {}
    #[doc = include_str!("../../../book/src/ee.md")]
    mod ee {}
    #[doc = include_str!("../../../book/src/sa.md")]
    mod sa {}
    #[doc = include_str!("../../../book/src/bootstrap.md")]
    mod bootstrap {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
