pub mod budget;
pub mod consts;
pub mod error;
pub mod io;
pub mod loss;
pub mod lsq;
pub mod participation;
pub mod pipeline;
pub mod resonance;
pub mod solver;
pub mod synth;
pub mod tls;
pub mod uncertain;

pub use error::{Error, Result};
pub use loss::{LossFactorEstimate, LossUnit, ParticipationUnit, Provenance};
pub use uncertain::Uncertain;

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/resonance.md")]
    mod resonance {}
    #[doc = include_str!("../../../book/src/tls.md")]
    mod tls {}
    #[doc = include_str!("../../../book/src/participation.md")]
    mod participation {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/budget.md")]
    mod budget {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
