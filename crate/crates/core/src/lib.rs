//! A desk-scale user-aware vision-language tuning pipeline.
//!
//! See the guide under `book/` for a narrative tour.

pub mod adapters;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod pipeline;

pub use error::{Error, Result};

// The guide's snippets run as doctests so the book cannot drift from the
// crate. One module per chapter keeps failures traceable.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/eval.md")]
    mod eval {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
