#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod error;
pub mod funcs;
pub mod meankernel;
pub mod measure;
pub mod operator;
pub mod quadrature;
mod radial;
pub mod wos;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/measures.md")]
    mod measures {}
    #[doc = include_str!("../../../book/src/operator.md")]
    mod operator {}
    #[doc = include_str!("../../../book/src/mean-kernel.md")]
    mod mean_kernel {}
    #[doc = include_str!("../../../book/src/expansion.md")]
    mod expansion {}
    #[doc = include_str!("../../../book/src/limits.md")]
    mod limits {}
    #[doc = include_str!("../../../book/src/walk-on-spheres.md")]
    mod walk_on_spheres {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
