//! Chernoff approximations of diffusion semigroups on Riemannian manifolds.
//!
//! A generator `L = ½ Σ A_k A_k + A_0 + c` is given by vector fields on a
//! built-in manifold. The crate evaluates Chernoff functions `S(t)` built
//! from shifts along integral curves (or geodesics), composes them as
//! `S(t/n)^n`, samples the random walks whose expectations they are, and
//! ships independent oracles to check the results against.


// `!(x > 0.0)` is used deliberately so that NaN lands in the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod chernoff;
pub mod error;
pub mod expr;
pub mod fields;
pub mod flows;
pub mod manifold;
pub mod ode;
pub mod reference;
pub mod rng;
pub mod walks;

pub use error::{Error, Result};
pub use fields::{DriftPolicy, GeneratorSpec, ScalarField, VectorField};
pub use manifold::{Manifold, ManifoldId, Point, TangentVector};
