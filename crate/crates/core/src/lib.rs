//! adjk — a differentiable kernel programming toolkit.
//!
//! A small imperative DSL ([`frontend`]) is lowered to an SSA-style IR
//! ([`ir`]), preprocessed ([`passes`]), and transformed by reverse-mode
//! source-code transformation into adjoint kernels ([`autodiff`]). The
//! [`runtime`] interprets kernels over dense fields, records launches on a
//! lightweight tape and replays adjoints for end-to-end gradients. [`sim`]
//! contains differentiable physics simulators written in the DSL.

pub mod autodiff;
pub mod frontend;
pub mod ir;
pub mod passes;
pub mod runtime;
pub mod sim;
