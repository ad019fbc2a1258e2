//! Nonlocal integro-differential operators: kernels, quadrature, Bernstein
//! key-estimate checks, obstacle/Bellman/parabolic solvers.

pub mod bellman;
pub mod bernstein;
pub mod ensemble;
pub mod expr;
pub mod fields;
pub mod kernels;
pub mod obstacle;
pub mod operator;
pub mod parabolic;
pub mod quadrature;
