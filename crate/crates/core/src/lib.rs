pub mod autograd;
pub mod cli;
pub mod evaluator;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod probes;
pub mod real;
pub mod scm;
pub mod trainer;

pub use real::Real;
