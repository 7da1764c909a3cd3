//! Fed-batch penicillin simulation, GP and neural-process surrogates, and
//! experiment-design campaigns.

pub mod acquisition;
pub mod campaign;
pub mod dynamics;
pub mod exec;
pub mod gp;
pub mod harness;
pub mod neural;
pub mod plot;
pub mod rng;
pub mod sanodep;
pub mod tasking;
