pub mod autodiff;
pub mod cli;
pub mod error;
pub mod fv_check;
pub mod nn_potential;
pub mod objective;
pub mod optim;
pub mod problems;
pub mod rng;
pub mod trajectories;
