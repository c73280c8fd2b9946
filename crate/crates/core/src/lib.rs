pub mod cli;
pub mod config;
pub mod controller;
pub mod econ;
pub mod error;
pub mod mdn;
pub mod mobility;
pub mod outage;
pub mod rng;
pub mod simlab;
pub mod trajdata;
