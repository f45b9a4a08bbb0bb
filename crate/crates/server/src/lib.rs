//! HTTP session service and command-line driver for `dpexplore`.

pub mod api;
pub mod cli;
pub mod error;
pub mod store;
