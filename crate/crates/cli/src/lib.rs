//! Operator surface for the classifier: a `plate` command line and an HTTP
//! classification service.

pub mod cli;
pub mod config;
pub mod service;
