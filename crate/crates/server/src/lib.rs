//! HTTP service and operator CLI for search-by-classification retrieval.

pub mod api;
pub mod cli;
pub mod config;
pub mod toy;
