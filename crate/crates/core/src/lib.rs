pub mod catalog;
pub mod engine;
pub mod eval;
pub mod error;
pub mod head;
pub mod index;
pub mod koleo;
pub mod models;
pub mod quantizer;
pub mod synth;
