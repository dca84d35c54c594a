pub mod codec;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod preference;
pub mod quantizer;
pub mod recommenders;
pub mod sid_index;
pub mod benchmark;
pub mod eval;
pub mod synthetic;
pub mod service;
