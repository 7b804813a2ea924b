pub mod binio;
pub mod dataset;
pub mod ensemble;
pub mod eval;
pub mod fusion;
pub mod math;
pub mod prompting;
pub mod retrieval;
