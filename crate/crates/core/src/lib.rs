pub mod annotate;
pub mod bandit;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod features;
pub mod harness;
pub mod llm;
pub mod policy;
mod quadrature;
pub mod sim;
