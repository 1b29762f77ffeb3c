pub mod cli;
pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod evaluation;
pub mod evidence;
pub mod graph;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod predictors;
pub mod supervision;
pub mod synth;
pub mod training;

#[cfg(test)]
mod test_support;
