pub mod dataset;
pub mod detector;
pub mod evaluation;
pub mod miner;
pub mod oracle;
pub mod registry;
pub mod runner;
pub mod text_space;
pub mod trainer;
