//! Experiment configuration, training loops and run artifacts.

pub mod config;
pub mod dvrlg;
pub mod results;
pub mod run;

pub use config::ExperimentConfig;
pub use dvrlg::{Dvrlg, EpochLog};
pub use results::ResultTable;
pub use run::{run_experiment, RunOptions, SampleDump};
