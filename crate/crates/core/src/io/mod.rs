//! Data files, run configuration, result files and the pipeline behind the command-line tools.

pub mod config;
pub mod data;
pub mod output;
pub mod run;

pub use config::RunConfig;
pub use data::{
    align_factor, build_ccw_factor, load_factor_csv, load_panel_csv, read_factor_csv,
    read_panel_csv, write_factor_csv, write_panel_csv, ReturnUnit,
};
pub use output::{Artifact, SCHEMA_VERSION};
