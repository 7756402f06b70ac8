//! Config files, binary grid and checkpoint formats, and report emission.

mod binary;
mod config;
mod report;

pub use binary::{
    load_checkpoint, load_grid, save_checkpoint, save_grid, Checkpoint, CHECKPOINT_VERSION,
    GRID_VERSION,
};
pub use config::{config_digest, parse_config, parse_config_str, render_config, RunConfig};
pub use report::{
    emit_report, read_metrics_csv, write_compare_csv, MetricsRow, CONFIG_ECHO, DESIGN_JSON,
    METRICS_CSV,
};
