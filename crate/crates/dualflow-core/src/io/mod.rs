//! Persistence: binary checkpoints, metrics CSVs, PGM image dumps, and the
//! line-oriented key=value config format.

mod checkpoint;
mod config;
mod csv;
mod pgm;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CheckpointMeta,
};
pub use config::{parse_config_str, read_config, render_config, write_config};
pub use csv::{fmt_f32, MetricsCsv};
pub use pgm::{emit_visualization, pixel_to_u8, read_pgm, write_pgm};
