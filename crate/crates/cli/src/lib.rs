//! Batch driver around `zoomwarp`: annotation and offset-field I/O,
//! synthetic scenes, the per-scene pipeline and verification routines used
//! by the command-line tool.

pub mod annotations;
pub mod error;
pub mod image_io;
pub mod offset_io;
pub mod pipeline;
pub mod synth;
pub mod verify;

pub use annotations::{ingest_annotations, Scene};
pub use error::{CliError, Result};
pub use pipeline::{process_scene, run_pipeline, RunConfig, RunReport};
pub use synth::{synth_scenes, SizeProfile, SynthConfig};
