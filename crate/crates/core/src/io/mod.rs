//! Configuration, file formats and checkpoints.

mod checkpoint;
mod config;
mod image_io;
mod points;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{known_keys, parse_config, parse_config_as, ImageStyle, RunConfig, ShapeKind, TaskKind};
pub use image_io::{decode_ppm, encode_ppm, load_image, save_image};
#[cfg(feature = "png")]
pub use image_io::{decode_png, encode_png};
pub use points::{decode_points, encode_points, load_points, save_points};
