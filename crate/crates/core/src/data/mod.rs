//! Dataset ingestion, checkpoint persistence and image export.

mod checkpoint;
mod cifar;
mod dataset;
mod image_io;
mod raw;
mod synthetic;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use cifar::{decode_cifar_records, load_cifar10_binary, CIFAR_RECORD, CIFAR_VAL};
pub use dataset::{to_unit_range, Dataset, Splits};
pub use image_io::{
    decode_ppm, encode_ppm, read_ppm, tile_grid, write_png, write_png_grid, write_ppm, write_ppm_grid, RgbImage,
    GRID_GUTTER,
};
pub use raw::{decode_raw, default_holdout, encode_raw, load_raw, load_raw_splits, save_raw, RAW_MAGIC};
pub use synthetic::{generate_synthetic, rect_sides, synthetic_palette, SyntheticConfig};
