//! Flare catalogs, magnetogram labeling and partitioning, class balancing,
//! image ingestion and a synthetic planted-blob corpus.

mod balance;
mod catalog;
mod class;
mod image;
mod manifest;
mod synth;

pub use self::balance::{
    augment_minority, class_counts, items_for, oversample_to_parity, prepare_training, rotation_for, TrainItem,
    Transform, MAX_ROTATION_DEG,
};
pub use self::catalog::{
    format_timestamp, label_sample, parse_timestamp, Catalog, FlareEvent, Label, WindowLabel, CATALOG_HEADER,
    FLARE_FLUX_THRESHOLD,
};
pub use self::class::{class_to_flux_lower_bound, flux_to_class, ClassLetter, FlareClass};
pub use self::image::{
    decode_gray, gray_to_tensor, load_image, load_images, normalize_pixel, quantize_pixel, read_gray, tensor_to_gray,
    write_pgm, write_ppm,
};
pub use self::manifest::{
    assign_partition, make_folds, ratio_label, DatasetManifest, Fold, MagnetogramSample, PartitionSummary,
    MANIFEST_HEADER, NUM_PARTITIONS,
};
pub use self::synth::{
    driver_flux, gen_synthetic, image_file_name, read_driver_boxes, timestamp_from_file_name, BBox, SampleBoxes, SynthConfig, SynthCorpus,
    BOXES_HEADER, SYNTH_SPACING_HOURS,
};
pub use ::image::{GrayImage, RgbImage};
