//! Dataset ingestion: manifests, PNG loading, tokenization, vocabulary,
//! batching, splits and a synthetic shape dataset.

mod batch;
mod image;
mod manifest;
mod synthetic;
mod tokenize;
mod vocab;

pub use batch::{caption_pairs, index_batches, make_batches, pair_batches, Batch, CaptionPair};
pub use image::{load_image, resize_bilinear};
pub use manifest::{load_manifest, parse_manifest, split_dataset, DatasetManifest, Sample};
pub use synthetic::{generate_synthetic_dataset, generate_synthetic_dataset_with, SyntheticOptions, COLORS, SHAPES};
pub use tokenize::{detokenize, tokenize, DANDA};
pub use vocab::{build_vocabulary, build_vocabulary_from_captions, encode_caption, Vocabulary};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIAL: usize = 4;

/// Number of image classes in the dataset.
pub const NUM_CLASSES: usize = 25;
