//! Synthetic shape images and corruption streams.

mod corrupt;
mod dataset;
mod generate;
mod stream;

pub use corrupt::{corrupt, resize_bilinear, CorruptionKind};
pub use dataset::{load_or_generate, read_dataset, write_dataset, CacheHeader, Dataset, Sample, CLASS_NAMES};
pub use generate::{generate_source, Shape, IMAGE_SIDE, MASK_COVERAGE};
pub use stream::{build_stream, build_stream_cached, source_dataset, Domain, DomainStream, StreamSpec};
