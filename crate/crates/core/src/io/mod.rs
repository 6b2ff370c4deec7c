//! Volume and mask ingestion, dataset indexing, fingerprinting,
//! resampling and synthetic phantoms.

pub mod dataset;
pub mod fingerprint;
pub mod metaimage;
pub mod phantom;
pub mod resample;
pub mod volume;

pub use dataset::{DatasetIndex, IndexEntry, Split};
pub use fingerprint::{extract_fingerprint, normalize, Fingerprint, IntensityStats};
pub use metaimage::{read_mask, read_volume, write_mask, write_volume};
pub use phantom::{generate_phantom, generate_phantom_with, PhantomOptions, PhantomProfile};
pub use resample::{resample_mask, resample_volume};
pub use volume::{ElementType, Grid, LabelMask, Vendor, Volume, CLASS_NAMES, NUM_CLASSES};
