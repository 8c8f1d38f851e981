//! Toy corpus generation and long-tailed dataset manifests.

mod images;
mod ingest;
mod manifest;
mod split;
pub mod synthetic;
mod taxonomy;
pub(crate) mod texture;

pub use images::{load_image, save_tensor_png, ImageSet};
pub use ingest::{ingest_folder, IngestSpec};
pub use manifest::{CountKey, DatasetManifest, Origin, Record, Split};
pub use split::{build_longtail_split, merge_synthetic, merge_synthetic_up_to, uniform_caps, SplitCaps};
pub use synthetic::{InclusionPolicy, SyntheticRecord, Termination};
pub use taxonomy::ClassTaxonomy;
pub use texture::{generate_balanced_corpus, generate_toy_corpus, CorpusSpec};
