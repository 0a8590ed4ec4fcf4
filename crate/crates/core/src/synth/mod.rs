//! Procedural scene generation and the OCCSEQ persistence format.

pub mod dataset;
pub mod occseq;
pub mod scene;

pub use dataset::{load_manifest, load_split, make_dataset, Manifest, ManifestEntry, Split};
pub use occseq::{occseq_file_size, read_occseq, write_occseq};
pub use scene::{generate_scene, EgoProfile, RoadLayout, SceneConfig};
