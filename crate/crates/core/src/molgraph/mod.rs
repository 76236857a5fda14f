//! Molecules as point clouds and as bond graphs.

mod config;
pub mod fingerprint;
pub mod graph;
pub mod hash;
pub mod split;
pub mod toy;
mod vocab;
pub mod xyz;

pub(crate) use config::remove_mean;
pub use config::{project_to_zero_cog, MolecularConfig};
pub use fingerprint::{fingerprint, tanimoto, Fingerprint};
pub use graph::{atom_valence_ok, graph_is_valid, infer_bonds, is_valid, Bond, MolecularGraph};
pub use hash::{canonical_hash, CanonicalHash};
pub use split::{species_split, SplitIndices};
pub use vocab::{AtomVocabulary, VocabularySpec};
pub use xyz::{load_xyz_dataset, DatasetEntry, DatasetManifest};
