//! Address-level building blocks: parsing and prefixes, the image codec and
//! set entropy, the probing oracle, evaluation metrics, and an entropy
//! space-tree generator used as a comparison and second-stage algorithm.

pub mod addr;
pub mod baseline;
pub mod candidates;
pub mod image;
pub mod metrics;
pub mod oracle;
pub mod presets;

pub use addr::{parse_address, format_address, Address, Prefix, PrefixTable, SeedSet};
pub use image::{AddressImage, EntropyImage, EntropyMode, StitchedImage};
pub use candidates::{CandidateBatch, DedupLedger};
