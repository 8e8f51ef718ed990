//! Synthetic slide bags: procedural patch images with planted witness
//! instances, a binary bag format, and a dataset manifest.

mod format;
mod generate;
mod spec;

pub use format::{read_bag, read_dataset, write_bag, write_dataset, BAG_MAGIC, BAG_VERSION, MANIFEST};
pub use generate::{generate_dataset, label_from_latents, render_instance, Bag, Dataset, Split};
pub use spec::{GenSpec, LabelRule, Texture};
