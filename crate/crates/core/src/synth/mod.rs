//! Synthetic face corpus: scenes, rendering, resampling, augmentation and
//! on-disk storage.

pub mod augment;
pub mod corpus;
pub mod pnm;
pub mod render;
pub mod resize;
pub mod scene;

pub use augment::Dihedral;
pub use corpus::{build_corpus, generate_sample, upscale_input, Corpus, CorpusMeta, ManifestEntry, Sample, Split, SynthConfig};
pub use render::{heatmap_sigma, render_heatmaps, render_scene, ParsingLayout};
pub use resize::{bicubic_resize, degrade, downscale};
pub use scene::{FaceScene, Region};
