//! Frames, synthetic sprite videos and frame-sequence datasets on disk.

pub mod frame;
pub mod loader;
pub mod noise;
pub mod sprites;

pub use frame::{check_dims, Frame, SPATIAL_MULTIPLE};
pub use loader::{load_frame_pairs, read_manifest, ClipRecord, FrameDataset, FramePairs, StoredClip};
pub use sprites::{generate_sprite_dataset, render_clip, ClipSpec, ManifestRecord, SpriteConfig, SpriteShape};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MASK_DIR: &str = "masks";
