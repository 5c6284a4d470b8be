//! Domain types: motion clips, conditions, the AU vocabulary and the masks
//! derived from fine conditions.

pub mod condition;
pub mod masks;
pub mod vocab;

pub use condition::{normalize_intensity, AudioFeatures, CoarseCondition, FineCondition, MotionSequence, Triplet, DEFAULT_FPS};
pub use masks::{build_align_mask, build_cfg_mask, build_ctrl_mask, build_fine_grid, DEFAULT_ALIGN_HALF_WIDTH};
pub use vocab::{AuEntry, AuVocabulary, FaceRegion, DEFAULT_AU_MAP_JSON};
