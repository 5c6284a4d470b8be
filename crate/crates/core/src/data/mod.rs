//! Synthetic corpus, AU binarization and on-disk formats.

pub mod binarize;
pub mod io;
pub mod synthetic;

pub use binarize::{binarize, trace_au, AuTrace, BinarizeConfig};
pub use io::{
    decode_motion, encode_motion, motion_from_text, motion_to_text, read_manifest, read_motion, verify_dataset, write_motion,
    ClipMeta, Dataset, Manifest, ManifestEntry, LABELS_FILE, MANIFEST_FILE, VOCAB_FILE,
};
pub use synthetic::{generate_clip, generate_clips, ClipRecord, CorpusTables, LabelVocab, SyntheticSpec};
