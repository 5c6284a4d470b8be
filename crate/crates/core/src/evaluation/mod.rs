//! Metrics, the emotion classifier and evaluation reports.

pub mod classifier;
pub mod metrics;
pub mod protocol;
pub mod report;

pub use classifier::{Classification, ClassifierConfig, ClassifierTraining, EmotionClassifier};
pub use metrics::{au_activation, control_rate, diversity, lve, AuControl, ControlEntry, ControlReport, CR_WINDOW};
pub use protocol::{conflict_cases, sample_cases, scale_sweep, ConflictCase, ScaleScore};
pub use report::{Aggregate, ClipEval, EvalReport};
