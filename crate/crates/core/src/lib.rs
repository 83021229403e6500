//! Incremental organ segmentation on synthetic phantoms.
//!
//! A frozen K-class teacher is extended to a (K+1)-class student using only a
//! dataset annotated for the new organ. Old-class knowledge is transferred by
//! folding the student's probabilities back onto the teacher's label space
//! (background label alignment) and weighting the per-pixel distillation terms
//! by the entropy of an ensemble of teacher predictions on intensity-perturbed
//! inputs.
//!
//! Everything runs on a small dense `f64` tensor type with reverse-mode
//! differentiation ([`autodiff`]), a plain fully-convolutional network
//! ([`segnet`]) and a deterministic phantom generator ([`phantom`]).

pub mod autodiff;
pub mod cli;
pub mod exec;
pub mod labels;
pub mod losses;
pub mod phantom;
pub mod rng;
pub mod segnet;
pub mod trainer;
pub mod uncertainty;

pub use autodiff::{AutodiffError, Graph, Tensor, Var};
pub use labels::LabelMap;
pub use losses::{KlOrder, ProbMap, SmoothedLabels};
pub use segnet::{SegModel, SegModelConfig};
pub use uncertainty::{UncertaintyMap, WeightMode};
