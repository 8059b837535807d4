//! Pose-supervised spatial attention for PPE crop classification.
//!
//! A small CNN classifier with an optional spatial attention block whose
//! mask can be trained against pseudo-ground-truth rectangles derived from
//! body keypoints, together with everything needed to run it end to end:
//! a reverse-mode tensor engine ([`tensor`]), the model ([`net`]), mask
//! construction ([`supervision`]), losses and training ([`losses`],
//! [`split`], [`train`]), evaluation ([`metrics`]), a synthetic data
//! generator ([`synth`]) and on-disk formats ([`io`]).

pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod split;
pub mod supervision;
pub mod synth;
pub mod tensor;
pub mod train;

pub use net::{ClassifierModel, Prediction, SamBlock, Variant};
pub use supervision::{AttentionMask, PpeTypeConfig, Rect, Skeleton};
pub use synth::{Sample, SynthConfig};
pub use tensor::{Parameter, Tape, Tensor, Var};
pub use train::{TrainConfig, TrainError};
