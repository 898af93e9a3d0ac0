//! Hard-set-guided feature-space meta-learning.
//!
//! A linear softmax head sits on frozen embeddings. A small class-balanced
//! support set of embeddings is treated as learnable: it is edited so that a
//! few gradient steps of the head on it reduce the loss on the currently
//! hardest validation examples. The head is then trained on the edited
//! support set. On data with spurious correlations this lifts worst-group
//! accuracy.
//!
//! Modules:
//! - [`featurestore`]: grouped datasets and the HSFM-FS file format
//! - [`synthgen`]: synthetic spurious-correlation benchmarks
//! - [`linhead`]: the head, its loss and gradients, ERM and evaluation
//! - [`hardset`]: per-class top-loss selection
//! - [`metaopt`]: unrolled meta-gradients and the training procedure
//! - [`presets`]: named hyperparameter sets
//! - [`gradcheck`]: randomized meta-gradient verification
//! - [`runner`]: config-driven commands shared by the CLI

pub mod error;
pub mod featurestore;
pub mod gradcheck;
pub mod hardset;
pub mod linhead;
pub mod metaopt;
pub mod presets;
pub mod runner;
pub mod synthgen;

pub use error::{Error, Result};
pub use featurestore::{read_features, write_features, DatasetSplit, FeatureDataset};
pub use hardset::{build_hard_set, hard_set_loss, HardSet};
pub use linhead::{
    batch_loss_and_grads, cross_entropy, erm_train, evaluate, loss_grad_logits, read_head,
    write_head, EvalReport, GdOptions, LinearHead,
};
pub use metaopt::{
    dfr_baseline, export_support, finite_diff_meta_gradient, hsfm_train, init_support, inner_adapt,
    meta_gradient, Balance, HsfmConfig, HsfmOutcome, InnerLoop, InnerTape, OuterOptimizer,
    SupportSet, TrainTrace,
};
pub use synthgen::{bayes_core_accuracy, generate, SynthConfig};
