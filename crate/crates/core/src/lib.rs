//! Ensemble field reconstruction library.
//!
//! Implements a pipeline for reconstructing unobserved time series in a
//! multi-realization ensemble: each realization is modeled by a
//! conditional VAE whose latent codes are kept mutually consistent
//! through an anchor-based hinge constraint, sparsely observed latent
//! fields are completed with per-coordinate Gaussian process regression
//! over nearest-neighbor latent features, and completed latents are
//! decoded back to full time series.
//!
//! Modules build bottom-up: [`tensor`]/[`tape`]/[`optim`] provide
//! reverse-mode autodiff and Adam; [`ensemble`] provides datasets,
//! normalization, and coverage masks; [`cvae`] the conditional VAE;
//! [`constraint`] anchor selection and constrained ensemble training;
//! [`gp`] exact and sparse Gaussian process regression; [`completion`]
//! the latent completion stage; [`metrics`] evaluation; [`ablation`]
//! the coverage/size sweep; [`pipeline`] the end-to-end orchestration
//! used by the CLI.

pub mod ablation;
pub mod completion;
pub mod constraint;
pub mod cvae;
pub mod ensemble;
pub mod error;
pub mod gp;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use ablation::{
    run_ablation, run_ablation_with_workers, AblationConfig, AblationOutcome, CellResult,
};
pub use completion::{CompletionConfig, GpDataMode, GpMode, LatentField};
pub use constraint::{AnchorSet, LcTrainPlan, ReferencePolicy};
pub use cvae::{CvaeConfig, CvaeModel, LatentGaussian};
pub use ensemble::{EnsembleDataset, EnsembleMeta, NormStats, SyntheticConfig};
pub use error::{CoreError, Result};
pub use gp::{ExactGp, GpFitOptions, KernelParams, SparseGp};
pub use metrics::{EvalReport, FragmentationScore, MseReport};
pub use pipeline::{CellConfig, PipelineOutcome, PipelineSettings};
pub use nn::{Linear, Mlp, MlpBinding};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use rng::Xoshiro;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
