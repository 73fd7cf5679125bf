//! Continual learning with task-specific prompts bound to class prototypes.
//!
//! A frozen transformer encoder is adapted per task by a small prompt; after
//! training, class prototypes computed under that prompt (fused with
//! prototypes of the frozen encoder) replace the training head. Inference
//! scores an input under every task prompt against that task's prototypes
//! and needs no task identity and no key-value retrieval.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod io;
pub mod learner;
pub mod loss;
pub mod optim;
pub mod prototype;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use data::{ClassId, Dataset, Sample, SplitDataset, Task};
pub use encoder::{EncoderConfig, EncoderParams, PromptMode, PromptSharing, TaskPrompt};
pub use error::{Error, Result};
pub use learner::{ContinualLearner, Prediction, PromptPrototypeModel, TrainConfig};
pub use optim::SgdCosine;
pub use prototype::{FusionStrategy, PrototypeBank, PrototypeEntry};
pub use tensor::Tensor;
