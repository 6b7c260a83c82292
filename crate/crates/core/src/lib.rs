//! Restricted recurrent cells: RNN, GRU and LSTM variants whose gate weight
//! matrices share a common block of rows drawn from one parameter pool.
//!
//! The crate carries its own small reverse-mode tape over `f64` tensors,
//! the restriction planner, the three cell families, a word- or
//! character-level language model, truncated-BPTT training and
//! binary checkpoints.

pub mod cells;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod restriction;
pub mod tape;
pub mod tensor;
pub mod training;

pub use cells::{CellFamily, CellSpec, CellState, RecurrentCell};
pub use checkpoint::Checkpoint;
pub use data::{batchify, Corpus, SequenceBatch, TokenMode, UnkPolicy, Vocabulary};
pub use error::{Error, Result};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use head::LMHead;
pub use model::{LanguageModel, ModelConfig, ModelParamCounts, Rates};
pub use restriction::{uniform_compression, InitSpec, ParamCounts, ParameterPool, RestrictionPlan};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use training::{cosine_lr, evaluate, EpochRecord, TrainConfig, Trainer};
