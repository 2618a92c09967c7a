//! Instance-level weakly supervised multiple-instance learning.
//!
//! An instance classifier is trained from bag labels alone. Two mechanisms
//! supply the instance-level signal:
//!
//! * [`iwscl`]: a contrastive loss whose partners are chosen by predicted
//!   instance class, with instances from negative bags pinned to class 0,
//!   drawing on a FIFO queue of momentum-encoder key embeddings.
//! * [`pplg`]: two class prototypes in embedding space that steer soft
//!   per-instance pseudo labels through a moving average.
//!
//! A bag-level constraint on mean-pooled embeddings keeps bag predictions
//! from degrading. [`trainer`] ties everything into a training loop,
//! [`eval`] scores instances and bags, and [`data`] generates and stores
//! synthetic MIL datasets.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod iwscl;
pub mod nn;
pub mod pplg;
pub mod trainer;

pub use data::{Bag, Instance, MilDataset, SyntheticConfig};
pub use error::{Error, Result};
pub use eval::{EvalReport, RocResult};
pub use iwscl::{EmbeddingQueue, QueueEntry};
pub use nn::{Matrix, Mlp, SgdMomentum};
pub use pplg::{PrototypeBank, PseudoLabelStore};
pub use trainer::{EpochMetrics, TrainConfig, TrainState};
