//! Zero-round active learning: learn a set-utility model on a labeled
//! source domain, align it to an unlabeled target pool, and pick a labeling
//! budget from that pool in a single shot.

pub mod adapt;
pub mod d2ulo;
pub mod data;
pub mod deepsets;
pub mod error;
pub mod eval;
pub mod hash;
pub mod nnkit;
pub mod pipeline;
pub mod proxy;
pub mod rng;
pub mod select;
pub mod usample;

pub use adapt::{AdaptConfig, AdaptModel};
pub use d2ulo::{JointConfig, JointMode, JointModels, JointReport};
pub use data::{Dataset, DomainPair, DomainTag, IndexSet, ShiftKind, ShiftParams};
pub use deepsets::{DeepSetsConfig, DeepSetsModel, EmbeddedUtilityDataset};
pub use error::{Error, IdxError, Result};
pub use eval::{EvalReport, FinetuneConfig};
pub use nnkit::{Matrix, MlpNet};
pub use proxy::{ProxyHyper, ProxyKind};
pub use select::{SelectionResult, Strategy};
pub use usample::{SampleConfig, UtilityDataset};
