//! The networks of the pipeline and their training loops.

mod embedder;
mod layers;
mod pooled;
mod pse;
mod train;

pub use embedder::{embed, train_embedder, EmbedderConfig, EmbedderModel};
pub use layers::{bind, linear, Model};
pub use pooled::{classify, train_classifier, train_sid, ClassifierModel, PooledClassifier, SidModel};
pub use pse::{pse_forward, train_pse, PseConfig, PseModel};
pub use train::{fit, TrainConfig, TrainReport};
