//! Novelty search for diverse neural-network ensembles, with a random-forest
//! surrogate standing in for the behavioural distances during the search.

pub mod dataset;
pub mod diversity;
pub mod ensemble;
pub mod genome;
pub mod harness;
pub mod learner;
pub mod rng;
pub mod search;
pub mod stats;
pub mod surrogate;

pub use dataset::{DataSplit, LabeledDataset};
pub use diversity::{DistanceVector, Metric};
pub use ensemble::{StackConfig, StackingModel};
pub use genome::{Genome, NormalizedRep, SearchSpaceBounds};
pub use learner::{PredictionProfile, ResidualMlp, TrainConfig};
pub use search::{Mode, NsConfig};
pub use surrogate::{ForestParams, RandomForestSurrogate};
