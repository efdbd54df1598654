//! Reference tokenizers: residual k-means and a REINFORCE-trained sender.

pub mod reinforce;
pub mod rkmeans;

pub use rkmeans::{kmeans, nearest, rkmeans_encode, rkmeans_fit, KMeansFit, RKMeansModel};
pub use reinforce::{reinforce_train, ReinforceConfig, ReinforceState, ReinforceTrainer, RunningMean};
