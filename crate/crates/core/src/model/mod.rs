//! The stacked network: configuration, forward pass, training loop and
//! checkpoints.

mod checkpoint;
mod config;
mod network;
mod train;

pub use checkpoint::{load_network, save_network, ModelCheckpoint, ParamRecord, FORMAT_VERSION, MANIFEST_FILE, PARAMS_FILE};
pub use config::{InitialFeatures, NetworkConfig, StageConfig};
pub use network::{
    bce_loss, build_network, resample_indices, Classifier, ForwardTrace, Mode, SpilNetwork, Stage, StageTrace,
};
pub use train::{evaluate, mean_loss, predict_labels, train, EvalReport, Metrics, TrainConfig};
