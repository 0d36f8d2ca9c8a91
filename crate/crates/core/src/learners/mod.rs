//! Trainable scoring heads.

pub mod booster;
pub mod mlp;

pub use booster::{
    blend, predict_pair, select_pair_weight, train_booster, weight_grid, BoosterConfig, BoosterModel,
    BoosterPair, Growth, Node, Tree,
};
pub use mlp::{fit_mlp, init_mlp, init_mlp_with, train_mlp, Adam, FoldRecord, Gradients, MlpModel, TrainConfig};
