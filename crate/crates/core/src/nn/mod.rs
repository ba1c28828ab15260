//! Autoencoder, composite losses, optimizers and the two training phases.

pub mod checkpoint;
pub mod loss;
pub mod mlp;
pub mod optim;
pub mod train;

pub use loss::{LossBreakdown, LossInputs, LossVariant, LossWeights, StructureMatrix};
pub use mlp::{Activation, Layer, Mlp, MlpGrads};
pub use optim::{OptimizerConfig, OptimizerRule, OptimizerState};
pub use train::{
    geometric_sizes, loss_gradients, pretrain_autoencoder, train_sadse, Autoencoder, BatchSupervision, EpochLoss,
    TrainOptions,
};
