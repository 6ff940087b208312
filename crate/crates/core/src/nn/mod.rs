//! Feed-forward inference engine, sealed layer execution and a toy trainer.

pub mod capsule;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;
pub mod weights;

pub use capsule::{capsule_forward, capsule_forward_with_budget, seal_model, CapsuleLayer, DEFAULT_MEMORY_BUDGET};
pub use layers::{LayerSpec, Padding};
pub use model::{forward, forward_layers, LayerParams, ModelDef, ModelSecrets, Posterior};
pub use tensor::Tensor;
pub use train::{grad_check, train_toy, Dataset, TrainReport};
pub use weights::{export_weights, import_weights};
