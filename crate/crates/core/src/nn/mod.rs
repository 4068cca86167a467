//! Minimal differentiable network engine: dense/conv layers, exact
//! backpropagation (including gradients w.r.t. the input image), plain SGD.

pub mod checkpoint;
mod layer;
mod loss;
mod model;
mod tensor;
mod train;

pub use layer::{desk_classifier, LayerSpec};
pub use loss::{argmax, cross_entropy, l1_logits, softmax, LossSpec, Target};
pub use model::{Gradients, Model, Param};
pub use tensor::Tensor;
pub use train::{accuracy, evaluate_accuracy, fit, sgd_step, train, TrainConfig, TrainReport};
