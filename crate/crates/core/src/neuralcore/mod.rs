//! Dense `f64` tensors, a tape-based reverse-mode differentiation graph,
//! LSTM and 1-D ConvLSTM cells, MSE loss and the Adam optimizer.
//!
//! Batched activations are 2-D `[batch, features]`. Convolutional state is
//! stored channel-major per sample, i.e. `[batch, channels * positions]`, so
//! channel concatenation and gate slicing are plain column operations.

mod cells;
mod graph;
mod optim;
mod tensor;

pub use cells::{
    conv_lstm_step, lstm_cell_step, lstm_step, ConvLstmCellParams, ConvLstmNodes, LstmCellParams,
    LstmNodes,
};
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{adam_step, clip_global_norm, global_norm, mse_loss, AdamConfig, AdamState};
pub use tensor::{sigmoid, Tensor};
