//! Differentiable operations recorded on a [`Tape`](crate::autograd::Tape).
//!
//! Each op computes its forward value eagerly and registers a closure that
//! maps the output gradient back to its inputs. Pure (non-tape) helpers that
//! other crates need, such as bilinear resizing of plain tensors, live next
//! to the op that shares their arithmetic.

mod attention;
mod basic;
mod conv;
mod loss;
mod norm;
mod resize;

pub use attention::attention_probs;
pub use conv::Conv2dSpec;
pub use norm::BatchStats;
pub use resize::{bilinear_resize, BilinearAxis};

/// Softmax over the channel axis of a `(B, K, H, W)` tensor.
pub fn softmax_channels<T: crate::Real>(x: &crate::Tensor<T>) -> crate::Result<crate::Tensor<T>> {
    loss::softmax_channels_values(x)
}
