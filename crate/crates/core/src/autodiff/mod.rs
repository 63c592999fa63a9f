//! Reverse-mode automatic differentiation over dense tensors.

mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{
    spp_output_len, Gradients, Graph, LrnConfig, NodeId, OpKind, ParamId, ParamSet,
};
pub(crate) use graph::conv_out;
pub use tensor::{Real, Tensor};

/// Builds a named input map for [`Graph::forward`].
pub fn inputs<T: Real>(
    pairs: impl IntoIterator<Item = (&'static str, Tensor<T>)>,
) -> std::collections::BTreeMap<String, Tensor<T>> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[cfg(test)]
mod tests;
