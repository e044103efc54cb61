//! Single-layer, single-head, attention-only transformer.
//!
//! Logits for a prefix ending in token `t_s` are
//! `B[t_s] + sum_i w_i D[t_i]`, with `B = E U`, `D = E' W_V W_O U` and
//! softmax attention weights `w` from the query of `t_s`. There are no
//! positional encodings and no attention dropout.

mod backward;
mod checkpoint;
mod forward;
mod params;

pub use backward::{backward, row_loss, row_loss_and_grad};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
pub use forward::{
    derived_matrices, forward, forward_constant_attention, forward_trace, log_sum_exp, logits,
    next_token_distribution, nll_loss, normalized_embeddings, rmsnorm, softmax, DerivedMatrices, DropoutMasks,
    DropoutSpec, ForwardTrace,
};
pub use params::{init_params, truncated_normal, Dims, ModelParams, NormMode, Tensors, DECAYED, INIT_STD, TENSOR_NAMES};
