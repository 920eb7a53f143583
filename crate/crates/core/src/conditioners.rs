//! Domain-conditioner generation.
//!
//! Each transformer layer owns an affine generator mapping the layer's class
//! token (a `[1, d]` row) to a `[1, 3d]` vector that is split into the three
//! conditioners appended to Q, K, and V. The split order is (query, key,
//! value) and is fixed. The ablation variant replaces the generator with
//! directly learnable per-layer vectors; see
//! [`ModelParams::with_static_conditioners`](crate::model::ModelParams::with_static_conditioners).

use crate::error::{DctError, DctResult};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Graph nodes of one layer's conditioner triple.
pub struct ConditionerVars {
    pub cq: Var,
    pub ck: Var,
    pub cv: Var,
}

/// Run a layer's generator: `class_token · W + b`, split into (Cq, Ck, Cv).
/// Differentiable with respect to the weights, the bias, and the class token.
pub fn generate(
    g: &mut Graph,
    class_token: Var,
    gen_w: Var,
    gen_b: Var,
) -> DctResult<ConditionerVars> {
    let d = g.value(class_token).cols();
    let w_shape = g.value(gen_w).shape().to_vec();
    if w_shape != [d, 3 * d] || g.value(gen_b).numel() != 3 * d {
        return Err(DctError::DimMismatch {
            op: "conditioner generate",
            detail: format!(
                "class token [1, {d}] needs weights [{d}, {}], got {:?}",
                3 * d,
                w_shape
            ),
        });
    }
    let t = g.matmul(class_token, gen_w)?;
    let t = g.add(t, gen_b)?;
    let cq = g.slice_cols(t, 0, d)?;
    let ck = g.slice_cols(t, d, d)?;
    let cv = g.slice_cols(t, 2 * d, d)?;
    Ok(ConditionerVars { cq, ck, cv })
}

/// Zero-initialized generator tensors for one layer: weight `[d, 3d]`, bias
/// `[3d]`. With this initialization the conditioners start at zero and their
/// influence appears only as adaptation updates the generator.
pub fn zero_generator(embed_dim: usize) -> (Tensor, Tensor) {
    (
        Tensor::zeros(vec![embed_dim, 3 * embed_dim]),
        Tensor::zeros(vec![3 * embed_dim]),
    )
}
