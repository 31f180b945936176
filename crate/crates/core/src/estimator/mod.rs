//! Physics-guided abnormality estimator.
//!
//! A small feed-forward network regresses the fused secondary-control
//! abnormality from the full routed-measurement view of the microgrid. The
//! feature vector is the flattened received-measurement matrices plus the
//! leader reference, so one network serves every candidate spanning tree:
//! absent edges simply stay zero.

mod data;
mod mlp;

pub use data::{
    add_noise, generate_dataset, split, Dataset, NoiseSpec, Provenance, RowSampler,
    SamplerAttackRanges,
};
pub use mlp::{
    evaluate, finite_difference_gradients, flatten_gradients, forward, gradients, train, Adam,
    LayerParams, Metrics, MlpConfig, MlpParams, TrainReport,
};

use crate::comm::ReceivedMatrix;
use crate::error::{Error, Result};

/// Feature width for an `n`-DG microgrid: three n×n matrices plus the
/// leader reference.
pub fn feature_width(n: usize) -> usize {
    3 * n * n + 1
}

/// DG count encoded by a feature width, if any.
pub fn dg_count_for_width(width: usize) -> Option<usize> {
    if width < 4 {
        return None;
    }
    let per = (width - 1) / 3;
    if !(width - 1).is_multiple_of(3) {
        return None;
    }
    let n = (per as f64).sqrt().round() as usize;
    (n * n == per).then_some(n)
}

/// Flatten a received matrix into the estimator input layout:
/// `[R_ω row-major, R_P, R_Q, leader_ref]`.
pub fn featurize(received: &ReceivedMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(feature_width(received.n));
    out.extend_from_slice(&received.r_omega);
    out.extend_from_slice(&received.r_p);
    out.extend_from_slice(&received.r_q);
    out.push(received.leader_ref);
    out
}

/// Inverse of [`featurize`]; used by tests and by callers that persist raw
/// feature rows.
pub fn defeaturize(features: &[f64], n: usize) -> Result<ReceivedMatrix> {
    if features.len() != feature_width(n) {
        return Err(Error::Shape(format!(
            "feature vector of length {} does not match n={n} (expected {})",
            features.len(),
            feature_width(n)
        )));
    }
    let nn = n * n;
    Ok(ReceivedMatrix {
        n,
        r_omega: features[0..nn].to_vec(),
        r_p: features[nn..2 * nn].to_vec(),
        r_q: features[2 * nn..3 * nn].to_vec(),
        leader_ref: features[3 * nn],
    })
}
