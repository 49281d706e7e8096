//! Activation layers: hard truncation, magnitude, and the adaptive
//! per-channel threshold module.
//!
//! The threshold module pools the positive and negative parts of its input
//! separately, runs the pooled vector through a small excitation network,
//! and uses the sigmoid output as a per-sample, per-channel floor: the layer
//! passes positives unchanged and clamps negatives at -alpha instead of
//! discarding them.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Hard truncation to [-T, T].
#[derive(Clone, Copy, Debug)]
pub struct TluLayer {
    t: f64,
}

impl TluLayer {
    pub fn new(t: f64) -> Result<TluLayer> {
        if !(t > 0.0) {
            return Err(Error::Config(format!(
                "truncation threshold must be positive, got {t}"
            )));
        }
        Ok(TluLayer { t })
    }

    pub fn threshold(&self) -> f64 {
        self.t
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.tlu(x, self.t)
    }
}

/// Excitation parameters producing the per-channel thresholds for one block
/// of C channels: an affine 2C -> C, ReLU, affine C -> C, sigmoid.
#[derive(Clone, Debug)]
pub struct ApamParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ApamParams {
    /// Weights uniform in +/- 1/sqrt(2C), biases zero; with average pooled
    /// inputs this centers the initial thresholds near 0.5.
    pub fn init(c: usize, rng: &mut Stream) -> ApamParams {
        let bound = 1.0 / ((2 * c) as f64).sqrt();
        ApamParams {
            w1: Tensor::rand_uniform(&[2 * c, c], -bound, bound, rng),
            b1: Tensor::zeros(&[c]),
            w2: Tensor::rand_uniform(&[c, c], -bound, bound, rng),
            b2: Tensor::zeros(&[c]),
        }
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        let checks: [(&str, &Tensor, &[usize]); 4] = [
            ("w1", &self.w1, &[2 * c, c]),
            ("b1", &self.b1, &[c]),
            ("w2", &self.w2, &[c, c]),
            ("b2", &self.b2, &[c]),
        ];
        for (name, t, want) in checks {
            if t.shape() != want {
                return Err(Error::dim(
                    "apam_params",
                    format!("{name}: shape {:?}, want {:?}", t.shape(), want),
                ));
            }
            t.validate_finite(name)?;
        }
        Ok(())
    }
}

/// Graph handles for one block's excitation parameters, as leafed onto a
/// tape for a forward pass.
#[derive(Clone, Copy)]
pub struct ApamNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl ApamNodes {
    pub fn leaf(tape: &mut Tape, params: &ApamParams, requires_grad: bool) -> ApamNodes {
        ApamNodes {
            w1: tape.leaf(params.w1.clone(), requires_grad),
            b1: tape.leaf(params.b1.clone(), requires_grad),
            w2: tape.leaf(params.w2.clone(), requires_grad),
            b2: tape.leaf(params.b2.clone(), requires_grad),
        }
    }
}

/// Adaptive threshold activation: alpha = sigmoid(excitation(pooled positive
/// and negative parts)), y = max(x, -alpha) broadcast over each channel
/// plane. Returns the activation and the thresholds (shape [N, C]).
pub fn apam_forward(
    tape: &mut Tape,
    x: NodeId,
    nodes: ApamNodes,
) -> Result<(NodeId, NodeId)> {
    let p = tape.gap_relu(x)?;
    let n = tape.gap_min_zero(x)?;
    let v = tape.concat_cols(p, n)?;
    let h = tape.linear(v, nodes.w1, nodes.b1)?;
    let h = tape.relu(h);
    let e = tape.linear(h, nodes.w2, nodes.b2)?;
    let alpha = tape.sigmoid(e);
    let y = tape.f_ap(x, alpha)?;
    Ok((y, alpha))
}
