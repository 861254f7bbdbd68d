//! Small deterministic network stack: six layer kinds, Adam, learning-rate
//! schedules and a binary model format.

mod adam;
pub mod gradcheck;
mod layers;
mod network;
mod schedule;
mod serialize;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::{LayerKind, LayerSpec, BN_EPS, BN_MOMENTUM};
pub use network::{
    ForwardPass, Gradients, Mode, ModelParams, NetworkSpec, ParamSource, LEAKY_SLOPE, THETA_OUTPUTS,
};
pub use schedule::LrSchedule;
pub use serialize::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use tensor::Tensor;

pub(crate) use layers::forward as layer_forward;

use crate::imageio::ImageBuffer;
use crate::transform::CoefficientMatrix;

/// Packs images (all the same size) into an `[N, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&ImageBuffer]) -> crate::Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| crate::Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let plane = h * w;
    let mut data = vec![0.0; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        first.check_same_shape(img)?;
        let dst = &mut data[n * 3 * plane..(n + 1) * 3 * plane];
        for (i, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                dst[c * plane + i] = px[c];
            }
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Inverse layout of [`images_to_tensor`] for gradients: interleaved
/// per-pixel image gradients become an `[N, 3, H, W]` tensor.
pub fn interleaved_to_tensor(grads: &[Vec<f64>], h: usize, w: usize) -> crate::Result<Tensor> {
    let plane = h * w;
    let mut data = vec![0.0; grads.len() * 3 * plane];
    for (n, g) in grads.iter().enumerate() {
        if g.len() != 3 * plane {
            return Err(crate::Error::Shape(format!(
                "gradient of length {} for a {h}x{w} image",
                g.len()
            )));
        }
        let dst = &mut data[n * 3 * plane..(n + 1) * 3 * plane];
        for (i, px) in g.chunks_exact(3).enumerate() {
            for c in 0..3 {
                dst[c * plane + i] = px[c];
            }
        }
    }
    Tensor::new(vec![grads.len(), 3, h, w], data)
}

/// Per-sample interleaved RGB gradients from an `[N, 3, H, W]` tensor.
pub fn tensor_to_interleaved(t: &Tensor) -> crate::Result<Vec<Vec<f64>>> {
    if t.shape().len() != 4 || t.shape()[1] != 3 {
        return Err(crate::Error::Shape(format!("expected [N, 3, H, W], got {:?}", t.shape())));
    }
    let plane = t.shape()[2] * t.shape()[3];
    Ok((0..t.batch())
        .map(|n| {
            let s = t.sample(n);
            let mut out = vec![0.0; 3 * plane];
            for i in 0..plane {
                for c in 0..3 {
                    out[i * 3 + c] = s[c * plane + i];
                }
            }
            out
        })
        .collect())
}

/// Splits an `[N, 30]` network output into coefficient matrices.
pub fn output_to_thetas(out: &Tensor) -> crate::Result<Vec<CoefficientMatrix>> {
    if out.shape().len() != 2 || out.shape()[1] != THETA_OUTPUTS {
        return Err(crate::Error::Shape(format!(
            "expected [N, {THETA_OUTPUTS}] output, got {:?}",
            out.shape()
        )));
    }
    (0..out.batch())
        .map(|n| CoefficientMatrix::from_flat(out.sample(n)))
        .collect()
}

/// Stacks per-sample coefficient gradients into an `[N, 30]` tensor.
pub fn thetas_to_tensor(thetas: &[CoefficientMatrix]) -> crate::Result<Tensor> {
    let data = thetas.iter().flat_map(|t| t.to_flat()).collect();
    Tensor::new(vec![thetas.len(), THETA_OUTPUTS], data)
}
