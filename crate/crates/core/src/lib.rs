//! Learned global color enhancement.
//!
//! A small convolutional network looks at a downsampled copy of a photo and
//! predicts a 10×3 coefficient matrix `θ`. Every pixel `p` of the
//! full-resolution image is then corrected with the quadratic residual
//! transform `p̄ = θᵀ V(p) + p`. Because the correction is global, it costs a
//! handful of multiply-adds per pixel regardless of how the coefficients were
//! obtained.
//!
//! ```
//! use quadenhance::{apply_transform, CoefficientMatrix, ImageBuffer};
//!
//! let img = ImageBuffer::filled(2, 2, [0.2, 0.4, 0.6]);
//! let mut theta = CoefficientMatrix::ZERO;
//! theta.set(9, 0, 0.1); // constant term, red channel
//! let out = apply_transform(&img, &theta).unwrap();
//! assert!((out.pixel(0, 0)[0] - 0.3).abs() < 1e-12);
//! ```
//!
//! Modules:
//! - [`color`]: sRGB, CIELab and ΔE.
//! - [`transform`]: the quadratic basis, application, gradients, least squares.
//! - [`metrics`]: PSNR, SSIM and evaluation reports.
//! - [`imageio`]: PNG/PPM codecs, resizing, augmentation.
//! - [`nn`]: layers, networks, Adam, schedules, model files, gradient checks.
//! - [`paired`] and [`unpaired`]: the two training procedures.
//! - [`dataset`]: splits and synthetic planted-transform corpora.

pub mod color;
pub mod dataset;
mod error;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod paired;
pub mod transform;
pub mod unpaired;

pub use color::{lab_delta_e, mean_lab_l2, srgb_to_lab, LabPixel, RgbPixel};
pub use error::{Error, Result};
pub use imageio::{load_image, save_image, ImageBuffer};
pub use metrics::{evaluate_pairs, psnr, ssim, EvalReport};
pub use paired::{Enhancer, PairedDataset, TrainConfig};
pub use transform::{apply_transform, apply_transform_unclamped, fit_least_squares, CoefficientMatrix};
pub use unpaired::{Ablation, GanConfig, UnpairedDataset};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/color.md")]
    mod color {}
    #[doc = include_str!("../../../book/src/transform.md")]
    mod transform {}
    #[doc = include_str!("../../../book/src/images.md")]
    mod images {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/paired.md")]
    mod paired {}
    #[doc = include_str!("../../../book/src/unpaired.md")]
    mod unpaired {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
