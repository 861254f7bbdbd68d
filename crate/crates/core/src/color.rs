//! sRGB, linear RGB and CIELab (D65, 2° observer), plus the CIE76 distance
//! that serves as both the paired training loss and the headline metric.

use crate::error::Result;
use crate::imageio::ImageBuffer;

/// sRGB-encoded `[r, g, b]`, nominally in `[0, 1]`.
pub type RgbPixel = [f64; 3];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LabPixel {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabPixel {
    pub fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.l, self.a, self.b]
    }
}

const SRGB_BREAK: f64 = 0.04045;
const LINEAR_BREAK: f64 = 0.0031308;

/// Linear RGB → XYZ for the sRGB primaries with a D65 white.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// Reference white: the XYZ of linear `[1, 1, 1]`.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const DELTA: f64 = 6.0 / 29.0;
const DELTA_CUBED: f64 = DELTA * DELTA * DELTA;
const LINEAR_SLOPE: f64 = 1.0 / (3.0 * DELTA * DELTA);

/// sRGB decoding. Inputs are clamped to `[0, 1]` first.
pub fn srgb_to_linear(c: f64) -> f64 {
    decode_unclamped(c.clamp(0.0, 1.0))
}

/// sRGB encoding. Inputs are clamped to `[0, 1]` first.
pub fn linear_to_srgb(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= LINEAR_BREAK {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

// Both branches continue past [0, 1] so out-of-gamut predictions keep a
// gradient during training.
#[inline]
fn decode_unclamped(c: f64) -> f64 {
    if c <= SRGB_BREAK {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn decode_derivative(c: f64) -> f64 {
    if c < SRGB_BREAK {
        1.0 / 12.92
    } else {
        2.4 / 1.055 * ((c + 0.055) / 1.055).powf(1.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > DELTA_CUBED {
        t.cbrt()
    } else {
        t * LINEAR_SLOPE + 4.0 / 29.0
    }
}

#[inline]
fn lab_f_derivative(t: f64) -> f64 {
    if t < DELTA_CUBED {
        LINEAR_SLOPE
    } else {
        let c = t.cbrt();
        1.0 / (3.0 * c * c)
    }
}

#[inline]
fn linear_to_lab(lin: [f64; 3]) -> LabPixel {
    let f = xyz_ratios(lin).map(lab_f);
    LabPixel {
        l: 116.0 * f[1] - 16.0,
        a: 500.0 * (f[0] - f[1]),
        b: 200.0 * (f[1] - f[2]),
    }
}

#[inline]
fn xyz_ratios(lin: [f64; 3]) -> [f64; 3] {
    let mut t = [0.0; 3];
    for (k, row) in RGB_TO_XYZ.iter().enumerate() {
        t[k] = (row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]) / WHITE[k];
    }
    t
}

/// sRGB → linear → XYZ → CIELab. Channels are clamped to `[0, 1]`.
pub fn srgb_to_lab(p: RgbPixel) -> LabPixel {
    linear_to_lab(p.map(srgb_to_linear))
}

/// Same chain as [`srgb_to_lab`] without clamping: the piecewise branches
/// are extended beyond `[0, 1]`. Used on unclamped training predictions.
pub fn srgb_to_lab_unclamped(p: RgbPixel) -> LabPixel {
    linear_to_lab(p.map(decode_unclamped))
}

/// Analytic Jacobian `∂(L, a, b) / ∂(r, g, b)` of [`srgb_to_lab_unclamped`].
///
/// Row `k` is the gradient of Lab component `k`. Exactly at a piecewise
/// breakpoint the power / cube-root branch derivative is returned.
pub fn srgb_to_lab_jacobian(p: RgbPixel) -> [[f64; 3]; 3] {
    let lin = p.map(decode_unclamped);
    let dlin = p.map(decode_derivative);
    let df = xyz_ratios(lin).map(lab_f_derivative);
    // ∂f_k/∂rgb_j = f'(t_k) · M[k][j] / W[k] · dlin_j
    let mut dfd = [[0.0; 3]; 3];
    for k in 0..3 {
        for j in 0..3 {
            dfd[k][j] = df[k] * RGB_TO_XYZ[k][j] / WHITE[k] * dlin[j];
        }
    }
    let mut jac = [[0.0; 3]; 3];
    for j in 0..3 {
        jac[0][j] = 116.0 * dfd[1][j];
        jac[1][j] = 500.0 * (dfd[0][j] - dfd[1][j]);
        jac[2][j] = 200.0 * (dfd[1][j] - dfd[2][j]);
    }
    jac
}

/// CIE76 ΔE: the Euclidean distance between two Lab coordinates.
#[inline]
pub fn lab_delta_e(x: LabPixel, y: LabPixel) -> f64 {
    let dl = x.l - y.l;
    let da = x.a - y.a;
    let db = x.b - y.b;
    (dl * dl + da * da + db * db).sqrt()
}

/// Mean per-pixel ΔE between two images of identical dimensions.
pub fn mean_lab_l2(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_shape(b)?;
    let total: f64 = a
        .pixels()
        .zip(b.pixels())
        .map(|(p, q)| lab_delta_e(srgb_to_lab(p), srgb_to_lab(q)))
        .sum();
    Ok(total / a.pixel_count() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd_jacobian(p: RgbPixel, h: f64) -> [[f64; 3]; 3] {
        let mut jac = [[0.0; 3]; 3];
        for j in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[j] += h;
            lo[j] -= h;
            let a = srgb_to_lab_unclamped(hi).to_array();
            let b = srgb_to_lab_unclamped(lo).to_array();
            for k in 0..3 {
                jac[k][j] = (a[k] - b[k]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn decoding_anchors() {
        assert_eq!(srgb_to_linear(0.0), 0.0);
        assert_eq!(srgb_to_linear(1.0), 1.0);
        let expect = ((0.5f64 + 0.055) / 1.055).powf(2.4);
        assert!((srgb_to_linear(0.5) - expect).abs() < 1e-15);
        assert!((srgb_to_linear(0.5) - 0.2140).abs() < 1e-4);
        assert_eq!(srgb_to_linear(-0.5), 0.0);
        assert_eq!(srgb_to_linear(1.5), 1.0);
    }

    #[test]
    fn decode_encode_round_trip_on_dense_grid() {
        for i in 0..=100_000 {
            let c = i as f64 / 100_000.0;
            assert!((linear_to_srgb(srgb_to_linear(c)) - c).abs() < 1e-6);
        }
    }

    #[test]
    fn white_and_black() {
        let w = srgb_to_lab([1.0; 3]);
        assert!((w.l - 100.0).abs() < 1e-3);
        assert!(w.a.abs() < 1e-2 && w.b.abs() < 1e-2);
        let k = srgb_to_lab([0.0; 3]);
        assert!(k.l.abs() < 1e-6 && k.a.abs() < 1e-9 && k.b.abs() < 1e-9);
    }

    #[test]
    fn pure_red_matches_reference_chain() {
        // Independent evaluation of the CIE formulas with the usual published
        // D65 white (0.95047, 1.0, 1.08883).
        let lin = 1.0f64;
        let (x, y, z) = (0.4124564 * lin, 0.2126729 * lin, 0.0193339 * lin);
        let f = |t: f64| {
            if t > (6.0f64 / 29.0).powi(3) {
                t.powf(1.0 / 3.0)
            } else {
                t / (3.0 * (6.0f64 / 29.0).powi(2)) + 4.0 / 29.0
            }
        };
        let (fx, fy, fz) = (f(x / 0.95047), f(y / 1.0), f(z / 1.08883));
        let expect = [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)];
        let got = srgb_to_lab([1.0, 0.0, 0.0]).to_array();
        for k in 0..3 {
            assert!((got[k] - expect[k]).abs() < 1e-3, "{got:?} vs {expect:?}");
        }
        assert!((got[0] - 53.24).abs() < 0.01);
        assert!((got[1] - 80.09).abs() < 0.01);
        assert!((got[2] - 67.20).abs() < 0.01);
    }

    #[test]
    fn delta_e_anchors() {
        let x = LabPixel::new(12.0, -3.0, 40.0);
        assert_eq!(lab_delta_e(x, x), 0.0);
        assert_eq!(
            lab_delta_e(LabPixel::default(), LabPixel::new(3.0, 4.0, 0.0)),
            5.0
        );
        // b is a difference, not a sum
        assert_eq!(
            lab_delta_e(LabPixel::new(0.0, 0.0, 5.0), LabPixel::new(0.0, 0.0, 5.0)),
            0.0
        );
    }

    #[test]
    fn mean_lab_l2_anchors() {
        let w = ImageBuffer::filled(3, 4, [1.0; 3]);
        let k = ImageBuffer::filled(3, 4, [0.0; 3]);
        assert_eq!(mean_lab_l2(&w, &w).unwrap(), 0.0);
        assert!((mean_lab_l2(&w, &k).unwrap() - 100.0).abs() < 1e-3);
        assert!(mean_lab_l2(&w, &ImageBuffer::filled(4, 3, [1.0; 3])).is_err());
    }

    #[test]
    fn mean_lab_l2_is_per_pixel_mean() {
        let a = ImageBuffer::from_vec(
            2,
            2,
            vec![0.1, 0.7, 0.3, 0.9, 0.2, 0.5, 0.0, 0.0, 1.0, 0.6, 0.6, 0.1],
        )
        .unwrap();
        let b = ImageBuffer::from_vec(
            2,
            2,
            vec![0.4, 0.4, 0.4, 0.8, 0.3, 0.5, 0.2, 0.1, 0.9, 0.6, 0.5, 0.3],
        )
        .unwrap();
        let oracle: f64 = a
            .pixels()
            .zip(b.pixels())
            .map(|(p, q)| {
                let (x, y) = (srgb_to_lab(p).to_array(), srgb_to_lab(q).to_array());
                x.iter().zip(&y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / 4.0;
        assert!((mean_lab_l2(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn jacobian_at_breakpoint_uses_power_branch() {
        let p = [SRGB_BREAK, 0.5, 0.5];
        let jac = srgb_to_lab_jacobian(p);
        assert!(jac.iter().flatten().all(|v| v.is_finite()));
        // power branch slope at the break differs from 1/12.92 only slightly
        let mut expect = [0.0; 3];
        // one-sided difference taken strictly inside the power branch
        let (mut near, mut far) = (p, p);
        near[0] += 1e-6;
        far[0] += 2e-6;
        let a = srgb_to_lab_unclamped(far).to_array();
        let b = srgb_to_lab_unclamped(near).to_array();
        for k in 0..3 {
            expect[k] = (a[k] - b[k]) / 1e-6;
            assert!((jac[k][0] - expect[k]).abs() <= 1e-4 * expect[k].abs().max(1.0));
        }
    }

    #[test]
    fn gray_axis_has_no_chroma_gradient_along_itself() {
        for g in [0.02, 0.2, 0.5, 0.8, 0.99] {
            let jac = srgb_to_lab_jacobian([g; 3]);
            for row in &jac[1..] {
                assert!((row[0] + row[1] + row[2]).abs() < 1e-6, "{g}: {row:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn jacobian_matches_central_differences(
            r in 0.001f64..0.999, g in 0.001f64..0.999, b in 0.001f64..0.999
        ) {
            let p = [r, g, b];
            prop_assume!(p.iter().all(|c| (c - SRGB_BREAK).abs() > 1e-4));
            let jac = srgb_to_lab_jacobian(p);
            let fd = fd_jacobian(p, 1e-5);
            for k in 0..3 {
                for j in 0..3 {
                    let rel = (jac[k][j] - fd[k][j]).abs() / jac[k][j].abs().max(fd[k][j].abs()).max(1e-6);
                    prop_assert!(rel < 1e-4, "({k},{j}) {} vs {}", jac[k][j], fd[k][j]);
                }
            }
        }

        #[test]
        fn delta_e_axioms(
            x in prop::array::uniform3(-100.0f64..100.0),
            y in prop::array::uniform3(-100.0f64..100.0),
        ) {
            let (x, y) = (LabPixel::new(x[0], x[1], x[2]), LabPixel::new(y[0], y[1], y[2]));
            let d = lab_delta_e(x, y);
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, lab_delta_e(y, x));
            prop_assert_eq!(lab_delta_e(x, x), 0.0);
            prop_assert!(x == y || d > 0.0);
            let norm = (x.l - y.l).hypot(x.a - y.a).hypot(x.b - y.b);
            prop_assert!((d - norm).abs() <= 1e-12 * norm.max(1.0));
        }
    }
}
