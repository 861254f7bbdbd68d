//! Evaluation metrics: mean CIELab ΔE, PSNR and SSIM in RGB, and reports.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;

use crate::color::mean_lab_l2;
use crate::error::{Error, Result};
use crate::imageio::ImageBuffer;

/// Reported PSNR for zero (or vanishing) error.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `10·log10(1 / MSE)` over all three channels, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of a single-channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let e_aa = filter_valid(&aa, h, w, &k);
    let e_bb = filter_valid(&bb, h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    total / n as f64
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`,
/// `K2 = 0.03`, dynamic range 1, averaged over the three channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let plane = |img: &ImageBuffer, c: usize| -> Vec<f64> {
        img.data().iter().skip(c).step_by(3).copied().collect()
    };
    let sum: f64 = (0..3)
        .map(|c| ssim_channel(&plane(a, c), &plane(b, c), h, w))
        .sum();
    Ok(sum / 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub mean_lab_l2: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_lab_l2: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub rows: Vec<MetricRow>,
}

pub fn evaluate_pair(id: impl Into<String>, output: &ImageBuffer, target: &ImageBuffer) -> Result<MetricRow> {
    Ok(MetricRow {
        id: id.into(),
        mean_lab_l2: mean_lab_l2(output, target)?,
        psnr_db: psnr(output, target)?,
        ssim: ssim(output, target)?,
    })
}

impl EvalReport {
    /// Aggregates rows in the order given.
    pub fn from_rows(rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("cannot evaluate an empty set of pairs".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mean_lab_l2: mean(|r| r.mean_lab_l2),
            psnr_db: mean(|r| r.psnr_db),
            ssim: mean(|r| r.ssim),
            rows,
        })
    }

    /// `id,mean_lab_l2,psnr_db,ssim` rows followed by a `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,mean_lab_l2,psnr_db,ssim\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.id, r.mean_lab_l2, r.psnr_db, r.ssim));
        }
        s.push_str(&format!("MEAN,{},{},{}\n", self.mean_lab_l2, self.psnr_db, self.ssim));
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(0).max(4);
        writeln!(f, "{:<width$}  {:>10}  {:>9}  {:>7}", "id", "lab_l2", "psnr_db", "ssim")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>10.4}  {:>9.3}  {:>7.4}",
                r.id, r.mean_lab_l2, r.psnr_db, r.ssim
            )?;
        }
        write!(
            f,
            "{:<width$}  {:>10.4}  {:>9.3}  {:>7.4}",
            "MEAN", self.mean_lab_l2, self.psnr_db, self.ssim
        )
    }
}

/// Per-pair metrics (computed in parallel) and their means, in input order.
/// Rows are labelled by their index.
pub fn evaluate_pairs(pairs: &[(ImageBuffer, ImageBuffer)]) -> Result<EvalReport> {
    let rows = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (out, target))| evaluate_pair(i.to_string(), out, target))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64, lo: f64, hi: f64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(h, w, |_, _| [0; 3].map(|_| rng.gen_range(lo..hi)))
    }

    /// Direct 2-D windowed SSIM, one window position at a time.
    fn ssim_naive(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
        let (h, w) = (a.height(), a.width());
        let mut k2 = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in k2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                s += *v;
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        for c in 0..3 {
            let mut acc = 0.0;
            let mut count = 0.0;
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = k2[i][j] / s;
                            let (u, v) = (a.pixel(y + i, x + j)[c], b.pixel(y + i, x + j)[c]);
                            ma += wgt * u;
                            mb += wgt * v;
                            saa += wgt * u * u;
                            sbb += wgt * v * v;
                            sab += wgt * u * v;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1.0;
                }
            }
            total += acc / count;
        }
        total / 3.0
    }

    #[test]
    fn psnr_anchors() {
        let a = random_image(5, 5, 1, 0.0, 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let zeros = ImageBuffer::filled(4, 4, [0.0; 3]);
        let ones = ImageBuffer::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
        let base = random_image(8, 8, 2, 0.0, 0.9);
        let shifted = ImageBuffer::from_vec(8, 8, base.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((psnr(&base, &shifted).unwrap() - 20.0).abs() < 1e-6);
        assert!(psnr(&base, &ones).is_err());
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = random_image(16, 20, 3, 0.0, 1.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let c = ImageBuffer::filled(12, 12, [0.5; 3]);
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_inverted_image_is_negative_and_matches_naive() {
        let a = random_image(16, 14, 4, 0.25, 0.75);
        let inv = ImageBuffer::from_vec(16, 14, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let fast = ssim(&a, &inv).unwrap();
        assert!(fast < 0.0);
        assert!((fast - ssim_naive(&a, &inv)).abs() < 1e-10);
        let b = random_image(16, 14, 5, 0.0, 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim_naive(&a, &b)).abs() < 1e-10);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ImageBuffer::filled(10, 30, [0.5; 3]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn report_of_identical_pair() {
        let a = random_image(12, 12, 6, 0.0, 1.0);
        let r = evaluate_pairs(&[(a.clone(), a)]).unwrap();
        assert_eq!((r.mean_lab_l2, r.psnr_db, r.ssim), (0.0, 99.0, 1.0));
        assert!(evaluate_pairs(&[]).is_err());
    }

    #[test]
    fn report_means_and_csv() {
        let a = random_image(12, 12, 7, 0.0, 1.0);
        let b = random_image(12, 12, 8, 0.0, 1.0);
        let c = random_image(12, 12, 9, 0.0, 1.0);
        let r = evaluate_pairs(&[(a.clone(), b.clone()), (a.clone(), c.clone())]).unwrap();
        let r0 = evaluate_pair("0", &a, &b).unwrap();
        let r1 = evaluate_pair("1", &a, &c).unwrap();
        assert_eq!(r.rows, vec![r0.clone(), r1.clone()]);
        assert!((r.mean_lab_l2 - (r0.mean_lab_l2 + r1.mean_lab_l2) / 2.0).abs() < 1e-9);
        assert!((r.psnr_db - (r0.psnr_db + r1.psnr_db) / 2.0).abs() < 1e-9);
        assert!((r.ssim - (r0.ssim + r1.ssim) / 2.0).abs() < 1e-9);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "id,mean_lab_l2,psnr_db,ssim");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("MEAN,"));
        assert!(r.to_string().contains("MEAN"));
    }
}
