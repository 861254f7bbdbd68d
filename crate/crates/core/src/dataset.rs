//! Train/test splits and synthetic corpora whose targets come from one known
//! ("planted") coefficient matrix.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio::{save_image_with_depth, BitDepth, ImageBuffer};
use crate::transform::{apply_transform_unclamped, gram_condition_number, CoefficientMatrix};

/// Minimum per-channel standard deviation of a synthetic input.
pub const MIN_CHANNEL_STD: f64 = 0.15;
/// Maximum condition number of a synthetic input's basis Gram matrix.
pub const MAX_GRAM_CONDITION: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    TrainX,
    TrainY,
    Train,
    Test,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::TrainX => "train_x",
            Role::TrainY => "train_y",
            Role::Train => "train",
            Role::Test => "test",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Role::TrainX, Role::TrainY, Role::Train, Role::Test]
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown split role `{s}`")))
    }
}

fn shuffled(ids: &[String], seed: u64) -> Vec<String> {
    let mut v = ids.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Seeded shuffle, then the first `n_train` ids train and the rest test.
pub fn make_paired_split(ids: &[String], n_train: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if n_train >= ids.len() {
        return Err(Error::InvalidArgument(format!(
            "n_train = {n_train} must be smaller than the corpus size {}",
            ids.len()
        )));
    }
    let mut v = shuffled(ids, seed);
    let test = v.split_off(n_train);
    Ok((v, test))
}

/// Seeded shuffle; X takes the first `n/2` ids, Y the next `n/2` (so no id
/// appears in both) and the remainder is the test set.
#[allow(clippy::type_complexity)]
pub fn make_unpaired_split(ids: &[String], n: usize, seed: u64) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    if n % 2 != 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("n = {n} must be positive and even")));
    }
    if n > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "n = {n} exceeds the corpus size {}",
            ids.len()
        )));
    }
    let mut v = shuffled(ids, seed);
    let test = v.split_off(n);
    let y = v.split_off(n / 2);
    Ok((v, y, test))
}

pub fn split_manifest(entries: &[(String, Role)]) -> String {
    let mut s = String::new();
    for (id, role) in entries {
        writeln!(s, "{id}\t{role}").expect("string write");
    }
    s
}

pub fn write_split_manifest(path: impl AsRef<Path>, entries: &[(String, Role)]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, split_manifest(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_split_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, Role)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, role) = l
                .split_once('\t')
                .ok_or_else(|| Error::Manifest(format!("expected `id<TAB>role`, got `{l}`")))?;
            Ok((id.to_string(), role.trim_end().parse()?))
        })
        .collect()
}

/// Per-channel standard deviation.
pub fn channel_std(img: &ImageBuffer) -> [f64; 3] {
    let n = img.pixel_count() as f64;
    let mut mean = [0.0; 3];
    for p in img.pixels() {
        for c in 0..3 {
            mean[c] += p[c] / n;
        }
    }
    let mut var = [0.0; 3];
    for p in img.pixels() {
        for c in 0..3 {
            var[c] += (p[c] - mean[c]).powi(2) / n;
        }
    }
    var.map(f64::sqrt)
}

/// True when an image is color-diverse enough to pin down all ten basis
/// directions.
pub fn is_diverse(img: &ImageBuffer) -> bool {
    channel_std(img).iter().all(|&s| s > MIN_CHANNEL_STD) && gram_condition_number(img) < MAX_GRAM_CONDITION
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// A colorful test image: a two-color linear gradient with a per-channel
/// sinusoidal ripple, overlaid with random flat rectangles. Resampled until
/// [`is_diverse`] holds.
pub fn procedural_image(size: usize, rng: &mut impl Rng) -> ImageBuffer {
    loop {
        let (c0, c1) = (random_color(rng), random_color(rng));
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let freq: [f64; 3] = [rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0)];
        let phase: [f64; 3] = [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)];
        let rects: Vec<([f64; 4], [f64; 3])> = (0..rng.gen_range(3..7))
            .map(|_| {
                let (x0, y0) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
                let (w, h) = (rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4));
                ([x0, y0, x0 + w, y0 + h], random_color(rng))
            })
            .collect();
        let s = size as f64;
        let img = ImageBuffer::from_fn(size, size, |y, x| {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            if let Some((_, col)) = rects
                .iter()
                .rev()
                .find(|(r, _)| u >= r[0] && u < r[2] && v >= r[1] && v < r[3])
            {
                return *col;
            }
            let t = ((u - 0.5) * dx + (v - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            let mut p = [0.0; 3];
            for c in 0..3 {
                let ripple = 0.15 * (freq[c] * (u + v) * std::f64::consts::PI + phase[c]).sin();
                p[c] = (c0[c] * (1.0 - t) + c1[c] * t + ripple).clamp(0.0, 1.0);
            }
            p
        });
        if is_diverse(&img) {
            return img;
        }
    }
}

/// Residual terms `t(p)` for one output channel with `c + t(p) ∈ [0, 1]`
/// whenever `p ∈ [0, 1]³`; any sub-convex combination keeps the target in
/// gamut, so planted targets never clip.
fn safe_term(c: usize, rng: &mut impl Rng) -> [f64; 10] {
    // basis index of the product c·k for k ≠ c
    let cross = |a: usize, b: usize| match (a.min(b), a.max(b)) {
        (0, 1) => 6,
        (1, 2) => 7,
        _ => 8,
    };
    let mut t = [0.0; 10];
    let other = (c + rng.gen_range(1..3)) % 3;
    match rng.gen_range(0..6) {
        // c − c²: brighten midtones
        0 => {
            t[c] = 1.0;
            t[3 + c] = -1.0;
        }
        // c² − c: darken midtones
        1 => {
            t[c] = -1.0;
            t[3 + c] = 1.0;
        }
        // move toward another channel
        2 => {
            t[other] = 1.0;
            t[c] = -1.0;
        }
        // lift: b·(1 − c)
        3 => {
            let b = rng.gen_range(0.2..1.0);
            t[9] = b;
            t[c] = -b;
        }
        // gain: −b·c
        4 => {
            t[c] = -rng.gen_range(0.2..1.0);
        }
        // multiply by another channel: c·k − c
        _ => {
            t[cross(c, other)] = 1.0;
            t[c] = -1.0;
        }
    }
    t
}

/// Random gamut-safe planted transform: per channel, a convex combination of
/// two or three safe residual terms with total weight in `[0.4, 0.9]`.
pub fn planted_theta(rng: &mut impl Rng) -> CoefficientMatrix {
    let mut theta = CoefficientMatrix::ZERO;
    for c in 0..3 {
        let k = rng.gen_range(2..=3);
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = rng.gen_range(0.4..0.9);
        let sum: f64 = raw.iter().sum();
        for w in raw {
            let term = safe_term(c, rng);
            for (i, v) in term.iter().enumerate() {
                theta.set(i, c, theta.get(i, c) + w / sum * total * v);
            }
        }
    }
    theta
}

/// In-memory synthetic paired corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub ids: Vec<String>,
    pub inputs: Vec<ImageBuffer>,
    pub targets: Vec<ImageBuffer>,
    pub theta: CoefficientMatrix,
    pub noise: f64,
}

pub fn corpus_id(i: usize) -> String {
    format!("img{i:04}")
}

/// `k` procedural inputs of `size × size`; targets are
/// `clamp(apply_transform_unclamped(input, θ*) + N(0, σ²))`. Each image draws
/// from its own seeded stream so generation parallelizes deterministically.
pub fn make_synthetic_corpus(
    k: usize,
    size: usize,
    theta: &CoefficientMatrix,
    noise: f64,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if k == 0 || size == 0 {
        return Err(Error::InvalidArgument("corpus needs k >= 1 images of size >= 1".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma {noise} must be finite and >= 0")));
    }
    theta.validate()?;
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let pairs = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let x = procedural_image(size, &mut rng);
            let mut y = apply_transform_unclamped(&x, theta)?;
            if noise > 0.0 {
                for v in y.data_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            y.clamp();
            Ok((x, y))
        })
        .collect::<Result<Vec<_>>>()?;
    let (inputs, targets) = pairs.into_iter().unzip();
    Ok(SyntheticCorpus {
        ids: (0..k).map(corpus_id).collect(),
        inputs,
        targets,
        theta: *theta,
        noise,
    })
}

impl SyntheticCorpus {
    /// Writes `input/<id>.png`, `target/<id>.png` (16-bit), `theta.txt` and
    /// a `manifest.tsv` of `input<TAB>target` lines relative to `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["input", "target"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        self.ids
            .par_iter()
            .zip(self.inputs.par_iter().zip(self.targets.par_iter()))
            .try_for_each(|(id, (x, y))| {
                save_image_with_depth(x, dir.join("input").join(format!("{id}.png")), BitDepth::Sixteen)?;
                save_image_with_depth(y, dir.join("target").join(format!("{id}.png")), BitDepth::Sixteen)
            })?;
        self.theta.save(dir.join("theta.txt"))?;
        let mut manifest = String::new();
        for id in &self.ids {
            writeln!(manifest, "input/{id}.png\ttarget/{id}.png").expect("string write");
        }
        let p = dir.join("manifest.tsv");
        std::fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::fit_least_squares;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(corpus_id).collect()
    }

    #[test]
    fn paired_split_is_seeded_disjoint_and_complete() {
        let all = ids(30);
        let (a, b) = make_paired_split(&all, 20, 1).unwrap();
        assert_eq!((a.len(), b.len()), (20, 10));
        assert_eq!(make_paired_split(&all, 20, 1).unwrap(), (a.clone(), b.clone()));
        let mut joined: Vec<_> = a.iter().chain(&b).cloned().collect();
        joined.sort();
        assert_eq!(joined, all);
        assert_ne!(make_paired_split(&all, 20, 2).unwrap().0, a);
        assert!(make_paired_split(&all, 30, 1).is_err());
    }

    #[test]
    fn unpaired_split_sizes_and_disjointness() {
        let all = ids(25);
        let (x, y, t) = make_unpaired_split(&all, 10, 3).unwrap();
        assert_eq!((x.len(), y.len(), t.len()), (5, 5, 15));
        assert!(x.iter().all(|i| !y.contains(i)));
        assert_eq!(make_unpaired_split(&all, 10, 3).unwrap(), (x, y, t));
        assert!(make_unpaired_split(&all, 9, 3).is_err());
        assert!(make_unpaired_split(&all, 26, 3).is_err());
    }

    #[test]
    fn split_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.tsv");
        let entries = vec![("a".to_string(), Role::TrainX), ("b".to_string(), Role::Test)];
        write_split_manifest(&p, &entries).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a\ttrain_x\nb\ttest\n");
        assert_eq!(read_split_manifest(&p).unwrap(), entries);
    }

    #[test]
    fn noiseless_corpus_recovers_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let theta = planted_theta(&mut rng);
        let c = make_synthetic_corpus(3, 32, &theta, 0.0, 5).unwrap();
        for (x, y) in c.inputs.iter().zip(&c.targets) {
            assert!(is_diverse(x));
            let fit = fit_least_squares(x, y, 0.0).unwrap();
            assert!(fit.max_abs_diff(&theta) < 1e-6);
        }
    }

    #[test]
    fn zero_theta_targets_equal_inputs() {
        let c = make_synthetic_corpus(2, 16, &CoefficientMatrix::ZERO, 0.0, 1).unwrap();
        assert_eq!(c.inputs, c.targets);
    }

    #[test]
    fn corpus_is_seeded() {
        let t = planted_theta(&mut ChaCha8Rng::seed_from_u64(3));
        let a = make_synthetic_corpus(3, 16, &t, 0.01, 9).unwrap();
        assert_eq!(a, make_synthetic_corpus(3, 16, &t, 0.01, 9).unwrap());
        assert_ne!(a.inputs, make_synthetic_corpus(3, 16, &t, 0.01, 10).unwrap().inputs);
    }

    #[test]
    fn written_corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        let t = planted_theta(&mut ChaCha8Rng::seed_from_u64(3));
        let c = make_synthetic_corpus(2, 16, &t, 0.0, 9).unwrap();
        c.write(dir.path()).unwrap();
        assert_eq!(CoefficientMatrix::load(dir.path().join("theta.txt")).unwrap(), t);
        let m = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(m.lines().next(), Some("input/img0000.png\ttarget/img0000.png"));
        let back = crate::imageio::load_image(dir.path().join("target/img0001.png")).unwrap();
        let err = back
            .data()
            .iter()
            .zip(c.targets[1].data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 0.5 / 65535.0 + 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn planted_targets_stay_in_gamut(seed in any::<u64>(), r in 0.0..1.0f64, g in 0.0..1.0f64, b in 0.0..1.0f64) {
            let theta = planted_theta(&mut ChaCha8Rng::seed_from_u64(seed));
            for p in [[r, g, b], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]] {
                let q = theta.apply_pixel(p);
                for v in q {
                    prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{q:?} from {p:?}");
                }
            }
        }
    }
}
