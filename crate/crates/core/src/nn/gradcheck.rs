//! Central finite-difference checks for every layer kind, a tiny composed
//! network, the color transform and the Lab loss.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{LayerKind, LayerSpec};
use super::network::{Mode, ModelParams, NetworkSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::imageio::ImageBuffer;
use crate::transform::{apply_transform_unclamped, transform_backward, CoefficientMatrix};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so exact zeros compare sensibly.
pub const FLOOR: f64 = 1e-6;

/// Minimum distance of any leaky-ReLU input from its kink.
const KINK_MARGIN: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckTarget {
    Layer(LayerKind),
    /// conv, batchnorm, leaky ReLU, conv, average pool, linear on 4×4 input.
    Network,
    Transform,
    LabLoss,
}

impl CheckTarget {
    pub fn all() -> Vec<CheckTarget> {
        LayerKind::ALL
            .into_iter()
            .map(CheckTarget::Layer)
            .chain([CheckTarget::Network, CheckTarget::Transform, CheckTarget::LabLoss])
            .collect()
    }
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckTarget::Layer(k) => write!(f, "{k}"),
            CheckTarget::Network => f.write_str("network"),
            CheckTarget::Transform => f.write_str("transform"),
            CheckTarget::LabLoss => f.write_str("lab_loss"),
        }
    }
}

impl FromStr for CheckTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "network" => Ok(CheckTarget::Network),
            "transform" => Ok(CheckTarget::Transform),
            "lab_loss" => Ok(CheckTarget::LabLoss),
            _ => s.parse().map(CheckTarget::Layer).map_err(|_| {
                Error::InvalidArgument(format!(
                    "unknown gradient-check target `{s}` (expected a layer kind, network, transform, lab_loss or all)"
                ))
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub target: CheckTarget,
    pub cases: usize,
    pub comparisons: usize,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<15} {} cases, {} comparisons, max rel err {:.3e} [{}]",
            self.target.to_string(),
            self.cases,
            self.comparisons,
            self.max_rel_error,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Runs `cases` randomized checks of one target. Deterministic in `seed`.
pub fn run(target: CheckTarget, cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport {
        target,
        cases,
        comparisons: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..cases {
        let (n, err) = match target {
            CheckTarget::Layer(kind) => layer_case(kind, &mut rng)?,
            CheckTarget::Network => network_case(&mut rng)?,
            CheckTarget::Transform => transform_case(&mut rng)?,
            CheckTarget::LabLoss => lab_loss_case(&mut rng)?,
        };
        report.comparisons += n;
        report.max_rel_error = report.max_rel_error.max(err);
    }
    Ok(report)
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Fills parameters and running statistics with random values.
fn randomize(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
    for (name, t) in params.params.iter_mut() {
        let (lo, hi) = if name.ends_with("gamma") { (0.5, 1.5) } else { (-1.0, 1.0) };
        for v in t.data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
    for (name, t) in params.buffers.iter_mut() {
        let (lo, hi) = if name.ends_with("running_var") { (0.5, 1.5) } else { (-0.5, 0.5) };
        for v in t.data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
}

/// Smallest |input| seen by any leaky-ReLU layer (single-branch networks).
fn relu_margin(spec: &NetworkSpec, params: &ModelParams, x: &Tensor, mode: Mode, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = x.clone();
    let mut margin = f64::INFINITY;
    let layers = spec
        .branch_layers
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("b0.{i}"), l))
        .chain(spec.head_layers.iter().enumerate().map(|(i, l)| (format!("head.{i}"), l)));
    for (prefix, layer) in layers {
        if layer.kind() == LayerKind::LeakyRelu {
            margin = h.data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
        h = super::layer_forward(layer, params, &prefix, &h, mode, &mut rng)?.0;
    }
    Ok(margin)
}

/// Compares analytic against central differences of `L = Σ r ⊙ f(θ, x)` for
/// the chosen parameter and input coordinates. Returns the comparison count
/// and the worst relative error.
fn compare(
    spec: &NetworkSpec,
    params: &ModelParams,
    x: &Tensor,
    mode: Mode,
    seed: u64,
    r: &Tensor,
    param_coords: &[(String, usize)],
    input_coords: &[usize],
) -> Result<(usize, f64)> {
    let run = |p: &ModelParams, x: &Tensor| -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(spec.forward(p, x, mode, &mut rng)?.output)
    };
    // L(+) − L(−) as Σ r·(out₊ − out₋) keeps the rounding error small
    let diff = |a: &Tensor, b: &Tensor| -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .zip(r.data())
            .map(|((p, m), w)| (p - m) * w)
            .sum::<f64>()
            / (2.0 * STEP)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pass = spec.forward(params, x, mode, &mut rng)?;
    let (grads, grad_in) = spec.backward(params, &pass, r)?;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (name, i) in param_coords {
        let mut p = params.clone();
        p.params.get_mut(name).expect("known parameter").data_mut()[*i] += STEP;
        let plus = run(&p, x)?;
        p.params.get_mut(name).expect("known parameter").data_mut()[*i] -= 2.0 * STEP;
        let minus = run(&p, x)?;
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[*i]);
        worst = worst.max(relative_error(analytic, diff(&plus, &minus)));
        count += 1;
    }
    for &i in input_coords {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let plus = run(params, &xp)?;
        xp.data_mut()[i] -= 2.0 * STEP;
        let minus = run(params, &xp)?;
        worst = worst.max(relative_error(grad_in.data()[i], diff(&plus, &minus)));
        count += 1;
    }
    Ok((count, worst))
}

fn all_coords(params: &ModelParams) -> Vec<(String, usize)> {
    params
        .params
        .iter()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k.clone(), i)))
        .collect()
}

fn single_layer(layer: LayerSpec, input_shape: Vec<usize>) -> NetworkSpec {
    NetworkSpec {
        name: format!("check-{}", layer.kind()),
        input_shape,
        branches: 1,
        branch_layers: vec![layer],
        head_layers: Vec::new(),
    }
}

fn layer_case(kind: LayerKind, rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let n = rng.gen_range(1..=3);
    let (layer, sample, mode) = match kind {
        LayerKind::Conv2d => {
            let cin = rng.gen_range(1..=3);
            let cout = rng.gen_range(1..=3);
            let kernel = if rng.gen_bool(0.7) { 3 } else { 1 };
            let layer = LayerSpec::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride: rng.gen_range(1..=2),
                padding: rng.gen_range(0..=1),
            };
            (layer, vec![cin, rng.gen_range(3..=5), rng.gen_range(3..=5)], Mode::Train)
        }
        LayerKind::BatchNorm => {
            let c = rng.gen_range(1..=3);
            let sample = if rng.gen_bool(0.5) {
                vec![c, rng.gen_range(1..=3), rng.gen_range(2..=3)]
            } else {
                vec![c]
            };
            let mode = if rng.gen_bool(0.7) { Mode::Train } else { Mode::Eval };
            (LayerSpec::BatchNorm { channels: c }, sample, mode)
        }
        LayerKind::LeakyRelu => {
            let slope = rng.gen_range(0.01..0.5);
            (LayerSpec::LeakyRelu { slope }, vec![rng.gen_range(1..=3), 2, 3], Mode::Train)
        }
        LayerKind::Dropout => {
            let p = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.1..0.7) };
            (LayerSpec::Dropout { p }, vec![rng.gen_range(1..=4), 2, 2], Mode::Train)
        }
        LayerKind::AvgPoolGlobal => (
            LayerSpec::AvgPoolGlobal,
            vec![rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)],
            Mode::Train,
        ),
        LayerKind::Linear => {
            let fin = rng.gen_range(1..=6);
            (LayerSpec::linear(fin, rng.gen_range(1..=5)), vec![fin], Mode::Train)
        }
    };
    // batch statistics need more than one value per channel
    let n = if kind == LayerKind::BatchNorm && sample.len() == 1 { n.max(2) } else { n };
    let spec = single_layer(layer, sample.clone());
    let mut params = spec.init_params(rng, false)?;
    randomize(&mut params, rng);
    let mut shape = vec![n];
    shape.extend(&sample);
    let len: usize = shape.iter().product();
    let mut xs = uniform_vec(rng, len, -1.0, 1.0);
    if kind == LayerKind::LeakyRelu {
        for v in &mut xs {
            if v.abs() < KINK_MARGIN {
                *v += 2.0 * KINK_MARGIN;
            }
        }
    }
    let x = Tensor::new(shape, xs)?;
    let out_shape = spec.forward(&params, &x, mode, &mut ChaCha8Rng::seed_from_u64(0))?.output.shape().to_vec();
    let r = Tensor::new(out_shape.clone(), uniform_vec(rng, out_shape.iter().product(), -1.0, 1.0))?;
    let seed = rng.gen();
    let coords = all_coords(&params);
    compare(&spec, &params, &x, mode, seed, &r, &coords, &(0..x.len()).collect::<Vec<_>>())
}

/// The composed network used by [`CheckTarget::Network`].
pub fn tiny_network() -> NetworkSpec {
    NetworkSpec {
        name: "tiny".into(),
        input_shape: vec![3, 4, 4],
        branches: 1,
        branch_layers: vec![
            LayerSpec::conv3x3(3, 4, 1),
            LayerSpec::BatchNorm { channels: 4 },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::conv3x3(4, 5, 2),
            LayerSpec::AvgPoolGlobal,
        ],
        head_layers: vec![LayerSpec::linear(5, 3)],
    }
}

/// Random parameters probed per network case.
const NETWORK_PARAMS: usize = 50;

fn network_case(rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let spec = tiny_network();
    loop {
        let mut params = spec.init_params(rng, false)?;
        randomize(&mut params, rng);
        let x = Tensor::new(vec![2, 3, 4, 4], uniform_vec(rng, 96, 0.0, 1.0))?;
        let seed: u64 = rng.gen();
        if relu_margin(&spec, &params, &x, Mode::Train, seed)? < KINK_MARGIN {
            continue;
        }
        let r = Tensor::new(vec![2, 3], uniform_vec(rng, 6, -1.0, 1.0))?;
        let pool = all_coords(&params);
        let coords: Vec<_> = (0..NETWORK_PARAMS)
            .map(|_| pool[rng.gen_range(0..pool.len())].clone())
            .collect();
        return compare(&spec, &params, &x, Mode::Train, seed, &r, &coords, &(0..x.len()).collect::<Vec<_>>());
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, |_, _| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)])
}

fn transform_case(rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let x = random_image(rng, 4, 4, 0.0, 1.0);
    let theta = CoefficientMatrix::from_flat(&uniform_vec(rng, 30, -0.5, 0.5))?;
    let r = uniform_vec(rng, x.data().len(), -1.0, 1.0);
    let (g_theta, g_in) = transform_backward(&x, &theta, &r)?;
    let loss_diff = |a: &ImageBuffer, b: &ImageBuffer| {
        a.data()
            .iter()
            .zip(b.data())
            .zip(&r)
            .map(|((p, m), w)| (p - m) * w)
            .sum::<f64>()
            / (2.0 * STEP)
    };
    let mut worst: f64 = 0.0;
    let flat = theta.to_flat();
    for i in 0..flat.len() {
        let mut t = flat;
        t[i] += STEP;
        let plus = apply_transform_unclamped(&x, &CoefficientMatrix::from_flat(&t)?)?;
        t[i] -= 2.0 * STEP;
        let minus = apply_transform_unclamped(&x, &CoefficientMatrix::from_flat(&t)?)?;
        worst = worst.max(relative_error(g_theta.to_flat()[i], loss_diff(&plus, &minus)));
    }
    for i in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let plus = apply_transform_unclamped(&xp, &theta)?;
        xp.data_mut()[i] -= 2.0 * STEP;
        let minus = apply_transform_unclamped(&xp, &theta)?;
        worst = worst.max(relative_error(g_in[i], loss_diff(&plus, &minus)));
    }
    Ok((flat.len() + x.data().len(), worst))
}

fn lab_loss_case(rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    // channel values in [0.1, 0.95] stay clear of the sRGB and Lab
    // piecewise breakpoints, where only one-sided derivatives exist
    let pred = random_image(rng, 4, 4, 0.1, 0.95);
    let target = random_image(rng, 4, 4, 0.1, 0.95);
    let (_, grad) = crate::paired::paired_loss(&pred, &target)?;
    let mut worst: f64 = 0.0;
    for i in 0..pred.data().len() {
        let mut p = pred.clone();
        p.data_mut()[i] += STEP;
        let plus = crate::paired::paired_loss(&p, &target)?.0;
        p.data_mut()[i] -= 2.0 * STEP;
        let minus = crate::paired::paired_loss(&p, &target)?.0;
        worst = worst.max(relative_error(grad[i], (plus - minus) / (2.0 * STEP)));
    }
    Ok((pred.data().len(), worst))
}
