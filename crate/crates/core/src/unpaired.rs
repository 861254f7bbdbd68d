//! Two-way adversarial training on unpaired image sets.
//!
//! `G_X` maps the input domain X to the target style Y and `G_Y` maps back.
//! Both are coefficient networks feeding the quadratic transform. Phase 1
//! trains both generators and both discriminators with adversarial and cycle
//! losses, optionally sharing the convolution weights of the generators
//! (batchnorm and linear parameters stay private). Phase 2 unshares the
//! weights, freezes `G_Y` and the discriminators, and fine-tunes `G_X` on the
//! `y → G_Y → G_X` reconstruction alone.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio::{load_image, resize_bilinear, Augmentation, ImageBuffer};
use crate::nn::{
    images_to_tensor, output_to_thetas, tensor_to_interleaved, thetas_to_tensor, Adam, AdamConfig, ForwardPass,
    Gradients, LayerKind, LrSchedule, Mode, ModelParams, NetworkSpec, ParamSource, Tensor, load_model, save_model,
};
use crate::paired::{paired_loss, parse, Enhancer};
use crate::transform::{apply_transform_unclamped, transform_backward, CoefficientMatrix};

/// Mean Lab cycle losses for a batch: `(L_cycleX, L_cycleY)` and the
/// gradients with respect to `x''` and `y''`, averaged over the batch.
#[allow(clippy::type_complexity)]
pub fn cycle_losses(
    x: &[ImageBuffer],
    x2: &[ImageBuffer],
    y: &[ImageBuffer],
    y2: &[ImageBuffer],
) -> Result<(f64, f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (lx, gx) = batch_lab_loss(x2, x)?;
    let (ly, gy) = batch_lab_loss(y2, y)?;
    Ok((lx, ly, gx, gy))
}

/// Mean over the batch of [`paired_loss`], with gradients scaled to match.
fn batch_lab_loss(pred: &[ImageBuffer], target: &[ImageBuffer]) -> Result<(f64, Vec<Vec<f64>>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "batch sizes {} and {} differ or are empty",
            pred.len(),
            target.len()
        )));
    }
    let per: Vec<(f64, Vec<f64>)> = pred
        .par_iter()
        .zip(target.par_iter())
        .map(|(p, t)| paired_loss(p, t))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let loss = per.iter().map(|(l, _)| l).sum::<f64>() / n;
    let grads = per
        .into_iter()
        .map(|(_, mut g)| {
            g.iter_mut().for_each(|v| *v /= n);
            g
        })
        .collect();
    Ok((loss, grads))
}

/// Sigmoid cross-entropy losses from discriminator logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GanLosses {
    /// `−mean log D(real) − mean log(1 − D(fake))`.
    pub disc: f64,
    /// Non-saturating generator loss `−mean log D(fake)`.
    pub gen: f64,
    pub disc_grad_real: Vec<f64>,
    pub disc_grad_fake: Vec<f64>,
    pub gen_grad_fake: Vec<f64>,
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn gan_losses(real: &[f64], fake: &[f64]) -> GanLosses {
    let nr = real.len().max(1) as f64;
    let nf = fake.len().max(1) as f64;
    GanLosses {
        disc: real.iter().map(|&l| softplus(-l)).sum::<f64>() / nr + fake.iter().map(|&l| softplus(l)).sum::<f64>() / nf,
        gen: fake.iter().map(|&l| softplus(-l)).sum::<f64>() / nf,
        disc_grad_real: real.iter().map(|&l| (sigmoid(l) - 1.0) / nr).collect(),
        disc_grad_fake: fake.iter().map(|&l| sigmoid(l) / nf).collect(),
        gen_grad_fake: fake.iter().map(|&l| (sigmoid(l) - 1.0) / nf).collect(),
    }
}

/// `α·L_cycleX + α·L_cycleY + L_GAN(G_X, D_Y) + L_GAN(G_Y, D_X)`.
pub fn total_phase1_loss(cycle_x: f64, cycle_y: f64, gan_gx: f64, gan_gy: f64, alpha: f64) -> f64 {
    alpha * cycle_x + alpha * cycle_y + gan_gx + gan_gy
}

/// Unpaired training images at the square training resolution.
#[derive(Clone, Debug)]
pub struct UnpairedDataset {
    pub x: Vec<ImageBuffer>,
    pub y: Vec<ImageBuffer>,
    pub resolution: usize,
}

impl UnpairedDataset {
    pub fn from_images(x: Vec<ImageBuffer>, y: Vec<ImageBuffer>, resolution: usize) -> Result<Self> {
        if x.is_empty() || y.is_empty() {
            return Err(Error::InvalidArgument("both unpaired sets need at least one image".into()));
        }
        if resolution == 0 {
            return Err(Error::InvalidArgument("training resolution must be positive".into()));
        }
        let resize = |v: Vec<ImageBuffer>| -> Result<Vec<ImageBuffer>> {
            v.par_iter().map(|im| resize_bilinear(im, resolution, resolution)).collect()
        };
        Ok(Self {
            x: resize(x)?,
            y: resize(y)?,
            resolution,
        })
    }

    pub fn from_manifests(x: impl AsRef<Path>, y: impl AsRef<Path>, resolution: usize) -> Result<Self> {
        Self::from_images(load_list(x.as_ref())?, load_list(y.as_ref())?, resolution)
    }
}

/// Reads a one-path-per-line manifest (relative to its directory) and loads
/// every image.
pub fn load_list(path: &Path) -> Result<Vec<ImageBuffer>> {
    read_path_list(path)?.par_iter().map(load_image).collect()
}

pub fn read_path_list(path: &Path) -> Result<Vec<std::path::PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let out: Vec<_> = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect();
    if out.is_empty() {
        return Err(Error::Manifest(format!("{} lists no images", path.display())));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub phase1_epochs: usize,
    pub phase1_batch: usize,
    pub phase1_lr: f64,
    pub phase1_hold_epochs: usize,
    pub disc_dropout: f64,
    pub alpha: f64,
    pub share_weights: bool,
    /// Generator dropout during phase 1 (0 except in one ablation arm).
    pub phase1_gen_dropout: f64,
    pub phase2_enabled: bool,
    pub phase2_epochs: usize,
    pub phase2_batch: usize,
    pub phase2_lr: f64,
    pub phase2_hold_epochs: usize,
    pub gen_dropout: f64,
    pub augment: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 200,
            phase1_batch: 20,
            phase1_lr: 1e-4,
            phase1_hold_epochs: 100,
            disc_dropout: 0.12,
            alpha: 0.02,
            share_weights: true,
            phase1_gen_dropout: 0.0,
            phase2_enabled: true,
            phase2_epochs: 200,
            phase2_batch: 50,
            phase2_lr: 5e-6,
            phase2_hold_epochs: 100,
            gen_dropout: 0.15,
            augment: true,
            seed: 0,
            checkpoint_every: 25,
        }
    }
}

impl GanConfig {
    pub const KEYS: [&'static str; 17] = [
        "phase1_epochs",
        "phase1_batch",
        "phase1_lr",
        "phase1_hold_epochs",
        "disc_dropout",
        "alpha",
        "share_weights",
        "phase1_gen_dropout",
        "phase2_enabled",
        "phase2_epochs",
        "phase2_batch",
        "phase2_lr",
        "phase2_hold_epochs",
        "gen_dropout",
        "augment",
        "seed",
        "checkpoint_every",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.phase1_epochs == 0 || self.phase1_batch == 0 || self.phase2_epochs == 0 || self.phase2_batch == 0 {
            return bad("epoch and batch counts must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        for p in [self.disc_dropout, self.gen_dropout, self.phase1_gen_dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout rates must lie in [0, 1)");
            }
        }
        if !(self.phase1_lr >= 0.0 && self.phase2_lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "phase1_epochs" => self.phase1_epochs = parse(key, value)?,
            "phase1_batch" => self.phase1_batch = parse(key, value)?,
            "phase1_lr" => self.phase1_lr = parse(key, value)?,
            "phase1_hold_epochs" => self.phase1_hold_epochs = parse(key, value)?,
            "disc_dropout" => self.disc_dropout = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "share_weights" => self.share_weights = parse(key, value)?,
            "phase1_gen_dropout" => self.phase1_gen_dropout = parse(key, value)?,
            "phase2_enabled" => self.phase2_enabled = parse(key, value)?,
            "phase2_epochs" => self.phase2_epochs = parse(key, value)?,
            "phase2_batch" => self.phase2_batch = parse(key, value)?,
            "phase2_lr" => self.phase2_lr = parse(key, value)?,
            "phase2_hold_epochs" => self.phase2_hold_epochs = parse(key, value)?,
            "gen_dropout" => self.gen_dropout = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn phase1_schedule(&self) -> LrSchedule {
        LrSchedule::HoldThenDecay {
            lr0: self.phase1_lr,
            hold_epochs: self.phase1_hold_epochs,
            total_epochs: self.phase1_epochs,
        }
    }

    pub fn phase2_schedule(&self) -> LrSchedule {
        LrSchedule::HoldThenDecay {
            lr0: self.phase2_lr,
            hold_epochs: self.phase2_hold_epochs,
            total_epochs: self.phase2_epochs,
        }
    }
}

/// The six ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Complete,
    NoSharedWeights,
    FirstPhaseOnly,
    FirstPhaseOnlyWithDropout,
    CompleteWithoutDropout,
    Raw,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Complete,
        Ablation::NoSharedWeights,
        Ablation::FirstPhaseOnly,
        Ablation::FirstPhaseOnlyWithDropout,
        Ablation::CompleteWithoutDropout,
        Ablation::Raw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Complete => "complete",
            Ablation::NoSharedWeights => "no-shared-weights",
            Ablation::FirstPhaseOnly => "first-phase-only",
            Ablation::FirstPhaseOnlyWithDropout => "first-phase-only-with-dropout",
            Ablation::CompleteWithoutDropout => "complete-without-dropout",
            Ablation::Raw => "raw",
        }
    }

    /// `(share_weights, phase2_enabled, phase1 generator dropout, phase 2 dropout)`.
    pub fn flags(self) -> (bool, bool, f64, f64) {
        match self {
            Ablation::Complete => (true, true, 0.0, 0.15),
            Ablation::NoSharedWeights => (false, true, 0.0, 0.15),
            Ablation::FirstPhaseOnly => (true, false, 0.0, 0.0),
            Ablation::FirstPhaseOnlyWithDropout => (true, false, 0.15, 0.0),
            Ablation::CompleteWithoutDropout => (true, true, 0.0, 0.0),
            Ablation::Raw => (false, false, 0.0, 0.0),
        }
    }

    pub fn configure(self, config: &mut GanConfig) {
        let (share, phase2, p1, p2) = self.flags();
        config.share_weights = share;
        config.phase2_enabled = phase2;
        config.phase1_gen_dropout = p1;
        config.gen_dropout = p2;
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
            Error::InvalidArgument(format!("unknown ablation `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Parameters read through one generator of a [`GeneratorPair`].
pub struct GeneratorView<'a> {
    shared: &'a BTreeMap<String, Tensor>,
    private: &'a ModelParams,
}

impl ParamSource for GeneratorView<'_> {
    fn param(&self, name: &str) -> Option<&Tensor> {
        self.private.params.get(name).or_else(|| self.shared.get(name))
    }

    fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.private.buffers.get(name)
    }
}

/// `G_X` and `G_Y` with one copy of the shared convolution weights and
/// private batchnorm, linear and running-statistic tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorPair {
    pub spec: NetworkSpec,
    pub shared: BTreeMap<String, Tensor>,
    pub gx: ModelParams,
    pub gy: ModelParams,
}

impl GeneratorPair {
    pub fn init(spec: NetworkSpec, share_weights: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut gx = spec.init_params(rng, true)?;
        let mut gy = spec.init_params(rng, true)?;
        let mut shared = BTreeMap::new();
        if share_weights {
            for name in spec.conv_param_names() {
                let t = gx.params.remove(&name).expect("conv parameter");
                gy.params.remove(&name);
                shared.insert(name, t);
            }
        }
        Ok(Self { spec, shared, gx, gy })
    }

    pub fn is_shared(&self) -> bool {
        !self.shared.is_empty()
    }

    pub fn view_x(&self) -> GeneratorView<'_> {
        GeneratorView {
            shared: &self.shared,
            private: &self.gx,
        }
    }

    pub fn view_y(&self) -> GeneratorView<'_> {
        GeneratorView {
            shared: &self.shared,
            private: &self.gy,
        }
    }

    /// Full, self-contained parameter set of one generator.
    fn merged(&self, private: &ModelParams) -> ModelParams {
        let mut p = private.clone();
        for (k, t) in &self.shared {
            p.params.insert(k.clone(), t.clone());
        }
        p
    }

    pub fn params_x(&self) -> ModelParams {
        self.merged(&self.gx)
    }

    pub fn params_y(&self) -> ModelParams {
        self.merged(&self.gy)
    }

    /// Gives each generator its own deep copy of the shared weights.
    pub fn unshare(&mut self) {
        self.gx = self.params_x();
        self.gy = self.params_y();
        self.shared.clear();
    }

    /// Checks that the partition into shared and private tensors is exact and
    /// that every convolution tensor reads bit-identically through both
    /// generators while sharing is active.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(format!("generator pair invariant: {m}")));
        let conv = self.spec.conv_param_names();
        for name in self.shared.keys() {
            if self.gx.params.contains_key(name) || self.gy.params.contains_key(name) {
                return fail(format!("`{name}` is both shared and private"));
            }
        }
        if self.is_shared() {
            for name in &conv {
                let (vx, vy) = (self.view_x(), self.view_y());
                let (a, b) = (vx.param(name), vy.param(name));
                match (a, b) {
                    (Some(a), Some(b)) if a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits())) => {}
                    _ => return fail(format!("shared tensor `{name}` differs between generators")),
                }
            }
        }
        let want = self.spec.init_params(&mut ChaCha8Rng::seed_from_u64(0), false)?;
        for name in want.params.keys() {
            let owners = [
                self.shared.contains_key(name),
                self.gx.params.contains_key(name),
                self.gy.params.contains_key(name),
            ];
            let ok = if self.shared.contains_key(name) {
                owners == [true, false, false]
            } else {
                owners == [false, true, true]
            };
            if !ok {
                return fail(format!("`{name}` is not owned exactly once per generator"));
            }
        }
        Ok(())
    }

    pub fn enhancer_x(&self) -> Result<Enhancer> {
        Enhancer::new(self.spec.clone(), self.params_x())
    }

    pub fn enhancer_y(&self) -> Result<Enhancer> {
        Enhancer::new(self.spec.clone(), self.params_y())
    }
}

/// Generators plus discriminators `D_X` (judges X-domain images) and `D_Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct GanState {
    pub pair: GeneratorPair,
    pub disc_spec: NetworkSpec,
    pub dx: ModelParams,
    pub dy: ModelParams,
}

impl GanState {
    pub const FILES: [&'static str; 4] = ["g_x.qem", "g_y.qem", "d_x.qem", "d_y.qem"];

    /// Writes the four networks as standalone model files into `dir`.
    /// Shared weights are stored in both generator files.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let [gx, gy, dx, dy] = Self::FILES.map(|f| dir.join(f));
        save_model(&self.pair.spec, &self.pair.params_x(), gx)?;
        save_model(&self.pair.spec, &self.pair.params_y(), gy)?;
        save_model(&self.disc_spec, &self.dx, dx)?;
        save_model(&self.disc_spec, &self.dy, dy)
    }

    /// Reads a state written by [`save_dir`](Self::save_dir). The generators
    /// come back unshared.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let [gx, gy, dx, dy] = Self::FILES.map(|f| load_model(dir.join(f)));
        let ((spec, gx), (spec_y, gy)) = (gx?, gy?);
        let ((disc_spec, dx), (disc_spec_y, dy)) = (dx?, dy?);
        if spec != spec_y || disc_spec != disc_spec_y {
            return Err(Error::ModelFormat(format!(
                "{}: generator or discriminator architectures disagree",
                dir.display()
            )));
        }
        let pair = GeneratorPair {
            spec,
            shared: BTreeMap::new(),
            gx,
            gy,
        };
        pair.check_invariants()?;
        Ok(Self { pair, disc_spec, dx, dy })
    }
}

/// One row of the unpaired history CSV. Phase 2 fills only `cycle_y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanEpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub cycle_x: Option<f64>,
    pub cycle_y: f64,
    pub gan_gx: Option<f64>,
    pub gan_gy: Option<f64>,
    pub disc_x: Option<f64>,
    pub disc_y: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanHistory {
    pub epochs: Vec<GanEpochRecord>,
}

impl GanHistory {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.17e}"));
        let mut s = String::from("epoch,cycle_x,cycle_y,gan_gx,gan_gy,disc_x,disc_y,lr\n");
        for r in &self.epochs {
            writeln!(
                s,
                "{},{},{:.17e},{},{},{},{},{:.17e}",
                r.epoch,
                opt(r.cycle_x),
                r.cycle_y,
                opt(r.gan_gx),
                opt(r.gan_gy),
                opt(r.disc_x),
                opt(r.disc_y),
                r.lr
            )
            .expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Default)]
pub struct GanHooks<'a> {
    pub on_epoch: Option<&'a mut dyn FnMut(&GanEpochRecord)>,
    /// Called after every optimizer step with the current state.
    pub on_step: Option<&'a mut dyn FnMut(&GanState)>,
    pub checkpoint_dir: Option<&'a Path>,
}

struct GenOut {
    pass: ForwardPass,
    thetas: Vec<CoefficientMatrix>,
    outputs: Vec<ImageBuffer>,
}

fn run_gen(
    spec: &NetworkSpec,
    params: &dyn ParamSource,
    inputs: &[ImageBuffer],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<GenOut> {
    let x = images_to_tensor(&inputs.iter().collect::<Vec<_>>())?;
    let pass = spec.forward(params, &x, mode, rng)?;
    let thetas = output_to_thetas(&pass.output)?;
    let outputs = inputs
        .par_iter()
        .zip(thetas.par_iter())
        .map(|(im, t)| apply_transform_unclamped(im, t))
        .collect::<Result<_>>()?;
    Ok(GenOut { pass, thetas, outputs })
}

/// Parameter gradients of a generator invocation and the gradients with
/// respect to its input images, given gradients on its output images.
fn back_gen(
    spec: &NetworkSpec,
    params: &dyn ParamSource,
    out: &GenOut,
    inputs: &[ImageBuffer],
    grad_outputs: &[Vec<f64>],
) -> Result<(Gradients, Vec<Vec<f64>>)> {
    let per: Vec<(CoefficientMatrix, Vec<f64>)> = inputs
        .par_iter()
        .zip(out.thetas.par_iter())
        .zip(grad_outputs.par_iter())
        .map(|((x, t), g)| transform_backward(x, t, g))
        .collect::<Result<_>>()?;
    let dtheta = thetas_to_tensor(&per.iter().map(|(d, _)| *d).collect::<Vec<_>>())?;
    let (grads, gin) = spec.backward(params, &out.pass, &dtheta)?;
    let mut gin = tensor_to_interleaved(&gin)?;
    for (acc, (_, direct)) in gin.iter_mut().zip(&per) {
        for (a, d) in acc.iter_mut().zip(direct) {
            *a += d;
        }
    }
    Ok((grads, gin))
}

fn disc_logits(
    spec: &NetworkSpec,
    params: &ModelParams,
    real: &[ImageBuffer],
    fake: &[ImageBuffer],
    rng: &mut ChaCha8Rng,
) -> Result<(ForwardPass, Vec<f64>)> {
    let all: Vec<&ImageBuffer> = real.iter().chain(fake).collect();
    let pass = spec.forward(params, &images_to_tensor(&all)?, Mode::Train, rng)?;
    let logits = pass.output.data().to_vec();
    Ok((pass, logits))
}

fn logit_grad(real: &[f64], fake: &[f64]) -> Result<Tensor> {
    let data: Vec<f64> = real.iter().chain(fake).copied().collect();
    Tensor::new(vec![data.len(), 1], data)
}

fn numeric_check(ok: bool, phase: u8, epoch: usize, batch: usize, lr: f64, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::NumericFailure {
            epoch,
            batch,
            lr,
            what: format!("phase {phase}: {what}"),
        })
    }
}

fn augmented(images: &[&ImageBuffer], augment: bool, rng: &mut ChaCha8Rng) -> Result<Vec<ImageBuffer>> {
    images
        .iter()
        .map(|im| {
            if augment {
                Augmentation::sample(rng).apply(im)
            } else {
                Ok((*im).clone())
            }
        })
        .collect()
}

fn split_shared(grads: &mut Gradients, shared: &BTreeMap<String, Tensor>) -> Gradients {
    grads.split_off(|n| shared.contains_key(n))
}

/// Phase 1: alternating discriminator and generator updates.
pub fn train_phase1(data: &UnpairedDataset, config: &GanConfig, hooks: &mut GanHooks) -> Result<(GanState, GanHistory)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gen_spec = NetworkSpec::unpaired_generator(data.resolution, config.phase1_gen_dropout);
    let disc_spec = NetworkSpec::discriminator(data.resolution, config.disc_dropout);
    let pair = GeneratorPair::init(gen_spec, config.share_weights, &mut rng)?;
    let dx = disc_spec.init_params(&mut rng, false)?;
    let dy = disc_spec.init_params(&mut rng, false)?;
    let mut state = GanState { pair, disc_spec, dx, dy };
    state.pair.check_invariants()?;

    let adam = || Adam::new(AdamConfig::default());
    let (mut a_shared, mut a_gx, mut a_gy, mut a_dx, mut a_dy) = (adam(), adam(), adam(), adam(), adam());
    let schedule = config.phase1_schedule();
    let mut history = GanHistory::default();
    let n = data.x.len().max(data.y.len());
    let mut ox: Vec<usize> = (0..data.x.len()).collect();
    let mut oy: Vec<usize> = (0..data.y.len()).collect();

    for epoch in 0..config.phase1_epochs {
        let lr = schedule.lr(epoch);
        ox.shuffle(&mut rng);
        oy.shuffle(&mut rng);
        let mut sums = [0.0f64; 6];
        let mut batches = 0usize;
        for (bi, start) in (0..n).step_by(config.phase1_batch).enumerate() {
            let idx: Vec<usize> = (start..(start + config.phase1_batch).min(n)).collect();
            let xs_ref: Vec<&ImageBuffer> = idx.iter().map(|&i| &data.x[ox[i % ox.len()]]).collect();
            let ys_ref: Vec<&ImageBuffer> = idx.iter().map(|&i| &data.y[oy[i % oy.len()]]).collect();
            let xs = augmented(&xs_ref, config.augment, &mut rng)?;
            let ys = augmented(&ys_ref, config.augment, &mut rng)?;
            let spec = state.pair.spec.clone();

            // generator forwards: y' = G_X(x), x' = G_Y(y), x'' = G_Y(y'), y'' = G_X(x')
            let (a, b, c, d) = {
                let (vx, vy) = (state.pair.view_x(), state.pair.view_y());
                let a = run_gen(&spec, &vx, &xs, Mode::Train, &mut rng)?;
                let b = run_gen(&spec, &vy, &ys, Mode::Train, &mut rng)?;
                let c = run_gen(&spec, &vy, &a.outputs, Mode::Train, &mut rng)?;
                let d = run_gen(&spec, &vx, &b.outputs, Mode::Train, &mut rng)?;
                (a, b, c, d)
            };
            let (cx, cy, mut g_x2, mut g_y2) = cycle_losses(&xs, &c.outputs, &ys, &d.outputs)?;
            for g in g_x2.iter_mut().chain(g_y2.iter_mut()) {
                g.iter_mut().for_each(|v| *v *= config.alpha);
            }

            // discriminators on real vs detached fakes
            let (pass_dy, ly) = disc_logits(&state.disc_spec, &state.dy, &ys, &a.outputs, &mut rng)?;
            let gl_y = gan_losses(&ly[..ys.len()], &ly[ys.len()..]);
            let (grads_dy, _) = state.disc_spec.backward(
                &state.dy,
                &pass_dy,
                &logit_grad(&gl_y.disc_grad_real, &gl_y.disc_grad_fake)?,
            )?;
            let (pass_dx, lx) = disc_logits(&state.disc_spec, &state.dx, &xs, &b.outputs, &mut rng)?;
            let gl_x = gan_losses(&lx[..xs.len()], &lx[xs.len()..]);
            let (grads_dx, _) = state.disc_spec.backward(
                &state.dx,
                &pass_dx,
                &logit_grad(&gl_x.disc_grad_real, &gl_x.disc_grad_fake)?,
            )?;
            debug_assert!(grads_dy.iter().all(|(k, _)| state.dy.params.contains_key(k)));
            numeric_check(
                gl_y.disc.is_finite() && gl_x.disc.is_finite() && grads_dx.all_finite() && grads_dy.all_finite(),
                1,
                epoch,
                bi,
                lr,
                "non-finite discriminator loss or gradient",
            )?;
            state.disc_spec.update_running_stats(&pass_dy, &mut state.dy.buffers)?;
            state.disc_spec.update_running_stats(&pass_dx, &mut state.dx.buffers)?;
            a_dy.step(&mut state.dy.params, &grads_dy, lr)?;
            a_dx.step(&mut state.dx.params, &grads_dx, lr)?;

            // adversarial gradients from the updated discriminators
            let k = ys.len();
            let (pass_dy, ly) = disc_logits(&state.disc_spec, &state.dy, &ys, &a.outputs, &mut rng)?;
            let gan_y = gan_losses(&ly[..k], &ly[k..]);
            let (_, gin) = state.disc_spec.backward(
                &state.dy,
                &pass_dy,
                &logit_grad(&vec![0.0; k], &gan_y.gen_grad_fake)?,
            )?;
            let g_adv_yp = tensor_to_interleaved(&gin)?.split_off(k);
            let (pass_dx, lx) = disc_logits(&state.disc_spec, &state.dx, &xs, &b.outputs, &mut rng)?;
            let gan_x = gan_losses(&lx[..k], &lx[k..]);
            let (_, gin) = state.disc_spec.backward(
                &state.dx,
                &pass_dx,
                &logit_grad(&vec![0.0; k], &gan_x.gen_grad_fake)?,
            )?;
            let g_adv_xp = tensor_to_interleaved(&gin)?.split_off(k);

            // generator backward through both cycles
            let (mut gx_total, mut gy_total) = {
                let (vx, vy) = (state.pair.view_x(), state.pair.view_y());
                let (gy_c, mut g_yp) = back_gen(&spec, &vy, &c, &a.outputs, &g_x2)?;
                let (gx_d, mut g_xp) = back_gen(&spec, &vx, &d, &b.outputs, &g_y2)?;
                for (acc, adv) in g_yp.iter_mut().zip(&g_adv_yp).chain(g_xp.iter_mut().zip(&g_adv_xp)) {
                    for (a, v) in acc.iter_mut().zip(adv) {
                        *a += v;
                    }
                }
                let (mut gx_a, _) = back_gen(&spec, &vx, &a, &xs, &g_yp)?;
                let (mut gy_b, _) = back_gen(&spec, &vy, &b, &ys, &g_xp)?;
                gx_a.merge(gx_d);
                gy_b.merge(gy_c);
                (gx_a, gy_b)
            };
            let total = total_phase1_loss(cx, cy, gan_y.gen, gan_x.gen, config.alpha);
            numeric_check(
                total.is_finite() && gx_total.all_finite() && gy_total.all_finite(),
                1,
                epoch,
                bi,
                lr,
                "non-finite generator loss or gradient",
            )?;
            spec.update_running_stats(&a.pass, &mut state.pair.gx.buffers)?;
            spec.update_running_stats(&b.pass, &mut state.pair.gy.buffers)?;
            let mut shared_grads = split_shared(&mut gx_total, &state.pair.shared);
            shared_grads.merge(split_shared(&mut gy_total, &state.pair.shared));
            if state.pair.is_shared() {
                a_shared.step(&mut state.pair.shared, &shared_grads, lr)?;
            }
            a_gx.step(&mut state.pair.gx.params, &gx_total, lr)?;
            a_gy.step(&mut state.pair.gy.params, &gy_total, lr)?;
            state.pair.check_invariants()?;
            if let Some(f) = hooks.on_step.as_mut() {
                f(&state);
            }

            for (s, v) in sums.iter_mut().zip([cx, cy, gan_y.gen, gan_x.gen, gl_x.disc, gl_y.disc]) {
                *s += v;
            }
            batches += 1;
        }
        let m = |i: usize| sums[i] / batches as f64;
        let record = GanEpochRecord {
            phase: 1,
            epoch,
            cycle_x: Some(m(0)),
            cycle_y: m(1),
            gan_gx: Some(m(2)),
            gan_gy: Some(m(3)),
            disc_x: Some(m(4)),
            disc_y: Some(m(5)),
            lr,
        };
        history.epochs.push(record);
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&record);
        }
        checkpoint(hooks, config, &state, 1, epoch)?;
    }
    Ok((state, history))
}

fn checkpoint(hooks: &GanHooks, config: &GanConfig, state: &GanState, phase: u8, epoch: usize) -> Result<()> {
    if let Some(dir) = hooks.checkpoint_dir {
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            state
                .pair
                .enhancer_x()?
                .save(dir.join(format!("checkpoint_p{phase}_epoch{:04}.qem", epoch + 1)))?;
        }
    }
    Ok(())
}

/// Phase 2: unshare, enable generator dropout, freeze `G_Y` and both
/// discriminators, and train `G_X` on `‖G_X(G_Y(y)) − y‖` in Lab.
pub fn train_phase2(
    state: &mut GanState,
    data: &UnpairedDataset,
    config: &GanConfig,
    hooks: &mut GanHooks,
) -> Result<GanHistory> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    state.pair.unshare();
    state.pair.spec = state.pair.spec.with_dropout(config.gen_dropout);
    let spec = state.pair.spec.clone();
    let mut adam = Adam::new(AdamConfig::default());
    let schedule = config.phase2_schedule();
    let mut history = GanHistory::default();
    let mut order: Vec<usize> = (0..data.y.len()).collect();
    for epoch in 0..config.phase2_epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.phase2_batch).enumerate() {
            let refs: Vec<&ImageBuffer> = chunk.iter().map(|&i| &data.y[i]).collect();
            let ys = augmented(&refs, config.augment, &mut rng)?;
            // G_Y runs in train mode (dropout on) but is never updated
            let b = run_gen(&spec, &state.pair.gy, &ys, Mode::Train, &mut rng)?;
            let d = run_gen(&spec, &state.pair.gx, &b.outputs, Mode::Train, &mut rng)?;
            let (loss, g_y2) = batch_lab_loss(&d.outputs, &ys)?;
            let (grads, _) = back_gen(&spec, &state.pair.gx, &d, &b.outputs, &g_y2)?;
            numeric_check(loss.is_finite() && grads.all_finite(), 2, epoch, bi, lr, "non-finite loss or gradient")?;
            adam.step(&mut state.pair.gx.params, &grads, lr)?;
            if let Some(f) = hooks.on_step.as_mut() {
                f(state);
            }
            sum += loss;
            batches += 1;
        }
        let record = GanEpochRecord {
            phase: 2,
            epoch,
            cycle_x: None,
            cycle_y: sum / batches as f64,
            gan_gx: None,
            gan_gy: None,
            disc_x: None,
            disc_y: None,
            lr,
        };
        history.epochs.push(record);
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&record);
        }
        checkpoint(hooks, config, state, 2, epoch)?;
    }
    Ok(history)
}

/// Runs phase 1 and, when enabled, phase 2.
pub fn train_unpaired(
    data: &UnpairedDataset,
    config: &GanConfig,
    hooks: &mut GanHooks,
) -> Result<(GanState, GanHistory, Option<GanHistory>)> {
    let (mut state, h1) = train_phase1(data, config, hooks)?;
    let h2 = if config.phase2_enabled {
        Some(train_phase2(&mut state, data, config, hooks)?)
    } else {
        None
    };
    Ok((state, h1, h2))
}

/// Configures `config` for an ablation arm and runs it.
pub fn ablation_run(
    variant: Ablation,
    data: &UnpairedDataset,
    config: &GanConfig,
    hooks: &mut GanHooks,
) -> Result<(GanState, GanHistory, Option<GanHistory>)> {
    let mut c = config.clone();
    variant.configure(&mut c);
    train_unpaired(data, &c, hooks)
}

/// Names of batchnorm tensors (parameters and running statistics).
pub fn batchnorm_names(spec: &NetworkSpec) -> Vec<String> {
    spec.layers()
        .filter(|(_, l)| l.kind() == LayerKind::BatchNorm)
        .flat_map(|(p, l)| {
            l.param_shapes()
                .into_iter()
                .chain(l.buffer_shapes())
                .map(move |(s, _)| format!("{p}.{s}"))
        })
        .collect()
}
