//! Supervised training on input/expert pairs: a coefficient network predicts
//! `θ` from a downsampled input, the transform is applied, and the mean Lab
//! distance to the target is minimized.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::color::{lab_delta_e, mean_lab_l2, srgb_to_lab_jacobian, srgb_to_lab_unclamped};
use crate::error::{Error, Result};
use crate::imageio::{load_image, resize_bilinear, Augmentation, ImageBuffer};
use crate::nn::{
    images_to_tensor, load_model, output_to_thetas, save_model, thetas_to_tensor, Adam, AdamConfig, LrSchedule,
    Mode, ModelParams, NetworkSpec, Tensor,
};
use crate::transform::{apply_transform, apply_transform_unclamped, transform_gradients, CoefficientMatrix};

/// Pixels closer than this (in ΔE) to the target contribute no gradient.
const DELTA_E_GUARD: f64 = 1e-8;

/// Mean per-pixel ΔE between an unclamped prediction and a target, with the
/// gradient with respect to every prediction value (interleaved RGB).
pub fn paired_loss(pred: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    pred.check_same_shape(target)?;
    let n = pred.pixel_count() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.data().len()];
    for ((p, t), g) in pred.pixels().zip(target.pixels()).zip(grad.chunks_exact_mut(3)) {
        let lp = srgb_to_lab_unclamped(p);
        let lt = srgb_to_lab_unclamped(t);
        let d = lab_delta_e(lp, lt);
        loss += d;
        if d < DELTA_E_GUARD {
            continue;
        }
        let u = [(lp.l - lt.l) / d, (lp.a - lt.a) / d, (lp.b - lt.b) / d];
        let jac = srgb_to_lab_jacobian(p);
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = (u[0] * jac[0][c] + u[1] * jac[1][c] + u[2] * jac[2][c]) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Reads a manifest of `input<TAB>target` lines. Relative paths are resolved
/// against the manifest's directory; blank lines and `#` comments are skipped.
pub fn read_pair_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (a, b) = line.split_once('\t').ok_or_else(|| {
            Error::Manifest(format!("{}:{}: expected `input<TAB>target`", path.display(), i + 1))
        })?;
        if b.contains('\t') {
            return Err(Error::Manifest(format!("{}:{}: more than two fields", path.display(), i + 1)));
        }
        out.push((base.join(a), base.join(b)));
    }
    Ok(out)
}

/// Id used for reports: the file stem.
pub fn image_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Training pairs, already resampled to the square training resolution.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub ids: Vec<String>,
    pub pairs: Vec<(ImageBuffer, ImageBuffer)>,
    pub resolution: usize,
}

impl PairedDataset {
    pub fn from_pairs(ids: Vec<String>, pairs: Vec<(ImageBuffer, ImageBuffer)>, resolution: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("paired dataset is empty".into()));
        }
        if ids.len() != pairs.len() {
            return Err(Error::InvalidArgument(format!("{} ids for {} pairs", ids.len(), pairs.len())));
        }
        if resolution == 0 {
            return Err(Error::InvalidArgument("training resolution must be positive".into()));
        }
        let pairs = pairs
            .into_par_iter()
            .zip(ids.par_iter())
            .map(|((x, y), id)| {
                x.check_same_shape(&y)
                    .map_err(|e| Error::Shape(format!("pair `{id}`: {e}")))?;
                Ok((
                    resize_bilinear(&x, resolution, resolution)?,
                    resize_bilinear(&y, resolution, resolution)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { ids, pairs, resolution })
    }

    pub fn from_manifest(path: impl AsRef<Path>, resolution: usize) -> Result<Self> {
        let entries = read_pair_manifest(path)?;
        let ids = entries.iter().map(|(a, _)| image_id(a)).collect();
        let pairs = entries
            .par_iter()
            .map(|(a, b)| Ok((load_image(a)?, load_image(b)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_pairs(ids, pairs, resolution)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_end: f64,
    pub lr_step_epochs: usize,
    pub lr_end_epoch: usize,
    pub branches: usize,
    pub dropout: f64,
    pub augment: bool,
    pub seed: u64,
    /// Epochs between checkpoints (0 disables them).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch: 50,
            lr0: 9e-4,
            lr_end: 2e-6,
            lr_step_epochs: 30,
            lr_end_epoch: 300,
            branches: 5,
            dropout: 0.5,
            augment: true,
            seed: 0,
            checkpoint_every: 25,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 11] = [
        "epochs",
        "batch",
        "lr0",
        "lr_end",
        "lr_step_epochs",
        "lr_end_epoch",
        "branches",
        "dropout",
        "augment",
        "seed",
        "checkpoint_every",
    ];

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::Staircase {
            lr0: self.lr0,
            lr_end: self.lr_end,
            step_epochs: self.lr_step_epochs,
            end_epoch: self.lr_end_epoch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch == 0 || self.lr_step_epochs == 0 {
            return bad("epochs, batch and lr_step_epochs must be positive");
        }
        if !(self.lr_end > 0.0 && self.lr0 >= self.lr_end) {
            return bad("learning rates need lr0 >= lr_end > 0");
        }
        if ![1, 3, 5].contains(&self.branches) {
            return bad("branches must be 1, 3 or 5");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Sets one field from its config-file spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "lr_end" => self.lr_end = parse(key, value)?,
            "lr_step_epochs" => self.lr_step_epochs = parse(key, value)?,
            "lr_end_epoch" => self.lr_end_epoch = parse(key, value)?,
            "branches" => self.branches = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,lr\n");
        for r in &self.epochs {
            writeln!(s, "{},{:.17e},{:.17e}", r.epoch, r.mean_loss, r.lr).expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// A trained coefficient network together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Enhancer {
    pub spec: NetworkSpec,
    pub params: ModelParams,
}

impl Enhancer {
    pub fn new(spec: NetworkSpec, params: ModelParams) -> Result<Self> {
        if spec.validate()? != [crate::nn::THETA_OUTPUTS] {
            return Err(Error::ModelFormat(format!(
                "network `{}` does not produce {} coefficients",
                spec.name,
                crate::nn::THETA_OUTPUTS
            )));
        }
        if spec.input_size().is_none() {
            return Err(Error::ModelFormat("enhancer input must be [3, S, S]".into()));
        }
        Ok(Self { spec, params })
    }

    /// Freshly initialized network (identity enhancer).
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let params = spec.init_params(&mut ChaCha8Rng::seed_from_u64(seed), true)?;
        Self::new(spec, params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (spec, params) = load_model(path)?;
        Self::new(spec, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_model(&self.spec, &self.params, path)
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_size().expect("checked in new")
    }

    /// Eval-mode coefficients for a batch of images at the network resolution.
    pub fn predict_batch(&self, images: &[&ImageBuffer]) -> Result<Vec<CoefficientMatrix>> {
        let s = self.input_size();
        let resized = images
            .iter()
            .map(|im| resize_bilinear(im, s, s))
            .collect::<Result<Vec<_>>>()?;
        let x = images_to_tensor(&resized.iter().collect::<Vec<_>>())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.spec.forward(&self.params, &x, Mode::Eval, &mut rng)?.output;
        let thetas = output_to_thetas(&out)?;
        for t in &thetas {
            t.validate()?;
        }
        Ok(thetas)
    }

    pub fn predict_theta(&self, image: &ImageBuffer) -> Result<CoefficientMatrix> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    /// Predicts `θ` from a downsampled copy and applies it (clamped) at the
    /// image's own resolution.
    pub fn enhance(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        apply_transform(image, &self.predict_theta(image)?)
    }
}

/// Mean over images of the per-image mean Lab distance after enhancement.
pub fn mean_dataset_lab_l2(model: &Enhancer, data: &PairedDataset) -> Result<f64> {
    let per: Vec<f64> = data
        .pairs
        .iter()
        .map(|(x, y)| mean_lab_l2(&model.enhance(x)?, y))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub struct PairedRun {
    pub model: Enhancer,
    pub history: TrainHistory,
    /// Best model by validation loss, with its epoch, when a validation set was given.
    pub best: Option<(usize, f64, Enhancer)>,
}

/// Extra outputs of [`train_paired_with`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub validation: Option<&'a PairedDataset>,
    pub checkpoint_dir: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

pub fn train_paired(dataset: &PairedDataset, config: &TrainConfig) -> Result<PairedRun> {
    train_paired_with(dataset, config, TrainHooks::default())
}

/// Loss and `θ`-gradient for one (already augmented) training sample.
fn sample_step(x: &ImageBuffer, y: &ImageBuffer, theta: &CoefficientMatrix) -> Result<(f64, CoefficientMatrix)> {
    let pred = apply_transform_unclamped(x, theta)?;
    let (loss, g) = paired_loss(&pred, y)?;
    Ok((loss, transform_gradients(x, &g)?))
}

pub fn train_paired_with(dataset: &PairedDataset, config: &TrainConfig, mut hooks: TrainHooks) -> Result<PairedRun> {
    config.validate()?;
    let spec = NetworkSpec::paired_generator(config.branches, dataset.resolution, config.dropout);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Enhancer::init(spec, config.seed)?;
    let mut adam = Adam::new(AdamConfig::default());
    let schedule = config.schedule();
    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, Enhancer)> = None;
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch).enumerate() {
            let samples: Vec<(ImageBuffer, ImageBuffer)> = chunk
                .iter()
                .map(|&i| {
                    let (x, y) = &dataset.pairs[i];
                    if config.augment {
                        let a = Augmentation::sample(&mut rng);
                        Ok((a.apply(x)?, a.apply(y)?))
                    } else {
                        Ok((x.clone(), y.clone()))
                    }
                })
                .collect::<Result<_>>()?;
            let inputs: Vec<&ImageBuffer> = samples.iter().map(|(x, _)| x).collect();
            let xt = images_to_tensor(&inputs)?;
            let pass = model.spec.forward(&model.params, &xt, Mode::Train, &mut rng)?;
            let thetas = output_to_thetas(&pass.output)?;
            let per: Vec<(f64, CoefficientMatrix)> = samples
                .par_iter()
                .zip(thetas.par_iter())
                .map(|((x, y), t)| sample_step(x, y, t))
                .collect::<Result<_>>()?;
            let b = per.len() as f64;
            let batch_loss = per.iter().map(|(l, _)| l).sum::<f64>() / b;
            if !batch_loss.is_finite() {
                return Err(Error::NumericFailure {
                    epoch,
                    batch: bi,
                    lr,
                    what: format!("batch loss is {batch_loss}"),
                });
            }
            let mut grad_out: Tensor = thetas_to_tensor(&per.iter().map(|(_, g)| *g).collect::<Vec<_>>())?;
            grad_out.scale(1.0 / b);
            let (grads, _) = model.spec.backward(&model.params, &pass, &grad_out)?;
            if !grads.all_finite() {
                return Err(Error::NumericFailure {
                    epoch,
                    batch: bi,
                    lr,
                    what: "non-finite gradient".into(),
                });
            }
            model.spec.update_running_stats(&pass, &mut model.params.buffers)?;
            adam.step(&mut model.params.params, &grads, lr)?;
            loss_sum += per.iter().map(|(l, _)| l).sum::<f64>();
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / dataset.len() as f64,
            lr,
        };
        history.epochs.push(record);
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&record);
        }
        if let Some(val) = hooks.validation {
            let v = mean_dataset_lab_l2(&model, val)?;
            if best.as_ref().map_or(true, |(_, b, _)| v < *b) {
                best = Some((epoch, v, model.clone()));
            }
        }
        if let Some(dir) = hooks.checkpoint_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                model.save(dir.join(format!("checkpoint_epoch{:04}.qem", epoch + 1)))?;
            }
        }
    }
    Ok(PairedRun { model, history, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::srgb_to_lab;

    fn ramp(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, |y, x| {
            [
                (x as f64 + 0.5) / w as f64,
                (y as f64 + 0.5) / h as f64,
                ((x + y) as f64 * 0.37).sin() * 0.4 + 0.5,
            ]
        })
    }

    #[test]
    fn loss_zero_with_zero_gradient_on_equal_images() {
        let x = ramp(4, 4);
        let (l, g) = paired_loss(&x, &x).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_images_give_their_distance() {
        let a = ImageBuffer::filled(3, 5, [0.2, 0.5, 0.7]);
        let b = ImageBuffer::filled(3, 5, [0.6, 0.4, 0.1]);
        let d = lab_delta_e(srgb_to_lab([0.2, 0.5, 0.7]), srgb_to_lab([0.6, 0.4, 0.1]));
        let (l, _) = paired_loss(&a, &b).unwrap();
        assert!((l - d).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            paired_loss(&ramp(2, 2), &ramp(2, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_model_is_identity() {
        let spec = NetworkSpec::paired_generator(1, 16, 0.5);
        let mut e = Enhancer::init(spec, 3).unwrap();
        e.params.zero_params();
        let x = ramp(9, 13);
        assert_eq!(e.enhance(&x).unwrap(), x);
    }

    #[test]
    fn full_resolution_matches_scalar_oracle() {
        use rand::Rng;
        let spec = NetworkSpec::paired_generator(1, 16, 0.5);
        let mut e = Enhancer::init(spec, 5).unwrap();
        // make the head nonzero so θ is not trivial
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for v in e.params.params.get_mut("head.0.bias").unwrap().data_mut() {
            *v = r.gen_range(-0.1..0.1);
        }
        let x = ImageBuffer::from_fn(1024, 1024, |y, x| {
            [(x % 97) as f64 / 96.0, (y % 89) as f64 / 88.0, ((x * y) % 71) as f64 / 70.0]
        });
        let theta = e.predict_theta(&x).unwrap();
        assert_ne!(theta, CoefficientMatrix::ZERO);
        let out = e.enhance(&x).unwrap();
        for _ in 0..100 {
            let (py, px) = (r.gen_range(0..1024), r.gen_range(0..1024));
            let p = x.pixel(py, px);
            let v = [p[0], p[1], p[2], p[0] * p[0], p[1] * p[1], p[2] * p[2], p[0] * p[1], p[1] * p[2], p[2] * p[0], 1.0];
            for c in 0..3 {
                let mut s = p[c];
                for (i, vi) in v.iter().enumerate() {
                    s += theta.get(i, c) * vi;
                }
                assert!((out.pixel(py, px)[c] - s.clamp(0.0, 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_targets_stay_at_the_fixed_point() {
        let pairs: Vec<_> = (0..4).map(|i| (ramp(8 + i, 8 + i), ramp(8 + i, 8 + i))).collect();
        let ids = (0..4).map(|i| i.to_string()).collect();
        let data = PairedDataset::from_pairs(ids, pairs, 16).unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch: 2,
            branches: 1,
            ..TrainConfig::default()
        };
        let run = train_paired(&data, &config).unwrap();
        assert_eq!(run.history.epochs[0].mean_loss, 0.0);
        let fresh = Enhancer::init(run.model.spec.clone(), config.seed).unwrap();
        assert_eq!(run.model.params.params, fresh.params.params);
    }

    #[test]
    fn config_keys_are_settable_and_unknown_rejected() {
        let mut c = TrainConfig::default();
        for k in TrainConfig::KEYS {
            let v = match k {
                "augment" => "false",
                "lr0" | "lr_end" | "dropout" => "0.25",
                _ => "3",
            };
            c.set(k, v).unwrap();
        }
        assert_eq!(c.branches, 3);
        assert!(!c.augment);
        let err = c.set("epoch", "3").unwrap_err();
        assert!(err.to_string().contains("`epoch`"));
        assert!(c.set("batch", "x").is_err());
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "# pairs\na.png\tb.png\n\n/abs/c.ppm\td.ppm\n").unwrap();
        let m = read_pair_manifest(&p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].0, dir.path().join("a.png"));
        assert_eq!(m[1].0, PathBuf::from("/abs/c.ppm"));
        std::fs::write(&p, "a.png b.png\n").unwrap();
        assert!(matches!(read_pair_manifest(&p), Err(Error::Manifest(_))));
    }
}
