use std::collections::BTreeMap;

use rand::Rng;

use super::layers::{self, LayerCache, LayerKind, LayerSpec, BN_MOMENTUM};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Number of coefficient-network outputs (a 10×3 matrix).
pub const THETA_OUTPUTS: usize = 30;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batchnorm, dropout active.
    Train,
    /// Running statistics, dropout disabled.
    Eval,
}

/// Read access to parameters by registry path (`b0.3.weight`, `head.0.bias`, ...).
pub trait ParamSource {
    fn param(&self, name: &str) -> Option<&Tensor>;
    fn buffer(&self, name: &str) -> Option<&Tensor>;
}

/// Trainable tensors plus non-trainable batchnorm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParamSource for ModelParams {
    fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Order-sensitive hash of every name and value bit (params and buffers).
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for map in [&self.params, &self.buffers] {
            for (k, t) in map {
                k.hash(&mut h);
                t.shape().hash(&mut h);
                for v in t.data() {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Sets every trainable value to zero (buffers untouched).
    pub fn zero_params(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().fill(0.0);
        }
    }
}

/// Gradient registry keyed like [`ModelParams::params`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn accumulate(&mut self, name: String, grad: Tensor) {
        match self.0.get_mut(&name) {
            Some(t) => t.add_assign(&grad),
            None => {
                self.0.insert(name, grad);
            }
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        for (k, v) in other.0 {
            self.accumulate(k, v);
        }
    }

    /// Keeps only the entries whose name satisfies `keep`.
    pub fn split_off(&mut self, keep: impl Fn(&str) -> bool) -> Gradients {
        let (a, b): (BTreeMap<_, _>, BTreeMap<_, _>) =
            std::mem::take(&mut self.0).into_iter().partition(|(k, _)| keep(k));
        self.0 = b;
        Gradients(a)
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::all_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Declarative network: `branches` parallel copies of one layer list (same
/// structure, separate parameters) whose flattened outputs are concatenated
/// and fed through the head layers.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input shape, e.g. `[3, 256, 256]`.
    pub input_shape: Vec<usize>,
    pub branches: usize,
    pub branch_layers: Vec<LayerSpec>,
    pub head_layers: Vec<LayerSpec>,
}

/// Everything `backward` needs from a train- or eval-mode forward pass.
pub struct ForwardPass {
    pub output: Tensor,
    branch_caches: Vec<Vec<LayerCache>>,
    head_caches: Vec<LayerCache>,
    branch_width: usize,
    input_shape: Vec<usize>,
}

impl NetworkSpec {
    /// Coefficient network for paired training: each branch is three
    /// stride-2 conv/BN/LReLU stages (16, 32, 64 channels), global average
    /// pooling, `linear 64→64`, dropout, `linear 64→32`; the head maps the
    /// concatenated branch features to 30 outputs.
    pub fn paired_generator(branches: usize, input_size: usize, dropout: f64) -> Self {
        let mut branch = Vec::new();
        let mut c = 3;
        for out in [16, 32, 64] {
            branch.push(LayerSpec::conv3x3(c, out, 2));
            branch.push(LayerSpec::BatchNorm { channels: out });
            branch.push(LayerSpec::LeakyRelu { slope: LEAKY_SLOPE });
            c = out;
        }
        branch.extend([
            LayerSpec::AvgPoolGlobal,
            LayerSpec::linear(64, 64),
            LayerSpec::Dropout { p: dropout },
            LayerSpec::linear(64, 32),
        ]);
        Self {
            name: format!("paired-{branches}"),
            input_shape: vec![3, input_size, input_size],
            branches,
            branch_layers: branch,
            head_layers: vec![LayerSpec::linear(32 * branches, THETA_OUTPUTS)],
        }
    }

    /// Single-branch, five-stage (16→256 channel) coefficient network used
    /// for unpaired training. The dropout layer sits after the first linear.
    pub fn unpaired_generator(input_size: usize, dropout: f64) -> Self {
        let mut branch = Vec::new();
        let mut c = 3;
        for out in [16, 32, 64, 128, 256] {
            branch.push(LayerSpec::conv3x3(c, out, 2));
            branch.push(LayerSpec::BatchNorm { channels: out });
            branch.push(LayerSpec::LeakyRelu { slope: LEAKY_SLOPE });
            c = out;
        }
        branch.extend([
            LayerSpec::AvgPoolGlobal,
            LayerSpec::linear(256, 64),
            LayerSpec::Dropout { p: dropout },
        ]);
        Self {
            name: "unpaired".into(),
            input_shape: vec![3, input_size, input_size],
            branches: 1,
            branch_layers: branch,
            head_layers: vec![LayerSpec::linear(64, THETA_OUTPUTS)],
        }
    }

    /// Four stride-2 conv/BN/LReLU/dropout stages (32→256 channels), global
    /// average pooling and a single-logit linear layer.
    pub fn discriminator(input_size: usize, dropout: f64) -> Self {
        let mut branch = Vec::new();
        let mut c = 3;
        for out in [32, 64, 128, 256] {
            branch.push(LayerSpec::conv3x3(c, out, 2));
            branch.push(LayerSpec::BatchNorm { channels: out });
            branch.push(LayerSpec::LeakyRelu { slope: LEAKY_SLOPE });
            branch.push(LayerSpec::Dropout { p: dropout });
            c = out;
        }
        branch.push(LayerSpec::AvgPoolGlobal);
        Self {
            name: "discriminator".into(),
            input_shape: vec![3, input_size, input_size],
            branches: 1,
            branch_layers: branch,
            head_layers: vec![LayerSpec::linear(256, 1)],
        }
    }

    /// Copy with every dropout layer set to rate `p`.
    pub fn with_dropout(&self, p: f64) -> Self {
        let mut s = self.clone();
        for l in s.branch_layers.iter_mut().chain(s.head_layers.iter_mut()) {
            if let LayerSpec::Dropout { p: rate } = l {
                *rate = p;
            }
        }
        s
    }

    /// Spatial input size for image networks (`input_shape = [3, S, S]`).
    pub fn input_size(&self) -> Option<usize> {
        match self.input_shape[..] {
            [3, h, w] if h == w => Some(h),
            _ => None,
        }
    }

    /// `(registry prefix, layer)` in forward order.
    pub fn layers(&self) -> impl Iterator<Item = (String, &LayerSpec)> {
        (0..self.branches)
            .flat_map(move |b| {
                self.branch_layers
                    .iter()
                    .enumerate()
                    .map(move |(i, l)| (format!("b{b}.{i}"), l))
            })
            .chain(
                self.head_layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (format!("head.{i}"), l)),
            )
    }

    /// Checks the layer chain and returns the per-sample output shape.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.branches == 0 {
            return Err(Error::InvalidArgument("network needs at least one branch".into()));
        }
        if self.branch_layers.is_empty() {
            return Err(Error::InvalidArgument("branch layer list is empty".into()));
        }
        let mut shape = self.input_shape.clone();
        for (i, l) in self.branch_layers.iter().enumerate() {
            l.validate()?;
            shape = l
                .output_shape(&shape)
                .map_err(|e| Error::Shape(format!("layer `b0.{i}`: {e}")))?;
        }
        if self.branches > 1 || !self.head_layers.is_empty() {
            if shape.len() != 1 {
                return Err(Error::Shape(format!(
                    "branch output {shape:?} must be flat to feed the head"
                )));
            }
            shape = vec![shape[0] * self.branches];
        }
        for (i, l) in self.head_layers.iter().enumerate() {
            l.validate()?;
            shape = l
                .output_shape(&shape)
                .map_err(|e| Error::Shape(format!("layer `head.{i}`: {e}")))?;
        }
        Ok(shape)
    }

    /// Prefix of the last linear layer (zero-initialized in generators).
    fn final_linear(&self) -> Option<String> {
        self.layers()
            .filter(|(_, l)| l.kind() == LayerKind::Linear)
            .map(|(p, _)| p)
            .last()
    }

    /// He-uniform weights, zero biases, unit batchnorm scale. With
    /// `zero_final`, the last linear layer starts at zero so a coefficient
    /// network begins as the identity enhancer.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, zero_final: bool) -> Result<ModelParams> {
        self.validate()?;
        let final_linear = if zero_final { self.final_linear() } else { None };
        let mut out = ModelParams::default();
        for (prefix, layer) in self.layers() {
            for (suffix, shape) in layer.param_shapes() {
                let len: usize = shape.iter().product();
                let data: Vec<f64> = match suffix {
                    "weight" if final_linear.as_deref() != Some(prefix.as_str()) => {
                        let fan_in: usize = shape[1..].iter().product();
                        let bound = (6.0 / fan_in as f64).sqrt();
                        (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                    "gamma" => vec![1.0; len],
                    _ => vec![0.0; len],
                };
                out.params.insert(format!("{prefix}.{suffix}"), Tensor::new(shape, data)?);
            }
            for (suffix, shape) in layer.buffer_shapes() {
                let fill = if suffix == "running_var" { 1.0 } else { 0.0 };
                out.buffers.insert(format!("{prefix}.{suffix}"), Tensor::full(&shape, fill));
            }
        }
        Ok(out)
    }

    /// Names of parameters that belong to convolution layers.
    pub fn conv_param_names(&self) -> Vec<String> {
        self.layers()
            .filter(|(_, l)| l.kind() == LayerKind::Conv2d)
            .flat_map(|(p, l)| {
                l.param_shapes()
                    .into_iter()
                    .map(move |(s, _)| format!("{p}.{s}"))
            })
            .collect()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        params: &dyn ParamSource,
        x: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "network `{}` expects [N, {:?}] input, got {:?}",
                self.name,
                self.input_shape,
                x.shape()
            )));
        }
        let n = x.batch();
        let mut branch_caches = Vec::with_capacity(self.branches);
        let mut branch_outputs = Vec::with_capacity(self.branches);
        for b in 0..self.branches {
            let mut caches = Vec::with_capacity(self.branch_layers.len());
            let mut h = x.clone();
            for (i, layer) in self.branch_layers.iter().enumerate() {
                let (out, cache) = layers::forward(layer, params, &format!("b{b}.{i}"), &h, mode, rng)?;
                caches.push(cache);
                h = out;
            }
            branch_caches.push(caches);
            branch_outputs.push(h);
        }
        let branch_width = branch_outputs[0].sample_len();
        let mut h = if self.branches == 1 {
            branch_outputs.pop().expect("one branch")
        } else {
            let mut data = Vec::with_capacity(n * branch_width * self.branches);
            for s in 0..n {
                for o in &branch_outputs {
                    data.extend_from_slice(o.sample(s));
                }
            }
            Tensor::new(vec![n, branch_width * self.branches], data)?
        };
        let mut head_caches = Vec::with_capacity(self.head_layers.len());
        for (i, layer) in self.head_layers.iter().enumerate() {
            let (out, cache) = layers::forward(layer, params, &format!("head.{i}"), &h, mode, rng)?;
            head_caches.push(cache);
            h = out;
        }
        Ok(ForwardPass {
            output: h,
            branch_caches,
            head_caches,
            branch_width,
            input_shape: x.shape().to_vec(),
        })
    }

    /// Parameter gradients and the gradient with respect to the input.
    pub fn backward(
        &self,
        params: &dyn ParamSource,
        pass: &ForwardPass,
        grad_out: &Tensor,
    ) -> Result<(Gradients, Tensor)> {
        if grad_out.shape() != pass.output.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                grad_out.shape(),
                pass.output.shape()
            )));
        }
        let mut grads = Gradients::new();
        let mut local = Vec::new();
        let mut g = grad_out.clone();
        for (i, layer) in self.head_layers.iter().enumerate().rev() {
            let prefix = format!("head.{i}");
            g = layers::backward(layer, params, &prefix, &pass.head_caches[i], &g, &mut local)?;
            for (s, t) in local.drain(..) {
                grads.accumulate(format!("{prefix}.{s}"), t);
            }
        }
        let n = pass.input_shape[0];
        let mut grad_in = Tensor::zeros(&pass.input_shape);
        for b in 0..self.branches {
            let mut gb = if self.branches == 1 {
                g.clone()
            } else {
                let w = pass.branch_width;
                let data = (0..n)
                    .flat_map(|s| g.sample(s)[b * w..(b + 1) * w].iter().copied())
                    .collect();
                Tensor::new(vec![n, w], data)?
            };
            for (i, layer) in self.branch_layers.iter().enumerate().rev() {
                let prefix = format!("b{b}.{i}");
                gb = layers::backward(layer, params, &prefix, &pass.branch_caches[b][i], &gb, &mut local)?;
                for (s, t) in local.drain(..) {
                    grads.accumulate(format!("{prefix}.{s}"), t);
                }
            }
            grad_in.add_assign(&gb);
        }
        Ok((grads, grad_in))
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn update_running_stats(&self, pass: &ForwardPass, buffers: &mut BTreeMap<String, Tensor>) -> Result<()> {
        let caches = pass
            .branch_caches
            .iter()
            .enumerate()
            .flat_map(|(b, c)| c.iter().enumerate().map(move |(i, c)| (format!("b{b}.{i}"), c)))
            .chain(pass.head_caches.iter().enumerate().map(|(i, c)| (format!("head.{i}"), c)));
        for (prefix, cache) in caches {
            if let LayerCache::BatchNorm(bn) = cache {
                if let Some((mean, var)) = &bn.batch_stats {
                    for (suffix, stat) in [("running_mean", mean), ("running_var", var)] {
                        let key = format!("{prefix}.{suffix}");
                        let buf = buffers
                            .get_mut(&key)
                            .ok_or_else(|| Error::Shape(format!("missing buffer `{key}`")))?;
                        for (r, s) in buf.data_mut().iter_mut().zip(stat) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.input_shape.iter().map(usize::to_string).collect();
        let mut s = format!(
            "name {}\ninput {}\nbranches {}\n",
            self.name,
            dims.join(" "),
            self.branches
        );
        for l in &self.branch_layers {
            s.push_str(&format!("branch {l}\n"));
        }
        for l in &self.head_layers {
            s.push_str(&format!("head {l}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::ModelFormat(format!("bad network line `{line}`"));
        let mut name = None;
        let mut input_shape = None;
        let mut branches = None;
        let mut branch_layers = Vec::new();
        let mut head_layers = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
            match key {
                "name" => name = Some(rest.to_string()),
                "input" => {
                    input_shape = Some(
                        rest.split_whitespace()
                            .map(|d| d.parse::<usize>().map_err(|_| bad(line)))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "branches" => branches = Some(rest.parse::<usize>().map_err(|_| bad(line))?),
                "branch" => branch_layers.push(rest.parse()?),
                "head" => head_layers.push(rest.parse()?),
                _ => return Err(bad(line)),
            }
        }
        let spec = Self {
            name: name.ok_or_else(|| bad("<missing name>"))?,
            input_shape: input_shape.ok_or_else(|| bad("<missing input>"))?,
            branches: branches.ok_or_else(|| bad("<missing branches>"))?,
            branch_layers,
            head_layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}
