//! Small convolutional classifier with a global-average-pooling head.
//!
//! Blocks are `conv3x3 -> bias -> ReLU`, with 2× average pooling between
//! consecutive blocks. The last block's activations are the feature map
//! `f(x)` that class activation maps are read from; the head is
//! `logits = W · gap(f(x)) + b`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::atns;
use crate::error::{Error, Result};
use crate::graph::{Graph, LossMode, Var};
use crate::losses;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Average-pooling factor applied between consecutive blocks.
    pub pool: usize,
    pub classes: usize,
    /// Inputs are standardized as `(x - input_mean) / input_std` before the
    /// first convolution.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Architecture {
    pub fn new(in_channels: usize, classes: usize) -> Self {
        Architecture {
            in_channels,
            channels: vec![8, 16, 32],
            kernel: 3,
            pool: 2,
            classes,
            input_mean: 0.5,
            input_std: 0.28,
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("at least one conv block")
    }

    /// Spatial size of `f(x)` for an `h`×`w` input.
    pub fn feature_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let down = self.pool.pow(self.channels.len().saturating_sub(1) as u32);
        (h / down, w / down)
    }

    pub fn parameter_count(&self) -> usize {
        let mut c_in = self.in_channels;
        let mut n = 0;
        for &c in &self.channels {
            n += c * c_in * self.kernel * self.kernel + c;
            c_in = c;
        }
        n + self.classes * c_in + self.classes
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.kernel % 2 == 0 || self.pool == 0 || self.classes == 0 {
            return Err(Error::invalid("Architecture", format!("unsupported architecture {self:?}")));
        }
        if !(self.input_std > 0.0) {
            return Err(Error::invalid("Architecture", "input_std must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub arch: Architecture,
    pub mode: LossMode,
    pub class_names: Vec<String>,
    /// `(kernel [O, I, k, k], bias [O])` per block.
    pub convs: Vec<(Tensor, Tensor)>,
    /// `[classes, feature_channels]`
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Graph handles produced by [`ClassifierModel::build`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[B, classes]`
    pub logits: Var,
    /// `[B, C, h, w]`, the pre-GAP feature map.
    pub features: Var,
    pub head_weight: Var,
    /// All parameters in [`ClassifierModel::parameters`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[1, C, H, W]`
    pub image: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch, preceded by the loss of the
    /// untrained model over the whole set.
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
}

impl ClassifierModel {
    /// He-initialized convolutions, zero biases, seeded.
    pub fn init(arch: Architecture, mode: LossMode, class_names: Vec<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if class_names.len() != arch.classes {
            return Err(Error::invalid(
                "ClassifierModel::init",
                format!("{} class names for {} classes", class_names.len(), arch.classes),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut c_in = arch.in_channels;
        for &c in &arch.channels {
            let fan_in = (c_in * arch.kernel * arch.kernel) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let k = Tensor::from_fn(&[c, c_in, arch.kernel, arch.kernel], |_| dist.sample(&mut rng));
            convs.push((k, Tensor::zeros(&[c])));
            c_in = c;
        }
        let dist = Normal::new(0.0, (1.0 / c_in as f64).sqrt()).expect("valid std");
        let head_weight = Tensor::from_fn(&[arch.classes, c_in], |_| dist.sample(&mut rng));
        let head_bias = Tensor::zeros(&[arch.classes]);
        Ok(ClassifierModel {
            arch,
            mode,
            class_names,
            convs,
            head_weight,
            head_bias,
        })
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for (k, b) in &self.convs {
            out.push(k);
            out.push(b);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (k, b) in &mut self.convs {
            out.push(k);
            out.push(b);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Records the forward pass of `image [B, C, H, W]` on `g`. Parameters
    /// are tracked leaves only when `track_params` is set.
    pub fn build(&self, g: &mut Graph, image: Var, track_params: bool) -> Result<ForwardVars> {
        let shape = g.value(image).shape().to_vec();
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != self.arch.in_channels {
            return Err(Error::shape("classifier", &shape, &[self.arch.in_channels]));
        }
        let down = self.arch.pool.pow(self.convs.len().saturating_sub(1) as u32);
        if h % down != 0 || w % down != 0 || h < down || w < down {
            return Err(Error::invalid(
                "classifier",
                format!("input {h}x{w} must be a positive multiple of {down}"),
            ));
        }
        let leaf = |g: &mut Graph, t: &Tensor| {
            if track_params {
                g.variable(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut params = Vec::new();
        let inv = 1.0 / self.arch.input_std;
        let mut x = g.affine(image, inv, -self.arch.input_mean * inv);
        let pad = self.arch.kernel / 2;
        for (i, (k, b)) in self.convs.iter().enumerate() {
            if i > 0 {
                x = g.avg_pool(x, self.arch.pool)?;
            }
            let kv = leaf(g, k);
            let bv = leaf(g, b);
            params.push(kv);
            params.push(bv);
            x = g.conv2d(x, kv, 1, pad)?;
            x = g.channel_bias(x, bv)?;
            x = g.relu(x);
        }
        let features = x;
        let pooled = g.gap(features)?;
        let head_weight = leaf(g, &self.head_weight);
        let hb = leaf(g, &self.head_bias);
        params.push(head_weight);
        params.push(hb);
        let logits = g.linear(pooled, head_weight, hb)?;
        Ok(ForwardVars {
            logits,
            features,
            head_weight,
            params,
        })
    }

    /// Logits `[classes]` and features `[C, h, w]` of a single image.
    pub fn forward(&self, image: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let out = self.build(&mut g, x, false)?;
        let logits = g.value(out.logits);
        if logits.shape()[0] != 1 {
            return Err(Error::invalid("forward", "expected a batch of one image"));
        }
        let f = g.value(out.features);
        let (_, c, h, w) = f.dims4()?;
        Ok((logits.data().to_vec(), f.clone().reshape(&[c, h, w])?))
    }

    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(image)?.0)
    }

    /// Mean cross-entropy of one image against `labels`, as a graph node.
    pub fn classification_loss(&self, g: &mut Graph, image: Var, labels: &[usize]) -> Result<Var> {
        let out = self.build(g, image, false)?;
        losses::loss(g, out.logits, &[labels], self.mode)
    }

    pub fn predict(&self, image: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(image)?;
        Ok(match self.mode {
            LossMode::MultiLabel => (0..z.len()).filter(|&c| z[c] > 0.0).collect(),
            LossMode::SingleLabel => vec![argmax(&z)],
        })
    }

    /// Exact-match accuracy: the predicted label set equals the true one.
    pub fn accuracy(&self, data: &[LabeledImage]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for item in data {
            let mut want = item.labels.clone();
            want.sort_unstable();
            if self.predict(&item.image)? == want {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    fn dataset_loss(&self, data: &[LabeledImage]) -> Result<f64> {
        let mut total = 0.0;
        for item in data {
            let z = self.logits(&item.image)?;
            total += losses::loss_value(&z, &item.labels, self.mode)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Minibatch SGD with a fixed learning rate.
    pub fn train(&mut self, data: &[LabeledImage], config: &TrainConfig) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::invalid("train", "dataset is empty"));
        }
        if config.epochs == 0 || config.batch_size == 0 || !(config.learning_rate >= 0.0) {
            return Err(Error::invalid("train", format!("invalid training config {config:?}")));
        }
        for item in data {
            losses::target_matrix(&[&item.labels], self.classes(), self.mode)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut curve = vec![self.dataset_loss(data)?];
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(config.batch_size) {
                let images: Vec<&Tensor> = chunk.iter().map(|&i| &data[i].image).collect();
                let labels: Vec<&[usize]> = chunk.iter().map(|&i| &data[i].labels[..]).collect();
                let batch = Tensor::stack_batch(&images)?;
                let mut g = Graph::new();
                let x = g.constant(batch);
                let out = self.build(&mut g, x, true)?;
                let loss = losses::loss(&mut g, out.logits, &labels, self.mode)?;
                let lv = g.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(Error::Divergence { epoch, loss: lv });
                }
                let grads = g.backward(loss)?;
                let lr = config.learning_rate;
                for (p, v) in self.parameters_mut().into_iter().zip(&out.params) {
                    if let Some(gp) = grads.get(*v) {
                        p.axpy(-lr, gp)?;
                    }
                }
                epoch_loss += lv;
                batches += 1;
            }
            let mean = epoch_loss / batches as f64;
            if !mean.is_finite() || self.parameters().iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch, loss: mean });
            }
            curve.push(mean);
        }
        Ok(TrainReport {
            loss_curve: curve,
            train_accuracy: self.accuracy(data)?,
        })
    }

    /// Writes `manifest.json` plus one ATNS blob per parameter tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names = self.tensor_names();
        let manifest = CheckpointManifest {
            format_version: 1,
            architecture: self.arch.clone(),
            mode: self.mode.into(),
            class_names: self.class_names.clone(),
            tensors: names.clone(),
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        for (name, t) in names.iter().zip(self.parameters()) {
            atns::save(t, &dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        let mut model = ClassifierModel::init(
            manifest.architecture,
            manifest.mode.into(),
            manifest.class_names,
            0,
        )?;
        let names = model.tensor_names();
        if names != manifest.tensors {
            return Err(Error::invalid("checkpoint", "tensor list does not match architecture"));
        }
        for (name, p) in names.iter().zip(model.parameters_mut()) {
            let path = dir.join(name);
            let t = atns::load(&path)?;
            if t.shape() != p.shape() {
                return Err(Error::shape("checkpoint", p.shape(), t.shape()));
            }
            *p = t;
        }
        Ok(model)
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}_kernel.atns"));
            names.push(format!("conv{i}_bias.atns"));
        }
        names.push("head_weight.atns".into());
        names.push("head_bias.atns".into());
        names
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    MultiLabel,
    SingleLabel,
}

impl From<LossMode> for ModeName {
    fn from(m: LossMode) -> Self {
        match m {
            LossMode::MultiLabel => ModeName::MultiLabel,
            LossMode::SingleLabel => ModeName::SingleLabel,
        }
    }
}

impl From<ModeName> for LossMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::MultiLabel => LossMode::MultiLabel,
            ModeName::SingleLabel => LossMode::SingleLabel,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    architecture: Architecture,
    mode: ModeName,
    class_names: Vec<String>,
    tensors: Vec<String>,
}
