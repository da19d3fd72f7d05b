//! Trainable feature extractor plus a bias-free classifier head whose rows
//! act as class prototypes.

mod layers;
mod mlp;
mod optim;
mod resnet;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InputShape;
use crate::error::{MbjError, Result};
use crate::loss::normalize_rows;
use crate::scalar::Scalar;

pub use layers::{BatchNorm2d, Conv2d, Linear, Param};
pub use mlp::{Mlp, MlpCache};
pub use optim::Sgd;
pub use resnet::{ResNet, ResNetCache, ResNetShape};

/// Backbone architecture; doubles as the backbone id in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneConfig {
    Mlp {
        input_dim: usize,
        hidden_dim: usize,
        embedding_dim: usize,
    },
    ResNet {
        channels: usize,
        height: usize,
        width: usize,
        blocks_per_stage: usize,
        base_width: usize,
    },
}

impl BackboneConfig {
    pub fn input_len(&self) -> usize {
        match *self {
            BackboneConfig::Mlp { input_dim, .. } => input_dim,
            BackboneConfig::ResNet {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match *self {
            BackboneConfig::Mlp { embedding_dim, .. } => embedding_dim,
            BackboneConfig::ResNet { base_width, .. } => 4 * base_width,
        }
    }

    /// ResNet-32 for `channels x height x width` images.
    pub fn resnet32(shape: InputShape) -> Result<Self> {
        match shape {
            InputShape::Image {
                channels,
                height,
                width,
            } => Ok(BackboneConfig::ResNet {
                channels,
                height,
                width,
                blocks_per_stage: 5,
                base_width: 16,
            }),
            InputShape::Flat { .. } => Err(MbjError::Config(
                "a residual backbone needs image-shaped inputs".into(),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backbone<T> {
    Mlp(Mlp<T>),
    ResNet(ResNet<T>),
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum BackboneCache<T> {
    Mlp(MlpCache<T>),
    ResNet(ResNetCache<T>),
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        match *config {
            BackboneConfig::Mlp {
                input_dim,
                hidden_dim,
                embedding_dim,
            } => Backbone::Mlp(Mlp::new(rng, input_dim, hidden_dim, embedding_dim)),
            BackboneConfig::ResNet {
                channels,
                height,
                width,
                blocks_per_stage,
                base_width,
            } => Backbone::ResNet(ResNet::new(
                rng,
                ResNetShape {
                    channels,
                    height,
                    width,
                    blocks_per_stage,
                    base_width,
                },
            )),
        }
    }

    fn infer(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        match self {
            Backbone::Mlp(m) => m.infer(x),
            Backbone::ResNet(r) => r.infer(x),
        }
    }

    fn forward_train(&mut self, x: ArrayView2<'_, T>) -> (Array2<T>, BackboneCache<T>) {
        match self {
            Backbone::Mlp(m) => {
                let (y, c) = m.forward_train(x);
                (y, BackboneCache::Mlp(c))
            }
            Backbone::ResNet(r) => {
                let (y, c) = r.forward_train(x);
                (y, BackboneCache::ResNet(c))
            }
        }
    }

    fn backward(&mut self, cache: &BackboneCache<T>, grad: ArrayView2<'_, T>) -> Array2<T> {
        match (self, cache) {
            (Backbone::Mlp(m), BackboneCache::Mlp(c)) => m.backward(c, grad),
            (Backbone::ResNet(r), BackboneCache::ResNet(c)) => r.backward(c, grad),
            _ => panic!("backbone cache does not match the backbone"),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Backbone::Mlp(m) => m.params_mut(),
            Backbone::ResNet(r) => r.params_mut(),
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Backbone::Mlp(m) => m.params(),
            Backbone::ResNet(r) => r.params(),
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        match self {
            Backbone::Mlp(_) => Vec::new(),
            Backbone::ResNet(r) => r.buffers_mut(),
        }
    }

    fn buffers(&self) -> Vec<&ArrayD<T>> {
        match self {
            Backbone::Mlp(_) => Vec::new(),
            Backbone::ResNet(r) => r.buffers(),
        }
    }
}

/// Bias-free linear classifier; row `k` is the prototype of class `k`.
#[derive(Debug, Clone)]
pub struct ClassifierHead<T> {
    pub weights: Param<T>,
    /// Cosine mode: embeddings and rows are normalized before the product.
    pub normalize: bool,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(rng: &mut ChaCha8Rng, classes: usize, dim: usize, normalize: bool) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        ClassifierHead {
            weights: Param::new(layers::gaussian(rng, &[classes, dim], std), true),
            normalize,
        }
    }

    pub fn matrix(&self) -> ArrayView2<'_, T> {
        self.weights.matrix()
    }

    pub fn logits(&self, embeddings: ArrayView2<'_, T>) -> Array2<T> {
        if self.normalize {
            let (e, _) = normalize_rows(embeddings);
            let (w, _) = normalize_rows(self.matrix());
            e.dot(&w.t())
        } else {
            embeddings.dot(&self.matrix().t())
        }
    }

    pub fn add_grad(&mut self, grad: &Array2<T>) {
        let mut g = self
            .weights
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d head");
        g += grad;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub class_count: usize,
    pub normalize_head: bool,
}

#[derive(Debug, Clone)]
pub struct EmbeddingModel<T> {
    config: ModelConfig,
    pub backbone: Backbone<T>,
    pub head: ClassifierHead<T>,
}

/// Rows per evaluation chunk.
const EVAL_CHUNK: usize = 256;

impl<T: Scalar> EmbeddingModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.class_count < 2 {
            return Err(MbjError::Config("a model needs at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&config.backbone, &mut rng);
        let head = ClassifierHead::new(
            &mut rng,
            config.class_count,
            config.backbone.embedding_dim(),
            config.normalize_head,
        );
        Ok(EmbeddingModel {
            config,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.backbone.embedding_dim()
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    pub fn input_len(&self) -> usize {
        self.config.backbone.input_len()
    }

    fn check_input(&self, inputs: &ArrayView2<'_, T>) -> Result<()> {
        if inputs.ncols() != self.input_len() {
            return Err(MbjError::Shape {
                expected: format!("{} input columns", self.input_len()),
                got: format!("{}", inputs.ncols()),
            });
        }
        if inputs.nrows() == 0 {
            return Err(MbjError::Shape {
                expected: "a non-empty batch".into(),
                got: "0 rows".into(),
            });
        }
        Ok(())
    }

    /// Evaluation-mode embeddings.
    pub fn embed(&self, inputs: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.check_input(&inputs)?;
        let mut out = Array2::zeros((inputs.nrows(), self.embedding_dim()));
        let mut start = 0;
        while start < inputs.nrows() {
            let end = (start + EVAL_CHUNK).min(inputs.nrows());
            let e = self.backbone.infer(inputs.slice(s![start..end, ..]));
            out.slice_mut(s![start..end, ..]).assign(&e);
            start = end;
        }
        Ok(out)
    }

    /// Evaluation-mode `(embeddings, logits)`.
    pub fn forward(&self, inputs: ArrayView2<'_, T>) -> Result<(Array2<T>, Array2<T>)> {
        let e = self.embed(inputs)?;
        let logits = self.head.logits(e.view());
        Ok((e, logits))
    }

    /// Training-mode embeddings plus the cache needed by [`Self::backward`].
    pub fn forward_train(&mut self, inputs: ArrayView2<'_, T>) -> Result<(Array2<T>, BackboneCache<T>)> {
        self.check_input(&inputs)?;
        Ok(self.backbone.forward_train(inputs))
    }

    /// Accumulates parameter gradients for `d loss / d embeddings`.
    pub fn backward(&mut self, cache: &BackboneCache<T>, grad_embeddings: ArrayView2<'_, T>) {
        self.backbone.backward(cache, grad_embeddings);
    }

    /// Detached copies of the head rows; row `k` belongs to class `k`.
    pub fn read_prototypes(&self) -> Array2<T> {
        self.head.matrix().to_owned()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.backbone.params_mut();
        p.push(&mut self.head.weights);
        p
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.backbone.params();
        p.push(&self.head.weights);
        p
    }

    pub fn backbone_params(&self) -> Vec<&Param<T>> {
        self.backbone.params()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn predict(&self, inputs: ArrayView2<'_, T>) -> Result<Vec<usize>> {
        let (_, logits) = self.forward(inputs)?;
        Ok(argmax_rows(logits.view()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            model: self.config,
            embedding_dim: self.embedding_dim(),
            class_count: self.class_count(),
            scalar: T::NAME.to_string(),
            tensors: self.tensors().map(|t| t.shape().to_vec()).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut bytes = Vec::with_capacity(16 + header.len());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        for t in self.tensors() {
            for v in t.iter() {
                bytes.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| MbjError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| MbjError::io(path, e))?;
        let bad = |reason: &str| MbjError::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let mut model = Self::new(header.model, 0)?;
        let shapes: Vec<Vec<usize>> = model.tensors().map(|t| t.shape().to_vec()).collect();
        if shapes != header.tensors {
            return Err(bad("tensor layout does not match the declared architecture"));
        }
        let mut values = bytes[12 + len..].chunks_exact(8);
        let mut fill = |t: &mut ArrayD<T>| -> Result<()> {
            for v in t.iter_mut() {
                let chunk = values.next().ok_or_else(|| bad("truncated tensor data"))?;
                *v = T::of(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
            }
            Ok(())
        };
        for p in model.params_mut() {
            fill(&mut p.value)?;
        }
        for b in model.backbone.buffers_mut() {
            fill(b)?;
        }
        if values.next().is_some() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(model)
    }

    fn tensors(&self) -> impl Iterator<Item = &ArrayD<T>> {
        let params: Vec<&ArrayD<T>> = self.params().into_iter().map(|p| &p.value).collect();
        params.into_iter().chain(self.backbone.buffers())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MBJCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    model: ModelConfig,
    embedding_dim: usize,
    class_count: usize,
    scalar: String,
    tensors: Vec<Vec<usize>>,
}

pub fn argmax_rows<T: Scalar>(logits: ArrayView2<'_, T>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
