//! Encoder, projection head, predictor and classifier, with momentum copies
//! of the encoder and projection head for the key branch.
//!
//! Layer plan:
//! - encoder: three blocks of conv → batch-norm → ReLU → max-pool
//!   (kernel widths 7, 5, 5), then global average pooling;
//! - projection head and predictor: dense → ReLU → dense (256 → 128);
//! - classifier: three dense layers with ReLU + dropout after the first two,
//!   fed with the projection output.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, BatchStats, Conv1dSpec, Gradients, Graph, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_FORMAT};

/// Architecture hyperparameters. Two networks with equal configs have
/// identical parameter layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub length: usize,
    pub in_channels: usize,
    pub conv_channels: Vec<usize>,
    pub kernel_widths: Vec<usize>,
    pub conv_padding: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub pred_hidden: usize,
    pub classifier_hidden: Vec<usize>,
    pub dropout_keep: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn new(num_classes: usize, length: usize) -> Self {
        Self {
            num_classes,
            length,
            in_channels: 2,
            conv_channels: vec![32, 64, 128],
            kernel_widths: vec![7, 5, 5],
            conv_padding: 0,
            pool_window: 2,
            pool_stride: 2,
            proj_hidden: 256,
            embed_dim: 128,
            pred_hidden: 256,
            classifier_hidden: vec![128, 64],
            dropout_keep: 0.5,
            bn_momentum: 0.1,
        }
    }

    pub fn with_conv_channels(mut self, channels: Vec<usize>) -> Self {
        self.conv_channels = channels;
        self
    }

    /// Sequence length after the encoder's last block, if positive.
    fn encoded_length(&self, length: usize) -> Option<usize> {
        let mut l = length;
        for &k in &self.kernel_widths {
            let padded = l + 2 * self.conv_padding;
            if k > padded {
                return None;
            }
            l = padded - k + 1;
            if self.pool_window > l {
                return None;
            }
            l = (l - self.pool_window) / self.pool_stride + 1;
        }
        Some(l)
    }

    pub fn min_length(&self) -> usize {
        (1..).find(|&l| self.encoded_length(l).is_some()).expect("some length works")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.conv_channels.len() != self.kernel_widths.len() || self.conv_channels.is_empty() {
            return Err(Error::config(format!(
                "conv channel plan {:?} does not match kernel widths {:?}",
                self.conv_channels, self.kernel_widths
            )));
        }
        let dims = [self.in_channels, self.proj_hidden, self.embed_dim, self.pred_hidden];
        if dims.iter().chain(&self.conv_channels).chain(&self.kernel_widths).any(|&d| d == 0)
            || self.classifier_hidden.contains(&0)
            || self.pool_window == 0
            || self.pool_stride == 0
        {
            return Err(Error::config("layer sizes must be positive"));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::config(format!("dropout keep {} outside (0, 1]", self.dropout_keep)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config(format!("batch-norm momentum {} outside [0, 1]", self.bn_momentum)));
        }
        if self.encoded_length(self.length).is_none() {
            return Err(Error::config(format!(
                "record length {} too short for the encoder; minimum is {}",
                self.length,
                self.min_length()
            )));
        }
        Ok(())
    }
}

/// Forward-pass behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm, dropout active.
    Train,
    /// Running statistics, dropout off.
    Eval,
    /// Running statistics, dropout active (MC-dropout inference).
    McDropout,
}

impl Mode {
    fn batch_stats(self) -> bool {
        self == Mode::Train
    }

    fn dropout_active(self) -> bool {
        self != Mode::Eval
    }
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: he_uniform(&[fan_out, fan_in], fan_in, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Convolutional feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub blocks: Vec<ConvBlock>,
}

/// Stack of dense layers with ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Encoder {
    fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut in_ch = cfg.in_channels;
        let blocks = cfg
            .conv_channels
            .iter()
            .zip(&cfg.kernel_widths)
            .map(|(&out, &k)| {
                let block = ConvBlock {
                    kernel: he_uniform(&[out, in_ch, k], in_ch * k, rng),
                    gamma: Tensor::filled(&[out], 1.0),
                    beta: Tensor::zeros(&[out]),
                    running_mean: Tensor::zeros(&[out]),
                    running_var: Tensor::filled(&[out], 1.0),
                };
                in_ch = out;
                block
            })
            .collect();
        Self { blocks }
    }

    /// Trainable tensors: kernel, gamma, beta per block.
    pub fn params(&self) -> Vec<&Tensor> {
        self.blocks.iter().flat_map(|b| [&b.kernel, &b.gamma, &b.beta]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.kernel, &mut b.gamma, &mut b.beta])
            .collect()
    }

    /// Every tensor including running statistics, with names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                [
                    (format!("block{i}.kernel"), &b.kernel),
                    (format!("block{i}.gamma"), &b.gamma),
                    (format!("block{i}.beta"), &b.beta),
                    (format!("block{i}.running_mean"), &b.running_mean),
                    (format!("block{i}.running_var"), &b.running_var),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                [
                    &mut b.kernel,
                    &mut b.gamma,
                    &mut b.beta,
                    &mut b.running_mean,
                    &mut b.running_var,
                ]
            })
            .collect()
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        bind_all(g, self.params(), trainable)
    }

    fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        cfg: &ModelConfig,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let spec = Conv1dSpec {
            stride: 1,
            padding: cfg.conv_padding,
        };
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let (w, gamma, beta) = (vars[3 * i], vars[3 * i + 1], vars[3 * i + 2]);
            h = g.conv1d(h, w, spec)?;
            h = if mode.batch_stats() {
                let (out, s) = g.batchnorm_train(h, gamma, beta)?;
                stats.push(s);
                out
            } else {
                g.batchnorm_eval(h, gamma, beta, block.running_mean.data(), block.running_var.data())?
            };
            h = g.relu(h);
            h = g.maxpool1d(h, cfg.pool_window, cfg.pool_stride)?;
        }
        g.global_avg_pool(h)
    }

    fn update_running_stats(&mut self, stats: &[BatchStats], momentum: f64) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for (r, m) in block.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            for (r, v) in block.running_var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * v * unbias;
            }
        }
    }
}

impl Mlp {
    fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|d| [&d.weight, &d.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, d)| [(format!("layer{i}.weight"), &d.weight), (format!("layer{i}.bias"), &d.bias)])
            .collect()
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        bind_all(g, self.params(), trainable)
    }

    /// Dense layers with ReLU (and optional dropout) between them; the last
    /// layer is linear.
    fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        dropout: Option<(f64, bool)>,
        rng: &mut R,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            h = g.dense(h, vars[2 * i], vars[2 * i + 1])?;
            if i < last {
                h = g.relu(h);
                if let Some((keep, active)) = dropout {
                    h = g.dropout(h, keep, active, rng)?;
                }
            }
        }
        Ok(h)
    }
}

fn bind_all(g: &mut Graph, tensors: Vec<&Tensor>, trainable: bool) -> Vec<Var> {
    tensors
        .into_iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect()
}

/// Optimizer state for each gradient-trained collection.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub encoder: AdamState,
    pub projection: AdamState,
    pub predictor: AdamState,
    pub classifier: AdamState,
}

/// Gradient-trained collections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Encoder,
    Projection,
    Predictor,
    Classifier,
}

/// All network parameters. The key collections mirror the query ones and are
/// only ever changed by [`NetworkParams::momentum_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: ModelConfig,
    pub query_encoder: Encoder,
    pub key_encoder: Encoder,
    pub query_projection: Mlp,
    pub key_projection: Mlp,
    pub predictor: Mlp,
    pub classifier: Mlp,
    pub optimizer: OptimizerState,
}

/// Graph handles for one binding of the query branch.
pub struct BoundQuery {
    encoder: Vec<Var>,
    projection: Vec<Var>,
    predictor: Vec<Var>,
    classifier: Vec<Var>,
}

impl BoundQuery {
    /// Graph handles of one block, in `params()` order.
    pub fn vars(&self, block: Block) -> &[Var] {
        match block {
            Block::Encoder => &self.encoder,
            Block::Projection => &self.projection,
            Block::Predictor => &self.predictor,
            Block::Classifier => &self.classifier,
        }
    }
}

/// Outputs of one query-branch pass over a batch.
pub struct QueryOutputs {
    pub p: Var,
    /// Unit-norm predictor output.
    pub q: Option<Var>,
    pub probs: Option<Var>,
    pub stats: Vec<BatchStats>,
}

impl NetworkParams {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let last_conv = *config.conv_channels.last().expect("validated");
        let query_encoder = Encoder::init(&config, rng);
        let query_projection = Mlp::init(&[last_conv, config.proj_hidden, config.embed_dim], rng);
        let predictor = Mlp::init(&[config.embed_dim, config.pred_hidden, config.embed_dim], rng);
        let mut widths = vec![config.embed_dim];
        widths.extend(&config.classifier_hidden);
        widths.push(config.num_classes);
        let classifier = Mlp::init(&widths, rng);
        let optimizer = OptimizerState {
            encoder: AdamState::new(query_encoder.params()),
            projection: AdamState::new(query_projection.params()),
            predictor: AdamState::new(predictor.params()),
            classifier: AdamState::new(classifier.params()),
        };
        Ok(Self {
            key_encoder: query_encoder.clone(),
            key_projection: query_projection.clone(),
            config,
            query_encoder,
            query_projection,
            predictor,
            classifier,
            optimizer,
        })
    }

    /// Drops accumulated optimizer moments.
    pub fn reset_optimizer(&mut self) {
        self.optimizer = OptimizerState {
            encoder: AdamState::new(self.query_encoder.params()),
            projection: AdamState::new(self.query_projection.params()),
            predictor: AdamState::new(self.predictor.params()),
            classifier: AdamState::new(self.classifier.params()),
        };
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 3 || s[1] != self.config.in_channels || s[2] != self.config.length {
            return Err(Error::Shape {
                op: "network input",
                left: vec![0, self.config.in_channels, self.config.length],
                right: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Query-encoder latents `z` for a `[B, 2, L]` batch. Train mode uses
    /// batch statistics but does not touch the running averages.
    pub fn encode(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut g = Graph::new();
        let vars = self.query_encoder.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let z = self.query_encoder.forward(&mut g, &vars, x, &self.config, mode, &mut Vec::new())?;
        Ok(g.value(z).clone())
    }

    /// Projection-head output `p` (not normalized).
    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.query_projection.bind(&mut g, false);
        let x = g.constant(z.clone());
        let p = self.query_projection.forward(&mut g, &vars, x, None, &mut rand::rng())?;
        Ok(g.value(p).clone())
    }

    /// Unit-norm predictor output `q`.
    pub fn predict(&self, p: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.predictor.bind(&mut g, false);
        let x = g.constant(p.clone());
        let q = self.predictor.forward(&mut g, &vars, x, None, &mut rand::rng())?;
        let q = g.l2_normalize(q)?;
        Ok(g.value(q).clone())
    }

    /// Class probabilities `[B, M]` from projection outputs.
    pub fn classify<R: Rng + ?Sized>(&self, p: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.classifier.bind(&mut g, false);
        let x = g.constant(p.clone());
        let logits = self.classifier.forward(
            &mut g,
            &vars,
            x,
            Some((self.config.dropout_keep, mode.dropout_active())),
            rng,
        )?;
        let probs = g.softmax(logits)?;
        Ok(g.value(probs).clone())
    }

    /// Eval-mode projection outputs for a batch.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        self.project(&self.encode(batch, Mode::Eval)?)
    }

    /// Unit-norm key embeddings from the momentum branch. Batch-norm uses
    /// the batch's statistics; nothing is recorded for differentiation.
    pub fn key_embeddings(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut g = Graph::new();
        let enc = self.key_encoder.bind(&mut g, false);
        let proj = self.key_projection.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let z = self.key_encoder.forward(&mut g, &enc, x, &self.config, Mode::Train, &mut Vec::new())?;
        let p = self.key_projection.forward(&mut g, &proj, z, None, &mut rand::rng())?;
        let k = g.l2_normalize(p)?;
        Ok(g.value(k).clone())
    }

    /// Records the query branch (encoder, projection, predictor, classifier)
    /// as differentiable leaves.
    pub fn bind_query(&self, g: &mut Graph) -> BoundQuery {
        BoundQuery {
            encoder: self.query_encoder.bind(g, true),
            projection: self.query_projection.bind(g, true),
            predictor: self.predictor.bind(g, true),
            classifier: self.classifier.bind(g, true),
        }
    }

    /// Differentiable query-branch pass over one augmented view.
    pub fn query_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bound: &BoundQuery,
        batch: &Tensor,
        mode: Mode,
        with_predictor: bool,
        with_classifier: bool,
        rng: &mut R,
    ) -> Result<QueryOutputs> {
        self.check_input(batch)?;
        let x = g.constant(batch.clone());
        let mut stats = Vec::new();
        let z = self
            .query_encoder
            .forward(g, &bound.encoder, x, &self.config, mode, &mut stats)?;
        let p = self.query_projection.forward(g, &bound.projection, z, None, rng)?;
        let q = if with_predictor {
            let raw = self.predictor.forward(g, &bound.predictor, p, None, rng)?;
            Some(g.l2_normalize(raw)?)
        } else {
            None
        };
        let probs = if with_classifier {
            let logits = self.classifier.forward(
                g,
                &bound.classifier,
                p,
                Some((self.config.dropout_keep, mode.dropout_active())),
                rng,
            )?;
            Some(g.softmax(logits)?)
        } else {
            None
        };
        Ok(QueryOutputs { p, q, probs, stats })
    }

    /// Folds batch statistics into the query encoder's running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let momentum = self.config.bn_momentum;
        self.query_encoder.update_running_stats(stats, momentum);
    }

    /// Adam update of the listed collections from one backward pass.
    pub fn apply_gradients(
        &mut self,
        bound: &BoundQuery,
        grads: &Gradients,
        blocks: &[Block],
        adam: &AdamConfig,
    ) -> Result<()> {
        for &block in blocks {
            let (name, params, vars, state) = match block {
                Block::Encoder => (
                    "query_encoder",
                    self.query_encoder.params_mut(),
                    &bound.encoder,
                    &mut self.optimizer.encoder,
                ),
                Block::Projection => (
                    "query_projection",
                    self.query_projection.params_mut(),
                    &bound.projection,
                    &mut self.optimizer.projection,
                ),
                Block::Predictor => (
                    "predictor",
                    self.predictor.params_mut(),
                    &bound.predictor,
                    &mut self.optimizer.predictor,
                ),
                Block::Classifier => (
                    "classifier",
                    self.classifier.params_mut(),
                    &bound.classifier,
                    &mut self.optimizer.classifier,
                ),
            };
            let mut params = params;
            let g: Vec<Tensor> = params
                .iter()
                .zip(vars)
                .map(|(p, &v)| grads.get_or_zeros(v, p))
                .collect();
            adam_step(name, &mut params, &g, state, adam)?;
        }
        Ok(())
    }

    /// `key ← m·key + (1 − m)·query` for the encoder (including running
    /// statistics) and projection head.
    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::config(format!("momentum {m} outside [0, 1]")));
        }
        let blend = |key: &mut Tensor, query: &Tensor| {
            for (k, q) in key.data_mut().iter_mut().zip(query.data()) {
                *k = m * *k + (1.0 - m) * q;
            }
        };
        let query_enc: Vec<(String, &Tensor)> = self.query_encoder.named_tensors();
        for (key, (_, query)) in self.key_encoder.tensors_mut().into_iter().zip(query_enc) {
            blend(key, query);
        }
        for (key, query) in self.key_projection.params_mut().into_iter().zip(self.query_projection.params()) {
            blend(key, query);
        }
        Ok(())
    }

    /// Named tensor collections in checkpoint order.
    pub fn collections(&self) -> Vec<(&'static str, Vec<(String, &Tensor)>)> {
        vec![
            ("query_encoder", self.query_encoder.named_tensors()),
            ("key_encoder", self.key_encoder.named_tensors()),
            ("query_projection", self.query_projection.named_tensors()),
            ("key_projection", self.key_projection.named_tensors()),
            ("predictor", self.predictor.named_tensors()),
            ("classifier", self.classifier.named_tensors()),
        ]
    }

    fn collections_mut(&mut self) -> Vec<Vec<&mut Tensor>> {
        vec![
            self.query_encoder.tensors_mut(),
            self.key_encoder.tensors_mut(),
            self.query_projection.params_mut(),
            self.key_projection.params_mut(),
            self.predictor.params_mut(),
            self.classifier.params_mut(),
        ]
    }

    /// Order-sensitive FNV-1a digest over the bit patterns of a collection.
    pub fn checksum(tensors: &[&Tensor]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in tensors {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn key_checksum(&self) -> u64 {
        let mut all: Vec<&Tensor> = self.key_encoder.named_tensors().into_iter().map(|(_, t)| t).collect();
        all.extend(self.key_projection.params());
        Self::checksum(&all)
    }
}
