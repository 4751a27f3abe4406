//! Trainable softmax classification head over frozen embeddings.
//!
//! The head is linear by default, with an optional single `tanh` hidden
//! layer. Parameters live in one flat `f64` vector so optimizers and gradient
//! checks can treat them uniformly. Layout:
//!
//! ```text
//! linear: W[g×d] | b[g]
//! hidden: W1[h×d] | b1[h] | W2[g×h] | b2[g]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::ingest::LabelSpace;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    #[default]
    InverseFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    pub class_weighting: ClassWeighting,
    /// Width of the optional hidden layer; `None` is a linear head.
    pub hidden_width: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 64,
            l2: 1e-4,
            seed: 0,
            class_weighting: ClassWeighting::InverseFrequency,
            hidden_width: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero rate is allowed: it freezes the parameters.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidConfig(format!("l2 {}", self.l2)));
        }
        if self.hidden_width == Some(0) {
            return Err(Error::InvalidConfig("hidden_width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Cold,
    Warm { source: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    label_space: LabelSpace,
    dim: usize,
    hidden_width: Option<usize>,
    params: Vec<f64>,
    pub train_config: TrainConfig,
    pub provenance: Provenance,
}

/// Numerically stable softmax in `f64`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

impl HeadModel {
    /// Fresh head: weights uniform in ±1/√fan_in from `config.seed`, zero biases.
    pub fn cold(label_space: LabelSpace, dim: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        let g = label_space.len();
        let mut rng = seed::rng(config.seed, "head-init");
        let mut params = Vec::new();
        let mut uniform = |n: usize, fan_in: usize, out: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            out.extend((0..n).map(|_| rng.random_range(-bound..=bound)));
        };
        match config.hidden_width {
            Some(h) => {
                uniform(h * dim, dim, &mut params);
                params.extend(std::iter::repeat_n(0.0, h));
                uniform(g * h, h, &mut params);
            }
            None => uniform(g * dim, dim, &mut params),
        }
        params.extend(std::iter::repeat_n(0.0, g));
        Ok(Self {
            label_space,
            dim,
            hidden_width: config.hidden_width,
            params,
            train_config: config,
            provenance: Provenance::Cold,
        })
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.label_space.len()
    }

    pub fn hidden_width(&self) -> Option<usize> {
        self.hidden_width
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Width of the layer feeding the output logits.
    fn output_fan_in(&self) -> usize {
        self.hidden_width.unwrap_or(self.dim)
    }

    fn hidden_len(&self) -> usize {
        self.hidden_width.map_or(0, |h| h * self.dim + h)
    }

    fn output_offset(&self) -> usize {
        self.hidden_len()
    }

    fn bias_offset(&self) -> usize {
        self.output_offset() + self.classes() * self.output_fan_in()
    }

    /// Output weight row and bias of class `k`.
    pub fn output_row(&self, k: usize) -> (&[f64], f64) {
        let f = self.output_fan_in();
        let start = self.output_offset() + k * f;
        (
            &self.params[start..start + f],
            self.params[self.bias_offset() + k],
        )
    }

    pub fn output_bias(&self) -> &[f64] {
        &self.params[self.bias_offset()..]
    }

    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let off = self.bias_offset();
        &mut self.params[off..]
    }

    pub fn output_weights_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.output_offset(), self.bias_offset());
        &mut self.params[a..b]
    }

    /// Whether parameter `i` is a weight (subject to L2), not a bias.
    fn is_weight(&self, i: usize) -> bool {
        match self.hidden_width {
            Some(h) => {
                let w1 = h * self.dim;
                i < w1 || (i >= self.hidden_len() && i < self.bias_offset())
            }
            None => i < self.bias_offset(),
        }
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: len,
            });
        }
        Ok(())
    }

    /// Hidden activations (if any) and logits for one input.
    fn forward(&self, x: &[f32]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let hidden: Vec<f64> = match self.hidden_width {
            Some(h) => {
                let (w1, b1) = self.params[..h * d + h].split_at(h * d);
                (0..h)
                    .map(|j| {
                        let row = &w1[j * d..(j + 1) * d];
                        let a: f64 =
                            row.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + b1[j];
                        a.tanh()
                    })
                    .collect()
            }
            None => Vec::new(),
        };
        let f = self.output_fan_in();
        let w = &self.params[self.output_offset()..self.bias_offset()];
        let b = self.output_bias();
        let logits = (0..self.classes())
            .map(|k| {
                let row = &w[k * f..(k + 1) * f];
                let dot: f64 = if self.hidden_width.is_some() {
                    row.iter().zip(&hidden).map(|(w, v)| w * v).sum()
                } else {
                    row.iter().zip(x).map(|(w, &v)| w * v as f64).sum()
                };
                dot + b[k]
            })
            .collect();
        (hidden, logits)
    }

    pub fn logits(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        Ok(self.forward(x).1)
    }

    pub fn scores(&self, x: &[f32]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }
}

/// Softmax class scores of one embedding.
pub fn predict_scores(head: &HeadModel, emb: &EmbeddingVector) -> Result<Vec<f64>> {
    head.scores(&emb.values)
}

/// Rows of examples: `features` is row-major `classes.len() × dim`.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f32],
    pub classes: &'a [usize],
    /// Per-example weights; uniform when absent.
    pub weights: Option<&'a [f64]>,
}

/// Weighted mean cross-entropy plus `l2/2·‖weights‖²`, and its gradient with
/// respect to [`HeadModel::params`].
pub fn loss_and_gradient(head: &HeadModel, batch: &Batch<'_>) -> Result<(f64, Vec<f64>)> {
    let n = batch.classes.len();
    let d = head.dim;
    let g = head.classes();
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if batch.features.len() != n * d {
        return Err(Error::DimensionMismatch {
            expected: n * d,
            found: batch.features.len(),
        });
    }
    if let Some(w) = batch.weights {
        if w.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: w.len(),
            });
        }
    }
    if let Some(&bad) = batch.classes.iter().find(|&&c| c >= g) {
        return Err(Error::UnknownLabel(format!("class index {bad}")));
    }
    let weight = |i: usize| batch.weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..n).map(weight).sum();
    if total <= 0.0 {
        return Err(Error::EmptyTrainingSet);
    }

    let f = head.output_fan_in();
    let out_off = head.output_offset();
    let bias_off = head.bias_offset();
    let mut grad = vec![0.0; head.params.len()];
    let mut loss = 0.0;
    let mut dz = vec![0.0; g];
    for i in 0..n {
        let x = &batch.features[i * d..(i + 1) * d];
        let (hidden, logits) = head.forward(x);
        let y = batch.classes[i];
        let wi = weight(i) / total;
        loss += wi * (log_sum_exp(&logits) - logits[y]);
        let p = softmax(&logits);
        for k in 0..g {
            dz[k] = wi * (p[k] - if k == y { 1.0 } else { 0.0 });
        }
        for k in 0..g {
            grad[bias_off + k] += dz[k];
            let row = &mut grad[out_off + k * f..out_off + (k + 1) * f];
            if head.hidden_width.is_some() {
                row.iter_mut()
                    .zip(&hidden)
                    .for_each(|(gr, h)| *gr += dz[k] * h);
            } else {
                row.iter_mut()
                    .zip(x)
                    .for_each(|(gr, &v)| *gr += dz[k] * v as f64);
            }
        }
        if let Some(h) = head.hidden_width {
            let w2 = &head.params[out_off..bias_off];
            for j in 0..h {
                let back: f64 = (0..g).map(|k| w2[k * h + j] * dz[k]).sum();
                let da = back * (1.0 - hidden[j] * hidden[j]);
                grad[h * d + j] += da;
                grad[j * d..(j + 1) * d]
                    .iter_mut()
                    .zip(x)
                    .for_each(|(gr, &v)| *gr += da * v as f64);
            }
        }
    }
    if head.train_config.l2 > 0.0 {
        let l2 = head.train_config.l2;
        let mut penalty = 0.0;
        for (i, (gr, &p)) in grad.iter_mut().zip(&head.params).enumerate() {
            if head.is_weight(i) {
                *gr += l2 * p;
                penalty += p * p;
            }
        }
        loss += 0.5 * l2 * penalty;
    }
    Ok((loss, grad))
}

pub fn gradient(head: &HeadModel, batch: &Batch<'_>) -> Result<Vec<f64>> {
    loss_and_gradient(head, batch).map(|(_, g)| g)
}

pub fn loss(head: &HeadModel, batch: &Batch<'_>) -> Result<f64> {
    loss_and_gradient(head, batch).map(|(l, _)| l)
}

/// Dense training matrix with class indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub dim: usize,
    pub features: Vec<f32>,
    pub classes: Vec<usize>,
}

impl TrainingSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn push(&mut self, values: &[f32], class: usize) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: values.len(),
            });
        }
        self.features.extend_from_slice(values);
        self.classes.push(class);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch {
            features: &self.features,
            classes: &self.classes,
            weights: None,
        }
    }
}

/// Per-class weights `n / (K · n_k)` over the `K` classes present.
pub fn class_weights(classes: &[usize], g: usize, mode: ClassWeighting) -> Vec<f64> {
    match mode {
        ClassWeighting::None => vec![1.0; g],
        ClassWeighting::InverseFrequency => {
            let mut counts = vec![0usize; g];
            classes.iter().for_each(|&c| counts[c] += 1);
            let present = counts.iter().filter(|&&c| c > 0).count().max(1) as f64;
            let n = classes.len() as f64;
            counts
                .iter()
                .map(|&c| {
                    if c == 0 {
                        0.0
                    } else {
                        n / (present * c as f64)
                    }
                })
                .collect()
        }
    }
}

/// Learning rate below which full-batch gradient descent on a linear head
/// cannot increase the loss: `1 / (max‖(x,1)‖²/2 + l2)`.
pub fn stable_learning_rate(set: &TrainingSet, l2: f64) -> f64 {
    let max_sq = (0..set.len())
        .map(|i| 1.0 + set.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
        .fold(0.0, f64::max);
    1.0 / (0.5 * max_sq + l2)
}

/// Mini-batch gradient descent from the current parameters of `head`.
/// Returns the trained head and the per-epoch mean loss.
pub fn train_set(mut head: HeadModel, set: &TrainingSet) -> Result<(HeadModel, Vec<f64>)> {
    let cfg = head.train_config.clone();
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    head.check_dim(set.dim)?;
    let g = head.classes();
    if let Some(&bad) = set.classes.iter().find(|&&c| c >= g) {
        return Err(Error::UnknownLabel(format!("class index {bad}")));
    }
    let per_class = class_weights(&set.classes, g, cfg.class_weighting);
    let sample_w: Vec<f64> = set.classes.iter().map(|&c| per_class[c]).collect();

    let d = set.dim;
    let mut rng = seed::rng(cfg.seed, "train-shuffle");
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut feats = Vec::with_capacity(cfg.batch_size.min(set.len()) * d);
    let mut classes = Vec::with_capacity(cfg.batch_size);
    let mut weights = Vec::with_capacity(cfg.batch_size);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_weight = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            feats.clear();
            classes.clear();
            weights.clear();
            for &i in chunk {
                feats.extend_from_slice(set.row(i));
                classes.push(set.classes[i]);
                weights.push(sample_w[i]);
            }
            let batch = Batch {
                features: &feats,
                classes: &classes,
                weights: Some(&weights),
            };
            let (loss, grad) = loss_and_gradient(&head, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let bw: f64 = weights.iter().sum();
            epoch_loss += loss * bw;
            epoch_weight += bw;
            if cfg.learning_rate > 0.0 {
                for (p, gr) in head.params.iter_mut().zip(&grad) {
                    *p -= cfg.learning_rate * gr;
                }
            }
        }
        let mean = epoch_loss / epoch_weight;
        if !mean.is_finite() || head.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        curve.push(mean);
    }
    Ok((head, curve))
}

/// Train on `(embedding, class name)` pairs.
pub fn train(head: HeadModel, data: &[(EmbeddingVector, String)]) -> Result<(HeadModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut set = TrainingSet::new(head.dim);
    for (emb, class) in data {
        let k = head.label_space.require(class)?;
        set.push(&emb.values, k)?;
    }
    train_set(head, &set)
}

/// Head for `new_space` that reuses `source` where classes overlap: output
/// rows of shared classes are copied bit-exactly, other rows are initialized
/// as a cold start from `config`. A hidden layer is carried over only when at
/// least one class is shared.
pub fn warm_start(
    source: &HeadModel,
    source_ref: &str,
    new_space: &LabelSpace,
    dim: usize,
    config: TrainConfig,
) -> Result<HeadModel> {
    if dim != source.dim {
        return Err(Error::DimensionMismatch {
            expected: source.dim,
            found: dim,
        });
    }
    if config.hidden_width != source.hidden_width {
        return Err(Error::DimensionMismatch {
            expected: source.output_fan_in(),
            found: config.hidden_width.unwrap_or(dim),
        });
    }
    let mut head = HeadModel::cold(new_space.clone(), dim, config)?;
    let shared: Vec<(usize, usize)> = new_space
        .classes()
        .iter()
        .enumerate()
        .filter_map(|(k, name)| source.label_space.index_of(name).map(|s| (k, s)))
        .collect();
    if !shared.is_empty() {
        let hl = source.hidden_len();
        head.params[..hl].copy_from_slice(&source.params[..hl]);
    }
    let f = head.output_fan_in();
    for &(k, s) in &shared {
        let (row, bias) = source.output_row(s);
        head.output_weights_mut()[k * f..(k + 1) * f].copy_from_slice(row);
        head.output_bias_mut()[k] = bias;
    }
    head.provenance = Provenance::Warm {
        source: source_ref.to_string(),
    };
    Ok(head)
}

const CHECKPOINT_MAGIC: &[u8; 6] = b"WLHEAD";
const CHECKPOINT_VERSION: u32 = 1;

fn put_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 20 {
        return Err(std::io::Error::other("string length too large"));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(std::io::Error::other)
}

pub fn write_checkpoint_to<W: Write>(head: &HeadModel, w: &mut W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(head.classes() as u32)?;
    for c in head.label_space.classes() {
        put_str(w, c)?;
    }
    w.write_u32::<LittleEndian>(head.dim as u32)?;
    w.write_u32::<LittleEndian>(head.hidden_width.unwrap_or(0) as u32)?;
    w.write_u64::<LittleEndian>(head.params.len() as u64)?;
    for &p in &head.params {
        w.write_f64::<LittleEndian>(p)?;
    }
    let c = &head.train_config;
    w.write_f64::<LittleEndian>(c.learning_rate)?;
    w.write_u64::<LittleEndian>(c.epochs as u64)?;
    w.write_u64::<LittleEndian>(c.batch_size as u64)?;
    w.write_f64::<LittleEndian>(c.l2)?;
    w.write_u64::<LittleEndian>(c.seed)?;
    w.write_u8(match c.class_weighting {
        ClassWeighting::None => 0,
        ClassWeighting::InverseFrequency => 1,
    })?;
    match &head.provenance {
        Provenance::Cold => w.write_u8(0),
        Provenance::Warm { source } => {
            w.write_u8(1)?;
            put_str(w, source)
        }
    }
}

pub fn read_checkpoint_from<R: Read>(r: &mut R) -> Result<HeadModel> {
    let bad = |e: std::io::Error| Error::CorruptState(format!("checkpoint: {e}"));
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CorruptState("checkpoint: bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(bad)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let g = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    let classes = (0..g)
        .map(|_| get_str(r))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(bad)?;
    let label_space = LabelSpace::new(classes)?;
    let dim = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    let hidden = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    let hidden_width = (hidden > 0).then_some(hidden);
    let n = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
    let expected = hidden_width.map_or(g * dim + g, |h| h * dim + h + g * h + g);
    if n != expected {
        return Err(Error::CorruptState(format!(
            "checkpoint: {n} parameters, expected {expected}"
        )));
    }
    let mut params = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut params).map_err(bad)?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::CorruptState(
            "checkpoint: non-finite parameter".into(),
        ));
    }
    let train_config = TrainConfig {
        learning_rate: r.read_f64::<LittleEndian>().map_err(bad)?,
        epochs: r.read_u64::<LittleEndian>().map_err(bad)? as usize,
        batch_size: r.read_u64::<LittleEndian>().map_err(bad)? as usize,
        l2: r.read_f64::<LittleEndian>().map_err(bad)?,
        seed: r.read_u64::<LittleEndian>().map_err(bad)?,
        class_weighting: match r.read_u8().map_err(bad)? {
            0 => ClassWeighting::None,
            _ => ClassWeighting::InverseFrequency,
        },
        hidden_width,
    };
    let provenance = match r.read_u8().map_err(bad)? {
        0 => Provenance::Cold,
        _ => Provenance::Warm {
            source: get_str(r).map_err(bad)?,
        },
    };
    Ok(HeadModel {
        label_space,
        dim,
        hidden_width,
        params,
        train_config,
        provenance,
    })
}

pub fn write_checkpoint(head: &HeadModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint_to(head, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<HeadModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_from(&mut BufReader::new(file))
}
