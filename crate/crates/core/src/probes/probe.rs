use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gradcore::{AdamConfig, AdamState, Graph, ParamStore, Tensor};
use crate::rng::Stream;
use crate::simnet::Model;
use crate::syllabgen::{extract_padded_syllable, Corpus, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Vowel,
    Syllable,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Vowel, Task::Syllable];

    pub fn classes(self) -> usize {
        match self {
            Task::Vowel => 3,
            Task::Syllable => 9,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Vowel => "vowel",
            Task::Syllable => "syllable",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vowel" => Ok(Task::Vowel),
            "syllable" => Ok(Task::Syllable),
            _ => Err(Error::InvalidArgument(format!("unknown task `{s}` (vowel|syllable)"))),
        }
    }
}

/// Where probe features are read: an encoder module (1-based) or the GRU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layer {
    Module(usize),
    Context,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Module(m) => write!(f, "{m}"),
            Layer::Context => f.write_str("context"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "context" {
            return Ok(Layer::Context);
        }
        match s.parse::<usize>() {
            Ok(m) if m >= 1 => Ok(Layer::Module(m)),
            _ => Err(Error::InvalidArgument(format!("unknown layer `{s}` (1|2|3|context)"))),
        }
    }
}

/// Mean over the rows of `[T, D]`.
pub fn pool_context(context: &Tensor) -> Result<Tensor> {
    if context.rank() != 2 || context.dim(0) == 0 {
        return Err(Error::shape("pool_context", format!("expected non-empty [T, D], got {:?}", context.shape())));
    }
    let (t, d) = (context.dim(0), context.dim(1));
    let mut acc = vec![0.0f64; d];
    for row in context.data().chunks(d) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    Ok(Tensor::from_vec(acc.into_iter().map(|s| (s / t as f64) as f32).collect()))
}

/// Pooled features of one split: one `[N, D]` matrix per layer plus labels.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    /// Module 1..M, then the context.
    pub layers: Vec<Tensor>,
    pub vowel: Vec<usize>,
    pub syllable: Vec<usize>,
}

impl FeatureSet {
    pub fn layer(&self, layer: Layer) -> Result<&Tensor> {
        let i = match layer {
            Layer::Module(m) if m >= 1 && m < self.layers.len() => m - 1,
            Layer::Context => self.layers.len() - 1,
            Layer::Module(m) => {
                return Err(Error::InvalidArgument(format!(
                    "model has no module {m} (1..={})",
                    self.layers.len() - 1
                )))
            }
        };
        Ok(&self.layers[i])
    }

    pub fn labels(&self, task: Task) -> &[usize] {
        match task {
            Task::Vowel => &self.vowel,
            Task::Syllable => &self.syllable,
        }
    }

    pub fn len(&self) -> usize {
        self.vowel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vowel.is_empty()
    }
}

const FEATURE_BATCH: usize = 16;

/// Encode every padded syllable of `split` in mean mode and time-average
/// each module's output and the context. The backbone is only read.
pub fn syllable_features(model: &Model, corpus: &Corpus, split: Split) -> Result<FeatureSet> {
    let mut waves = Vec::new();
    let (mut vowel, mut syllable) = (Vec::new(), Vec::new());
    for i in corpus.indices(split) {
        let clip = &corpus.clips[i];
        for (s, syl) in clip.syllables.iter().enumerate() {
            waves.push(extract_padded_syllable(clip, s)?);
            vowel.push(syl.vowel as usize);
            syllable.push(syl.index());
        }
    }
    if waves.is_empty() {
        return Err(Error::InvalidArgument(format!("{} split is empty", split.as_str())));
    }
    let n_layers = model.config.n_modules() + 1;
    let mut rows: Vec<Vec<f32>> = vec![Vec::new(); n_layers];
    for chunk in waves.chunks(FEATURE_BATCH) {
        let enc = model.encode_mean(&Tensor::stack(chunk)?)?;
        for (m, lat) in enc.latents.iter().enumerate() {
            // [B, D, T] → mean over T per (b, d).
            let (b, d, t) = (lat.batch(), lat.dims(), lat.frames());
            for row in lat.mean().data().chunks(t).take(b * d) {
                rows[m].push((row.iter().map(|&v| v as f64).sum::<f64>() / t as f64) as f32);
            }
        }
        let ctx = &enc.context;
        for b in 0..ctx.dim(0) {
            rows[n_layers - 1].extend_from_slice(pool_context(&ctx.index0(b))?.data());
        }
    }
    let n = waves.len();
    let layers = rows
        .into_iter()
        .map(|r| {
            let d = r.len() / n;
            Tensor::new(vec![n, d], r)
        })
        .collect::<Result<_>>()?;
    Ok(FeatureSet { layers, vowel, syllable })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            batch_size: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub task: Task,
    pub layer: Layer,
    /// `[classes, D]`.
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub has_bias: bool,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean training cross-entropy per epoch.
    pub losses: Vec<f64>,
}

impl ProbeResult {
    pub fn classes(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut g: Graph = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(self.weights.clone());
        let b = self.bias.clone().map(|b| g.constant(b));
        let logits = g.linear(xv, w, b)?;
        let c = self.classes();
        Ok(g.value(logits)
            .data()
            .chunks(c)
            .map(|row| {
                // First maximum wins.
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

fn check_labels(x: &Tensor, labels: &[usize], classes: usize, what: &str) -> Result<()> {
    if x.rank() != 2 || x.dim(0) != labels.len() {
        return Err(Error::shape(
            "train_probe",
            format!("{what} features {:?} for {} labels", x.shape(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "{what} label {bad} outside {classes} classes"
        )));
    }
    Ok(())
}

/// One linear layer trained with cross-entropy and Adam on frozen features.
#[allow(clippy::too_many_arguments)]
pub fn train_probe(
    task: Task,
    layer: Layer,
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    has_bias: bool,
    config: ProbeConfig,
) -> Result<ProbeResult> {
    let classes = task.classes();
    check_labels(train_x, train_y, classes, "train")?;
    check_labels(test_x, test_y, classes, "test")?;
    if train_x.dim(1) != test_x.dim(1) {
        return Err(Error::shape("train_probe", "train and test feature widths differ"));
    }
    let d = train_x.dim(1);
    let mut rng = Stream::derived(config.seed, "probes.init", &[classes as u64, d as u64]);
    let mut store = ParamStore::new();
    let w_id = store.add_uniform("probe.weight", &[classes, d], d, &mut rng)?;
    let b_id = if has_bias {
        Some(store.add_zeros("probe.bias", &[classes])?)
    } else {
        None
    };
    let ids = std::iter::once(w_id).chain(b_id).collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &store, ids)?;
    let n = train_y.len();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Stream::derived(config.seed, "probes.order", &[epoch as u64]).shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut xb = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                xb.extend_from_slice(&train_x.data()[i * d..(i + 1) * d]);
            }
            let yb: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut g: Graph = Graph::new();
            let x = g.constant(Tensor::new(vec![chunk.len(), d], xb)?);
            let w = g.param(&store, w_id);
            let b = b_id.map(|id| g.param(&store, id));
            let logits = g.linear(x, w, b)?;
            let loss = g.cross_entropy(logits, &yb)?;
            total += g.scalar(loss);
            batches += 1;
            let grads = g.backward(loss)?;
            store.zero_grads();
            grads.accumulate_into(&g, &mut store)?;
            adam.step(&mut store)?;
        }
        losses.push(total / batches as f64);
    }
    let mut result = ProbeResult {
        task,
        layer,
        weights: store.value(w_id).clone(),
        bias: b_id.map(|id| store.value(id).clone()),
        has_bias,
        train_accuracy: 0.0,
        test_accuracy: 0.0,
        losses,
    };
    result.train_accuracy = result.accuracy(train_x, train_y)?;
    result.test_accuracy = result.accuracy(test_x, test_y)?;
    Ok(result)
}

/// Train and test features of one backbone.
#[derive(Clone, Debug)]
pub struct ProbeData {
    pub train: FeatureSet,
    pub test: FeatureSet,
}

impl ProbeData {
    pub fn extract(model: &Model, corpus: &Corpus) -> Result<Self> {
        Ok(Self {
            train: syllable_features(model, corpus, Split::Train)?,
            test: syllable_features(model, corpus, Split::Test)?,
        })
    }

    pub fn probe(&self, task: Task, layer: Layer, has_bias: bool, config: ProbeConfig) -> Result<ProbeResult> {
        train_probe(
            task,
            layer,
            self.train.layer(layer)?,
            self.train.labels(task),
            self.test.layer(layer)?,
            self.test.labels(task),
            has_bias,
            config,
        )
    }
}

pub const HISTOGRAM_BINS: usize = 50;
pub const NEAR_ZERO: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Concentration {
    /// Per dimension, the largest `|w|` over classes divided by the largest
    /// `|w|` in the whole matrix.
    pub magnitudes: Vec<f64>,
    /// Counts over `[0, 1]` in [`HISTOGRAM_BINS`] equal bins; 1.0 lands in
    /// the last bin.
    pub histogram: Vec<usize>,
    /// Share of dimensions with magnitude below [`NEAR_ZERO`].
    pub near_zero_fraction: f64,
}

pub fn weight_concentration(weights: &Tensor) -> Result<Concentration> {
    if weights.rank() != 2 || weights.is_empty() {
        return Err(Error::shape("weight_concentration", format!("expected [C, D], got {:?}", weights.shape())));
    }
    let d = weights.dim(1);
    let mut per_dim = vec![0.0f64; d];
    for row in weights.data().chunks(d) {
        for (m, &w) in per_dim.iter_mut().zip(row) {
            *m = m.max((w as f64).abs());
        }
    }
    let global = per_dim.iter().copied().fold(0.0, f64::max);
    let magnitudes: Vec<f64> = if global > 0.0 {
        per_dim.iter().map(|m| m / global).collect()
    } else {
        vec![0.0; d]
    };
    let mut histogram = vec![0; HISTOGRAM_BINS];
    for &m in &magnitudes {
        histogram[((m * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    let near_zero_fraction = magnitudes.iter().filter(|&&m| m < NEAR_ZERO).count() as f64 / d as f64;
    Ok(Concentration {
        magnitudes,
        histogram,
        near_zero_fraction,
    })
}
