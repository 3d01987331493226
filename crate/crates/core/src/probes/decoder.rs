use tracing::info;

use crate::error::{Error, Result};
use crate::gradcore::{AdamConfig, AdamState, Graph, Tensor};
use crate::rng::Stream;
use crate::simnet::{build_mirror_decoder, Decoder, Model};
use crate::syllabgen::{Corpus, Split};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 2e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl DecoderTrainConfig {
    /// Desk-scale schedule: fewer epochs, smaller batches so a 160-clip
    /// training split still gives many steps per epoch.
    pub fn reduced() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            ..Self::default()
        }
    }
}

pub struct DecoderOutcome {
    pub decoder: Decoder,
    /// Mean training MSE per epoch.
    pub losses: Vec<f64>,
}

/// Mean-mode `[1, D, T]` latents of module `module` (1-based) for clips.
pub fn clip_latents(model: &Model, corpus: &Corpus, clips: &[usize], module: usize) -> Result<Vec<Tensor>> {
    if module == 0 || module > model.config.n_modules() {
        return Err(Error::InvalidArgument(format!(
            "module {module} outside 1..={}",
            model.config.n_modules()
        )));
    }
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(16) {
        let enc = model.encode_mean(&corpus.batch_tensor(chunk)?)?;
        let mu = enc.latents[module - 1].mean();
        for b in 0..chunk.len() {
            let one = mu.index0(b);
            let shape = [1, one.dim(0), one.dim(1)];
            out.push(one.reshape(&shape)?);
        }
    }
    Ok(out)
}

/// Fit a mirror decoder to reconstruct training clips from frozen
/// mean-mode latents of `module` with an MSE loss.
pub fn train_decoder(model: &Model, module: usize, corpus: &Corpus, config: DecoderTrainConfig) -> Result<DecoderOutcome> {
    let clips = corpus.indices(Split::Train);
    if clips.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let latents = clip_latents(model, corpus, &clips, module)?;
    let mut decoder = build_mirror_decoder(&model.config, module, config.seed)?;
    let ids: Vec<_> = decoder.params.ids().collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &decoder.params, ids)?;
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        Stream::derived(config.seed, "probes.decoder.order", &[module as u64, epoch as u64]).shuffle(&mut order);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let z = Tensor::stack(&chunk.iter().map(|&i| latents[i].index0(0)).collect::<Vec<_>>())?;
            let idx: Vec<usize> = chunk.iter().map(|&i| clips[i]).collect();
            let target = corpus.batch_tensor(&idx)?;
            let mut g: Graph = Graph::new();
            let zv = g.constant(z);
            let y = decoder.graph(&mut g, zv)?;
            let loss = g.mse(y, &target)?;
            total += g.scalar(loss);
            batches += 1;
            let grads = g.backward(loss)?;
            decoder.params.zero_grads();
            grads.accumulate_into(&g, &mut decoder.params)?;
            adam.step(&mut decoder.params)?;
        }
        let mean = total / batches as f64;
        info!(module, epoch = epoch + 1, mse = mean, "decoder epoch");
        losses.push(mean);
    }
    Ok(DecoderOutcome { decoder, losses })
}
