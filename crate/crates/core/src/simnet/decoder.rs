//! Transposed-conv decoders mirroring the encoder from a module back to
//! the waveform.

use serde::{Deserialize, Serialize};

use super::config::{inverse_output_padding, ModelConfig, FULL_CLIP_LEN};
use crate::error::{Error, Result};
use crate::gradcore::{Graph, ParamStore, Tensor, Var};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    /// `false` for the length-preserving K=3 refinement convs.
    pub transposed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// 1-based module whose latents are decoded.
    pub module: usize,
    pub channels: usize,
    pub input_frames: usize,
    pub output_len: usize,
    pub layers: Vec<DecoderLayer>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub params: ParamStore,
}

/// Mirror of the encoder up to module `module_index` (1-based), sized so a
/// full 10240-sample clip's latents decode to exactly 10240 samples.
/// Decoding module 1 adds a K=3 conv after each mirrored layer.
pub fn build_mirror_decoder(model: &ModelConfig, module_index: usize, seed: u64) -> Result<Decoder> {
    if module_index == 0 || module_index > model.n_modules() {
        return Err(Error::InvalidArgument(format!(
            "module index {module_index} outside 1..={}",
            model.n_modules()
        )));
    }
    let chain = model
        .length_chain(FULL_CLIP_LEN)
        .ok_or_else(|| Error::Config("encoder cannot process a full clip".into()))?;
    let c = model.channels;
    let mut steps = Vec::new();
    let mut l_in = FULL_CLIP_LEN;
    for (m, convs) in chain.iter().enumerate().take(module_index) {
        for (i, &l_out) in convs.iter().enumerate() {
            steps.push((model.modules[m][i], l_in, l_out));
            l_in = l_out;
        }
    }
    let input_frames = l_in;
    let extras = module_index == 1;
    let mut layers = Vec::new();
    let n = steps.len();
    for (j, (spec, l_in, l_out)) in steps.into_iter().rev().enumerate() {
        let last = j + 1 == n;
        let c_out = if last && !extras { 1 } else { c };
        layers.push(DecoderLayer {
            c_in: c,
            c_out,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            output_padding: inverse_output_padding(&spec, l_in, l_out)?,
            transposed: true,
        });
        if extras {
            layers.push(DecoderLayer {
                c_in: c,
                c_out: if last { 1 } else { c },
                kernel: 3,
                stride: 1,
                padding: 1,
                output_padding: 0,
                transposed: false,
            });
        }
    }
    Decoder::from_config(DecoderConfig {
        module: module_index,
        channels: c,
        input_frames,
        output_len: FULL_CLIP_LEN,
        layers,
        seed,
    })
}

impl Decoder {
    /// Fresh weights `U(±1/√fan_in)` and zero biases for `config`.
    pub fn from_config(config: DecoderConfig) -> Result<Self> {
        let mut rng = Stream::derived(config.seed, "simnet.decoder.init", &[config.module as u64]);
        let mut params = ParamStore::new();
        for (i, l) in config.layers.iter().enumerate() {
            let (shape, fan_in) = if l.transposed {
                (vec![l.c_in, l.c_out, l.kernel], l.c_out * l.kernel)
            } else {
                (vec![l.c_out, l.c_in, l.kernel], l.c_in * l.kernel)
            };
            params.add_uniform(format!("decoder.layer{i}.weight"), &shape, fan_in, &mut rng)?;
            params.add_zeros(format!("decoder.layer{i}.bias"), &[l.c_out])?;
        }
        Ok(Self { config, params })
    }

    pub fn n_layers(&self) -> usize {
        self.config.layers.len()
    }

    /// `z [B, D, T]` → waveform `[B, 1, L]`; ReLU between layers.
    pub fn graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let shape = g.value(z).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.config.channels || shape[2] != self.config.input_frames {
            return Err(Error::shape(
                "decode",
                format!(
                    "module {} decoder expects [B, {}, {}] latents, got {shape:?}",
                    self.config.module, self.config.channels, self.config.input_frames
                ),
            ));
        }
        let mut h = z;
        let n = self.config.layers.len();
        for (i, l) in self.config.layers.iter().enumerate() {
            let w = g.param_named(&self.params, &format!("decoder.layer{i}.weight"))?;
            let b = g.param_named(&self.params, &format!("decoder.layer{i}.bias"))?;
            h = if l.transposed {
                g.conv_transpose1d(h, w, Some(b), l.stride, l.padding, l.output_padding)?
            } else {
                g.conv1d(h, w, Some(b), l.stride, l.padding)?
            };
            if i + 1 < n {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g: Graph = Graph::new();
        let x = g.constant(z.clone());
        let y = self.graph(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}
