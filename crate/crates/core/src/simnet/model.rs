use std::rc::Rc;

use super::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::gradcore::{ContrastivePlan, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::losses::{nce_node, smooth_nce_node, LossNodes};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// `z = μ + σ ⊙ ε` with fresh `ε ~ N(0, I)`.
    Sample,
    /// `z = μ`.
    Mean,
}

/// Per-module latents in conv layout `[B, D, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFrames {
    /// 1-based module index.
    pub module: usize,
    pub z: Tensor,
    pub mu: Option<Tensor>,
    pub sigma: Option<Tensor>,
}

impl LatentFrames {
    pub fn batch(&self) -> usize {
        self.z.dim(0)
    }

    pub fn dims(&self) -> usize {
        self.z.dim(1)
    }

    pub fn frames(&self) -> usize {
        self.z.dim(2)
    }

    /// Mean latent if present, else `z`.
    pub fn mean(&self) -> &Tensor {
        self.mu.as_ref().unwrap_or(&self.z)
    }
}

/// `[T, D]` view of batch element `b` of a `[B, D, T]` tensor.
pub fn time_major(x: &Tensor, b: usize) -> Tensor {
    x.index0(b).transpose_last2()
}

/// `[1, D, T]` from a `[T, D]` tensor.
pub fn channel_major(x: &Tensor) -> Result<Tensor> {
    let (t, d) = (x.dim(0), x.dim(1));
    x.transpose_last2().reshape(&[1, d, t])
}

/// A named set of parameters updated by one optimizer.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub ids: Vec<ParamId>,
}

pub fn module_prefix(m: usize) -> String {
    format!("module{}.", m + 1)
}

pub const AR_PREFIX: &str = "ar.";
pub const CLASSIFIER_PREFIX: &str = "classifier.";

/// Parameter names and shapes in creation order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let c = cfg.channels;
    let h = cfg.gru_dim;
    let mut out = Vec::new();
    for (m, convs) in cfg.modules.iter().enumerate() {
        let p = module_prefix(m);
        let mut c_in = cfg.module_input_channels(m);
        for (i, spec) in convs.iter().enumerate() {
            out.push((format!("{p}conv{i}.weight"), vec![c, c_in, spec.kernel], c_in * spec.kernel));
            out.push((format!("{p}conv{i}.bias"), vec![c], 0));
            c_in = c;
        }
        let heads: &[&str] = if cfg.variant.is_stochastic() { &["mu", "logvar"] } else { &["head"] };
        for head in heads {
            out.push((format!("{p}{head}.weight"), vec![c, c, 1], c));
            out.push((format!("{p}{head}.bias"), vec![c], 0));
        }
        if cfg.variant.is_greedy() {
            for k in 1..=cfg.k {
                out.push((format!("{p}score.k{k}"), vec![c, c], c));
            }
        }
    }
    // GRU weights follow the common U(±1/√H) convention, biases included.
    out.push((format!("{AR_PREFIX}w_ih"), vec![3 * h, c], h));
    out.push((format!("{AR_PREFIX}w_hh"), vec![3 * h, h], h));
    out.push((format!("{AR_PREFIX}b_ih"), vec![3 * h], h));
    out.push((format!("{AR_PREFIX}b_hh"), vec![3 * h], h));
    if cfg.variant != Variant::Supervised {
        for k in 1..=cfg.k {
            out.push((format!("{AR_PREFIX}score.k{k}"), vec![c, h], h));
        }
    } else {
        out.push((format!("{CLASSIFIER_PREFIX}weight"), vec![cfg.classes, h], h));
        out.push((format!("{CLASSIFIER_PREFIX}bias"), vec![cfg.classes], 0));
    }
    out
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Graph handles of one module's outputs, all `[B, D, T]`.
#[derive(Clone, Copy, Debug)]
pub struct ModuleNodes {
    pub z: Var,
    pub mu: Option<Var>,
    pub sigma: Option<Var>,
    pub batch: usize,
    pub frames: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub modules: Vec<ModuleNodes>,
    /// `[B, T, D]` latents consumed by the GRU.
    pub ar_input: Var,
    /// `[B, T, H]`.
    pub context: Var,
}

/// Read-only view of a configuration and a parameter store of any width,
/// used to build computation graphs.
pub struct Net<'a, R: Real = f32> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore<R>,
}

impl<'a, R: Real> Net<'a, R> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore<R>) -> Self {
        Self { cfg, params }
    }

    fn p(&self, g: &mut Graph<R>, name: &str) -> Result<Var> {
        g.param_named(self.params, name)
    }

    fn scores(&self, g: &mut Graph<R>, prefix: &str) -> Result<Vec<Var>> {
        (1..=self.cfg.k).map(|k| self.p(g, &format!("{prefix}score.k{k}"))).collect()
    }

    /// Module `m` (0-based) on `input [B, C_in, L]`.
    pub fn module(&self, g: &mut Graph<R>, m: usize, input: Var, mode: Mode, rng: &mut Stream) -> Result<ModuleNodes> {
        let cfg = self.cfg;
        let specs = cfg
            .modules
            .get(m)
            .ok_or_else(|| Error::InvalidArgument(format!("model has no module {}", m + 1)))?;
        let expect = cfg.module_input_channels(m);
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 3 || shape[1] != expect {
            return Err(Error::shape(
                "encode_module",
                format!("module {} expects [B, {expect}, L] input, got {shape:?}", m + 1),
            ));
        }
        let p = module_prefix(m);
        let mut h = input;
        for (i, spec) in specs.iter().enumerate() {
            let w = self.p(g, &format!("{p}conv{i}.weight"))?;
            let b = self.p(g, &format!("{p}conv{i}.bias"))?;
            let y = g.conv1d(h, w, Some(b), spec.stride, spec.padding)?;
            h = g.relu(y);
        }
        let (batch, frames) = (g.value(h).dim(0), g.value(h).dim(2));
        if !cfg.variant.is_stochastic() {
            let w = self.p(g, &format!("{p}head.weight"))?;
            let b = self.p(g, &format!("{p}head.bias"))?;
            let z = g.conv1d(h, w, Some(b), 1, 0)?;
            return Ok(ModuleNodes {
                z,
                mu: None,
                sigma: None,
                batch,
                frames,
            });
        }
        let (wm, bm) = (self.p(g, &format!("{p}mu.weight"))?, self.p(g, &format!("{p}mu.bias"))?);
        let (wl, bl) = (self.p(g, &format!("{p}logvar.weight"))?, self.p(g, &format!("{p}logvar.bias"))?);
        let mu = g.conv1d(h, wm, Some(bm), 1, 0)?;
        let logvar = g.conv1d(h, wl, Some(bl), 1, 0)?;
        let half = g.scale(logvar, R::of(0.5));
        let sigma = g.exp(half).map_err(|e| Error::Diverged {
            module: format!("module{}", m + 1),
            step: 0,
            reason: format!("sigma overflow: {e}"),
        })?;
        let z = match mode {
            Mode::Mean => mu,
            Mode::Sample => {
                let shape = g.value(mu).shape().to_vec();
                let eps = g.constant(Tensor::from_fn(&shape, |_| R::of(rng.normal() as f64)));
                let noise = g.mul(sigma, eps)?;
                g.add(mu, noise)?
            }
        };
        Ok(ModuleNodes {
            z,
            mu: Some(mu),
            sigma: Some(sigma),
            batch,
            frames,
        })
    }

    /// Every module, then the GRU. With `barrier` each module sees its
    /// input as a constant, so no gradient crosses a module boundary.
    pub fn forward(&self, g: &mut Graph<R>, x: Var, mode: Mode, rng: &mut Stream, barrier: bool) -> Result<ForwardNodes> {
        let len = g.value(x).shape().last().copied().unwrap_or(0);
        if self.cfg.module_frames(len).is_none() {
            return Err(Error::InvalidArgument(format!(
                "input of {len} samples is too short for the encoder (need at least {})",
                self.cfg.downsampling()
            )));
        }
        let mut modules = Vec::with_capacity(self.cfg.n_modules());
        let mut cur = x;
        for m in 0..self.cfg.n_modules() {
            let input = if barrier && m > 0 { detach(g, cur) } else { cur };
            let nodes = self.module(g, m, input, mode, rng)?;
            cur = nodes.z;
            modules.push(nodes);
        }
        let top = if barrier { detach(g, cur) } else { cur };
        let ar_input = g.transpose_last2(top);
        let context = self.ar(g, ar_input)?;
        Ok(ForwardNodes {
            modules,
            ar_input,
            context,
        })
    }

    /// GRU over `[B, T, D]` from a zero initial state.
    pub fn ar(&self, g: &mut Graph<R>, input: Var) -> Result<Var> {
        let batch = g.value(input).dim(0);
        let h0 = g.constant(Tensor::zeros(&[batch, self.cfg.gru_dim]));
        let w_ih = self.p(g, &format!("{AR_PREFIX}w_ih"))?;
        let w_hh = self.p(g, &format!("{AR_PREFIX}w_hh"))?;
        let b_ih = self.p(g, &format!("{AR_PREFIX}b_ih"))?;
        let b_hh = self.p(g, &format!("{AR_PREFIX}b_hh"))?;
        g.gru(input, h0, w_ih, w_hh, b_ih, b_hh)
    }

    /// InfoNCE (GIM) or Smooth-InfoNCE (SIM) of module `m` on its own outputs.
    pub fn module_loss(&self, g: &mut Graph<R>, m: usize, nodes: &ModuleNodes, plan: Rc<ContrastivePlan>) -> Result<LossNodes> {
        let wks = self.scores(g, &module_prefix(m))?;
        let z = g.transpose_last2(nodes.z);
        match (nodes.mu, nodes.sigma) {
            (Some(mu), Some(sigma)) => smooth_nce_node(g, z, mu, sigma, nodes.batch * nodes.frames, &wks, plan, self.cfg.beta),
            _ => nce_node(g, z, z, &wks, plan),
        }
    }

    /// InfoNCE scoring top-module latents `z_{t+k}` against context `c_t`.
    pub fn ar_loss(&self, g: &mut Graph<R>, fwd: &ForwardNodes, plan: Rc<ContrastivePlan>) -> Result<LossNodes> {
        let wks = self.scores(g, AR_PREFIX)?;
        nce_node(g, fwd.ar_input, fwd.context, &wks, plan)
    }

    /// Cross-entropy of the classifier on the time-averaged context.
    pub fn supervised_loss(&self, g: &mut Graph<R>, fwd: &ForwardNodes, labels: &[usize]) -> Result<Var> {
        let pooled = g.mean_time(fwd.context)?;
        let w = self.p(g, &format!("{CLASSIFIER_PREFIX}weight"))?;
        let b = self.p(g, &format!("{CLASSIFIER_PREFIX}bias"))?;
        let logits = g.linear(pooled, w, Some(b))?;
        g.cross_entropy(logits, labels)
    }
}

fn detach<R: Real>(g: &mut Graph<R>, v: Var) -> Var {
    let t = g.value(v).clone();
    g.constant(t)
}

/// Value-level outputs of a full forward pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub latents: Vec<LatentFrames>,
    /// `[B, T, H]`.
    pub context: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Stream::derived(config.seed, "simnet.init", &[]);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in parameter_layout(&config) {
            if fan_in == 0 {
                params.add_zeros(name, &shape)?;
            } else {
                params.add_uniform(name, &shape, fan_in, &mut rng)?;
            }
        }
        Ok(Self { config, params })
    }

    pub fn net(&self) -> Net<'_> {
        Net::new(&self.config, &self.params)
    }

    /// Optimizer groups: one per module plus the GRU for greedy variants,
    /// a single group otherwise.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        if self.config.variant.is_greedy() {
            let mut groups: Vec<ParamGroup> = (0..self.config.n_modules())
                .map(|m| ParamGroup {
                    name: format!("module{}", m + 1),
                    ids: self.params.ids_with_prefix(&module_prefix(m)),
                })
                .collect();
            groups.push(ParamGroup {
                name: "ar".into(),
                ids: self.params.ids_with_prefix(AR_PREFIX),
            });
            groups
        } else {
            vec![ParamGroup {
                name: self.config.variant.as_str().into(),
                ids: self.params.ids().collect(),
            }]
        }
    }

    fn latents(&self, g: &Graph, m: usize, n: &ModuleNodes) -> LatentFrames {
        LatentFrames {
            module: m + 1,
            z: g.value(n.z).clone(),
            mu: n.mu.map(|v| g.value(v).clone()),
            sigma: n.sigma.map(|v| g.value(v).clone()),
        }
    }

    /// Module `m` (0-based) on `[B, C_in, L]`.
    pub fn encode_module(&self, m: usize, input: &Tensor, mode: Mode, rng: &mut Stream) -> Result<LatentFrames> {
        let mut g: Graph = Graph::new();
        let x = g.constant(input.clone());
        let nodes = self.net().module(&mut g, m, x, mode, rng)?;
        Ok(self.latents(&g, m, &nodes))
    }

    /// All modules and the GRU on `[B, 1, L]`.
    pub fn forward_full(&self, wave: &Tensor, mode: Mode, rng: &mut Stream) -> Result<Encoded> {
        let mut g: Graph = Graph::new();
        if wave.rank() != 3 || wave.dim(1) != 1 {
            return Err(Error::shape("forward_full", format!("expected [B, 1, L], got {:?}", wave.shape())));
        }
        let x = g.constant(wave.clone());
        let fwd = self.net().forward(&mut g, x, mode, rng, false)?;
        Ok(Encoded {
            latents: fwd.modules.iter().enumerate().map(|(m, n)| self.latents(&g, m, n)).collect(),
            context: g.value(fwd.context).clone(),
        })
    }

    /// Mean-mode forward pass with no randomness.
    pub fn encode_mean(&self, wave: &Tensor) -> Result<Encoded> {
        self.forward_full(wave, Mode::Mean, &mut Stream::new(0, 0))
    }
}
