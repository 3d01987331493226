use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use tracing::{info, warn};

use super::config::{Schedule, TrainConfig};
use super::runlog::{monitor_kl, KlWarning, RunLog, RunRow};
use crate::error::{Error, Result};
use crate::gradcore::{AdamConfig, AdamState, Graph, ParamStore, Real, Tensor, Var};
use crate::losses::{mi_lower_bound, negative_plan, LossNodes, DEFAULT_NEGATIVES};
use crate::rng::Stream;
use crate::simnet::{ForwardNodes, Mode, Model, ModelConfig, Variant};
use crate::syllabgen::{extract_padded_syllable, Corpus, Split};

/// Random-stream coordinates of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepKeys {
    pub epoch: usize,
    pub batch: usize,
}

/// One named objective inside a step graph. Names match the optimizer
/// groups of [`Model::param_groups`].
#[derive(Clone, Debug)]
pub struct NamedLoss {
    pub name: String,
    pub nodes: LossNodes,
    /// Latent width used for the per-dimension KL.
    pub dims: usize,
}

pub struct StepGraph<R: Real = f32> {
    pub graph: Graph<R>,
    pub forward: ForwardNodes,
    pub losses: Vec<NamedLoss>,
}

impl<R: Real> StepGraph<R> {
    pub fn loss(&self, name: &str) -> Option<&NamedLoss> {
        self.losses.iter().find(|l| l.name == name)
    }

    /// Sum of the selected objectives as one scalar node.
    pub fn total(&mut self, names: &[String]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for l in self.losses.iter().filter(|l| names.contains(&l.name)) {
            acc = Some(match acc {
                None => l.nodes.total,
                Some(a) => self.graph.add(a, l.nodes.total)?,
            });
        }
        acc.ok_or_else(|| Error::InvalidArgument(format!("no loss among {names:?}")))
    }
}

/// Build the forward graph and every objective of `cfg.variant` on a
/// `[B, 1, L]` batch. Latent noise and negatives come from streams keyed by
/// `keys`, so the same keys rebuild the same graph. A non-finite loss is
/// reported as [`Error::Diverged`] naming the objective, with step 0.
pub fn build_step<R: Real>(
    cfg: &ModelConfig,
    params: &ParamStore<R>,
    wave: &Tensor<R>,
    labels: Option<&[usize]>,
    keys: StepKeys,
) -> Result<StepGraph<R>> {
    let (e, b) = (keys.epoch as u64, keys.batch as u64);
    let mut g = Graph::new();
    let x = g.constant(wave.clone());
    let net = crate::simnet::Net::new(cfg, params);
    let mut eps = Stream::derived(cfg.seed, "trainer.eps", &[e, b]);
    let greedy = cfg.variant.is_greedy();
    let fwd = net.forward(&mut g, x, Mode::Sample, &mut eps, greedy)?;
    let batch = wave.dim(0);
    let plan = |m: u64, frames: usize| -> Result<Rc<_>> {
        let mut rng = Stream::derived(cfg.seed, "trainer.neg", &[e, b, m]);
        Ok(Rc::new(negative_plan(batch, frames, cfg.k, DEFAULT_NEGATIVES, &mut rng)?))
    };
    let top_frames = fwd.modules.last().map(|n| n.frames).unwrap_or(0);
    let mut losses = Vec::new();
    match cfg.variant {
        Variant::Sim | Variant::Gim => {
            for (m, nodes) in fwd.modules.iter().enumerate() {
                let p = plan(m as u64, nodes.frames)?;
                losses.push(NamedLoss {
                    name: format!("module{}", m + 1),
                    nodes: net.module_loss(&mut g, m, nodes, p).map_err(|e| diverged(&format!("module{}", m + 1), e))?,
                    dims: cfg.channels,
                });
            }
            let p = plan(cfg.n_modules() as u64, top_frames)?;
            losses.push(NamedLoss {
                name: "ar".into(),
                nodes: net.ar_loss(&mut g, &fwd, p).map_err(|e| diverged("ar", e))?,
                dims: cfg.gru_dim,
            });
        }
        Variant::Cpc => {
            let p = plan(cfg.n_modules() as u64, top_frames)?;
            losses.push(NamedLoss {
                name: "cpc".into(),
                nodes: net.ar_loss(&mut g, &fwd, p).map_err(|e| diverged("cpc", e))?,
                dims: cfg.gru_dim,
            });
        }
        Variant::Supervised => {
            let labels = labels.ok_or_else(|| Error::InvalidArgument("supervised step needs labels".into()))?;
            let ce = net.supervised_loss(&mut g, &fwd, labels).map_err(|e| diverged("supervised", e))?;
            losses.push(NamedLoss {
                name: "supervised".into(),
                nodes: LossNodes {
                    total: ce,
                    nce: ce,
                    kl: None,
                },
                dims: cfg.gru_dim,
            });
        }
    }
    Ok(StepGraph {
        graph: g,
        forward: fwd,
        losses,
    })
}

fn diverged(module: &str, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            module: module.to_string(),
            step: 0,
            reason: format!("non-finite {what}"),
        },
        e => e,
    }
}

/// Scalar values of one objective after a step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepValue {
    pub name: String,
    pub loss: f64,
    pub kl: Option<f64>,
    pub kl_per_dim: Option<f64>,
}

#[derive(Default)]
struct Accum {
    n: usize,
    loss: f64,
    kl: f64,
    kl_dim: f64,
    has_kl: bool,
}

/// Labelled padded-syllable examples for the supervised baseline.
fn syllable_examples(corpus: &Corpus) -> Result<Vec<(Tensor, usize)>> {
    let mut out = Vec::new();
    for i in corpus.indices(Split::Train) {
        let clip = &corpus.clips[i];
        for (s, syl) in clip.syllables.iter().enumerate() {
            out.push((extract_padded_syllable(clip, s)?, syl.index()));
        }
    }
    Ok(out)
}

/// Per-group Adam training of one model.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub log: RunLog,
    pub timing: Vec<(usize, f64)>,
    groups: Vec<(String, AdamState)>,
    steps: usize,
    hash: String,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone())?;
        let adam = AdamConfig::with_lr(config.lr);
        let groups = model
            .param_groups()
            .into_iter()
            .map(|grp| Ok((grp.name, AdamState::new(adam, &model.params, grp.ids)?)))
            .collect::<Result<_>>()?;
        let hash = config.hash();
        Ok(Self {
            config,
            model,
            log: RunLog::default(),
            timing: Vec::new(),
            groups,
            steps: 0,
            hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn group_names(&self) -> Vec<String> {
        self.groups.iter().map(|(n, _)| n.clone()).collect()
    }

    /// One forward/backward pass and an Adam update of the `active` groups.
    pub fn step(&mut self, wave: &Tensor, labels: Option<&[usize]>, keys: StepKeys, active: &[String]) -> Result<Vec<StepValue>> {
        let step = self.steps;
        let mut sg = build_step(&self.model.config, &self.model.params, wave, labels, keys).map_err(|e| match e {
            Error::Diverged { module, reason, .. } => Error::Diverged { module, step, reason },
            e => e,
        })?;
        let values: Vec<StepValue> = sg
            .losses
            .iter()
            .filter(|l| active.contains(&l.name))
            .map(|l| {
                let b = l.nodes.breakdown(&sg.graph, l.dims);
                StepValue {
                    name: l.name.clone(),
                    loss: b.nce_term,
                    kl: l.nodes.kl.map(|_| b.kl_term),
                    kl_per_dim: l.nodes.kl.map(|_| b.kl_per_dim),
                }
            })
            .collect();
        let diverged = |name: &str, reason: String| Error::Diverged {
            module: name.to_string(),
            step: self.steps,
            reason,
        };
        for v in &values {
            if !v.loss.is_finite() || v.kl.is_some_and(|k| !k.is_finite()) {
                return Err(diverged(&v.name, format!("loss {} kl {:?}", v.loss, v.kl)));
            }
        }
        let total = sg.total(active)?;
        let grads = sg.graph.backward(total)?;
        self.model.params.zero_grads();
        grads
            .accumulate_into(&sg.graph, &mut self.model.params)
            .map_err(|e| diverged("gradient", e.to_string()))?;
        for (name, state) in self.groups.iter_mut().filter(|(n, _)| active.contains(n)) {
            state
                .step(&mut self.model.params)
                .map_err(|e| Error::Diverged {
                    module: name.clone(),
                    step: self.steps,
                    reason: e.to_string(),
                })?;
        }
        self.steps += 1;
        Ok(values)
    }

    /// One pass over the training split. `epoch` is 1-based and keys the
    /// batch order and every random stream.
    pub fn epoch(&mut self, corpus: &Corpus, epoch: usize, active: &[String]) -> Result<Vec<RunRow>> {
        let start = Instant::now();
        let bs = self.config.batch_size;
        let seed = self.config.model.seed;
        let mut acc: Vec<(String, Accum)> = active.iter().map(|n| (n.clone(), Accum::default())).collect();
        let mut record = |values: Vec<StepValue>| {
            for v in values {
                if let Some((_, a)) = acc.iter_mut().find(|(n, _)| *n == v.name) {
                    a.n += 1;
                    a.loss += v.loss;
                    if let (Some(k), Some(kd)) = (v.kl, v.kl_per_dim) {
                        a.has_kl = true;
                        a.kl += k;
                        a.kl_dim += kd;
                    }
                }
            }
        };
        if self.config.model.variant == Variant::Supervised {
            let examples = syllable_examples(corpus)?;
            let mut order: Vec<usize> = (0..examples.len()).collect();
            Stream::derived(seed, "trainer.supervised", &[epoch as u64]).shuffle(&mut order);
            for (b, chunk) in order.chunks_exact(bs).enumerate() {
                let wave = Tensor::stack(&chunk.iter().map(|&i| examples[i].0.clone()).collect::<Vec<_>>())?;
                let labels: Vec<usize> = chunk.iter().map(|&i| examples[i].1).collect();
                record(self.step(&wave, Some(&labels), StepKeys { epoch, batch: b }, active)?);
            }
        } else {
            for (b, idx) in corpus.batch_indices(Split::Train, bs, seed, epoch).iter().enumerate() {
                let wave = corpus.batch_tensor(idx)?;
                record(self.step(&wave, None, StepKeys { epoch, batch: b }, active)?);
            }
        }
        let mut rows = Vec::new();
        for (name, a) in acc {
            if a.n == 0 {
                return Err(Error::InvalidArgument(format!(
                    "training split has fewer than {bs} examples, no batch was formed"
                )));
            }
            let n = a.n as f64;
            let loss = a.loss / n;
            let row = RunRow {
                epoch,
                module: name,
                nce_loss: loss,
                kl: if a.has_kl { a.kl / n } else { f64::NAN },
                kl_per_dim: if a.has_kl { a.kl_dim / n } else { f64::NAN },
                mi_bound: if self.config.model.variant == Variant::Supervised {
                    f64::NAN
                } else {
                    mi_lower_bound(loss, DEFAULT_NEGATIVES + 1)
                },
                config_hash: self.hash.clone(),
            };
            info!(epoch, module = %row.module, loss = row.nce_loss, kl_per_dim = row.kl_per_dim, "epoch done");
            self.log.push(row.clone())?;
            rows.push(row);
        }
        self.timing.push((epoch, start.elapsed().as_secs_f64()));
        Ok(rows)
    }

    /// Every epoch of the schedule, then the collapse monitor.
    pub fn run(mut self, corpus: &Corpus) -> Result<TrainOutcome> {
        let names = self.group_names();
        let phases: Vec<Vec<String>> = match self.config.schedule {
            Schedule::Parallel => vec![names],
            Schedule::Sequential => names.into_iter().map(|n| vec![n]).collect(),
        };
        let mut epoch = 0;
        for active in &phases {
            for _ in 0..self.config.epochs {
                epoch += 1;
                self.epoch(corpus, epoch, active)?;
            }
        }
        let warnings = monitor_kl(&self.log, self.config.kl_collapse_threshold);
        for w in &warnings {
            warn!(module = %w.module, epoch = w.epoch, kl_per_dim = w.kl_per_dim, "posterior collapse suspected");
        }
        Ok(TrainOutcome {
            config: self.config,
            model: self.model,
            log: self.log,
            timing: self.timing,
            warnings,
        })
    }
}

pub struct TrainOutcome {
    pub config: TrainConfig,
    pub model: Model,
    pub log: RunLog,
    pub timing: Vec<(usize, f64)>,
    pub warnings: Vec<KlWarning>,
}

/// Train `config` on the training split of `corpus`.
pub fn train(config: TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    Trainer::new(config)?.run(corpus)
}

/// `{ckpt}.runlog.tsv`, `{ckpt}.timing.tsv` and `{ckpt}.cfg` sit beside a checkpoint.
pub fn sidecar(ckpt: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

impl TrainOutcome {
    pub fn timing_tsv(&self) -> String {
        let mut s = String::from("epoch\tseconds\n");
        for (e, t) in &self.timing {
            s.push_str(&format!("{e}\t{t:.3}\n"));
        }
        s
    }

    /// Checkpoint plus runlog, timing and config sidecars.
    pub fn save(&self, ckpt: &Path) -> Result<()> {
        self.model.save(ckpt)?;
        self.log.save(sidecar(ckpt, ".runlog.tsv"))?;
        let write = |p: std::path::PathBuf, text: String| std::fs::write(&p, text).map_err(|e| Error::io(p, e));
        write(sidecar(ckpt, ".timing.tsv"), self.timing_tsv())?;
        write(sidecar(ckpt, ".cfg"), self.config.to_text())
    }
}
