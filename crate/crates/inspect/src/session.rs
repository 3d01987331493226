use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock, RwLock};

use sim_core::gradcore::Tensor;
use sim_core::rng::Stream;
use sim_core::simnet::{time_major, Decoder, Mode, Model};
use sim_core::syllabgen::Corpus;
use sim_core::{Error, Result};

use crate::error::ApiError;

/// Number of dimensions in importance hints and delta previews.
pub const TOP_DIMS: usize = 32;

/// Immutable model, decoders and corpus plus a write-once encoding cache.
pub struct Session {
    pub checkpoint_id: String,
    pub model: Model,
    /// Indexed by module − 1.
    pub decoders: Vec<Option<Decoder>>,
    pub corpus: Corpus,
    data_dir: PathBuf,
    /// Mean-mode `[T, D]` latents per module, keyed by clip id.
    cache: RwLock<HashMap<String, Arc<Vec<Tensor>>>>,
    hints: Vec<OnceLock<Vec<usize>>>,
}

impl Session {
    pub fn new(checkpoint_id: String, model: Model, decoders: Vec<Decoder>, corpus: Corpus, data_dir: PathBuf) -> Result<Self> {
        let n = model.config.n_modules();
        let mut slots: Vec<Option<Decoder>> = (0..n).map(|_| None).collect();
        if decoders.is_empty() {
            return Err(Error::Config("at least one decoder is required".into()));
        }
        for d in decoders {
            let m = d.config.module;
            if m == 0 || m > n || d.config.channels != model.config.channels {
                return Err(Error::Config(format!(
                    "decoder for module {m} with {} channels does not fit the checkpoint",
                    d.config.channels
                )));
            }
            if slots[m - 1].replace(d).is_some() {
                return Err(Error::Config(format!("two decoders given for module {m}")));
            }
        }
        Ok(Self {
            checkpoint_id,
            model,
            decoders: slots,
            corpus,
            data_dir,
            cache: RwLock::new(HashMap::new()),
            hints: (0..n).map(|_| OnceLock::new()).collect(),
        })
    }

    /// Load a checkpoint, decoders and a saved corpus from disk.
    pub fn load(ckpt: &Path, decoders: &[PathBuf], data_dir: &Path) -> Result<Self> {
        let model = Model::load(ckpt)?;
        let decoders = decoders.iter().map(Decoder::load).collect::<Result<Vec<_>>>()?;
        let corpus = Corpus::load(data_dir)?;
        let id = ckpt
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(id, model, decoders, corpus, data_dir.to_path_buf())
    }

    pub fn n_modules(&self) -> usize {
        self.model.config.n_modules()
    }

    pub fn check_layer(&self, layer: usize) -> std::result::Result<(), ApiError> {
        if layer == 0 || layer > self.n_modules() {
            return Err(ApiError::invalid(
                "unknown layer",
                format!("layer {layer} outside 1..={}", self.n_modules()),
            ));
        }
        Ok(())
    }

    pub fn decoder(&self, layer: usize) -> std::result::Result<&Decoder, ApiError> {
        self.check_layer(layer)?;
        self.decoders[layer - 1].as_ref().ok_or_else(|| {
            ApiError::new(
                axum::http::StatusCode::UNPROCESSABLE_ENTITY,
                "no_decoder",
                "no decoder loaded for this layer",
                format!("layer {layer}"),
            )
        })
    }

    pub fn clip_index(&self, id: &str) -> std::result::Result<usize, ApiError> {
        self.corpus
            .clips
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| ApiError::not_found("clip", id))
    }

    fn encode_all(&self, clip: usize) -> Result<Arc<Vec<Tensor>>> {
        let id = &self.corpus.clips[clip].id;
        if let Some(hit) = self.cache.read().expect("cache lock").get(id) {
            return Ok(hit.clone());
        }
        let enc = self.model.encode_mean(&self.corpus.batch_tensor(&[clip])?)?;
        let frames = Arc::new(enc.latents.iter().map(|l| time_major(l.mean(), 0)).collect::<Vec<_>>());
        // Write-once: a concurrent duplicate computed the same values.
        let mut cache = self.cache.write().expect("cache lock");
        Ok(cache.entry(id.clone()).or_insert(frames).clone())
    }

    /// `[T, D]` latents of a clip at `layer`: the posterior mean, or a
    /// sample keyed by `(seed, clip)` when `sample` is set.
    pub fn latent(&self, clip: usize, layer: usize, sample: Option<u64>) -> std::result::Result<Tensor, ApiError> {
        self.check_layer(layer)?;
        match sample {
            None => Ok(self.encode_all(clip)?[layer - 1].clone()),
            Some(seed) => {
                let mut rng = Stream::derived(seed, "inspect.sample", &[clip as u64]);
                let enc = self
                    .model
                    .forward_full(&self.corpus.batch_tensor(&[clip])?, Mode::Sample, &mut rng)?;
                Ok(time_major(&enc.latents[layer - 1].z, 0))
            }
        }
    }

    /// The [`TOP_DIMS`] dimensions of `layer` with the largest variance of
    /// the mean latent over every clip and frame in the corpus.
    pub fn importance_hint(&self, layer: usize) -> Result<Vec<usize>> {
        if let Some(h) = self.hints[layer - 1].get() {
            return Ok(h.clone());
        }
        let d = self.model.config.channels;
        let (mut sum, mut sq, mut n) = (vec![0.0f64; d], vec![0.0f64; d], 0usize);
        for clip in 0..self.corpus.clips.len() {
            let z = &self.encode_all(clip)?[layer - 1];
            for row in z.data().chunks(d) {
                for (i, &v) in row.iter().enumerate() {
                    sum[i] += v as f64;
                    sq[i] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        let var: Vec<f64> = (0..d)
            .map(|i| {
                let m = sum[i] / n as f64;
                sq[i] / n as f64 - m * m
            })
            .collect();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
        order.truncate(TOP_DIMS);
        Ok(self.hints[layer - 1].get_or_init(|| order).clone())
    }

    /// Original WAV file bytes of a clip, read from the data directory.
    pub fn clip_wav(&self, clip: usize) -> Result<Vec<u8>> {
        let path = self.data_dir.join(self.corpus.clips[clip].filename());
        std::fs::read(&path).map_err(|e| Error::Io { path, source: e })
    }
}
