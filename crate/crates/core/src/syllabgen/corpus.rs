use std::fmt::Write as _;
use std::path::Path;

use super::synth::{synthesize, Syllable, Vowel, SAMPLE_RATE};
use super::wav::{read_wav, write_wav};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::rng::Stream;

pub const CLIP_LEN: usize = 10_240;
pub const SYLLABLES_PER_CLIP: usize = 3;
pub const DEFAULT_CLIPS: usize = 851;

const MIN_SYLLABLE_MS: f64 = 150.0;
const MAX_SYLLABLE_MS: f64 = 205.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub samples: Vec<f32>,
    pub syllables: [Syllable; SYLLABLES_PER_CLIP],
    /// `(start, len)` of each syllable in `samples`.
    pub bounds: [(usize, usize); SYLLABLES_PER_CLIP],
    pub split: Split,
}

impl Clip {
    /// Hyphen-joined syllables, e.g. `ba-gi-du`.
    pub fn word(&self) -> String {
        self.syllables.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-")
    }

    pub fn vowels(&self) -> [Vowel; SYLLABLES_PER_CLIP] {
        self.syllables.map(|s| s.vowel)
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.samples.len()], self.samples.clone()).expect("clip samples are non-empty")
    }

    pub fn filename(&self) -> String {
        format!("{}.wav", self.id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub clips: Vec<Clip>,
    pub seed: u64,
}

/// `n_files` three-syllable words, each cropped or padded to 10240 samples.
/// All clips start in the train split; see [`split_corpus`].
pub fn generate_corpus(n_files: usize, seed: u64) -> Result<Corpus> {
    if n_files < 10 {
        return Err(Error::InvalidArgument(format!("corpus needs at least 10 files, got {n_files}")));
    }
    let clips = (0..n_files)
        .map(|i| generate_clip(i, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { clips, seed })
}

fn generate_clip(i: usize, seed: u64) -> Result<Clip> {
    let mut rng = Stream::derived(seed, "syllabgen.clip", &[i as u64]);
    let syllables: [Syllable; SYLLABLES_PER_CLIP] =
        std::array::from_fn(|_| Syllable::from_index(rng.below(9)).expect("index below 9"));
    let mut parts = Vec::with_capacity(SYLLABLES_PER_CLIP);
    for syl in syllables {
        let dur = rng.uniform_range(MIN_SYLLABLE_MS, MAX_SYLLABLE_MS);
        parts.push(synthesize(syl, dur, &mut rng)?.into_data());
    }
    let used: usize = parts.iter().map(Vec::len).sum();
    let slack = CLIP_LEN.saturating_sub(used);
    let mut pos = rng.below(slack + 1);
    let mut samples = vec![0.0f32; CLIP_LEN];
    let mut bounds = [(0, 0); SYLLABLES_PER_CLIP];
    for (b, part) in bounds.iter_mut().zip(&parts) {
        let len = part.len().min(CLIP_LEN - pos);
        samples[pos..pos + len].copy_from_slice(&part[..len]);
        *b = (pos, len);
        pos += len;
    }
    Ok(Clip {
        id: format!("clip{i:04}"),
        samples,
        syllables,
        bounds,
        split: Split::Train,
    })
}

/// Shuffle with `seed`; the first `⌊ratio·n⌋` clips become train, the rest test.
pub fn split_corpus(corpus: &mut Corpus, ratio: f64, seed: u64) {
    let n = corpus.clips.len();
    let mut order: Vec<usize> = (0..n).collect();
    Stream::derived(seed, "syllabgen.split", &[]).shuffle(&mut order);
    let n_train = (ratio * n as f64).floor() as usize;
    for (rank, &i) in order.iter().enumerate() {
        corpus.clips[i].split = if rank < n_train { Split::Train } else { Split::Test };
    }
}

/// Centre `samples` in `target` zeros: `⌊pad/2⌋` in front, the rest behind.
pub fn pad_center(samples: &[f32], target: usize) -> Result<Vec<f32>> {
    if samples.len() > target {
        return Err(Error::InvalidArgument(format!(
            "{} samples do not fit in {target}",
            samples.len()
        )));
    }
    let front = (target - samples.len()) / 2;
    let mut out = vec![0.0; target];
    out[front..front + samples.len()].copy_from_slice(samples);
    Ok(out)
}

pub fn extract_padded_syllable(clip: &Clip, index: usize) -> Result<Tensor> {
    let &(start, len) = clip.bounds.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!("syllable index {index} out of range 0..{SYLLABLES_PER_CLIP}"))
    })?;
    let data = pad_center(&clip.samples[start..start + len], CLIP_LEN)?;
    Tensor::new(vec![1, CLIP_LEN], data)
}

impl Corpus {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.clips.len()).filter(|&i| self.clips[i].split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Clip> {
        self.clips.iter().find(|c| c.id == id)
    }

    /// Clip indices of each batch for one epoch. Order is keyed by
    /// `(seed, epoch)`; a trailing partial batch is dropped.
    pub fn batch_indices(&self, split: Split, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
        let mut idx = self.indices(split);
        Stream::derived(seed, "syllabgen.batch", &[epoch as u64]).shuffle(&mut idx);
        idx.chunks_exact(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Stack clips into `[B, 1, 10240]`.
    pub fn batch_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * CLIP_LEN);
        for &i in indices {
            data.extend_from_slice(&self.clips[i].samples);
        }
        Tensor::new(vec![indices.len(), 1, CLIP_LEN], data)
    }

    pub fn batch_iter(
        &self,
        split: Split,
        batch_size: usize,
        seed: u64,
        epoch: usize,
    ) -> impl Iterator<Item = Result<Tensor>> + '_ {
        self.batch_indices(split, batch_size, seed, epoch)
            .into_iter()
            .map(move |b| self.batch_tensor(&b))
    }

    /// WAV files plus `manifest.tsv`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for clip in &self.clips {
            write_wav(dir.join(clip.filename()), &clip.samples)?;
            let syl: Vec<String> = clip.syllables.iter().map(|s| s.to_string()).collect();
            let vow: String = clip.vowels().iter().map(|v| v.letter()).collect();
            let bounds: Vec<String> = clip.bounds.iter().map(|(s, l)| format!("{s}:{l}")).collect();
            writeln!(
                manifest,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                clip.id,
                clip.filename(),
                clip.word(),
                syl.join(","),
                vow,
                clip.split.as_str(),
                bounds.join(",")
            )
            .expect("write to String");
        }
        let path = dir.join(MANIFEST);
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        std::fs::write(dir.join(SEED_FILE), self.seed.to_string()).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Corpus> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut clips = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::InvalidArgument(format!("manifest line {}: {what}", n + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(bad("expected 7 columns"));
            }
            let syllables: Vec<Syllable> = cols[3].split(',').map(str::parse).collect::<Result<_>>()?;
            let syllables: [Syllable; 3] = syllables.try_into().map_err(|_| bad("expected 3 syllables"))?;
            let bounds: Vec<(usize, usize)> = cols[6]
                .split(',')
                .map(|b| {
                    let (s, l) = b.split_once(':')?;
                    Some((s.parse().ok()?, l.parse().ok()?))
                })
                .collect::<Option<_>>()
                .ok_or_else(|| bad("malformed bounds"))?;
            let bounds: [(usize, usize); 3] = bounds.try_into().map_err(|_| bad("expected 3 bounds"))?;
            let samples = read_wav(dir.join(cols[1]))?;
            if bounds.iter().any(|&(s, l)| s + l > samples.len()) {
                return Err(bad("bounds exceed clip length"));
            }
            clips.push(Clip {
                id: cols[0].to_string(),
                samples,
                syllables,
                bounds,
                split: Split::parse(cols[5])?,
            });
        }
        let seed = std::fs::read_to_string(dir.join(SEED_FILE))
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or(0);
        Ok(Corpus { clips, seed })
    }
}

pub const MANIFEST: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "id\tfilename\tword\tsyllables\tvowels\tsplit\tbounds";
const SEED_FILE: &str = "seed.txt";

/// Duration in seconds of `n` samples.
pub fn seconds(n: usize) -> f64 {
    n as f64 / SAMPLE_RATE as f64
}
