use std::fmt::Write as _;
use std::path::Path;

use tracing::{info, warn};

use super::decoder::clip_latents;
use super::latent::{decode_frames, delta_curve, interpolate, swap_counts};
use super::probe::{weight_concentration, Concentration, Layer, ProbeConfig, ProbeData, Task, HISTOGRAM_BINS};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::rng::Stream;
use crate::simnet::{time_major, Decoder, Model};
use crate::syllabgen::{write_wav, Corpus, Split};

pub const ACCURACY_HEADER: &str = "variant\ttask\tlayer\tbias\tmean_pct\tstd_pct\tseeds";
pub const GAP_HEADER: &str = "variant\tlayer\tvowel_pct\tsyllable_pct\tgap_points\tflag";
pub const CONCENTRATION_HEADER: &str = "variant\tbin\tlo\thi\tcount";
pub const CONCENTRATION_SUMMARY_HEADER: &str = "variant\tmodule\ttest_accuracy_pct\tnear_zero_fraction";
pub const DELTA_HEADER: &str = "variant\tmodule\tN\tdelta_pct\tpairs\tskipped";
pub const DECODERS_HEADER: &str = "variant\tmodule\tstatus";

/// Interpolation weights of the emitted WAV strips.
pub const STRIP_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// A vowel lead of at least this many points is flagged in `gap.tsv`.
pub const GAP_FLAG_POINTS: f64 = 10.0;

/// One backbone and whatever decoders exist for it (index = module − 1).
pub struct ReportInput {
    pub label: String,
    pub model: Model,
    pub decoders: Vec<Option<Decoder>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ReportConfig {
    pub probe_seeds: usize,
    pub probe: ProbeConfig,
    pub pairs: usize,
    pub pair_seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            probe_seeds: 3,
            probe: ProbeConfig::default(),
            pairs: 20,
            pair_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub variant: String,
    pub task: Task,
    pub layer: Layer,
    pub has_bias: bool,
    /// Test accuracy in percent, one entry per probe seed.
    pub runs: Vec<f64>,
}

impl AccuracyRow {
    pub fn mean(&self) -> f64 {
        self.runs.iter().sum::<f64>() / self.runs.len().max(1) as f64
    }

    /// Sample standard deviation.
    pub fn std(&self) -> f64 {
        let n = self.runs.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.runs.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationRow {
    pub variant: String,
    pub module: usize,
    pub test_accuracy: f64,
    pub concentration: Concentration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaRow {
    pub variant: String,
    pub module: usize,
    pub n: usize,
    /// Mean δ in percent over the pairs where it is defined.
    pub delta_pct: f64,
    pub pairs: usize,
    pub skipped: usize,
    /// Per pair, `None` where undefined.
    pub per_pair: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub accuracy: Vec<AccuracyRow>,
    pub concentration: Vec<ConcentrationRow>,
    pub delta: Vec<DeltaRow>,
    /// `(variant, module)` without a decoder.
    pub absent: Vec<(String, usize)>,
    pub pairs: Vec<(usize, usize)>,
    pub wavs: Vec<String>,
}

impl Report {
    pub fn accuracy_of(&self, variant: &str, task: Task, layer: Layer) -> Option<&AccuracyRow> {
        self.accuracy
            .iter()
            .find(|r| r.variant == variant && r.task == task && r.layer == layer && r.has_bias)
    }

    pub fn delta_of(&self, variant: &str, module: usize, n: usize) -> Option<&DeltaRow> {
        self.delta
            .iter()
            .find(|r| r.variant == variant && r.module == module && r.n == n)
    }

    pub fn concentration_of(&self, variant: &str, module: usize) -> Option<&ConcentrationRow> {
        self.concentration
            .iter()
            .find(|r| r.variant == variant && r.module == module)
    }
}

/// Test-split clip pairs with different words, drawn without repeating a
/// pair.
pub fn sample_pairs(corpus: &Corpus, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let test = corpus.indices(Split::Test);
    let mut all = Vec::new();
    for (i, &a) in test.iter().enumerate() {
        for &b in &test[i + 1..] {
            if corpus.clips[a].word() != corpus.clips[b].word() {
                all.push((a, b));
            }
        }
    }
    if all.len() < n {
        return Err(Error::InvalidArgument(format!(
            "test split offers {} cross-word pairs, {n} requested",
            all.len()
        )));
    }
    Stream::derived(seed, "probes.pairs", &[]).shuffle(&mut all);
    all.truncate(n);
    Ok(all)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Probe accuracies, weight concentration, δ tables and interpolation
/// strips for every input, written to `out_dir`.
pub fn run_report(inputs: &[ReportInput], corpus: &Corpus, out_dir: &Path, config: ReportConfig) -> Result<Report> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = Report {
        pairs: sample_pairs(corpus, config.pairs, config.pair_seed)?,
        ..Report::default()
    };
    for input in inputs {
        let label = &input.label;
        info!(variant = %label, "probing");
        let data = ProbeData::extract(&input.model, corpus)?;
        let n_mod = input.model.config.n_modules();
        let layers: Vec<Layer> = (1..=n_mod).map(Layer::Module).chain([Layer::Context]).collect();
        for task in Task::ALL {
            for &layer in &layers {
                let runs = (0..config.probe_seeds)
                    .map(|s| {
                        let cfg = ProbeConfig {
                            seed: config.probe.seed + s as u64,
                            ..config.probe
                        };
                        Ok(100.0 * data.probe(task, layer, true, cfg)?.test_accuracy)
                    })
                    .collect::<Result<Vec<_>>>()?;
                report.accuracy.push(AccuracyRow {
                    variant: label.clone(),
                    task,
                    layer,
                    has_bias: true,
                    runs,
                });
            }
        }
        for m in 1..=n_mod {
            let probe = data.probe(Task::Vowel, Layer::Module(m), false, config.probe)?;
            report.concentration.push(ConcentrationRow {
                variant: label.clone(),
                module: m,
                test_accuracy: probe.test_accuracy,
                concentration: weight_concentration(&probe.weights)?,
            });
        }
        for m in 1..=n_mod {
            let Some(decoder) = input.decoders.get(m - 1).and_then(Option::as_ref) else {
                warn!(variant = %label, module = m, "no decoder, δ and strips skipped");
                report.absent.push((label.clone(), m));
                continue;
            };
            let (rows, wavs) = delta_and_strips(&input.model, decoder, corpus, &report.pairs, label, m, out_dir)?;
            report.delta.extend(rows);
            report.wavs.extend(wavs);
        }
    }
    write_report(&report, inputs, out_dir)?;
    Ok(report)
}

/// `[T, D]` mean-mode latents of one clip at `module`.
pub fn clip_frames(model: &Model, corpus: &Corpus, clip: usize, module: usize) -> Result<Tensor> {
    let z = clip_latents(model, corpus, &[clip], module)?;
    Ok(time_major(&z[0], 0))
}

fn delta_and_strips(
    model: &Model,
    decoder: &Decoder,
    corpus: &Corpus,
    pairs: &[(usize, usize)],
    label: &str,
    module: usize,
    out_dir: &Path,
) -> Result<(Vec<DeltaRow>, Vec<String>)> {
    let ns = swap_counts(model.config.channels);
    let mut per_n: Vec<Vec<Option<f64>>> = vec![Vec::new(); ns.len()];
    for (p, &(a, b)) in pairs.iter().enumerate() {
        let za = clip_frames(model, corpus, a, module)?;
        let zb = clip_frames(model, corpus, b, module)?;
        for (i, d) in delta_curve(decoder, &za, &zb, &ns)?.into_iter().enumerate() {
            if d.is_none() {
                warn!(variant = label, module, pair = p, n = ns[i], "δ undefined, zero denominator");
            }
            per_n[i].push(d);
        }
    }
    let rows = ns
        .iter()
        .zip(per_n)
        .map(|(&n, per_pair)| {
            let defined: Vec<f64> = per_pair.iter().flatten().copied().collect();
            DeltaRow {
                variant: label.to_string(),
                module,
                n,
                delta_pct: if defined.is_empty() {
                    f64::NAN
                } else {
                    100.0 * defined.iter().sum::<f64>() / defined.len() as f64
                },
                pairs: defined.len(),
                skipped: per_pair.len() - defined.len(),
                per_pair,
            }
        })
        .collect();
    let mut wavs = Vec::new();
    if let Some(&(a, b)) = pairs.first() {
        let za = clip_frames(model, corpus, a, module)?;
        let zb = clip_frames(model, corpus, b, module)?;
        let pair = format!("{label}-m{module}-{}-{}", corpus.clips[a].word(), corpus.clips[b].word());
        for alpha in STRIP_ALPHAS {
            let wave = decode_frames(decoder, &interpolate(&za, &zb, alpha)?)?;
            let name = format!("interp_{pair}_{alpha}.wav");
            write_wav(out_dir.join(&name), wave.data())?;
            wavs.push(name);
        }
    }
    Ok((rows, wavs))
}

fn write_report(report: &Report, inputs: &[ReportInput], out_dir: &Path) -> Result<()> {
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    let mut acc = format!("{ACCURACY_HEADER}\n");
    for r in &report.accuracy {
        writeln!(
            acc,
            "{}\t{}\t{}\t{}\t{:.2}\t{:.2}\t{}",
            r.variant,
            r.task,
            r.layer,
            r.has_bias,
            r.mean(),
            r.std(),
            r.runs.len()
        )
        .expect("write to String");
    }
    write("accuracy.tsv", acc)?;

    let mut gap = format!("{GAP_HEADER}\n");
    for input in inputs {
        let n_mod = input.model.config.n_modules();
        for layer in (1..=n_mod).map(Layer::Module).chain([Layer::Context]) {
            let (Some(v), Some(s)) = (
                report.accuracy_of(&input.label, Task::Vowel, layer),
                report.accuracy_of(&input.label, Task::Syllable, layer),
            ) else {
                continue;
            };
            let g = v.mean() - s.mean();
            let flag = if g >= GAP_FLAG_POINTS { "vowel>>syllable" } else { "-" };
            writeln!(gap, "{}\t{layer}\t{:.2}\t{:.2}\t{g:.2}\t{flag}", input.label, v.mean(), s.mean())
                .expect("write to String");
        }
    }
    write("gap.tsv", gap)?;

    let modules: Vec<usize> = {
        let mut m: Vec<usize> = report.concentration.iter().map(|r| r.module).collect();
        m.sort_unstable();
        m.dedup();
        m
    };
    for m in modules {
        let mut t = format!("{CONCENTRATION_HEADER}\n");
        for r in report.concentration.iter().filter(|r| r.module == m) {
            for (bin, count) in r.concentration.histogram.iter().enumerate() {
                let lo = bin as f64 / HISTOGRAM_BINS as f64;
                let hi = (bin + 1) as f64 / HISTOGRAM_BINS as f64;
                writeln!(t, "{}\t{bin}\t{lo:.2}\t{hi:.2}\t{count}", r.variant).expect("write to String");
            }
        }
        write(&format!("concentration_module{m}.tsv"), t)?;
    }
    let mut summary = format!("{CONCENTRATION_SUMMARY_HEADER}\n");
    for r in &report.concentration {
        writeln!(
            summary,
            "{}\t{}\t{}\t{:.4}",
            r.variant,
            r.module,
            pct(r.test_accuracy),
            r.concentration.near_zero_fraction
        )
        .expect("write to String");
    }
    write("concentration_summary.tsv", summary)?;

    let mut delta = format!("{DELTA_HEADER}\n");
    for r in &report.delta {
        writeln!(
            delta,
            "{}\t{}\t{}\t{:.2}\t{}\t{}",
            r.variant, r.module, r.n, r.delta_pct, r.pairs, r.skipped
        )
        .expect("write to String");
    }
    write("delta.tsv", delta)?;

    let mut dec = format!("{DECODERS_HEADER}\n");
    for input in inputs {
        for m in 1..=input.model.config.n_modules() {
            let status = if report.absent.contains(&(input.label.clone(), m)) {
                "absent"
            } else {
                "present"
            };
            writeln!(dec, "{}\t{m}\t{status}", input.label).expect("write to String");
        }
    }
    write("decoders.tsv", dec)
}
