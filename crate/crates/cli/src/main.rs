use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tracing::{info, warn};

use sim_core::probes::{
    run_report, train_decoder, DecoderTrainConfig, Layer, ProbeConfig, ProbeData, ReportConfig, ReportInput, Task,
};
use sim_core::simnet::{Decoder, Model, Variant};
use sim_core::syllabgen::{generate_corpus, split_corpus, Corpus, DEFAULT_CLIPS};
use sim_core::trainer::{sidecar, train, TrainConfig};

#[derive(Parser)]
#[command(name = "sim", about = "Greedy contrastive speech representations with Gaussian latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a syllable corpus as WAV files plus a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CLIPS)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
    },
    /// Train an encoder and write a checkpoint with runlog sidecars.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "sim")]
        variant: Variant,
        /// Desk-scale defaults: 64 channels, 64-unit GRU, 60 epochs.
        #[arg(long)]
        reduced: bool,
    },
    /// Train a linear probe on frozen features and print its accuracy.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        layer: Layer,
        #[arg(long)]
        no_bias: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a mirror decoder for one module; saved as CKPT.dec{N} unless --out is given.
    DecodeTrain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Desk-scale schedule (60 epochs, batch 8).
        #[arg(long)]
        reduced: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Probe accuracies, weight concentration, δ tables and interpolation strips.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 20)]
        pairs: usize,
    },
    /// Serve the latent-space inspection API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        decoders: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8787")]
        bind: SocketAddr,
    },
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn decoder_path(ckpt: &Path, module: usize) -> PathBuf {
    sidecar(ckpt, &format!(".dec{module}"))
}

fn label(ckpt: &Path) -> String {
    ckpt.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| ckpt.display().to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, n, seed, ratio } => {
            let mut corpus = generate_corpus(n, seed)?;
            split_corpus(&mut corpus, ratio, seed);
            corpus.save(&out)?;
            println!("wrote {n} clips to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            variant,
            reduced,
        } => {
            let mut cfg = if reduced {
                TrainConfig::reduced(variant)
            } else {
                TrainConfig::full(variant)
            };
            if let Some(path) = config {
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                cfg = cfg.apply(&text)?;
            }
            let corpus = load_corpus(&data)?;
            info!(hash = %cfg.hash(), variant = %cfg.model.variant, epochs = cfg.epochs, "training");
            let outcome = train(cfg, &corpus)?;
            outcome.save(&out)?;
            for w in &outcome.warnings {
                println!(
                    "warning: {} mean per-dim KL {:.2e} below threshold for 5 epochs (epoch {})",
                    w.module, w.kl_per_dim, w.epoch
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Probe {
            ckpt,
            data,
            task,
            layer,
            no_bias,
            seed,
        } => {
            let model = load_model(&ckpt)?;
            let corpus = load_corpus(&data)?;
            let feats = ProbeData::extract(&model, &corpus)?;
            let r = feats.probe(task, layer, !no_bias, ProbeConfig { seed, ..Default::default() })?;
            println!(
                "{task} probe on layer {layer}: train {:.2}% test {:.2}%",
                100.0 * r.train_accuracy,
                100.0 * r.test_accuracy
            );
        }
        Command::DecodeTrain {
            ckpt,
            data,
            layer,
            out,
            reduced,
            epochs,
        } => {
            let model = load_model(&ckpt)?;
            let corpus = load_corpus(&data)?;
            let mut cfg = if reduced {
                DecoderTrainConfig::reduced()
            } else {
                DecoderTrainConfig::default()
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let outcome = train_decoder(&model, layer, &corpus, cfg)?;
            let out = out.unwrap_or_else(|| decoder_path(&ckpt, layer));
            outcome.decoder.save(&out)?;
            println!(
                "decoder for module {layer}: final MSE {:.6}, wrote {}",
                outcome.losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Report {
            ckpts,
            data,
            out,
            seeds,
            pairs,
        } => {
            if seeds == 0 {
                bail!("--seeds must be positive");
            }
            let corpus = load_corpus(&data)?;
            let mut inputs = Vec::new();
            for ckpt in &ckpts {
                let model = load_model(ckpt)?;
                let decoders = (1..=model.config.n_modules())
                    .map(|m| {
                        let p = decoder_path(ckpt, m);
                        if p.exists() {
                            Decoder::load(&p).map(Some).with_context(|| format!("loading {}", p.display()))
                        } else {
                            warn!(path = %p.display(), "decoder absent");
                            Ok(None)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                inputs.push(ReportInput {
                    label: label(ckpt),
                    model,
                    decoders,
                });
            }
            let cfg = ReportConfig {
                probe_seeds: seeds,
                pairs,
                ..Default::default()
            };
            let report = run_report(&inputs, &corpus, &out, cfg)?;
            for r in &report.accuracy {
                println!(
                    "{}\t{}\tlayer {}\t{:.2} ± {:.2}",
                    r.variant,
                    r.task,
                    r.layer,
                    r.mean(),
                    r.std()
                );
            }
            println!("report written to {}", out.display());
        }
        Command::Serve {
            ckpt,
            decoders,
            data,
            bind,
        } => {
            let session = sim_inspect::Session::load(&ckpt, &decoders, &data)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(sim_inspect::serve(session, bind))
                .with_context(|| format!("serving on {bind}"))?;
        }
    }
    Ok(())
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
