use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use t2sd_core::config::{RunConfig, TranslatorKind};
use t2sd_core::metrics::{evaluate_dataset, EvalReport, FileBacked, SyntheticOracle, Translator};
use t2sd_core::persistence::{read_manifest, write_atomic};
use t2sd_core::pipeline::{self, Prompt};
use t2sd_core::pose::{generate_synthetic, load_dataset, write_dataset, Dataset, DatasetHeader, GrammarConfig};
use t2sd_core::train::TrainLog;
use t2sd_core::Error;

use crate::render::render_dataset;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "t2sd", version, about = "Text-to-sign-pose latent diffusion: synthetic data, training, generation and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic text/pose dataset.
    SynthData {
        /// Grammar JSON; defaults to the built-in 8-word grammar.
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pose VAE.
    TrainVae {
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Train the pose/text aligner on a frozen VAE.
    TrainAligner {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, required = true)]
        vae: PathBuf,
    },
    /// Train the latent denoiser on a frozen VAE and aligner.
    TrainDiffusion {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, required = true)]
        vae: PathBuf,
        #[arg(long, required = true)]
        aligner: PathBuf,
    },
    /// Generate pose sequences for sentences.
    Generate {
        /// Sentence to sign; repeat for several.
        #[arg(long, required_unless_present = "data", conflicts_with = "data")]
        text: Vec<String>,
        /// Dataset whose sentences are used as prompts.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use at most this many prompts from --data.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, required = true)]
        vae: PathBuf,
        #[arg(long, required = true)]
        diffusion: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// End-of-Sign threshold; defaults to the run config's.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated sequences against references.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum, default_value_t = TranslatorArg::Oracle)]
        translator: TranslatorArg,
        /// Translations for `--translator file`: a dataset or `{id, text}` lines.
        #[arg(long, required_if_eq("translator", "file"))]
        translations: Option<PathBuf>,
        /// Grammar JSON for the oracle; defaults to the built-in grammar.
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export stick-figure SVGs.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        frame_step: u64,
        #[arg(long, default_value_t = t2sd_core::pose::DEFAULT_EOS_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print a checkpoint manifest.
    Inspect { checkpoint: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TranslatorArg {
    Oracle,
    File,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run config JSON; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Training dataset; defaults to `data.path` of the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::Diverged { .. } => EXIT_NUMERICAL,
            Error::Invalid(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure { code, error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        match error.downcast_ref::<Error>() {
            Some(Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::Diverged { .. }) => {
                Failure { code: EXIT_NUMERICAL, error }
            }
            Some(Error::Invalid(_)) => Failure { code: EXIT_USAGE, error },
            _ => Failure { code: EXIT_DATA, error },
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, error: anyhow!(msg.into()) }
}

fn threads() -> std::result::Result<usize, Failure> {
    match std::env::var("T2SD_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("T2SD_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::SynthData { grammar, n, seed, out } => synth_data(grammar.as_deref(), n, seed, &out),
        Command::TrainVae { common } => train(Stage::Vae, &common, None, None),
        Command::TrainAligner { common, vae } => train(Stage::Aligner, &common, Some(&vae), None),
        Command::TrainDiffusion { common, vae, aligner } => train(Stage::Diffusion, &common, Some(&vae), Some(&aligner)),
        Command::Generate { text, data, count, vae, diffusion, seed, threshold, out } => {
            generate(&text, data.as_deref(), count, &vae, &diffusion, seed, threshold, &out)
        }
        Command::Evaluate { generated, reference, translator, translations, grammar, out } => {
            evaluate(&generated, &reference, translator, translations.as_deref(), grammar.as_deref(), &out)
        }
        Command::Render { input, frame_step, threshold, out_dir } => {
            let data = load_dataset(&input)?;
            let written = render_dataset(&data, frame_step as usize, threshold, &out_dir)?;
            println!("wrote {written} frames to {}", out_dir.display());
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            let m = read_manifest(&checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&m).map_err(Error::from)?);
            Ok(())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_owned(), line: e.line(), msg: e.to_string() }.into())
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

/// Sidecar holding the effective config next to an output file.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn synth_data(grammar: Option<&Path>, n: usize, seed: u64, out: &Path) -> Outcome {
    let cfg: GrammarConfig = match grammar {
        Some(p) => read_json(p)?,
        None => GrammarConfig::default(),
    };
    let g = cfg.build()?;
    let pairs = generate_synthetic(&g, n, seed)?;
    write_dataset(out, &DatasetHeader::new(g.dims()), &pairs).with_context(|| format!("writing {}", out.display()))?;
    write_json(&sidecar(out, ".meta.json"), &json!({ "command": "synth-data", "grammar": cfg, "n": n, "seed": seed }))?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Vae,
    Aligner,
    Diffusion,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Vae => "train-vae",
            Stage::Aligner => "train-aligner",
            Stage::Diffusion => "train-diffusion",
        }
    }
}

fn effective_config(stage: Stage, args: &TrainArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => read_json::<RunConfig>(p)?,
        None => RunConfig::preset(&args.preset)?,
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = &args.data {
        cfg.data.path = Some(p.clone());
    }
    let (epochs, lr, batch) = match stage {
        Stage::Vae => (&mut cfg.vae.epochs, &mut cfg.vae.lr, &mut cfg.vae.batch),
        Stage::Aligner => (&mut cfg.aligner.epochs, &mut cfg.aligner.lr, &mut cfg.aligner.batch),
        Stage::Diffusion => (&mut cfg.diffusion.epochs, &mut cfg.diffusion.lr, &mut cfg.diffusion.batch),
    };
    if let Some(e) = args.epochs {
        *epochs = e;
    }
    if let Some(l) = args.lr {
        *lr = l;
    }
    if let Some(b) = args.batch {
        *batch = b;
    }
    Ok(cfg)
}

/// Loads the training set and adopts its header's `K`, `d` and `U`.
fn load_training_data(cfg: &mut RunConfig) -> std::result::Result<Dataset, Failure> {
    let path = cfg.data.path.clone().ok_or_else(|| usage("no dataset: pass --data or set data.path"))?;
    let data = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
    if data.pairs.is_empty() {
        return Err(Failure { code: EXIT_DATA, error: anyhow!("{} holds no samples", path.display()) });
    }
    let dims = data.header.dims();
    if (cfg.data.keypoints, cfg.data.d, cfg.data.max_len) != (dims.keypoints, dims.dim, dims.max_len) {
        log::info!("using dataset shape K={} d={} U={}", dims.keypoints, dims.dim, dims.max_len);
        cfg.data.keypoints = dims.keypoints;
        cfg.data.d = dims.dim;
        cfg.data.max_len = dims.max_len;
    }
    cfg.validate()?;
    Ok(data)
}

fn check_upstream(flag: &str, stage: Stage, own: &RunConfig, upstream: &RunConfig) -> Outcome {
    if own.data.dims()? != upstream.data.dims()? {
        return Err(Failure {
            code: EXIT_DATA,
            error: anyhow!("{}: checkpoint passed as {flag} was trained on different pose dimensions", stage.name()),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    command: &'static str,
    config: &'a RunConfig,
    log: &'a TrainLog,
}

fn train(stage: Stage, args: &TrainArgs, vae_path: Option<&Path>, aligner_path: Option<&Path>) -> Outcome {
    let mut cfg = effective_config(stage, args)?;
    let data = load_training_data(&mut cfg)?;
    let prepared = pipeline::prepare(&data.pairs, cfg.data.dims()?)?;
    let log = match stage {
        Stage::Vae => {
            let (vae, log) = pipeline::fit_vae(&prepared, &cfg)?;
            pipeline::save_vae(&vae, &cfg, &args.out)?;
            log
        }
        Stage::Aligner | Stage::Diffusion => {
            let vae_path = vae_path.ok_or_else(|| usage(format!("{} requires --vae", stage.name())))?;
            let (vae, vcfg) = pipeline::load_vae(vae_path).context("loading --vae")?;
            check_upstream("--vae", stage, &cfg, &vcfg)?;
            let z0 = pipeline::latents(&vae, &prepared, &cfg)?;
            if stage == Stage::Aligner {
                let (aligner, log) = pipeline::fit_aligner(&z0, &prepared, &vae, &cfg)?;
                pipeline::save_aligner(&aligner, &cfg, &args.out)?;
                log
            } else {
                let aligner_path = aligner_path.ok_or_else(|| usage("train-diffusion requires --aligner"))?;
                let (aligner, acfg) = pipeline::load_aligner(aligner_path).context("loading --aligner")?;
                check_upstream("--aligner", stage, &cfg, &acfg)?;
                if (aligner.arch.latent_tokens, aligner.arch.latent_dim) != (vae.arch.latent_tokens, vae.arch.latent_dim) {
                    return Err(Failure { code: EXIT_DATA, error: anyhow!("--aligner does not match the latent shape of --vae") });
                }
                let (den, log) = pipeline::fit_diffusion(&z0, &prepared, &aligner, &cfg)?;
                pipeline::save_denoiser(&den, &cfg, &args.out)?;
                log
            }
        }
    };
    let record = TrainRecord { command: stage.name(), config: &cfg, log: &log };
    write_json(&sidecar(&args.out, ".log.json"), &record)?;
    if let Some(d) = log.diverged {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            error: anyhow!(
                "{}: training diverged at step {} (loss {}); saved the last finite parameters to {}",
                stage.name(),
                d.step,
                d.loss,
                args.out.display()
            ),
        });
    }
    println!("{}: {} steps, checkpoint {}", stage.name(), log.steps, args.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn generate(
    texts: &[String],
    data: Option<&Path>,
    count: Option<usize>,
    vae_path: &Path,
    diffusion_path: &Path,
    seed: Option<u64>,
    threshold: Option<f64>,
    out: &Path,
) -> Outcome {
    let (vae, vcfg) = pipeline::load_vae(vae_path).context("loading --vae")?;
    let (den, mut cfg) = pipeline::load_denoiser(diffusion_path).context("loading --diffusion")?;
    if vcfg.data.dims()? != cfg.data.dims()? || (den.arch.latent_tokens, den.arch.latent_dim) != (vae.arch.latent_tokens, vae.arch.latent_dim) {
        return Err(Failure { code: EXIT_DATA, error: anyhow!("--vae and --diffusion checkpoints do not belong together") });
    }
    if let Some(s) = seed {
        cfg.sample.seed = s;
    }
    if let Some(t) = threshold {
        if !(t > 0.0) {
            return Err(usage("--threshold must be positive"));
        }
        cfg.eval.threshold = t;
    }
    let prompts: Vec<Prompt> = match data {
        Some(p) => {
            let d = load_dataset(p).with_context(|| format!("loading {}", p.display()))?;
            let n = count.unwrap_or(d.pairs.len()).min(d.pairs.len());
            cfg.sample.count = n;
            d.pairs[..n].iter().map(Prompt::from_pair).collect::<t2sd_core::Result<_>>()?
        }
        None => {
            cfg.sample.count = texts.len();
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Prompt::from_text(format!("prompt-{i:04}"), t))
                .collect::<t2sd_core::Result<_>>()?
        }
    };
    if prompts.is_empty() {
        return Err(Failure { code: EXIT_DATA, error: anyhow!("no prompts to generate for") });
    }
    let generated = pipeline::generate(&vae, &den, &prompts, cfg.sample.seed, cfg.eval.threshold, threads()?)?;
    write_dataset(out, &DatasetHeader::new(vae.arch.dims), &generated).with_context(|| format!("writing {}", out.display()))?;
    write_json(&sidecar(out, ".meta.json"), &json!({ "command": "generate", "config": cfg }))?;
    println!("wrote {} sequences to {}", generated.len(), out.display());
    Ok(())
}

fn table_row(r: &EvalReport) -> String {
    format!(
        "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.4}",
        "BLEU-1",
        "BLEU-2",
        "BLEU-3",
        "BLEU-4",
        "ROUGE",
        "DTW",
        100.0 * r.bleu1,
        100.0 * r.bleu2,
        100.0 * r.bleu3,
        100.0 * r.bleu4,
        100.0 * r.rouge,
        r.dtw
    )
}

fn evaluate(
    generated: &Path,
    reference: &Path,
    translator: TranslatorArg,
    translations: Option<&Path>,
    grammar: Option<&Path>,
    out: &Path,
) -> Outcome {
    let gen = load_dataset(generated).with_context(|| format!("loading {}", generated.display()))?;
    let refs = load_dataset(reference).with_context(|| format!("loading {}", reference.display()))?;
    let kind = match translator {
        TranslatorArg::Oracle => TranslatorKind::Oracle,
        TranslatorArg::File => TranslatorKind::File,
    };
    let t: Box<dyn Translator> = match kind {
        TranslatorKind::Oracle => {
            let mut g: GrammarConfig = match grammar {
                Some(p) => read_json(p)?,
                None => GrammarConfig::default(),
            };
            let dims = refs.header.dims();
            g.keypoints = dims.keypoints;
            g.d = dims.dim;
            g.max_len = dims.max_len;
            Box::new(SyntheticOracle::new(g.build()?))
        }
        TranslatorKind::File => {
            let p = translations.ok_or_else(|| usage("--translator file requires --translations"))?;
            Box::new(FileBacked::load(p)?)
        }
    };
    let report = evaluate_dataset(&gen.pairs, &refs.pairs, t.as_ref())?;
    let doc = json!({
        "generated": generated,
        "reference": reference,
        "translator": kind,
        "report": report,
    });
    write_json(out, &doc)?;
    println!("{}", table_row(&report));
    Ok(())
}
