//! Stage wiring: data preparation, the three training stages in order,
//! checkpoint snapshots, generation and the semantic agreement score.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aligner::{cosine_sim, train_aligner, AlignerArch, CrossModalAligner, HashedBagOfWords, SentenceEmbedding, TextEmbedder};
use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::diffusion::{prompt_rng, train_diffusion, Denoiser, DenoiserArch};
use crate::error::{Error, Result};
use crate::persistence::{load_kind, save_checkpoint, ModelKind};
use crate::pose::{normalize_pose, pad_to_length, truncate_at_eos, PoseDims, SignTextPair};
use crate::train::TrainLog;
use crate::vae::{encode_means, train_vae, LatentCode, SignVae, VaeArch};

const VAE_SEED: u64 = 0x0001;
const ALIGNER_SEED: u64 = 0x0002;
const DIFFUSION_SEED: u64 = 0x0003;
const SAMPLE_BATCH: usize = 16;

/// Config stored in every checkpoint: the model shape and the run config
/// that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot<A> {
    pub arch: A,
    pub config: RunConfig,
}

/// Uses the sample's shipped embedding when present, else hashes its text.
pub fn pair_embedding(pair: &SignTextPair) -> Result<SentenceEmbedding> {
    match &pair.embedding {
        Some(e) => SentenceEmbedding::new(e.clone()),
        None => HashedBagOfWords.embed(&pair.text),
    }
}

/// Normalized poses padded to `[U, K, d]`, with their sentence embeddings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub poses: Vec<Tensor<f64>>,
    pub texts: Vec<SentenceEmbedding>,
}

pub fn prepare(pairs: &[SignTextPair], dims: PoseDims) -> Result<Prepared> {
    if pairs.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let mut poses = Vec::with_capacity(pairs.len());
    let mut texts = Vec::with_capacity(pairs.len());
    for p in pairs {
        let have = p.pose.dims();
        if (have.keypoints, have.dim) != (dims.keypoints, dims.dim) {
            return Err(Error::Sample {
                id: p.id.clone(),
                msg: format!("pose is K={} d={}, config wants K={} d={}", have.keypoints, have.dim, dims.keypoints, dims.dim),
            });
        }
        if p.pose.len() > dims.max_len {
            return Err(Error::Sample { id: p.id.clone(), msg: format!("{} frames exceed U = {}", p.pose.len(), dims.max_len) });
        }
        poses.push(pad_to_length(&normalize_pose(&p.pose)?, dims.max_len)?);
        texts.push(pair_embedding(p)?);
    }
    Ok(Prepared { poses, texts })
}

pub fn fit_vae(data: &Prepared, cfg: &RunConfig) -> Result<(SignVae<f32>, TrainLog)> {
    let arch = VaeArch::new(cfg.data.dims()?, &cfg.vae)?;
    train_vae(&data.poses, arch, &cfg.vae, cfg.seed ^ VAE_SEED)
}

/// Posterior means of the frozen VAE, the clean latents of later stages.
pub fn latents(vae: &SignVae<f32>, data: &Prepared, cfg: &RunConfig) -> Result<Vec<Tensor<f64>>> {
    encode_means(vae, &data.poses, cfg.vae.batch.max(SAMPLE_BATCH))
}

pub fn aligner_arch(vae: &SignVae<f32>, cfg: &RunConfig) -> AlignerArch {
    AlignerArch {
        latent_tokens: vae.arch.latent_tokens,
        latent_dim: vae.arch.latent_dim,
        width: cfg.aligner.width,
        shared_dim: cfg.aligner.d_s,
    }
}

pub fn fit_aligner(z0: &[Tensor<f64>], data: &Prepared, vae: &SignVae<f32>, cfg: &RunConfig) -> Result<(CrossModalAligner<f32>, TrainLog)> {
    train_aligner(z0, &data.texts, aligner_arch(vae, cfg), &cfg.aligner, cfg.seed ^ ALIGNER_SEED)
}

/// Aligner with fresh random weights, standing in for an untrained one.
pub fn untrained_aligner(vae: &SignVae<f32>, cfg: &RunConfig) -> Result<CrossModalAligner<f32>> {
    CrossModalAligner::init(aligner_arch(vae, cfg), cfg.seed ^ ALIGNER_SEED)
}

pub fn fit_diffusion(
    z0: &[Tensor<f64>],
    data: &Prepared,
    aligner: &CrossModalAligner<f32>,
    cfg: &RunConfig,
) -> Result<(Denoiser<f32>, TrainLog)> {
    train_diffusion(z0, &data.texts, aligner, &cfg.diffusion, cfg.seed ^ DIFFUSION_SEED)
}

/// A prompt to generate for.
#[derive(Debug, Clone)]
pub struct Prompt {
    pub id: String,
    pub text: Vec<String>,
    pub embedding: SentenceEmbedding,
}

impl Prompt {
    pub fn from_pair(pair: &SignTextPair) -> Result<Self> {
        Ok(Prompt { id: pair.id.clone(), text: pair.text.clone(), embedding: pair_embedding(pair)? })
    }

    pub fn from_text(id: impl Into<String>, text: &str) -> Result<Self> {
        let text: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        let embedding = HashedBagOfWords.embed(&text)?;
        Ok(Prompt { id: id.into(), text, embedding })
    }
}

/// Samples VAE-space latents `[L_tok, d_sign]`, one per prompt, on up to
/// `threads` workers. Prompt `i` uses its own generator stream, so results
/// depend on neither batching nor thread count.
pub fn sample_latents(denoiser: &Denoiser<f32>, prompts: &[Prompt], seed: u64, threads: usize) -> Result<Vec<Tensor<f64>>> {
    let run = |c: usize, chunk: &[Prompt]| -> Result<Vec<Tensor<f64>>> {
        let ys: Vec<&SentenceEmbedding> = chunk.iter().map(|p| &p.embedding).collect();
        let mut rngs: Vec<_> = (0..chunk.len()).map(|i| prompt_rng(seed, (c * SAMPLE_BATCH + i) as u64)).collect();
        Ok(denoiser.sample_latents(&ys, &mut rngs)?.cast::<f64>().unstack())
    };
    let chunks: Vec<(usize, &[Prompt])> = prompts.chunks(SAMPLE_BATCH).enumerate().collect();
    let workers = threads.clamp(1, chunks.len().max(1));
    let parts: Vec<Result<Vec<Tensor<f64>>>> = if workers == 1 {
        chunks.iter().map(|&(c, ch)| run(c, ch)).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let mine: Vec<_> = chunks.iter().copied().skip(w).step_by(workers).collect();
                    s.spawn(move || mine.into_iter().map(|(c, ch)| (c, run(c, ch))).collect::<Vec<_>>())
                })
                .collect();
            let mut all: Vec<_> = handles.into_iter().flat_map(|h| h.join().expect("sampling worker panicked")).collect();
            all.sort_by_key(|(c, _)| *c);
            all.into_iter().map(|(_, r)| r).collect()
        })
    };
    let mut out = Vec::with_capacity(prompts.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Decodes latents and cuts each clip at its End-of-Sign frame.
pub fn decode_latents(vae: &SignVae<f32>, prompts: &[Prompt], z: &[Tensor<f64>], threshold: f64) -> Result<Vec<SignTextPair>> {
    if prompts.len() != z.len() {
        return Err(Error::invalid("one latent per prompt expected"));
    }
    let mut out = Vec::with_capacity(z.len());
    for (ps, zs) in prompts.chunks(SAMPLE_BATCH).zip(z.chunks(SAMPLE_BATCH)) {
        let tokens = Tensor::stack(&zs.iter().map(|t| t.cast::<f32>()).collect::<Vec<_>>())?;
        let frames = vae.decode(&LatentCode { tokens })?.cast::<f64>();
        for (p, f) in ps.iter().zip(frames.unstack()) {
            let cut = truncate_at_eos(&f, threshold)?;
            out.push(SignTextPair::new(p.id.clone(), p.text.clone(), cut.sequence, None)?);
        }
    }
    Ok(out)
}

pub fn generate(
    vae: &SignVae<f32>,
    denoiser: &Denoiser<f32>,
    prompts: &[Prompt],
    seed: u64,
    threshold: f64,
    threads: usize,
) -> Result<Vec<SignTextPair>> {
    let z = sample_latents(denoiser, prompts, seed, threads)?;
    decode_latents(vae, prompts, &z, threshold)
}

/// Mean cosine between the aligner's pose embedding of each latent and the
/// text embedding of its prompt.
pub fn semantic_agreement(aligner: &CrossModalAligner<f32>, z: &[Tensor<f64>], prompts: &[Prompt]) -> Result<f64> {
    if z.is_empty() || z.len() != prompts.len() {
        return Err(Error::invalid("one latent per prompt expected"));
    }
    let zp = aligner.pose_align(&Tensor::stack(&z.iter().map(|t| t.cast::<f32>()).collect::<Vec<_>>())?)?;
    let zt = aligner.text_align(&prompts.iter().map(|p| &p.embedding).collect::<Vec<_>>())?;
    let total = zp.iter().zip(&zt).map(|(a, b)| cosine_sim(a, b)).sum::<Result<f64>>()?;
    Ok(total / z.len() as f64)
}

/// Splits indices into batches of `size` whose sentences are pairwise
/// distinct, dropping what cannot fill a batch. Identical sentences give
/// identical text embeddings, which retrieval cannot tell apart.
pub fn distinct_text_batches(texts: &[SentenceEmbedding], size: usize) -> Vec<Vec<usize>> {
    let mut open: Vec<Vec<usize>> = Vec::new();
    let mut done = Vec::new();
    for i in 0..texts.len() {
        let slot = open.iter().position(|b| b.iter().all(|&j| texts[j] != texts[i]));
        let b = match slot {
            Some(s) => &mut open[s],
            None => {
                open.push(Vec::new());
                open.last_mut().expect("just pushed")
            }
        };
        b.push(i);
        if let Some(s) = open.iter().position(|b| b.len() == size) {
            done.push(open.swap_remove(s));
        }
    }
    done
}

pub fn save_vae(vae: &SignVae<f32>, cfg: &RunConfig, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint(&vae.params, ModelKind::Vae, &Snapshot { arch: vae.arch, config: cfg.clone() }, path)
}

pub fn save_aligner(aligner: &CrossModalAligner<f32>, cfg: &RunConfig, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint(&aligner.params, ModelKind::Aligner, &Snapshot { arch: aligner.arch, config: cfg.clone() }, path)
}

pub fn save_denoiser(denoiser: &Denoiser<f32>, cfg: &RunConfig, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint(&denoiser.params, ModelKind::Diffusion, &Snapshot { arch: denoiser.arch, config: cfg.clone() }, path)
}

pub fn load_vae(path: impl AsRef<Path>) -> Result<(SignVae<f32>, RunConfig)> {
    let ck = load_kind(path, ModelKind::Vae)?;
    let snap: Snapshot<VaeArch> = ck.config()?;
    Ok((SignVae::from_params(snap.arch, ck.params)?, snap.config))
}

pub fn load_aligner(path: impl AsRef<Path>) -> Result<(CrossModalAligner<f32>, RunConfig)> {
    let ck = load_kind(path, ModelKind::Aligner)?;
    let snap: Snapshot<AlignerArch> = ck.config()?;
    Ok((CrossModalAligner::from_params(snap.arch, ck.params)?, snap.config))
}

pub fn load_denoiser(path: impl AsRef<Path>) -> Result<(Denoiser<f32>, RunConfig)> {
    let ck = load_kind(path, ModelKind::Diffusion)?;
    let snap: Snapshot<DenoiserArch> = ck.config()?;
    Ok((Denoiser::from_params(snap.arch, ck.params)?, snap.config))
}
