//! Sentence embedders, the pose and text aligners projecting into a shared
//! space, and the InfoNCE objective that trains them.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{self, Bind};
use crate::autodiff::{AdamConfig, Graph, ParamStore, Scalar, Tensor, Var};
use crate::config::AlignerConfig;
use crate::error::{Error, Result};
use crate::pose::{SignTextPair, EMBEDDING_DIM};
use crate::train::{run_epochs, TrainLog};

const FNV_OFFSET: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Unit-norm sentence vector of [`EMBEDDING_DIM`] entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding(Vec<f64>);

impl SentenceEmbedding {
    /// Normalizes `v` to unit length.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.len() != EMBEDDING_DIM || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("sentence embeddings hold {EMBEDDING_DIM} finite values")));
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroVector("sentence embedding"));
        }
        Ok(SentenceEmbedding(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub trait TextEmbedder {
    fn embed(&self, tokens: &[String]) -> Result<SentenceEmbedding>;

    /// Embeds a dataset sample; defaults to embedding its text.
    fn embed_pair(&self, pair: &SignTextPair) -> Result<SentenceEmbedding> {
        self.embed(&pair.text)
    }
}

/// Signed feature hashing of lowercased tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashedBagOfWords;

impl TextEmbedder for HashedBagOfWords {
    fn embed(&self, tokens: &[String]) -> Result<SentenceEmbedding> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot embed an empty sentence"));
        }
        let mut v = vec![0.0; EMBEDDING_DIM];
        for t in tokens {
            let h = fnv1a64(t.to_lowercase().as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % EMBEDDING_DIM as u64) as usize] += sign;
        }
        SentenceEmbedding::new(v)
    }
}

/// Embeddings shipped with a dataset, looked up by sentence.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedLookup {
    by_text: HashMap<String, Vec<f64>>,
}

impl PrecomputedLookup {
    pub fn from_pairs(pairs: &[SignTextPair]) -> Self {
        let by_text = pairs
            .iter()
            .filter_map(|p| p.embedding.as_ref().map(|e| (p.sentence(), e.clone())))
            .collect();
        PrecomputedLookup { by_text }
    }
}

impl TextEmbedder for PrecomputedLookup {
    fn embed(&self, tokens: &[String]) -> Result<SentenceEmbedding> {
        let key = tokens.join(" ");
        let v = self.by_text.get(&key).ok_or_else(|| Error::invalid(format!("no precomputed embedding for `{key}`")))?;
        SentenceEmbedding::new(v.clone())
    }

    fn embed_pair(&self, pair: &SignTextPair) -> Result<SentenceEmbedding> {
        let v = pair
            .embedding
            .as_ref()
            .ok_or_else(|| Error::Sample { id: pair.id.clone(), msg: "no precomputed embedding".into() })?;
        SentenceEmbedding::new(v.clone())
    }
}

pub fn embed_text(tokens: &[String], embedder: &dyn TextEmbedder) -> Result<SentenceEmbedding> {
    embedder.embed(tokens)
}

/// Stacks sentence embeddings into `[B, 512]`.
pub fn stack_embeddings<T: Scalar>(ys: &[&SentenceEmbedding]) -> Result<Tensor<T>> {
    let data = ys.iter().flat_map(|y| y.0.iter().map(|&v| T::lit(v))).collect();
    Tensor::from_vec(&[ys.len(), EMBEDDING_DIM], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignerArch {
    pub latent_tokens: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub shared_dim: usize,
}

/// Pose aligner (`pose.*`) and text aligner (`text.*`) parameters.
#[derive(Debug, Clone)]
pub struct CrossModalAligner<T = f32> {
    pub arch: AlignerArch,
    pub params: ParamStore<T>,
}

impl<T: Scalar> CrossModalAligner<T> {
    pub fn init(arch: AlignerArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let flat = arch.latent_tokens * arch.latent_dim;
        nn::init_mlp(&mut params, "pose", flat, arch.width, arch.shared_dim, &mut rng)?;
        nn::init_mlp(&mut params, "text", EMBEDDING_DIM, arch.width, arch.shared_dim, &mut rng)?;
        Ok(CrossModalAligner { arch, params })
    }

    pub fn from_params(arch: AlignerArch, params: ParamStore<T>) -> Result<Self> {
        crate::vae::check_same_layout(&Self::init(arch, 0)?.params, &params)?;
        Ok(CrossModalAligner { arch, params })
    }

    /// Latents `[B, L_tok, d_sign]` to unit vectors `[B, d_s]`.
    pub fn pose_graph(&self, g: &mut Graph<T>, p: Bind<'_, T>, z: Var) -> Result<Var> {
        let a = self.arch;
        let shape = g.value(z).shape().to_vec();
        if shape.len() != 3 || shape[1] != a.latent_tokens || shape[2] != a.latent_dim {
            return Err(Error::shape(
                "pose_align",
                format!("expected [B, {}, {}], got {shape:?}", a.latent_tokens, a.latent_dim),
            ));
        }
        let flat = g.reshape(z, &[shape[0], a.latent_tokens * a.latent_dim])?;
        let h = nn::mlp(g, p, "pose", flat)?;
        g.l2_normalize(h)
    }

    /// Sentence embeddings `[B, 512]` to unit vectors `[B, d_s]`.
    pub fn text_graph(&self, g: &mut Graph<T>, p: Bind<'_, T>, y: Var) -> Result<Var> {
        let shape = g.value(y).shape();
        if shape.len() != 2 || shape[1] != EMBEDDING_DIM {
            return Err(Error::shape("text_align", format!("expected [B, {EMBEDDING_DIM}], got {shape:?}")));
        }
        let h = nn::mlp(g, p, "text", y)?;
        g.l2_normalize(h)
    }

    pub fn pose_align(&self, z: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.constant(z.clone());
        let out = self.pose_graph(&mut g, Bind::frozen(&self.params), x)?;
        Ok(rows(g.value(out)))
    }

    pub fn text_align(&self, ys: &[&SentenceEmbedding]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let y = g.constant(stack_embeddings(ys)?);
        let out = self.text_graph(&mut g, Bind::frozen(&self.params), y)?;
        Ok(rows(g.value(out)))
    }
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    t.to_f64_vec().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector("cosine_sim"));
    }
    let dot = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `-Σ_i log softmax_j(sim_ij / τ)[i]` for a `[B, B]` similarity matrix.
pub fn infonce_from_similarities<T: Scalar>(g: &mut Graph<T>, sim: Var, temperature: f64) -> Result<Var> {
    let logits = if temperature == 1.0 { sim } else { g.scale(sim, 1.0 / temperature)? };
    let ls = g.log_softmax(logits)?;
    let d = g.diag(ls)?;
    let s = g.sum(d)?;
    g.scale(s, -1.0)
}

/// InfoNCE over matched rows of `zp` and `zt` (`[B, d_s]`), with cosine
/// similarity. The symmetric variant averages both retrieval directions.
pub fn infonce_loss<T: Scalar>(g: &mut Graph<T>, zp: Var, zt: Var, temperature: f64, symmetric: bool) -> Result<Var> {
    if g.value(zp).shape().first() == Some(&0) {
        return Err(Error::invalid("InfoNCE needs a nonempty batch"));
    }
    let a = g.l2_normalize(zp)?;
    let b = g.l2_normalize(zt)?;
    let sim = g.matmul_nt(a, b)?;
    let forward = infonce_from_similarities(g, sim, temperature)?;
    if !symmetric {
        return Ok(forward);
    }
    let sim_t = g.matmul_nt(b, a)?;
    let backward = infonce_from_similarities(g, sim_t, temperature)?;
    let both = g.add(forward, backward)?;
    g.scale(both, 0.5)
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("need a nonempty batch of equal-width embeddings"));
    }
    Tensor::from_vec(&[rows.len(), d], rows.concat())
}

/// InfoNCE value for plain embedding batches.
pub fn infonce_value(zp: &[Vec<f64>], zt: &[Vec<f64>], temperature: f64, symmetric: bool) -> Result<f64> {
    if zp.len() != zt.len() {
        return Err(Error::invalid("batches must pair up"));
    }
    let mut g = Graph::<f64>::new();
    let a = g.constant(matrix(zp)?);
    let b = g.constant(matrix(zt)?);
    let l = infonce_loss(&mut g, a, b, temperature, symmetric)?;
    Ok(g.value(l).item())
}

/// Fraction of rows whose matched text strictly out-scores every other
/// candidate; ties count as misses.
pub fn retrieval_accuracy(zp: &[Vec<f64>], zt: &[Vec<f64>]) -> Result<f64> {
    if zp.is_empty() || zp.len() != zt.len() {
        return Err(Error::invalid("retrieval needs matched nonempty batches"));
    }
    let mut hits = 0;
    for (i, p) in zp.iter().enumerate() {
        let own = cosine_sim(p, &zt[i])?;
        let mut best_other = f64::NEG_INFINITY;
        for (j, t) in zt.iter().enumerate() {
            if j != i {
                best_other = best_other.max(cosine_sim(p, t)?);
            }
        }
        if own > best_other {
            hits += 1;
        }
    }
    Ok(hits as f64 / zp.len() as f64)
}

/// Trains both aligners on matched latent grids `[L_tok, d_sign]` (from a
/// frozen VAE) and sentence embeddings.
pub fn train_aligner(
    latents: &[Tensor<f64>],
    texts: &[SentenceEmbedding],
    arch: AlignerArch,
    cfg: &AlignerConfig,
    seed: u64,
) -> Result<(CrossModalAligner<f32>, TrainLog)> {
    if latents.is_empty() || latents.len() != texts.len() {
        return Err(Error::invalid("train_aligner needs matched, nonempty latents and texts"));
    }
    let mut model = CrossModalAligner::<f32>::init(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11c_0001);
    let adam = AdamConfig::with_lr(cfg.lr);
    let log = run_epochs(latents.len(), cfg.batch, cfg.epochs, &mut rng, "aligner", |idx, _| {
        let zs: Vec<Tensor<f32>> = idx.iter().map(|&i| latents[i].cast()).collect();
        let ys: Vec<&SentenceEmbedding> = idx.iter().map(|&i| &texts[i]).collect();
        let mut g = Graph::new();
        let z = g.constant(Tensor::stack(&zs)?);
        let y = g.constant(stack_embeddings(&ys)?);
        let p = Bind::trainable(&model.params);
        let zp = model.pose_graph(&mut g, p, z)?;
        let zt = model.text_graph(&mut g, p, y)?;
        let loss = infonce_loss(&mut g, zp, zt, cfg.temperature, cfg.symmetric)?;
        let value = g.value(loss).item() as f64;
        let grads = g.backward(loss)?;
        model.params.adam_step(&grads, &adam)?;
        Ok(vec![("loss", value)])
    })?;
    Ok((model, log))
}
