//! Transformer VAE between padded pose sequences `[U, K·d]` and a grid of
//! `L_tok` latent tokens of width `d_sign`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{self, Bind, BlockConfig};
use crate::autodiff::{sinusoidal_table, AdamConfig, Graph, ParamStore, Scalar, Tensor, Var};
use crate::config::VaeConfig;
use crate::error::{Error, Result};
use crate::pose::PoseDims;
use crate::train::{run_epochs, steps_per_epoch, TrainLog};

pub const LOG_VAR_LIMIT: f64 = 10.0;

/// Shape of a VAE; stored with its checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeArch {
    pub dims: PoseDims,
    pub latent_tokens: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl VaeArch {
    pub fn new(dims: PoseDims, cfg: &VaeConfig) -> Result<Self> {
        if cfg.latent_tokens == 0 || !dims.max_len.is_multiple_of(cfg.latent_tokens) {
            return Err(Error::invalid(format!("U = {} is not a multiple of L_tok = {}", dims.max_len, cfg.latent_tokens)));
        }
        if !cfg.width.is_multiple_of(cfg.heads) || !cfg.width.is_multiple_of(2) {
            return Err(Error::invalid("VAE width must be even and a multiple of the head count"));
        }
        Ok(VaeArch {
            dims,
            latent_tokens: cfg.latent_tokens,
            latent_dim: cfg.d_sign,
            width: cfg.width,
            depth: cfg.depth,
            heads: cfg.heads,
        })
    }

    /// Frames per latent token.
    pub fn group(&self) -> usize {
        self.dims.max_len / self.latent_tokens
    }

    fn block(&self) -> BlockConfig {
        BlockConfig { width: self.width, heads: self.heads, ff_hidden: 2 * self.width, cross: false }
    }
}

/// Diagonal Gaussian over latent grids, `[B, L_tok, d_sign]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<T> {
    pub mu: Tensor<T>,
    /// Clamped to `[-10, 10]`.
    pub log_var: Tensor<T>,
}

/// Latent grids `[B, L_tok, d_sign]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub tokens: Tensor<T>,
}

/// `z = mu + exp(log_var / 2) * noise`.
pub fn reparameterize<T: Scalar>(post: &GaussianPosterior<T>, noise: &Tensor<T>) -> Result<LatentCode<T>> {
    if noise.shape() != post.mu.shape() || post.log_var.shape() != post.mu.shape() {
        return Err(Error::shape("reparameterize", format!("noise {:?} vs mu {:?}", noise.shape(), post.mu.shape())));
    }
    let half = T::lit(0.5);
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.log_var.data())
        .zip(noise.data())
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect();
    Ok(LatentCode { tokens: Tensor::from_vec(post.mu.shape(), data)? })
}

/// Recorded loss terms.
#[derive(Debug, Clone, Copy)]
pub struct VaeLoss {
    pub total: Var,
    pub mse: Var,
    pub kl: Var,
}

/// `0.5 * mean(exp(lv) + mu^2 - 1 - lv)`: KL to the standard normal,
/// averaged over latent entries.
pub fn kl_divergence<T: Scalar>(g: &mut Graph<T>, mu: Var, log_var: Var) -> Result<Var> {
    let e = g.exp(log_var)?;
    let m2 = g.square(mu)?;
    let s = g.add(e, m2)?;
    let s = g.sub(s, log_var)?;
    let s = g.add_scalar(s, -1.0)?;
    let m = g.mean(s)?;
    g.scale(m, 0.5)
}

/// Reconstruction MSE over every entry plus `kl_weight` times the KL term.
pub fn vae_loss<T: Scalar>(g: &mut Graph<T>, target: Var, recon: Var, mu: Var, log_var: Var, kl_weight: f64) -> Result<VaeLoss> {
    let diff = g.sub(recon, target)?;
    let sq = g.square(diff)?;
    let mse = g.mean(sq)?;
    let kl = kl_divergence(g, mu, log_var)?;
    let weighted = g.scale(kl, kl_weight)?;
    let total = g.add(mse, weighted)?;
    Ok(VaeLoss { total, mse, kl })
}

#[derive(Debug, Clone)]
pub struct SignVae<T = f32> {
    pub arch: VaeArch,
    pub params: ParamStore<T>,
}

impl<T: Scalar> SignVae<T> {
    pub fn init(arch: VaeArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (w, fl) = (arch.width, arch.dims.frame_len());
        nn::init_linear(&mut p, "enc.in", fl, w, &mut rng)?;
        for i in 0..arch.depth {
            nn::init_block(&mut p, &format!("enc.block{i}"), arch.block(), &mut rng)?;
        }
        nn::init_layer_norm(&mut p, "enc.ln", w)?;
        nn::init_linear(&mut p, "enc.mu", w, arch.latent_dim, &mut rng)?;
        nn::init_linear_zero(&mut p, "enc.logvar", w, arch.latent_dim)?;
        nn::init_linear(&mut p, "dec.in", arch.latent_dim, w, &mut rng)?;
        for i in 0..arch.depth {
            nn::init_block(&mut p, &format!("dec.block{i}"), arch.block(), &mut rng)?;
        }
        nn::init_layer_norm(&mut p, "dec.ln", w)?;
        nn::init_linear(&mut p, "dec.out", w, fl, &mut rng)?;
        Ok(SignVae { arch, params: p })
    }

    pub fn from_params(arch: VaeArch, params: ParamStore<T>) -> Result<Self> {
        let reference = SignVae::<T>::init(arch, 0)?;
        check_same_layout(&reference.params, &params)?;
        Ok(SignVae { arch, params })
    }

    fn positions(&self, g: &mut Graph<T>) -> Result<Var> {
        let u = self.arch.dims.max_len;
        let pos: Vec<f64> = (0..u).map(|i| i as f64).collect();
        let table = sinusoidal_table::<T>(&pos, self.arch.width).reshape(&[1, u, self.arch.width])?;
        Ok(g.constant(table))
    }

    /// Posterior parameters for poses `[B, U, K·d]`; returns `(mu, log_var)`.
    pub fn encode_graph(&self, g: &mut Graph<T>, p: Bind<'_, T>, poses: Var) -> Result<(Var, Var)> {
        let a = self.arch;
        let shape = g.value(poses).shape().to_vec();
        if shape.len() != 3 || shape[1] != a.dims.max_len || shape[2] != a.dims.frame_len() {
            return Err(Error::shape(
                "encode",
                format!("expected [B, {}, {}], got {shape:?}", a.dims.max_len, a.dims.frame_len()),
            ));
        }
        let mut h = nn::linear(g, p, "enc.in", poses)?;
        let pos = self.positions(g)?;
        h = g.add_broadcast(h, pos)?;
        for i in 0..a.depth {
            h = nn::block(g, p, &format!("enc.block{i}"), a.block(), h, None)?;
        }
        h = nn::layer_norm(g, p, "enc.ln", h)?;
        let pooled = g.mean_pool(h, a.group())?;
        let mu = nn::linear(g, p, "enc.mu", pooled)?;
        let lv = nn::linear(g, p, "enc.logvar", pooled)?;
        let lv = g.clamp(lv, -LOG_VAR_LIMIT, LOG_VAR_LIMIT)?;
        Ok((mu, lv))
    }

    /// Reconstruction `[B, U, K·d]` from latents `[B, L_tok, d_sign]`.
    pub fn decode_graph(&self, g: &mut Graph<T>, p: Bind<'_, T>, z: Var) -> Result<Var> {
        let a = self.arch;
        let shape = g.value(z).shape().to_vec();
        if shape.len() != 3 || shape[1] != a.latent_tokens || shape[2] != a.latent_dim {
            return Err(Error::shape(
                "decode",
                format!("expected [B, {}, {}], got {shape:?}", a.latent_tokens, a.latent_dim),
            ));
        }
        let h = nn::linear(g, p, "dec.in", z)?;
        let mut h = g.upsample(h, a.group())?;
        let pos = self.positions(g)?;
        h = g.add_broadcast(h, pos)?;
        for i in 0..a.depth {
            h = nn::block(g, p, &format!("dec.block{i}"), a.block(), h, None)?;
        }
        h = nn::layer_norm(g, p, "dec.ln", h)?;
        nn::linear(g, p, "dec.out", h)
    }

    fn as_frames(&self, poses: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.arch.dims;
        match poses.shape() {
            [b, u, k, dd] if *u == d.max_len && *k == d.keypoints && *dd == d.dim => poses.clone().reshape(&[*b, *u, k * dd]),
            [_, _, _] => Ok(poses.clone()),
            s => Err(Error::shape("encode", format!("expected [B, U, K, d], got {s:?}"))),
        }
    }

    /// Encodes padded poses `[B, U, K, d]` (or `[B, U, K·d]`).
    pub fn encode(&self, poses: &Tensor<T>) -> Result<GaussianPosterior<T>> {
        let mut g = Graph::new();
        let x = g.constant(self.as_frames(poses)?);
        let (mu, lv) = self.encode_graph(&mut g, Bind::frozen(&self.params), x)?;
        Ok(GaussianPosterior { mu: g.value(mu).clone(), log_var: g.value(lv).clone() })
    }

    /// Decodes latents to padded poses `[B, U, K, d]`.
    pub fn decode(&self, z: &LatentCode<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(z.tokens.clone());
        let out = self.decode_graph(&mut g, Bind::frozen(&self.params), x)?;
        let d = self.arch.dims;
        let b = z.tokens.shape()[0];
        g.value(out).clone().reshape(&[b, d.max_len, d.keypoints, d.dim])
    }
}

pub(crate) fn check_same_layout<T: Scalar>(expected: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::invalid(format!("expected {} parameter tensors, found {}", expected.len(), got.len())));
    }
    for ((na, ta), (nb, tb)) in expected.iter().zip(got.iter()) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(Error::invalid(format!("parameter `{nb}` {:?} does not match `{na}` {:?}", tb.shape(), ta.shape())));
        }
    }
    Ok(())
}

/// Stacks padded `[U, K, d]` poses into one `[B, U, K·d]` batch.
pub fn stack_poses<T: Scalar>(poses: &[&Tensor<f64>]) -> Result<Tensor<T>> {
    let first = poses.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let &[u, k, d] = first.shape() else {
        return Err(Error::shape("stack_poses", format!("expected [U, K, d], got {:?}", first.shape())));
    };
    let mut data = Vec::with_capacity(poses.len() * u * k * d);
    for p in poses {
        if p.shape() != first.shape() {
            return Err(Error::shape("stack_poses", format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
        data.extend(p.data().iter().map(|&x| T::lit(x)));
    }
    Tensor::from_vec(&[poses.len(), u, k * d], data)
}

/// Trains from `seed` on padded, normalized poses `[U, K, d]`.
///
/// The KL weight ramps linearly from 0 over the first `kl_warmup` fraction
/// of steps. On divergence the returned model holds the last finite
/// parameters and the log records the failing step.
pub fn train_vae(poses: &[Tensor<f64>], arch: VaeArch, cfg: &VaeConfig, seed: u64) -> Result<(SignVae<f32>, TrainLog)> {
    if poses.is_empty() {
        return Err(Error::invalid("train_vae needs at least one sample"));
    }
    let mut vae = SignVae::<f32>::init(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let adam = AdamConfig::with_lr(cfg.lr);
    let total = (steps_per_epoch(poses.len(), cfg.batch) * cfg.epochs) as f64;
    let warm = (cfg.kl_warmup * total).max(1.0);
    let log = run_epochs(poses.len(), cfg.batch, cfg.epochs, &mut rng, "vae", |idx, step| {
        let batch: Vec<&Tensor<f64>> = idx.iter().map(|&i| &poses[i]).collect();
        let x = stack_poses::<f32>(&batch)?;
        let kl_weight = cfg.kl_weight * ((step + 1) as f64 / warm).min(1.0);
        let mut g = Graph::new();
        let target = g.constant(x);
        let p = Bind::trainable(&vae.params);
        let (mu, lv) = vae.encode_graph(&mut g, p, target)?;
        let noise = Tensor::randn(g.value(mu).shape(), 1.0, &mut noise_rng);
        let eps = g.constant(noise);
        let std = g.scale(lv, 0.5)?;
        let std = g.exp(std)?;
        let spread = g.mul(std, eps)?;
        let z = g.add(mu, spread)?;
        let recon = vae.decode_graph(&mut g, p, z)?;
        let loss = vae_loss(&mut g, target, recon, mu, lv, kl_weight)?;
        let out = vec![
            ("loss", g.value(loss.total).item() as f64),
            ("mse", g.value(loss.mse).item() as f64),
            ("kl", g.value(loss.kl).item() as f64),
        ];
        let grads = g.backward(loss.total)?;
        vae.params.adam_step(&grads, &adam)?;
        Ok(out)
    })?;
    Ok((vae, log))
}

/// Posterior means for padded poses `[U, K, d]`, as `[L_tok, d_sign]` grids.
pub fn encode_means(vae: &SignVae<f32>, poses: &[Tensor<f64>], batch: usize) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(poses.len());
    for chunk in poses.chunks(batch.max(1)) {
        let refs: Vec<&Tensor<f64>> = chunk.iter().collect();
        let post = vae.encode(&stack_poses::<f32>(&refs)?)?;
        out.extend(post.mu.cast::<f64>().unstack());
    }
    Ok(out)
}
