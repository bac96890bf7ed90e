//! Conditional DDPM over VAE latent grids: linear noise schedule, the
//! token-axis U-Net denoiser with text cross-attention, the noise and
//! semantic losses, and ancestral sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::{stack_embeddings, CrossModalAligner, SentenceEmbedding};
use crate::autodiff::nn::{self, Bind, BlockConfig};
use crate::autodiff::{sinusoidal_table, AdamConfig, Graph, ParamStore, Scalar, Tensor, Var};
use crate::config::DiffusionConfig;
use crate::error::{Error, Result};
use crate::pose::EMBEDDING_DIM;
use crate::train::{run_epochs, TrainLog};

pub const MEMORY_TOKENS: usize = 4;

/// `beta`, `alpha = 1 - beta` and `alpha_bar = prod alpha` for `t = 1..=T`,
/// stored at index `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "schedule needs T >= 2 and 0 < beta_start < beta_end < 1 (got T={steps}, {beta_start}..{beta_end})"
        )));
    }
    let span = beta_end - beta_start;
    let beta: Vec<f64> = (0..steps)
        .map(|i| match i {
            0 => beta_start,
            _ if i == steps - 1 => beta_end,
            _ => beta_start + i as f64 / (steps - 1) as f64 * span,
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(t)?])
    }
}

fn zip_map<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(f64, f64) -> f64) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| T::lit(f(x.as_f64(), y.as_f64()))).collect();
    Tensor::from_vec(a.shape(), data)
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    zip_map("q_sample", z0, eps, |z, e| a * z + b * e)
}

/// Inverts [`q_sample`] given a noise estimate.
pub fn predict_z0<T: Scalar>(z_t: &Tensor<T>, t: usize, eps_hat: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    zip_map("predict_z0", z_t, eps_hat, |z, e| (z - b * e) / a)
}

/// One ancestral step: `mu + sqrt(beta_t) noise`, with no noise at `t = 1`.
pub fn reverse_step<T: Scalar>(
    z_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    sched: &NoiseSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    let i = sched.check(t)?;
    let (beta, alpha, ab) = (sched.beta[i], sched.alpha[i], sched.alpha_bar[i]);
    let coef = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mu = zip_map("p_sample_step", z_t, eps_hat, |z, e| inv * (z - coef * e))?;
    if t == 1 {
        return Ok(mu);
    }
    let sigma = beta.sqrt();
    zip_map("p_sample_step", &mu, noise, |m, n| m + sigma * n)
}

/// Mean squared difference over every latent entry.
pub fn diffusion_loss<T: Scalar>(g: &mut Graph<T>, eps: Var, eps_hat: Var) -> Result<Var> {
    let d = g.sub(eps_hat, eps)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Per-row `1 - cos(a_i, b_i)` for `[B, d]` inputs.
pub fn semantic_loss<T: Scalar>(g: &mut Graph<T>, pose: Var, text: Var) -> Result<Var> {
    let a = g.l2_normalize(pose)?;
    let b = g.l2_normalize(text)?;
    let prod = g.mul(a, b)?;
    let cos = g.sum_last(prod)?;
    let neg = g.scale(cos, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Weight `1 - t/T` of the semantic term.
pub fn time_factor(t: usize, steps: usize) -> f64 {
    1.0 - t as f64 / steps as f64
}

/// `L_d + (1 - t/T) L_s` for scalar loss nodes.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, l_d: Var, l_s: Var, t: usize, steps: usize) -> Result<Var> {
    if t == 0 || t > steps {
        return Err(Error::invalid(format!("timestep {t} outside 1..={steps}")));
    }
    let w = g.scale(l_s, time_factor(t, steps))?;
    g.add(l_d, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub latent_tokens: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Multiplies VAE latents into the diffusion space (unit variance).
    pub latent_scale: f64,
}

impl DenoiserArch {
    pub fn new(latent_tokens: usize, latent_dim: usize, cfg: &DiffusionConfig, latent_scale: f64) -> Result<Self> {
        if !cfg.width.is_multiple_of(cfg.heads) || !cfg.width.is_multiple_of(2) {
            return Err(Error::invalid("denoiser width must be even and a multiple of the head count"));
        }
        if !(latent_scale > 0.0 && latent_scale.is_finite()) {
            return Err(Error::invalid("latent scale must be positive"));
        }
        Ok(DenoiserArch {
            latent_tokens,
            latent_dim,
            width: cfg.width,
            heads: cfg.heads,
            steps: cfg.steps,
            beta_start: cfg.beta_start,
            beta_end: cfg.beta_end,
            latent_scale,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }

    fn block(&self) -> BlockConfig {
        BlockConfig { width: self.width, heads: self.heads, ff_hidden: 2 * self.width, cross: true }
    }

    /// Token counts at each level of the down path: pooling halves a level
    /// only when its length is even.
    fn levels(&self) -> [usize; 3] {
        let halve = |l: usize| if l.is_multiple_of(2) { l / 2 } else { l };
        let l1 = halve(self.latent_tokens);
        [self.latent_tokens, l1, halve(l1)]
    }
}

/// Noise predictor `eps_theta(z_t, t, y)`. The network output `v` is
/// combined with the input as `sqrt(1 - ab_t) z_t + sqrt(ab_t) v`, which keeps
/// the implied clean latent bounded at large `t`.
#[derive(Debug, Clone)]
pub struct Denoiser<T = f32> {
    pub arch: DenoiserArch,
    pub params: ParamStore<T>,
}

const BLOCKS: [&str; 5] = ["down0", "down1", "mid", "up1", "up0"];

impl<T: Scalar> Denoiser<T> {
    pub fn init(arch: DenoiserArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = arch.width;
        nn::init_linear(&mut p, "in", arch.latent_dim, w, &mut rng)?;
        nn::init_mlp(&mut p, "temb", w, w, w, &mut rng)?;
        nn::init_linear(&mut p, "yemb", EMBEDDING_DIM, w, &mut rng)?;
        nn::init_linear(&mut p, "cond", EMBEDDING_DIM, MEMORY_TOKENS * w, &mut rng)?;
        nn::init_layer_norm(&mut p, "cond.ln", w)?;
        for b in BLOCKS {
            nn::init_block(&mut p, b, arch.block(), &mut rng)?;
        }
        nn::init_layer_norm(&mut p, "out.ln", w)?;
        nn::init_linear(&mut p, "out", w, arch.latent_dim, &mut rng)?;
        Ok(Denoiser { arch, params: p })
    }

    pub fn from_params(arch: DenoiserArch, params: ParamStore<T>) -> Result<Self> {
        crate::vae::check_same_layout(&Self::init(arch, 0)?.params, &params)?;
        Ok(Denoiser { arch, params })
    }

    /// Predicted noise `[B, L_tok, d_sign]` for noisy latents, per-sample
    /// timesteps and sentence embeddings `[B, 512]`.
    pub fn predict_graph(&self, g: &mut Graph<T>, p: Bind<'_, T>, z_t: Var, t: &[usize], y: Var) -> Result<Var> {
        let a = self.arch;
        let shape = g.value(z_t).shape().to_vec();
        if shape.len() != 3 || shape[1] != a.latent_tokens || shape[2] != a.latent_dim || shape[0] != t.len() {
            return Err(Error::shape(
                "predict_noise",
                format!("expected [{}, {}, {}], got {shape:?}", t.len(), a.latent_tokens, a.latent_dim),
            ));
        }
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > a.steps) {
            return Err(Error::invalid(format!("timestep {bad} outside 1..={}", a.steps)));
        }
        let b = shape[0];
        let w = a.width;
        let tv = g.constant(Tensor::from_f64(&[b], &t.iter().map(|&s| s as f64).collect::<Vec<_>>())?);
        let temb = g.sinusoidal(tv, w)?;
        let temb = nn::mlp(g, p, "temb", temb)?;
        let yemb = nn::linear(g, p, "yemb", y)?;
        let temb = g.add(temb, yemb)?;
        let temb = g.reshape(temb, &[b, 1, w])?;
        let mem = nn::linear(g, p, "cond", y)?;
        let mem = g.reshape(mem, &[b, MEMORY_TOKENS, w])?;
        let mem = nn::layer_norm(g, p, "cond.ln", mem)?;

        let cfg = a.block();
        let [l0, l1, l2] = a.levels();
        let stage = |g: &mut Graph<T>, name: &str, x: Var| -> Result<Var> {
            let x = g.add_broadcast(x, temb)?;
            nn::block(g, p, name, cfg, x, Some(mem))
        };
        let pool = |g: &mut Graph<T>, x: Var, from: usize, to: usize| if from == to { Ok(x) } else { g.mean_pool(x, 2) };
        let up = |g: &mut Graph<T>, x: Var, from: usize, to: usize| if from == to { Ok(x) } else { g.upsample(x, 2) };

        let h = nn::linear(g, p, "in", z_t)?;
        let positions: Vec<f64> = (0..a.latent_tokens).map(|i| i as f64).collect();
        let pos = g.constant(sinusoidal_table::<T>(&positions, w).reshape(&[1, a.latent_tokens, w])?);
        let h = g.add_broadcast(h, pos)?;
        let s0 = stage(g, "down0", h)?;
        let h = pool(g, s0, l0, l1)?;
        let s1 = stage(g, "down1", h)?;
        let h = pool(g, s1, l1, l2)?;
        let h = stage(g, "mid", h)?;
        let h = up(g, h, l2, l1)?;
        let h = g.add(h, s1)?;
        let h = stage(g, "up1", h)?;
        let h = up(g, h, l1, l0)?;
        let h = g.add(h, s0)?;
        let h = stage(g, "up0", h)?;
        let h = nn::layer_norm(g, p, "out.ln", h)?;
        let v = nn::linear(g, p, "out", h)?;

        // eps = sqrt(1 - ab) z_t + sqrt(ab) v, so z0_hat = sqrt(ab) z_t - sqrt(1 - ab) v
        let sched = a.schedule()?;
        let per = a.latent_tokens * a.latent_dim;
        let (mut skip, mut gain) = (Vec::with_capacity(b * per), Vec::with_capacity(b * per));
        for &s in t {
            let ab = sched.alpha_bar(s)?;
            skip.extend(std::iter::repeat_n((1.0 - ab).sqrt(), per));
            gain.extend(std::iter::repeat_n(ab.sqrt(), per));
        }
        let skip = g.constant(Tensor::from_f64(&shape, &skip)?);
        let gain = g.constant(Tensor::from_f64(&shape, &gain)?);
        let zs = g.mul(z_t, skip)?;
        let vs = g.mul(v, gain)?;
        g.add(zs, vs)
    }

    pub fn predict_noise(&self, z_t: &Tensor<T>, t: &[usize], y: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let z = g.constant(z_t.clone());
        let yv = g.constant(y.clone());
        let out = self.predict_graph(&mut g, Bind::frozen(&self.params), z, t, yv)?;
        Ok(g.value(out).clone())
    }

    /// One reverse step for a batch sharing timestep `t`.
    pub fn p_sample_step(&self, z_t: &Tensor<T>, t: usize, y: &Tensor<T>, sched: &NoiseSchedule, noise: &Tensor<T>) -> Result<Tensor<T>> {
        let b = z_t.shape()[0];
        let eps_hat = self.predict_noise(z_t, &vec![t; b], y)?;
        reverse_step(z_t, t, &eps_hat, sched, noise)
    }

    /// Ancestral sampling from `z_T ~ N(0, I)` to VAE-space latents
    /// `[B, L_tok, d_sign]`. Row `i` draws all its noise from `rngs[i]`, so
    /// a prompt's sample does not depend on what it is batched with.
    pub fn sample_latents(&self, ys: &[&SentenceEmbedding], rngs: &mut [ChaCha8Rng]) -> Result<Tensor<T>> {
        if ys.is_empty() || ys.len() != rngs.len() {
            return Err(Error::invalid("sampling needs one generator per prompt"));
        }
        let sched = self.arch.schedule()?;
        let row = [self.arch.latent_tokens, self.arch.latent_dim];
        let draw = |rngs: &mut [ChaCha8Rng]| {
            let rows: Vec<Tensor<T>> = rngs.iter_mut().map(|r| Tensor::randn(&row, 1.0, r)).collect();
            Tensor::stack(&rows)
        };
        let y = stack_embeddings::<T>(ys)?;
        let mut z = draw(rngs)?;
        for t in (1..=sched.steps()).rev() {
            let noise = if t > 1 { draw(rngs)? } else { Tensor::zeros(z.shape()) };
            z = self.p_sample_step(&z, t, &y, &sched, &noise)?;
        }
        let inv = 1.0 / self.arch.latent_scale;
        Ok(z.map(|v| v * T::lit(inv)))
    }
}

/// Generator for prompt `index` under a run seed.
pub fn prompt_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Trains the denoiser on VAE posterior means `[L_tok, d_sign]` and their
/// sentence embeddings, with the aligner frozen.
pub fn train_diffusion(
    latents: &[Tensor<f64>],
    texts: &[SentenceEmbedding],
    aligner: &CrossModalAligner<f32>,
    cfg: &DiffusionConfig,
    seed: u64,
) -> Result<(Denoiser<f32>, TrainLog)> {
    if latents.is_empty() || latents.len() != texts.len() {
        return Err(Error::invalid("train_diffusion needs matched, nonempty latents and texts"));
    }
    let shape = latents[0].shape().to_vec();
    let &[lt, ld] = shape.as_slice() else {
        return Err(Error::shape("train_diffusion", format!("latents must be [L_tok, d_sign], got {shape:?}")));
    };
    let count = (latents.len() * lt * ld) as f64;
    let mean = latents.iter().flat_map(|z| z.data()).sum::<f64>() / count;
    let var = latents.iter().flat_map(|z| z.data()).map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    let arch = DenoiserArch::new(lt, ld, cfg, scale)?;
    let sched = arch.schedule()?;

    let text_targets = aligner.text_align(&texts.iter().collect::<Vec<_>>())?;
    let mut model = Denoiser::<f32>::init(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ff_0001);
    let mut draw = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ff_0002);
    let adam = AdamConfig::with_lr(cfg.lr);
    let log = run_epochs(latents.len(), cfg.batch, cfg.epochs, &mut rng, "diffusion", |idx, _| {
        let b = idx.len();
        let z0: Vec<Tensor<f32>> = idx.iter().map(|&i| latents[i].map(|v| v * scale).cast()).collect();
        let z0 = Tensor::stack(&z0)?;
        let t: Vec<usize> = (0..b).map(|_| draw.random_range(1..=sched.steps())).collect();
        let eps = Tensor::<f32>::randn(z0.shape(), 1.0, &mut draw);
        let per = lt * ld;
        let mut zt = Vec::with_capacity(b * per);
        let mut z_over = Vec::with_capacity(b * per);
        let mut eps_coef = Vec::with_capacity(b * per);
        for (i, &ti) in t.iter().enumerate() {
            let ab = sched.alpha_bar[ti - 1];
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            for j in i * per..(i + 1) * per {
                let z = sa * z0.data()[j] as f64 + sb * eps.data()[j] as f64;
                zt.push(z as f32);
                // predicted clean latent, scaled back to VAE space
                z_over.push((z / sa / scale) as f32);
                eps_coef.push((-sb / sa / scale) as f32);
            }
        }
        let zt = Tensor::from_vec(z0.shape(), zt)?;
        let ys: Vec<&SentenceEmbedding> = idx.iter().map(|&i| &texts[i]).collect();

        let mut g = Graph::new();
        let p = Bind::trainable(&model.params);
        let ztv = g.constant(zt);
        let yv = g.constant(stack_embeddings(&ys)?);
        let eps_hat = model.predict_graph(&mut g, p, ztv, &t, yv)?;
        let epsv = g.constant(eps);
        let l_d = diffusion_loss(&mut g, epsv, eps_hat)?;
        let mut out = vec![("l_d", g.value(l_d).item() as f64)];
        let loss = if cfg.semantic_weight > 0.0 {
            let base = g.constant(Tensor::from_vec(z0.shape(), z_over)?);
            let coef = g.constant(Tensor::from_vec(z0.shape(), eps_coef)?);
            let shift = g.mul(eps_hat, coef)?;
            let z0_hat = g.add(base, shift)?;
            let zp = aligner.pose_graph(&mut g, Bind::frozen(&aligner.params), z0_hat)?;
            let target: Vec<f64> = idx.iter().flat_map(|&i| text_targets[i].iter().copied()).collect();
            let zt_text = g.constant(Tensor::from_f64(&[b, aligner.arch.shared_dim], &target)?);
            let l_s = semantic_loss(&mut g, zp, zt_text)?;
            let weights: Vec<f64> = t
                .iter()
                .map(|&ti| cfg.semantic_weight * if cfg.time_factor { time_factor(ti, sched.steps()) } else { 1.0 } / b as f64)
                .collect();
            let wv = g.constant(Tensor::from_f64(&[b], &weights)?);
            let weighted = g.mul(l_s, wv)?;
            let l_s_term = g.sum(weighted)?;
            let l_s_mean = g.value(l_s).data().iter().map(|&v| v as f64).sum::<f64>() / b as f64;
            out.push(("l_s", l_s_mean));
            g.add(l_d, l_s_term)?
        } else {
            l_d
        };
        out.push(("loss", g.value(loss).item() as f64));
        let grads = g.backward(loss)?;
        model.params.adam_step(&grads, &adam)?;
        Ok(out)
    })?;
    Ok((model, log))
}
