//! Tiny 64-bit models wired into each training objective, for finite
//! difference checks of the composite losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use t2sd_core::aligner::{infonce_loss, stack_embeddings, AlignerArch, CrossModalAligner, HashedBagOfWords, TextEmbedder};
use t2sd_core::autodiff::nn::Bind;
use t2sd_core::autodiff::{Graph, ParamStore, Tensor, Var};
use t2sd_core::config::{DiffusionConfig, VaeConfig};
use t2sd_core::diffusion::{build_schedule, diffusion_loss, q_sample, semantic_loss, total_loss, Denoiser, DenoiserArch};
use t2sd_core::pose::PoseDims;
use t2sd_core::vae::{vae_loss, SignVae, VaeArch};
use t2sd_core::Result;

pub type Loss = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

pub struct Composite {
    pub name: &'static str,
    pub params: ParamStore<f64>,
    pub loss: Loss,
}

const STEPS: usize = 50;

fn texts(b: usize) -> Tensor<f64> {
    let words = ["sun", "rain wind", "cold today", "hello thanks"];
    let ys: Vec<_> = (0..b)
        .map(|i| HashedBagOfWords.embed(&words[i % 4].split(' ').map(str::to_owned).collect::<Vec<_>>()).unwrap())
        .collect();
    stack_embeddings(&ys.iter().collect::<Vec<_>>()).unwrap()
}

fn vae_case(seed: u64) -> Composite {
    let dims = PoseDims::new(3, 2, 8).unwrap();
    let cfg = VaeConfig { latent_tokens: 2, d_sign: 3, width: 8, depth: 1, heads: 2, ..VaeConfig::default() };
    let vae = SignVae::<f64>::init(VaeArch::new(dims, &cfg).unwrap(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let x = Tensor::<f64>::randn(&[2, 8, 6], 0.5, &mut rng);
    let noise = Tensor::<f64>::randn(&[2, 2, 3], 1.0, &mut rng);
    let params = vae.params.clone();
    let loss: Loss = Box::new(move |g, p| {
        let b = Bind::trainable(p);
        let target = g.constant(x.clone());
        let (mu, lv) = vae.encode_graph(g, b, target)?;
        let eps = g.constant(noise.clone());
        let half = g.scale(lv, 0.5)?;
        let std = g.exp(half)?;
        let spread = g.mul(std, eps)?;
        let z = g.add(mu, spread)?;
        let recon = vae.decode_graph(g, b, z)?;
        Ok(vae_loss(g, target, recon, mu, lv, 0.1)?.total)
    });
    Composite { name: "vae_objective", params, loss }
}

fn aligner(seed: u64) -> CrossModalAligner<f64> {
    let arch = AlignerArch { latent_tokens: 4, latent_dim: 3, width: 6, shared_dim: 5 };
    CrossModalAligner::init(arch, seed).unwrap()
}

fn infonce_case(seed: u64) -> Composite {
    let al = aligner(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdef);
    let z = Tensor::<f64>::randn(&[4, 4, 3], 1.0, &mut rng);
    let y = texts(4);
    let params = al.params.clone();
    let loss: Loss = Box::new(move |g, p| {
        let b = Bind::trainable(p);
        let zv = g.constant(z.clone());
        let yv = g.constant(y.clone());
        let zp = al.pose_graph(g, b, zv)?;
        let zt = al.text_graph(g, b, yv)?;
        infonce_loss(g, zp, zt, 0.7, seed.is_multiple_of(2))
    });
    Composite { name: "infonce", params, loss }
}

/// Noisy latents, their noise, per-sample timesteps and the affine map
/// `z0_hat = base + coef * eps_hat` for a batch of three.
struct DiffusionBatch {
    zt: Tensor<f64>,
    eps: Tensor<f64>,
    t: Vec<usize>,
    base: Tensor<f64>,
    coef: Tensor<f64>,
    y: Tensor<f64>,
}

fn diffusion_batch(seed: u64) -> DiffusionBatch {
    let sched = build_schedule(STEPS, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x123);
    let t = vec![1 + seed as usize % STEPS, 25, STEPS - 3];
    let (mut zt, mut eps, mut base, mut coef) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &ti in &t {
        let z0 = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let e = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let z = q_sample(&z0, ti, &e, &sched).unwrap();
        let ab = sched.alpha_bar(ti).unwrap();
        base.extend(z.data().iter().map(|v| v / ab.sqrt()));
        coef.extend(std::iter::repeat_n(-(1.0 - ab).sqrt() / ab.sqrt(), 12));
        zt.extend_from_slice(z.data());
        eps.extend_from_slice(e.data());
    }
    let shape = [3, 4, 3];
    DiffusionBatch {
        zt: Tensor::from_vec(&shape, zt).unwrap(),
        eps: Tensor::from_vec(&shape, eps).unwrap(),
        t,
        base: Tensor::from_vec(&shape, base).unwrap(),
        coef: Tensor::from_vec(&shape, coef).unwrap(),
        y: texts(3),
    }
}

pub fn denoiser(seed: u64) -> Denoiser<f64> {
    let cfg = DiffusionConfig { width: 8, heads: 2, steps: STEPS, ..DiffusionConfig::default() };
    Denoiser::init(DenoiserArch::new(4, 3, &cfg, 1.0).unwrap(), seed).unwrap()
}

/// Which parts of the diffusion objective a case includes.
#[derive(Clone, Copy)]
pub enum Part {
    Noise,
    Semantic,
    Total { t: usize },
}

/// Diffusion objective on [`denoiser`] with a frozen aligner.
pub fn diffusion_loss_fn(den: Denoiser<f64>, seed: u64, part: Part) -> Loss {
    let al = aligner(seed ^ 0x77);
    let batch = diffusion_batch(seed);
    Box::new(move |g, p| {
        let zv = g.constant(batch.zt.clone());
        let yv = g.constant(batch.y.clone());
        let eh = den.predict_graph(g, Bind::trainable(p), zv, &batch.t, yv)?;
        let ev = g.constant(batch.eps.clone());
        let l_d = diffusion_loss(g, ev, eh)?;
        if let Part::Noise = part {
            return Ok(l_d);
        }
        let bv = g.constant(batch.base.clone());
        let cv = g.constant(batch.coef.clone());
        let shift = g.mul(eh, cv)?;
        let z0_hat = g.add(bv, shift)?;
        let frozen = Bind::frozen(&al.params);
        let zp = al.pose_graph(g, frozen, z0_hat)?;
        let yt = g.constant(batch.y.clone());
        let zt = al.text_graph(g, frozen, yt)?;
        let per = semantic_loss(g, zp, zt)?;
        let l_s = g.mean(per)?;
        match part {
            Part::Semantic => Ok(l_s),
            Part::Total { t } => total_loss(g, l_d, l_s, t, STEPS),
            Part::Noise => unreachable!(),
        }
    })
}

pub fn steps() -> usize {
    STEPS
}

pub fn composites(seed: u64) -> Vec<Composite> {
    let diffusion = |name, part| {
        let den = denoiser(seed);
        let params = den.params.clone();
        Composite { name, params, loss: diffusion_loss_fn(den, seed, part) }
    };
    vec![
        vae_case(seed),
        infonce_case(seed),
        diffusion("noise_mse", Part::Noise),
        diffusion("semantic", Part::Semantic),
        diffusion("weighted_total", Part::Total { t: 1 + seed as usize % STEPS }),
    ]
}
