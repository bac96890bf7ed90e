//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits nonzero if any fails. Pass criterion
//! numbers as arguments to run a subset.

mod common;

use std::cell::OnceCell;
use std::time::{Duration, Instant};

use common::composites::{self, Part};
use common::oracles::{brute_force_dtw, moments, random_seq};
use common::catalog;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use t2sd_core::aligner::{infonce_from_similarities, retrieval_accuracy, CrossModalAligner};
use t2sd_core::autodiff::{grad_check, grad_check_sampled, Graph, ParamStore, Tensor};
use t2sd_core::config::RunConfig;
use t2sd_core::diffusion::{build_schedule, predict_z0, q_sample, total_loss, Denoiser};
use t2sd_core::metrics::{bleu_n, dtw_distance, evaluate_dataset, rouge_l, SyntheticOracle};
use t2sd_core::pipeline::{self, Prepared, Prompt};
use t2sd_core::pose::{generate_synthetic, write_dataset, DatasetHeader, GrammarConfig, SignTextPair, SyntheticGrammar};
use t2sd_core::vae::{stack_poses, LatentCode, SignVae};

type Outcome = Result<(bool, String), String>;
type Criterion<'a> = (usize, &'static str, f64, Box<dyn Fn() -> Outcome + 'a>);

const TRAIN_PAIRS: usize = 512;
const HELD_OUT: usize = 64;
const TRAIN_SYNTH_SEED: u64 = 0;
const HELD_OUT_SYNTH_SEED: u64 = 1;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn schedule_exactness() -> Outcome {
    let s = build_schedule(1000, 1e-4, 0.02).map_err(fail)?;
    let (b1, bt) = (s.beta(1).map_err(fail)?, s.beta(1000).map_err(fail)?);
    let monotone = (1..1000).all(|t| s.beta(t).unwrap() <= s.beta(t + 1).unwrap());
    let decreasing = (1..1000).all(|t| s.alpha_bar(t).unwrap() > s.alpha_bar(t + 1).unwrap());
    let last = s.alpha_bar(1000).map_err(fail)?;
    let ok = b1 == 1e-4 && bt == 0.02 && monotone && decreasing && last < 1e-3;
    Ok((ok, format!("beta_1 {b1:e}, beta_T {bt}, alpha_bar_T {last:.3e}")))
}

fn gradient_suite() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut note = |name: &str, seed: u64, err: f64, passed: bool| {
        checked += 1;
        if err > worst.0 {
            worst = (err, format!("{name}/{seed}"));
        }
        if !passed {
            failures.push(format!("{name}/{seed}"));
        }
    };
    for seed in 0..20 {
        for case in catalog::cases(seed) {
            let r = grad_check(&case.params, 1e-5, 1e-4, case.build).map_err(fail)?;
            note(case.name, seed, r.max_error(), r.passed());
        }
        for case in composites::composites(seed) {
            let r = grad_check_sampled(&case.params, 1e-5, 1e-4, 6, seed, &case.loss).map_err(fail)?;
            note(case.name, seed, r.max_error(), r.passed());
        }
    }
    let detail = format!("{checked} checks, worst {:.2e} at {}, failing {:?}", worst.0, worst.1, failures);
    Ok((failures.is_empty(), detail))
}

fn diffusion_algebra() -> Outcome {
    let s = build_schedule(1000, 1e-4, 0.02).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z0 = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
    let mut round = 0.0f64;
    for t in [1, 2, 500, 999, 1000] {
        let zt = q_sample(&z0, t, &eps, &s).map_err(fail)?;
        let back = predict_z0(&zt, t, &eps, &s).map_err(fail)?;
        round = z0.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(round, f64::max);
    }
    let (t, n, x0) = (50, 100_000, 0.7);
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let e = Tensor::<f64>::randn(&[1], 1.0, &mut rng);
        draws.push(q_sample(&Tensor::scalar(x0), t, &e, &s).map_err(fail)?.item());
    }
    let (m, v) = moments(&draws);
    let ab = s.alpha_bar(t).map_err(fail)?;
    let (em, ev) = (ab.sqrt() * x0, 1.0 - ab);
    let (rm, rv) = (((m - em) / em).abs(), ((v - ev) / ev).abs());
    let ok = round <= 1e-9 && rm < 0.01 && rv < 0.01;
    Ok((ok, format!("round trip {round:.1e}, mean off {:.3}%, var off {:.3}%", rm * 100.0, rv * 100.0)))
}

fn weighting() -> Outcome {
    let steps = 1000;
    let mut detail = Vec::new();
    let mut ok = true;
    for t in [1, steps / 2, steps] {
        let mut p = ParamStore::<f64>::new();
        p.insert("l_d", Tensor::scalar(0.3)).map_err(fail)?;
        p.insert("l_s", Tensor::scalar(0.8)).map_err(fail)?;
        let mut g = Graph::new();
        let (ld, ls) = (g.param(&p, "l_d").map_err(fail)?, g.param(&p, "l_s").map_err(fail)?);
        let l = total_loss(&mut g, ld, ls, t, steps).map_err(fail)?;
        let grads = g.backward(l).map_err(fail)?;
        let got = grads.get("l_s").ok_or("no l_s gradient")?.item();
        let want = 1.0 - t as f64 / steps as f64;
        ok &= got == want;
        detail.push(format!("t={t}: {got}"));
    }
    let den = composites::denoiser(5);
    let grads = |part| -> Result<ParamStore<f64>, String> {
        let loss = composites::diffusion_loss_fn(den.clone(), 5, part);
        let mut g = Graph::new();
        let l = loss(&mut g, &den.params).map_err(fail)?;
        let gr = g.backward(l).map_err(fail)?;
        let mut out = ParamStore::new();
        for (name, v) in gr.iter() {
            out.insert(name.clone(), v.clone()).map_err(fail)?;
        }
        Ok(out)
    };
    let (full, plain) = (grads(Part::Total { t: composites::steps() })?, grads(Part::Noise)?);
    let same = full.len() == plain.len()
        && full.iter().zip(plain.iter()).all(|((na, a), (nb, b))| na == nb && a.data() == b.data());
    ok &= same;
    detail.push(format!("denoiser gradients at t=T equal noise-only: {same}"));
    Ok((ok, detail.join(", ")))
}

fn infonce_values() -> Outcome {
    let value = |rows: &[f64], n: usize| -> Result<f64, String> {
        let mut g = Graph::<f64>::new();
        let sim = g.constant(Tensor::from_f64(&[n, n], rows).map_err(fail)?);
        let l = infonce_from_similarities(&mut g, sim, 1.0).map_err(fail)?;
        Ok(g.value(l).item())
    };
    let one = value(&[0.4], 1)?;
    let two = value(&[1.0, -1.0, -1.0, 1.0], 2)?;
    let want_two = 2.0 * (1.0 + (-2.0f64).exp()).ln();
    let mut ok = one == 0.0 && (two - want_two).abs() <= 1e-9;
    let mut worst = 0.0f64;
    for n in [3, 8, 32] {
        let got = value(&vec![1.0; n * n], n)?;
        worst = worst.max((got - n as f64 * (n as f64).ln()).abs());
    }
    ok &= worst <= 1e-9;
    Ok((ok, format!("B=1 {one}, B=2 off {:.1e}, identical off {worst:.1e}", (two - want_two).abs())))
}

fn dtw_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (a, b) = (random_seq(&mut rng, 5), random_seq(&mut rng, 5));
        if dtw_distance(&a, &b).map_err(fail)? != brute_force_dtw(&a, &b) {
            mismatches += 1;
        }
    }
    let a = random_seq(&mut rng, 5);
    let selfd = dtw_distance(&a, &a).map_err(fail)?;
    Ok((mismatches == 0 && selfd == 0.0, format!("{mismatches} mismatches over 100 pairs, self distance {selfd}")))
}

fn metric_units() -> Outcome {
    let b = bleu_n(&words("a b c d"), &words("a b c d e"), 1).map_err(fail)?;
    let r = rouge_l(&words("a c e"), &words("a b c d e")).map_err(fail)?;
    let (eb, er) = ((b - (1.0f64 - 5.0 / 4.0).exp()).abs(), (r - 0.75).abs());
    Ok((eb <= 1e-9 && er <= 1e-9, format!("BLEU-1 {b:.12}, ROUGE-L {r:.12}")))
}

fn grammar(max_len: usize) -> Result<SyntheticGrammar, String> {
    GrammarConfig { max_len, ..GrammarConfig::default() }.build().map_err(fail)
}

fn desk() -> RunConfig {
    RunConfig::desk()
}

fn recon_mse(vae: &SignVae<f32>, data: &Prepared) -> Result<f64, String> {
    let refs: Vec<_> = data.poses.iter().collect();
    let x = stack_poses::<f32>(&refs).map_err(fail)?;
    let post = vae.encode(&x).map_err(fail)?;
    let y = vae.decode(&LatentCode { tokens: post.mu }).map_err(fail)?;
    let se: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum();
    Ok(se / x.numel() as f64)
}

fn vae_overfit() -> Outcome {
    let mut cfg = desk();
    let pairs = generate_synthetic(&grammar(cfg.data.max_len)?, 32, 8).map_err(fail)?;
    let data = pipeline::prepare(&pairs, cfg.data.dims().map_err(fail)?).map_err(fail)?;
    cfg.vae.epochs = 2000 * cfg.vae.batch / pairs.len();
    let (vae, log) = pipeline::fit_vae(&data, &cfg).map_err(fail)?;
    let mse = recon_mse(&vae, &data)?;
    Ok((mse < 1e-2, format!("{} steps, posterior-mean MSE {mse:.2e}", log.steps)))
}

/// Stages shared by the end-to-end, aligner and ablation criteria.
struct Shared {
    cfg: RunConfig,
    grammar: SyntheticGrammar,
    data: Prepared,
    held_out: Vec<SignTextPair>,
    prompts: Vec<Prompt>,
    vae: OnceCell<(SignVae<f32>, Duration)>,
    z0: OnceCell<Vec<Tensor<f64>>>,
    aligner: OnceCell<(CrossModalAligner<f32>, Duration)>,
    denoiser: OnceCell<(Denoiser<f32>, Duration)>,
}

impl Shared {
    fn new() -> Result<Self, String> {
        let cfg = desk();
        let grammar = grammar(cfg.data.max_len)?;
        let train = generate_synthetic(&grammar, TRAIN_PAIRS, TRAIN_SYNTH_SEED).map_err(fail)?;
        let held_out = generate_synthetic(&grammar, HELD_OUT, HELD_OUT_SYNTH_SEED).map_err(fail)?;
        let data = pipeline::prepare(&train, cfg.data.dims().map_err(fail)?).map_err(fail)?;
        let prompts = held_out.iter().map(Prompt::from_pair).collect::<Result<_, _>>().map_err(fail)?;
        Ok(Shared {
            cfg,
            grammar,
            data,
            held_out,
            prompts,
            vae: OnceCell::new(),
            z0: OnceCell::new(),
            aligner: OnceCell::new(),
            denoiser: OnceCell::new(),
        })
    }

    fn vae(&self) -> &SignVae<f32> {
        &self
            .vae
            .get_or_init(|| {
                let t = Instant::now();
                let (vae, _) = pipeline::fit_vae(&self.data, &self.cfg).expect("VAE training");
                (vae, t.elapsed())
            })
            .0
    }

    fn z0(&self) -> &[Tensor<f64>] {
        self.z0.get_or_init(|| pipeline::latents(self.vae(), &self.data, &self.cfg).expect("encoding"))
    }

    fn aligner(&self) -> &CrossModalAligner<f32> {
        &self
            .aligner
            .get_or_init(|| {
                let z0 = self.z0();
                let t = Instant::now();
                let (al, _) = pipeline::fit_aligner(z0, &self.data, self.vae(), &self.cfg).expect("aligner training");
                (al, t.elapsed())
            })
            .0
    }

    fn denoiser(&self) -> &Denoiser<f32> {
        &self
            .denoiser
            .get_or_init(|| {
                let (z0, al) = (self.z0(), self.aligner());
                let t = Instant::now();
                let (den, _) = pipeline::fit_diffusion(z0, &self.data, al, &self.cfg).expect("diffusion training");
                (den, t.elapsed())
            })
            .0
    }

    fn training_time(&self) -> Duration {
        [self.vae.get().map(|v| v.1), self.aligner.get().map(|v| v.1), self.denoiser.get().map(|v| v.1)]
            .into_iter()
            .flatten()
            .sum()
    }
}

fn retrieval(al: &CrossModalAligner<f32>, z0: &[Tensor<f64>], data: &Prepared) -> Result<(f64, usize), String> {
    let batches = pipeline::distinct_text_batches(&data.texts, 32);
    let mut acc = 0.0;
    for b in &batches {
        let zs: Vec<_> = b.iter().map(|&i| z0[i].cast::<f32>()).collect();
        let zp = al.pose_align(&Tensor::stack(&zs).map_err(fail)?).map_err(fail)?;
        let zt = al.text_align(&b.iter().map(|&i| &data.texts[i]).collect::<Vec<_>>()).map_err(fail)?;
        acc += retrieval_accuracy(&zp, &zt).map_err(fail)?;
    }
    Ok((acc / batches.len() as f64, batches.len()))
}

fn aligner_quality(sh: &Shared) -> Outcome {
    let z0 = &sh.z0()[..256];
    let data = Prepared { poses: sh.data.poses[..256].to_vec(), texts: sh.data.texts[..256].to_vec() };
    let t = Instant::now();
    let (al, _) = pipeline::fit_aligner(z0, &data, sh.vae(), &sh.cfg).map_err(fail)?;
    let secs = t.elapsed().as_secs_f64();
    let (acc, n) = retrieval(&al, z0, &data)?;
    Ok((acc >= 0.9 && secs < 300.0, format!("top-1 {acc:.3} over {n} batches of 32, training {secs:.0}s")))
}

fn end_to_end(sh: &Shared) -> Outcome {
    let den = sh.denoiser();
    let t = Instant::now();
    let gen = pipeline::generate(sh.vae(), den, &sh.prompts, sh.cfg.seed, 0.5, 1).map_err(fail)?;
    let total = sh.training_time() + t.elapsed();
    let rep = evaluate_dataset(&gen, &sh.held_out, &SyntheticOracle::new(sh.grammar.clone())).map_err(fail)?;
    let ok = rep.dtw < 0.15 && rep.bleu1 >= 0.5 && total.as_secs() < 30 * 60;
    Ok((ok, format!("DTW {:.4}, BLEU-1 {:.3}, pipeline {:.0}s", rep.dtw, rep.bleu1, total.as_secs_f64())))
}

fn ablation(sh: &Shared) -> Outcome {
    let (vae, al) = (sh.vae(), sh.aligner());
    let z0 = sh.z0();
    let untrained = pipeline::untrained_aligner(vae, &sh.cfg).map_err(fail)?;
    let agreement = |den: &Denoiser<f32>, seed: u64| -> Result<f64, String> {
        let z = pipeline::sample_latents(den, &sh.prompts, seed, 1).map_err(fail)?;
        pipeline::semantic_agreement(al, &z, &sh.prompts).map_err(fail)
    };
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = sh.cfg.clone();
        cfg.seed = seed;
        let full = if seed == sh.cfg.seed {
            agreement(sh.denoiser(), seed)?
        } else {
            agreement(&pipeline::fit_diffusion(z0, &sh.data, al, &cfg).map_err(fail)?.0, seed)?
        };
        let mut plain_cfg = cfg.clone();
        plain_cfg.diffusion.semantic_weight = 0.0;
        let plain = agreement(&pipeline::fit_diffusion(z0, &sh.data, al, &plain_cfg).map_err(fail)?.0, seed)?;
        let random = agreement(&pipeline::fit_diffusion(z0, &sh.data, &untrained, &cfg).map_err(fail)?.0, seed)?;
        if full > plain && full > random {
            wins += 1;
        }
        rows.push(format!("seed {seed}: full {full:.4} / no L_s {plain:.4} / untrained {random:.4}"));
    }
    Ok((wins >= 2, format!("{wins}/3 seeds hold; {}", rows.join("; "))))
}

fn tiny_run(dir: &std::path::Path) -> Result<Vec<Vec<u8>>, String> {
    let mut cfg = RunConfig::desk();
    cfg.data.max_len = 32;
    cfg.vae.latent_tokens = 4;
    cfg.vae.width = 16;
    cfg.vae.epochs = 2;
    cfg.aligner.width = 16;
    cfg.aligner.d_s = 16;
    cfg.aligner.epochs = 2;
    cfg.diffusion.width = 16;
    cfg.diffusion.steps = 10;
    cfg.diffusion.epochs = 2;
    let g = GrammarConfig { max_len: 32, max_words: 2, ..GrammarConfig::default() }.build().map_err(fail)?;
    let pairs = generate_synthetic(&g, 24, 4).map_err(fail)?;
    let data = pipeline::prepare(&pairs, cfg.data.dims().map_err(fail)?).map_err(fail)?;
    let (vae, _) = pipeline::fit_vae(&data, &cfg).map_err(fail)?;
    let z0 = pipeline::latents(&vae, &data, &cfg).map_err(fail)?;
    let (al, _) = pipeline::fit_aligner(&z0, &data, &vae, &cfg).map_err(fail)?;
    let (den, _) = pipeline::fit_diffusion(&z0, &data, &al, &cfg).map_err(fail)?;
    let prompts = pairs[..6].iter().map(Prompt::from_pair).collect::<Result<Vec<_>, _>>().map_err(fail)?;
    let gen = pipeline::generate(&vae, &den, &prompts, cfg.seed, 0.5, 1).map_err(fail)?;
    pipeline::save_vae(&vae, &cfg, dir.join("vae.ckpt")).map_err(fail)?;
    pipeline::save_aligner(&al, &cfg, dir.join("aligner.ckpt")).map_err(fail)?;
    pipeline::save_denoiser(&den, &cfg, dir.join("diffusion.ckpt")).map_err(fail)?;
    write_dataset(dir.join("gen.jsonl"), &DatasetHeader::new(g.dims()), &gen).map_err(fail)?;
    ["vae.ckpt", "aligner.ckpt", "diffusion.ckpt", "gen.jsonl"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map_err(fail))
        .collect()
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(fail)?, tempfile::tempdir().map_err(fail)?);
    let (x, y) = (tiny_run(a.path())?, tiny_run(b.path())?);
    let same: Vec<bool> = x.iter().zip(&y).map(|(p, q)| p == q).collect();
    Ok((same.iter().all(|&s| s), format!("vae/aligner/diffusion/jsonl identical: {same:?}")))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let shared = match Shared::new() {
        Ok(s) => s,
        Err(e) => {
            println!("acceptance setup failed: {e}");
            std::process::exit(1);
        }
    };
    let criteria: Vec<Criterion> = vec![
        (1, "schedule exactness", 1.0, Box::new(schedule_exactness)),
        (2, "gradient suite", 120.0, Box::new(gradient_suite)),
        (3, "diffusion algebra", 60.0, Box::new(diffusion_algebra)),
        (4, "time-factor weighting", 10.0, Box::new(weighting)),
        (5, "InfoNCE exact values", 1.0, Box::new(infonce_values)),
        (6, "DTW oracle equivalence", 30.0, Box::new(dtw_oracle)),
        (7, "metric unit values", 1.0, Box::new(metric_units)),
        (8, "VAE overfit", 300.0, Box::new(vae_overfit)),
        (9, "aligner retrieval", f64::INFINITY, Box::new(|| aligner_quality(&shared))),
        (10, "end-to-end desk run", f64::INFINITY, Box::new(|| end_to_end(&shared))),
        (11, "ablation direction", 90.0 * 60.0, Box::new(|| ablation(&shared))),
        (12, "determinism", f64::INFINITY, Box::new(determinism)),
    ];
    let mut failed = 0;
    for (n, name, limit, run) in criteria {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok((_, detail)) if secs > limit => (false, format!("{detail}; over the {limit:.0}s budget")),
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!("criterion {n:>2} {name}: {} ({detail}, {secs:.1}s)", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
