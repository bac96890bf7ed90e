//! One finite-difference case per backbone op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use t2sd_core::autodiff::{Graph, ParamStore, Tensor, Var};
use t2sd_core::Result;

pub type Build = fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub params: ParamStore<f64>,
    pub build: Build,
}

fn store(seed: u64, shapes: &[(&str, Vec<usize>)]) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        // keep inputs away from kinks (relu at 0, clamp bounds)
        let t = Tensor::<f64>::randn(shape, 1.0, &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        s.insert(*name, t).unwrap();
    }
    s
}

/// `sum(out ⊙ probe)` with a fixed pseudo-random probe, so gradients differ per element.
fn probe_loss(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0).collect();
    let p = g.constant(Tensor::from_vec(&shape, data)?);
    let m = g.mul(out, p)?;
    g.sum(m)
}

macro_rules! unary {
    ($name:literal, $shape:expr, $op:ident) => {{
        fn build(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
            let x = g.param(s, "x")?;
            let y = g.$op(x)?;
            probe_loss(g, y)
        }
        ($name, vec![("x", $shape.to_vec())], build as Build)
    }};
}

type Spec = (&'static str, Vec<(&'static str, Vec<usize>)>, Build);

pub fn cases(seed: u64) -> Vec<Case> {
    let mut specs: Vec<Spec> = vec![
        unary!("relu", [3, 4], relu),
        unary!("gelu", [3, 4], gelu),
        unary!("softmax", [3, 5], softmax),
        unary!("log_softmax", [3, 5], log_softmax),
        unary!("exp", [3, 4], exp),
        unary!("square", [3, 4], square),
        unary!("sum_last", [2, 3, 4], sum_last),
        unary!("l2_normalize", [3, 6], l2_normalize),
        unary!("diag", [4, 4], diag),
    ];
    fn affine(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
        let y = g.affine(x, w, Some(b))?;
        probe_loss(g, y)
    }
    specs.push(("affine", vec![("x", vec![2, 3, 4]), ("w", vec![4, 5]), ("b", vec![5])], affine));
    fn matmul_nt(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        let y = g.matmul_nt(a, b)?;
        probe_loss(g, y)
    }
    specs.push(("matmul_nt", vec![("a", vec![3, 4]), ("b", vec![5, 4])], matmul_nt));
    fn layer_norm(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let (x, ga, be) = (g.param(s, "x")?, g.param(s, "gamma")?, g.param(s, "beta")?);
        let y = g.layer_norm(x, ga, be)?;
        probe_loss(g, y)
    }
    specs.push(("layer_norm", vec![("x", vec![2, 3, 6]), ("gamma", vec![6]), ("beta", vec![6])], layer_norm));
    fn self_attention(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let x = g.param(s, "x")?;
        let y = g.attention(x, x, x, 2)?;
        probe_loss(g, y)
    }
    specs.push(("self_attention", vec![("x", vec![2, 3, 8])], self_attention));
    fn cross_attention(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let (q, k, v) = (g.param(s, "q")?, g.param(s, "k")?, g.param(s, "v")?);
        let y = g.attention(q, k, v, 2)?;
        probe_loss(g, y)
    }
    specs.push(("cross_attention", vec![("q", vec![2, 3, 8]), ("k", vec![2, 5, 8]), ("v", vec![2, 5, 8])], cross_attention));
    fn residual_add(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        let y = g.add(a, b)?;
        probe_loss(g, y)
    }
    specs.push(("add", vec![("a", vec![2, 3]), ("b", vec![2, 3])], residual_add));
    fn sub(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        let y = g.sub(a, b)?;
        probe_loss(g, y)
    }
    specs.push(("sub", vec![("a", vec![2, 3]), ("b", vec![2, 3])], sub));
    fn mul(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        let y = g.mul(a, b)?;
        probe_loss(g, y)
    }
    specs.push(("mul", vec![("a", vec![2, 3]), ("b", vec![2, 3])], mul));
    fn add_broadcast(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        let y = g.add_broadcast(a, b)?;
        probe_loss(g, y)
    }
    specs.push(("add_broadcast", vec![("a", vec![2, 3, 4]), ("b", vec![2, 1, 4])], add_broadcast));
    fn scale_shift(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let x = g.param(s, "x")?;
        let y = g.scale(x, -1.7)?;
        let y = g.add_scalar(y, 0.3)?;
        probe_loss(g, y)
    }
    specs.push(("scale_add_scalar", vec![("x", vec![3, 2])], scale_shift));
    fn clamp(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let x = g.param(s, "x")?;
        let y = g.clamp(x, -0.7, 0.8)?;
        probe_loss(g, y)
    }
    specs.push(("clamp", vec![("x", vec![4, 4])], clamp));
    fn sum_mean(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let x = g.param(s, "x")?;
        let sq = g.square(x)?;
        let a = g.sum(sq)?;
        let b = g.mean(x)?;
        let b = g.scale(b, 3.0)?;
        g.add(a, b)
    }
    specs.push(("sum_mean", vec![("x", vec![3, 4])], sum_mean));
    fn mean_pool(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let x = g.param(s, "x")?;
        let y = g.mean_pool(x, 3)?;
        probe_loss(g, y)
    }
    specs.push(("mean_pool", vec![("x", vec![2, 6, 3])], mean_pool));
    fn upsample(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let x = g.param(s, "x")?;
        let y = g.upsample(x, 3)?;
        probe_loss(g, y)
    }
    specs.push(("upsample", vec![("x", vec![2, 2, 3])], upsample));
    fn sinusoidal(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let t = g.param(s, "t")?;
        let t = g.scale(t, 4.0)?;
        let y = g.sinusoidal(t, 8)?;
        probe_loss(g, y)
    }
    specs.push(("sinusoidal", vec![("t", vec![3])], sinusoidal));
    fn concat(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        let y = g.concat(a, b)?;
        probe_loss(g, y)
    }
    specs.push(("concat", vec![("a", vec![2, 3, 2]), ("b", vec![2, 3, 4])], concat));
    fn reshape(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let x = g.param(s, "x")?;
        let y = g.reshape(x, &[6, 2])?;
        let y = g.softmax(y)?;
        probe_loss(g, y)
    }
    specs.push(("reshape", vec![("x", vec![2, 3, 2])], reshape));

    specs
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, build))| Case { name, params: store(seed * 1000 + i as u64, &shapes), build })
        .collect()
}
