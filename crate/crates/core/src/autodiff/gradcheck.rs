use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::Result;

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in name order.
    pub per_param: Vec<(String, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.per_param.iter().all(|(_, e)| *e < self.tol)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares reverse-mode gradients of `loss` against central differences
/// with step `h`, element by element, for every parameter in `params`.
pub fn grad_check<F>(params: &ParamStore<f64>, h: f64, tol: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_entries(params, h, tol, loss, |n| (0..n).collect())
}

/// Like [`grad_check`], but probes at most `per_tensor` entries of each
/// parameter, drawn without replacement from `seed`. Meant for models whose
/// full check would need millions of forward passes.
pub fn grad_check_sampled<F>(params: &ParamStore<f64>, h: f64, tol: f64, per_tensor: usize, seed: u64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    check_entries(params, h, tol, loss, |n| {
        let mut idx = index::sample(&mut rng, n, per_tensor.min(n)).into_vec();
        idx.sort_unstable();
        idx
    })
}

fn check_entries<F, S>(params: &ParamStore<f64>, h: f64, tol: f64, loss: F, mut select: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    S: FnMut(usize) -> Vec<usize>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, params)?;
    let grads = g.backward(out)?;

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        Ok(g.value(out).item())
    };

    let mut probe = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    for name in params.names() {
        let n = params.get(name).expect("listed").numel();
        let analytic = grads.get(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut worst = 0.0f64;
        for i in select(n) {
            let orig = params.get(name).expect("listed").data()[i];
            probe.get_mut(name).expect("listed").data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("listed").data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("listed").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport { per_param, tol })
}
