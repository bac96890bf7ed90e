//! Parameterized building blocks composed from the op catalog.

use rand::Rng;

use super::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::Result;

/// A parameter store bound to a recording either as trainable leaves or as
/// constants (frozen upstream models).
#[derive(Debug, Clone, Copy)]
pub struct Bind<'a, T> {
    store: &'a ParamStore<T>,
    trainable: bool,
}

impl<'a, T: Scalar> Bind<'a, T> {
    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Bind { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Bind { store, trainable: false }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn var(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if self.trainable {
            g.param(self.store, name)
        } else {
            g.frozen(self.store, name)
        }
    }
}

/// Xavier-uniform weight `[din, dout]` and zero bias.
pub fn init_linear<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = (6.0 / (din + dout) as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::uniform(&[din, dout], bound, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[dout]))
}

pub fn init_linear_zero<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Result<()> {
    store.insert(format!("{name}.w"), Tensor::zeros(&[din, dout]))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[dout]))
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, p: Bind<'_, T>, name: &str, x: Var) -> Result<Var> {
    let w = p.var(g, &format!("{name}.w"))?;
    let b = p.var(g, &format!("{name}.b"))?;
    g.affine(x, w, Some(b))
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::full(&[d], T::one()))?;
    store.insert(format!("{name}.beta"), Tensor::zeros(&[d]))
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: Bind<'_, T>, name: &str, x: Var) -> Result<Var> {
    let gamma = p.var(g, &format!("{name}.gamma"))?;
    let beta = p.var(g, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// Two-layer perceptron with a GELU in between.
pub fn init_mlp<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    din: usize,
    hidden: usize,
    dout: usize,
    rng: &mut R,
) -> Result<()> {
    init_linear(store, &format!("{name}.fc1"), din, hidden, rng)?;
    init_linear(store, &format!("{name}.fc2"), hidden, dout, rng)
}

pub fn mlp<T: Scalar>(g: &mut Graph<T>, p: Bind<'_, T>, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, p, &format!("{name}.fc2"), h)
}

fn init_attention<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.{proj}"), width, width, rng)?;
    }
    Ok(())
}

fn attention<T: Scalar>(g: &mut Graph<T>, p: Bind<'_, T>, name: &str, x: Var, memory: Var, heads: usize) -> Result<Var> {
    let q = linear(g, p, &format!("{name}.q"), x)?;
    let k = linear(g, p, &format!("{name}.k"), memory)?;
    let v = linear(g, p, &format!("{name}.v"), memory)?;
    let a = g.attention(q, k, v, heads)?;
    linear(g, p, &format!("{name}.o"), a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub width: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Adds a cross-attention sub-layer over a memory sequence.
    pub cross: bool,
}

pub fn init_block<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: BlockConfig, rng: &mut R) -> Result<()> {
    init_layer_norm(store, &format!("{name}.ln1"), cfg.width)?;
    init_attention(store, &format!("{name}.self"), cfg.width, rng)?;
    if cfg.cross {
        init_layer_norm(store, &format!("{name}.ln2"), cfg.width)?;
        init_attention(store, &format!("{name}.cross"), cfg.width, rng)?;
    }
    init_layer_norm(store, &format!("{name}.ln3"), cfg.width)?;
    init_mlp(store, &format!("{name}.ff"), cfg.width, cfg.ff_hidden, cfg.width, rng)
}

/// Pre-norm transformer block on `[B, L, width]`.
pub fn block<T: Scalar>(
    g: &mut Graph<T>,
    p: Bind<'_, T>,
    name: &str,
    cfg: BlockConfig,
    x: Var,
    memory: Option<Var>,
) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{name}.ln1"), x)?;
    let a = attention(g, p, &format!("{name}.self"), h, h, cfg.heads)?;
    let mut x = g.add(x, a)?;
    if cfg.cross {
        let mem = memory.ok_or_else(|| crate::Error::shape("block", format!("{name} needs a memory sequence")))?;
        let h = layer_norm(g, p, &format!("{name}.ln2"), x)?;
        let a = attention(g, p, &format!("{name}.cross"), h, mem, cfg.heads)?;
        x = g.add(x, a)?;
    }
    let h = layer_norm(g, p, &format!("{name}.ln3"), x)?;
    let f = mlp(g, p, &format!("{name}.ff"), h)?;
    g.add(x, f)
}
