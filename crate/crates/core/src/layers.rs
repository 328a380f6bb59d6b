//! Transformer building blocks over the autodiff graph.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use repair_tensor::{Graph, ParamId, ParamStore, Real, Result, Var};

/// Everything a forward pass needs besides its inputs.
pub(crate) struct Fwd<'a, T: Real> {
    pub g: &'a Graph<T>,
    pub store: &'a ParamStore<T>,
    pub dropout: f64,
    pub rng: Option<&'a RefCell<ChaCha8Rng>>,
}

impl<'a, T: Real> Fwd<'a, T> {
    pub fn eval(g: &'a Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self { g, store, dropout: 0.0, rng: None }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn drop(&self, x: Var) -> Result<Var> {
        match self.rng {
            Some(rng) if self.dropout > 0.0 => self.g.dropout(x, self.dropout, &mut *rng.borrow_mut()),
            _ => Ok(x),
        }
    }
}

pub(crate) struct Init<'a, T: Real, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub std: f64,
}

impl<T: Real, R: Rng> Init<'_, T, R> {
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.normal(name, shape, self.std, self.rng)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.store.constant(name, shape, v)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(init: &mut Init<T, R>, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            w: init.normal(&format!("{name}.w"), &[inp, out])?,
            b: init.constant(&format!("{name}.b"), &[out], 0.0)?,
        })
    }

    pub fn forward<T: Real>(&self, f: &Fwd<T>, x: Var) -> Result<Var> {
        let y = f.g.matmul(x, f.p(self.w))?;
        f.g.add_bias(y, f.p(self.b))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng>(init: &mut Init<T, R>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.g"), &[dim], 1.0)?,
            beta: init.constant(&format!("{name}.b"), &[dim], 0.0)?,
        })
    }

    pub fn forward<T: Real>(&self, f: &Fwd<T>, x: Var) -> Result<Var> {
        f.g.layer_norm(x, f.p(self.gamma), f.p(self.beta))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng>(init: &mut Init<T, R>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(init, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(init, &format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn forward<T: Real>(&self, f: &Fwd<T>, x: Var) -> Result<Var> {
        let h = f.g.gelu(self.up.forward(f, x)?)?;
        self.down.forward(f, h)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng>(init: &mut Init<T, R>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(init, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(init, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(init, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    pub fn keys_values<T: Real>(&self, f: &Fwd<T>, src: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(f, src)?, self.v.forward(f, src)?))
    }

    /// Multi-head attention of `query` rows over precomputed keys and values.
    pub fn attend<T: Real>(&self, f: &Fwd<T>, query: Var, keys: Var, values: Var, causal: bool) -> Result<Var> {
        let g = f.g;
        let q = self.q.forward(f, query)?;
        let shape = g.shape(q);
        let (n, dim) = (shape[0], shape[1]);
        let m = g.shape(keys)[0];
        let dh = dim / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mask: Option<Vec<bool>> =
            causal.then(|| (0..n).flat_map(|i| (0..m).map(move |j| j > i)).collect());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice(q, 1, a, b)?;
            let kh = g.slice(keys, 1, a, b)?;
            let vh = g.slice(values, 1, a, b)?;
            let mut s = g.scale(g.matmul_nt(qh, kh)?, scale)?;
            if let Some(mask) = &mask {
                s = g.masked_fill(s, mask, T::neg_infinity())?;
            }
            let p = f.drop(g.softmax(s, 1)?)?;
            outs.push(g.matmul(p, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.o.forward(f, joined)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Real, R: Rng>(init: &mut Init<T, R>, name: &str, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(init, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(init, &format!("{name}.ffn"), dim, ffn)?,
        })
    }

    pub fn forward<T: Real>(&self, f: &Fwd<T>, x: Var) -> Result<Var> {
        let g = f.g;
        let h = self.ln1.forward(f, x)?;
        let (k, v) = self.attn.keys_values(f, h)?;
        let a = self.attn.attend(f, h, k, v, false)?;
        let x = g.add(x, f.drop(a)?)?;
        let h = self.ln2.forward(f, x)?;
        let y = self.ffn.forward(f, h)?;
        g.add(x, f.drop(y)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross: Attention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Real, R: Rng>(init: &mut Init<T, R>, name: &str, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim)?,
            self_attn: Attention::new(init, &format!("{name}.self"), dim, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim)?,
            cross: Attention::new(init, &format!("{name}.cross"), dim, heads)?,
            ln3: LayerNorm::new(init, &format!("{name}.ln3"), dim)?,
            ffn: FeedForward::new(init, &format!("{name}.ffn"), dim, ffn)?,
        })
    }

    pub fn cross_keys_values<T: Real>(&self, f: &Fwd<T>, memory: Var) -> Result<(Var, Var)> {
        self.cross.keys_values(f, memory)
    }

    pub fn forward<T: Real>(&self, f: &Fwd<T>, x: Var, cross_kv: (Var, Var)) -> Result<Var> {
        let g = f.g;
        let h = self.ln1.forward(f, x)?;
        let (k, v) = self.self_attn.keys_values(f, h)?;
        let a = self.self_attn.attend(f, h, k, v, true)?;
        let x = g.add(x, f.drop(a)?)?;
        let h = self.ln2.forward(f, x)?;
        let c = self.cross.attend(f, h, cross_kv.0, cross_kv.1, false)?;
        let x = g.add(x, f.drop(c)?)?;
        let h = self.ln3.forward(f, x)?;
        let y = self.ffn.forward(f, h)?;
        g.add(x, f.drop(y)?)
    }
}

/// Copies every parameter of `src` whose name also exists in `dst`.
pub(crate) fn copy_matching<T: Real>(dst: &mut ParamStore<T>, src: &ParamStore<T>) -> Result<usize> {
    let mut copied = 0;
    for p in src.iter() {
        if let Ok(id) = dst.id(&p.name) {
            let target = dst.get_mut(id);
            if target.value.shape() != p.value.shape() {
                return Err(repair_tensor::TensorError::Shape {
                    op: "copy",
                    lhs: target.value.shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
            target.value = p.value.clone();
            copied += 1;
        }
    }
    Ok(copied)
}
