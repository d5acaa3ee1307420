//! Parameterized building blocks shared by every network.

use csifm_tensor::{Init, ParamId, ParamStore, Session, Var};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        let w = store.init(&format!("{name}.w"), &[d_in, d_out], Init::FanIn, seed)?;
        let b = store.init(&format!("{name}.b"), &[d_out], Init::Zeros, seed)?;
        Ok(Self { w, b, d_in, d_out })
    }

    /// x[..., d_in] · W + b.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = s.param(self.b);
        let y = s.matmul(x, w)?;
        Ok(s.add(y, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            gain: store.init(&format!("{name}.g"), &[d], Init::Ones, seed)?,
            bias: store.init(&format!("{name}.b"), &[d], Init::Zeros, seed)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        Ok(s.layer_norm(x, g, b, Self::EPS)?)
    }
}

/// Linear → GELU → Linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, seed)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, seed)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.gelu(h);
        self.fc2.forward(s, h)
    }
}

/// Multi-head self-attention over [B, T, d].
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, seed)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, seed)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, seed)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, seed)?,
            heads,
            d,
        })
    }

    fn split_heads(&self, s: &mut Session, x: Var, b: usize, t: usize) -> Result<Var> {
        let dh = self.d / self.heads;
        let x = s.reshape(x, &[b, t, self.heads, dh])?;
        Ok(s.permute(x, &[0, 2, 1, 3])?)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.shape(x).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let dh = self.d / self.heads;
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, x)?;
        let v = self.v.forward(s, x)?;
        let q = self.split_heads(s, q, b, t)?;
        let k = self.split_heads(s, k, b, t)?;
        let v = self.split_heads(s, v, b, t)?;
        let kt = s.transpose(k)?;
        let scores = s.matmul(q, kt)?;
        let scores = s.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = s.softmax_last(scores)?;
        let ctx = s.matmul(attn, v)?;
        let ctx = s.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.reshape(ctx, &[b, t, self.d])?;
        self.o.forward(s, ctx)
    }
}

/// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ff_mult: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, seed)?,
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, seed)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, seed)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d * ff_mult.max(1), d, seed)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.ln1.forward(s, x)?;
        let h = self.attn.forward(s, h)?;
        let x = s.add(x, h)?;
        let h = self.ln2.forward(s, x)?;
        let h = self.mlp.forward(s, h)?;
        Ok(s.add(x, h)?)
    }
}

pub fn run_blocks(blocks: &[Block], s: &mut Session, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(s, x)?;
    }
    Ok(x)
}

/// Standard sinusoidal table: even columns sin(p/10000^(i/d)), odd cos.
pub fn sinusoidal_table(positions: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions * d];
    for p in 0..positions {
        for i in 0..d {
            let exponent = (i - i % 2) as f64 / d as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            out[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
