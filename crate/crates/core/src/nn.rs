//! Building blocks shared by the text and image encoders.

use rand::Rng;

use crate::graph::{Graph, Mat, Var};
use crate::params::{normal_mat, Group, ParamStore};

/// Parameter binding context for one forward pass.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub trainable: &'a dyn Fn(Group) -> bool,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a dyn Fn(Group) -> bool) -> Self {
        Self { store, trainable }
    }

    pub fn bind(&self, g: &mut Graph, id: usize) -> Var {
        let p = self.store.get(id);
        g.param(id, &p.value, (self.trainable)(p.group))
    }
}

/// Nothing trainable; used for inference and frozen sub-networks.
pub fn frozen(_: Group) -> bool {
    false
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, normal_mat(rng, fan_in, fan_out, std));
        let b = bias.then(|| store.add(format!("{name}.b"), group, Mat::zeros((1, fan_out))));
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, group: Group, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), group, Mat::zeros((fan_in, fan_out)));
        let b = Some(store.add(format!("{name}.b"), group, Mat::zeros((1, fan_out))));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Var {
        let w = ctx.bind(g, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = ctx.bind(g, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Mat::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), group, Mat::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Var {
        let gamma = ctx.bind(g, self.gamma);
        let beta = ctx.bind(g, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        dim: usize,
        heads: usize,
        out_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (dim as f64).powf(-0.5);
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, dim, dim, std, true, rng),
            k: Linear::new(store, &format!("{name}.k"), group, dim, dim, std, true, rng),
            v: Linear::new(store, &format!("{name}.v"), group, dim, dim, std, true, rng),
            o: Linear::new(store, &format!("{name}.o"), group, dim, dim, out_std, true, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &Ctx,
        query: Var,
        context: Var,
        batch: usize,
        masks: Option<&[Mat]>,
    ) -> Var {
        let q = self.q.forward(g, ctx, query);
        let k = self.k.forward(g, ctx, context);
        let v = self.v.forward(g, ctx, context);
        let a = g.attention(q, k, v, self.heads, batch, masks);
        self.o.forward(g, ctx, a)
    }
}

/// Pre-norm transformer layer: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        dim: usize,
        heads: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = 4 * dim;
        let out_std = (dim as f64).powf(-0.5) / (2.0 * depth as f64).sqrt();
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, dim),
            attn: Attention::new(store, &format!("{name}.attn"), group, dim, heads, out_std, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), group, dim, hidden, (dim as f64).powf(-0.5), true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), group, hidden, dim, out_std, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var, batch: usize, masks: Option<&[Mat]>) -> Var {
        let h = self.ln1.forward(g, ctx, x);
        let a = self.attn.forward(g, ctx, h, h, batch, masks);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, ctx, x);
        let h = self.fc1.forward(g, ctx, h);
        let h = g.quick_gelu(h);
        let h = self.fc2.forward(g, ctx, h);
        g.add(x, h)
    }
}
