//! Layers and network blocks. Each block owns parameter ids into a shared
//! [`ParamStore`] and records its forward pass on a [`Graph`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-6;
pub const STD_EPS: f64 = 1e-6;

fn spatial<T: Real>(g: &Graph<T>, v: Var) -> [usize; 3] {
    let s = g.shape(v);
    [s[2], s[3], s[4]]
}

#[derive(Debug, Clone)]
pub struct Pointwise {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Pointwise {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.weight"), uniform_fan_in(&[cout, cin], cin, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), uniform_fan_in(&[cout], cin, rng)));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.pointwise(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv {
    pub fn depthwise(store: &mut ParamStore, name: &str, c: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan = k * k * k;
        Self {
            w: store.add(format!("{name}.weight"), uniform_fan_in(&[c, 1, k, k, k], fan, rng)),
            b: store.add(format!("{name}.bias"), uniform_fan_in(&[c], fan, rng)),
            stride,
            pad: k / 2,
            groups: c,
        }
    }

    pub fn dense(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        let fan = cin * k * k * k;
        Self {
            w: store.add(format!("{name}.weight"), uniform_fan_in(&[cout, cin, k, k, k], fan, rng)),
            b: store.add(format!("{name}.bias"), uniform_fan_in(&[cout], fan, rng)),
            stride: 1,
            pad: k / 2,
            groups: 1,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv3d(x, w, Some(b), self.stride, self.pad, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub w: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), Tensor::full(&[c], 1.0)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.layer_norm(x, w, b, T::of(LN_EPS))
    }
}

/// Depthwise k^3 conv followed by a pointwise channel mix, C -> C.
#[derive(Debug, Clone)]
pub struct DwsConv {
    pub dw: Conv,
    pub pw: Pointwise,
}

impl DwsConv {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            dw: Conv::depthwise(store, &format!("{name}.dw"), c, k, 1, rng),
            pw: Pointwise::new(store, &format!("{name}.pw"), c, c, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.dw.forward(g, store, x);
        self.pw.forward(g, store, y)
    }
}

/// Multi-scale dense attention: three densely chained dws convs, channel
/// attention from global statistics, then a pointwise fusion.
#[derive(Debug, Clone)]
pub struct Msda {
    pub convs: [DwsConv; 3],
    pub attn_w: ParamId,
    pub attn_b: ParamId,
    pub pw_a: Pointwise,
    pub pw_b: Pointwise,
    pub pw_out: Pointwise,
    pub ln: LayerNorm,
}

impl Msda {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, kernels: [usize; 3], rng: &mut impl Rng) -> Self {
        let convs = [0, 1, 2].map(|i| DwsConv::new(store, &format!("{name}.dws{}", kernels[i]), c, kernels[i], rng));
        let attn_w = store.add(format!("{name}.attn.weight"), uniform_fan_in(&[3 * c, 9 * c], 9 * c, rng));
        let attn_b = store.add(format!("{name}.attn.bias"), uniform_fan_in(&[3 * c], 9 * c, rng));
        Self {
            convs,
            attn_w,
            attn_b,
            pw_a: Pointwise::new(store, &format!("{name}.pw_a"), 3 * c, 3 * c, true, rng),
            pw_b: Pointwise::new(store, &format!("{name}.pw_b"), 3 * c, 3 * c, true, rng),
            pw_out: Pointwise::new(store, &format!("{name}.pw_out"), 3 * c, c, true, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), c),
        }
    }

    /// Returns the block output and the (B, 3C) attention weights.
    pub fn forward_with_attention<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let f1 = self.convs[0].forward(g, store, x);
        let t = self.convs[1].forward(g, store, f1);
        let f2 = g.add(t, f1);
        let t = self.convs[2].forward(g, store, f2);
        let t = g.add(t, f2);
        let f3 = g.add(t, f1);
        let f = g.concat_channels(&[f1, f2, f3]);
        let s = g.channel_stats(f, T::of(STD_EPS));
        let w = g.param(store, self.attn_w);
        let b = g.param(store, self.attn_b);
        let logits = g.linear(s, w, b);
        let a = g.softmax_rows(logits);
        let fa = g.mul_channels(f, a);
        let u = self.pw_a.forward(g, store, fa);
        let v = self.pw_b.forward(g, store, f);
        let u = g.add(u, v);
        let y = self.pw_out.forward(g, store, u);
        let y = g.gelu(y);
        (self.ln.forward(g, store, y), a)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        self.forward_with_attention(g, store, x).0
    }
}

/// Token mixer inside an MLK block; `Plain` is the ablation without MSDA.
#[derive(Debug, Clone)]
pub enum Mixer {
    Msda(Msda),
    Plain(DwsConv),
}

#[derive(Debug, Clone)]
pub struct Mlk {
    pub ln1: LayerNorm,
    pub mixer: Mixer,
    pub gamma1: ParamId,
    pub ln2: LayerNorm,
    pub mlp_up: Pointwise,
    pub mlp_down: Pointwise,
    pub gamma2: ParamId,
    pub out: Pointwise,
}

#[derive(Debug, Clone, Copy)]
pub struct MlkOptions {
    pub mlp_ratio: usize,
    pub gamma0: f32,
    pub kernels: [usize; 3],
    pub use_msda: bool,
}

impl Mlk {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, opts: MlkOptions, rng: &mut impl Rng) -> Self {
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), c);
        let mixer = if opts.use_msda {
            Mixer::Msda(Msda::new(store, &format!("{name}.msda"), c, opts.kernels, rng))
        } else {
            Mixer::Plain(DwsConv::new(store, &format!("{name}.mixer"), c, 3, rng))
        };
        let gamma1 = store.add(format!("{name}.gamma1"), Tensor::full(&[c], opts.gamma0));
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), c);
        let hidden = opts.mlp_ratio * c;
        Self {
            ln1,
            mixer,
            gamma1,
            ln2,
            mlp_up: Pointwise::new(store, &format!("{name}.mlp.up"), c, hidden, true, rng),
            mlp_down: Pointwise::new(store, &format!("{name}.mlp.down"), hidden, c, true, rng),
            gamma2: store.add(format!("{name}.gamma2"), Tensor::full(&[c], opts.gamma0)),
            out: Pointwise::new(store, &format!("{name}.out"), c, c, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = self.ln1.forward(g, store, x);
        let m = match &self.mixer {
            Mixer::Msda(m) => m.forward(g, store, n),
            Mixer::Plain(d) => d.forward(g, store, n),
        };
        let g1 = g.param(store, self.gamma1);
        let m = g.scale_channels(m, g1);
        let z = g.add(x, m);
        let n = self.ln2.forward(g, store, z);
        let h = self.mlp_up.forward(g, store, n);
        let h = g.gelu(h);
        let h = self.mlp_down.forward(g, store, h);
        let g2 = g.param(store, self.gamma2);
        let h = g.scale_channels(h, g2);
        let z = g.add(z, h);
        self.out.forward(g, store, z)
    }
}

/// Dense stride-2 downsampling with an average-pool residual.
#[derive(Debug, Clone)]
pub struct Dsd {
    pub dw: Conv,
    pub expand: Pointwise,
    pub fuse: Pointwise,
    pub proj: Option<Pointwise>,
}

impl Dsd {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            dw: Conv::depthwise(store, &format!("{name}.dw"), cin, 3, 2, rng),
            expand: Pointwise::new(store, &format!("{name}.expand"), cin, 4 * cin, true, rng),
            fuse: Pointwise::new(store, &format!("{name}.fuse"), 5 * cin, cout, true, rng),
            proj: (cin != cout).then(|| Pointwise::new(store, &format!("{name}.proj"), cin, cout, false, rng)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let x1 = self.dw.forward(g, store, x);
        let x2 = self.expand.forward(g, store, x1);
        let cat = g.concat_channels(&[x1, x2]);
        let y = self.fuse.forward(g, store, cat);
        let mut r = g.avgpool2(x);
        if let Some(p) = &self.proj {
            r = p.forward(g, store, r);
        }
        g.add(y, r)
    }
}

/// Deep-to-shallow fusion: F = up2(pw(E_deep)) + E_shallow.
#[derive(Debug, Clone)]
pub struct Bff {
    pub pw: Pointwise,
}

impl Bff {
    pub fn new(store: &mut ParamStore, name: &str, c_deep: usize, c_shallow: usize, rng: &mut impl Rng) -> Self {
        Self {
            pw: Pointwise::new(store, &format!("{name}.pw"), c_deep, c_shallow, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, deep: Var, shallow: Var) -> Var {
        let p = self.pw.forward(g, store, deep);
        let target = spatial(g, shallow);
        let u = g.upsample2(p, target);
        g.add(u, shallow)
    }
}

/// Stem: dense 3^3 conv, LN, GELU.
#[derive(Debug, Clone)]
pub struct Head {
    pub conv: Conv,
    pub ln: LayerNorm,
}

impl Head {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv::dense(store, &format!("{name}.conv"), cin, cout, 3, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), cout),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.conv.forward(g, store, x);
        let y = self.ln.forward(g, store, y);
        g.gelu(y)
    }
}

/// Decoder channel match: pointwise c_deep -> c_shallow, then nearest x2
/// upsampling. The two commute exactly, so mixing channels first is just
/// the cheaper order.
pub fn decoder_up<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, pw: &Pointwise, x: Var, target: [usize; 3]) -> Var {
    let p = pw.forward(g, store, x);
    g.upsample2(p, target)
}
