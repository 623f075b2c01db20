//! Reverse-mode autodiff tape. Every op computes its value eagerly and
//! stores a closure that maps the output gradient to input gradients.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// What a backward closure sees.
pub struct BackwardCtx<'a, T: Real = f32> {
    pub grad: &'a Tensor<T>,
    pub value: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Whether each input wants a gradient; closures may skip work otherwise.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T = f32> = Box<dyn Fn(&BackwardCtx<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: &'static str,
    forward_time: Duration,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    macs: u64,
    no_grad: bool,
    last_push: Option<Instant>,
}

pub struct Grads<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
    backward_times: Vec<Duration>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter that took part in the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, n)| self.grads[n].as_ref().map(|g| (id, g)))
    }
}

fn spatial3<T: Real>(t: &Tensor<T>) -> [usize; 3] {
    let [_, _, d, h, w] = t.dims5();
    [d, h, w]
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            macs: 0,
            no_grad: false,
            last_push: None,
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters are constants: nothing is differentiable
    /// and no backward closures are kept.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    /// Multiply-adds performed by conv, pointwise and linear ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_op(&mut self, op: &'static str, value: Tensor<T>, parents: Vec<usize>, backward: Option<BackwardFn<T>>) -> Var {
        let v = self.push(value, parents, backward);
        self.nodes[v.0].op = op;
        v
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<usize>, backward: Option<BackwardFn<T>>) -> Var {
        let now = Instant::now();
        let elapsed = now - self.last_push.unwrap_or(now);
        self.last_push = Some(now);
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
            param: None,
            op: "leaf",
            forward_time: elapsed,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, vec![], None)
    }

    /// Differentiable leaf (e.g. an input under a gradient check).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, vec![], None);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Parameter leaf; repeated calls for the same id return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = if self.no_grad {
            self.input(store.get(id).clone())
        } else {
            self.leaf(store.get(id).clone())
        };
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Register a user-defined op.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        self.push(value, inputs.iter().map(|v| v.0).collect(), Some(backward))
    }

    /// Wall time per op kind: (op, forward, backward), slowest first. The
    /// forward time of an op is the time since the previous node was
    /// recorded, so it includes any work the caller did in between.
    pub fn profile(&self, grads: Option<&Grads<T>>) -> Vec<(&'static str, Duration, Duration)> {
        let mut rows: Vec<(&'static str, Duration, Duration)> = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let b = grads.map_or(Duration::ZERO, |g| g.backward_times[i]);
            match rows.iter_mut().find(|r| r.0 == n.op) {
                Some(r) => {
                    r.1 += n.forward_time;
                    r.2 += b;
                }
                None => rows.push((n.op, n.forward_time, b)),
            }
        }
        rows.sort_by_key(|r| std::cmp::Reverse(r.1 + r.2));
        rows
    }

    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut backward_times = vec![Duration::ZERO; self.nodes.len()];
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = BackwardCtx {
                grad: &g,
                value: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let t0 = Instant::now();
            let pgrads = bw(&ctx);
            backward_times[i] = t0.elapsed();
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (id, i)))
            .collect();
        Grads {
            grads,
            params,
            backward_times,
        }
    }

    /// Grouped 3D convolution with a cubic kernel. `w` is
    /// (C_out, C_in/groups, k, k, k).
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let [bn, cin, d, h, wd] = xt.dims5();
        let [cout, cin_g, k, ..] = wt.dims5();
        assert_eq!(cin, cin_g * groups, "conv input channels");
        assert_eq!(cout % groups, 0);
        let cout_g = cout / groups;
        let geom = ConvGeom::new([d, h, wd], k, stride, pad);
        let [od, oh, ow] = geom.output;
        let os = od * oh * ow;
        let k3 = k * k * k;
        let same = stride == 1 && k % 2 == 1 && pad == k / 2;
        let mut out = Tensor::zeros(&[bn, cout, od, oh, ow]);
        {
            let bias = b.map(|b| self.value(b).data().to_vec());
            let od_ = out.data_mut();
            for bi in 0..bn {
                for oc in 0..cout {
                    let o = &mut od_[(bi * cout + oc) * os..][..os];
                    if let Some(bias) = &bias {
                        o.iter_mut().for_each(|v| *v = bias[oc]);
                    }
                    let gi = oc / cout_g;
                    for icl in 0..cin_g {
                        let ic = gi * cin_g + icl;
                        let ker = &wt.data()[(oc * cin_g + icl) * k3..][..k3];
                        if same {
                            kernels::conv_same_forward_acc(o, xt.channel(bi, ic), ker, [d, h, wd], k);
                        } else {
                            kernels::conv_forward_acc(o, xt.channel(bi, ic), ker, &geom);
                        }
                    }
                }
            }
        }
        self.macs += (bn * cout * os * cin_g * k3) as u64;
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        let has_bias = b.is_some();
        self.push_op("conv3d", 
            out,
            parents,
            Some(Box::new(move |c: &BackwardCtx<T>| {
                let (xt, wt, g) = (c.inputs[0], c.inputs[1], c.grad);
                let is = xt.spatial_len();
                let mut gx = c.needs[0].then(|| Tensor::zeros(xt.shape()));
                let mut gw = c.needs[1].then(|| Tensor::zeros(wt.shape()));
                for bi in 0..bn {
                    for oc in 0..cout {
                        let go = g.channel(bi, oc);
                        let gi = oc / cout_g;
                        for icl in 0..cin_g {
                            let ic = gi * cin_g + icl;
                            let koff = (oc * cin_g + icl) * k3;
                            let n3 = [d, h, wd];
                            if let Some(gx) = &mut gx {
                                let dst = &mut gx.data_mut()[(bi * cin + ic) * is..][..is];
                                let ker = &wt.data()[koff..][..k3];
                                if same {
                                    kernels::conv_same_input_grad_acc(dst, go, ker, n3, k);
                                } else {
                                    kernels::conv_input_grad_acc(dst, go, ker, &geom);
                                }
                            }
                            if let Some(gw) = &mut gw {
                                let gk = &mut gw.data_mut()[koff..][..k3];
                                if same {
                                    kernels::conv_same_weight_grad_acc(gk, go, xt.channel(bi, ic), n3, k);
                                } else {
                                    kernels::conv_weight_grad_acc(gk, go, xt.channel(bi, ic), &geom);
                                }
                            }
                        }
                    }
                }
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(Some(channel_sums(g)));
                }
                res
            })),
        )
    }

    /// 1x1x1 convolution; `w` is (C_out, C_in).
    pub fn pointwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let [bn, cin, d, h, wd] = xt.dims5();
        let (cout, wcin) = (wt.shape()[0], wt.shape()[1]);
        assert_eq!(cin, wcin, "pointwise input channels");
        let s = d * h * wd;
        let mut out = Tensor::zeros(&[bn, cout, d, h, wd]);
        for bi in 0..bn {
            let xb = &xt.data()[bi * cin * s..][..cin * s];
            let ob = &mut out.data_mut()[bi * cout * s..][..cout * s];
            T::gemm(cout, cin, s, wt.data(), (cin as isize, 1), xb, (s as isize, 1), T::zero(), ob);
        }
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            add_channel_bias(&mut out, &bias);
        }
        self.macs += (bn * cout * cin * s) as u64;
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        let has_bias = b.is_some();
        self.push_op("pointwise", 
            out,
            parents,
            Some(Box::new(move |c: &BackwardCtx<T>| {
                let (xt, wt, g) = (c.inputs[0], c.inputs[1], c.grad);
                let mut gx = c.needs[0].then(|| Tensor::zeros(xt.shape()));
                let mut gw = c.needs[1].then(|| Tensor::zeros(wt.shape()));
                for bi in 0..bn {
                    let gb = &g.data()[bi * cout * s..][..cout * s];
                    if let Some(gx) = &mut gx {
                        let dst = &mut gx.data_mut()[bi * cin * s..][..cin * s];
                        T::gemm(cin, cout, s, wt.data(), (1, cin as isize), gb, (s as isize, 1), T::zero(), dst);
                    }
                    if let Some(gw) = &mut gw {
                        let xb = &xt.data()[bi * cin * s..][..cin * s];
                        T::gemm(cout, s, cin, gb, (s as isize, 1), xb, (1, s as isize), T::one(), gw.data_mut());
                    }
                }
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(Some(channel_sums(g)));
                }
                res
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push_op("add", 
            out,
            vec![a.0, b.0],
            Some(Box::new(|c: &BackwardCtx<T>| {
                vec![c.needs[0].then(|| c.grad.clone()), c.needs[1].then(|| c.grad.clone())]
            })),
        )
    }

    /// x * gamma[c], gamma of shape (C).
    pub fn scale_channels(&mut self, x: Var, gamma: Var) -> Var {
        let xt = self.value(x);
        let gm = self.value(gamma).data().to_vec();
        let [bn, cn, ..] = xt.dims5();
        assert_eq!(gm.len(), cn);
        let s = xt.spatial_len();
        let mut out = xt.clone();
        for (i, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let f = gm[i % cn];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let _ = bn;
        self.push_op("scale_channels", 
            out,
            vec![x.0, gamma.0],
            Some(Box::new(move |c: &BackwardCtx<T>| {
                let (xt, gt, g) = (c.inputs[0], c.inputs[1], c.grad);
                let gx = c.needs[0].then(|| {
                    let mut gx = g.clone();
                    for (i, chunk) in gx.data_mut().chunks_mut(s).enumerate() {
                        let f = gt.data()[i % cn];
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    gx
                });
                let gg = c.needs[1].then(|| {
                    let mut acc = vec![T::zero(); cn];
                    for (i, (gc, xc)) in g.data().chunks(s).zip(xt.data().chunks(s)).enumerate() {
                        acc[i % cn] += dot(gc, xc);
                    }
                    Tensor::from_vec(&[cn], acc).unwrap()
                });
                vec![gx, gg]
            })),
        )
    }

    /// x * a[b, c], a of shape (B, C), broadcast over space.
    pub fn mul_channels(&mut self, x: Var, a: Var) -> Var {
        let xt = self.value(x);
        let at = self.value(a);
        let [bn, cn, ..] = xt.dims5();
        assert_eq!(at.shape(), &[bn, cn]);
        let s = xt.spatial_len();
        let mut out = xt.clone();
        for (i, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let f = at.data()[i];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        self.push_op("mul_channels", 
            out,
            vec![x.0, a.0],
            Some(Box::new(move |c: &BackwardCtx<T>| {
                let (xt, at, g) = (c.inputs[0], c.inputs[1], c.grad);
                let gx = c.needs[0].then(|| {
                    let mut gx = g.clone();
                    for (i, chunk) in gx.data_mut().chunks_mut(s).enumerate() {
                        let f = at.data()[i];
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    gx
                });
                let ga = c.needs[1].then(|| {
                    let acc = g.data().chunks(s).zip(xt.data().chunks(s)).map(|(gc, xc)| dot(gc, xc)).collect();
                    Tensor::from_vec(&[bn, cn], acc).unwrap()
                });
                vec![gx, ga]
            })),
        )
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let first = self.value(xs[0]);
        let [bn, _, d, h, w] = first.dims5();
        let s = d * h * w;
        let chans: Vec<usize> = xs.iter().map(|&v| self.value(v).dims5()[1]).collect();
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(bn * total * s);
        for bi in 0..bn {
            for (&v, &cn) in xs.iter().zip(&chans) {
                let t = self.value(v);
                assert_eq!(&t.shape()[2..], &[d, h, w], "concat spatial dims");
                out.extend_from_slice(&t.data()[bi * cn * s..][..cn * s]);
            }
        }
        let out = Tensor::from_vec(&[bn, total, d, h, w], out).unwrap();
        self.push_op("concat_channels", 
            out,
            xs.iter().map(|v| v.0).collect(),
            Some(Box::new(move |c: &BackwardCtx<T>| {
                let mut res = Vec::new();
                let mut off = 0;
                for (j, &cn) in chans.iter().enumerate() {
                    if c.needs[j] {
                        let mut gd = Vec::with_capacity(bn * cn * s);
                        for bi in 0..bn {
                            gd.extend_from_slice(&c.grad.data()[(bi * total + off) * s..][..cn * s]);
                        }
                        res.push(Some(Tensor::from_vec(&[bn, cn, d, h, w], gd).unwrap()));
                    } else {
                        res.push(None);
                    }
                    off += cn;
                }
                res
            })),
        )
    }

    /// Normalise over channels at every voxel, then per-channel affine.
    pub fn layer_norm(&mut self, x: Var, weight: Var, bias: Var, eps: T) -> Var {
        let xt = self.value(x);
        let [bn, cn, ..] = xt.dims5();
        let s = xt.spatial_len();
        let wv = self.value(weight).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let mut mean = vec![T::zero(); bn * s];
        let mut rstd = vec![T::zero(); bn * s];
        let mut out = Tensor::zeros(xt.shape());
        for bi in 0..bn {
            let xb = &xt.data()[bi * cn * s..][..cn * s];
            let m = &mut mean[bi * s..][..s];
            let r = &mut rstd[bi * s..][..s];
            for ch in xb.chunks(s) {
                for (a, &v) in m.iter_mut().zip(ch) {
                    *a += v;
                }
            }
            m.iter_mut().for_each(|a| *a /= T::of(cn as f64));
            for ch in xb.chunks(s) {
                for ((a, &v), &mu) in r.iter_mut().zip(ch).zip(m.iter()) {
                    *a += (v - mu) * (v - mu);
                }
            }
            r.iter_mut().for_each(|a| *a = T::one() / (*a / T::of(cn as f64) + eps).sqrt());
            let ob = &mut out.data_mut()[bi * cn * s..][..cn * s];
            for (c, (och, xch)) in ob.chunks_mut(s).zip(xb.chunks(s)).enumerate() {
                for (i, o) in och.iter_mut().enumerate() {
                    *o = (xch[i] - m[i]) * r[i] * wv[c] + bv[c];
                }
            }
        }
        self.push_op("layer_norm", 
            out,
            vec![x.0, weight.0, bias.0],
            Some(Box::new(move |c: &BackwardCtx<T>| {
                let (xt, wt, g) = (c.inputs[0], c.inputs[1], c.grad);
                let wv = wt.data();
                let mut gx = Tensor::zeros(xt.shape());
                let mut gw = vec![T::zero(); cn];
                let mut gb = vec![T::zero(); cn];
                let mut m1 = vec![T::zero(); s];
                let mut m2 = vec![T::zero(); s];
                let mut xhat = vec![T::zero(); s];
                for bi in 0..bn {
                    let xb = &xt.data()[bi * cn * s..][..cn * s];
                    let gbk = &g.data()[bi * cn * s..][..cn * s];
                    let m = &mean[bi * s..][..s];
                    let r = &rstd[bi * s..][..s];
                    m1.iter_mut().for_each(|v| *v = T::zero());
                    m2.iter_mut().for_each(|v| *v = T::zero());
                    for ch in 0..cn {
                        let xc = &xb[ch * s..][..s];
                        let gc = &gbk[ch * s..][..s];
                        for i in 0..s {
                            let xh = (xc[i] - m[i]) * r[i];
                            let dxh = gc[i] * wv[ch];
                            m1[i] += dxh;
                            m2[i] += dxh * xh;
                            gw[ch] += gc[i] * xh;
                            gb[ch] += gc[i];
                        }
                    }
                    let gxb = &mut gx.data_mut()[bi * cn * s..][..cn * s];
                    for ch in 0..cn {
                        let xc = &xb[ch * s..][..s];
                        let gc = &gbk[ch * s..][..s];
                        for i in 0..s {
                            xhat[i] = (xc[i] - m[i]) * r[i];
                        }
                        let dst = &mut gxb[ch * s..][..s];
                        for i in 0..s {
                            let dxh = gc[i] * wv[ch];
                            dst[i] = r[i] * (dxh - m1[i] / T::of(cn as f64) - xhat[i] * m2[i] / T::of(cn as f64));
                        }
                    }
                }
                vec![
                    c.needs[0].then_some(gx),
                    c.needs[1].then(|| Tensor::from_vec(&[cn], gw).unwrap()),
                    c.needs[2].then(|| Tensor::from_vec(&[cn], gb).unwrap()),
                ]
            })),
        )
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::gelu);
        self.push_op("gelu", 
            out,
            vec![x.0],
            Some(Box::new(|c: &BackwardCtx<T>| {
                let mut g = c.grad.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(c.inputs[0].data()) {
                    *gv *= xv.gelu_grad();
                }
                vec![Some(g)]
            })),
        )
    }

    /// 2x2x2 average pooling, stride 2, ceil mode over valid voxels.
    pub fn avgpool2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let [bn, cn, ..] = xt.dims5();
        let n = spatial3(xt);
        let o = kernels::pooled(n);
        let os: usize = o.iter().product();
        let mut out = Tensor::zeros(&[bn, cn, o[0], o[1], o[2]]);
        for (i, och) in out.data_mut().chunks_mut(os).enumerate() {
            kernels::avgpool2(och, xt.channel(i / cn, i % cn), n);
        }
        self.push_op("avgpool2", 
            out,
            vec![x.0],
            Some(Box::new(move |c: &BackwardCtx<T>| {
                let mut gx = Tensor::zeros(c.inputs[0].shape());
                let is: usize = n.iter().product();
                for (gch, och) in gx.data_mut().chunks_mut(is).zip(c.grad.data().chunks(os)) {
                    kernels::avgpool2_grad(gch, och, n);
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Nearest-neighbour x2 upsampling cropped to `target` (each target
    /// extent must be at most twice the input extent).
    pub fn upsample2(&mut self, x: Var, target: [usize; 3]) -> Var {
        let xt = self.value(x);
        let [bn, cn, ..] = xt.dims5();
        let n = spatial3(xt);
        for a in 0..3 {
            assert!(target[a] <= 2 * n[a] && target[a] + 1 >= 2 * n[a], "upsample target {target:?} from {n:?}");
        }
        let ts: usize = target.iter().product();
        let mut out = Tensor::zeros(&[bn, cn, target[0], target[1], target[2]]);
        for (i, och) in out.data_mut().chunks_mut(ts).enumerate() {
            kernels::upsample2(och, xt.channel(i / cn, i % cn), n, target);
        }
        self.push_op("upsample2", 
            out,
            vec![x.0],
            Some(Box::new(move |c: &BackwardCtx<T>| {
                let mut gx = Tensor::zeros(c.inputs[0].shape());
                let is: usize = n.iter().product();
                for (gch, och) in gx.data_mut().chunks_mut(is).zip(c.grad.data().chunks(ts)) {
                    kernels::upsample2_grad(gch, och, n, target);
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Per-channel spatial statistics: (B, C, ...) -> (B, 3C) laid out as
    /// [mean | std | max], std = sqrt(var + eps).
    pub fn channel_stats(&mut self, x: Var, eps: T) -> Var {
        let xt = self.value(x);
        let [bn, cn, ..] = xt.dims5();
        let s = xt.spatial_len();
        let mut out = vec![T::zero(); bn * 3 * cn];
        let mut argmax = vec![0usize; bn * cn];
        for bi in 0..bn {
            for ch in 0..cn {
                let v = xt.channel(bi, ch);
                let mean64 = v.iter().map(|a| a.to_f64().unwrap()).sum::<f64>() / s as f64;
                let mean = T::of(mean64);
                let var = v.iter().map(|&a| (a.to_f64().unwrap() - mean64).powi(2)).sum::<f64>() / s as f64;
                let (mut best, mut bi_) = (T::neg_infinity(), 0);
                for (i, &a) in v.iter().enumerate() {
                    if a > best {
                        best = a;
                        bi_ = i;
                    }
                }
                out[bi * 3 * cn + ch] = mean;
                out[bi * 3 * cn + cn + ch] = (T::of(var) + eps).sqrt();
                out[bi * 3 * cn + 2 * cn + ch] = best;
                argmax[bi * cn + ch] = bi_;
            }
        }
        let out = Tensor::from_vec(&[bn, 3 * cn], out).unwrap();
        self.push_op("channel_stats", 
            out,
            vec![x.0],
            Some(Box::new(move |c: &BackwardCtx<T>| {
                let (xt, y, g) = (c.inputs[0], c.value.data(), c.grad.data());
                let mut gx = Tensor::zeros(xt.shape());
                for bi in 0..bn {
                    for ch in 0..cn {
                        let base = bi * 3 * cn;
                        let (mean, std) = (y[base + ch], y[base + cn + ch]);
                        let (gm, gs, gmax) = (g[base + ch], g[base + cn + ch], g[base + 2 * cn + ch]);
                        let xv = xt.channel(bi, ch);
                        let dst = &mut gx.data_mut()[(bi * cn + ch) * s..][..s];
                        let a = gm / T::of(s as f64);
                        let b = gs / (T::of(s as f64) * std);
                        for (d, &v) in dst.iter_mut().zip(xv) {
                            *d = a + b * (v - mean);
                        }
                        dst[argmax[bi * cn + ch]] += gmax;
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    /// x (B, N) -> x W^T + b with W (M, N), b (M).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let (bn, n) = (xt.shape()[0], xt.shape()[1]);
        let m = wt.shape()[0];
        assert_eq!(wt.shape()[1], n);
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); bn * m];
        for i in 0..bn {
            for j in 0..m {
                out[i * m + j] = bv[j] + dot(&xt.data()[i * n..][..n], &wt.data()[j * n..][..n]);
            }
        }
        self.macs += (bn * m * n) as u64;
        let out = Tensor::from_vec(&[bn, m], out).unwrap();
        self.push_op("linear", 
            out,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |c: &BackwardCtx<T>| {
                let (xt, wt, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let mut gx = vec![T::zero(); bn * n];
                let mut gw = vec![T::zero(); m * n];
                let mut gb = vec![T::zero(); m];
                for i in 0..bn {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        gb[j] += gij;
                        for k in 0..n {
                            gx[i * n + k] += gij * wt[j * n + k];
                            gw[j * n + k] += gij * xt[i * n + k];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[bn, n], gx).unwrap()),
                    Some(Tensor::from_vec(&[m, n], gw).unwrap()),
                    Some(Tensor::from_vec(&[m], gb).unwrap()),
                ]
            })),
        )
    }

    /// Softmax along the last axis of a (B, M) tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let m = xt.shape()[1];
        let mut out = xt.clone();
        for row in out.data_mut().chunks_mut(m) {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push_op("softmax_rows", 
            out,
            vec![x.0],
            Some(Box::new(move |c: &BackwardCtx<T>| {
                let mut gx = c.grad.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(m).zip(c.value.data().chunks(m)) {
                    let s = dot(grow, yrow);
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - s);
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Scalar sum_i r_i x_i (accumulated in f64). Handy as a probe loss.
    pub fn weighted_sum(&mut self, x: Var, r: Tensor<T>) -> Var {
        assert_eq!(self.value(x).shape(), r.shape());
        let v: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
            .sum();
        self.push_op("weighted_sum", 
            Tensor::from_vec(&[1], vec![T::of(v)]).unwrap(),
            vec![x.0],
            Some(Box::new(move |c: &BackwardCtx<T>| {
                let mut g = r.clone();
                g.scale(c.grad.data()[0]);
                vec![Some(g)]
            })),
        )
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn channel_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let [_, cn, ..] = g.dims5();
    let s = g.spatial_len();
    let mut acc = vec![T::zero(); cn];
    for (i, ch) in g.data().chunks(s).enumerate() {
        acc[i % cn] += ch.iter().copied().sum::<T>();
    }
    Tensor::from_vec(&[cn], acc).unwrap()
}

fn add_channel_bias<T: Real>(t: &mut Tensor<T>, bias: &[T]) {
    let [_, cn, ..] = t.dims5();
    let s = t.spatial_len();
    for (i, ch) in t.data_mut().chunks_mut(s).enumerate() {
        let b = bias[i % cn];
        ch.iter_mut().for_each(|v| *v += b);
    }
}
