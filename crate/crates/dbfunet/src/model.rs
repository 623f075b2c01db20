//! Network configuration and the assembled encoder-decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{decoder_up, Bff, Dsd, Head, Mlk, MlkOptions, Pointwise};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels per level, shallow to deep; the number of levels is its length.
    pub channels: Vec<usize>,
    pub mlk_per_level: usize,
    pub layer_scale_init: f32,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub msda_kernels: [usize; 3],
    /// Ablation switches: MSDA off swaps in a single 3^3 dws conv, BFF off
    /// uses a plain skip connection.
    pub use_msda: bool,
    pub use_bff: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 3,
            channels: vec![16, 32, 64, 128],
            mlk_per_level: 1,
            layer_scale_init: 1e-2,
            mlp_ratio: 4,
            activation: Activation::Gelu,
            msda_kernels: [3, 5, 7],
            use_msda: true,
            use_bff: true,
        }
    }
}

impl NetConfig {
    /// The desk-scale network trained in tests and the CLI.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Documented full-size plan (128^3 patches in the original setting).
    pub fn paper_scale() -> Self {
        Self {
            channels: vec![32, 64, 128, 256],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::Config(m.to_string()));
        if self.channels.len() < 2 {
            return bad("at least two levels are required");
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return bad("channels must be positive and strictly increasing");
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.mlk_per_level == 0 || self.mlp_ratio == 0 {
            return bad("in_channels, num_classes, mlk_per_level and mlp_ratio must be positive");
        }
        if self.msda_kernels.iter().any(|k| k % 2 == 0) {
            return bad("msda kernels must be odd");
        }
        if !self.layer_scale_init.is_finite() {
            return bad("layer_scale_init must be finite");
        }
        Ok(())
    }

    /// Required divisor of every patch extent.
    pub fn patch_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    fn mlk_options(&self) -> MlkOptions {
        MlkOptions {
            mlp_ratio: self.mlp_ratio,
            gamma0: self.layer_scale_init,
            kernels: self.msda_kernels,
            use_msda: self.use_msda,
        }
    }
}

/// Named intermediate feature maps recorded during a forward pass.
#[derive(Debug, Default)]
pub struct Trace {
    pub entries: Vec<(String, Var)>,
}

impl Trace {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    fn record(trace: &mut Option<&mut Trace>, name: String, v: Var) {
        if let Some(t) = trace {
            t.entries.push((name, v));
        }
    }
}

#[derive(Debug, Clone)]
pub struct DbfUNet {
    pub config: NetConfig,
    pub store: ParamStore,
    head: Head,
    enc: Vec<Vec<Mlk>>,
    dsd: Vec<Dsd>,
    bff: Vec<Option<Bff>>,
    shallow: Mlk,
    up: Vec<Pointwise>,
    dec: Vec<Vec<Mlk>>,
    out: Pointwise,
}

impl DbfUNet {
    /// Builds the network with parameters drawn from `seed`.
    ///
    /// Levels are 0-based here. Level i < L-1 runs MLK blocks; levels are
    /// joined by DSD blocks, and the deepest level is the last DSD output.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = &config.channels;
        let l = ch.len();
        let opts = config.mlk_options();
        let head = Head::new(&mut store, "head", config.in_channels, ch[0], &mut rng);
        let mut enc = Vec::new();
        let mut dsd = Vec::new();
        for i in 0..l - 1 {
            enc.push(
                (0..config.mlk_per_level)
                    .map(|j| Mlk::new(&mut store, &format!("enc.{i}.{j}"), ch[i], opts, &mut rng))
                    .collect(),
            );
            dsd.push(Dsd::new(&mut store, &format!("dsd.{i}"), ch[i], ch[i + 1], &mut rng));
        }
        let bff = (0..l - 1)
            .map(|i| config.use_bff.then(|| Bff::new(&mut store, &format!("bff.{i}"), ch[i + 1], ch[i], &mut rng)))
            .collect();
        let shallow = Mlk::new(&mut store, "shallow", ch[0], opts, &mut rng);
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for i in (0..l - 1).rev() {
            up.push(Pointwise::new(&mut store, &format!("up.{i}"), ch[i + 1], ch[i], true, &mut rng));
            dec.push(
                (0..config.mlk_per_level)
                    .map(|j| Mlk::new(&mut store, &format!("dec.{i}.{j}"), ch[i], opts, &mut rng))
                    .collect(),
            );
        }
        // built deep to shallow; index by level
        up.reverse();
        dec.reverse();
        let out = Pointwise::new(&mut store, "out", ch[0], config.num_classes, true, &mut rng);
        Ok(Self {
            config,
            store,
            head,
            enc,
            dsd,
            bff,
            shallow,
            up,
            dec,
            out,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(), NetError> {
        let m = self.config.patch_multiple();
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(NetError::Shape(format!(
                "expected (B, {}, D, H, W), got {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[0] == 0 || shape[2..].iter().any(|&n| n == 0 || n % m != 0) {
            return Err(NetError::Shape(format!("patch dims {:?} must be positive multiples of {m}", &shape[2..])));
        }
        Ok(())
    }

fn mlks<T: Real>(blocks: &[Mlk], g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        blocks.iter().fold(x, |x, b| b.forward(g, store, x))
    }

    /// Records the forward pass on `g` and returns logits (B, classes, D, H, W).
    ///
    /// Trace names (1-based levels): `E{i}` encoder outputs, `F{i}` fused
    /// skips (after the shallow MLK for i = 2), `U{i}` upsampled decoder
    /// features from level i, `Din{i}`/`Dout{i}` decoder block input/output.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, trace: Option<&mut Trace>) -> Result<Var, NetError> {
        self.forward_with(g, &self.store, x, trace)
    }

    /// [`forward_graph`](Self::forward_graph) with parameters taken from
    /// `store`, which must have this model's layout (e.g. a cast copy).
    pub fn forward_with<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var, NetError> {
        self.check_input(g.shape(x))?;
        let l = self.config.levels();
        let h = self.head.forward(g, store, x);
        let mut e = vec![Self::mlks(&self.enc[0], g, store, h)];
        for i in 1..l {
            let d = self.dsd[i - 1].forward(g, store, e[i - 1]);
            e.push(if i < l - 1 { Self::mlks(&self.enc[i], g, store, d) } else { d });
        }
        for (i, &v) in e.iter().enumerate() {
            Trace::record(&mut trace, format!("E{}", i + 1), v);
        }
        let mut f: Vec<Var> = (0..l - 1)
            .map(|i| match &self.bff[i] {
                Some(b) => b.forward(g, store, e[i + 1], e[i]),
                None => e[i],
            })
            .collect();
        f[0] = self.shallow.forward(g, store, f[0]);
        for (i, &v) in f.iter().enumerate() {
            Trace::record(&mut trace, format!("F{}", i + 2), v);
        }
        let mut dout = e[l - 1];
        Trace::record(&mut trace, format!("Dout{l}"), dout);
        for i in (0..l - 1).rev() {
            let s = g.shape(e[i]);
            let target = [s[2], s[3], s[4]];
            let u = decoder_up(g, store, &self.up[i], dout, target);
            let din = g.add(f[i], u);
            dout = Self::mlks(&self.dec[i], g, store, din);
            Trace::record(&mut trace, format!("U{}", i + 2), u);
            Trace::record(&mut trace, format!("Din{}", i + 1), din);
            Trace::record(&mut trace, format!("Dout{}", i + 1), dout);
        }
        let logits = self.out.forward(g, store, dout);
        Trace::record(&mut trace, "logits".into(), logits);
        Ok(logits)
    }

    /// Gradient-free forward of one batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let y = self.forward_graph(&mut g, xv, None)?;
        Ok(g.value(y).clone())
    }

    pub fn report(&self) -> ParamReport {
        param_report(&self.store, &self.config)
    }
}

/// Parameter counts per module plus a forward multiply-add estimate for one
/// 32^3 patch (or the size given to [`estimate_macs`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
    pub macs_per_patch: u64,
    pub patch: [usize; 3],
    pub within_5m: bool,
    pub within_1m: bool,
}

/// Groups parameters by their leading name component(s): `head`, `enc.i`,
/// `dsd.i`, `bff.i`, `shallow`, `up.i`, `dec.i`, `out`.
pub fn param_report(store: &ParamStore, config: &NetConfig) -> ParamReport {
    let mut breakdown: Vec<(String, usize)> = Vec::new();
    for (_, name, t) in store.iter() {
        let mut parts = name.split('.');
        let top = parts.next().unwrap_or_default();
        let key = match top {
            "enc" | "dsd" | "bff" | "up" | "dec" => format!("{top}.{}", parts.next().unwrap_or_default()),
            _ => top.to_string(),
        };
        match breakdown.iter_mut().find(|(k, _)| *k == key) {
            Some((_, n)) => *n += t.len(),
            None => breakdown.push((key, t.len())),
        }
    }
    let total = breakdown.iter().map(|(_, n)| n).sum();
    let patch = [32; 3];
    ParamReport {
        total,
        breakdown,
        macs_per_patch: estimate_macs(config, patch),
        patch,
        within_5m: total <= 5_000_000,
        within_1m: total <= 1_000_000,
    }
}

/// Forward multiply-adds (conv, pointwise, linear) for one patch, counting
/// every kernel tap including those that fall on padding.
pub fn estimate_macs(cfg: &NetConfig, patch: [usize; 3]) -> u64 {
    let ch = &cfg.channels;
    let l = ch.len();
    let mut res = vec![patch];
    for i in 1..l {
        let p = res[i - 1];
        res.push([p[0].div_ceil(2), p[1].div_ceil(2), p[2].div_ceil(2)]);
    }
    let vox = |i: usize| res[i].iter().product::<usize>() as u64;
    let mlk = |c: u64, s: u64| -> u64 {
        let mixer = if cfg.use_msda {
            let dws: u64 = cfg.msda_kernels.iter().map(|&k| s * c * (k as u64).pow(3) + s * c * c).sum();
            dws + 9 * c * 3 * c + 2 * s * 9 * c * c + s * 3 * c * c
        } else {
            s * c * 27 + s * c * c
        };
        let r = cfg.mlp_ratio as u64;
        mixer + 2 * s * c * r * c + s * c * c
    };
    let n = cfg.mlk_per_level as u64;
    let c = |i: usize| ch[i] as u64;
    let mut total = vox(0) * cfg.in_channels as u64 * c(0) * 27;
    for i in 0..l - 1 {
        total += 2 * n * mlk(c(i), vox(i));
        let s = vox(i + 1);
        total += s * c(i) * 27 + s * c(i) * 4 * c(i) + s * 5 * c(i) * c(i + 1);
        if c(i) != c(i + 1) {
            total += s * c(i) * c(i + 1);
        }
        if cfg.use_bff {
            total += s * c(i + 1) * c(i);
        }
        total += s * c(i + 1) * c(i);
    }
    total += mlk(c(0), vox(0));
    total += vox(0) * c(0) * cfg.num_classes as u64;
    total
}
