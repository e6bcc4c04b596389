//! Content extraction: text and source speech → speaker-independent `e_con`.

use autograd::layers::{Conv2d, Ctx, Embedding, LayerNorm, Linear};
use autograd::{Element, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{FuseSource, ModelConfig};
use crate::error::{Error, Result};

/// Multi-head self-attention with a learned relative-position bias per head,
/// offsets clipped to `±window`.
#[derive(Clone, Debug)]
struct RelSelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    rel_bias: ParamId,
    heads: usize,
    window: usize,
}

impl RelSelfAttention {
    fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, name: &str, d: usize, heads: usize, window: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng),
            rel_bias: store.add(format!("{name}.rel_bias"), Tensor::zeros(&[heads * (2 * window + 1), 1]), true),
            heads,
            window,
        }
    }

    fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: Var<'g, E>) -> Var<'g, E> {
        let (l, d) = x.dims2();
        let dh = d / self.heads;
        let (q, k, v) = (self.q.forward(cx, x), self.k.forward(cx, x), self.v.forward(cx, x));
        let span = 2 * self.window + 1;
        let bias = cx.p(self.rel_bias);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let idx: Vec<usize> = (0..l)
                .flat_map(|i| {
                    (0..l).map(move |j| {
                        let off = (j as isize - i as isize).clamp(-(self.window as isize), self.window as isize);
                        h * span + (off + self.window as isize) as usize
                    })
                })
                .collect();
            let rel = bias.index_select(&idx).reshape(&[l, l]);
            let qh = q.narrow(1, h * dh, dh);
            let kh = k.narrow(1, h * dh, dh);
            let vh = v.narrow(1, h * dh, dh);
            let logits = qh.matmul(kh.t()).scale(scale) + rel;
            outs.push(logits.softmax_last().matmul(vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { cx.graph.concat(&outs, 1) };
        self.out.forward(cx, cat)
    }
}

#[derive(Clone, Debug)]
struct FftBlock {
    attn: RelSelfAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl FftBlock {
    fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: Var<'g, E>) -> Var<'g, E> {
        let x = self.norm1.forward(cx, x + self.attn.forward(cx, x));
        let ff = self.ff2.forward(cx, self.ff1.forward(cx, x).relu());
        self.norm2.forward(cx, x + ff)
    }
}

/// Phoneme ids → `e_ling` (`L × D`) through feed-forward transformer blocks.
#[derive(Clone, Debug)]
pub struct LinguisticEncoder {
    embed: Embedding,
    vocab_size: usize,
    blocks: Vec<FftBlock>,
}

impl LinguisticEncoder {
    pub fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let embed = Embedding::new(store, "ling.embed", cfg.vocab_size, d, rng);
        let blocks = (0..cfg.text_layers)
            .map(|i| {
                let n = format!("ling.block{i}");
                FftBlock {
                    attn: RelSelfAttention::new(store, &format!("{n}.attn"), d, cfg.text_heads, cfg.rel_window, rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d),
                    ff1: Linear::new(store, &format!("{n}.ff1"), d, cfg.ffn_dim, true, rng),
                    ff2: Linear::new(store, &format!("{n}.ff2"), cfg.ffn_dim, d, true, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        Self {
            embed,
            vocab_size: cfg.vocab_size,
            blocks,
        }
    }

    pub fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, ids: &[usize]) -> Result<Var<'g, E>> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty phoneme sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&p| p >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "phoneme id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let mut x = self.embed.forward(cx, ids);
        for b in &self.blocks {
            x = b.forward(cx, x);
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct ResBlock2d {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Conv2d,
}

impl ResBlock2d {
    fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: Var<'g, E>) -> Var<'g, E> {
        let h = self.conv1.forward(cx, x).leaky_relu(0.2);
        let h = self.conv2.forward(cx, h);
        (h + self.skip.forward(cx, x)).leaky_relu(0.2)
    }
}

/// Frame-level 2-D residual encoder followed by per-phoneme average pooling.
///
/// Every block halves the frequency axis and never strides in time, so the
/// frame count is preserved. Each block applies two kernels of time extent
/// `k = mel_enc_time_kernel`, so a frame feature sees
/// `blocks · (k − 1)` neighbouring frames on each side; with `k = 1` the
/// features are frame-local and pooled row `i` depends only on phoneme `i`'s
/// frames.
#[derive(Clone, Debug)]
pub struct MelEncoder {
    blocks: Vec<ResBlock2d>,
    proj: Linear,
}

impl MelEncoder {
    pub fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let kt = cfg.mel_enc_time_kernel;
        let pt = kt / 2;
        let c = cfg.mel_enc_channels;
        let mut f = cfg.n_mels;
        let mut c_in = 1;
        let mut blocks = Vec::new();
        for i in 0..cfg.mel_enc_blocks {
            let n = format!("melenc.block{i}");
            blocks.push(ResBlock2d {
                conv1: Conv2d::new(store, &format!("{n}.conv1"), c_in, c, (kt, 3), (1, 2), (pt, 1), rng),
                conv2: Conv2d::new(store, &format!("{n}.conv2"), c, c, (kt, 3), (1, 1), (pt, 1), rng),
                skip: Conv2d::new(store, &format!("{n}.skip"), c_in, c, (1, 1), (1, 2), (0, 0), rng),
            });
            f = f.div_ceil(2);
            c_in = c;
        }
        let proj = Linear::new(store, "melenc.proj", c_in * f, cfg.d_model, true, rng);
        Self { blocks, proj }
    }

    /// Frames `T × F` → frame features `T × D`.
    pub fn frame_features<'g, E: Element>(&self, cx: &Ctx<'g, E>, mel: Var<'g, E>) -> Var<'g, E> {
        let (t, f) = mel.dims2();
        let mut x = mel.reshape(&[1, t, f]);
        for b in &self.blocks {
            x = b.forward(cx, x);
        }
        let s = x.shape();
        let (c, fo) = (s[0], s[2]);
        // [C, T, F'] → [T, F'·C]
        let x = x.reshape(&[c, t * fo]).t().reshape(&[t, fo * c]);
        self.proj.forward(cx, x)
    }

    /// `e_mel`: frame features averaged over each phoneme's frames.
    pub fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, mel: Var<'g, E>, durations: &[usize]) -> Result<Var<'g, E>> {
        let (t, _) = mel.dims2();
        let total: usize = durations.iter().sum();
        if total != t {
            return Err(Error::Shape(format!("durations sum to {total} but the mel has {t} frames")));
        }
        if durations.is_empty() || durations.contains(&0) {
            return Err(Error::InvalidArgument("durations must be non-empty and >= 1".into()));
        }
        Ok(self.frame_features(cx, mel).segment_mean(durations))
    }
}

#[derive(Clone, Debug)]
struct ResMlp {
    fc1: Linear,
    fc2: Linear,
}

/// Residual MLP stack estimating `(mu, logvar)` of the content latent.
#[derive(Clone, Debug)]
pub struct PosteriorEncoder {
    blocks: Vec<ResMlp>,
    head: Linear,
    d_latent: usize,
    logvar_range: (f64, f64),
}

pub struct Posterior<'g, E: Element> {
    pub mu: Var<'g, E>,
    pub logvar: Var<'g, E>,
}

impl PosteriorEncoder {
    pub fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let blocks = (0..cfg.posterior_blocks)
            .map(|i| ResMlp {
                fc1: Linear::new(store, &format!("post.block{i}.fc1"), d, d, true, rng),
                fc2: Linear::new(store, &format!("post.block{i}.fc2"), d, d, true, rng),
            })
            .collect();
        Self {
            blocks,
            head: Linear::new(store, "post.head", d, 2 * cfg.d_latent, true, rng),
            d_latent: cfg.d_latent,
            logvar_range: (cfg.logvar_min, cfg.logvar_max),
        }
    }

    pub fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, e_mel: Var<'g, E>) -> Posterior<'g, E> {
        let mut x = e_mel;
        for b in &self.blocks {
            x = x + b.fc2.forward(cx, b.fc1.forward(cx, x).leaky_relu(0.2));
        }
        let stats = self.head.forward(cx, x);
        let mu = stats.narrow(1, 0, self.d_latent);
        let logvar = stats
            .narrow(1, self.d_latent, self.d_latent)
            .clamp(self.logvar_range.0, self.logvar_range.1);
        Posterior { mu, logvar }
    }
}

/// `z = mu + noise_scale · exp(logvar / 2) ⊙ ε`.
pub fn sample_latent<'g, E: Element, R: Rng>(
    post: &Posterior<'g, E>,
    noise_scale: f64,
    rng: &mut R,
) -> Var<'g, E> {
    if noise_scale == 0.0 {
        return post.mu;
    }
    let g = post.mu.graph();
    let eps = standard_normal::<E, R>(&post.mu.shape(), rng);
    let std = post.logvar.scale(0.5).exp();
    post.mu + std * g.constant(eps).scale(noise_scale)
}

pub fn standard_normal<E: Element, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<E> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                E::c(z)
            })
            .collect(),
    )
}

#[derive(Clone, Debug)]
struct Coupling {
    inp: Linear,
    out: Linear,
    /// Which half is shifted: 0 → first, 1 → second.
    target: usize,
}

/// Volume-preserving flow: a stack of additive couplings conditioned on
/// `e_ling`. Step `k` shifts the half `k mod 2` by a function of the other
/// half and the condition, so each step has a unit-diagonal triangular
/// Jacobian and the log-determinant is exactly zero.
#[derive(Clone, Debug)]
pub struct VpFlow {
    steps: Vec<Coupling>,
    d_latent: usize,
}

impl VpFlow {
    pub fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let dz = cfg.d_latent;
        let steps = (0..cfg.flow_steps)
            .map(|k| {
                let target = k % 2;
                let (fixed, moved) = Self::sizes(dz, target);
                Coupling {
                    inp: Linear::new(store, &format!("flow.step{k}.in"), fixed + cfg.d_model, cfg.flow_hidden, true, rng),
                    out: Linear::zeros(store, &format!("flow.step{k}.out"), cfg.flow_hidden, moved),
                    target,
                }
            })
            .collect();
        Self { steps, d_latent: dz }
    }

    fn sizes(dz: usize, target: usize) -> (usize, usize) {
        let half = dz / 2;
        if target == 0 {
            (dz - half, half)
        } else {
            (half, dz - half)
        }
    }

    /// Parameter ids of every coupling's output layer.
    pub fn output_layers(&self) -> Vec<ParamId> {
        self.steps
            .iter()
            .flat_map(|s| [s.out.weight, s.out.bias.unwrap()])
            .collect()
    }

    fn split<'g, E: Element>(&self, z: Var<'g, E>, target: usize) -> (Var<'g, E>, Var<'g, E>) {
        let half = self.d_latent / 2;
        let first = z.narrow(1, 0, half);
        let second = z.narrow(1, half, self.d_latent - half);
        if target == 0 {
            (second, first)
        } else {
            (first, second)
        }
    }

    fn join<'g, E: Element>(&self, fixed: Var<'g, E>, moved: Var<'g, E>, target: usize) -> Var<'g, E> {
        let g = fixed.graph();
        if target == 0 {
            g.concat(&[moved, fixed], 1)
        } else {
            g.concat(&[fixed, moved], 1)
        }
    }

    fn shift<'g, E: Element>(&self, cx: &Ctx<'g, E>, step: &Coupling, fixed: Var<'g, E>, cond: Var<'g, E>) -> Var<'g, E> {
        let h = step.inp.forward(cx, cx.graph.concat(&[fixed, cond], 1)).tanh();
        step.out.forward(cx, h)
    }

    fn check<E: Element>(&self, z: Var<'_, E>, cond: Var<'_, E>) -> Result<()> {
        let (l, dz) = z.dims2();
        let (lc, _) = cond.dims2();
        if dz != self.d_latent || l != lc {
            return Err(Error::Shape(format!(
                "flow input {l} x {dz} with condition of {lc} rows (expected width {})",
                self.d_latent
            )));
        }
        Ok(())
    }

    pub fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, z: Var<'g, E>, cond: Var<'g, E>) -> Result<Var<'g, E>> {
        self.check(z, cond)?;
        let mut z = z;
        for step in &self.steps {
            let (fixed, moved) = self.split(z, step.target);
            let moved = moved + self.shift(cx, step, fixed, cond);
            z = self.join(fixed, moved, step.target);
        }
        Ok(z)
    }

    pub fn inverse<'g, E: Element>(&self, cx: &Ctx<'g, E>, z: Var<'g, E>, cond: Var<'g, E>) -> Result<Var<'g, E>> {
        self.check(z, cond)?;
        let mut z = z;
        for step in self.steps.iter().rev() {
            let (fixed, moved) = self.split(z, step.target);
            let moved = moved - self.shift(cx, step, fixed, cond);
            z = self.join(fixed, moved, step.target);
        }
        Ok(z)
    }
}

/// `e_con = e_ling + Proj(source)`.
#[derive(Clone, Debug)]
pub struct ContentFusion {
    pub proj: Linear,
    pub source: FuseSource,
}

impl ContentFusion {
    pub fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d_in = match cfg.fuse_source {
            FuseSource::Latent => cfg.d_latent,
            FuseSource::MelFeatures => cfg.d_model,
        };
        Self {
            proj: Linear::new(store, "fuse.proj", d_in, cfg.d_model, true, rng),
            source: cfg.fuse_source,
        }
    }

    pub fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, e_ling: Var<'g, E>, src: Var<'g, E>) -> Result<Var<'g, E>> {
        let (l, _) = e_ling.dims2();
        let (ls, ds) = src.dims2();
        if l != ls || ds != self.proj.d_in {
            return Err(Error::Shape(format!(
                "fusing {ls} x {ds} into {l} rows (expected width {})",
                self.proj.d_in
            )));
        }
        Ok(e_ling + self.proj.forward(cx, src))
    }
}
