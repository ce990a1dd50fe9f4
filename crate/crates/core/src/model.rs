//! U-Net style encoder-decoder whose every normalization site is a DSBN
//! layer, plus a projection head on the pooled encoder output.
//!
//! The convolution weights exist once; "source parameters" and "target
//! parameters" are the same kernels seen through a different DSBN domain.
//! [`TensorRole`] records which set each tensor belongs to.

use ndarray::{s, Array2, Array4, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsbn::{
    dsbn_backward, dsbn_forward_eval, normalize_batch, update_running_stats, BatchStats, DsbnCache,
    DsbnLayerState, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
use crate::nn::{
    concat_channels, global_avg_pool, global_avg_pool_backward, maxpool2, maxpool2_backward, relu,
    relu_backward, softmax_channels, softmax_channels_backward, split_channels, upsample2,
    upsample2_backward, Conv2dParams, ConvCache, Linear, PoolCache,
};
use crate::{DomainId, Error, Result};

fn default_proj_hidden() -> usize {
    256
}

fn default_proj_dim() -> usize {
    128
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

fn default_in_channels() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Channel width per resolution level; `widths.len() - 1` down-samplings.
    pub widths: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_proj_hidden")]
    pub proj_hidden: usize,
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_momentum")]
    pub norm_momentum: f64,
}

impl Architecture {
    pub fn new(widths: Vec<usize>, classes: usize) -> Self {
        Self {
            in_channels: 1,
            widths,
            classes,
            proj_hidden: default_proj_hidden(),
            proj_dim: default_proj_dim(),
            norm_eps: DEFAULT_EPS,
            norm_momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(
                "architecture needs at least two widths (one down-sampling)".into(),
            ));
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "channel widths must be positive and strictly increasing, got {:?}",
                self.widths
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.in_channels == 0 || self.proj_hidden == 0 || self.proj_dim == 0 {
            return Err(Error::Config("channel and projection sizes must be positive".into()));
        }
        if !(self.norm_eps > 0.0) || !(self.norm_momentum > 0.0 && self.norm_momentum < 1.0) {
            return Err(Error::Config("norm_eps must be > 0 and norm_momentum in (0, 1)".into()));
        }
        Ok(())
    }

    /// Number of scalars in a model built from this descriptor, running
    /// statistics included.
    pub fn parameter_count(&self) -> usize {
        let w = &self.widths;
        let conv = |i: usize, o: usize, k: usize| i * o * k * k;
        let norm = |c: usize| 8 * c;
        let block = |i: usize, o: usize| conv(i, o, 3) + norm(o) + conv(o, o, 3) + norm(o);
        let mut n = 0;
        let mut prev = self.in_channels;
        for &c in w {
            n += block(prev, c);
            prev = c;
        }
        for l in 0..self.depth() {
            n += conv(w[l + 1], w[l], 1) + w[l]; // up projection with bias
            n += block(2 * w[l], w[l]);
        }
        n += conv(w[0], self.classes, 1) + self.classes;
        n += w[self.depth()] * self.proj_hidden + self.proj_hidden;
        n += self.proj_hidden * self.proj_dim + self.proj_dim;
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics; running statistics of the routed domain are updated.
    Train,
    /// Running statistics; parameters untouched.
    Eval,
}

/// Which parameter set a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Encoder,
    Decoder,
    Head,
    Affine(DomainId),
    RunningStat(DomainId),
}

impl TensorRole {
    pub fn trainable(self) -> bool {
        !matches!(self, TensorRole::RunningStat(_))
    }

    /// Membership in the domain-specific segmentation parameter set
    /// (shared kernels plus that domain's affine parameters).
    pub fn in_domain_set(self, d: DomainId) -> bool {
        match self {
            TensorRole::Encoder | TensorRole::Decoder => true,
            TensorRole::Affine(x) => x == d,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv1: Conv2dParams,
    pub norm1: DsbnLayerState,
    pub conv2: Conv2dParams,
    pub norm2: DsbnLayerState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLevel {
    /// 1x1 projection applied after bilinear up-sampling.
    pub up: Conv2dParams,
    pub block: ConvBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    /// One block per resolution level; the last is the bottleneck.
    pub encoder: Vec<ConvBlock>,
    /// `decoder[l]` produces level-`l` features from level `l + 1`.
    pub decoder: Vec<DecoderLevel>,
    pub out_conv: Conv2dParams,
    pub head: ProjectionHead,
}

fn norm_state(c: usize, arch: &Architecture) -> DsbnLayerState {
    let mut s = DsbnLayerState::new(c);
    s.eps = arch.norm_eps;
    s.momentum = arch.norm_momentum;
    s
}

impl ConvBlock {
    fn init(rng: &mut ChaCha8Rng, input: usize, output: usize, arch: &Architecture) -> Self {
        Self {
            conv1: Conv2dParams::init(rng, input, output, 3, false),
            norm1: norm_state(output, arch),
            conv2: Conv2dParams::init(rng, output, output, 3, false),
            norm2: norm_state(output, arch),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            norm1: self.norm1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            norm2: self.norm2.zeros_like(),
        }
    }
}

/// Builds a model with He-initialized kernels and identity DSBN layers in
/// both domains. Deterministic in `seed`.
pub fn build_model(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = &arch.widths;
    let mut encoder = Vec::with_capacity(w.len());
    let mut prev = arch.in_channels;
    for &c in w {
        encoder.push(ConvBlock::init(&mut rng, prev, c, arch));
        prev = c;
    }
    let decoder = (0..arch.depth())
        .map(|l| DecoderLevel {
            up: Conv2dParams::init(&mut rng, w[l + 1], w[l], 1, true),
            block: ConvBlock::init(&mut rng, 2 * w[l], w[l], arch),
        })
        .collect();
    let out_conv = Conv2dParams::init(&mut rng, w[0], arch.classes, 1, true);
    let head = ProjectionHead {
        fc1: Linear::init(&mut rng, w[arch.depth()], arch.proj_hidden),
        fc2: Linear::init(&mut rng, arch.proj_hidden, arch.proj_dim),
    };
    Ok(ModelParams {
        arch: arch.clone(),
        encoder,
        decoder,
        out_conv,
        head,
    })
}

struct BlockCache {
    c1: ConvCache,
    n1: DsbnCache,
    a1: Array4<f64>,
    c2: ConvCache,
    n2: DsbnCache,
    a2: Array4<f64>,
}

/// Saved activations of a batch-statistics encoder pass.
pub struct EncoderPass {
    pub bottleneck: Array4<f64>,
    skips: Vec<Array4<f64>>,
    blocks: Vec<BlockCache>,
    pools: Vec<PoolCache>,
    domain: DomainId,
}

/// Saved activations of a batch-statistics segmentation pass.
pub struct SegPass {
    pub probs: Array4<f64>,
    pub encoder: EncoderPass,
    /// In execution order, `decoder[depth - 1]` first.
    dec_blocks: Vec<BlockCache>,
    dec_up: Vec<ConvCache>,
    out: ConvCache,
}

pub struct HeadPass {
    pooled: Array2<f64>,
    hidden: Array2<f64>,
    activated: Array2<f64>,
    spatial: (usize, usize),
    pub embeddings: Array2<f64>,
}

impl EncoderPass {
    /// Batch statistics of every encoder normalization site, forward order.
    pub fn stats(&self) -> Vec<&BatchStats> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.n1.stats, &b.n2.stats])
            .collect()
    }
}

impl SegPass {
    /// Batch statistics of every normalization site, forward order.
    pub fn stats(&self) -> Vec<&BatchStats> {
        let mut v = self.encoder.stats();
        v.extend(self.dec_blocks.iter().flat_map(|b| [&b.n1.stats, &b.n2.stats]));
        v
    }
}

impl ConvBlock {
    fn forward_batch(&self, x: ArrayView4<f64>, domain: DomainId) -> Result<(Array4<f64>, BlockCache)> {
        let (z1, c1) = self.conv1.forward(x);
        let (n1_out, n1) = normalize_batch(&z1, domain, &self.norm1)?;
        let a1 = relu(&n1_out);
        let (z2, c2) = self.conv2.forward(a1.view());
        let (n2_out, n2) = normalize_batch(&z2, domain, &self.norm2)?;
        let a2 = relu(&n2_out);
        Ok((
            a2.clone(),
            BlockCache {
                c1,
                n1,
                a1,
                c2,
                n2,
                a2,
            },
        ))
    }

    fn forward_eval(&self, x: ArrayView4<f64>, domain: DomainId) -> Result<Array4<f64>> {
        let (z1, _) = self.conv1.forward(x);
        let a1 = relu(&dsbn_forward_eval(&z1, domain, &self.norm1)?);
        let (z2, _) = self.conv2.forward(a1.view());
        Ok(relu(&dsbn_forward_eval(&z2, domain, &self.norm2)?))
    }

    fn backward(&self, cache: &BlockCache, dy: &Array4<f64>, grads: &mut ConvBlock, need_dx: bool) -> Option<Array4<f64>> {
        let d = relu_backward(&cache.a2, dy);
        let d = dsbn_backward(&self.norm2, &cache.n2, &d, &mut grads.norm2);
        let d = self
            .conv2
            .backward(&cache.c2, &d, &mut grads.conv2, true)
            .expect("dx requested");
        let d = relu_backward(&cache.a1, &d);
        let d = dsbn_backward(&self.norm1, &cache.n1, &d, &mut grads.norm1);
        self.conv1.backward(&cache.c1, &d, &mut grads.conv1, need_dx)
    }
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            encoder: self.encoder.iter().map(ConvBlock::zeros_like).collect(),
            decoder: self
                .decoder
                .iter()
                .map(|d| DecoderLevel {
                    up: d.up.zeros_like(),
                    block: d.block.zeros_like(),
                })
                .collect(),
            out_conv: self.out_conv.zeros_like(),
            head: ProjectionHead {
                fc1: self.head.fc1.zeros_like(),
                fc2: self.head.fc2.zeros_like(),
            },
        }
    }

    pub fn depth(&self) -> usize {
        self.arch.depth()
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if c != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.arch.in_channels
            )));
        }
        let f = 1usize << self.depth();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} not divisible by 2^{} = {f}",
                self.depth()
            )));
        }
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Normalization layers in forward execution order.
    pub fn norm_layers(&self) -> Vec<&DsbnLayerState> {
        let mut v: Vec<&DsbnLayerState> = Vec::new();
        for b in &self.encoder {
            v.push(&b.norm1);
            v.push(&b.norm2);
        }
        for d in self.decoder.iter().rev() {
            v.push(&d.block.norm1);
            v.push(&d.block.norm2);
        }
        v
    }

    fn norm_layers_mut(&mut self) -> Vec<&mut DsbnLayerState> {
        let mut v: Vec<&mut DsbnLayerState> = Vec::new();
        for b in self.encoder.iter_mut() {
            v.push(&mut b.norm1);
            v.push(&mut b.norm2);
        }
        for d in self.decoder.iter_mut().rev() {
            v.push(&mut d.block.norm1);
            v.push(&mut d.block.norm2);
        }
        v
    }

    /// Folds batch statistics (a prefix of the layers, forward order) into
    /// the running statistics of `domain`.
    pub fn commit_stats(&mut self, stats: &[&BatchStats], domain: DomainId) -> Result<()> {
        self.commit_stats_from(stats, domain, 0)
    }

    /// As [`ModelParams::commit_stats`], skipping layers before `first`.
    pub fn commit_stats_from(&mut self, stats: &[&BatchStats], domain: DomainId, first: usize) -> Result<()> {
        let layers = self.norm_layers_mut();
        if stats.len() > layers.len() {
            return Err(Error::Structural("more statistics than normalization layers".into()));
        }
        for (layer, st) in layers.into_iter().zip(stats).skip(first) {
            let m = layer.momentum;
            update_running_stats(layer, domain, &st.mean, &st.var, m)?;
        }
        Ok(())
    }

    pub fn encoder_pass(&self, x: &Array4<f64>, domain: DomainId) -> Result<EncoderPass> {
        self.check_input(x)?;
        let depth = self.depth();
        let mut skips = Vec::with_capacity(depth);
        let mut blocks = Vec::with_capacity(depth + 1);
        let mut pools = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for (l, block) in self.encoder.iter().enumerate() {
            let (out, cache) = block.forward_batch(cur.view(), domain)?;
            blocks.push(cache);
            if l < depth {
                let (pooled, pc) = maxpool2(&out);
                pools.push(pc);
                skips.push(out);
                cur = pooled;
            } else {
                cur = out;
            }
        }
        Ok(EncoderPass {
            bottleneck: cur,
            skips,
            blocks,
            pools,
            domain,
        })
    }

    pub fn segment_pass(&self, x: &Array4<f64>, domain: DomainId) -> Result<SegPass> {
        let encoder = self.encoder_pass(x, domain)?;
        let mut cur = encoder.bottleneck.clone();
        let mut dec_blocks = Vec::with_capacity(self.depth());
        let mut dec_up = Vec::with_capacity(self.depth());
        for l in (0..self.depth()).rev() {
            let level = &self.decoder[l];
            let (u, uc) = level.up.forward(upsample2(&cur).view());
            let cat = concat_channels(&encoder.skips[l], &u);
            let (out, bc) = level.block.forward_batch(cat.view(), domain)?;
            dec_up.push(uc);
            dec_blocks.push(bc);
            cur = out;
        }
        let (logits, out) = self.out_conv.forward(cur.view());
        Ok(SegPass {
            probs: softmax_channels(&logits),
            encoder,
            dec_blocks,
            dec_up,
            out,
        })
    }

    /// Accumulates gradients of a segmentation pass into `grads`. An extra
    /// bottleneck gradient (from the projection head) may be merged in.
    pub fn segment_backward(
        &self,
        pass: &SegPass,
        dprobs: &Array4<f64>,
        extra_bottleneck: Option<&Array4<f64>>,
        grads: &mut ModelParams,
    ) {
        let dlogits = softmax_channels_backward(&pass.probs, dprobs);
        let mut d = self
            .out_conv
            .backward(&pass.out, &dlogits, &mut grads.out_conv, true)
            .expect("dx requested");
        let depth = self.depth();
        let mut dskips: Vec<Option<Array4<f64>>> = vec![None; depth];
        // dec_blocks[i] belongs to level depth - 1 - i; walk back from level 0.
        for l in 0..depth {
            let i = depth - 1 - l;
            let level = &self.decoder[l];
            let g = &mut grads.decoder[l];
            let dcat = level
                .block
                .backward(&pass.dec_blocks[i], &d, &mut g.block, true)
                .expect("dx requested");
            let (dskip, du) = split_channels(&dcat, self.arch.widths[l]);
            dskips[l] = Some(dskip);
            let dup = level
                .up
                .backward(&pass.dec_up[i], &du, &mut g.up, true)
                .expect("dx requested");
            d = upsample2_backward(&dup);
        }
        if let Some(extra) = extra_bottleneck {
            d += extra;
        }
        let dskips: Vec<Array4<f64>> = dskips.into_iter().map(|s| s.expect("filled")).collect();
        self.encoder_backward_inner(&pass.encoder, d, Some(&dskips), grads);
    }

    /// Backward of an encoder-only pass given the bottleneck gradient.
    pub fn encoder_backward(&self, pass: &EncoderPass, dbottleneck: Array4<f64>, grads: &mut ModelParams) {
        self.encoder_backward_inner(pass, dbottleneck, None, grads);
    }

    fn encoder_backward_inner(
        &self,
        pass: &EncoderPass,
        dbottleneck: Array4<f64>,
        dskips: Option<&[Array4<f64>]>,
        grads: &mut ModelParams,
    ) {
        let _ = pass.domain;
        let depth = self.depth();
        let mut d = dbottleneck;
        for l in (0..=depth).rev() {
            if l < depth {
                let mut up = maxpool2_backward(&pass.pools[l], &d);
                if let Some(ds) = dskips {
                    up += &ds[l];
                }
                d = up;
            }
            match self.encoder[l].backward(&pass.blocks[l], &d, &mut grads.encoder[l], l > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    pub fn head_pass(&self, bottleneck: ArrayView4<f64>) -> HeadPass {
        let owned = bottleneck.to_owned();
        let pooled = global_avg_pool(&owned);
        let hidden = self.head.fc1.forward(&pooled);
        let activated = hidden.mapv(|v| v.max(0.0));
        let embeddings = self.head.fc2.forward(&activated);
        let (_, _, h, w) = bottleneck.dim();
        HeadPass {
            pooled,
            hidden,
            activated,
            spatial: (h, w),
            embeddings,
        }
    }

    /// Returns the gradient w.r.t. the bottleneck rows that went through the head.
    pub fn head_backward(&self, pass: &HeadPass, demb: &Array2<f64>, grads: &mut ModelParams) -> Array4<f64> {
        let dact = self.head.fc2.backward(&pass.activated, demb, &mut grads.head.fc2);
        let mut dhidden = dact;
        ndarray::Zip::from(&mut dhidden)
            .and(&pass.hidden)
            .for_each(|d, &h| {
                if h <= 0.0 {
                    *d = 0.0
                }
            });
        let dpooled = self.head.fc1.backward(&pass.pooled, &dhidden, &mut grads.head.fc1);
        global_avg_pool_backward(&dpooled, pass.spatial.0, pass.spatial.1)
    }

    /// Per-pixel class probabilities, `N x C x H x W`. In [`Mode::Train`] the
    /// running statistics of `domain` absorb this batch.
    pub fn forward_segment(&mut self, x: &Array4<f64>, domain: DomainId, mode: Mode) -> Result<Array4<f64>> {
        match mode {
            Mode::Eval => self.predict(x, domain),
            Mode::Train => {
                let pass = self.segment_pass(x, domain)?;
                self.commit_stats(&pass.stats(), domain)?;
                Ok(pass.probs)
            }
        }
    }

    /// Embeddings (`N x proj_dim`) of the encoder output routed through `domain`.
    pub fn forward_project(&mut self, x: &Array4<f64>, domain: DomainId, mode: Mode) -> Result<Array2<f64>> {
        match mode {
            Mode::Eval => self.embed(x, domain),
            Mode::Train => {
                let pass = self.encoder_pass(x, domain)?;
                self.commit_stats(&pass.stats(), domain)?;
                Ok(self.head_pass(pass.bottleneck.view()).embeddings)
            }
        }
    }

    fn encode_eval(&self, x: &Array4<f64>, domain: DomainId) -> Result<(Array4<f64>, Vec<Array4<f64>>)> {
        self.check_input(x)?;
        let depth = self.depth();
        let mut skips = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for (l, block) in self.encoder.iter().enumerate() {
            let out = block.forward_eval(cur.view(), domain)?;
            if l < depth {
                cur = maxpool2(&out).0;
                skips.push(out);
            } else {
                cur = out;
            }
        }
        Ok((cur, skips))
    }

    /// Evaluation-mode segmentation. Read-only.
    pub fn predict(&self, x: &Array4<f64>, domain: DomainId) -> Result<Array4<f64>> {
        let (mut cur, skips) = self.encode_eval(x, domain)?;
        for l in (0..self.depth()).rev() {
            let level = &self.decoder[l];
            let (u, _) = level.up.forward(upsample2(&cur).view());
            cur = level.block.forward_eval(concat_channels(&skips[l], &u).view(), domain)?;
        }
        Ok(softmax_channels(&self.out_conv.forward(cur.view()).0))
    }

    /// Evaluation-mode embeddings. Read-only.
    pub fn embed(&self, x: &Array4<f64>, domain: DomainId) -> Result<Array2<f64>> {
        let (bottleneck, _) = self.encode_eval(x, domain)?;
        Ok(self.head_pass(bottleneck.view()).embeddings)
    }

    /// Visits every tensor with its checkpoint key, role and shape.
    pub fn visit(&self, f: &mut dyn FnMut(&str, TensorRole, &[usize], &[f64])) {
        let conv = |f: &mut dyn FnMut(&str, TensorRole, &[usize], &[f64]), name: &str, role, c: &Conv2dParams| {
            f(&format!("{name}.weight"), role, c.weight.shape(), c.weight.as_slice().expect("contiguous"));
            if let Some(b) = &c.bias {
                f(&format!("{name}.bias"), role, b.shape(), b.as_slice().expect("contiguous"));
            }
        };
        let norm = |f: &mut dyn FnMut(&str, TensorRole, &[usize], &[f64]), name: &str, n: &DsbnLayerState| {
            for d in DomainId::ALL {
                let p = n.domain(d);
                let t = d.tag();
                for (field, role, arr) in [
                    ("gamma", TensorRole::Affine(d), &p.gamma),
                    ("beta", TensorRole::Affine(d), &p.beta),
                    ("mean", TensorRole::RunningStat(d), &p.running_mean),
                    ("var", TensorRole::RunningStat(d), &p.running_var),
                ] {
                    f(&format!("dsbn.{name}.{t}.{field}"), role, arr.shape(), arr.as_slice().expect("contiguous"));
                }
            }
        };
        for (l, b) in self.encoder.iter().enumerate() {
            conv(f, &format!("enc.{l}.conv1"), TensorRole::Encoder, &b.conv1);
            norm(f, &format!("enc.{l}.norm1"), &b.norm1);
            conv(f, &format!("enc.{l}.conv2"), TensorRole::Encoder, &b.conv2);
            norm(f, &format!("enc.{l}.norm2"), &b.norm2);
        }
        for (l, d) in self.decoder.iter().enumerate() {
            conv(f, &format!("dec.{l}.up"), TensorRole::Decoder, &d.up);
            conv(f, &format!("dec.{l}.conv1"), TensorRole::Decoder, &d.block.conv1);
            norm(f, &format!("dec.{l}.norm1"), &d.block.norm1);
            conv(f, &format!("dec.{l}.conv2"), TensorRole::Decoder, &d.block.conv2);
            norm(f, &format!("dec.{l}.norm2"), &d.block.norm2);
        }
        conv(f, "out", TensorRole::Decoder, &self.out_conv);
        for (name, lin) in [("head.fc1", &self.head.fc1), ("head.fc2", &self.head.fc2)] {
            f(&format!("{name}.weight"), TensorRole::Head, lin.weight.shape(), lin.weight.as_slice().expect("contiguous"));
            f(&format!("{name}.bias"), TensorRole::Head, lin.bias.shape(), lin.bias.as_slice().expect("contiguous"));
        }
    }

    /// Mutable counterpart of [`ModelParams::visit`], same order and keys.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, &mut [f64])) {
        fn conv(f: &mut dyn FnMut(&str, TensorRole, &mut [f64]), name: &str, role: TensorRole, c: &mut Conv2dParams) {
            f(&format!("{name}.weight"), role, c.weight.as_slice_mut().expect("contiguous"));
            if let Some(b) = c.bias.as_mut() {
                f(&format!("{name}.bias"), role, b.as_slice_mut().expect("contiguous"));
            }
        }
        fn norm(f: &mut dyn FnMut(&str, TensorRole, &mut [f64]), name: &str, n: &mut DsbnLayerState) {
            for d in DomainId::ALL {
                let t = d.tag();
                let p = n.domain_mut(d);
                f(&format!("dsbn.{name}.{t}.gamma"), TensorRole::Affine(d), p.gamma.as_slice_mut().expect("contiguous"));
                f(&format!("dsbn.{name}.{t}.beta"), TensorRole::Affine(d), p.beta.as_slice_mut().expect("contiguous"));
                f(&format!("dsbn.{name}.{t}.mean"), TensorRole::RunningStat(d), p.running_mean.as_slice_mut().expect("contiguous"));
                f(&format!("dsbn.{name}.{t}.var"), TensorRole::RunningStat(d), p.running_var.as_slice_mut().expect("contiguous"));
            }
        }
        for (l, b) in self.encoder.iter_mut().enumerate() {
            conv(f, &format!("enc.{l}.conv1"), TensorRole::Encoder, &mut b.conv1);
            norm(f, &format!("enc.{l}.norm1"), &mut b.norm1);
            conv(f, &format!("enc.{l}.conv2"), TensorRole::Encoder, &mut b.conv2);
            norm(f, &format!("enc.{l}.norm2"), &mut b.norm2);
        }
        for (l, d) in self.decoder.iter_mut().enumerate() {
            conv(f, &format!("dec.{l}.up"), TensorRole::Decoder, &mut d.up);
            conv(f, &format!("dec.{l}.conv1"), TensorRole::Decoder, &mut d.block.conv1);
            norm(f, &format!("dec.{l}.norm1"), &mut d.block.norm1);
            conv(f, &format!("dec.{l}.conv2"), TensorRole::Decoder, &mut d.block.conv2);
            norm(f, &format!("dec.{l}.norm2"), &mut d.block.norm2);
        }
        conv(f, "out", TensorRole::Decoder, &mut self.out_conv);
        for (name, lin) in [("head.fc1", &mut self.head.fc1), ("head.fc2", &mut self.head.fc2)] {
            f(&format!("{name}.weight"), TensorRole::Head, lin.weight.as_slice_mut().expect("contiguous"));
            f(&format!("{name}.bias"), TensorRole::Head, lin.bias.as_slice_mut().expect("contiguous"));
        }
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, _, v| n += v.len());
        n
    }

    /// All tensors matching `keep`, concatenated in visit order.
    pub fn flatten(&self, keep: impl Fn(&str, TensorRole) -> bool) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |name, role, _, v| {
            if keep(name, role) {
                out.extend_from_slice(v);
            }
        });
        out
    }

    /// Copies every DSBN parameter and statistic of `from` onto `to`.
    pub fn copy_domain_norms(&mut self, from: DomainId, to: DomainId) {
        for layer in self.norm_layers_mut() {
            let src = layer.domain(from).clone();
            *layer.domain_mut(to) = src;
        }
    }

    /// Zeroes the entries of `pass` rows outside `rows`.
    pub fn pad_rows(partial: &Array4<f64>, total: usize) -> Array4<f64> {
        let (n, c, h, w) = partial.dim();
        let mut out = Array4::zeros((total, c, h, w));
        out.slice_mut(s![..n, .., .., ..]).assign(partial);
        out
    }
}

/// Per-pixel argmax with ties resolved to the lowest class id.
pub fn argmax_classes(probs: &Array4<f64>) -> ndarray::Array3<u8> {
    let (n, c, h, w) = probs.dim();
    ndarray::Array3::from_shape_fn((n, h, w), |(ni, y, x)| {
        let mut best = 0;
        for k in 1..c {
            if probs[[ni, k, y, x]] > probs[[ni, best, y, x]] {
                best = k;
            }
        }
        best as u8
    })
}

/// Stacks 2D images into an `N x 1 x H x W` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a ndarray::Array2<f64>>) -> Result<Array4<f64>> {
    let views: Vec<_> = images
        .into_iter()
        .map(|i| i.view().insert_axis(Axis(0)))
        .collect();
    if views.is_empty() {
        return Err(Error::Input("cannot stack an empty image list".into()));
    }
    ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn batch(n: usize, size: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((n, 1, size, size), || rng.random::<f64>())
    }

    #[test]
    fn parameter_count_is_a_function_of_the_descriptor() {
        let arch = Architecture::new(vec![16, 32, 64, 128, 256], 2);
        let m = build_model(&arch, 0).unwrap();
        assert_eq!(m.parameter_count(), arch.parameter_count());
        assert_eq!(build_model(&arch, 99).unwrap().parameter_count(), arch.parameter_count());
        let small = Architecture::new(vec![8, 16], 3);
        assert_eq!(build_model(&small, 1).unwrap().parameter_count(), small.parameter_count());
    }

    #[test]
    fn same_seed_same_parameters() {
        let arch = Architecture::new(vec![4, 8, 16], 3);
        assert_eq!(build_model(&arch, 7).unwrap(), build_model(&arch, 7).unwrap());
        assert_ne!(build_model(&arch, 7).unwrap(), build_model(&arch, 8).unwrap());
    }

    #[test]
    fn invalid_descriptors_are_rejected() {
        for widths in [vec![], vec![8], vec![8, 8], vec![16, 8], vec![0, 4]] {
            assert!(matches!(build_model(&Architecture::new(widths, 2), 0), Err(Error::Config(_))));
        }
        assert!(build_model(&Architecture::new(vec![4, 8], 1), 0).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut m = build_model(&Architecture::new(vec![4, 8, 16], 3), 1).unwrap();
        let x = batch(2, 16, 2);
        for mode in [Mode::Train, Mode::Eval] {
            let p = m.forward_segment(&x, DomainId::Target, mode).unwrap();
            assert_eq!(p.dim(), (2, 3, 16, 16));
            for s in p.sum_axis(Axis(1)).iter() {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let m = build_model(&Architecture::new(vec![4, 8], 2), 3).unwrap();
        let x = batch(3, 8, 4);
        assert_eq!(m.predict(&x, DomainId::Source).unwrap(), m.predict(&x, DomainId::Source).unwrap());
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let mut m = build_model(&Architecture::new(vec![4, 8], 3), 5).unwrap();
        m.visit_mut(&mut |_, role, v| {
            if matches!(role, TensorRole::Encoder | TensorRole::Decoder) {
                v.fill(0.0);
            }
        });
        let x = batch(2, 8, 6);
        for mode in [Mode::Train, Mode::Eval] {
            let p = m.forward_segment(&x, DomainId::Source, mode).unwrap();
            assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn indivisible_size_is_a_shape_error() {
        let mut m = build_model(&Architecture::new(vec![4, 8, 16], 2), 0).unwrap();
        let x = batch(2, 10, 0);
        assert!(matches!(m.forward_segment(&x, DomainId::Source, Mode::Eval), Err(Error::Shape(_))));
        assert!(matches!(m.forward_project(&x, DomainId::Source, Mode::Train), Err(Error::Shape(_))));
    }

    #[test]
    fn symmetric_norms_give_identical_embeddings() {
        let mut m = build_model(&Architecture::new(vec![4, 8, 16], 2), 2).unwrap();
        let x = batch(2, 16, 9);
        let mut m2 = m.clone();
        let gs = m.forward_project(&x, DomainId::Source, Mode::Train).unwrap();
        let gt = m2.forward_project(&x, DomainId::Target, Mode::Train).unwrap();
        assert_eq!(gs, gt);
        assert_eq!(gs.dim(), (2, 128));
        let small = batch(2, 8, 1);
        assert_eq!(m.embed(&small, DomainId::Source).unwrap().dim(), (2, 128));
    }

    #[test]
    fn routing_differs_only_through_norms() {
        let mut m = build_model(&Architecture::new(vec![4, 8], 2), 4).unwrap();
        let x = batch(4, 8, 5);
        // diverge the two domains
        m.forward_segment(&(x.clone() * 3.0), DomainId::Target, Mode::Train).unwrap();
        m.visit_mut(&mut |_, role, v| {
            if role == TensorRole::Affine(DomainId::Target) {
                v.iter_mut().for_each(|x| *x += 0.3);
            }
        });
        let s = m.predict(&x, DomainId::Source).unwrap();
        let t = m.predict(&x, DomainId::Target).unwrap();
        assert_ne!(s, t);
        m.copy_domain_norms(DomainId::Source, DomainId::Target);
        assert_eq!(m.predict(&x, DomainId::Target).unwrap(), s);
    }

    #[test]
    fn train_mode_updates_only_the_routed_domain() {
        let mut m = build_model(&Architecture::new(vec![4, 8], 2), 4).unwrap();
        let before_t = m.flatten(|_, r| r == TensorRole::RunningStat(DomainId::Target));
        let before_s = m.flatten(|_, r| r == TensorRole::RunningStat(DomainId::Source));
        m.forward_segment(&batch(2, 8, 1), DomainId::Source, Mode::Train).unwrap();
        assert_eq!(before_t, m.flatten(|_, r| r == TensorRole::RunningStat(DomainId::Target)));
        assert_ne!(before_s, m.flatten(|_, r| r == TensorRole::RunningStat(DomainId::Source)));
    }

    #[test]
    fn argmax_ties_go_to_lowest_class() {
        let p = Array4::from_elem((1, 3, 2, 2), 1.0 / 3.0);
        assert!(argmax_classes(&p).iter().all(|&c| c == 0));
    }

    #[test]
    fn checkpoint_keys_follow_dsbn_convention() {
        let m = build_model(&Architecture::new(vec![4, 8], 2), 0).unwrap();
        let mut keys = Vec::new();
        m.visit(&mut |k, _, _, _| keys.push(k.to_string()));
        assert!(keys.contains(&"dsbn.enc.0.norm1.S.gamma".to_string()));
        assert!(keys.contains(&"dsbn.dec.0.norm2.T.var".to_string()));
        let mut keys_mut = Vec::new();
        let mut mm = m.clone();
        mm.visit_mut(&mut |k, _, _| keys_mut.push(k.to_string()));
        assert_eq!(keys, keys_mut);
    }
}
