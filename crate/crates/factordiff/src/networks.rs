//! Latent encoder and factor-conditioned denoiser.
//!
//! The encoder maps an image to K latent vectors of dimension D through a
//! stack of downsampling residual blocks and a single linear head. The
//! denoiser is a U-Net whose conditioning vector is the concatenation of a
//! sinusoidal-then-MLP time embedding (dim D) with one latent (dim D),
//! projected to an embedding width of 4x base_channels and injected into
//! every residual block.
//!
//! [`ModelHandle`] bundles both networks with their parameter arena, the
//! noise schedule, and checkpoint (de)serialization.

use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::nn::{
    silu, silu_backward, time_embedding, upsample2_nearest, upsample2_nearest_backward, Conv2d,
    GroupNorm, Init, Linear, ParamArena, SelfAttention2d,
};
use crate::nn::{AttnCache, GnCache};
use crate::schedule::{NoiseSchedule, NoisyImage, ScheduleKind};
use crate::{Error, Result};

/// Residual blocks per U-Net resolution level.
pub const RES_BLOCKS_PER_LEVEL: usize = 2;

/// Checkpoint format version this build writes and accepts.
pub const CHECKPOINT_VERSION: u32 = 1;

const CHECKPOINT_MAGIC: [u8; 4] = *b"FDIF";

/// What the denoiser's raw output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predict {
    /// Network predicts the clean image x0.
    X0,
    /// Network predicts the noise that was added.
    Eps,
}

impl Predict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Predict::X0 => "x0",
            Predict::Eps => "eps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x0" => Ok(Predict::X0),
            "eps" => Ok(Predict::Eps),
            other => Err(Error::Config(format!(
                "unknown predict mode '{other}' (expected 'x0' or 'eps')"
            ))),
        }
    }
}

/// How the conditioning vector is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondMode {
    /// Concatenate time embedding (dim D) with one latent (dim D).
    ConcatTimeLatent,
}

impl CondMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CondMode::ConcatTimeLatent => "concat_time_latent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat_time_latent" => Ok(CondMode::ConcatTimeLatent),
            other => Err(Error::Config(format!(
                "unknown cond mode '{other}' (expected 'concat_time_latent')"
            ))),
        }
    }
}

/// A set of K latent component vectors inferred from one image.
#[derive(Debug, Clone)]
pub struct LatentSet {
    /// [K, D] latent matrix; row k is component k.
    pub z: Array2<f32>,
    /// Optional identifier of the image or model this was inferred from.
    pub source_id: Option<String>,
}

impl LatentSet {
    pub fn new(z: Array2<f32>) -> Result<Self> {
        let (k, d) = z.dim();
        if k < 1 || d < 1 {
            return Err(Error::Argument(format!(
                "latent set must be at least 1x1, got {k}x{d}"
            )));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Argument("latent set contains non-finite entries".into()));
        }
        Ok(LatentSet { z, source_id: None })
    }

    pub fn k(&self) -> usize {
        self.z.nrows()
    }

    pub fn d(&self) -> usize {
        self.z.ncols()
    }

    /// Component k as a contiguous slice.
    pub fn component(&self, k: usize) -> Result<&[f32]> {
        if k >= self.k() {
            return Err(Error::Argument(format!(
                "component index {k} out of range (K = {})",
                self.k()
            )));
        }
        let d = self.d();
        Ok(&self.z.as_slice().expect("latents are contiguous")[k * d..(k + 1) * d])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Channel width of the first block; doubles at each block.
    pub hidden_dim: usize,
    /// Number of downsampling residual blocks.
    pub num_blocks: usize,
    /// Number of latent components.
    pub k: usize,
    /// Dimension of each component.
    pub d: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { hidden_dim: 64, num_blocks: 3, k: 4, d: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Must equal the latent dimension D under `ConcatTimeLatent`.
    pub time_embed_dim: usize,
    pub cond_mode: CondMode,
    pub predict: Predict,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4],
            time_embed_dim: 16,
            cond_mode: CondMode::ConcatTimeLatent,
            predict: Predict::X0,
        }
    }
}

fn silu2(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

fn silu2_backward(x: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    let mut dx = dy.clone();
    ndarray::azip!((d in &mut dx, &v in x) {
        let s = 1.0 / (1.0 + (-v).exp());
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

/// Concatenate along the channel axis into a standard-layout array.
fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    let (bs, c1, h, w) = a.dim();
    let c2 = b.dim().1;
    debug_assert_eq!((b.dim().0, b.dim().2, b.dim().3), (bs, h, w));
    let mut y = Array4::zeros((bs, c1 + c2, h, w));
    y.slice_mut(s![.., ..c1, .., ..]).assign(a);
    y.slice_mut(s![.., c1.., .., ..]).assign(b);
    y
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Downsampling residual block without time conditioning.
#[derive(Debug, Clone)]
struct EncBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Conv2d,
}

struct EncBlockCache {
    x: Array4<f32>,
    gn1: GnCache,
    n1: Array4<f32>,
    h: Array4<f32>,
    gn2: GnCache,
    n2: Array4<f32>,
}

impl EncBlock {
    fn new(
        arena: &mut ParamArena,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        EncBlock {
            gn1: GroupNorm::new(arena, rng, &format!("{name}.gn1"), cin),
            conv1: Conv2d::new(arena, rng, &format!("{name}.c1"), cin, cout, 3, 2, 1),
            gn2: GroupNorm::new(arena, rng, &format!("{name}.gn2"), cout),
            conv2: Conv2d::new(arena, rng, &format!("{name}.c2"), cout, cout, 3, 1, 1),
            skip: Conv2d::new(arena, rng, &format!("{name}.skip"), cin, cout, 1, 2, 0),
        }
    }

    fn forward(&self, arena: &ParamArena, x: Array4<f32>) -> (Array4<f32>, EncBlockCache) {
        let (n1, gn1) = self.gn1.forward(arena, &x);
        let a1 = silu(&n1);
        let h = self.conv1.forward(arena, &a1);
        let (n2, gn2) = self.gn2.forward(arena, &h);
        let a2 = silu(&n2);
        let mut y = self.conv2.forward(arena, &a2);
        y += &self.skip.forward(arena, &x);
        (y, EncBlockCache { x, gn1, n1, h, gn2, n2 })
    }

    fn backward(
        &self,
        arena: &mut ParamArena,
        c: &EncBlockCache,
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let a2 = silu(&c.n2);
        let da2 = self.conv2.backward(arena, &a2, dy);
        let dn2 = silu_backward(&c.n2, &da2);
        let dh = self.gn2.backward(arena, &c.h, &c.gn2, &dn2);
        let a1 = silu(&c.n1);
        let da1 = self.conv1.backward(arena, &a1, &dh);
        let dn1 = silu_backward(&c.n1, &da1);
        let mut dx = self.gn1.backward(arena, &c.x, &c.gn1, &dn1);
        dx += &self.skip.backward(arena, &c.x, dy);
        dx
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    blocks: Vec<EncBlock>,
    head: Linear,
    k: usize,
    d: usize,
    flat_dim: usize,
}

pub(crate) struct EncCache {
    blocks: Vec<EncBlockCache>,
    flat: Array2<f32>,
}

impl Encoder {
    fn build(
        arena: &mut ParamArena,
        rng: &mut ChaCha12Rng,
        cfg: &EncoderConfig,
        img_channels: usize,
        resolution: usize,
    ) -> Self {
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let mut cin = img_channels;
        for i in 0..cfg.num_blocks {
            let cout = cfg.hidden_dim << i;
            blocks.push(EncBlock::new(arena, rng, &format!("enc.b{i}"), cin, cout));
            cin = cout;
        }
        let spatial = resolution >> cfg.num_blocks;
        let flat_dim = cin * spatial * spatial;
        let head = Linear::new(arena, rng, "enc.head", flat_dim, cfg.k * cfg.d);
        Encoder { blocks, head, k: cfg.k, d: cfg.d, flat_dim }
    }

    pub(crate) fn forward(
        &self,
        arena: &ParamArena,
        x: &Array4<f32>,
    ) -> (Array3<f32>, EncCache) {
        let bs = x.dim().0;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            let (next, c) = block.forward(arena, h);
            caches.push(c);
            h = next;
        }
        let flat = h
            .into_shape_with_order((bs, self.flat_dim))
            .expect("encoder feature map is contiguous");
        let y = self.head.forward(arena, &flat);
        let z = y
            .into_shape_with_order((bs, self.k, self.d))
            .expect("head output is contiguous");
        (z, EncCache { blocks: caches, flat })
    }

    /// Backward from latent gradients; accumulates parameter gradients and
    /// returns the input-image gradient.
    pub(crate) fn backward(
        &self,
        arena: &mut ParamArena,
        cache: &EncCache,
        dz: &Array3<f32>,
    ) -> Array4<f32> {
        let bs = dz.dim().0;
        let dy = dz
            .to_owned()
            .into_shape_with_order((bs, self.k * self.d))
            .expect("latent grads are contiguous");
        let dflat = self.head.backward(arena, &cache.flat, &dy);
        let last = cache.blocks.last().expect("encoder has blocks");
        let (_, c, h, w) = {
            // conv2 output shape equals the block output shape
            let d = last.n2.dim();
            (d.0, d.1, d.2, d.3)
        };
        let mut dh = dflat
            .into_shape_with_order((bs, c, h, w))
            .expect("flat grads are contiguous");
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = block.backward(arena, c, &dh);
        }
        dh
    }
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

/// Time- and latent-conditioned residual block.
#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    cout: usize,
}

struct ResCache {
    x: Array4<f32>,
    gn1: GnCache,
    n1: Array4<f32>,
    /// conv1 output (input of the second norm).
    h: Array4<f32>,
    gn2: GnCache,
    /// Second norm output after the broadcast conditioning shift.
    s: Array4<f32>,
}

impl ResBlock {
    fn new(
        arena: &mut ParamArena,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
    ) -> Self {
        ResBlock {
            gn1: GroupNorm::new(arena, rng, &format!("{name}.gn1"), cin),
            conv1: Conv2d::new(arena, rng, &format!("{name}.c1"), cin, cout, 3, 1, 1),
            emb: Linear::new(arena, rng, &format!("{name}.emb"), emb_dim, cout),
            gn2: GroupNorm::new(arena, rng, &format!("{name}.gn2"), cout),
            // near-zero init keeps the residual branch quiet at start of
            // training while still letting gradients reach the conditioning
            conv2: Conv2d::with_init(
                arena,
                rng,
                &format!("{name}.c2"),
                cout,
                cout,
                3,
                1,
                1,
                Init::ScaledFanIn(cout * 9, 1e-2),
            ),
            skip: (cin != cout)
                .then(|| Conv2d::new(arena, rng, &format!("{name}.skip"), cin, cout, 1, 1, 0)),
            cout,
        }
    }

    fn forward(
        &self,
        arena: &ParamArena,
        x: Array4<f32>,
        emb_act: &Array2<f32>,
    ) -> (Array4<f32>, ResCache) {
        let (n1, gn1) = self.gn1.forward(arena, &x);
        let a1 = silu(&n1);
        let h = self.conv1.forward(arena, &a1);
        let es = silu2(emb_act);
        let ep = self.emb.forward(arena, &es);
        // the conditioning shift sits after the norm so mean removal can
        // never cancel it
        let (n2, gn2) = self.gn2.forward(arena, &h);
        let mut s = n2;
        let (bs, _, hh, ww) = s.dim();
        {
            let ss = s.as_slice_mut().expect("norm output is contiguous");
            let n = hh * ww;
            for b in 0..bs {
                for c in 0..self.cout {
                    let add = ep[[b, c]];
                    for v in &mut ss[(b * self.cout + c) * n..(b * self.cout + c + 1) * n] {
                        *v += add;
                    }
                }
            }
        }
        let a2 = silu(&s);
        let mut y = self.conv2.forward(arena, &a2);
        match &self.skip {
            Some(conv) => y += &conv.forward(arena, &x),
            None => y += &x,
        }
        (y, ResCache { x, gn1, n1, h, gn2, s })
    }

    /// Returns (input gradient, conditioning-vector gradient).
    fn backward(
        &self,
        arena: &mut ParamArena,
        c: &ResCache,
        emb_act: &Array2<f32>,
        dy: &Array4<f32>,
    ) -> (Array4<f32>, Array2<f32>) {
        let a2 = silu(&c.s);
        let da2 = self.conv2.backward(arena, &a2, dy);
        let ds = silu_backward(&c.s, &da2);

        let (bs, _, hh, ww) = ds.dim();
        let mut dep = Array2::zeros((bs, self.cout));
        {
            let dss = ds.as_slice().expect("grads are contiguous");
            let n = hh * ww;
            for b in 0..bs {
                for ch in 0..self.cout {
                    let mut acc = 0.0f64;
                    for &v in &dss[(b * self.cout + ch) * n..(b * self.cout + ch + 1) * n] {
                        acc += v as f64;
                    }
                    dep[[b, ch]] = acc as f32;
                }
            }
        }
        let es = silu2(emb_act);
        let des = self.emb.backward(arena, &es, &dep);
        let demb = silu2_backward(emb_act, &des);

        let dh = self.gn2.backward(arena, &c.h, &c.gn2, &ds);
        let a1 = silu(&c.n1);
        let da1 = self.conv1.backward(arena, &a1, &dh);
        let dn1 = silu_backward(&c.n1, &da1);
        let mut dx = self.gn1.backward(arena, &c.x, &c.gn1, &dn1);
        match &self.skip {
            Some(conv) => dx += &conv.backward(arena, &c.x, dy),
            None => dx += dy,
        }
        (dx, demb)
    }
}

#[derive(Debug)]
struct DownLevel {
    blocks: Vec<ResBlock>,
    attn: Vec<Option<SelfAttention2d>>,
    down: Option<Conv2d>,
}

#[derive(Debug)]
struct UpLevel {
    blocks: Vec<ResBlock>,
    attn: Vec<Option<SelfAttention2d>>,
    /// Conv applied after nearest-neighbor upsampling, absent at the top.
    up: Option<Conv2d>,
    /// Channel width flowing into each block before the skip concat.
    in_chs: Vec<usize>,
}

#[derive(Debug)]
pub(crate) struct Denoiser {
    tm1: Linear,
    tm2: Linear,
    cond: Linear,
    stem: Conv2d,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: SelfAttention2d,
    mid2: ResBlock,
    /// Deepest level first (processing order).
    up: Vec<UpLevel>,
    out_gn: GroupNorm,
    out_conv: Conv2d,
    d: usize,
    emb_dim: usize,
}

pub(crate) struct DenCache {
    temb_raw: Array2<f32>,
    th: Array2<f32>,
    cin: Array2<f32>,
    /// Conditioning vector fed (through a silu) to every residual block.
    pub(crate) emb: Array2<f32>,
    stem_in: Array4<f32>,
    res: Vec<ResCache>,
    attn: Vec<(Array4<f32>, AttnCache)>,
    down_in: Vec<Array4<f32>>,
    up_in: Vec<Array4<f32>>,
    out_in: Array4<f32>,
    out_gnc: GnCache,
    out_n: Array4<f32>,
}

impl Denoiser {
    fn build(
        arena: &mut ParamArena,
        rng: &mut ChaCha12Rng,
        cfg: &DenoiserConfig,
        img_channels: usize,
    ) -> Self {
        let d = cfg.time_embed_dim;
        let emb_dim = 4 * cfg.base_channels;
        let tm1 = Linear::new(arena, rng, "den.tm1", d, d);
        let tm2 = Linear::new(arena, rng, "den.tm2", d, d);
        let cond = Linear::new(arena, rng, "den.cond", 2 * d, emb_dim);
        let base = cfg.base_channels;
        let levels = cfg.channel_multipliers.len();
        let stem = Conv2d::new(arena, rng, "den.stem", img_channels, base, 3, 1, 1);

        let mut skip_chs = vec![base];
        let mut cur = base;
        let mut down = Vec::with_capacity(levels);
        for (i, &m) in cfg.channel_multipliers.iter().enumerate() {
            let ch = base * m;
            let lowest = i == levels - 1;
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for r in 0..RES_BLOCKS_PER_LEVEL {
                blocks.push(ResBlock::new(
                    arena,
                    rng,
                    &format!("den.d{i}.b{r}"),
                    cur,
                    ch,
                    emb_dim,
                ));
                cur = ch;
                attn.push(lowest.then(|| {
                    SelfAttention2d::new(arena, rng, &format!("den.d{i}.attn{r}"), ch)
                }));
                skip_chs.push(ch);
            }
            let down_conv = (!lowest).then(|| {
                skip_chs.push(ch);
                Conv2d::new(arena, rng, &format!("den.down{i}"), ch, ch, 3, 2, 1)
            });
            down.push(DownLevel { blocks, attn, down: down_conv });
        }

        let mid1 = ResBlock::new(arena, rng, "den.mid.b0", cur, cur, emb_dim);
        let mid_attn = SelfAttention2d::new(arena, rng, "den.mid.attn", cur);
        let mid2 = ResBlock::new(arena, rng, "den.mid.b1", cur, cur, emb_dim);

        let mut up = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let ch = base * cfg.channel_multipliers[i];
            let lowest = i == levels - 1;
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            let mut in_chs = Vec::new();
            for r in 0..=RES_BLOCKS_PER_LEVEL {
                let sc = skip_chs.pop().expect("skip channel bookkeeping");
                in_chs.push(cur);
                blocks.push(ResBlock::new(
                    arena,
                    rng,
                    &format!("den.u{i}.b{r}"),
                    cur + sc,
                    ch,
                    emb_dim,
                ));
                cur = ch;
                attn.push(lowest.then(|| {
                    SelfAttention2d::new(arena, rng, &format!("den.u{i}.attn{r}"), ch)
                }));
            }
            let up_conv =
                (i > 0).then(|| Conv2d::new(arena, rng, &format!("den.up{i}"), ch, ch, 3, 1, 1));
            up.push(UpLevel { blocks, attn, up: up_conv, in_chs });
        }
        assert!(skip_chs.is_empty(), "skip stack fully consumed");

        let out_gn = GroupNorm::new(arena, rng, "den.out.gn", cur);
        // near-zero init keeps the untrained prediction close to zero while
        // leaving every upstream parameter with a nonzero first gradient
        let out_conv = Conv2d::with_init(
            arena,
            rng,
            "den.out.conv",
            cur,
            img_channels,
            3,
            1,
            1,
            Init::ScaledFanIn(cur * 9, 1e-2),
        );

        Denoiser {
            tm1,
            tm2,
            cond,
            stem,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            out_gn,
            out_conv,
            d,
            emb_dim,
        }
    }

    pub(crate) fn forward(
        &self,
        arena: &ParamArena,
        x: &Array4<f32>,
        t: &[u32],
        z: &Array2<f32>,
    ) -> (Array4<f32>, DenCache) {
        let bs = x.dim().0;
        assert_eq!(t.len(), bs, "one timestep per batch element");
        assert_eq!(z.dim(), (bs, self.d), "one latent row per batch element");

        // conditioning vector
        let mut temb_raw = Array2::zeros((bs, self.d));
        for (b, &tb) in t.iter().enumerate() {
            let e: Array1<f32> = time_embedding(tb as f64, self.d);
            temb_raw.row_mut(b).assign(&e);
        }
        let th = self.tm1.forward(arena, &temb_raw);
        let ta = silu2(&th);
        let temb = self.tm2.forward(arena, &ta);
        let mut cin = Array2::zeros((bs, 2 * self.d));
        cin.slice_mut(s![.., ..self.d]).assign(&temb);
        cin.slice_mut(s![.., self.d..]).assign(z);
        let emb = self.cond.forward(arena, &cin);

        let mut res_caches = Vec::new();
        let mut attn_caches = Vec::new();
        let mut down_in = Vec::new();
        let mut up_in = Vec::new();

        let mut h = self.stem.forward(arena, x);
        let mut hs: Vec<Array4<f32>> = vec![h.clone()];
        for level in &self.down {
            for (block, attn) in level.blocks.iter().zip(&level.attn) {
                let (next, c) = block.forward(arena, h, &emb);
                res_caches.push(c);
                h = next;
                if let Some(a) = attn {
                    let (next, ac) = a.forward(arena, &h);
                    attn_caches.push((h, ac));
                    h = next;
                }
                hs.push(h.clone());
            }
            if let Some(conv) = &level.down {
                down_in.push(h.clone());
                h = conv.forward(arena, &h);
                hs.push(h.clone());
            }
        }

        let (next, c) = self.mid1.forward(arena, h, &emb);
        res_caches.push(c);
        h = next;
        let (next, ac) = self.mid_attn.forward(arena, &h);
        attn_caches.push((h, ac));
        h = next;
        let (next, c) = self.mid2.forward(arena, h, &emb);
        res_caches.push(c);
        h = next;

        for level in &self.up {
            for (block, attn) in level.blocks.iter().zip(&level.attn) {
                let skip = hs.pop().expect("skip activation available");
                let cat = concat_channels(&h, &skip);
                let (next, c) = block.forward(arena, cat, &emb);
                res_caches.push(c);
                h = next;
                if let Some(a) = attn {
                    let (next, ac) = a.forward(arena, &h);
                    attn_caches.push((h, ac));
                    h = next;
                }
            }
            if let Some(conv) = &level.up {
                let post = upsample2_nearest(&h);
                up_in.push(post.clone());
                h = conv.forward(arena, &post);
            }
        }
        debug_assert!(hs.is_empty(), "all skip activations consumed");

        let (out_n, out_gnc) = self.out_gn.forward(arena, &h);
        let a = silu(&out_n);
        let y = self.out_conv.forward(arena, &a);
        (
            y,
            DenCache {
                temb_raw,
                th,
                cin,
                emb,
                stem_in: x.clone(),
                res: res_caches,
                attn: attn_caches,
                down_in,
                up_in,
                out_in: h,
                out_gnc,
                out_n,
            },
        )
    }

    /// Backward pass; accumulates parameter gradients and returns
    /// (input gradient, latent gradient [B, D]).
    pub(crate) fn backward(
        &self,
        arena: &mut ParamArena,
        mut cache: DenCache,
        dy: &Array4<f32>,
    ) -> (Array4<f32>, Array2<f32>) {
        let bs = dy.dim().0;
        let a = silu(&cache.out_n);
        let da = self.out_conv.backward(arena, &a, dy);
        let dn = silu_backward(&cache.out_n, &da);
        let mut dh = self.out_gn.backward(arena, &cache.out_in, &cache.out_gnc, &dn);

        let mut demb: Array2<f32> = Array2::zeros((bs, self.emb_dim));
        // gradients for skip activations, pushed as the up path is reversed
        // and popped as the down path is reversed
        let mut dhs: Vec<Array4<f32>> = Vec::new();

        for level in self.up.iter().rev() {
            if let Some(conv) = &level.up {
                let post = cache.up_in.pop().expect("upsample input cached");
                let dpost = conv.backward(arena, &post, &dh);
                dh = upsample2_nearest_backward(&dpost);
            }
            for ((block, attn), &cur_ch) in
                level.blocks.iter().zip(&level.attn).zip(&level.in_chs).rev()
            {
                if let Some(a) = attn {
                    let (x_in, ac) = cache.attn.pop().expect("attention cache");
                    dh = a.backward(arena, &x_in, &ac, &dh);
                }
                let rc = cache.res.pop().expect("res cache");
                let (dcat, de) = block.backward(arena, &rc, &cache.emb, &dh);
                demb += &de;
                dh = dcat.slice(s![.., ..cur_ch, .., ..]).to_owned();
                dhs.push(dcat.slice(s![.., cur_ch.., .., ..]).to_owned());
            }
        }

        {
            let rc = cache.res.pop().expect("mid2 cache");
            let (dx, de) = self.mid2.backward(arena, &rc, &cache.emb, &dh);
            demb += &de;
            dh = dx;
            let (x_in, ac) = cache.attn.pop().expect("mid attention cache");
            dh = self.mid_attn.backward(arena, &x_in, &ac, &dh);
            let rc = cache.res.pop().expect("mid1 cache");
            let (dx, de) = self.mid1.backward(arena, &rc, &cache.emb, &dh);
            demb += &de;
            dh = dx;
        }

        for level in self.down.iter().rev() {
            if let Some(conv) = &level.down {
                dh += &dhs.pop().expect("skip grad for downsample output");
                let x_in = cache.down_in.pop().expect("downsample input cached");
                dh = conv.backward(arena, &x_in, &dh);
            }
            for (block, attn) in level.blocks.iter().zip(&level.attn).rev() {
                dh += &dhs.pop().expect("skip grad for block output");
                if let Some(a) = attn {
                    let (x_in, ac) = cache.attn.pop().expect("attention cache");
                    dh = a.backward(arena, &x_in, &ac, &dh);
                }
                let rc = cache.res.pop().expect("res cache");
                let (dx, de) = block.backward(arena, &rc, &cache.emb, &dh);
                demb += &de;
                dh = dx;
            }
        }
        dh += &dhs.pop().expect("skip grad for stem output");
        debug_assert!(dhs.is_empty() && cache.res.is_empty() && cache.attn.is_empty());
        let dx = self.stem.backward(arena, &cache.stem_in, &dh);

        // conditioning backward
        let dcin = self.cond.backward(arena, &cache.cin, &demb);
        let dtemb = dcin.slice(s![.., ..self.d]).to_owned();
        let dz = dcin.slice(s![.., self.d..]).to_owned();
        let ta = silu2(&cache.th);
        let dta = self.tm2.backward(arena, &ta, &dtemb);
        let dth = silu2_backward(&cache.th, &dta);
        let _ = self.tm1.backward(arena, &cache.temb_raw, &dth);
        (dx, dz)
    }
}

// ---------------------------------------------------------------------------
// ModelHandle
// ---------------------------------------------------------------------------

/// A trained or trainable model: encoder + denoiser + schedule.
#[derive(Debug)]
pub struct ModelHandle {
    arena: ParamArena,
    encoder: Encoder,
    denoiser: Denoiser,
    enc_cfg: EncoderConfig,
    den_cfg: DenoiserConfig,
    schedule: NoiseSchedule,
    resolution: usize,
    img_channels: usize,
    version: u32,
}

impl ModelHandle {
    pub fn new(
        enc_cfg: EncoderConfig,
        den_cfg: DenoiserConfig,
        schedule: NoiseSchedule,
        resolution: usize,
        img_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        if enc_cfg.hidden_dim < 1 || enc_cfg.num_blocks < 1 || enc_cfg.k < 1 || enc_cfg.d < 1 {
            return Err(Error::Config(
                "encoder hidden_dim, num_blocks, K and D must all be >= 1".into(),
            ));
        }
        if enc_cfg.d % 2 != 0 || enc_cfg.d < 2 {
            return Err(Error::Config(format!(
                "latent dimension D must be even and >= 2 for the sinusoidal time embedding, got {}",
                enc_cfg.d
            )));
        }
        if den_cfg.base_channels < 1 {
            return Err(Error::Config("denoiser base_channels must be >= 1".into()));
        }
        if den_cfg.channel_multipliers.is_empty()
            || den_cfg.channel_multipliers.iter().any(|&m| m < 1)
        {
            return Err(Error::Config(
                "denoiser channel_multipliers must be a nonempty list of integers >= 1".into(),
            ));
        }
        match den_cfg.cond_mode {
            CondMode::ConcatTimeLatent => {
                if den_cfg.time_embed_dim != enc_cfg.d {
                    return Err(Error::Config(format!(
                        "time_embed_dim {} must equal latent dimension D {} under concat_time_latent",
                        den_cfg.time_embed_dim, enc_cfg.d
                    )));
                }
            }
        }
        if img_channels < 1 {
            return Err(Error::Config("img_channels must be >= 1".into()));
        }
        let enc_down = 1usize << enc_cfg.num_blocks;
        if resolution % enc_down != 0 || resolution / enc_down < 1 {
            return Err(Error::Config(format!(
                "resolution {resolution} must be divisible by 2^{} for the encoder",
                enc_cfg.num_blocks
            )));
        }
        let den_down = 1usize << (den_cfg.channel_multipliers.len() - 1);
        if resolution % den_down != 0 || resolution / den_down < 2 {
            return Err(Error::Config(format!(
                "resolution {resolution} must be divisible by 2^{} with at least 2px at the lowest level",
                den_cfg.channel_multipliers.len() - 1
            )));
        }

        let mut arena = ParamArena::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = Encoder::build(&mut arena, &mut rng, &enc_cfg, img_channels, resolution);
        let denoiser = Denoiser::build(&mut arena, &mut rng, &den_cfg, img_channels);
        Ok(ModelHandle {
            arena,
            encoder,
            denoiser,
            enc_cfg,
            den_cfg,
            schedule,
            resolution,
            img_channels,
            version: CHECKPOINT_VERSION,
        })
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.enc_cfg
    }

    pub fn denoiser_config(&self) -> &DenoiserConfig {
        &self.den_cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn img_channels(&self) -> usize {
        self.img_channels
    }

    pub fn k(&self) -> usize {
        self.enc_cfg.k
    }

    pub fn d(&self) -> usize {
        self.enc_cfg.d
    }

    pub fn predict(&self) -> Predict {
        self.den_cfg.predict
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn num_params(&self) -> usize {
        self.arena.num_scalars()
    }

    pub(crate) fn arena(&self) -> &ParamArena {
        &self.arena
    }

    #[cfg(test)]
    pub(crate) fn arena_mut(&mut self) -> &mut ParamArena {
        &mut self.arena
    }

    pub(crate) fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    /// Split borrow for training: both networks plus the mutable arena.
    pub(crate) fn parts_mut(&mut self) -> (&Encoder, &Denoiser, &mut ParamArena) {
        (&self.encoder, &self.denoiser, &mut self.arena)
    }

    fn check_image_shape(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.img_channels, self.resolution, self.resolution] {
            return Err(Error::Argument(format!(
                "image shape {shape:?} does not match model ({}x{}x{})",
                self.img_channels, self.resolution, self.resolution
            )));
        }
        Ok(())
    }

    /// Infer the K latent components of one image in [-1, 1].
    pub fn encode(&self, x0: ArrayView3<f32>) -> Result<LatentSet> {
        self.check_image_shape(x0.shape())?;
        let mut batch = Array4::zeros((
            1,
            self.img_channels,
            self.resolution,
            self.resolution,
        ));
        batch.index_axis_mut(Axis(0), 0).assign(&x0);
        let (z, _) = self.encoder.forward(&self.arena, &batch);
        LatentSet::new(z.index_axis(Axis(0), 0).to_owned())
    }

    /// Encode a batch; returns [B, K, D].
    pub fn encode_batch(&self, x: &Array4<f32>) -> Result<Array3<f32>> {
        let (_, c, h, w) = x.dim();
        self.check_image_shape(&[c, h, w])?;
        Ok(self.encoder.forward(&self.arena, x).0)
    }

    /// Raw denoiser output for one image state and one latent; interpretation
    /// (x0 vs eps) follows `denoiser_config().predict`.
    pub fn denoise(&self, x_t: &NoisyImage, z_k: &[f32]) -> Result<Array3<f32>> {
        self.check_image_shape(x_t.pixels.shape())?;
        if z_k.len() != self.enc_cfg.d {
            return Err(Error::Argument(format!(
                "latent length {} does not match model D {}",
                z_k.len(),
                self.enc_cfg.d
            )));
        }
        if x_t.t > self.schedule.t_max() {
            return Err(Error::Argument(format!(
                "timestep {} exceeds schedule T {}",
                x_t.t,
                self.schedule.t_max()
            )));
        }
        let mut batch = Array4::zeros((
            1,
            self.img_channels,
            self.resolution,
            self.resolution,
        ));
        batch.index_axis_mut(Axis(0), 0).assign(&x_t.pixels);
        let z = Array2::from_shape_vec((1, z_k.len()), z_k.to_vec()).expect("row vector");
        let (y, _) = self
            .denoiser
            .forward(&self.arena, &batch, &[x_t.t as u32], &z);
        Ok(y.index_axis(Axis(0), 0).to_owned())
    }

    /// Raw denoiser output for a batch sharing per-element timesteps.
    pub fn denoise_batch(
        &self,
        x: &Array4<f32>,
        t: &[u32],
        z: &Array2<f32>,
    ) -> Result<Array4<f32>> {
        let (bs, c, h, w) = x.dim();
        self.check_image_shape(&[c, h, w])?;
        if t.len() != bs {
            return Err(Error::Argument(format!(
                "got {} timesteps for a batch of {bs}",
                t.len()
            )));
        }
        if z.dim() != (bs, self.enc_cfg.d) {
            return Err(Error::Argument(format!(
                "latent batch shape {:?} does not match [{bs}, {}]",
                z.dim(),
                self.enc_cfg.d
            )));
        }
        if let Some(&bad) = t.iter().find(|&&tb| tb as usize > self.schedule.t_max()) {
            return Err(Error::Argument(format!(
                "timestep {bad} exceeds schedule T {}",
                self.schedule.t_max()
            )));
        }
        Ok(self.denoiser.forward(&self.arena, x, t, z).0)
    }

    /// Noise prediction in eps space regardless of the training
    /// parameterization; x0-mode outputs are converted per image.
    pub fn predict_eps_batch(
        &self,
        x: &Array4<f32>,
        t: &[u32],
        z: &Array2<f32>,
    ) -> Result<Array4<f32>> {
        let raw = self.denoise_batch(x, t, z)?;
        match self.den_cfg.predict {
            Predict::Eps => Ok(raw),
            Predict::X0 => {
                let mut eps = Array4::zeros(raw.raw_dim());
                for b in 0..raw.dim().0 {
                    let noisy = NoisyImage {
                        pixels: x.index_axis(Axis(0), b).to_owned(),
                        t: t[b] as usize,
                    };
                    let e = self
                        .schedule
                        .x0_to_eps(raw.index_axis(Axis(0), b), &noisy)?;
                    eps.index_axis_mut(Axis(0), b).assign(&e);
                }
                Ok(eps)
            }
        }
    }

    /// Stable content hash over configs and all parameters (FNV-1a 64).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.update(self.header_text().as_bytes());
        for (name, w) in self.arena.iter() {
            h.update(name.as_bytes());
            for &v in w.iter() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    fn header_text(&self) -> String {
        let mults: Vec<String> = self
            .den_cfg
            .channel_multipliers
            .iter()
            .map(|m| m.to_string())
            .collect();
        format!(
            "resolution={}\nimg_channels={}\nencoder.hidden_dim={}\nencoder.num_blocks={}\nencoder.k={}\nencoder.d={}\ndenoiser.base_channels={}\ndenoiser.channel_multipliers={}\ndenoiser.time_embed_dim={}\ndenoiser.cond_mode={}\ndenoiser.predict={}\nschedule.kind={}\nschedule.t_max={}\nschedule.s_offset={:?}\n",
            self.resolution,
            self.img_channels,
            self.enc_cfg.hidden_dim,
            self.enc_cfg.num_blocks,
            self.enc_cfg.k,
            self.enc_cfg.d,
            self.den_cfg.base_channels,
            mults.join(","),
            self.den_cfg.time_embed_dim,
            self.den_cfg.cond_mode.as_str(),
            self.den_cfg.predict.as_str(),
            self.schedule.kind().as_str(),
            self.schedule.t_max(),
            self.schedule.s_offset(),
        )
    }

    /// Write a checkpoint atomically (temp file + rename).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = std::io::BufWriter::new(file);
            let header = self.header_text();
            let io_err = |e| Error::io(&tmp, e);
            w.write_all(&CHECKPOINT_MAGIC).map_err(io_err)?;
            w.write_all(&self.version.to_le_bytes()).map_err(io_err)?;
            w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(header.as_bytes()).map_err(io_err)?;
            w.write_all(&(self.arena.len() as u32).to_le_bytes()).map_err(io_err)?;
            for (name, arr) in self.arena.iter() {
                w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
                w.write_all(name.as_bytes()).map_err(io_err)?;
                w.write_all(&(arr.len() as u64).to_le_bytes()).map_err(io_err)?;
                for &v in arr.iter() {
                    w.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
            }
            w.flush().map_err(io_err)?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };

        let magic = cur.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Persistence {
                field: "magic".into(),
                message: "not a model checkpoint file".into(),
            });
        }
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let header_len = cur.u32("header length")? as usize;
        let header = std::str::from_utf8(cur.take(header_len, "header")?).map_err(|_| {
            Error::Persistence { field: "header".into(), message: "header is not UTF-8".into() }
        })?;

        let get = |key: &str| -> Result<&str> {
            header
                .lines()
                .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
                .ok_or_else(|| Error::Persistence {
                    field: key.into(),
                    message: "missing header field".into(),
                })
        };
        fn parse_field<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Persistence {
                field: key.into(),
                message: format!("invalid value '{v}'"),
            })
        }

        let resolution: usize = parse_field("resolution", get("resolution")?)?;
        let img_channels: usize = parse_field("img_channels", get("img_channels")?)?;
        let enc_cfg = EncoderConfig {
            hidden_dim: parse_field("encoder.hidden_dim", get("encoder.hidden_dim")?)?,
            num_blocks: parse_field("encoder.num_blocks", get("encoder.num_blocks")?)?,
            k: parse_field("encoder.k", get("encoder.k")?)?,
            d: parse_field("encoder.d", get("encoder.d")?)?,
        };
        let mults_text = get("denoiser.channel_multipliers")?;
        let channel_multipliers = mults_text
            .split(',')
            .map(|p| parse_field::<usize>("denoiser.channel_multipliers", p.trim()))
            .collect::<Result<Vec<_>>>()?;
        let den_cfg = DenoiserConfig {
            base_channels: parse_field("denoiser.base_channels", get("denoiser.base_channels")?)?,
            channel_multipliers,
            time_embed_dim: parse_field(
                "denoiser.time_embed_dim",
                get("denoiser.time_embed_dim")?,
            )?,
            cond_mode: CondMode::parse(get("denoiser.cond_mode")?).map_err(|e| {
                Error::Persistence { field: "denoiser.cond_mode".into(), message: e.to_string() }
            })?,
            predict: Predict::parse(get("denoiser.predict")?).map_err(|e| {
                Error::Persistence { field: "denoiser.predict".into(), message: e.to_string() }
            })?,
        };
        let kind = ScheduleKind::parse(get("schedule.kind")?).map_err(|e| Error::Persistence {
            field: "schedule.kind".into(),
            message: e.to_string(),
        })?;
        let t_max: usize = parse_field("schedule.t_max", get("schedule.t_max")?)?;
        let s_offset: f64 = parse_field("schedule.s_offset", get("schedule.s_offset")?)?;
        let schedule = NoiseSchedule::new(kind, t_max, s_offset)?;

        let mut model =
            ModelHandle::new(enc_cfg, den_cfg, schedule, resolution, img_channels, 0)?;

        let count = cur.u32("parameter count")? as usize;
        if count != model.arena.len() {
            return Err(Error::Persistence {
                field: "parameter count".into(),
                message: format!(
                    "checkpoint stores {count} tensors but the architecture has {}",
                    model.arena.len()
                ),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let name_len = cur.u32("parameter name length")? as usize;
            let name = std::str::from_utf8(cur.take(name_len, "parameter name")?)
                .map_err(|_| Error::Persistence {
                    field: "parameter name".into(),
                    message: "name is not UTF-8".into(),
                })?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Persistence {
                    field: name,
                    message: "duplicate parameter in checkpoint".into(),
                });
            }
            let numel = cur.u64("parameter length")? as usize;
            let bytes = cur.take(numel * 4, &name)?;
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            model
                .arena
                .set_by_name(&name, &values)
                .map_err(|m| Error::Persistence { field: name.clone(), message: m })?;
        }
        Ok(model)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Persistence {
                field: field.into(),
                message: "checkpoint truncated".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

/// FNV-1a 64-bit.
pub(crate) struct Fnv64(u64);

impl Fnv64 {
    pub(crate) fn new() -> Self {
        Fnv64(0xcbf29ce484222325)
    }

    pub(crate) fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
