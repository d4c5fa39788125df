//! Miniature dual encoders: a ViT-style image encoder with [CLS] token and
//! configurable patch stride (stride < patch gives overlapping patches), a
//! CNN-style image encoder with residual stages and global attention
//! pooling, a causal transformer text encoder read at the [EOS] token, the
//! projections into the joint space, and the per-camera side-information
//! embedding added to the [CLS] token.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Im2colSpec, Var};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const WEIGHT_INIT_STD: f64 = 0.02;
/// Similarity temperature: inverse of the usual contrastive temperature 0.07.
pub const DEFAULT_TEMPERATURE: f64 = 1.0 / 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageVariant {
    Vit,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SieMode {
    ClsOnly,
    AllTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SieConfig {
    pub enabled: bool,
    pub num_cameras: usize,
    pub lambda: f64,
    pub apply_to: SieMode,
}

impl SieConfig {
    pub fn disabled() -> Self {
        SieConfig { enabled: false, num_cameras: 0, lambda: 0.0, apply_to: SieMode::ClsOnly }
    }

    pub fn cls(num_cameras: usize, lambda: f64) -> Self {
        SieConfig { enabled: true, num_cameras, lambda, apply_to: SieMode::ClsOnly }
    }

    pub fn all_tokens(num_cameras: usize, lambda: f64) -> Self {
        SieConfig { enabled: true, num_cameras, lambda, apply_to: SieMode::AllTokens }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderConfig {
    pub variant: ImageVariant,
    pub image_hw: (usize, usize),
    /// ViT: patch side P and token-embedding stride S (S <= P overlaps).
    pub patch: usize,
    pub stride: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// CNN: per-stage output channels; stage strides are [1, 2, 2, 1]
    /// (the last stage keeps stride 1 for a larger final map).
    pub channels: Vec<usize>,
    pub proj_dim: usize,
    pub sie: SieConfig,
}

impl ImageEncoderConfig {
    pub fn vit_toy() -> Self {
        ImageEncoderConfig {
            variant: ImageVariant::Vit,
            image_hw: (32, 32),
            patch: 8,
            stride: 8,
            depth: 2,
            width: 64,
            heads: 4,
            channels: Vec::new(),
            proj_dim: 32,
            sie: SieConfig::disabled(),
        }
    }

    pub fn cnn_toy() -> Self {
        ImageEncoderConfig {
            variant: ImageVariant::Cnn,
            image_hw: (32, 32),
            patch: 0,
            stride: 0,
            depth: 0,
            width: 0,
            heads: 0,
            channels: alloc::vec![16, 32, 48, 64],
            proj_dim: 32,
            sie: SieConfig::disabled(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_hw;
        match self.variant {
            ImageVariant::Vit => {
                if self.patch == 0 || self.stride == 0 || self.stride > self.patch {
                    return Err(Error::Config("need 0 < stride <= patch".into()));
                }
                if !(h - self.patch).is_multiple_of(self.stride) || !(w - self.patch).is_multiple_of(self.stride) {
                    return Err(Error::Config(format!(
                        "image {h}x{w} not tileable with patch {} stride {}",
                        self.patch, self.stride
                    )));
                }
                if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
                    return Err(Error::Config("heads must divide width".into()));
                }
                if self.depth == 0 {
                    return Err(Error::Config("vit depth must be positive".into()));
                }
            }
            ImageVariant::Cnn => {
                if self.channels.len() != 4 {
                    return Err(Error::Config("cnn needs a 4-stage channel plan".into()));
                }
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Config("cnn image dims must be divisible by 4".into()));
                }
            }
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("proj_dim must be positive".into()));
        }
        Ok(())
    }

    /// Patch-token count for the ViT path: ((H-P)/S + 1) * ((W-P)/S + 1).
    pub fn num_patch_tokens(&self) -> usize {
        let (h, w) = self.image_hw;
        ((h - self.patch) / self.stride + 1) * ((w - self.patch) / self.stride + 1)
    }

    /// Backbone feature width (the `img_feature` dimension).
    pub fn backbone_dim(&self) -> usize {
        match self.variant {
            ImageVariant::Vit => self.width,
            ImageVariant::Cnn => self.channels[3],
        }
    }

    /// The `pre_img_feature` dimension: penultimate-block CLS for ViT,
    /// stage-3 pooled map for the CNN.
    pub fn pre_dim(&self) -> usize {
        match self.variant {
            ImageVariant::Vit => self.width,
            ImageVariant::Cnn => self.channels[2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderConfig {
    pub l_ctx: usize,
    pub vocab_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub proj_dim: usize,
}

impl TextEncoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        TextEncoderConfig { l_ctx: 16, vocab_size, width: 64, depth: 2, heads: 4, proj_dim: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_ctx < 3 || self.vocab_size < 3 {
            return Err(Error::Config("text config too small".into()));
        }
        if self.depth > 0 && (self.heads == 0 || !self.width.is_multiple_of(self.heads)) {
            return Err(Error::Config("heads must divide width".into()));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("proj_dim must be positive".into()));
        }
        Ok(())
    }
}

/// The three per-image features produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub pre: Tensor,
    pub img: Tensor,
    pub post: Tensor,
}

/// Same features while still on the tape.
pub struct FeatureVars {
    pub pre: Var,
    pub img: Var,
    pub post: Var,
}

/// One transformer block's parameter ids.
#[derive(Debug, Clone)]
struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> BlockParams {
    let hidden = 4 * width;
    let mut w = |name: &str, r: usize, c: usize| {
        store.add(format!("{prefix}.{name}"), Tensor::randn(r, c, WEIGHT_INIT_STD, rng))
    };
    let wq = w("attn.wq", width, width);
    let wk = w("attn.wk", width, width);
    let wv = w("attn.wv", width, width);
    let wo = w("attn.wo", width, width);
    let w1 = w("mlp.w1", width, hidden);
    let w2 = w("mlp.w2", hidden, width);
    let ones = Tensor::from_vec(1, width, alloc::vec![1.0; width]);
    let ln1_g = store.add(format!("{prefix}.ln1.gamma"), ones.clone());
    let ln1_b = store.add(format!("{prefix}.ln1.beta"), Tensor::zeros(1, width));
    let ln2_g = store.add(format!("{prefix}.ln2.gamma"), ones);
    let ln2_b = store.add(format!("{prefix}.ln2.beta"), Tensor::zeros(1, width));
    let bq = store.add(format!("{prefix}.attn.bq"), Tensor::zeros(1, width));
    let bk = store.add(format!("{prefix}.attn.bk"), Tensor::zeros(1, width));
    let bv = store.add(format!("{prefix}.attn.bv"), Tensor::zeros(1, width));
    let bo = store.add(format!("{prefix}.attn.bo"), Tensor::zeros(1, width));
    let b1 = store.add(format!("{prefix}.mlp.b1"), Tensor::zeros(1, hidden));
    let b2 = store.add(format!("{prefix}.mlp.b2"), Tensor::zeros(1, width));
    BlockParams {
        ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2,
    }
}

fn linear(g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Var {
    let wv = g.param(w);
    let bv = g.param(b);
    let mm = g.matmul(x, wv);
    g.add_row_broadcast(mm, bv)
}

/// Pre-LN multi-head self-attention + MLP block. `mask` is an additive
/// score matrix (e.g. causal -inf upper triangle) applied per head.
fn block_forward(
    g: &mut Graph,
    x: Var,
    p: &BlockParams,
    heads: usize,
    mask: Option<&Tensor>,
) -> Var {
    let width = g.value(x).cols;
    let dh = width / heads;
    let ln1g = g.param(p.ln1_g);
    let ln1b = g.param(p.ln1_b);
    let h = g.layer_norm(x, ln1g, ln1b);
    let q = linear(g, h, p.wq, p.bq);
    let k = linear(g, h, p.wk, p.bk);
    let v = linear(g, h, p.wv, p.bv);
    let mut head_outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = g.slice_cols(q, i * dh, (i + 1) * dh);
        let kh = g.slice_cols(k, i * dh, (i + 1) * dh);
        let vh = g.slice_cols(v, i * dh, (i + 1) * dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, 1.0 / math::sqrt(dh as f64));
        let scores = match mask {
            Some(m) => {
                let mc = g.constant(m.clone());
                g.add(scores, mc)
            }
            None => scores,
        };
        let attn = g.softmax_rows(scores);
        head_outs.push(g.matmul(attn, vh));
    }
    let merged = g.concat_cols(&head_outs);
    let o = linear(g, merged, p.wo, p.bo);
    let x = g.add(x, o);
    let ln2g = g.param(p.ln2_g);
    let ln2b = g.param(p.ln2_b);
    let h2 = g.layer_norm(x, ln2g, ln2b);
    let m1 = linear(g, h2, p.w1, p.b1);
    let act = g.quick_gelu(m1);
    let m2 = linear(g, act, p.w2, p.b2);
    g.add(x, m2)
}

fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    for r in 0..n {
        for c in r + 1..n {
            *m.at_mut(r, c) = -1e30;
        }
    }
    m
}

// ---------------------------------------------------------------------------
// ViT image encoder
// ---------------------------------------------------------------------------

struct VitParams {
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    sie_cam: Option<ParamId>,
    blocks: Vec<BlockParams>,
    ln_final_g: ParamId,
    ln_final_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

struct CnnParams {
    stem_w: ParamId,
    stem_b: ParamId,
    // per stage: conv1, conv2, optional 1x1 skip projection
    stages: Vec<(ParamId, ParamId, ParamId, ParamId, Option<(ParamId, ParamId)>)>,
    pool_wq: ParamId,
    pool_wk: ParamId,
    pool_wv: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

enum ImageParams {
    Vit(VitParams),
    Cnn(CnnParams),
}

pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    params: ImageParams,
    all_ids: Vec<ParamId>,
}

impl ImageEncoder {
    /// Allocate parameters under the `image.` prefix. Positional
    /// embeddings are sized for the configured (patch, stride) pair and
    /// re-initialized rather than interpolated when the stride changes.
    pub fn init(store: &mut ParamStore, config: &ImageEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let before = store.len();
        let params = match config.variant {
            ImageVariant::Vit => {
                let width = config.width;
                let in_dim = config.patch * config.patch * 3;
                let t_tok = config.num_patch_tokens();
                let patch_w =
                    store.add("image.patch.w", Tensor::randn(in_dim, width, WEIGHT_INIT_STD, rng));
                let patch_b = store.add("image.patch.b", Tensor::zeros(1, width));
                let cls = store.add("image.cls", Tensor::randn(1, width, WEIGHT_INIT_STD, rng));
                let pos =
                    store.add("image.pos", Tensor::randn(t_tok + 1, width, WEIGHT_INIT_STD, rng));
                let sie_cam = if config.sie.enabled {
                    Some(store.add(
                        "image.sie_cam",
                        Tensor::randn(config.sie.num_cameras, width, WEIGHT_INIT_STD, rng),
                    ))
                } else {
                    None
                };
                let blocks = (0..config.depth)
                    .map(|b| init_block(store, &format!("image.block{b}"), width, rng))
                    .collect();
                let ones = Tensor::from_vec(1, width, alloc::vec![1.0; width]);
                let ln_final_g = store.add("image.ln_final.gamma", ones);
                let ln_final_b = store.add("image.ln_final.beta", Tensor::zeros(1, width));
                let proj_w =
                    store.add("image.proj.w", Tensor::randn(width, config.proj_dim, WEIGHT_INIT_STD, rng));
                let proj_b = store.add("image.proj.b", Tensor::zeros(1, config.proj_dim));
                ImageParams::Vit(VitParams {
                    patch_w, patch_b, cls, pos, sie_cam, blocks, ln_final_g, ln_final_b, proj_w, proj_b,
                })
            }
            ImageVariant::Cnn => {
                let ch = &config.channels;
                let stem_w =
                    store.add("image.stem.w", Tensor::randn(9 * 3, ch[0], WEIGHT_INIT_STD, rng));
                let stem_b = store.add("image.stem.b", Tensor::zeros(1, ch[0]));
                let mut stages = Vec::new();
                let mut in_ch = ch[0];
                let strides = [1usize, 2, 2, 1];
                for (s, (&out_ch, &stride)) in ch.iter().zip(strides.iter()).enumerate() {
                    let w1 = store.add(
                        format!("image.stage{s}.conv1.w"),
                        Tensor::randn(9 * in_ch, out_ch, WEIGHT_INIT_STD, rng),
                    );
                    let b1 = store.add(format!("image.stage{s}.conv1.b"), Tensor::zeros(1, out_ch));
                    let w2 = store.add(
                        format!("image.stage{s}.conv2.w"),
                        Tensor::randn(9 * out_ch, out_ch, WEIGHT_INIT_STD, rng),
                    );
                    let b2 = store.add(format!("image.stage{s}.conv2.b"), Tensor::zeros(1, out_ch));
                    let skip = if in_ch != out_ch || stride != 1 {
                        let ws = store.add(
                            format!("image.stage{s}.skip.w"),
                            Tensor::randn(in_ch, out_ch, WEIGHT_INIT_STD, rng),
                        );
                        let bs = store.add(format!("image.stage{s}.skip.b"), Tensor::zeros(1, out_ch));
                        Some((ws, bs))
                    } else {
                        None
                    };
                    stages.push((w1, b1, w2, b2, skip));
                    in_ch = out_ch;
                }
                let d = ch[3];
                let pool_wq =
                    store.add("image.pool.wq", Tensor::randn(d, d, WEIGHT_INIT_STD, rng));
                let pool_wk =
                    store.add("image.pool.wk", Tensor::randn(d, d, WEIGHT_INIT_STD, rng));
                let pool_wv =
                    store.add("image.pool.wv", Tensor::randn(d, d, WEIGHT_INIT_STD, rng));
                let proj_w =
                    store.add("image.proj.w", Tensor::randn(d, config.proj_dim, WEIGHT_INIT_STD, rng));
                let proj_b = store.add("image.proj.b", Tensor::zeros(1, config.proj_dim));
                ImageParams::Cnn(CnnParams {
                    stem_w, stem_b, stages, pool_wq, pool_wk, pool_wv, proj_w, proj_b,
                })
            }
        };
        let all_ids = (before..store.len()).map(ParamId).collect();
        Ok(ImageEncoder { config: config.clone(), params, all_ids })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.all_ids
    }

    /// Forward pass. `image` is an (H·W) × 3 pixel matrix in [0, 1].
    /// `camera` must be given iff SIE is enabled.
    pub fn encode_image(
        &self,
        g: &mut Graph,
        image: &Tensor,
        camera: Option<usize>,
    ) -> Result<FeatureVars> {
        let (h, w) = self.config.image_hw;
        if image.rows != h * w || image.cols != 3 {
            return Err(Error::Contract(format!(
                "image shape {}x{} does not match config {h}x{w}x3",
                image.rows, image.cols
            )));
        }
        match (self.config.sie.enabled, camera) {
            (true, None) => {
                return Err(Error::Contract("SIE enabled but no camera id given".into()))
            }
            (false, Some(_)) => {
                return Err(Error::Contract("camera id given but SIE disabled".into()))
            }
            (true, Some(c)) if c >= self.config.sie.num_cameras => {
                return Err(Error::CameraRange {
                    camera: c,
                    n_cameras: self.config.sie.num_cameras,
                })
            }
            _ => {}
        }
        match &self.params {
            ImageParams::Vit(p) => self.encode_vit(g, p, image, camera),
            ImageParams::Cnn(p) => self.encode_cnn(g, p, image, camera),
        }
    }

    fn encode_vit(
        &self,
        g: &mut Graph,
        p: &VitParams,
        image: &Tensor,
        camera: Option<usize>,
    ) -> Result<FeatureVars> {
        let cfg = &self.config;
        let (h, w) = cfg.image_hw;
        let img = g.constant(image.clone());
        let spec = Im2colSpec {
            h,
            w,
            channels: 3,
            kernel: cfg.patch,
            stride: cfg.stride,
            pad: 0,
        };
        let cols = g.im2col(img, spec);
        let patches = linear(g, cols, p.patch_w, p.patch_b);
        let cls = g.param(p.cls);
        let mut x = g.concat_rows(&[cls, patches]);
        let pos = g.param(p.pos);
        x = g.add(x, pos);
        if let (Some(cam_table), Some(c)) = (p.sie_cam, camera) {
            x = add_sie(g, x, cam_table, c, &cfg.sie)?;
        }
        let mut pre = None;
        for (b, blk) in p.blocks.iter().enumerate() {
            x = block_forward(g, x, blk, cfg.heads, None);
            if !g.value(x).all_finite() {
                return Err(Error::Numerical(format!("non-finite activation in image block {b}")));
            }
            if b + 2 == cfg.depth {
                // CLS after the penultimate block
                pre = Some(g.slice_rows(x, 0, 1));
            }
        }
        let pre = pre.unwrap_or_else(|| g.slice_rows(x, 0, 1));
        let cls_final = g.slice_rows(x, 0, 1);
        let lng = g.param(p.ln_final_g);
        let lnb = g.param(p.ln_final_b);
        let img_feat = g.layer_norm(cls_final, lng, lnb);
        let post = linear(g, img_feat, p.proj_w, p.proj_b);
        Ok(FeatureVars { pre, img: img_feat, post })
    }

    fn encode_cnn(
        &self,
        g: &mut Graph,
        p: &CnnParams,
        image: &Tensor,
        _camera: Option<usize>,
    ) -> Result<FeatureVars> {
        let cfg = &self.config;
        let (mut h, mut w) = cfg.image_hw;
        let img = g.constant(image.clone());
        let stem_spec = Im2colSpec { h, w, channels: 3, kernel: 3, stride: 1, pad: 1 };
        let cols = g.im2col(img, stem_spec);
        let stem = linear(g, cols, p.stem_w, p.stem_b);
        let mut x = g.relu(stem);
        let mut in_ch = cfg.channels[0];
        let strides = [1usize, 2, 2, 1];
        let mut pre = None;
        for (s, (w1, b1, w2, b2, skip)) in p.stages.iter().enumerate() {
            let stride = strides[s];
            let out_ch = cfg.channels[s];
            let spec1 = Im2colSpec { h, w, channels: in_ch, kernel: 3, stride, pad: 1 };
            let (oh, ow) = (spec1.out_h(), spec1.out_w());
            let c1 = g.im2col(x, spec1);
            let c1 = linear(g, c1, *w1, *b1);
            let a1 = g.relu(c1);
            let spec2 = Im2colSpec { h: oh, w: ow, channels: out_ch, kernel: 3, stride: 1, pad: 1 };
            let c2 = g.im2col(a1, spec2);
            let c2 = linear(g, c2, *w2, *b2);
            let shortcut = match skip {
                Some((ws, bs)) => {
                    // 1x1 conv with the stage stride
                    let spec_s =
                        Im2colSpec { h, w, channels: in_ch, kernel: 1, stride, pad: 0 };
                    let cs = g.im2col(x, spec_s);
                    linear(g, cs, *ws, *bs)
                }
                None => x,
            };
            let sum = g.add(c2, shortcut);
            x = g.relu(sum);
            if !g.value(x).all_finite() {
                return Err(Error::Numerical(format!("non-finite activation in cnn stage {s}")));
            }
            if s == 2 {
                pre = Some(g.mean_rows(x));
            }
            h = oh;
            w = ow;
            in_ch = out_ch;
        }
        let pre = pre.expect("stage 3 pre feature");
        let img_feat = g.mean_rows(x);
        // global attention pooling: mean-token query over spatial tokens
        let d = cfg.channels[3];
        let wq = g.param(p.pool_wq);
        let wk = g.param(p.pool_wk);
        let wv = g.param(p.pool_wv);
        let q = g.matmul(img_feat, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scores = g.scale(scores, 1.0 / math::sqrt(d as f64));
        let attn = g.softmax_rows(scores);
        let pooled = g.matmul(attn, v);
        let post = linear(g, pooled, p.proj_w, p.proj_b);
        Ok(FeatureVars { pre, img: img_feat, post })
    }

    /// Run a forward pass and return plain tensors.
    pub fn encode_image_values(
        &self,
        store: &ParamStore,
        image: &Tensor,
        camera: Option<usize>,
    ) -> Result<FeatureBundle> {
        let mut g = Graph::new(store);
        let f = self.encode_image(&mut g, image, camera)?;
        Ok(FeatureBundle {
            pre: g.value(f.pre).clone(),
            img: g.value(f.img).clone(),
            post: g.value(f.post).clone(),
        })
    }
}

/// Add the camera embedding: `cls_only` touches row 0, `all_tokens` every
/// row (kept for the SIE-all ablation). Skipped entirely at lambda = 0 so
/// the disabled forward is reproduced bitwise.
pub fn add_sie(
    g: &mut Graph,
    tokens: Var,
    cam_table: ParamId,
    camera: usize,
    sie: &SieConfig,
) -> Result<Var> {
    if camera >= sie.num_cameras {
        return Err(Error::CameraRange { camera, n_cameras: sie.num_cameras });
    }
    if sie.lambda == 0.0 {
        return Ok(tokens);
    }
    let table = g.param(cam_table);
    let row = g.gather_rows(table, &[camera]);
    let scaled = g.scale(row, sie.lambda);
    match sie.apply_to {
        SieMode::ClsOnly => {
            let n = g.value(tokens).rows;
            let cls = g.slice_rows(tokens, 0, 1);
            let cls = g.add(cls, scaled);
            let rest = g.slice_rows(tokens, 1, n);
            Ok(g.concat_rows(&[cls, rest]))
        }
        SieMode::AllTokens => Ok(g.add_row_broadcast(tokens, scaled)),
    }
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub word_table: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    ln_final_g: ParamId,
    ln_final_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    all_ids: Vec<ParamId>,
    mask: Tensor,
}

impl TextEncoder {
    pub fn init(store: &mut ParamStore, config: &TextEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let before = store.len();
        let width = config.width;
        let word_table = store.add(
            "text.word_table",
            Tensor::randn(config.vocab_size, width, WEIGHT_INIT_STD, rng),
        );
        let pos =
            store.add("text.pos", Tensor::randn(config.l_ctx, width, WEIGHT_INIT_STD, rng));
        let blocks = (0..config.depth)
            .map(|b| init_block(store, &format!("text.block{b}"), width, rng))
            .collect();
        let ones = Tensor::from_vec(1, width, alloc::vec![1.0; width]);
        let ln_final_g = store.add("text.ln_final.gamma", ones);
        let ln_final_b = store.add("text.ln_final.beta", Tensor::zeros(1, width));
        let proj_w =
            store.add("text.proj.w", Tensor::randn(width, config.proj_dim, WEIGHT_INIT_STD, rng));
        let proj_b = store.add("text.proj.b", Tensor::zeros(1, config.proj_dim));
        let all_ids = (before..store.len()).map(ParamId).collect();
        Ok(TextEncoder {
            config: config.clone(),
            word_table,
            pos,
            blocks,
            ln_final_g,
            ln_final_b,
            proj_w,
            proj_b,
            all_ids,
            mask: causal_mask(config.l_ctx),
        })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.all_ids
    }

    /// Causal transformer over `prompt` (L_ctx × width embedding rows);
    /// the row at `eos_pos` is layer-normalized and projected to the
    /// joint space.
    pub fn encode_text(&self, g: &mut Graph, prompt: Var, eos_pos: usize) -> Result<Var> {
        let cfg = &self.config;
        let v = g.value(prompt);
        if v.rows != cfg.l_ctx || v.cols != cfg.width {
            return Err(Error::Contract(format!(
                "prompt shape {}x{} does not match L_ctx {} width {}",
                v.rows, v.cols, cfg.l_ctx, cfg.width
            )));
        }
        if eos_pos >= cfg.l_ctx {
            return Err(Error::Contract(format!("eos position {eos_pos} out of range")));
        }
        let pos = g.param(self.pos);
        let mut x = g.add(prompt, pos);
        for (b, blk) in self.blocks.iter().enumerate() {
            x = block_forward(g, x, blk, cfg.heads, Some(&self.mask));
            if !g.value(x).all_finite() {
                return Err(Error::Numerical(format!("non-finite activation in text block {b}")));
            }
        }
        let eos = g.gather_rows(x, &[eos_pos]);
        let lng = g.param(self.ln_final_g);
        let lnb = g.param(self.ln_final_b);
        let normed = g.layer_norm(eos, lng, lnb);
        Ok(linear(g, normed, self.proj_w, self.proj_b))
    }

    /// Embed a tokenized id sequence (no learnable slots) and encode it.
    pub fn encode_token_ids(&self, g: &mut Graph, ids: &[usize], eos_pos: usize) -> Result<Var> {
        if ids.len() != self.config.l_ctx {
            return Err(Error::Contract("token sequence length != L_ctx".into()));
        }
        let table = g.param(self.word_table);
        let rows = g.gather_rows(table, ids);
        self.encode_text(g, rows, eos_pos)
    }
}

// ---------------------------------------------------------------------------
// Similarity
// ---------------------------------------------------------------------------

/// s = tau * (V/|V|) . (T/|T|), on the tape.
pub fn similarity(g: &mut Graph, v: Var, t: Var, tau: f64) -> Var {
    let vn = g.l2_normalize_rows(v);
    let tn = g.l2_normalize_rows(t);
    let prod = g.mul(vn, tn);
    let s = g.sum_all(prod);
    g.scale(s, tau)
}

/// All-pairs similarity: rows of `v` (B×D) against rows of `t` (A×D),
/// giving a B×A score matrix.
pub fn similarity_matrix(g: &mut Graph, v: Var, t: Var, tau: f64) -> Var {
    let vn = g.l2_normalize_rows(v);
    let tn = g.l2_normalize_rows(t);
    let tt = g.transpose(tn);
    let s = g.matmul(vn, tt);
    g.scale(s, tau)
}

/// Plain-tensor similarity with the zero-norm guard.
pub fn similarity_value(v: &Tensor, t: &Tensor, tau: f64) -> Result<f64> {
    if v.len() != t.len() {
        return Err(Error::Contract("similarity dim mismatch".into()));
    }
    let (nv, nt) = (v.l2_norm(), t.l2_norm());
    if nv == 0.0 || nt == 0.0 {
        return Err(Error::Numerical("zero-norm vector in similarity".into()));
    }
    let dot: f64 = v.data.iter().zip(&t.data).map(|(a, b)| a * b).sum();
    Ok(tau * dot / (nv * nt))
}

/// Stable parameter names used across stages; callers hash these for the
/// freeze audits.
pub fn sie_param_name() -> &'static str {
    "image.sie_cam"
}

pub fn all_names(store: &ParamStore, prefix: &str) -> Vec<String> {
    store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, _)| String::from(n))
        .collect()
}
