//! Two-stage training orchestration: toy contrastive pretraining, prompt
//! fitting against frozen encoders, and image-encoder fine-tuning against
//! the cached per-identity text anchors.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment, AugmentationConfig};
use crate::encoders::{
    similarity_matrix, ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    loss_i2t, loss_i2tce, loss_id, loss_stage1, loss_t2i, loss_t2ice_averaged, loss_triplet,
    BatchLabels, SmoothedTarget, Stage2Weights,
};
use crate::params::{Adam, GradStore, ParamId, ParamStore};
use crate::prompt::{assemble_prompt, init_token_bank, PromptPlan, PromptTemplate, TokenBank};
use crate::sampler::pk_epoch;
use crate::schedule::LrSchedule;
use crate::synth::{ReidData, Split};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// Triplet margin used throughout.
pub const DEFAULT_MARGIN: f64 = 0.3;
/// Base learning rate for prompt fitting.
pub const STAGE1_BASE_LR: f64 = 3.5e-4;

/// Full model: both encoders, the per-identity token bank, and the two
/// classifier heads used during fine-tuning.
pub struct Model {
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub bank: TokenBank,
    pub plan: PromptPlan,
    pub vocab: Vocabulary,
    pub n_ids: usize,
    pub temperature: f64,
    pub head_img_w: ParamId,
    pub head_img_b: ParamId,
    pub head_post_w: ParamId,
    pub head_post_b: ParamId,
}

impl Model {
    /// Initialize every parameter from one seed.
    pub fn init(
        image_cfg: &ImageEncoderConfig,
        text_cfg: &TextEncoderConfig,
        vocab: Vocabulary,
        template: &PromptTemplate,
        n_ids: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Model> {
        if template.l_ctx != text_cfg.l_ctx {
            return Err(Error::Config(format!(
                "prompt context {} does not match text encoder context {}",
                template.l_ctx, text_cfg.l_ctx
            )));
        }
        if n_ids == 0 {
            return Err(Error::Config("model needs at least one identity".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let plan = template.plan(&vocab)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = ImageEncoder::init(&mut store, image_cfg, &mut rng)?;
        let text = TextEncoder::init(&mut store, text_cfg, &mut rng)?;
        let bank = init_token_bank(
            &mut store,
            n_ids,
            template.m,
            text_cfg.width,
            crate::prompt::TOKEN_INIT_STD,
            seed ^ 0xBA4B,
        )?;
        let d_img = image_cfg.backbone_dim();
        let d_post = image_cfg.proj_dim;
        let head_img_w = store.add(
            "head.img.w",
            Tensor::randn(d_img, n_ids, crate::encoders::WEIGHT_INIT_STD, &mut rng),
        );
        let head_img_b = store.add("head.img.b", Tensor::zeros(1, n_ids));
        let head_post_w = store.add(
            "head.post.w",
            Tensor::randn(d_post, n_ids, crate::encoders::WEIGHT_INIT_STD, &mut rng),
        );
        let head_post_b = store.add("head.post.b", Tensor::zeros(1, n_ids));
        Ok(Model {
            store,
            image,
            text,
            bank,
            plan,
            vocab,
            n_ids,
            temperature,
            head_img_w,
            head_img_b,
            head_post_w,
            head_post_b,
        })
    }

    /// Image encoder plus both classifier heads: everything stage 2 trains.
    pub fn image_branch_ids(&self) -> Vec<ParamId> {
        let mut ids = self.image.param_ids().to_vec();
        ids.extend([self.head_img_w, self.head_img_b, self.head_post_w, self.head_post_b]);
        ids
    }

    pub fn text_param_ids(&self) -> Vec<ParamId> {
        self.text.param_ids().to_vec()
    }

    /// Projected text feature for one identity's prompt, on the given graph.
    pub fn text_feature_of(&self, g: &mut Graph, id: usize) -> Result<Var> {
        let word_table = g.param(self.text.word_table);
        let prompt = assemble_prompt(g, id, &self.bank, &self.plan, word_table)?;
        self.text.encode_text(g, prompt.rows, prompt.eos_pos)
    }

    /// Text features for all identities with no gradient tracking: N x D.
    pub fn text_features_all(&self) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let rows: Result<Vec<Var>> = (0..self.n_ids).map(|y| self.text_feature_of(&mut g, y)).collect();
        let all = g.concat_rows(&rows?);
        Ok(g.value(all).clone())
    }
}

/// One optimizer step's record, for loss traces and JSON-lines logs.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

fn check_finite(stage: &str, epoch: usize, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("{stage} diverged at epoch {epoch} step {step}")))
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// SHA-256 digests of a parameter subset, for freeze audits.
pub fn hashes_of(store: &ParamStore, ids: &[ParamId]) -> Vec<[u8; 32]> {
    ids.iter().map(|&id| store.hash_param(id)).collect()
}

fn audit_frozen(
    store: &ParamStore,
    ids: &[ParamId],
    before: &[[u8; 32]],
    what: &str,
) -> Result<()> {
    let after = hashes_of(store, ids);
    for (i, (&id, (a, b))) in ids.iter().zip(before.iter().zip(&after)).enumerate() {
        if a != b {
            let _ = i;
            return Err(Error::FreezeViolation(format!(
                "{what} parameter '{}' changed during a frozen stage",
                store.name(id)
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// stage 0: toy contrastive pretraining on caption pairs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Stage0Config {
    pub epochs: usize,
    /// Identities per contrastive batch; one random image of each.
    pub batch_ids: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

/// Jointly train both encoders with the symmetric contrastive loss on
/// (image, caption) pairs from the train split.
pub fn pretrain_stage0(model: &mut Model, data: &ReidData, cfg: &Stage0Config) -> Result<Vec<StepLog>> {
    let train = data.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Contract("no train images for pretraining".into()));
    }
    let mut pids: Vec<usize> = {
        let mut v: Vec<usize> = train.iter().map(|&i| data.items[i].pid).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let batch_ids = cfg.batch_ids.max(2).min(pids.len());

    let mut targets = model.image.param_ids().to_vec();
    targets.extend(model.text_param_ids());
    let mut adam = Adam::new(&model.store, targets);
    let mut grads = GradStore::for_store(&model.store);
    let mut logs = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        shuffle(&mut pids, &mut rng);
        for (step, chunk) in pids.chunks(batch_ids).enumerate() {
            if chunk.len() < 2 {
                continue; // a 1-pair batch carries no contrastive signal
            }
            let picks: Vec<usize> = chunk
                .iter()
                .map(|&pid| {
                    let of_pid: Vec<usize> =
                        train.iter().copied().filter(|&i| data.items[i].pid == pid).collect();
                    of_pid[rng.gen_range(0..of_pid.len())]
                })
                .collect();

            let loss_value;
            {
                let mut g = Graph::new(&model.store);
                let mut img_rows = Vec::with_capacity(picks.len());
                let mut txt_rows = Vec::with_capacity(picks.len());
                for &i in &picks {
                    let camera = if model.image.config.sie.enabled {
                        Some(data.items[i].camid)
                    } else {
                        None
                    };
                    let bundle = model.image.encode_image(&mut g, &data.items[i].pixels, camera)?;
                    img_rows.push(bundle.post);
                    let caption = String::from(data.caption_of(i)?);
                    let toks = model.vocab.tokenize(&caption, model.text.config.l_ctx)?;
                    txt_rows.push(model.text.encode_token_ids(&mut g, &toks.ids, toks.eos_pos)?);
                }
                let v = g.concat_rows(&img_rows);
                let t = g.concat_rows(&txt_rows);
                let s = similarity_matrix(&mut g, v, t, model.temperature);
                let a = loss_i2t(&mut g, s)?;
                let b = loss_t2i(&mut g, s)?;
                let total = g.add(a, b);
                loss_value = g.value(total).item();
                check_finite("stage0", epoch, step, loss_value)?;
                grads.clear();
                g.backward(total, &mut grads);
            }
            adam.step(&mut model.store, &grads, lr);
            logs.push(StepLog { stage: "stage0".into(), epoch, step, lr, loss: loss_value });
        }
    }
    Ok(logs)
}

// ---------------------------------------------------------------------------
// image feature precompute (start of stage 1)
// ---------------------------------------------------------------------------

/// Projected image features of every train image, plus per-identity means.
#[derive(Debug, Clone)]
pub struct ImageFeatureCache {
    /// One row per train image, in train-split order.
    pub features: Tensor,
    pub pids: Vec<usize>,
    pub camids: Vec<usize>,
    /// Row y is the mean feature of identity y.
    pub means: Tensor,
    pub n_ids: usize,
}

/// One deterministic forward pass per train image with the frozen encoder.
pub fn precompute_image_features(model: &Model, data: &ReidData) -> Result<ImageFeatureCache> {
    let train = data.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Contract("no train images to cache".into()));
    }
    let d = model.image.config.proj_dim;
    let mut features = Tensor::zeros(train.len(), d);
    let mut pids = Vec::with_capacity(train.len());
    let mut camids = Vec::with_capacity(train.len());
    for (r, &i) in train.iter().enumerate() {
        let camera = if model.image.config.sie.enabled { Some(data.items[i].camid) } else { None };
        let bundle = model.image.encode_image_values(&model.store, &data.items[i].pixels, camera)?;
        for c in 0..d {
            *features.at_mut(r, c) = bundle.post.at(0, c);
        }
        pids.push(data.items[i].pid);
        camids.push(data.items[i].camid);
    }
    let n_ids = model.n_ids;
    if pids.iter().any(|&p| p >= n_ids) {
        return Err(Error::Contract("train pid outside the model's identity range".into()));
    }
    let mut means = Tensor::zeros(n_ids, d);
    let mut counts = vec![0.0f64; n_ids];
    for (r, &pid) in pids.iter().enumerate() {
        counts[pid] += 1.0;
        for c in 0..d {
            *means.at_mut(pid, c) += features.at(r, c);
        }
    }
    for pid in 0..n_ids {
        if counts[pid] == 0.0 {
            return Err(Error::Contract(format!("identity {pid} has no train images")));
        }
        for c in 0..d {
            *means.at_mut(pid, c) /= counts[pid];
        }
    }
    Ok(ImageFeatureCache { features, pids, camids, means, n_ids })
}

// ---------------------------------------------------------------------------
// stage 1: prompt fitting with frozen encoders
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

/// Per-identity projected text anchors produced at the end of stage 1.
#[derive(Debug, Clone)]
pub struct TextFeatureCache {
    /// Row y is the anchor of identity y, N x D.
    pub features: Tensor,
    /// Final token bank values, for checkpointing and consistency checks.
    pub bank_snapshot: Tensor,
}

fn finish_stage1(model: &Model) -> Result<TextFeatureCache> {
    Ok(TextFeatureCache {
        features: model.text_features_all()?,
        bank_snapshot: model.store.get(model.bank.param).clone(),
    })
}

/// Fit the token bank on cached instance features with both encoders frozen.
pub fn run_stage1(
    model: &mut Model,
    cache: &ImageFeatureCache,
    cfg: &Stage1Config,
) -> Result<(TextFeatureCache, Vec<StepLog>)> {
    if cache.n_ids != model.n_ids {
        return Err(Error::Contract("image feature cache identity count mismatch".into()));
    }
    let frozen: Vec<ParamId> = {
        let mut v = model.image_branch_ids();
        v.extend(model.text_param_ids());
        v
    };
    let before = hashes_of(&model.store, &frozen);

    let mut adam = Adam::new(&model.store, vec![model.bank.param]);
    let mut grads = GradStore::for_store(&model.store);
    let mut logs = Vec::new();
    let text_ids = model.text_param_ids();

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x517c));
        let mut order: Vec<usize> = (0..cache.pids.len()).collect();
        shuffle(&mut order, &mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let ids: Vec<usize> = chunk.iter().map(|&r| cache.pids[r]).collect();
            let labels = BatchLabels::from_ids(ids.clone());
            let mut batch_feats = Tensor::zeros(chunk.len(), cache.features.cols);
            for (bi, &r) in chunk.iter().enumerate() {
                for c in 0..cache.features.cols {
                    *batch_feats.at_mut(bi, c) = cache.features.at(r, c);
                }
            }

            let loss_value;
            {
                let mut g = Graph::new(&model.store);
                g.freeze(&text_ids);
                let v = g.constant(batch_feats);
                // encode each distinct identity's prompt once, reuse per row
                let mut distinct: Vec<usize> = Vec::new();
                for &y in &ids {
                    if !distinct.contains(&y) {
                        distinct.push(y);
                    }
                }
                let mut feats = Vec::with_capacity(distinct.len());
                for &y in &distinct {
                    feats.push(model.text_feature_of(&mut g, y)?);
                }
                let rows: Vec<Var> = ids
                    .iter()
                    .map(|y| feats[distinct.iter().position(|d| d == y).unwrap()])
                    .collect();
                let t = g.concat_rows(&rows);
                let s = similarity_matrix(&mut g, v, t, model.temperature);
                let total = loss_stage1(&mut g, s, &labels)?;
                loss_value = g.value(total).item();
                check_finite("stage1", epoch, step, loss_value)?;
                grads.clear();
                g.backward(total, &mut grads);
            }
            adam.step(&mut model.store, &grads, lr);
            logs.push(StepLog { stage: "stage1".into(), epoch, step, lr, loss: loss_value });
        }
    }
    audit_frozen(&model.store, &frozen, &before, "encoder")?;
    Ok((finish_stage1(model)?, logs))
}

/// Fast path: one optimizer step per epoch on per-identity mean features.
pub fn run_stage1_averaged(
    model: &mut Model,
    cache: &ImageFeatureCache,
    cfg: &Stage1Config,
) -> Result<(TextFeatureCache, Vec<StepLog>)> {
    if cache.n_ids != model.n_ids {
        return Err(Error::Contract("image feature cache identity count mismatch".into()));
    }
    let frozen: Vec<ParamId> = {
        let mut v = model.image_branch_ids();
        v.extend(model.text_param_ids());
        v
    };
    let before = hashes_of(&model.store, &frozen);

    let n = model.n_ids;
    let mut adam = Adam::new(&model.store, vec![model.bank.param]);
    let mut grads = GradStore::for_store(&model.store);
    let mut logs = Vec::new();
    let text_ids = model.text_param_ids();

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        let loss_value;
        {
            let mut g = Graph::new(&model.store);
            g.freeze(&text_ids);
            let v = g.constant(cache.means.clone());
            let rows: Result<Vec<Var>> = (0..n).map(|y| model.text_feature_of(&mut g, y)).collect();
            let t = g.concat_rows(&rows?);
            let s = similarity_matrix(&mut g, v, t, model.temperature);
            // average the per-identity anchored losses over all identities
            let mut acc: Option<Var> = None;
            for y in 0..n {
                let col = g.slice_cols(s, y, y + 1);
                let term = loss_t2ice_averaged(&mut g, col, y, n)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term),
                    None => term,
                });
            }
            let total = g.scale(acc.expect("n >= 1"), 1.0 / n as f64);
            loss_value = g.value(total).item();
            check_finite("stage1-averaged", epoch, 0, loss_value)?;
            grads.clear();
            g.backward(total, &mut grads);
        }
        adam.step(&mut model.store, &grads, lr);
        logs.push(StepLog { stage: "stage1-averaged".into(), epoch, step: 0, lr, loss: loss_value });
    }
    audit_frozen(&model.store, &frozen, &before, "encoder")?;
    Ok((finish_stage1(model)?, logs))
}

// ---------------------------------------------------------------------------
// stage 2: image encoder fine-tuning
// ---------------------------------------------------------------------------

/// Which text-anchored loss stage 2 applies to the projected image feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextLossKind {
    /// Cross entropy against all N cached anchors. Default.
    I2tce,
    /// Batch-level contrastive substitute, for the loss-term ablation.
    BatchI2t,
    /// Batch-level text-to-image substitute.
    BatchT2i,
    /// Both batch-level directions.
    BatchBoth,
    /// No text loss (baseline fine-tuning).
    None,
}

#[derive(Debug, Clone)]
pub struct Stage2Config {
    pub epochs: usize,
    pub p: usize,
    pub k: usize,
    pub schedule: LrSchedule,
    pub weights: Stage2Weights,
    pub smoothing: f64,
    pub margin: f64,
    /// Also apply the triplet loss to the penultimate-block feature.
    pub pre_layer_triplet: bool,
    pub augmentation: Option<AugmentationConfig>,
    pub text_loss: TextLossKind,
    /// Train the text projection alongside the image branch (off by default;
    /// the text branch stays frozen during fine-tuning).
    pub train_text_projection: bool,
    pub seed: u64,
}

/// Fine-tune the image branch with identity, triplet, and text-anchored
/// losses. The token bank and text encoder stay frozen.
pub fn run_stage2(
    model: &mut Model,
    data: &ReidData,
    text_cache: Option<&TextFeatureCache>,
    cfg: &Stage2Config,
) -> Result<Vec<StepLog>> {
    cfg.weights.validate()?;
    let anchors = match (cfg.text_loss, text_cache) {
        (TextLossKind::None, _) => None,
        (_, None) => {
            return Err(Error::Contract("text loss requested but no text feature cache given".into()))
        }
        (_, Some(c)) => {
            if c.features.rows != model.n_ids {
                return Err(Error::Contract(format!(
                    "text cache has {} anchors for {} identities",
                    c.features.rows, model.n_ids
                )));
            }
            Some(c.features.clone())
        }
    };

    let train = data.split_indices(Split::Train);
    let pids: Vec<usize> = train.iter().map(|&i| data.items[i].pid).collect();
    if pids.iter().any(|&p| p >= model.n_ids) {
        return Err(Error::Contract("train pid outside the model's identity range".into()));
    }
    let hw = data.image_hw;

    let mut targets = model.image_branch_ids();
    if cfg.train_text_projection {
        if let Some(id) = model.store.id_of("text.proj") {
            targets.push(id);
        }
    }
    let frozen: Vec<ParamId> = {
        let mut v = vec![model.bank.param];
        v.extend(model.text_param_ids().into_iter().filter(|id| !targets.contains(id)));
        v
    };
    let before = hashes_of(&model.store, &frozen);
    let cache_hash_before = text_cache.map(|c| {
        let mut probe = ParamStore::new();
        let id = probe.add("cache", c.features.clone());
        (probe.hash_param(id), probe)
    });

    let smoothed: Result<Vec<SmoothedTarget>> =
        (0..model.n_ids).map(|y| SmoothedTarget::new(model.n_ids, y, cfg.smoothing)).collect();
    let smoothed = smoothed?;

    let mut adam = Adam::new(&model.store, targets);
    let mut grads = GradStore::for_store(&model.store);
    let mut logs = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        let plan = pk_epoch(&pids, cfg.p, cfg.k, cfg.seed, epoch as u64)?;
        for (step, batch) in plan.iter().enumerate() {
            let mut aug_rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ 0xA06 ^ ((epoch * 10_000 + step) as u64).wrapping_mul(0x2545_F491),
            );
            let batch_ids: Vec<usize> = batch.iter().map(|&r| pids[r]).collect();
            let batch_targets: Vec<SmoothedTarget> =
                batch_ids.iter().map(|&y| smoothed[y].clone()).collect();

            let loss_value;
            {
                let mut g = Graph::new(&model.store);
                let mut img_rows = Vec::with_capacity(batch.len());
                let mut post_rows = Vec::with_capacity(batch.len());
                let mut pre_rows = Vec::with_capacity(batch.len());
                for &r in batch {
                    let im = &data.items[train[r]];
                    let pixels = match &cfg.augmentation {
                        Some(a) => augment(&im.pixels, hw, a, &mut aug_rng)?,
                        None => im.pixels.clone(),
                    };
                    let camera =
                        if model.image.config.sie.enabled { Some(im.camid) } else { None };
                    let bundle = model.image.encode_image(&mut g, &pixels, camera)?;
                    img_rows.push(bundle.img);
                    post_rows.push(bundle.post);
                    pre_rows.push(bundle.pre);
                }
                let img = g.concat_rows(&img_rows);
                let post = g.concat_rows(&post_rows);

                // identity loss on both heads
                let wi = g.param(model.head_img_w);
                let bi = g.param(model.head_img_b);
                let scores_img = g.matmul(img, wi);
                let scores_img = g.add_row_broadcast(scores_img, bi);
                let wp = g.param(model.head_post_w);
                let bp = g.param(model.head_post_b);
                let scores_post = g.matmul(post, wp);
                let scores_post = g.add_row_broadcast(scores_post, bp);
                let id_a = loss_id(&mut g, scores_img, &batch_targets)?;
                let id_b = loss_id(&mut g, scores_post, &batch_targets)?;
                let id_term = g.add(id_a, id_b);

                // triplet loss on both heads, optionally also pre-layer
                let tri_a = loss_triplet(&mut g, img, &batch_ids, cfg.margin)?;
                let tri_b = loss_triplet(&mut g, post, &batch_ids, cfg.margin)?;
                let mut tri_term = g.add(tri_a, tri_b);
                if cfg.pre_layer_triplet {
                    let pre = g.concat_rows(&pre_rows);
                    let tri_c = loss_triplet(&mut g, pre, &batch_ids, cfg.margin)?;
                    tri_term = g.add(tri_term, tri_c);
                }

                // text-anchored loss on the projected feature
                let text_term = match (cfg.text_loss, &anchors) {
                    (TextLossKind::None, _) => g.constant(Tensor::scalar(0.0)),
                    (TextLossKind::I2tce, Some(a)) => {
                        let t = g.constant(a.clone());
                        let s = similarity_matrix(&mut g, post, t, model.temperature);
                        loss_i2tce(&mut g, s, &batch_targets, model.n_ids)?
                    }
                    (kind, Some(a)) => {
                        // square batch matrix: column j holds sample j's anchor
                        let mut rows = Tensor::zeros(batch_ids.len(), a.cols);
                        for (bi2, &y) in batch_ids.iter().enumerate() {
                            for c in 0..a.cols {
                                *rows.at_mut(bi2, c) = a.at(y, c);
                            }
                        }
                        let t = g.constant(rows);
                        let s = similarity_matrix(&mut g, post, t, model.temperature);
                        match kind {
                            TextLossKind::BatchI2t => loss_i2t(&mut g, s)?,
                            TextLossKind::BatchT2i => loss_t2i(&mut g, s)?,
                            TextLossKind::BatchBoth => {
                                let a1 = loss_i2t(&mut g, s)?;
                                let b1 = loss_t2i(&mut g, s)?;
                                g.add(a1, b1)
                            }
                            _ => unreachable!("handled above"),
                        }
                    }
                    _ => unreachable!("cache presence checked above"),
                };

                let total =
                    crate::losses::loss_stage2(&mut g, &cfg.weights, id_term, tri_term, text_term)?;
                loss_value = g.value(total).item();
                check_finite("stage2", epoch, step, loss_value)?;
                grads.clear();
                g.backward(total, &mut grads);
            }
            adam.step(&mut model.store, &grads, lr);
            logs.push(StepLog { stage: "stage2".into(), epoch, step, lr, loss: loss_value });
        }
    }
    audit_frozen(&model.store, &frozen, &before, "text branch")?;
    if let (Some((h, probe)), Some(c)) = (cache_hash_before, text_cache) {
        let mut probe2 = ParamStore::new();
        let id2 = probe2.add("cache", c.features.clone());
        if probe2.hash_param(id2) != h {
            return Err(Error::FreezeViolation("text feature cache changed during stage 2".into()));
        }
        let _ = probe;
    }
    Ok(logs)
}

/// The paper's baseline: fine-tuning with no prompts and no text loss.
pub fn run_baseline(model: &mut Model, data: &ReidData, cfg: &Stage2Config) -> Result<Vec<StepLog>> {
    let mut cfg = cfg.clone();
    cfg.text_loss = TextLossKind::None;
    cfg.weights.i2tce = 0.0;
    run_stage2(model, data, None, &cfg)
}

/// One-stage variant: the image branch and the token bank optimize jointly;
/// text anchors are recomputed live every step.
pub fn run_one_stage(model: &mut Model, data: &ReidData, cfg: &Stage2Config) -> Result<Vec<StepLog>> {
    cfg.weights.validate()?;
    let train = data.split_indices(Split::Train);
    let pids: Vec<usize> = train.iter().map(|&i| data.items[i].pid).collect();
    if pids.iter().any(|&p| p >= model.n_ids) {
        return Err(Error::Contract("train pid outside the model's identity range".into()));
    }
    let hw = data.image_hw;

    let mut targets = model.image_branch_ids();
    targets.push(model.bank.param);
    let text_ids = model.text_param_ids();
    let before = hashes_of(&model.store, &text_ids);

    let smoothed: Result<Vec<SmoothedTarget>> =
        (0..model.n_ids).map(|y| SmoothedTarget::new(model.n_ids, y, cfg.smoothing)).collect();
    let smoothed = smoothed?;

    let mut adam = Adam::new(&model.store, targets);
    let mut grads = GradStore::for_store(&model.store);
    let mut logs = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        let plan = pk_epoch(&pids, cfg.p, cfg.k, cfg.seed, epoch as u64)?;
        for (step, batch) in plan.iter().enumerate() {
            let mut aug_rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ 0x1057 ^ ((epoch * 10_000 + step) as u64).wrapping_mul(0x2545_F491),
            );
            let batch_ids: Vec<usize> = batch.iter().map(|&r| pids[r]).collect();
            let labels = BatchLabels::from_ids(batch_ids.clone());
            let batch_targets: Vec<SmoothedTarget> =
                batch_ids.iter().map(|&y| smoothed[y].clone()).collect();

            let loss_value;
            {
                let mut g = Graph::new(&model.store);
                g.freeze(&text_ids);
                let mut img_rows = Vec::with_capacity(batch.len());
                let mut post_rows = Vec::with_capacity(batch.len());
                for &r in batch {
                    let im = &data.items[train[r]];
                    let pixels = match &cfg.augmentation {
                        Some(a) => augment(&im.pixels, hw, a, &mut aug_rng)?,
                        None => im.pixels.clone(),
                    };
                    let camera =
                        if model.image.config.sie.enabled { Some(im.camid) } else { None };
                    let bundle = model.image.encode_image(&mut g, &pixels, camera)?;
                    img_rows.push(bundle.img);
                    post_rows.push(bundle.post);
                }
                let img = g.concat_rows(&img_rows);
                let post = g.concat_rows(&post_rows);

                // live text anchors for every identity
                let anchor_rows: Result<Vec<Var>> =
                    (0..model.n_ids).map(|y| model.text_feature_of(&mut g, y)).collect();
                let anchors = g.concat_rows(&anchor_rows?);

                // prompt-fitting term on the per-sample square similarity
                let sample_rows: Vec<Var> =
                    batch_ids.iter().map(|&y| g.slice_rows(anchors, y, y + 1)).collect();
                let t_batch = g.concat_rows(&sample_rows);
                let s_batch = similarity_matrix(&mut g, post, t_batch, model.temperature);
                let prompt_term = loss_stage1(&mut g, s_batch, &labels)?;

                // fine-tuning terms
                let wi = g.param(model.head_img_w);
                let bi = g.param(model.head_img_b);
                let scores_img = g.matmul(img, wi);
                let scores_img = g.add_row_broadcast(scores_img, bi);
                let wp = g.param(model.head_post_w);
                let bp = g.param(model.head_post_b);
                let scores_post = g.matmul(post, wp);
                let scores_post = g.add_row_broadcast(scores_post, bp);
                let id_a = loss_id(&mut g, scores_img, &batch_targets)?;
                let id_b = loss_id(&mut g, scores_post, &batch_targets)?;
                let id_term = g.add(id_a, id_b);
                let tri_a = loss_triplet(&mut g, img, &batch_ids, cfg.margin)?;
                let tri_b = loss_triplet(&mut g, post, &batch_ids, cfg.margin)?;
                let tri_term = g.add(tri_a, tri_b);
                let s_all = similarity_matrix(&mut g, post, anchors, model.temperature);
                let text_term = loss_i2tce(&mut g, s_all, &batch_targets, model.n_ids)?;

                let stage2_term =
                    crate::losses::loss_stage2(&mut g, &cfg.weights, id_term, tri_term, text_term)?;
                let total = g.add(prompt_term, stage2_term);
                loss_value = g.value(total).item();
                check_finite("one-stage", epoch, step, loss_value)?;
                grads.clear();
                g.backward(total, &mut grads);
            }
            adam.step(&mut model.store, &grads, lr);
            logs.push(StepLog { stage: "one-stage".into(), epoch, step, lr, loss: loss_value });
        }
    }
    audit_frozen(&model.store, &text_ids, &before, "text encoder")?;
    Ok(logs)
}
