//! Bridges the flat experiment configuration to the core model, schedule,
//! and stage configuration types, and restores models from checkpoints.

use reid_core::augment::AugmentationConfig;
use reid_core::encoders::{ImageEncoderConfig, ImageVariant, SieConfig, TextEncoderConfig};
use reid_core::eval::{DistanceMetric, FeatureMode};
use reid_core::losses::Stage2Weights;
use reid_core::prompt::PromptTemplate;
use reid_core::schedule::{Decay, LrSchedule};
use reid_core::train::{Model, Stage0Config, Stage1Config, Stage2Config, TextLossKind};
use reid_core::vocab::Vocabulary;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub fn image_config(cfg: &ExperimentConfig) -> Result<ImageEncoderConfig> {
    let variant = match cfg.get("model.variant")? {
        "vit" => ImageVariant::Vit,
        "cnn" => ImageVariant::Cnn,
        other => return Err(CliError::config(format!("model.variant: unknown '{other}'"))),
    };
    let hw = cfg.get_usize("model.image_hw")?;
    let sie = match cfg.get("model.sie")? {
        "none" => SieConfig::disabled(),
        "cls" => SieConfig::cls(cfg.get_usize("model.cameras")?, cfg.get_f64("model.sie_lambda")?),
        "all" => SieConfig::all_tokens(
            cfg.get_usize("model.cameras")?,
            cfg.get_f64("model.sie_lambda")?,
        ),
        other => return Err(CliError::config(format!("model.sie: unknown '{other}'"))),
    };
    let out = ImageEncoderConfig {
        variant,
        image_hw: (hw, hw),
        patch: cfg.get_usize("model.patch")?,
        stride: cfg.get_usize("model.stride")?,
        depth: cfg.get_usize("model.depth")?,
        width: cfg.get_usize("model.width")?,
        heads: cfg.get_usize("model.heads")?,
        channels: cfg.get_usize_list("model.channels")?,
        proj_dim: cfg.get_usize("model.proj_dim")?,
        sie,
    };
    out.validate()?;
    Ok(out)
}

pub fn text_config(cfg: &ExperimentConfig, vocab_size: usize) -> Result<TextEncoderConfig> {
    let out = TextEncoderConfig {
        l_ctx: cfg.get_usize("model.text_l_ctx")?,
        vocab_size,
        width: cfg.get_usize("model.text_width")?,
        depth: cfg.get_usize("model.text_depth")?,
        heads: cfg.get_usize("model.text_heads")?,
        proj_dim: cfg.get_usize("model.text_proj_dim")?,
    };
    out.validate()?;
    Ok(out)
}

pub fn template(cfg: &ExperimentConfig) -> Result<PromptTemplate> {
    let m = cfg.get_usize("model.m")?;
    let l_ctx = cfg.get_usize("model.text_l_ctx")?;
    match cfg.get("model.template")? {
        "person" => Ok(PromptTemplate::person(m, l_ctx)),
        "vehicle" => Ok(PromptTemplate::vehicle(m, l_ctx)),
        other => Err(CliError::config(format!("model.template: unknown '{other}'"))),
    }
}

/// Fresh model initialized from the configuration's seed.
pub fn build_model(cfg: &ExperimentConfig, vocab: Vocabulary, n_ids: usize) -> Result<Model> {
    let image_cfg = image_config(cfg)?;
    let text_cfg = text_config(cfg, vocab.len())?;
    let tmpl = template(cfg)?;
    let model = Model::init(
        &image_cfg,
        &text_cfg,
        vocab,
        &tmpl,
        n_ids,
        cfg.get_f64("model.temperature")?,
        cfg.get_u64("seed")?,
    )?;
    Ok(model)
}

pub fn stage0_config(cfg: &ExperimentConfig) -> Result<Stage0Config> {
    let epochs = cfg.get_usize("train.stage0.epochs")?;
    Ok(Stage0Config {
        epochs,
        batch_ids: cfg.get_usize("train.stage0.batch_ids")?,
        schedule: LrSchedule::cosine(cfg.get_f64("train.stage0.lr")?, epochs.max(1)),
        seed: cfg.get_u64("seed")? ^ 0x5A0,
    })
}

pub fn stage1_config(cfg: &ExperimentConfig) -> Result<Stage1Config> {
    let epochs = cfg.get_usize("train.stage1.epochs")?;
    Ok(Stage1Config {
        epochs,
        batch_size: cfg.get_usize("train.stage1.batch")?,
        schedule: LrSchedule::cosine(cfg.get_f64("train.stage1.lr")?, epochs.max(1)),
        seed: cfg.get_u64("seed")? ^ 0x5A1,
    })
}

fn stage2_schedule(cfg: &ExperimentConfig) -> Result<LrSchedule> {
    let epochs = cfg.get_usize("train.stage2.epochs")?.max(1);
    let base = cfg.get_f64("train.stage2.lr")?;
    let warmup = cfg.get_usize("train.stage2.warmup_epochs")?;
    let start = cfg.get_f64("train.stage2.warmup_start_lr")?;
    let milestones = cfg.get_usize_list("train.stage2.milestones")?;
    let sched = if milestones.is_empty() {
        LrSchedule {
            base_lr: base,
            warmup_epochs: warmup,
            warmup_start_lr: start,
            total_epochs: epochs,
            decay: Decay::Cosine,
        }
    } else {
        LrSchedule::warmup_milestones(
            base,
            warmup,
            start,
            milestones,
            cfg.get_f64("train.stage2.milestone_gamma")?,
            epochs,
        )
    };
    sched.validate()?;
    Ok(sched)
}

pub fn text_loss_kind(cfg: &ExperimentConfig) -> Result<TextLossKind> {
    match cfg.get("train.stage2.text_loss")? {
        "i2tce" => Ok(TextLossKind::I2tce),
        "i2t" => Ok(TextLossKind::BatchI2t),
        "t2i" => Ok(TextLossKind::BatchT2i),
        "both" => Ok(TextLossKind::BatchBoth),
        "none" => Ok(TextLossKind::None),
        other => Err(CliError::config(format!("train.stage2.text_loss: unknown '{other}'"))),
    }
}

/// `fill` is the per-channel dataset mean used by random erasing; only read
/// when augmentation is enabled.
pub fn stage2_config(cfg: &ExperimentConfig, image_hw: usize, fill: [f64; 3]) -> Result<Stage2Config> {
    let augmentation = if cfg.get_bool("train.stage2.augment")? {
        Some(AugmentationConfig::standard(image_hw, fill))
    } else {
        None
    };
    Ok(Stage2Config {
        epochs: cfg.get_usize("train.stage2.epochs")?,
        p: cfg.get_usize("train.stage2.p")?,
        k: cfg.get_usize("train.stage2.k")?,
        schedule: stage2_schedule(cfg)?,
        weights: Stage2Weights {
            id: cfg.get_f64("train.stage2.w_id")?,
            tri: cfg.get_f64("train.stage2.w_tri")?,
            i2tce: cfg.get_f64("train.stage2.w_i2tce")?,
        },
        smoothing: cfg.get_f64("train.stage2.smoothing")?,
        margin: cfg.get_f64("train.stage2.margin")?,
        pre_layer_triplet: cfg.get_bool("train.stage2.pre_layer_triplet")?,
        augmentation,
        text_loss: text_loss_kind(cfg)?,
        train_text_projection: cfg.get_bool("train.stage2.train_text_projection")?,
        seed: cfg.get_u64("seed")? ^ 0x5A2,
    })
}

pub fn feature_mode(cfg: &ExperimentConfig) -> Result<FeatureMode> {
    Ok(FeatureMode::parse(cfg.get("eval.feature_mode")?)?)
}

pub fn metric(cfg: &ExperimentConfig) -> Result<DistanceMetric> {
    Ok(DistanceMetric::parse(cfg.get("eval.metric")?)?)
}

/// Snapshot every model parameter into a named-array checkpoint.
pub fn checkpoint_from_model(
    model: &Model,
    cfg: &ExperimentConfig,
    stage: &str,
    steps: usize,
    extras: Vec<(String, reid_core::tensor::Tensor)>,
) -> Checkpoint {
    let mut arrays: Vec<(String, reid_core::tensor::Tensor)> =
        model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    arrays.extend(extras);
    Checkpoint {
        stage: stage.to_string(),
        seed: cfg.get_u64("seed").unwrap_or(0),
        n_ids: model.n_ids,
        steps,
        config: cfg.to_text(),
        arrays,
    }
}

/// Overwrite the model's parameters with a checkpoint's arrays by name,
/// shape-checked. Names listed in `skip` keep their fresh initialization.
pub fn restore_params(model: &mut Model, ckpt: &Checkpoint, skip: &[&str]) -> Result<()> {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        if skip.contains(&name.as_str()) {
            continue;
        }
        let saved = ckpt.array(&name).ok_or_else(|| {
            CliError::config(format!("checkpoint is missing parameter '{name}'"))
        })?;
        let slot = model.store.get_mut(id);
        if saved.rows != slot.rows || saved.cols != slot.cols {
            return Err(CliError::config(format!(
                "parameter '{name}' has shape {}x{} in the checkpoint but {}x{} in the model",
                saved.rows, saved.cols, slot.rows, slot.cols
            )));
        }
        *slot = saved.clone();
    }
    Ok(())
}

/// Rebuild a model from a checkpoint: re-derive the architecture from the
/// frozen config echo, then overwrite every parameter, shape-checked.
pub fn model_from_checkpoint(
    ckpt: &Checkpoint,
    vocab: Vocabulary,
) -> Result<(Model, ExperimentConfig)> {
    let cfg = ExperimentConfig::from_text(&ckpt.config)?;
    let mut model = build_model(&cfg, vocab, ckpt.n_ids)?;
    restore_params(&mut model, ckpt, &[])?;
    Ok((model, cfg))
}
