//! Subcommand implementations and the clap definitions behind them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use reid_core::augment::channel_means;
use reid_core::eval::MetricsReport;
use reid_core::prompt::TOKEN_BANK_PARAM;
use reid_core::synth::{generate_synthetic, ReidData, Split, SyntheticSpec};
use reid_core::train::{
    precompute_image_features, pretrain_stage0, run_baseline, run_one_stage, run_stage1,
    run_stage1_averaged, run_stage2, Model, StepLog, TextFeatureCache, TextLossKind,
};
use reid_core::vocab::Vocabulary;

use crate::checkpoint::{Checkpoint, TEXT_CACHE_ARRAY};
use crate::config::ExperimentConfig;
use crate::dataset::{fresh_dir, load_dataset, write_dataset, LoadedDataset};
use crate::error::{CliError, Result};
use crate::features::{evaluate_model, extract_split};
use crate::modelcfg;

#[derive(Parser)]
#[command(name = "reid", about = "Two-stage prompt-anchored re-identification trainer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-camera benchmark on disk.
    GenData(GenDataArgs),
    /// Run one training stage and write a checkpoint.
    Train(TrainArgs),
    /// Retrieval metrics (mAP, CMC) for a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Image features (and text anchors, if cached) as CSV.
    DumpEmbeddings(DumpEmbeddingsArgs),
    /// Per-query top-k gallery rankings as JSON lines.
    DumpRankings(DumpRankingsArgs),
    /// Prompt-length sweep: fit prompts and fine-tune for each token count.
    SweepM(SweepMArgs),
    /// Preset comparison runs (training strategies, loss terms, encoder variants).
    Ablate(AblateArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::DumpEmbeddings(a) => dump_embeddings(&a),
        Command::DumpRankings(a) => dump_rankings(&a),
        Command::SweepM(a) => sweep_m(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory; must not exist yet.
    #[arg(long)]
    pub out: PathBuf,
    /// Training identities.
    #[arg(long, default_value_t = 20)]
    pub ids: usize,
    /// Held-out test identities (query/gallery).
    #[arg(long, default_value_t = 20)]
    pub test_ids: usize,
    /// Images per identity, dealt round-robin over cameras.
    #[arg(long, default_value_t = 30)]
    pub per_id: usize,
    #[arg(long, default_value_t = 4)]
    pub cams: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub hw: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Disable all camera nuisance and per-image noise.
    #[arg(long)]
    pub zero_nuisance: bool,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec = SyntheticSpec {
        n_train_ids: a.ids,
        n_test_ids: a.test_ids,
        images_per_id: a.per_id,
        n_cameras: a.cams,
        image_hw: a.hw,
        seed: a.seed,
        ..SyntheticSpec::default_benchmark()
    };
    if a.zero_nuisance {
        spec = spec.zero_nuisance();
    }
    spec.validate()?;
    let out = fresh_dir(&a.out)?;
    let data = generate_synthetic(&spec)?;
    write_dataset(&data, &out)?;
    println!(
        "wrote {} images ({} train + {} test identities, {} cameras) to {}",
        data.images.len(),
        spec.n_train_ids,
        spec.n_test_ids,
        spec.n_cameras,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    /// Joint contrastive pretraining of both encoders on caption pairs.
    Stage0,
    /// Fit per-identity prompt tokens against frozen encoders.
    Stage1,
    /// Prompt fitting against per-identity mean image features.
    Stage1Averaged,
    /// Fine-tune the image encoder with the cached text anchors.
    Stage2,
    /// Fine-tune with identity and triplet losses only, no text.
    Baseline,
    /// Single joint stage: prompts and image encoder trained together.
    OneStage,
}

impl StageArg {
    fn tag(self) -> &'static str {
        match self {
            StageArg::Stage0 => "stage0",
            StageArg::Stage1 => "stage1",
            StageArg::Stage1Averaged => "stage1-averaged",
            StageArg::Stage2 => "stage2",
            StageArg::Baseline => "baseline",
            StageArg::OneStage => "one-stage",
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Dataset directory from gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run output directory; must not exist yet.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint directory of the prerequisite stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config overrides, repeatable: --set train.stage2.epochs=5
    #[arg(long = "set")]
    pub sets: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn require_init<'a>(a: &'a TrainArgs, wanted: &str) -> Result<&'a Path> {
    a.init.as_deref().ok_or_else(|| {
        CliError::missing(format!(
            "--stage {} needs --init pointing at a {wanted} checkpoint",
            a.stage.tag()
        ))
    })
}

fn check_init_stage(ckpt: &Checkpoint, accepted: &[&str], needed_by: &str) -> Result<()> {
    if accepted.contains(&ckpt.stage.as_str()) {
        Ok(())
    } else {
        Err(CliError::missing(format!(
            "{needed_by} needs a checkpoint from {}, but --init holds '{}'",
            accepted.join(" or "),
            ckpt.stage
        )))
    }
}

fn check_image_size(cfg: &ExperimentConfig, meta: &crate::dataset::DatasetMeta) -> Result<()> {
    let hw = cfg.get_usize("model.image_hw")?;
    if hw != meta.image_hw {
        return Err(CliError::config(format!(
            "model.image_hw={hw} but the dataset images are {0}x{0}; set model.image_hw={0}",
            meta.image_hw
        )));
    }
    Ok(())
}

/// Per-channel mean of the train split, used as the erase fill color.
fn train_fill(data: &ReidData) -> [f64; 3] {
    let refs: Vec<&reid_core::tensor::Tensor> =
        data.split_indices(Split::Train).into_iter().map(|i| &data.items[i].pixels).collect();
    channel_means(&refs)
}

fn write_logs(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut out = String::new();
    for l in logs {
        out.push_str(
            &json!({
                "stage": l.stage,
                "epoch": l.epoch,
                "step": l.step,
                "lr": l.lr,
                "loss": l.loss,
            })
            .to_string(),
        );
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_json_atomic(path: &Path, value: &serde_json::Value) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load the model and resolved config for a stage that continues from a
/// checkpoint. CLI overrides may not change the architecture.
fn continue_from(
    init: &Path,
    vocab: Vocabulary,
    a: &TrainArgs,
) -> Result<(Model, ExperimentConfig, Checkpoint)> {
    let ckpt = Checkpoint::load(init)?;
    let (model, base_cfg) = modelcfg::model_from_checkpoint(&ckpt, vocab)?;
    let mut cfg = base_cfg.clone();
    cfg.overlay(a.config.as_deref(), &a.sets)?;
    if let Some(seed) = a.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if cfg.subset_text("model.") != base_cfg.subset_text("model.") {
        return Err(CliError::config(
            "model.* keys cannot be overridden when continuing from a checkpoint",
        ));
    }
    Ok((model, cfg, ckpt))
}

fn train(a: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let out = fresh_dir(&a.out)?;
    let ds = load_dataset(&a.data)?;

    let (model, cfg, logs, extras) = match a.stage {
        StageArg::Stage0 => {
            let mut cfg = ExperimentConfig::load(a.config.as_deref(), &a.sets)?;
            if let Some(seed) = a.seed {
                cfg.set("seed", &seed.to_string())?;
            }
            check_image_size(&cfg, &ds.meta)?;
            let mut model = modelcfg::build_model(&cfg, ds.vocab.clone(), ds.meta.n_train_ids)?;
            let logs = pretrain_stage0(&mut model, &ds.data, &modelcfg::stage0_config(&cfg)?)?;
            (model, cfg, logs, vec![])
        }
        StageArg::Stage1 | StageArg::Stage1Averaged => {
            let init = require_init(a, "stage0")?;
            let (mut model, cfg, ckpt) = continue_from(init, ds.vocab.clone(), a)?;
            check_init_stage(&ckpt, &["stage0"], "prompt fitting")?;
            let cache = precompute_image_features(&model, &ds.data)?;
            let s1 = modelcfg::stage1_config(&cfg)?;
            let (text_cache, logs) = if a.stage == StageArg::Stage1 {
                run_stage1(&mut model, &cache, &s1)?
            } else {
                run_stage1_averaged(&mut model, &cache, &s1)?
            };
            let extras = vec![(TEXT_CACHE_ARRAY.to_string(), text_cache.features)];
            (model, cfg, logs, extras)
        }
        StageArg::Stage2 => {
            let init = require_init(a, "stage1")?;
            let (mut model, cfg, ckpt) = continue_from(init, ds.vocab.clone(), a)?;
            check_init_stage(&ckpt, &["stage1", "stage1-averaged"], "fine-tuning")?;
            let features = ckpt
                .array(TEXT_CACHE_ARRAY)
                .ok_or_else(|| {
                    CliError::missing(format!(
                        "--init checkpoint has no '{TEXT_CACHE_ARRAY}' array; rerun stage1"
                    ))
                })?
                .clone();
            let text_cache = TextFeatureCache {
                features: features.clone(),
                bank_snapshot: model.store.get(model.bank.param).clone(),
            };
            let s2 = modelcfg::stage2_config(&cfg, ds.meta.image_hw, train_fill(&ds.data))?;
            let logs = run_stage2(&mut model, &ds.data, Some(&text_cache), &s2)?;
            let extras = vec![(TEXT_CACHE_ARRAY.to_string(), features)];
            (model, cfg, logs, extras)
        }
        StageArg::Baseline | StageArg::OneStage => {
            let init = require_init(a, "stage0")?;
            let (mut model, cfg, ckpt) = continue_from(init, ds.vocab.clone(), a)?;
            check_init_stage(&ckpt, &["stage0"], a.stage.tag())?;
            let s2 = modelcfg::stage2_config(&cfg, ds.meta.image_hw, train_fill(&ds.data))?;
            let logs = if a.stage == StageArg::Baseline {
                run_baseline(&mut model, &ds.data, &s2)?
            } else {
                run_one_stage(&mut model, &ds.data, &s2)?
            };
            (model, cfg, logs, vec![])
        }
    };

    fs::create_dir_all(&out)?;
    let ckpt = modelcfg::checkpoint_from_model(&model, &cfg, a.stage.tag(), logs.len(), extras);
    ckpt.save(&out.join("checkpoint"))?;
    write_logs(&out.join("logs.jsonl"), &logs)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let manifest = json!({
        "command": "train",
        "stage": a.stage.tag(),
        "data": a.data.display().to_string(),
        "init": a.init.as_ref().map(|p| p.display().to_string()),
        "steps": logs.len(),
        "final_loss": logs.last().map(|l| l.loss),
        "wall_clock_secs": started.elapsed().as_secs_f64(),
        "checkpoint": "checkpoint",
    });
    write_json_atomic(&out.join("manifest.json"), &manifest)?;
    println!(
        "{}: {} steps, final loss {}, checkpoint at {}",
        a.stage.tag(),
        logs.len(),
        logs.last().map(|l| format!("{:.6}", l.loss)).unwrap_or_else(|| "n/a".into()),
        out.join("checkpoint").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Write the full metrics report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Feature assembly: post, pre, img, img+post, img+pre, pre+img+post.
    #[arg(long)]
    pub feature_mode: Option<String>,
    /// Distance: cosine or euclidean.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long = "set")]
    pub sets: Vec<String>,
}

fn report_to_json(r: &MetricsReport) -> serde_json::Value {
    json!({
        "map": r.map,
        "cmc": { "r1": r.cmc[0], "r5": r.cmc[1], "r10": r.cmc[2] },
        "queries_used": r.queries_used,
        "skipped_queries": r.skipped_queries,
        "metric": r.metric,
        "feature_mode": r.feature_mode,
        "per_query_ap": r.per_query_ap,
    })
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (model, mut cfg) = modelcfg::model_from_checkpoint(&ckpt, ds.vocab.clone())?;
    cfg.overlay(None, &a.sets)?;
    if let Some(m) = &a.feature_mode {
        cfg.set("eval.feature_mode", m)?;
    }
    if let Some(m) = &a.metric {
        cfg.set("eval.metric", m)?;
    }
    let mode = modelcfg::feature_mode(&cfg)?;
    let metric = modelcfg::metric(&cfg)?;
    let report = evaluate_model(&model, &ds.data, mode, metric)?;
    println!("features={} metric={}", report.feature_mode, report.metric);
    println!("{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "mAP", "R@1", "R@5", "R@10", "queries", "skipped");
    println!(
        "{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8} {:>8}",
        report.map, report.cmc[0], report.cmc[1], report.cmc[2], report.queries_used, report.skipped_queries
    );
    if let Some(out) = &a.out {
        write_json_atomic(out, &report_to_json(&report))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// dump-embeddings / dump-rankings
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct DumpEmbeddingsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Splits to include, comma separated: train,query,gallery.
    #[arg(long, default_value = "query,gallery")]
    pub splits: String,
    #[arg(long)]
    pub feature_mode: Option<String>,
}

fn parse_splits(s: &str) -> Result<Vec<Split>> {
    s.split(',')
        .map(|p| match p.trim() {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(CliError::config(format!("unknown split '{other}'"))),
        })
        .collect()
}

fn dump_embeddings(a: &DumpEmbeddingsArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (model, mut cfg) = modelcfg::model_from_checkpoint(&ckpt, ds.vocab.clone())?;
    if let Some(m) = &a.feature_mode {
        cfg.set("eval.feature_mode", m)?;
    }
    let mode = modelcfg::feature_mode(&cfg)?;

    let mut max_d = 0usize;
    let mut blocks = Vec::new();
    for split in parse_splits(&a.splits)? {
        let f = extract_split(&model, &ds.data, split, mode)?;
        max_d = max_d.max(f.features.cols);
        blocks.push(f);
    }
    let text = ckpt.array(TEXT_CACHE_ARRAY).cloned();
    if let Some(t) = &text {
        max_d = max_d.max(t.cols);
    }

    let mut out = String::from("path,pid,camid,kind");
    for c in 0..max_d {
        out.push_str(&format!(",f{c}"));
    }
    out.push('\n');
    for f in &blocks {
        for r in 0..f.features.rows {
            let item = f.indices[r];
            out.push_str(&format!("{},{},{},image", ds.paths[item], f.pids[r], f.camids[r]));
            for c in 0..f.features.cols {
                out.push_str(&format!(",{}", f.features.at(r, c)));
            }
            out.push('\n');
        }
    }
    if let Some(t) = &text {
        for y in 0..t.rows {
            out.push_str(&format!("text:{y},{y},,text"));
            for c in 0..t.cols {
                out.push_str(&format!(",{}", t.at(y, c)));
            }
            out.push('\n');
        }
    }
    fs::write(&a.out, out)?;
    println!("wrote embeddings to {}", a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct DumpRankingsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output JSON-lines path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long)]
    pub feature_mode: Option<String>,
    #[arg(long)]
    pub metric: Option<String>,
}

fn dump_rankings(a: &DumpRankingsArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (model, mut cfg) = modelcfg::model_from_checkpoint(&ckpt, ds.vocab.clone())?;
    if let Some(m) = &a.feature_mode {
        cfg.set("eval.feature_mode", m)?;
    }
    if let Some(m) = &a.metric {
        cfg.set("eval.metric", m)?;
    }
    let mode = modelcfg::feature_mode(&cfg)?;
    let metric = modelcfg::metric(&cfg)?;

    let q = extract_split(&model, &ds.data, Split::Query, mode)?;
    let g = extract_split(&model, &ds.data, Split::Gallery, mode)?;
    let dist = reid_core::eval::distance_matrix(&q.features, &g.features, metric)?;
    let gallery =
        reid_core::eval::GalleryIndex::new(g.features, g.pids.clone(), g.camids.clone())?;
    let ranking = reid_core::eval::rank_gallery(&dist, &q.pids, &q.camids, &gallery)?;

    let mut out = String::new();
    for (qi, order) in ranking.order.iter().enumerate() {
        let hits: Vec<serde_json::Value> = order
            .iter()
            .take(a.top_k)
            .zip(&ranking.matches[qi])
            .map(|(&gi, &is_match)| {
                json!({
                    "path": ds.paths[g.indices[gi]],
                    "pid": g.pids[gi],
                    "camid": g.camids[gi],
                    "distance": dist.at(qi, gi),
                    "match": is_match,
                })
            })
            .collect();
        out.push_str(
            &json!({
                "query": ds.paths[q.indices[qi]],
                "pid": q.pids[qi],
                "camid": q.camids[qi],
                "top": hits,
            })
            .to_string(),
        );
        out.push('\n');
    }
    fs::write(&a.out, out)?;
    println!("wrote rankings for {} queries to {}", ranking.order.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep-m
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SweepMArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// stage0 checkpoint to branch every run from.
    #[arg(long)]
    pub init: PathBuf,
    /// Prompt token counts, comma separated.
    #[arg(long, default_value = "0,1,2,4,8")]
    pub m: String,
    /// Results directory; must not exist yet.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set")]
    pub sets: Vec<String>,
}

/// stage1 + stage2 + eval starting from a pretrained model; the workhorse
/// behind sweep-m and ablate.
fn two_stage_run(
    base: &Checkpoint,
    cfg: &ExperimentConfig,
    ds: &LoadedDataset,
    skip_params: &[&str],
) -> Result<(MetricsReport, f64)> {
    let mut model = modelcfg::build_model(cfg, ds.vocab.clone(), base.n_ids)?;
    modelcfg::restore_params(&mut model, base, skip_params)?;
    let cache = precompute_image_features(&model, &ds.data)?;
    let (text_cache, s1_logs) = run_stage1(&mut model, &cache, &modelcfg::stage1_config(cfg)?)?;
    let s2 = modelcfg::stage2_config(cfg, ds.meta.image_hw, train_fill(&ds.data))?;
    run_stage2(&mut model, &ds.data, Some(&text_cache), &s2)?;
    let report =
        evaluate_model(&model, &ds.data, modelcfg::feature_mode(cfg)?, modelcfg::metric(cfg)?)?;
    let s1_final = s1_logs.last().map(|l| l.loss).unwrap_or(f64::NAN);
    Ok((report, s1_final))
}

fn sweep_m(a: &SweepMArgs) -> Result<()> {
    let out = fresh_dir(&a.out)?;
    let ds = load_dataset(&a.data)?;
    let base = Checkpoint::load(&a.init)?;
    check_init_stage(&base, &["stage0"], "sweep-m")?;
    let ms: Vec<usize> = a
        .m
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| CliError::config(format!("--m: bad integer '{p}'"))))
        .collect::<Result<_>>()?;
    if ms.is_empty() {
        return Err(CliError::config("--m lists no token counts"));
    }

    fs::create_dir_all(&out)?;
    let mut rows = Vec::new();
    println!("{:>4} {:>10} {:>8} {:>8}", "M", "s1-loss", "mAP", "R@1");
    for &m in &ms {
        let mut cfg = ExperimentConfig::from_text(&base.config)?;
        cfg.overlay(None, &a.sets)?;
        cfg.set("model.m", &m.to_string())?;
        // the token bank's shape depends on M; everything else transfers
        let (report, s1_loss) = two_stage_run(&base, &cfg, &ds, &[TOKEN_BANK_PARAM])?;
        println!("{:>4} {:>10.5} {:>8.4} {:>8.4}", m, s1_loss, report.map, report.cmc[0]);
        rows.push(json!({
            "m": m,
            "stage1_final_loss": s1_loss,
            "map": report.map,
            "r1": report.cmc[0],
            "r5": report.cmc[1],
        }));
    }
    write_json_atomic(&out.join("results.json"), &json!({ "sweep": "m", "rows": rows }))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum AblatePreset {
    /// baseline vs one-stage vs two-stage training.
    Stages,
    /// Which text-side loss drives fine-tuning.
    LossTerms,
    /// Camera embeddings and overlapping patches.
    SieOlp,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub preset: AblatePreset,
    #[arg(long)]
    pub data: PathBuf,
    /// Results directory; must not exist yet.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set")]
    pub sets: Vec<String>,
}

/// Run stage0 once and snapshot it so every variant branches from the same
/// pretrained weights.
fn pretrained_base(cfg: &ExperimentConfig, ds: &LoadedDataset) -> Result<Checkpoint> {
    check_image_size(cfg, &ds.meta)?;
    let mut model = modelcfg::build_model(cfg, ds.vocab.clone(), ds.meta.n_train_ids)?;
    let logs = pretrain_stage0(&mut model, &ds.data, &modelcfg::stage0_config(cfg)?)?;
    Ok(modelcfg::checkpoint_from_model(&model, cfg, "stage0", logs.len(), vec![]))
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let out = fresh_dir(&a.out)?;
    let ds = load_dataset(&a.data)?;
    let cfg = ExperimentConfig::load(a.config.as_deref(), &a.sets)?;
    fs::create_dir_all(&out)?;

    let mut rows = Vec::new();
    println!("{:<16} {:>8} {:>8}", "variant", "mAP", "R@1");
    let record = |name: &str, report: &MetricsReport, rows: &mut Vec<serde_json::Value>| {
        println!("{:<16} {:>8.4} {:>8.4}", name, report.map, report.cmc[0]);
        rows.push(json!({ "variant": name, "map": report.map, "r1": report.cmc[0], "r5": report.cmc[1] }));
    };

    match a.preset {
        AblatePreset::Stages => {
            let base = pretrained_base(&cfg, &ds)?;
            let s2 = modelcfg::stage2_config(&cfg, ds.meta.image_hw, train_fill(&ds.data))?;
            let mode = modelcfg::feature_mode(&cfg)?;
            let metric = modelcfg::metric(&cfg)?;

            let (mut m1, _) = modelcfg::model_from_checkpoint(&base, ds.vocab.clone())?;
            let mut b2 = s2.clone();
            b2.text_loss = TextLossKind::None;
            b2.weights.i2tce = 0.0;
            run_baseline(&mut m1, &ds.data, &b2)?;
            record("baseline", &evaluate_model(&m1, &ds.data, mode, metric)?, &mut rows);

            let (mut m2, _) = modelcfg::model_from_checkpoint(&base, ds.vocab.clone())?;
            run_one_stage(&mut m2, &ds.data, &s2)?;
            record("one-stage", &evaluate_model(&m2, &ds.data, mode, metric)?, &mut rows);

            let (report, _) = two_stage_run(&base, &cfg, &ds, &[])?;
            record("two-stage", &report, &mut rows);
        }
        AblatePreset::LossTerms => {
            let base = pretrained_base(&cfg, &ds)?;
            for (name, value) in
                [("none", "none"), ("i2t", "i2t"), ("t2i", "t2i"), ("i2t+t2i", "both"), ("i2tce", "i2tce")]
            {
                let mut c = cfg.clone();
                c.set("train.stage2.text_loss", value)?;
                if value == "none" {
                    c.set("train.stage2.w_i2tce", "0.0")?;
                }
                let (report, _) = two_stage_run(&base, &c, &ds, &[])?;
                record(name, &report, &mut rows);
            }
        }
        AblatePreset::SieOlp => {
            let half_stride = (cfg.get_usize("model.patch")? / 2).max(1).to_string();
            let variants: Vec<(&str, Vec<(&str, String)>)> = vec![
                ("plain", vec![]),
                ("sie-cls", vec![("model.sie", "cls".to_string())]),
                ("sie-all", vec![("model.sie", "all".to_string())]),
                ("olp", vec![("model.stride", half_stride.clone())]),
                (
                    "sie-cls+olp",
                    vec![("model.sie", "cls".to_string()), ("model.stride", half_stride)],
                ),
            ];
            for (name, mods) in &variants {
                let mut c = cfg.clone();
                c.set("model.cameras", &ds.meta.n_cameras.to_string())?;
                for (k, v) in mods {
                    c.set(k, v.as_str())?;
                }
                // architectures differ, so each variant pretrains itself
                let base = pretrained_base(&c, &ds)?;
                let (report, _) = two_stage_run(&base, &c, &ds, &[])?;
                record(name, &report, &mut rows);
            }
        }
    }

    let preset = match a.preset {
        AblatePreset::Stages => "stages",
        AblatePreset::LossTerms => "loss-terms",
        AblatePreset::SieOlp => "sie-olp",
    };
    write_json_atomic(&out.join("results.json"), &json!({ "preset": preset, "rows": rows }))?;
    Ok(())
}
