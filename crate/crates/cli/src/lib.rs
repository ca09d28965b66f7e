//! Command implementations behind the `pmm` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pmm::analysis::{feature_grid, render_block_overlay, stage_attention, MaskStats};
use pmm::attribution::{render_heatmap, ImageRef};
use pmm::checkpoint;
use pmm::datapipe::{chw_tensor, generate_synthetic_dataset, load_chw, SyntheticSpec};
use pmm::eval::{evaluate_split, write_per_query_csv, write_results};
use pmm::featmix::block_ranking;
use pmm::model::PmmModel;
use pmm::trainer::{open_store, Trainer, PER_QUERY_FILE, RESULTS_FILE};
use pmm::{Config, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "pmm", version, about = "Progressive multi-stage re-identification with attentive feature mixing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; resumes when --checkpoint is given.
    Train(TrainArgs),
    /// Rank the query split against the gallery with a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Write per-stage Grad-CAM heatmaps, block overlays and overlap stats.
    Visualize(VisualizeArgs),
    /// Generate the synthetic two-cue dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file, or the name of a built-in preset
    /// (market, duke, cuhk03, synthetic). PMM_* variables override keys.
    #[arg(long)]
    pub config: Option<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root (overrides `dataset.root`).
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained weights; without it a freshly initialized model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image files to explain.
    #[arg(long, num_args = 1.., required = true)]
    pub images: Vec<PathBuf>,
    /// Stage number (1-based) or `all`.
    #[arg(long, default_value = "all")]
    pub stage: String,
    /// Classes of a freshly initialized model.
    #[arg(long, default_value_t = 2)]
    pub num_classes: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset root to create (overrides `dataset.root`).
    #[arg(long)]
    pub root: Option<PathBuf>,
}

/// Resolves `--config`: an existing file, else a preset name. Without the
/// flag the synthetic preset is used.
pub fn load_config(common: &Common) -> Result<Config> {
    let env = std::env::vars();
    let mut config = match common.config.as_deref() {
        Some(arg) if Path::new(arg).is_file() => Config::load_with_env(Path::new(arg), env)?,
        Some(name) => Config::preset_with_env(name, env)?,
        None => Config::preset_with_env("synthetic", env)?,
    };
    apply_flags(&mut config, common)?;
    Ok(config)
}

fn apply_flags(config: &mut Config, common: &Common) -> Result<()> {
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Visualize(a) => cmd_visualize(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut trainer = match &args.checkpoint {
        Some(ck) => {
            let mut t = Trainer::resume(ck)?;
            // only output location may change on resume
            if let Some(out) = &args.common.out {
                t.config.output_dir = out.clone();
            }
            t
        }
        None => Trainer::new(load_config(&args.common)?)?,
    };
    log::info!(
        "training {} epochs of {} iterations into {}",
        trainer.config.optim.epochs,
        trainer.iters_per_epoch(),
        trainer.output_dir().display()
    );
    let summary = trainer.fit()?;
    if let Some(s) = summary.final_eval {
        println!("{}", serde_json::to_string(&s)?);
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let mut config = match &args.common.config {
        Some(_) => load_config(&args.common)?,
        None => {
            let mut c = ck.config.clone();
            apply_flags(&mut c, &args.common)?;
            c
        }
    };
    if let Some(root) = &args.dataset_root {
        config.dataset.root = root.clone();
    }
    let model = PmmModel::new(&config, ck.cursor.num_classes)?;
    ck.restore_model(&model)?;
    let store = open_store(&config)?;
    let (result, query_meta) = evaluate_split(&model, &store, config.eval.batch_size)?;
    let summary = result.summary();
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    write_results(&out.join(RESULTS_FILE), &summary)?;
    write_per_query_csv(&out.join(PER_QUERY_FILE), &result, &query_meta)?;
    println!("{}", serde_json::to_string(&summary)?);
    println!("rank1 {}", summary.rank1);
    println!("mAP {}", summary.map);
    Ok(())
}

fn parse_stages(arg: &str, stages: usize) -> Result<Vec<usize>> {
    if arg == "all" {
        return Ok((0..stages).collect());
    }
    match arg.parse::<usize>() {
        Ok(s) if (1..=stages).contains(&s) => Ok(vec![s - 1]),
        _ => Err(Error::InvalidArgument(format!(
            "--stage must be `all` or a number in 1..={stages}, got `{arg}`"
        ))),
    }
}

pub fn cmd_visualize(args: &VisualizeArgs) -> Result<()> {
    let (config, model) = match &args.checkpoint {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            let mut config = ck.config.clone();
            apply_flags(&mut config, &args.common)?;
            let model = ck.model()?;
            (config, model)
        }
        None => {
            let config = load_config(&args.common)?;
            let model = PmmModel::new(&config, args.num_classes)?;
            (config, model)
        }
    };
    let stages = parse_stages(&args.stage, model.num_stages())?;
    let [h, w] = config.dataset.resolution;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;

    let mut all_masks = vec![Vec::new(); model.num_stages()];
    for path in &args.images {
        let chw = load_chw(path, h, w)?;
        let images = chw_tensor(&chw, h, w, model.dtype)?;
        let stem = format!(
            "input_{}",
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        );
        let image = ImageRef { chw: &chw, height: h, width: w };
        let maps = stage_attention(&model, &images, None)?;
        for (t, g) in maps.iter().enumerate() {
            let mask = block_ranking(g, &feature_grid(&model, g)?, config.mix.k)?;
            if stages.contains(&t) {
                render_heatmap(g, 0, image, out, &stem)?;
                render_block_overlay(&mask, 0, image, &out.join(format!("{stem}_stage{}_blocks.png", t + 1)))?;
            }
            all_masks[t].push(mask);
        }
    }
    // overlap statistics over the requested stages
    let masks: Vec<_> = stages
        .iter()
        .map(|&t| {
            let per_image = &all_masks[t];
            let mut m = per_image[0].clone();
            for other in &per_image[1..] {
                m.values.extend_from_slice(&other.values);
                m.blocks.extend(other.blocks.iter().cloned());
            }
            m
        })
        .collect();
    let mut stats = MaskStats::from_masks(&masks, config.mix.k);
    for p in &mut stats.pairs {
        p.stages = [stages[p.stages[0] - 1] + 1, stages[p.stages[1] - 1] + 1];
    }
    stats.write(&out.join("mask_stats.json"))?;
    println!("{}", out.display());
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut config = load_config(&args.common)?;
    if let Some(root) = &args.root {
        config.dataset.root = root.clone();
    }
    let [h, w] = config.dataset.resolution;
    let spec = SyntheticSpec {
        num_ids: config.synthetic.num_ids,
        imgs_per_id: config.synthetic.imgs_per_id,
        num_cams: config.synthetic.num_cams,
        resolution: (h, w),
    };
    let summary = generate_synthetic_dataset(&config.dataset.root, spec, config.seed)?;
    println!(
        "{} images ({} train, {} query, {} gallery) in {}",
        summary.total(),
        summary.train,
        summary.query,
        summary.gallery,
        config.dataset.root.display()
    );
    Ok(())
}

/// Machine-readable failure line for stderr.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": e.category(), "message": e.to_string() }).to_string()
}
