//! `qreid` — train, evaluate, and inspect occlusion-robust re-identification
//! models.
//!
//! Commands: `train`, `eval`, `rank`, `attn-dump`, `augment-preview`,
//! `gradcheck`. Configuration merges defaults, an optional `key=value`
//! config file (`--config`), and flag overrides, in that order; every run
//! writes its effective configuration next to its outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use qreid::augment::{load_obstacles, synthetic_obstacles, Obstacle};
use qreid::checkpoint::Checkpoint;
use qreid::config::{DataSource, RunConfig};
use qreid::data::{load_dataset, synthetic::generate, Dataset, ImageBuf};
use qreid::eval::{self, attention_mass_in_mask};
use qreid::model::Model;
use qreid::train::{fit, FitOptions, TraceLine};
use qreid::transformer::Dropout;
use qreid::verify;

#[derive(Parser)]
#[command(name = "qreid", version, about = "Occlusion-robust person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory or the synthetic sprite set.
    Train(TrainArgs),
    /// Evaluate a checkpoint: CMC at the configured ranks plus mAP.
    Eval(EvalArgs),
    /// Export per-query rank strips against a gallery.
    Rank(RankArgs),
    /// Dump decoder cross-attention maps for one image as text grids.
    AttnDump(AttnDumpArgs),
    /// Write augmented samples and their occlusion masks for inspection.
    AugmentPreview(PreviewArgs),
    /// Verify every backward rule and loss against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Options shared by every command that builds a run configuration.
#[derive(Args, Clone, Default)]
struct ConfigOpts {
    /// key=value configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root with train/ query/ gallery/ folders.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use the synthetic sprite dataset; accepts comma-separated spec
    /// overrides such as `ids=50,per_id=12,height=48,width=24`.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    synthetic: Option<String>,
    /// Directory of RGBA obstacle patches for the occlusion augmentation.
    #[arg(long)]
    obstacles: Option<PathBuf>,
    #[arg(long)]
    nq: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Obstacles composited per training batch.
    #[arg(long)]
    k: Option<usize>,
    /// Reverse-triplet scale factor.
    #[arg(long)]
    lambda: Option<f64>,
    /// Decorrelation penalty factor.
    #[arg(long)]
    alpha: Option<f64>,
    /// Triplet margin.
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training scheme: full, transformer, or cnn.
    #[arg(long)]
    variant: Option<String>,
}

impl ConfigOpts {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            cfg.apply_file(&text)?;
        }
        if let Some(seed) = self.seed {
            cfg.apply("seed", &seed.to_string())?;
        }
        if let Some(data) = &self.data {
            cfg.apply("data", &data.display().to_string())?;
        }
        if let Some(spec) = &self.synthetic {
            cfg.apply("synthetic.seed", &cfg.seed.to_string())?;
            for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
                let (key, value) = part
                    .split_once('=')
                    .with_context(|| format!("synthetic spec entry `{part}` is not key=value"))?;
                cfg.apply(&format!("synthetic.{}", key.trim()), value.trim())?;
            }
        }
        if let Some(dir) = &self.obstacles {
            cfg.apply("obstacles", &dir.display().to_string())?;
        }
        for (key, value) in [
            ("nq", self.nq.map(|v| v.to_string())),
            ("layers", self.layers.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("dim", self.dim.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
        ] {
            if let Some(v) = value {
                cfg.apply(key, &v)?;
            }
        }
        for (key, value) in [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("margin", self.margin),
        ] {
            if let Some(v) = value {
                cfg.apply(key, &v.to_string())?;
            }
        }
        if let Some(variant) = &self.variant {
            cfg.apply("variant", variant)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigOpts,
    /// Output directory for checkpoint, loss trace, and config snapshot.
    #[arg(long, default_value = "qreid-out")]
    out: PathBuf,
    /// Print a trace line every N steps.
    #[arg(long, default_value_t = 10)]
    log_every: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigOpts,
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "qreid-out")]
    out: PathBuf,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    config: ConfigOpts,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "qreid-out")]
    out: PathBuf,
    /// Gallery entries exported per query.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Person image to inspect.
    #[arg(long)]
    image: PathBuf,
    /// Ground-truth occlusion mask (grayscale). When omitted, a sibling
    /// `<split>_masks/<name>` file is used if present.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Decoder layer to export; defaults to the last.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value = "qreid-out")]
    out: PathBuf,
}

#[derive(Args)]
struct PreviewArgs {
    #[command(flatten)]
    config: ConfigOpts,
    #[arg(long, default_value = "qreid-out")]
    out: PathBuf,
    /// Source images to preview.
    #[arg(long, default_value_t = 4)]
    count: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_configured_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(DataSource::Directory(root)) => {
            let report = load_dataset(root, cfg.model.input_height, cfg.model.input_width)?;
            for warning in &report.skipped {
                eprintln!("warning: skipped {warning}");
            }
            Ok(report.dataset)
        }
        Some(DataSource::Synthetic(spec)) => {
            let mut spec = spec.clone();
            // the model input resolution is authoritative
            spec.height = cfg.model.input_height;
            spec.width = cfg.model.input_width;
            Ok(generate(&spec)?)
        }
        None => bail!("no dataset: pass --data <dir> or --synthetic [spec]"),
    }
}

/// Training obstacle bank: user-supplied patches, or a synthetic bank
/// derived from the run seed (distinct from the held-out test obstacles).
fn training_obstacles(cfg: &RunConfig) -> Result<Vec<Obstacle>> {
    match &cfg.obstacle_dir {
        Some(dir) => Ok(load_obstacles(dir)?),
        None => Ok(synthetic_obstacles(8, cfg.seed ^ 0x0b57_ac1e)),
    }
}

fn write_config_snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.render())?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.build()?;
    if cfg.data.is_none() {
        bail!("no dataset: pass --data <dir> or --synthetic [spec]");
    }
    print!("{}", cfg.render());
    write_config_snapshot(&cfg, &args.out)?;
    let dataset = load_configured_dataset(&cfg)?;
    let bank = training_obstacles(&cfg)?;
    println!(
        "training `{}` on {} train images ({} identities), obstacle bank of {}",
        cfg.scheme.name(),
        dataset.train.len(),
        dataset.train_identities().len(),
        bank.len()
    );

    let mut trace_file = std::fs::File::create(args.out.join("loss_trace.tsv"))?;
    use std::io::Write as _;
    writeln!(trace_file, "{}", TraceLine::header())?;
    let log_every = args.log_every.max(1);
    let mut on_step = |line: &TraceLine| {
        let _ = writeln!(trace_file, "{}", line.render());
        if line.step % log_every == 0 {
            println!("step {}: total {:.4} (ce {:.4})", line.step, line.total, line.ce);
        }
    };
    let result = fit(
        &dataset,
        &cfg,
        &bank,
        FitOptions {
            checkpoint_dir: Some(&args.out),
            on_step: Some(&mut on_step),
            ..Default::default()
        },
    )?;
    println!(
        "done: {} steps ({} per epoch), {} anchors skipped; checkpoint at {}",
        result.completed_steps,
        result.steps_per_epoch,
        result.skipped_anchors,
        args.out.join("checkpoint.bin").display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let model = ck.restore_model()?;
    Ok((ck, model))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (ck, model) = load_model(&args.checkpoint)?;
    // dataset location comes from flags/file; the model comes from the
    // checkpoint, so its input resolution and dims are authoritative
    let mut cfg = ck.config.clone();
    let flag_cfg = args.config.build()?;
    if flag_cfg.data.is_some() {
        cfg.data = flag_cfg.data.clone();
    }
    if cfg.data.is_none() {
        bail!("no dataset: pass --data <dir> or --synthetic [spec]");
    }
    cfg.eval_ranks = flag_cfg.eval_ranks.clone();
    let dataset = load_configured_dataset(&cfg)?;
    let report = eval::evaluate(&model, &dataset, &cfg.eval_ranks)?;
    print!("{}", report.render());
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("metrics.txt"), report.render())?;
    let mut ap_lines = String::from("query\tap\n");
    for (q, ap) in report.per_query_ap.iter().enumerate() {
        match ap {
            Some(v) => ap_lines.push_str(&format!("{q}\t{v:.6}\n")),
            None => ap_lines.push_str(&format!("{q}\texcluded\n")),
        }
    }
    std::fs::write(args.out.join("per_query_ap.tsv"), ap_lines)?;
    println!("report written to {}", args.out.join("metrics.txt").display());
    Ok(())
}

fn cmd_rank(args: RankArgs) -> Result<()> {
    let (ck, model) = load_model(&args.checkpoint)?;
    let mut cfg = ck.config.clone();
    let flag_cfg = args.config.build()?;
    if flag_cfg.data.is_some() {
        cfg.data = flag_cfg.data.clone();
    }
    if cfg.data.is_none() {
        bail!("no dataset: pass --data <dir> or --synthetic [spec]");
    }
    let dataset = load_configured_dataset(&cfg)?;
    let query = eval::embed(&model, &dataset.query)?;
    let gallery = eval::embed(&model, &dataset.gallery)?;
    let ranking = eval::rank(&query, &gallery)?;

    std::fs::create_dir_all(&args.out)?;
    let mut out = String::from("query\trank\tgallery\tdistance\tcorrect\n");
    for q in 0..ranking.num_queries() {
        let top = args.top.min(ranking.sorted[q].len());
        for (pos, entry) in eval::rank_list(&ranking, q, top)?.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{}\n",
                query.names[q],
                pos + 1,
                entry.name,
                entry.distance,
                entry.correct as u8
            ));
        }
    }
    let path = args.out.join("rank_lists.tsv");
    std::fs::write(&path, out)?;
    println!(
        "wrote top-{} lists for {} queries to {}",
        args.top,
        ranking.num_queries(),
        path.display()
    );
    Ok(())
}

fn discover_mask(image: &Path) -> Option<PathBuf> {
    let dir = image.parent()?;
    let split = dir.file_name()?.to_str()?;
    let candidate = dir
        .parent()?
        .join(format!("{split}_masks"))
        .join(image.file_name()?);
    candidate.is_file().then_some(candidate)
}

fn cmd_attn_dump(args: AttnDumpArgs) -> Result<()> {
    let (_, model) = load_model(&args.checkpoint)?;
    let image = ImageBuf::load(
        &args.image,
        model.config.input_height,
        model.config.input_width,
    )?;
    let mut tape = qreid::autodiff::Tape::<f32>::new();
    let bound = model.bind(&mut tape, false)?;
    let fwd = model.forward_image(&mut tape, &bound, &image, &mut Dropout::Off)?;
    let maps = fwd
        .attention
        .context("this checkpoint is a pooled-CNN baseline without attention maps")?;
    let layer = args.layer.unwrap_or(maps.layers() - 1);

    std::fs::create_dir_all(&args.out)?;
    let (gh, gw) = maps.grid;
    for q in 0..maps.num_queries {
        let map = maps.map(q, layer)?;
        let mut text = String::new();
        for row in map.chunks(gw) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
            text.push_str(&cells.join(" "));
            text.push('\n');
        }
        std::fs::write(args.out.join(format!("attn_q{q}_layer{layer}.txt")), text)?;
    }

    let mask_path = args.mask.clone().or_else(|| discover_mask(&args.image));
    let mut summary = format!("grid: {gh}x{gw}\nlayer: {layer}\nqueries: {}\n", maps.num_queries);
    if let Some(mask_path) = mask_path {
        let mask_img = ImageBuf::load(&mask_path, model.config.input_height, model.config.input_width)?;
        let hw = model.config.input_height * model.config.input_width;
        let mask: Vec<bool> = (0..hw).map(|i| mask_img.pixels[i] > 0.5).collect();
        summary.push_str(&format!("mask: {}\n", mask_path.display()));
        for q in 0..maps.num_queries {
            let map = maps.map(q, layer)?;
            let inside = attention_mass_in_mask(
                &map,
                maps.grid,
                &mask,
                model.config.input_height,
                model.config.input_width,
            )?;
            let role = if q == maps.num_queries - 1 { "occlusion" } else { "identity" };
            summary.push_str(&format!(
                "query {q} ({role}): in_mask {:.6}, out_mask {:.6}\n",
                inside,
                1.0 - inside
            ));
        }
    } else {
        summary.push_str("mask: none\n");
    }
    std::fs::write(args.out.join("attn_summary.txt"), &summary)?;
    print!("{summary}");
    println!("wrote {} maps to {}", maps.num_queries, args.out.display());
    Ok(())
}

fn cmd_augment_preview(args: PreviewArgs) -> Result<()> {
    let cfg = args.config.build()?;
    if cfg.data.is_none() {
        bail!("no dataset: pass --data <dir> or --synthetic [spec]");
    }
    let dataset = load_configured_dataset(&cfg)?;
    let bank = training_obstacles(&cfg)?;
    std::fs::create_dir_all(&args.out)?;

    let mut rng = qreid::rng::stream(cfg.seed, qreid::rng::Purpose::Augment, &[0]);
    let sources: Vec<qreid::augment::SourceSample> = dataset
        .train
        .iter()
        .take(args.count)
        .map(|p| qreid::augment::SourceSample {
            image: qreid::augment::standard_augment(&p.image, &mut rng),
            person_id: p.person_id,
            camera_id: p.camera_id,
        })
        .collect();
    let samples = qreid::augment::augment_batch(&sources, &bank, cfg.train.obstacles_per_batch, &mut rng)?;
    for (i, sample) in samples.iter().enumerate() {
        let tag = match sample.obstacle {
            Some(o) => format!("obst{o}"),
            None => "orig".into(),
        };
        sample
            .image
            .save_png(&args.out.join(format!("sample{i:03}_id{}_{tag}.png", sample.person_id)))?;
        if sample.obstacle.is_some() {
            let mut mask_img = ImageBuf::filled(sample.image.height, sample.image.width, [0.0; 3]);
            for (p, &m) in sample.mask.iter().enumerate() {
                if m {
                    let (y, x) = (p / sample.image.width, p % sample.image.width);
                    for c in 0..3 {
                        mask_img.set(c, y, x, 1.0);
                    }
                }
            }
            mask_img.save_png(&args.out.join(format!("sample{i:03}_id{}_{tag}_mask.png", sample.person_id)))?;
        }
    }
    println!("wrote {} previews to {}", samples.len(), args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let lines = verify::run_battery(args.seed)?;
    let mut failed = 0usize;
    for line in &lines {
        let status = if line.passed() { "ok" } else { "FAIL" };
        println!("{:<32} max rel err {:>12.3e}  [{status}]", line.name, line.max_rel_err);
        if !line.passed() {
            failed += 1;
        }
    }
    println!(
        "{} checks, tolerance {:.0e}",
        lines.len(),
        verify::GRADCHECK_TOLERANCE
    );
    if failed > 0 {
        bail!("{failed} gradient checks exceeded tolerance");
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Rank(args) => cmd_rank(args),
        Command::AttnDump(args) => cmd_attn_dump(args),
        Command::AugmentPreview(args) => cmd_augment_preview(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
