use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use viewreid::distance::{distance_matrix, AttentionMode, DistanceOptions, FusionWeights};
use viewreid::eval::{distance_heatmap, evaluate, EvalProtocol};
use viewreid::io::{self, Tensor};
use viewreid::pooling::{downsample_masks, embed};
use viewreid::synth::{generate_dataset, SynthConfig};
use viewreid::trainer::{evaluate_model, TrainConfig, TrainingSet};
use viewreid::types::Split;
use viewreid::{Error, Result, ViewEmbedding};

const RUN_CONFIG: &str = "run_config.json";

#[derive(Parser, Debug)]
#[command(name = "viewreid", version, about = "View-aware vehicle re-identification toolkit")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "VIEWREID_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multi-view dataset.
    GenSynth(GenSynthArgs),
    /// Pool feature maps into per-image view embeddings.
    Pool(PoolArgs),
    /// Fused query x gallery distance matrix.
    Dist(DistArgs),
    /// mAP / CMC report for a distance matrix.
    Eval(EvalArgs),
    /// Train the toy embedder.
    TrainToy(TrainArgs),
    /// Per-cell distance heatmap between two feature maps.
    Heatmap(HeatmapArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenSynthArgs {
    /// JSON or TOML generator config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ids: Option<usize>,
    #[arg(long)]
    per_id: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PoolArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum AttentionArg {
    CommonVisible,
    Uniform,
}

impl From<AttentionArg> for AttentionMode {
    fn from(a: AttentionArg) -> Self {
        match a {
            AttentionArg::CommonVisible => AttentionMode::CommonVisible,
            AttentionArg::Uniform => AttentionMode::Uniform,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct DistArgs {
    /// Directory of query `.emb`/`.vis` pairs.
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda2: f64,
    #[arg(long, value_enum, default_value_t = AttentionArg::CommonVisible)]
    attention: AttentionArg,
    /// L2-normalize vectors before comparing.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    dist: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// cross-camera | one-per-id | plain
    #[arg(long, default_value = "cross-camera")]
    protocol: String,
    /// Seed for gallery sampling (one-per-id only).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for report.txt and report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON or TOML training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct HeatmapArgs {
    /// Feature-map container.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Container path; a `.pgm` image is written next to it.
    #[arg(long)]
    out: PathBuf,
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    if is_toml {
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("config serializes");
    write_text(path, &(text + "\n"))
}

fn echo(command: &str, args: &impl Serialize, resolved: serde_json::Value) -> serde_json::Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": args,
        "resolved": resolved,
    })
}

fn gen_synth(args: &GenSynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => load_config(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = args.ids {
        cfg.num_ids = v;
    }
    if let Some(v) = args.per_id {
        cfg.images_per_id = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.noise {
        cfg.noise_sigma = v;
    }
    cfg.validate()?;
    create_dir(&args.out)?;
    let manifest = generate_dataset(&cfg, &args.out)?;
    write_json(&args.out.join(RUN_CONFIG), &echo("gen-synth", args, json!(cfg)))?;
    let (train, query, gallery) = cfg.split_sizes();
    println!(
        "wrote {} records (train {train}, query {query}, gallery {gallery}) to {}",
        manifest.len(),
        args.out.display()
    );
    Ok(())
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Query => "query",
        Split::Gallery => "gallery",
    }
}

fn pool(args: &PoolArgs) -> Result<()> {
    let manifest = io::read_manifest(&args.manifest)?;
    let mut pooled = Vec::with_capacity(manifest.len());
    for r in manifest.records() {
        let features = io::read_feature_map(manifest.resolve(&r.feature_path))?;
        let full = io::read_masks(manifest.resolve(&r.mask_path))?;
        let masks = downsample_masks(&full, features.height(), features.width())?;
        pooled.push((r, embed(&features, &masks)?));
    }
    for split in [Split::Train, Split::Query, Split::Gallery] {
        create_dir(&args.out.join(split_dir(split)))?;
    }
    for (r, e) in &pooled {
        io::write_embedding(args.out.join(split_dir(r.split)), &r.image_id, e)?;
    }
    write_json(&args.out.join(RUN_CONFIG), &echo("pool", args, json!({})))?;
    println!("pooled {} images into {}", pooled.len(), args.out.display());
    Ok(())
}

/// Embeddings of a directory, in lexicographic order of image id.
fn read_embedding_dir(dir: &Path) -> Result<(Vec<String>, Vec<ViewEmbedding>)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "emb") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let embs = ids
        .iter()
        .map(|id| io::read_embedding(dir, id))
        .collect::<Result<Vec<_>>>()?;
    Ok((ids, embs))
}

fn dist(args: &DistArgs) -> Result<()> {
    let weights = FusionWeights::new(args.lambda1, args.lambda2)?;
    let opts = DistanceOptions {
        weights,
        attention: args.attention.into(),
        normalize: args.normalize,
    };
    let (qids, q) = read_embedding_dir(&args.query)?;
    let (gids, g) = read_embedding_dir(&args.gallery)?;
    let dm = distance_matrix(&q, &g, &opts)?.into_matrix(qids, gids)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let degenerate = dm.degenerate_pairs();
    io::write_distance_matrix(&args.out, &dm, echo("dist", args, json!({ "lambda1": weights.lambda1(), "lambda2": weights.lambda2() })))?;
    println!(
        "{} x {} distances written to {} ({degenerate} degenerate pairs)",
        dm.num_query(),
        dm.num_gallery(),
        args.out.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let protocol = EvalProtocol::by_name(&args.protocol, args.seed)?;
    let manifest = io::read_manifest(&args.manifest)?;
    let (dm, _) = io::read_distance_matrix(&args.dist)?;
    let report = evaluate(&dm, &manifest, &protocol)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("report.txt"), &report.to_text())?;
    write_json(&args.out.join("report.json"), &report)?;
    write_json(&args.out.join(RUN_CONFIG), &echo("eval", args, json!(protocol)))?;
    print!("{}", report.to_text());
    Ok(())
}

fn train_toy(args: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let manifest = io::read_manifest(&args.manifest)?;
    let set = TrainingSet::from_manifest(&manifest)?;
    let outcome = viewreid::trainer::train_on(&set, &cfg)?;
    create_dir(&args.out)?;
    outcome.model.save(args.out.join("checkpoint"), &cfg)?;
    let mut log = String::new();
    for entry in &outcome.log {
        log += &serde_json::to_string(entry).expect("log serializes");
        log.push('\n');
    }
    write_text(&args.out.join("train_log.jsonl"), &log)?;
    if !set.query.is_empty() && !set.gallery.is_empty() {
        let opts = DistanceOptions {
            weights: cfg.fusion,
            attention: cfg.attention,
            normalize: false,
        };
        let report = evaluate_model(&outcome.model, &set, &opts, &EvalProtocol::cross_camera())?;
        write_text(&args.out.join("report.txt"), &report.to_text())?;
        write_json(&args.out.join("report.json"), &report)?;
    }
    write_json(&args.out.join(RUN_CONFIG), &echo("train-toy", args, json!(cfg)))?;
    let (first, last) = (&outcome.log[0], outcome.log.last().unwrap());
    println!(
        "trained {} epochs: loss {:.4} -> {:.4}; checkpoint in {}",
        cfg.epochs,
        first.total,
        last.total,
        args.out.join("checkpoint").display()
    );
    Ok(())
}

fn heatmap(args: &HeatmapArgs) -> Result<()> {
    let a = io::read_feature_map(&args.a)?;
    let b = io::read_feature_map(&args.b)?;
    let h = distance_heatmap(&a, &b)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    io::write_tensor(&args.out, &Tensor::new(vec![h.height, h.width], h.values.clone())?)?;
    let pgm = args.out.with_extension("pgm");
    fs::write(&pgm, h.to_pgm()).map_err(|e| Error::Io {
        path: pgm.clone(),
        source: e,
    })?;
    write_json(&io::sidecar_path(&args.out), &echo("heatmap", args, json!({})))?;
    println!("{}x{} heatmap written to {} and {}", h.height, h.width, args.out.display(), pgm.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Pool(a) => pool(a),
        Command::Dist(a) => dist(a),
        Command::Eval(a) => eval(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Heatmap(a) => heatmap(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.class());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
