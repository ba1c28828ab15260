//! `sadse` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use sadse::data::{self, save_matrix_binary, save_matrix_delimited, MatrixFormat, TextOptions};
use sadse::nn::LossVariant;
use sadse::pipeline::{
    embed_with_checkpoint, evaluate_embedding, export_embedding_2d, ingest, run_ablation, run_pipeline, EvalMode,
    KMeansConfig, PipelineConfig, SelfExprMode,
};

#[derive(Parser)]
#[command(
    name = "sadse",
    version,
    about = "Structure-aware deep spectral embedding and clustering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the full pipeline.
    Run(RunArgs),
    /// Run every loss variant and self-expression mode and tabulate the results.
    Ablate(AblateArgs),
    /// Embed the evaluation set with a saved model, without training.
    Embed(EmbedArgs),
    /// Cluster a stored embedding and score it against its labels.
    Eval(EvalArgs),
    /// Write the top-2 principal projection of an embedding as `x,y,label`.
    Export2d(ExportArgs),
    /// Write the configured synthetic dataset to disk.
    GenSynth(GenArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; without it the `desk` preset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset applied when no config file is given.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<EvalMode>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<LossVariant>,
    #[arg(long, value_parser = parse_selfexpr)]
    selfexpr: Option<SelfExprMode>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated loss variants (default: all).
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    variants: Vec<LossVariant>,
    /// Comma-separated self-expression modes (default: all).
    #[arg(long, value_delimiter = ',', value_parser = parse_selfexpr)]
    modes: Vec<SelfExprMode>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint (default: `<out>/model.ckpt`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Embedding matrix file with labels.
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Also write a comma-separated copy.
    #[arg(long)]
    delimited: bool,
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    EvalMode::parse(s).ok_or_else(|| format!("expected F or T, got `{s}`"))
}

fn parse_variant(s: &str) -> Result<LossVariant, String> {
    LossVariant::parse(s).ok_or_else(|| format!("expected lr_ls, lo or lh, got `{s}`"))
}

fn parse_selfexpr(s: &str) -> Result<SelfExprMode, String> {
    SelfExprMode::parse(s).ok_or_else(|| format!("expected attention or lasso, got `{s}`"))
}

fn stage(name: &str) -> impl Fn(sadse::Error) -> anyhow::Error + '_ {
    move |e| anyhow!(e.in_stage(name))
}

fn write_err(e: std::io::Error) -> anyhow::Error {
    anyhow!(sadse::Error::from(e).in_stage("write"))
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(path), _) => PipelineConfig::load(path).map_err(stage("config"))?,
        (None, Some(p)) => PipelineConfig::preset(p).map_err(stage("config"))?,
        (None, None) => PipelineConfig::preset("desk").map_err(stage("config"))?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir.clone_from(o);
    }
    if let Some(m) = c.mode {
        cfg.mode = m;
    }
    if let Some(v) = c.variant {
        cfg.training.variant = v;
    }
    if let Some(s) = c.selfexpr {
        cfg.selfexpr.mode = s;
    }
    cfg.validate().map_err(stage("config"))?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let m = run_pipeline(&cfg)?;
    match &m.report {
        Some(r) => println!(
            "accuracy {:.4}  nmi {:.4}  f1 {:.4}  precision {:.4}",
            r.accuracy, r.nmi, r.f1, r.precision
        ),
        None => println!("clustered {} points (no labels to score)", m.embedding.ncols()),
    }
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let variants = if args.variants.is_empty() {
        LossVariant::ALL.to_vec()
    } else {
        args.variants
    };
    let modes = if args.modes.is_empty() {
        SelfExprMode::ALL.to_vec()
    } else {
        args.modes
    };
    let table = run_ablation(&cfg, &variants, &modes)?;
    print!("{}", table.to_text());
    if table.cells.iter().any(|c| c.outcome.is_err()) {
        return Err(anyhow!("some ablation cells failed"));
    }
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let ck = args.checkpoint.unwrap_or_else(|| cfg.output_dir.join("model.ckpt"));
    let m = embed_with_checkpoint(&cfg, &ck)?;
    fs::create_dir_all(&cfg.output_dir).map_err(write_err)?;
    let path = cfg.output_dir.join(format!("embedding_{}.sadm", cfg.mode.name()));
    save_matrix_binary(&path, &m.embedding, m.labels.as_deref()).map_err(stage("write"))?;
    println!("{} points embedded to {}", m.embedding.ncols(), path.display());
    Ok(())
}

fn load_embedding(path: &Path) -> Result<data::Dataset> {
    data::load_matrix(path, MatrixFormat::RawBinary, TextOptions::default()).map_err(stage("ingest"))
}

fn eval(args: EvalArgs) -> Result<()> {
    let ds = load_embedding(&args.embedding)?;
    let (emb, labels) = (ds.features, ds.labels);
    let labels =
        labels.ok_or_else(|| anyhow!(sadse::Error::InvalidInput("embedding has no labels".into()).in_stage("eval")))?;
    let n_clusters = args
        .clusters
        .unwrap_or_else(|| labels.iter().copied().max().map_or(1, |m| m + 1));
    let kcfg = KMeansConfig {
        restarts: args.restarts,
        ..KMeansConfig::default()
    };
    let report = evaluate_embedding(&emb, &labels, n_clusters, &kcfg, args.seed).map_err(stage("cluster"))?;
    let text = report.to_key_values("");
    print!("{text}");
    if let Some(out) = args.out {
        fs::create_dir_all(&out).map_err(write_err)?;
        fs::write(out.join("eval.txt"), text).map_err(write_err)?;
    }
    Ok(())
}

fn export2d(args: ExportArgs) -> Result<()> {
    let ds = load_embedding(&args.embedding)?;
    let (emb, labels) = (ds.features, ds.labels);
    fs::create_dir_all(&args.out).map_err(write_err)?;
    let path = args.out.join("embedding2d.csv");
    export_embedding_2d(&emb, labels.as_deref(), &path).map_err(stage("export"))?;
    println!("{} points written to {}", emb.ncols(), path.display());
    Ok(())
}

fn gen_synth(args: GenArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let ds = ingest(&cfg).map_err(stage("ingest"))?;
    fs::create_dir_all(&cfg.output_dir).map_err(write_err)?;
    let path = cfg.output_dir.join(format!("{}.sadm", cfg.data.name));
    save_matrix_binary(&path, &ds.features, ds.labels.as_deref()).map_err(stage("write"))?;
    println!(
        "{}×{} dataset written to {}",
        ds.n_features(),
        ds.n_samples(),
        path.display()
    );
    if args.delimited {
        let csv = cfg.output_dir.join(format!("{}.csv", cfg.data.name));
        save_matrix_delimited(&csv, &ds.features, ds.labels.as_deref()).map_err(stage("write"))?;
        println!("text copy written to {}", csv.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate(a),
        Command::Embed(a) => embed(a),
        Command::Eval(a) => eval(a),
        Command::Export2d(a) => export2d(a),
        Command::GenSynth(a) => gen_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
