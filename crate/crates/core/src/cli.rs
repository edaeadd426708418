//! Command-line surface: one multiplexed binary with subcommands for data
//! generation, gene selection, training, embedding, probing, diagnostics,
//! and gradient checking. Every command is deterministic given its flags,
//! and every output directory receives a manifest recording the resolved
//! configuration and the digests of its inputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::autodiff::{grad_check, grad_check_injected, ParamBlock, Tape, Tensor};
use crate::data::{
    generate_synthetic, load_dataset, save_dataset, select_hvg, DataError, Dataset, GenePanel,
    Strategy, SyntheticConfig, EXPRESSION_FILE, FEATURES_FILE, METADATA_FILE,
};
use crate::encoders::{self, init_params, EncoderDims, GeneEncoder, ImageProjector};
use crate::eval::{
    embed_dataset, hierarchy_diagnostics, linear_probe, Components, EvalError, Modality,
    ProbeConfig,
};
use crate::lorentz::{self, ConeConstants, Curvature};
use crate::losses::{self, LossWeights, SimMode};
use crate::rng;
use crate::trainer::{
    checkpoint_load, checkpoint_save, history_to_tsv, train_with_start, Checkpoint, TrainConfig,
    TrainError,
};

/// Errors carrying their process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "delst",
    version,
    about = "Hyperbolic image-gene pretraining with entailment cones"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic spot dataset (expression, features, metadata).
    Generate(GenerateArgs),
    /// Select a gene panel from a dataset and write it as JSON.
    SelectGenes(SelectGenesArgs),
    /// Train the dual-encoder model and write a run directory.
    Train(TrainArgs),
    /// Embed the labeled spots of a dataset with a trained checkpoint.
    Embed(EmbedArgs),
    /// Linear-probe frozen embeddings and report macro-F1 over seeds.
    Probe(ProbeArgs),
    /// Report hierarchy diagnostics for a trained checkpoint.
    Diagnose(DiagnoseArgs),
    /// Compare analytic gradients of the full loss against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args, Debug)]
struct GenerateArgs {
    /// Key-value file of flag defaults; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the three dataset files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    n_slides: usize,
    #[arg(long, default_value_t = 500)]
    spots_per_slide: usize,
    #[arg(long, default_value_t = 300)]
    n_genes: usize,
    #[arg(long, default_value_t = 4)]
    n_classes: usize,
    #[arg(long, default_value_t = 512)]
    feat_dim: usize,
    /// 0 decouples expressed-gene counts from class; 1 ranks them by class.
    #[arg(long, default_value_t = 1.0)]
    hierarchy_strength: f64,
}

#[derive(clap::Args, Debug)]
struct SelectGenesArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding expression.tsv, features.tsv, metadata.tsv.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for panel.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "e-overlap-hvg")]
    strategy: Strategy,
    /// Panel size; defaults to the strategy's standard count.
    #[arg(long)]
    gene_count: Option<usize>,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Run directory: checkpoint.bin, panel.json, history.tsv, manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Existing panel JSON; when absent a panel is selected from the data.
    #[arg(long)]
    panel: Option<PathBuf>,
    #[arg(long, default_value = "e-overlap-hvg")]
    strategy: Strategy,
    #[arg(long)]
    gene_count: Option<usize>,
    /// Resume from this checkpoint instead of fresh parameters.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// IMEL subset size; defaults to round(0.15 * batch-size).
    #[arg(long)]
    q: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "cosine-full")]
    sim_mode: SimMode,
    /// Average both contrastive directions instead of image-anchored only.
    #[arg(long)]
    symmetric: bool,
    /// Drop the cross-modal entailment term.
    #[arg(long)]
    no_cmel: bool,
    /// Drop the intra-modal entailment term.
    #[arg(long)]
    no_imel: bool,
    #[arg(long, default_value_t = 1.0)]
    curvature: f64,
    #[arg(long, default_value_t = 0.1)]
    k_aper: f64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
}

#[derive(clap::Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    panel: PathBuf,
    /// Output directory for embeddings.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "gene")]
    modality: Modality,
    #[arg(long, default_value = "space")]
    components: Components,
    #[arg(long, default_value_t = 1.0)]
    curvature: f64,
}

#[derive(clap::Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    panel: PathBuf,
    /// Output directory for probe.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "image")]
    modality: Modality,
    #[arg(long, default_value = "space")]
    components: Components,
    #[arg(long, default_value_t = 1.0)]
    curvature: f64,
    /// Defaults to max label + 1.
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long, default_value_t = 5)]
    n_seeds: usize,
    #[arg(long, default_value_t = 250)]
    probe_epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    probe_lr: f64,
    #[arg(long, default_value_t = 30)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
}

#[derive(clap::Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    panel: PathBuf,
    /// Output directory for report.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    curvature: f64,
    #[arg(long, default_value_t = 0.1)]
    k_aper: f64,
}

#[derive(clap::Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional output directory for gradcheck.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 2)]
    q: usize,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 24)]
    gene_count: usize,
    #[arg(long, default_value_t = 32)]
    feat_dim: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    /// Central finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value = "cosine-full")]
    sim_mode: SimMode,
    #[arg(long)]
    symmetric: bool,
    #[arg(long, default_value_t = 1.0)]
    curvature: f64,
    #[arg(long, default_value_t = 0.1)]
    k_aper: f64,
    /// Negative-control hook: corrupt one analytic derivative.
    #[arg(long, hide = true)]
    inject_grad_error: bool,
}

/// Manifest written next to every output: enough to reproduce the run.
#[derive(Debug, serde::Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Logical input name -> sha256 of the file bytes.
    pub input_digests: BTreeMap<String, String>,
}

pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = args.into_iter().map(Into::into).collect();
    let argv = match merge_config_file(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.code();
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::SelectGenes(a) => cmd_select_genes(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Embed(a) => cmd_embed(a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Diagnose(a) => cmd_diagnose(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

/// Splice `--config <file>` key-value pairs in after the subcommand token.
/// Keys are flag names without leading dashes; a line without '=' is a
/// boolean flag. Flags given on the command line take precedence, so pairs
/// whose flag already appears explicitly are dropped.
fn merge_config_file(argv: Vec<String>) -> Result<Vec<String>, CliError> {
    if argv.len() < 2 || argv[1].starts_with('-') {
        return Ok(argv);
    }
    let mut path: Option<String> = None;
    let mut i = 2;
    while i < argv.len() {
        if argv[i] == "--config" {
            if i + 1 < argv.len() {
                path = Some(argv[i + 1].clone());
            }
            i += 2;
        } else {
            if let Some(rest) = argv[i].strip_prefix("--config=") {
                path = Some(rest.to_string());
            }
            i += 1;
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {path}: {e}")))?;
    let explicit: Vec<&str> = argv[2..]
        .iter()
        .filter(|a| a.starts_with("--"))
        .map(|a| a.split('=').next().unwrap())
        .collect();
    let mut injected = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = match line.split_once('=') {
            Some((k, v)) => (k.trim(), Some(v.trim())),
            None => (line, None),
        };
        if key.is_empty() || key.starts_with('-') {
            return Err(CliError::Usage(format!(
                "{path}:{}: expected 'flag-name = value' or a bare flag name",
                lineno + 1
            )));
        }
        let flag = format!("--{key}");
        if explicit.contains(&flag.as_str()) {
            continue;
        }
        injected.push(flag);
        if let Some(v) = value {
            injected.push(v.to_string());
        }
    }
    let mut merged = argv[..2].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&argv[2..]);
    Ok(merged)
}

fn io_data(context: &str, e: std::io::Error) -> CliError {
    CliError::Data(format!("{context}: {e}"))
}

fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| io_data(&format!("cannot read {}", path.display()), e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn dataset_digests(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut m = BTreeMap::new();
    for name in [EXPRESSION_FILE, FEATURES_FILE, METADATA_FILE] {
        m.insert(name.to_string(), sha256_hex(&dir.join(name))?);
    }
    Ok(m)
}

fn add_digest(
    m: &mut BTreeMap<String, String>,
    name: &str,
    path: Option<&PathBuf>,
) -> Result<(), CliError> {
    if let Some(p) = path {
        m.insert(name.to_string(), sha256_hex(p)?);
    }
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| io_data(&format!("cannot create {}", dir.display()), e))?;
    let mut text =
        serde_json::to_string_pretty(manifest).expect("manifest serialization cannot fail");
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)
        .map_err(|e| io_data("cannot write manifest.json", e))
}

fn write_output(dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| io_data(&format!("cannot create {}", dir.display()), e))?;
    std::fs::write(dir.join(name), content).map_err(|e| io_data(&format!("cannot write {name}"), e))
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(dir)?)
}

fn load_panel(path: &Path) -> Result<GenePanel, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| io_data(&format!("cannot read panel {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("malformed panel {}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(checkpoint_load(path)?)
}

fn usage(cond: bool, msg: &str) -> Result<(), CliError> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Usage(msg.to_string()))
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    usage(a.n_slides >= 1, "--n-slides must be at least 1")?;
    usage(a.n_genes >= 1, "--n-genes must be at least 1")?;
    usage(a.n_classes >= 1, "--n-classes must be at least 1")?;
    usage(a.feat_dim >= 1, "--feat-dim must be at least 1")?;
    usage((0.0..=1.0).contains(&a.hierarchy_strength), "--hierarchy-strength must lie in [0, 1]")?;
    let cfg = SyntheticConfig {
        n_slides: a.n_slides,
        spots_per_slide: a.spots_per_slide,
        n_genes: a.n_genes,
        n_classes: a.n_classes,
        feat_dim: a.feat_dim,
        hierarchy_strength: a.hierarchy_strength,
        seed: a.seed,
    };
    let ds = generate_synthetic(&cfg);
    save_dataset(&ds, &a.out)?;
    let mut input_digests = BTreeMap::new();
    add_digest(&mut input_digests, "config", a.config.as_ref())?;
    write_manifest(
        &a.out,
        &RunManifest {
            tool: "delst",
            version: env!("CARGO_PKG_VERSION"),
            command: "generate",
            seed: a.seed,
            config: serde_json::json!({
                "out": a.out.display().to_string(),
                "seed": a.seed,
                "n-slides": a.n_slides,
                "spots-per-slide": a.spots_per_slide,
                "n-genes": a.n_genes,
                "n-classes": a.n_classes,
                "feat-dim": a.feat_dim,
                "hierarchy-strength": a.hierarchy_strength,
            }),
            input_digests,
        },
    )?;
    println!(
        "wrote {} spots ({} slides, {} genes) to {}",
        ds.spots.len(),
        a.n_slides,
        a.n_genes,
        a.out.display()
    );
    Ok(())
}

fn cmd_select_genes(a: SelectGenesArgs) -> Result<(), CliError> {
    let ds = load_data(&a.data)?;
    let gene_count = a.gene_count.unwrap_or_else(|| a.strategy.default_gene_count());
    usage(gene_count >= 1, "--gene-count must be at least 1")?;
    let panel = select_hvg(&ds, a.strategy, gene_count)?;
    let mut text = serde_json::to_string_pretty(&panel).expect("panel serialization cannot fail");
    text.push('\n');
    write_output(&a.out, "panel.json", &text)?;
    let mut input_digests = dataset_digests(&a.data)?;
    add_digest(&mut input_digests, "config", a.config.as_ref())?;
    write_manifest(
        &a.out,
        &RunManifest {
            tool: "delst",
            version: env!("CARGO_PKG_VERSION"),
            command: "select-genes",
            seed: 0,
            config: serde_json::json!({
                "data": a.data.display().to_string(),
                "out": a.out.display().to_string(),
                "strategy": a.strategy.name(),
                "gene-count": gene_count,
            }),
            input_digests,
        },
    )?;
    println!("selected {} genes ({}) to {}", gene_count, a.strategy.name(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    usage(a.epochs >= 1, "--epochs must be at least 1")?;
    usage(a.batch_size >= 2, "--batch-size must be at least 2")?;
    usage(a.lr >= 0.0, "--lr must be nonnegative")?;
    usage(a.weight_decay >= 0.0, "--weight-decay must be nonnegative")?;
    usage(a.tau > 0.0, "--tau must be positive")?;
    usage(a.lambda >= 0.0 && a.beta >= 0.0, "--lambda and --beta must be nonnegative")?;
    usage(a.curvature > 0.0, "--curvature must be positive")?;
    usage(a.k_aper > 0.0, "--k-aper must be positive")?;
    usage(a.hidden >= 1 && a.embed_dim >= 1, "--hidden and --embed-dim must be at least 1")?;

    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        tau: a.tau,
        lambda: a.lambda,
        beta: a.beta,
        q: a.q,
        seed: a.seed,
        sim_mode: a.sim_mode,
        symmetric: a.symmetric,
        enable_cmel: !a.no_cmel,
        enable_imel: !a.no_imel,
        curvature: a.curvature,
        k_aper: a.k_aper,
    };
    usage(
        2 * cfg.resolved_q() <= cfg.batch_size,
        &format!(
            "--q {} needs 2q <= batch size, but batch size is {}",
            cfg.resolved_q(),
            cfg.batch_size
        ),
    )?;

    let ds = load_data(&a.data)?;
    let panel = match &a.panel {
        Some(p) => load_panel(p)?,
        None => {
            let gene_count = a.gene_count.unwrap_or_else(|| a.strategy.default_gene_count());
            usage(gene_count >= 1, "--gene-count must be at least 1")?;
            select_hvg(&ds, a.strategy, gene_count)?
        }
    };
    let dims = EncoderDims {
        gene_count: panel.gene_count,
        feat_dim: ds.feat_dim,
        hidden: a.hidden,
        n: a.embed_dim,
    };
    let start = match &a.resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            if ckpt.gene.gene_count != dims.gene_count
                || ckpt.gene.n != dims.n
                || ckpt.proj.feat_dim != dims.feat_dim
                || ckpt.proj.hidden != dims.hidden
            {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained with different dimensions",
                    p.display()
                )));
            }
            Some(ckpt)
        }
        None => None,
    };
    let result = train_with_start(&ds, &panel, &cfg, &dims, start)?;

    std::fs::create_dir_all(&a.out)
        .map_err(|e| io_data(&format!("cannot create {}", a.out.display()), e))?;
    let ckpt = Checkpoint {
        gene: result.gene,
        proj: result.proj,
        state: result.state,
        completed_epochs: a.epochs as u32,
        history: result.history.clone(),
    };
    checkpoint_save(&a.out.join("checkpoint.bin"), &ckpt)?;
    let mut panel_text =
        serde_json::to_string_pretty(&panel).expect("panel serialization cannot fail");
    panel_text.push('\n');
    write_output(&a.out, "panel.json", &panel_text)?;
    write_output(&a.out, "history.tsv", &history_to_tsv(&result.history))?;

    let mut input_digests = dataset_digests(&a.data)?;
    add_digest(&mut input_digests, "panel", a.panel.as_ref())?;
    add_digest(&mut input_digests, "resume", a.resume.as_ref())?;
    add_digest(&mut input_digests, "config", a.config.as_ref())?;
    write_manifest(
        &a.out,
        &RunManifest {
            tool: "delst",
            version: env!("CARGO_PKG_VERSION"),
            command: "train",
            seed: a.seed,
            config: serde_json::json!({
                "data": a.data.display().to_string(),
                "out": a.out.display().to_string(),
                "panel": a.panel.as_ref().map(|p| p.display().to_string()),
                "strategy": panel.strategy.name(),
                "gene-count": panel.gene_count,
                "resume": a.resume.as_ref().map(|p| p.display().to_string()),
                "epochs": a.epochs,
                "batch-size": a.batch_size,
                "lr": a.lr,
                "weight-decay": a.weight_decay,
                "tau": a.tau,
                "lambda": a.lambda,
                "beta": a.beta,
                "q": cfg.resolved_q(),
                "seed": a.seed,
                "sim-mode": a.sim_mode.name(),
                "symmetric": a.symmetric,
                "no-cmel": a.no_cmel,
                "no-imel": a.no_imel,
                "curvature": a.curvature,
                "k-aper": a.k_aper,
                "hidden": a.hidden,
                "embed-dim": a.embed_dim,
            }),
            input_digests,
        },
    )?;
    for r in &result.history {
        println!(
            "epoch {}: l_cont {:.6} l_ent_cross {:.6} l_ent_intra {:.6} l_final {:.6} violation_rate {:.4}",
            r.epoch, r.l_cont, r.l_ent_cross, r.l_ent_intra, r.l_final, r.violation_rate
        );
    }
    println!("wrote run to {}", a.out.display());
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> Result<(), CliError> {
    usage(a.curvature > 0.0, "--curvature must be positive")?;
    let ds = load_data(&a.data)?;
    let panel = load_panel(&a.panel)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    check_shapes(&ds, &panel, &ckpt.gene, &ckpt.proj)?;
    let e = embed_dataset(
        &ckpt.gene,
        &ckpt.proj,
        &ds,
        &panel,
        a.modality,
        a.components,
        Curvature::new(a.curvature),
    )?;
    let dim = e.rows[0].len();
    let mut tsv = String::from("spot_id\tlabel\tngec");
    for j in 0..dim {
        tsv.push_str(&format!("\te{j}"));
    }
    tsv.push('\n');
    for i in 0..e.rows.len() {
        tsv.push_str(&format!("{}\t{}\t{}", e.spot_ids[i], e.labels[i], e.ngec[i]));
        for v in &e.rows[i] {
            tsv.push_str(&format!("\t{v}"));
        }
        tsv.push('\n');
    }
    write_output(&a.out, "embeddings.tsv", &tsv)?;
    let mut input_digests = dataset_digests(&a.data)?;
    input_digests.insert("checkpoint".into(), sha256_hex(&a.checkpoint)?);
    input_digests.insert("panel".into(), sha256_hex(&a.panel)?);
    add_digest(&mut input_digests, "config", a.config.as_ref())?;
    write_manifest(
        &a.out,
        &RunManifest {
            tool: "delst",
            version: env!("CARGO_PKG_VERSION"),
            command: "embed",
            seed: 0,
            config: serde_json::json!({
                "data": a.data.display().to_string(),
                "checkpoint": a.checkpoint.display().to_string(),
                "panel": a.panel.display().to_string(),
                "out": a.out.display().to_string(),
                "modality": a.modality.to_string(),
                "components": a.components.to_string(),
                "curvature": a.curvature,
            }),
            input_digests,
        },
    )?;
    println!("wrote {}x{} embeddings to {}", e.rows.len(), dim, a.out.display());
    Ok(())
}

fn check_shapes(
    ds: &Dataset,
    panel: &GenePanel,
    gene: &GeneEncoder,
    proj: &ImageProjector,
) -> Result<(), CliError> {
    if panel.gene_count != gene.gene_count {
        return Err(CliError::Data(format!(
            "panel selects {} genes but the checkpoint encoder takes {}",
            panel.gene_count, gene.gene_count
        )));
    }
    if panel.n_total_genes != ds.n_genes() {
        return Err(CliError::Data(format!(
            "panel indexes {} total genes but the dataset has {}",
            panel.n_total_genes,
            ds.n_genes()
        )));
    }
    if proj.feat_dim != ds.feat_dim {
        return Err(CliError::Data(format!(
            "checkpoint projector takes {}-dim features but the dataset has {}-dim",
            proj.feat_dim, ds.feat_dim
        )));
    }
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<(), CliError> {
    usage(a.curvature > 0.0, "--curvature must be positive")?;
    usage(a.n_seeds >= 1, "--n-seeds must be at least 1")?;
    usage(a.probe_epochs >= 1, "--probe-epochs must be at least 1")?;
    usage(a.probe_lr > 0.0, "--probe-lr must be positive")?;
    let ds = load_data(&a.data)?;
    let panel = load_panel(&a.panel)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    check_shapes(&ds, &panel, &ckpt.gene, &ckpt.proj)?;
    let e = embed_dataset(
        &ckpt.gene,
        &ckpt.proj,
        &ds,
        &panel,
        a.modality,
        a.components,
        Curvature::new(a.curvature),
    )?;
    let n_classes = a
        .n_classes
        .unwrap_or_else(|| *e.labels.iter().max().expect("labeled spots exist") as usize + 1);
    let cfg = ProbeConfig {
        n_classes,
        n_seeds: a.n_seeds,
        epochs: a.probe_epochs,
        lr: a.probe_lr,
        patience: a.patience,
        base_seed: a.base_seed,
    };
    let report = linear_probe(&e.rows, &e.labels, &cfg)?;
    write_output(&a.out, "probe.tsv", &report.to_tsv())?;
    let mut input_digests = dataset_digests(&a.data)?;
    input_digests.insert("checkpoint".into(), sha256_hex(&a.checkpoint)?);
    input_digests.insert("panel".into(), sha256_hex(&a.panel)?);
    add_digest(&mut input_digests, "config", a.config.as_ref())?;
    write_manifest(
        &a.out,
        &RunManifest {
            tool: "delst",
            version: env!("CARGO_PKG_VERSION"),
            command: "probe",
            seed: a.base_seed,
            config: serde_json::json!({
                "data": a.data.display().to_string(),
                "checkpoint": a.checkpoint.display().to_string(),
                "panel": a.panel.display().to_string(),
                "out": a.out.display().to_string(),
                "modality": a.modality.to_string(),
                "components": a.components.to_string(),
                "curvature": a.curvature,
                "n-classes": n_classes,
                "n-seeds": a.n_seeds,
                "probe-epochs": a.probe_epochs,
                "probe-lr": a.probe_lr,
                "patience": a.patience,
                "base-seed": a.base_seed,
            }),
            input_digests,
        },
    )?;
    println!("{}", report.summary());
    Ok(())
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<(), CliError> {
    usage(a.curvature > 0.0, "--curvature must be positive")?;
    usage(a.k_aper > 0.0, "--k-aper must be positive")?;
    let ds = load_data(&a.data)?;
    let panel = load_panel(&a.panel)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    check_shapes(&ds, &panel, &ckpt.gene, &ckpt.proj)?;
    let report = hierarchy_diagnostics(
        &ckpt.gene,
        &ckpt.proj,
        &ds,
        &panel,
        ConeConstants::new(a.k_aper),
        Curvature::new(a.curvature),
    )?;
    let mut text = report.summary();
    text.push('\n');
    write_output(&a.out, "report.txt", &text)?;
    let mut input_digests = dataset_digests(&a.data)?;
    input_digests.insert("checkpoint".into(), sha256_hex(&a.checkpoint)?);
    input_digests.insert("panel".into(), sha256_hex(&a.panel)?);
    add_digest(&mut input_digests, "config", a.config.as_ref())?;
    write_manifest(
        &a.out,
        &RunManifest {
            tool: "delst",
            version: env!("CARGO_PKG_VERSION"),
            command: "diagnose",
            seed: 0,
            config: serde_json::json!({
                "data": a.data.display().to_string(),
                "checkpoint": a.checkpoint.display().to_string(),
                "panel": a.panel.display().to_string(),
                "out": a.out.display().to_string(),
                "curvature": a.curvature,
                "k-aper": a.k_aper,
            }),
            input_digests,
        },
    )?;
    println!("{}", report.summary());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    usage(a.batch_size >= 2, "--batch-size must be at least 2")?;
    usage(2 * a.q <= a.batch_size, "--q needs 2q <= batch size")?;
    usage(a.h > 0.0, "--h must be positive")?;
    usage(a.tolerance > 0.0, "--tolerance must be positive")?;
    usage(a.tau > 0.0, "--tau must be positive")?;
    usage(a.curvature > 0.0, "--curvature must be positive")?;
    usage(a.k_aper > 0.0, "--k-aper must be positive")?;
    let dims = EncoderDims {
        gene_count: a.gene_count,
        feat_dim: a.feat_dim,
        hidden: a.hidden,
        n: a.embed_dim,
    };
    let (gene, proj) = init_params(a.seed, &dims);
    let n = a.batch_size;
    let mut r = rng::stream(a.seed, 42);
    // Mixed-sign inputs spread embedding directions across the sphere,
    // keeping acos/asin arguments away from their saturation clamps where
    // the loss is intentionally non-smooth and finite differences are
    // meaningless. All-positive inputs concentrate directions and pin
    // exterior angles at the clamp.
    let x_gene: Vec<f64> = (0..n * dims.gene_count).map(|_| rng::gaussian(&mut r)).collect();
    let x_img: Vec<f64> = (0..n * dims.feat_dim).map(|_| rng::gaussian(&mut r)).collect();
    let ngec: Vec<u64> = (0..n).map(|_| rng::below(&mut r, 64) as u64).collect();
    let params: Vec<ParamBlock> = vec![
        (dims.gene_count, dims.n, gene.weight),
        (1, dims.n, gene.bias),
        (dims.feat_dim, dims.hidden, proj.w1),
        (1, dims.hidden, proj.b1),
        (dims.hidden, dims.n, proj.w2),
        (1, dims.n, proj.b2),
    ];
    let weights = LossWeights { lambda: a.lambda, beta: a.beta, tau: a.tau, q: a.q };
    let c = Curvature::new(a.curvature);
    let k = ConeConstants::new(a.k_aper);
    let (mode, symmetric) = (a.sim_mode, a.symmetric);
    let gc = dims.gene_count;
    let fd = dims.feat_dim;
    let build = move |tape: &mut Tape, leaves: &[Tensor]| {
        let gvars = encoders::diff::GeneEncoderVars { weight: leaves[0], bias: leaves[1] };
        let ivars = encoders::diff::ImageProjectorVars {
            w1: leaves[2],
            b1: leaves[3],
            w2: leaves[4],
            b2: leaves[5],
        };
        let xg = tape.leaf(n, gc, x_gene.clone(), false);
        let xi = tape.leaf(n, fd, x_img.clone(), false);
        let tg = encoders::diff::encode_gene_batch(tape, &gvars, xg);
        let ti = encoders::diff::encode_image_batch(tape, &ivars, xi);
        let lg = lorentz::diff::lift_batch(tape, tg, c);
        let li = lorentz::diff::lift_batch(tape, ti, c);
        losses::diff::final_loss(tape, &lg, &li, &ngec, &weights, mode, symmetric, k, c, true, true)
            .l_final
    };
    let report = if a.inject_grad_error {
        grad_check_injected(&build, &params, a.h, 1000.0)
    } else {
        grad_check(&build, &params, a.h)
    };
    let block_names = ["gene.weight", "gene.bias", "proj.w1", "proj.b1", "proj.w2", "proj.b2"];
    let text = format!(
        "checked {} coordinates (batch {}, q {})\nmax relative error {:.3e} at {}[{}] \
         (analytic {:.6e}, finite-difference {:.6e})\nmean relative error {:.3e}\ntolerance {:.1e}\n",
        report.n_coords,
        n,
        a.q,
        report.max_rel_err,
        block_names[report.worst_param],
        report.worst_coord,
        report.analytic_at_worst,
        report.fd_at_worst,
        report.mean_rel_err,
        a.tolerance,
    );
    print!("{text}");
    if let Some(out) = &a.out {
        write_output(out, "gradcheck.txt", &text)?;
        let mut input_digests = BTreeMap::new();
        add_digest(&mut input_digests, "config", a.config.as_ref())?;
        write_manifest(
            out,
            &RunManifest {
                tool: "delst",
                version: env!("CARGO_PKG_VERSION"),
                command: "gradcheck",
                seed: a.seed,
                config: serde_json::json!({
                    "seed": a.seed,
                    "batch-size": a.batch_size,
                    "q": a.q,
                    "tau": a.tau,
                    "lambda": a.lambda,
                    "beta": a.beta,
                    "gene-count": a.gene_count,
                    "feat-dim": a.feat_dim,
                    "hidden": a.hidden,
                    "embed-dim": a.embed_dim,
                    "h": a.h,
                    "tolerance": a.tolerance,
                    "sim-mode": a.sim_mode.name(),
                    "symmetric": a.symmetric,
                    "curvature": a.curvature,
                    "k-aper": a.k_aper,
                }),
                input_digests,
            },
        )?;
    }
    if report.max_rel_err <= a.tolerance {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {:.3e} exceeds tolerance {:.1e}",
            report.max_rel_err, a.tolerance
        )))
    }
}
