use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedack::data::{self, PartitionSpec, SynthSpec};
use fedack::experiment::{self, ExperimentConfig, SweepParam};
use fedack::lingual::{self, AlignConfig};
use fedack::server::RoundReport;

/// Federated bot-detection simulator.
#[derive(Parser)]
#[command(name = "fedack", version)]
struct Cli {
    /// Root for every relative output path (and fallback for inputs).
    #[arg(long, env = "FEDACK_OUT", default_value = "fedack-out", global = true)]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic user dataset as JSONL.
    GenData(GenDataArgs),
    /// Split a dataset across clients with a Dirichlet label skew.
    Partition(PartitionArgs),
    /// Train one method over every configured seed.
    Train(TrainArgs),
    /// Train over a grid of one hyperparameter.
    Sweep(SweepArgs),
    /// Write 2-D test-set features from each client's extractor.
    ExportFeatures(ExportArgs),
    /// Train the cross-lingual mapper on synthetic parallel embeddings.
    Align(AlignArgs),
    /// Score how consistent exported feature spaces are across clients.
    ScoreConsistency(ScoreArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 8)]
    prop_dim: usize,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0)]
    tweets_min: usize,
    #[arg(long, default_value_t = 6)]
    tweets_max: usize,
    #[arg(long, default_value_t = 3)]
    tokens_min: usize,
    #[arg(long, default_value_t = 10)]
    tokens_max: usize,
    #[arg(long, default_value_t = 2.0)]
    sep: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short, default_value = "users.jsonl")]
    output: PathBuf,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    clients: usize,
    #[arg(long, default_value_t = 0.1)]
    concentration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short, default_value = "partition.json")]
    output: PathBuf,
}

/// Flags layered over the JSON config (or the defaults).
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    /// Dataset JSONL; synthetic data is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    sep: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    concentration: Option<f64>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha_kd: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    prox_rho: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory name under the output root; defaults to the method.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// gamma, mu, tau or concentration.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    /// A seed directory written by `train` (holds config.json and round_*).
    #[arg(long)]
    run: PathBuf,
    /// Checkpointed round; defaults to the latest.
    #[arg(long)]
    round: Option<usize>,
    /// Client ids; defaults to that round's participants.
    #[arg(long, value_delimiter = ',')]
    clients: Option<Vec<usize>>,
    #[arg(long, short, default_value = "features.csv")]
    output: PathBuf,
}

#[derive(Args)]
struct AlignArgs {
    /// Load pairs from JSONL instead of generating them.
    #[arg(long)]
    pairs_file: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pairs: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    tokens: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    anchor_weight: f64,
    /// Start the mapper at the identity.
    #[arg(long)]
    identity_init: bool,
    /// Also write the generated pairs here.
    #[arg(long)]
    save_pairs: Option<PathBuf>,
    #[arg(long, short, default_value = "alignment.json")]
    output: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    features: PathBuf,
}

fn output_path(root: &Path, p: &Path) -> Result<PathBuf> {
    let path = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(path)
}

fn input_path(root: &Path, p: &Path) -> Result<PathBuf> {
    if p.exists() {
        return Ok(p.to_path_buf());
    }
    let under_root = root.join(p);
    if p.is_relative() && under_root.exists() {
        return Ok(under_root);
    }
    bail!("{} not found (also looked under {})", p.display(), root.display())
}

fn build_config(root: &Path, a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let p = input_path(root, p)?;
            serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &a.method {
        cfg.method = m.parse()?;
    }
    if let Some(p) = &a.data {
        cfg.dataset_path = Some(input_path(root, p)?);
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { cfg.$($field).+ = v; })*
        };
    }
    set!(
        users => synth.n_users,
        sep => synth.class_sep,
        data_seed => synth.seed,
        clients => partition.n_clients,
        concentration => partition.concentration,
        fraction => fraction,
        rounds => rounds,
        epochs => epochs,
        batch => batch,
        lr => learning_rate,
        alpha_kd => weights.alpha_kd,
        gamma => weights.gamma,
        mu => weights.mu,
        tau => weights.tau,
        prox_rho => prox_rho,
        feature_dim => feature_dim,
        seeds => seeds,
    );
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(root: &Path, a: &GenDataArgs) -> Result<()> {
    let spec = SynthSpec {
        n_users: a.users,
        prop_dim: a.prop_dim,
        embed_dim: a.embed_dim,
        tweets_range: (a.tweets_min, a.tweets_max),
        tokens_range: (a.tokens_min, a.tokens_max),
        class_sep: a.sep,
        seed: a.seed,
    };
    let ds = data::synth_dataset(&spec)?;
    let path = output_path(root, &a.output)?;
    data::save_jsonl(&ds, &path)?;
    let [h, b] = ds.class_counts();
    println!("wrote {} users ({h} human, {b} bot) to {}", ds.len(), path.display());
    Ok(())
}

fn partition(root: &Path, a: &PartitionArgs) -> Result<()> {
    let ds = data::load_jsonl(&input_path(root, &a.data)?)?;
    let spec = PartitionSpec {
        concentration: a.concentration,
        n_clients: a.clients,
        seed: a.seed,
    };
    let p = data::dirichlet_partition(&ds.labels(), &spec)?;
    let path = output_path(root, &a.output)?;
    data::save_partition(&p, &ds, &path)?;
    println!("client,human,bot");
    for (k, c) in p.stats.counts.iter().enumerate() {
        println!("{k},{},{}", c[0], c[1]);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn train(root: &Path, a: &TrainArgs) -> Result<()> {
    let cfg = build_config(root, &a.cfg)?;
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    let dir = output_path(root, Path::new(a.name.as_deref().unwrap_or(cfg.method.as_str())))?;
    let summary = experiment::train_all(&cfg, Some(&dir))?;
    for r in &summary.runs {
        let targets: Vec<String> = r.rounds_to_target.iter().map(|(t, v)| format!("{t}→{v}")).collect();
        println!(
            "seed {}: max {:.4} final {:.4} rounds-to-target [{}]",
            r.seed,
            r.max_accuracy,
            r.final_accuracy,
            targets.join(", ")
        );
    }
    println!(
        "{}: max accuracy {:.4} ± {:.4} over {} seeds; results in {}",
        summary.method,
        summary.mean_max_accuracy,
        summary.std_max_accuracy,
        summary.seeds.len(),
        dir.display()
    );
    Ok(())
}

fn sweep(root: &Path, a: &SweepArgs) -> Result<()> {
    let cfg = build_config(root, &a.cfg)?;
    let param: SweepParam = a.param.parse()?;
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    let name = a.name.clone().unwrap_or_else(|| format!("sweep_{}_{}", cfg.method, param.as_str()));
    let dir = output_path(root, Path::new(&name))?;
    let (_, points) = experiment::sweep(&cfg, param, &a.values, Some(&dir))?;
    println!("{},mean_max_accuracy,std_max_accuracy,runs", param.as_str());
    for p in &points {
        println!("{},{:.4},{:.4},{}", p.value, p.mean_max_accuracy, p.std_max_accuracy, p.runs);
    }
    println!("wrote {}", dir.join("sweep.csv").display());
    Ok(())
}

fn latest_round(run: &Path) -> Result<usize> {
    let mut best = None;
    for entry in fs::read_dir(run)? {
        let name = entry?.file_name();
        if let Some(t) = name.to_str().and_then(|n| n.strip_prefix("round_")).and_then(|t| t.parse::<usize>().ok()) {
            best = best.max(Some(t));
        }
    }
    best.with_context(|| format!("no round_* checkpoints in {}", run.display()))
}

fn export_features(root: &Path, a: &ExportArgs) -> Result<()> {
    let run = input_path(root, &a.run)?;
    let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(run.join("config.json")).context("reading config.json")?)?;
    let seed_dir = run.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let seed: u64 = seed_dir
        .strip_prefix("seed_")
        .and_then(|s| s.parse().ok())
        .with_context(|| format!("{} is not a seed_<n> run directory", run.display()))?;
    let round = match a.round {
        Some(r) => r,
        None => latest_round(&run)?,
    };
    let round_dir = run.join(format!("round_{round}"));
    let report: RoundReport = serde_json::from_str(&fs::read_to_string(round_dir.join("report.json"))?)?;
    let clients = a.clients.clone().unwrap_or(report.participants);
    if clients.is_empty() {
        bail!("no clients to export");
    }
    let (_, test, _) = experiment::prepare_data(&cfg, seed)?;
    let mut extractors = Vec::with_capacity(clients.len());
    let mut models = None;
    for &k in &clients {
        let path = round_dir.join("clients").join(format!("client_{k}_extractor.json"));
        let ckpt = experiment::read_checkpoint(&path).with_context(|| format!("reading {}", path.display()))?;
        models = Some(ckpt.config.clone());
        extractors.push((k, ckpt.params));
    }
    let models = models.expect("at least one client");
    let refs: Vec<_> = extractors.iter().map(|(k, p)| (*k, p)).collect();
    let rows = experiment::export_features(&models, &refs, &test)?;
    let path = output_path(root, &a.output)?;
    experiment::write_features_csv(&rows, &path)?;
    println!("wrote {} rows for clients {:?} to {}", rows.len(), clients, path.display());
    Ok(())
}

fn align(root: &Path, a: &AlignArgs) -> Result<()> {
    let pairs = match &a.pairs_file {
        Some(p) => lingual::load_pairs_jsonl(&input_path(root, p)?)?,
        None => lingual::synth_bilingual(a.pairs, a.dim, a.tokens, a.noise, a.seed)?,
    };
    if let Some(p) = &a.save_pairs {
        lingual::save_pairs_jsonl(&pairs, &output_path(root, p)?)?;
    }
    let dim = pairs.first().map_or(a.dim, |p| p.source.dim());
    let cfg = AlignConfig {
        dim,
        identity_init: a.identity_init,
        anchor_weight: a.anchor_weight,
        ..AlignConfig::default()
    };
    let (_, report) = lingual::train_alignment(&pairs, cfg, a.epochs, a.seed)?;
    let path = output_path(root, &a.output)?;
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "held-out cosine {:.4} → {:.4} after {} epochs; report in {}",
        report.initial_cosine,
        report.final_cosine,
        report.epochs,
        path.display()
    );
    Ok(())
}

fn score(root: &Path, a: &ScoreArgs) -> Result<()> {
    let rows = experiment::read_features_csv(&input_path(root, &a.features)?)?;
    println!("{}", experiment::feature_consistency_score(&rows)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(&cli.out, a),
        Command::Partition(a) => partition(&cli.out, a),
        Command::Train(a) => train(&cli.out, a),
        Command::Sweep(a) => sweep(&cli.out, a),
        Command::ExportFeatures(a) => export_features(&cli.out, a),
        Command::Align(a) => align(&cli.out, a),
        Command::ScoreConsistency(a) => score(&cli.out, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
