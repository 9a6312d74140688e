//! Staged command-line pipeline. Every command reads the config plus the
//! artifacts of earlier stages from the output directory, writes its own
//! artifacts and a manifest, and never touches upstream files.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hatesub_core::classifier::{summarize, FeatureMask, MetricSummary, Metrics, TrainedClassifier};
use hatesub_core::data::{
    load_annotations, load_embeddings, split_posts, Dataset, Schema, Split,
};
use hatesub_core::factor::{fit, rmse, FactorModel};
use hatesub_core::interaction::InteractionMatrix;
use hatesub_core::lattice::CombinationUniverse;
use hatesub_core::pipeline::{build_interactions, build_lattice, recoverability_report, Experiment};
use hatesub_core::synthetic::{
    generate, load_ground_truth, write_synthetic, ANNOTATIONS_FILE, EMBEDDINGS_FILE,
    GROUND_TRUTH_FILE, SCHEMA_FILE,
};

pub use config::{Overrides, PipelineConfig};

pub const UNIVERSE_FILE: &str = "universe.tsv";
pub const MATRIX_FILE: &str = "matrix.tsv";
pub const POSTS_FILE: &str = "posts.tsv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const HEADS_DIR: &str = "heads";
pub const LEVERAGE_FILE: &str = "leverage.tsv";
pub const CURVE_FILE: &str = "curve.csv";
pub const RECOVERABILITY_FILE: &str = "recoverability.json";
pub const PIPELINE_CONFIG_FILE: &str = "pipeline.toml";

#[derive(Debug, Parser)]
#[command(name = "hatesub", version, about = "Culture-aware hate-speech perception pipeline")]
pub struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config with this one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Comma-separated feature variants, each naming removed blocks
    /// (`hp`, `q`, `s`, `hp+s`) or `full`.
    #[arg(long, global = true)]
    pub mask: Option<String>,
    /// weighted | sum | mean | anno
    #[arg(long, global = true)]
    pub pooling: Option<String>,
    /// Comma-separated combination counts for the analysis curve.
    #[arg(long, global = true)]
    pub checkpoints: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build the combination universe and interaction matrix.
    Build,
    /// Fit the biased factorization.
    Factorize,
    /// Train classifier heads for every variant and seed.
    Train,
    /// Evaluate trained heads on the test split.
    Eval,
    /// Leverage ordering, reconstruction/accuracy curve, recoverability.
    Analyze,
    /// Write a synthetic dataset with planted effects.
    Generate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Build => "build",
            Command::Factorize => "factorize",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Analyze => "analyze",
            Command::Generate => "generate",
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
        mask: cli.mask.clone(),
        pooling: cli.pooling.clone(),
        checkpoints: cli.checkpoints.clone(),
    })?;
    run_command(cli.command, &cfg)
}

pub fn run_command(command: Command, cfg: &PipelineConfig) -> Result<()> {
    match command {
        Command::Build => cmd_build(cfg),
        Command::Factorize => cmd_factorize(cfg),
        Command::Train => cmd_train(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::Analyze => cmd_analyze(cfg),
        Command::Generate => cmd_generate(cfg),
    }
    .with_context(|| format!("`hatesub {}` failed", command.name()))
}

fn out(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.paths.out_dir.join(name)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Reads an artifact produced by `producer`, saying so when it is absent.
fn read_artifact(path: &Path, producer: &str) -> Result<String> {
    if !path.exists() {
        bail!(
            "missing {}; run `hatesub {producer}` first",
            path.display()
        );
    }
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Fails before any computation when inputs the config needs are absent.
fn check_inputs(cfg: &PipelineConfig) -> Result<()> {
    let need = |p: &Option<PathBuf>, key: &str| -> Result<()> {
        match p {
            None => bail!("paths.{key} is not set"),
            Some(p) if !p.exists() => bail!("paths.{key} does not exist: {}", p.display()),
            Some(_) => Ok(()),
        }
    };
    need(&cfg.paths.annotations, "annotations")?;
    need(&cfg.paths.schema, "schema")?;
    if cfg.needs_text()? {
        need(&cfg.paths.embeddings, "embeddings")
            .context("text embeddings are required while the s feature block is enabled")?;
    } else if let Some(p) = &cfg.paths.embeddings {
        if !p.exists() {
            bail!("paths.embeddings does not exist: {}", p.display());
        }
    }
    Ok(())
}

/// Loads annotations, embeddings and the split assignment.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    check_inputs(cfg)?;
    let schema = Schema::load(cfg.paths.schema.as_ref().expect("checked"))?;
    let mut dataset = load_annotations(cfg.paths.annotations.as_ref().expect("checked"), &schema)?;
    if let Some(p) = &cfg.paths.embeddings {
        dataset.attach_embeddings(&load_embeddings(p)?);
    }
    let fully_split = dataset
        .posts
        .iter()
        .all(|p| dataset.splits.contains_key(&p.post_id));
    if !fully_split {
        let [a, b, c] = cfg.data.split_ratios;
        dataset = split_posts(dataset, (a, b, c), cfg.data.split_seed)?;
    }
    Ok(dataset)
}

fn posts_listing(dataset: &Dataset) -> String {
    let mut s = String::new();
    for (j, p) in dataset.posts.iter().enumerate() {
        let split = dataset.split_of(&p.post_id).map_or("-", Split::as_str);
        writeln!(s, "{j}\t{}\t{split}", p.post_id).unwrap();
    }
    s
}

/// Dataset plus the universe written by `build`, checked against each other.
fn load_built(cfg: &PipelineConfig) -> Result<(Dataset, CombinationUniverse)> {
    let dataset = load_dataset(cfg)?;
    let listing = read_artifact(&out(cfg, POSTS_FILE), "build")?;
    if listing != posts_listing(&dataset) {
        bail!("posts or splits changed since the last `hatesub build`; rerun it");
    }
    let universe = CombinationUniverse::parse_manifest(
        &read_artifact(&out(cfg, UNIVERSE_FILE), "build")?,
        &dataset.users,
    )?;
    if universe.kind() != build_lattice(&dataset, &cfg.lattice_options()?).kind() {
        bail!("universe kind differs from the configured pooling; rerun `hatesub build`");
    }
    Ok((dataset, universe))
}

fn load_model(cfg: &PipelineConfig) -> Result<FactorModel> {
    let text = read_artifact(&out(cfg, MODEL_FILE), "factorize")?;
    Ok(FactorModel::parse_checkpoint(&text)?)
}

fn experiment(cfg: &PipelineConfig) -> Result<Experiment> {
    let (dataset, universe) = load_built(cfg)?;
    let matrix = InteractionMatrix::parse_triplets(&read_artifact(&out(cfg, MATRIX_FILE), "build")?)?;
    let model = load_model(cfg)?;
    Ok(Experiment::from_parts(dataset, universe, matrix, model, cfg.needs_text()?)?)
}

fn head_path(cfg: &PipelineConfig, mask: FeatureMask, seed: u64) -> PathBuf {
    out(cfg, HEADS_DIR).join(format!("{}_seed{seed}.json", mask.label()))
}

pub fn metrics_file(mask: FeatureMask) -> String {
    format!("metrics_{}.json", mask.label())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

/// `manifest_<command>.txt`: config hash, seeds and artifact checksums.
fn write_manifest(cfg: &PipelineConfig, command: Command, artifacts: &[PathBuf]) -> Result<()> {
    let mut m = String::new();
    writeln!(m, "command={}", command.name()).unwrap();
    writeln!(m, "config_sha256={}", sha256_hex(cfg.to_toml().as_bytes())).unwrap();
    let seeds: Vec<String> = cfg.classifier.seeds.iter().map(u64::to_string).collect();
    writeln!(m, "classifier_seeds={}", seeds.join(",")).unwrap();
    writeln!(m, "factorization_seed={}", cfg.factorization.seed).unwrap();
    writeln!(m, "split_seed={}", cfg.data.split_seed).unwrap();
    for path in artifacts {
        let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        let name = path.strip_prefix(&cfg.paths.out_dir).unwrap_or(path);
        writeln!(m, "{}  {}", sha256_hex(&bytes), name.display()).unwrap();
    }
    write(&out(cfg, &format!("manifest_{}.txt", command.name())), &m)
}

pub fn cmd_build(cfg: &PipelineConfig) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let universe = build_lattice(&dataset, &cfg.lattice_options()?);
    let matrix = build_interactions(&dataset, &universe, &cfg.matrix)?;
    let files = [
        (out(cfg, UNIVERSE_FILE), universe.to_manifest()),
        (out(cfg, MATRIX_FILE), matrix.to_triplets()),
        (out(cfg, POSTS_FILE), posts_listing(&dataset)),
    ];
    for (path, text) in &files {
        write(path, text)?;
    }
    println!("z={} m={} nnz={}", matrix.z(), matrix.m(), matrix.nnz());
    write_manifest(cfg, Command::Build, &files.map(|(p, _)| p))
}

pub fn cmd_factorize(cfg: &PipelineConfig) -> Result<()> {
    let (dataset, universe) = load_built(cfg)?;
    let matrix = InteractionMatrix::parse_triplets(&read_artifact(&out(cfg, MATRIX_FILE), "build")?)?;
    if matrix.z() != universe.z() || matrix.m() != dataset.posts.len() {
        bail!("matrix shape disagrees with the universe or posts; rerun `hatesub build`");
    }
    let model = fit(&matrix, &cfg.factorization)?;
    let path = out(cfg, MODEL_FILE);
    write(&path, &model.to_checkpoint())?;
    println!("rmse={:.6} mu={:.6}", rmse(&model, &matrix), model.mu);
    write_manifest(cfg, Command::Factorize, &[path])
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<()> {
    let exp = experiment(cfg)?;
    let mut written = Vec::new();
    for mask in cfg.variants()? {
        for &seed in &cfg.classifier.seeds {
            let classifier = exp.train(&cfg.classifier_config(mask, seed)?)?;
            let path = head_path(cfg, mask, seed);
            let json = serde_json::to_string(&classifier)?;
            write(&path, &json)?;
            log::info!("trained {} seed {seed}", mask.label());
            written.push(path);
        }
    }
    write_manifest(cfg, Command::Train, &written)
}

/// Per-seed metrics plus their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub runs: Vec<SeedMetrics>,
    pub summary: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    #[serde(flatten)]
    pub metrics: Metrics,
    pub seed: u64,
}

pub fn cmd_eval(cfg: &PipelineConfig) -> Result<()> {
    let exp = experiment(cfg)?;
    let mut written = Vec::new();
    for mask in cfg.variants()? {
        let mut runs = Vec::new();
        for &seed in &cfg.classifier.seeds {
            let text = read_artifact(&head_path(cfg, mask, seed), "train")?;
            let classifier: TrainedClassifier = serde_json::from_str(&text)?;
            if classifier.head.layout.mask != mask {
                bail!("head for {} was trained with another mask; rerun `hatesub train`", mask.label());
            }
            let config = cfg.classifier_config(mask, seed)?;
            let metrics = exp.evaluate(&classifier, Split::Test, &config)?;
            runs.push(SeedMetrics { metrics, seed });
        }
        let summary = summarize(&runs.iter().map(|r| r.metrics).collect::<Vec<_>>());
        println!(
            "{}: accuracy {:.4}±{:.4} precision {:.4}±{:.4} recall {:.4}±{:.4} f1 {:.4}±{:.4}",
            mask.label(),
            summary.accuracy.0,
            summary.accuracy.1,
            summary.precision.0,
            summary.precision.1,
            summary.recall.0,
            summary.recall.1,
            summary.f1.0,
            summary.f1.1,
        );
        let report = MetricsReport {
            variant: mask.label(),
            runs,
            summary,
        };
        let path = out(cfg, &metrics_file(mask));
        write(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
        written.push(path);
    }
    write_manifest(cfg, Command::Eval, &written)
}

pub fn cmd_analyze(cfg: &PipelineConfig) -> Result<()> {
    let exp = experiment(cfg)?;
    let ordering = exp.global_ordering()?;
    let mut lev = String::from("rank\tindex\tscore\tcombination\n");
    for (rank, (l, score)) in ordering.iter().enumerate() {
        let combo = exp.universe.combination(*l).expect("index from universe");
        writeln!(lev, "{}\t{l}\t{score:.12e}\t{}", rank + 1, combo.to_manifest_string()).unwrap();
    }
    let lev_path = out(cfg, LEVERAGE_FILE);
    write(&lev_path, &lev)?;

    let mask = cfg.variants()?[0];
    let seed = cfg.classifier.seeds[0];
    let indices: Vec<usize> = ordering.iter().map(|&(l, _)| l).collect();
    let points = exp.accumulate_performance(
        &indices,
        &cfg.analysis.checkpoints,
        &cfg.classifier_config(mask, seed)?,
    )?;
    let mut csv = String::from("count,frobenius_error,accuracy,precision,recall,f1\n");
    for p in &points {
        writeln!(
            csv,
            "{},{:.12e},{:.6},{:.6},{:.6},{:.6}",
            p.count,
            p.frobenius_error,
            p.metrics.accuracy,
            p.metrics.precision,
            p.metrics.recall,
            p.metrics.f1
        )
        .unwrap();
    }
    let curve_path = out(cfg, CURVE_FILE);
    write(&curve_path, &csv)?;
    let mut written = vec![lev_path, curve_path];

    if let Some(gt) = &cfg.paths.ground_truth {
        let truth = load_ground_truth(gt)?;
        let config = cfg.classifier_config(mask, seed)?;
        let report = recoverability_report(&exp, &truth, &config, &cfg.classifier.seeds)?;
        for p in &report.planted {
            match p.rank {
                Some(r) => println!("planted {} (effect {}): rank {r} of {}", p.combination, p.effect, report.universe_size),
                None => println!("planted {} (effect {}): absent from universe", p.combination, p.effect),
            }
        }
        println!(
            "accuracy full {:.4} vs no-hp {:.4}: lift {:.2} points",
            report.mean_full_accuracy, report.mean_no_hp_accuracy, report.lift_points
        );
        let path = out(cfg, RECOVERABILITY_FILE);
        write(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
        written.push(path);
    }
    write_manifest(cfg, Command::Analyze, &written)
}

pub fn cmd_generate(cfg: &PipelineConfig) -> Result<()> {
    let dir = &cfg.paths.out_dir;
    let (dataset, truth) = generate(&cfg.generate)?;
    write_synthetic(dir, &dataset, &truth)?;

    // A ready-to-use config pointing at the generated files.
    let mut next = cfg.clone();
    next.paths.annotations = Some(ANNOTATIONS_FILE.into());
    next.paths.schema = Some(SCHEMA_FILE.into());
    next.paths.embeddings = Some(EMBEDDINGS_FILE.into());
    next.paths.ground_truth = Some(GROUND_TRUTH_FILE.into());
    next.paths.out_dir = PathBuf::from("run");
    let cfg_path = dir.join(PIPELINE_CONFIG_FILE);
    write(&cfg_path, &next.to_toml())?;

    println!(
        "users={} posts={} annotations={} -> {}",
        dataset.users.len(),
        dataset.posts.len(),
        dataset.annotations.len(),
        dir.display()
    );
    let artifacts: Vec<PathBuf> = [ANNOTATIONS_FILE, SCHEMA_FILE, EMBEDDINGS_FILE, GROUND_TRUTH_FILE]
        .iter()
        .map(|f| dir.join(f))
        .chain([cfg_path])
        .collect();
    write_manifest(cfg, Command::Generate, &artifacts)
}

/// Parses `args` as a command line and runs it.
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| anyhow!(e.to_string()))?;
    run(&cli)
}
