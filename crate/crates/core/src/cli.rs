//! Command-line front end. Every command reads one JSON [`RunConfig`],
//! optionally overridden by flags, and writes its outputs atomically under
//! the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{ArgGroup, Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_pgm, Corpus};
use crate::diffusion::{
    train, Checkpoint, DenoiserConfig, NoiseSchedule, SampleOptions, ScheduleParams, TrainConfig,
};
use crate::filters::{ContentFilter, MemorizationFilter, MemorizationParams};
use crate::metrics::{
    drift, histogram, histogram_csv, drift_csv, mean_cross_label_distance, uniform_edges,
    DistanceHistogram, DriftRow, EmbeddingExtractor,
};
use crate::numerics::Tensor;
use crate::pipeline::{
    baseline_image, generate_guarded, read_audit, write_audit, GenerationRecord, GenerationRequest,
    GenerationStatus, GuardConfig, Sampler,
};
use crate::steering::{refine_latent, AnchorSets};

/// Failure classes, mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Amplification {
    pub id: String,
    pub factor: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "yes")]
    pub clip_x0: bool,
}

fn default_substeps() -> usize {
    20
}

fn yes() -> bool {
    true
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { substeps: default_substeps(), clip_x0: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_bins() -> usize {
    20
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { bins: default_bins() }
    }
}

/// Everything one experiment needs. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    /// Defaults to `<output>/checkpoint`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub amplify: Vec<Amplification>,
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleParams,
    /// Defaults to the toy MLP for `train.condition_count` conditions.
    #[serde(default)]
    pub architecture: Option<DenoiserConfig>,
    #[serde(default)]
    pub sampling: SamplingConfig,
    /// Defaults to the image-size-derived tiling with τ = 0.1.
    #[serde(default)]
    pub filter: Option<MemorizationParams>,
    #[serde(default)]
    pub guard: GuardConfig,
    /// Defaults to every real condition.
    #[serde(default)]
    pub conditions: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub audit: AuditConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output);
        if let Some(c) = self.checkpoint.as_mut() {
            fix(c);
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output.join("checkpoint"))
    }

    pub fn architecture(&self) -> DenoiserConfig {
        self.architecture.clone().unwrap_or_else(|| {
            let mut a = DenoiserConfig::toy(self.train.condition_count);
            a.image_len = self.train.width * self.train.height;
            a
        })
    }

    pub fn filter_params(&self) -> MemorizationParams {
        self.filter
            .unwrap_or_else(|| MemorizationParams::for_image(self.train.height, self.train.width))
    }

    pub fn conditions(&self) -> Vec<usize> {
        if self.conditions.is_empty() {
            (0..self.train.condition_count).collect()
        } else {
            self.conditions.clone()
        }
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions { clip_x0: self.sampling.clip_x0 }
    }

    /// Checks that need no files.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.seeds.is_empty() {
            return usage("seed list is empty".into());
        }
        if let Some(c) = self.conditions().iter().find(|&&c| c > self.train.condition_count) {
            return usage(format!("condition {c} outside vocabulary of {}", self.train.condition_count));
        }
        let steps = self.schedule.steps;
        if self.sampling.substeps == 0 || steps % self.sampling.substeps != 0 {
            return usage(format!("substeps {} must divide {steps}", self.sampling.substeps));
        }
        if self.audit.bins == 0 {
            return usage("audit.bins must be positive".into());
        }
        let arch = self.architecture();
        if arch.image_len != self.train.width * self.train.height
            || arch.cond_count != self.train.condition_count
        {
            return usage("architecture does not match train extents or condition count".into());
        }
        self.guard.strategy.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.guard.steering.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        NoiseSchedule::linear(self.schedule).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }
}

/// Parses `1,2,5-8` into `[1, 2, 5, 6, 7, 8]`.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|e| format!("{part}: {e}"))?;
                let b: u64 = b.trim().parse().map_err(|e| format!("{part}: {e}"))?;
                if a > b {
                    return Err(format!("{part}: empty range"));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|e| format!("{part}: {e}"))?),
        }
    }
    if out.is_empty() {
        return Err("empty seed list".into());
    }
    Ok(out)
}

/// A parsed `--seed` value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seed_arg(s: &str) -> Result<SeedList, String> {
    parse_seed_list(s).map(SeedList)
}

#[derive(Debug, Parser)]
#[command(name = "latentguard", version, about = "Memorization guard for toy diffusion models")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed list override, e.g. `0-9` or `1,4,7`.
    #[arg(long, global = true, value_parser = parse_seed_arg)]
    pub seed: Option<SeedList>,
    /// Worker threads for per-seed work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory override.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the denoiser and write a checkpoint plus a loss CSV.
    Train,
    /// Sample one image per (condition, seed).
    Generate(GenerateArgs),
    /// Refine a latent away from (or toward) anchor latents.
    Steer(SteerArgs),
    /// DDIM-invert an image, or every corpus image with a round-trip report.
    Invert(InvertArgs),
    /// Score generations and emit histogram, drift and summary files.
    Audit,
    /// Print a plain-text digest of the audit summary.
    Report,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["guarded", "baseline"])))]
pub struct GenerateArgs {
    #[arg(long)]
    pub guarded: bool,
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct SteerArgs {
    /// Starting latent (LSTN).
    #[arg(long)]
    pub latent: PathBuf,
    /// Latents to push away from.
    #[arg(long, num_args = 1..)]
    pub undesired: Vec<PathBuf>,
    /// Latents to pull toward.
    #[arg(long, num_args = 1..)]
    pub desired: Vec<PathBuf>,
    /// Also sample the refined latent under this condition.
    #[arg(long)]
    pub condition: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    /// PGM image to invert; inverts the whole corpus when absent.
    #[arg(long, requires = "condition")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub condition: Option<usize>,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(SeedList(seeds)) = cli.seed {
        cfg.seeds = seeds;
    }
    if let Some(out) = cli.out {
        cfg.output = out;
    }
    cfg.validate()?;
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(runtime)?;
    pool.install(|| match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Generate(a) => cmd_generate(&cfg, a.guarded),
        Command::Steer(a) => cmd_steer(&cfg, &a),
        Command::Invert(a) => cmd_invert(&cfg, &a),
        Command::Audit => cmd_audit(&cfg),
        Command::Report => cmd_report(&cfg),
    })
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    tmp.write_all(bytes).map_err(runtime)?;
    tmp.persist(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    write_atomic(path, (text + "\n").as_bytes())
}

fn write_image(stem: &Path, image: &Tensor) -> Result<(), CliError> {
    write_atomic(&stem.with_extension("lstn"), &image.to_lstn_bytes())?;
    let pgm = crate::corpus::encode_pgm(image).map_err(runtime)?;
    write_atomic(&stem.with_extension("pgm"), &pgm)
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    if !cfg.corpus.exists() {
        return Err(CliError::Usage(format!("corpus manifest {} not found", cfg.corpus.display())));
    }
    let mut corpus = Corpus::load(&cfg.corpus).map_err(runtime)?;
    for a in &cfg.amplify {
        corpus = corpus.amplify(&a.id, a.factor).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if (corpus.width(), corpus.height()) != (cfg.train.width, cfg.train.height) {
        return Err(CliError::Usage(format!(
            "corpus is {}x{}, config says {}x{}",
            corpus.width(),
            corpus.height(),
            cfg.train.width,
            cfg.train.height
        )));
    }
    Ok(corpus)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let dir = cfg.checkpoint_dir();
    let ck = Checkpoint::load(&dir).map_err(runtime)?;
    if *ck.model.config() != cfg.architecture() {
        return Err(runtime(format!(
            "checkpoint {} architecture does not match the config",
            dir.display()
        )));
    }
    Ok(ck)
}

fn read_latent(path: &Path) -> Result<Tensor, CliError> {
    let bytes = fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Tensor::from_lstn_bytes(&bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn image_stem(dir: &Path, cond: usize, seed: u64) -> PathBuf {
    dir.join(format!("c{cond}_s{seed}"))
}

fn requests(cfg: &RunConfig) -> Vec<GenerationRequest> {
    let mut out = Vec::new();
    for cond in cfg.conditions() {
        for &seed in &cfg.seeds {
            out.push(GenerationRequest { condition: cond, seed, substeps: cfg.sampling.substeps });
        }
    }
    out
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(cfg)?;
    cfg.train.validate(&corpus).map_err(|e| CliError::Usage(e.to_string()))?;
    let sched = NoiseSchedule::linear(cfg.schedule).map_err(runtime)?;
    let report_every = (cfg.train.epochs / 10).max(1);
    let (model, history) = train(&corpus, &cfg.train, cfg.architecture(), &sched, |e| {
        if (e.epoch + 1) % report_every == 0 {
            eprintln!("epoch {} loss {:.5}", e.epoch + 1, e.loss);
        }
    })
    .map_err(runtime)?;

    let mut csv = String::from("epoch,loss\n");
    for e in &history {
        csv += &format!("{},{}\n", e.epoch, e.loss);
    }
    write_atomic(&cfg.output.join("train_loss.csv"), csv.as_bytes())?;

    let ck = Checkpoint {
        model,
        schedule: sched,
        train_seed: cfg.train.seed,
        corpus_hash: corpus.hash().to_string(),
    };
    let target = cfg.checkpoint_dir();
    let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(runtime)?;
    let staging = tempfile::Builder::new()
        .prefix(".checkpoint")
        .tempdir_in(parent)
        .map_err(runtime)?;
    ck.save(staging.path()).map_err(runtime)?;
    if target.exists() {
        fs::remove_dir_all(&target).map_err(runtime)?;
    }
    fs::rename(staging.keep(), &target).map_err(runtime)?;
    let final_loss = history.last().map_or(f32::NAN, |e| e.loss);
    println!("trained {} epochs, final loss {final_loss:.5}, checkpoint {}", history.len(), target.display());
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig, guarded: bool) -> Result<(), CliError> {
    let ck = load_checkpoint(cfg)?;
    let corpus = Arc::new(load_corpus(cfg)?);
    let sampler = Sampler::new(&ck.model, &ck.schedule, cfg.train.height, cfg.train.width, cfg.sample_options())
        .map_err(runtime)?;
    let reqs = requests(cfg);
    if !guarded {
        let images = reqs
            .par_iter()
            .map(|r| baseline_image(r, &sampler))
            .collect::<Result<Vec<_>, _>>()
            .map_err(runtime)?;
        let dir = cfg.output.join("baseline");
        for (r, im) in reqs.iter().zip(&images) {
            write_image(&image_stem(&dir, r.condition, r.seed), im)?;
        }
        println!("wrote {} baseline images to {}", images.len(), dir.display());
        return Ok(());
    }

    let filter = MemorizationFilter::new(cfg.filter_params(), corpus).map_err(|e| CliError::Usage(e.to_string()))?;
    let filters: [&dyn ContentFilter; 1] = [&filter];
    let records = reqs
        .par_iter()
        .map(|r| generate_guarded(r, &sampler, &filters, &cfg.guard))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    let dir = cfg.output.join("guarded");
    for rec in records.iter().filter(|r| r.accepted()) {
        write_image(&image_stem(&dir, rec.request.condition, rec.request.seed), rec.final_image())?;
    }
    let mut log = Vec::new();
    write_audit(&mut log, &records).map_err(runtime)?;
    write_atomic(&dir.join("audit.jsonl"), &log)?;
    let mut counts = BTreeMap::new();
    for r in &records {
        *counts.entry(status_name(r.status)).or_insert(0usize) += 1;
    }
    println!("wrote {} guarded records to {}: {counts:?}", records.len(), dir.display());
    Ok(())
}

fn status_name(s: GenerationStatus) -> &'static str {
    match s {
        GenerationStatus::CleanUnmodified => "clean_unmodified",
        GenerationStatus::CleanSteered => "clean_steered",
        GenerationStatus::FailedAfterBudget => "failed_after_budget",
    }
}

pub fn cmd_steer(cfg: &RunConfig, args: &SteerArgs) -> Result<(), CliError> {
    let l0 = read_latent(&args.latent)?;
    let load = |ps: &[PathBuf]| ps.iter().map(|p| read_latent(p)).collect::<Result<Vec<_>, _>>();
    let anchors = AnchorSets::new(load(&args.desired)?, load(&args.undesired)?);
    if anchors.is_empty() {
        return Err(CliError::Usage("steer needs at least one --undesired or --desired latent".into()));
    }
    let result = refine_latent(&l0, &anchors, &cfg.guard.steering).map_err(runtime)?;
    let dir = cfg.output.join("steer");
    write_atomic(&dir.join("latent.lstn"), &result.latent.to_lstn_bytes())?;
    let mut csv = String::from("iteration,objective,undesired_similarity\n");
    for (i, (o, u)) in result.objective_trace.iter().zip(&result.undesired_trace).enumerate() {
        csv += &format!("{i},{o},{u}\n");
    }
    write_atomic(&dir.join("trace.csv"), csv.as_bytes())?;
    if let Some(cond) = args.condition {
        let ck = load_checkpoint(cfg)?;
        let sampler = Sampler::new(&ck.model, &ck.schedule, cfg.train.height, cfg.train.width, cfg.sample_options())
            .map_err(runtime)?;
        ck.model.check_cond(cond).map_err(|e| CliError::Usage(e.to_string()))?;
        let image = sampler.sample(&result.latent, cond, cfg.sampling.substeps).map_err(runtime)?;
        write_image(&dir.join("image"), &image)?;
    }
    println!("steered latent moved {:.5}, written to {}", result.displacement, dir.display());
    Ok(())
}

pub fn cmd_invert(cfg: &RunConfig, args: &InvertArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(cfg)?;
    let sampler = Sampler::new(&ck.model, &ck.schedule, cfg.train.height, cfg.train.width, cfg.sample_options())
        .map_err(runtime)?;
    let substeps = cfg.sampling.substeps;
    let dir = cfg.output.join("invert");
    if let Some(path) = &args.image {
        let cond = args.condition.expect("clap enforces --condition");
        ck.model.check_cond(cond).map_err(|e| CliError::Usage(e.to_string()))?;
        let image = read_pgm(path).map_err(runtime)?;
        let z = sampler.invert(&image, cond, substeps).map_err(runtime)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        write_atomic(&dir.join(format!("{stem}.lstn")), &z.to_lstn_bytes())?;
        println!("inverted {} to {}", path.display(), dir.join(format!("{stem}.lstn")).display());
        return Ok(());
    }
    let corpus = load_corpus(cfg)?;
    let rows = corpus
        .records()
        .par_iter()
        .map(|r| {
            let z = sampler.invert(&r.pixels, r.condition, substeps)?;
            let back = sampler.sample(&z, r.condition, substeps)?;
            let mae = back
                .data()
                .iter()
                .zip(r.pixels.data())
                .map(|(a, b)| f64::from((a - b).abs()))
                .sum::<f64>()
                / back.len() as f64;
            Ok((r.id.clone(), r.condition, z, mae))
        })
        .collect::<Result<Vec<_>, crate::pipeline::PipelineError>>()
        .map_err(runtime)?;
    let mut csv = String::from("id,condition,mae\n");
    for (id, cond, z, mae) in &rows {
        write_atomic(&dir.join(format!("{id}.lstn")), &z.to_lstn_bytes())?;
        csv += &format!("{id},{cond},{mae}\n");
    }
    write_atomic(&dir.join("roundtrip.csv"), csv.as_bytes())?;
    let worst = rows.iter().map(|r| r.3).fold(0.0, f64::max);
    println!("inverted {} corpus images, worst round-trip MAE {worst:.5}", rows.len());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSummary {
    pub count: usize,
    pub min_score: Option<f32>,
    pub below_threshold: usize,
    pub fraction_above_threshold: Option<f64>,
}

impl ScoreSummary {
    fn of(scores: &[f32], threshold: f32) -> Self {
        let below = scores.iter().filter(|&&s| s < threshold).count();
        Self {
            count: scores.len(),
            min_score: scores.iter().copied().reduce(f32::min),
            below_threshold: below,
            fraction_above_threshold: (!scores.is_empty())
                .then(|| (scores.len() - below) as f64 / scores.len() as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSummary {
    pub pairs: usize,
    pub mean_cosine: f64,
    pub mean_distance: f64,
    pub mean_displacement_2d: f64,
}

/// The `summary.json` written by `audit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSummary {
    pub threshold: f32,
    pub conditions: Vec<usize>,
    pub seeds: Vec<u64>,
    pub status_counts: BTreeMap<String, usize>,
    pub baseline: ScoreSummary,
    /// Final images of guarded records that were not rejected.
    pub accepted: ScoreSummary,
    pub drift: DriftSummary,
    /// Mean embedding distance between baselines of different conditions.
    pub mean_cross_condition_distance: Option<f64>,
    pub baseline_histogram: DistanceHistogram,
    pub accepted_histogram: DistanceHistogram,
}

pub fn cmd_audit(cfg: &RunConfig) -> Result<(), CliError> {
    let base_dir = cfg.output.join("baseline");
    let guard_dir = cfg.output.join("guarded");
    let audit_path = guard_dir.join("audit.jsonl");
    let reqs = requests(cfg);
    let mut missing: Vec<PathBuf> = reqs
        .iter()
        .map(|r| image_stem(&base_dir, r.condition, r.seed).with_extension("lstn"))
        .filter(|p| !p.exists())
        .collect();
    if !audit_path.exists() {
        missing.push(audit_path.clone());
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(runtime(format!("missing audit inputs: {}", list.join(", "))));
    }

    let ck = load_checkpoint(cfg)?;
    let corpus = Arc::new(load_corpus(cfg)?);
    let filter = MemorizationFilter::new(cfg.filter_params(), corpus.clone())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let tau = filter.params().threshold;
    let file = fs::File::open(&audit_path).map_err(runtime)?;
    let records = read_audit(std::io::BufReader::new(file)).map_err(runtime)?;
    let by_key: BTreeMap<(usize, u64), &GenerationRecord> =
        records.iter().map(|r| ((r.request.condition, r.request.seed), r)).collect();
    if let Some(r) = reqs.iter().find(|r| !by_key.contains_key(&(r.condition, r.seed))) {
        return Err(runtime(format!(
            "{} has no record for condition {} seed {}",
            audit_path.display(),
            r.condition,
            r.seed
        )));
    }

    let baselines = reqs
        .iter()
        .map(|r| read_latent(&image_stem(&base_dir, r.condition, r.seed).with_extension("lstn")))
        .collect::<Result<Vec<_>, _>>()?;
    let base_scores = baselines
        .par_iter()
        .map(|im| filter.scan(im).map(|v| v.score))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    let accepted: Vec<&GenerationRecord> =
        reqs.iter().map(|r| by_key[&(r.condition, r.seed)]).filter(|r| r.accepted()).collect();
    let accepted_scores = accepted
        .par_iter()
        .map(|r| filter.scan(r.final_image()).map(|v| v.score))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;

    let mut extractor = EmbeddingExtractor::new(ck.schedule.steps());
    let refs: Vec<Tensor> = corpus.records().iter().map(|r| r.pixels.clone()).collect();
    extractor.fit(&ck.model, &refs).map_err(runtime)?;
    let base_feats = baselines
        .par_iter()
        .map(|im| extractor.embed(&ck.model, im))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    let feature_of: BTreeMap<(usize, u64), &Vec<f32>> =
        reqs.iter().map(|r| (r.condition, r.seed)).zip(&base_feats).collect();

    let steered: Vec<&GenerationRecord> = reqs
        .iter()
        .map(|r| by_key[&(r.condition, r.seed)])
        .filter(|r| r.status == GenerationStatus::CleanSteered)
        .collect();
    let steered_feats = steered
        .par_iter()
        .map(|r| extractor.embed(&ck.model, r.final_image()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    let paired_base: Vec<Vec<f32>> = steered
        .iter()
        .map(|r| feature_of[&(r.request.condition, r.request.seed)].clone())
        .collect();
    let basis = extractor.basis().map_err(runtime)?;
    let report = drift(&paired_base, &steered_feats, basis).map_err(runtime)?;
    let rows: Vec<DriftRow> = steered
        .iter()
        .zip(&report.pairs)
        .map(|(r, p)| {
            Ok(DriftRow {
                condition: r.request.condition,
                seed: r.request.seed,
                pair: p.clone(),
                tiled_l2: filter.scan(r.final_image())?.score,
            })
        })
        .collect::<Result<Vec<_>, crate::filters::FilterError>>()
        .map_err(runtime)?;

    let labelled: Vec<(usize, Vec<f32>)> =
        reqs.iter().map(|r| r.condition).zip(base_feats.iter().cloned()).collect();
    let edges = uniform_edges(0.0, 1.0, cfg.audit.bins);
    let to64 = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
    let baseline_histogram = histogram(&to64(&base_scores), &edges, f64::from(tau)).map_err(runtime)?;
    let accepted_histogram = histogram(&to64(&accepted_scores), &edges, f64::from(tau)).map_err(runtime)?;

    let mut status_counts: BTreeMap<String, usize> = [
        GenerationStatus::CleanUnmodified,
        GenerationStatus::CleanSteered,
        GenerationStatus::FailedAfterBudget,
    ]
    .iter()
    .map(|s| (status_name(*s).to_string(), 0))
    .collect();
    for r in reqs.iter().map(|r| by_key[&(r.condition, r.seed)]) {
        *status_counts.get_mut(status_name(r.status)).expect("all statuses present") += 1;
    }

    let summary = AuditSummary {
        threshold: tau,
        conditions: cfg.conditions(),
        seeds: cfg.seeds.clone(),
        status_counts,
        baseline: ScoreSummary::of(&base_scores, tau),
        accepted: ScoreSummary::of(&accepted_scores, tau),
        drift: DriftSummary {
            pairs: report.pairs.len(),
            mean_cosine: report.mean_cosine,
            mean_distance: report.mean_distance,
            mean_displacement_2d: report.mean_displacement,
        },
        mean_cross_condition_distance: mean_cross_label_distance(&labelled),
        baseline_histogram,
        accepted_histogram,
    };

    let dir = cfg.output.join("audit");
    write_atomic(&dir.join("histogram_baseline.csv"), histogram_csv(&summary.baseline_histogram).as_bytes())?;
    write_atomic(&dir.join("histogram_accepted.csv"), histogram_csv(&summary.accepted_histogram).as_bytes())?;
    write_atomic(&dir.join("drift.csv"), drift_csv(&rows).as_bytes())?;
    write_json(&dir.join("drift.json"), &report)?;
    write_json(&dir.join("extractor.json"), &extractor)?;
    write_json(&dir.join("summary.json"), &summary)?;
    println!("{}", report_text(&summary));
    Ok(())
}

/// Human-readable digest of an audit summary.
pub fn report_text(s: &AuditSummary) -> String {
    let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    let fmt_opt32 = |v: Option<f32>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    let mut out = String::new();
    out += &format!("threshold {}\n", s.threshold);
    for (k, v) in &s.status_counts {
        out += &format!("{k}: {v}\n");
    }
    out += &format!(
        "baseline: {} images, min score {}, {} below threshold\n",
        s.baseline.count,
        fmt_opt32(s.baseline.min_score),
        s.baseline.below_threshold
    );
    out += &format!(
        "accepted: {} images, min score {}, fraction above threshold {}\n",
        s.accepted.count,
        fmt_opt32(s.accepted.min_score),
        fmt_opt(s.accepted.fraction_above_threshold)
    );
    out += &format!(
        "drift: {} pairs, mean cosine {:.4}, mean distance {:.4}; cross-condition distance {}",
        s.drift.pairs,
        s.drift.mean_cosine,
        s.drift.mean_distance,
        fmt_opt(s.mean_cross_condition_distance)
    );
    out
}

pub fn cmd_report(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg.output.join("audit").join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let summary: AuditSummary =
        serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let report = report_text(&summary);
    write_atomic(&cfg.output.join("report.txt"), (report.clone() + "\n").as_bytes())?;
    println!("{report}");
    Ok(())
}
