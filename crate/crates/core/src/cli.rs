//! The `r2a` command line: synth, train, score, eval, verify.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBank, LearnedAdapters};
use crate::error::{Error, Result};
use crate::featureio::{read_map, write_map, Checkpoint, DatasetManifest, FeatureArchive, MaskImage, Role, SampleEntry, TextAnchorSet};
use crate::metrics::{self, CategoryInput, CategoryMetrics, MetricReport, ProOptions};
use crate::numerics::Tensor;
use crate::scoring::{BranchConfig, FusionWeights, Mode, Scorer};
use crate::synthgen::{self, DirectionSharing, SynthConfig};
use crate::trainer::{self, TrainConfig};
use crate::verify;

pub const SCORES_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "r2a", version, about = "Residual-domain few-shot anomaly scoring")]
pub struct Cli {
    /// Worker threads for per-image work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Fine-tune adapters on the manifest's training split.
    Train(TrainArgs),
    /// Score the test split.
    Score(ScoreArgs),
    /// Compute metrics from score files.
    Eval(EvalArgs),
    /// Run the built-in identity and oracle checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, value_parser = parse_sharing)]
    pub sharing: Option<DirectionSharing>,
    #[arg(long)]
    pub nuisance_scale: Option<f64>,
    #[arg(long)]
    pub nuisance_smooth: Option<usize>,
    #[arg(long)]
    pub text_tilt: Option<f64>,
    /// Normal and anomalous training images per seen category.
    #[arg(long)]
    pub train_per_class: Option<usize>,
    /// Skip the `μ > η·√D` check.
    #[arg(long)]
    pub weak: bool,
}

fn parse_sharing(s: &str) -> std::result::Result<DirectionSharing, String> {
    match s {
        "global" => Ok(DirectionSharing::Global),
        "per-category" => Ok(DirectionSharing::PerCategory),
        _ => Err(format!("expected global or per-category, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Overrides the manifest's anchor file.
    #[arg(long)]
    pub anchors: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory for `checkpoint.r2ck` and `train_log.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "identity")]
    pub mode: Mode,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Repeat with seeds `seed..seed+runs`, one `run_<i>` directory each.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// `pixel=a,b,c image=d,e,f` in (text, visual, residual) order.
    #[arg(long)]
    pub weights: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of `score`.
    #[arg(long)]
    pub scores: PathBuf,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = metrics::DEFAULT_FPR_LIMIT)]
    pub fpr_limit: f64,
    /// Image-level metrics only.
    #[arg(long)]
    pub no_pixel: bool,
    /// Binned PRO sweep instead of the exact one.
    #[arg(long)]
    pub bins: Option<usize>,
    /// 4-connected regions instead of 8-connected.
    #[arg(long)]
    pub four_connected: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One scored image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub category: String,
    pub s_text: f64,
    pub s_vis: f64,
    pub s_res: f64,
    pub s: f64,
    /// Map stem relative to the score directory.
    pub map: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub version: u32,
    pub mode: Mode,
    pub shots: usize,
    pub seed: u64,
    pub gamma: f64,
    pub weights: FusionWeights,
    pub references: BTreeMap<String, Vec<String>>,
    pub records: Vec<ScoreRecord>,
}

/// Several runs' reports plus their mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunsReport {
    pub version: u32,
    pub runs: Vec<MetricReport>,
    pub mean: CategoryMetrics,
    pub std: CategoryMetrics,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::from(e).at(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
    serde_json::from_str(&text).map_err(|e| Error::from(e).at(path))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::from(e).at(p))
}

pub fn load_anchors(manifest: &DatasetManifest, explicit: Option<&Path>) -> Result<TextAnchorSet> {
    let path = match (explicit, &manifest.anchors) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(rel)) => manifest.resolve(rel),
        (None, None) => return Err(Error::ManifestInvalid("no anchors given and none in the manifest".into())),
    };
    TextAnchorSet::read(&path)
}

/// `shots` references per category, drawn without replacement from the
/// category's pool by a generator seeded with `seed`. Categories are visited
/// in sorted order.
pub fn select_references<'m>(
    manifest: &'m DatasetManifest,
    categories: &[String],
    shots: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<&'m SampleEntry>>> {
    if shots == 0 {
        return Err(Error::ConfigInvalid("shots must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted = categories.to_vec();
    sorted.sort();
    let mut out = BTreeMap::new();
    for cat in sorted {
        let pool = manifest.reference_pool(&cat);
        if pool.len() < shots {
            return Err(Error::ManifestInvalid(format!(
                "category {cat} has {} references, {shots} requested",
                pool.len()
            )));
        }
        let picks = rand::seq::index::sample(&mut rng, pool.len(), shots);
        out.insert(cat, picks.iter().map(|i| pool[i]).collect());
    }
    Ok(out)
}

/// Scores every test sample. Output follows manifest order.
pub fn score_dataset(
    manifest: &DatasetManifest,
    scorer: &Scorer,
    shots: usize,
    seed: u64,
) -> Result<(BTreeMap<String, Vec<String>>, Vec<(ScoreRecord, Tensor)>)> {
    let tests: Vec<&SampleEntry> = manifest.with_role(Role::Test).collect();
    if tests.is_empty() {
        return Err(Error::ManifestInvalid("no test samples".into()));
    }
    let refs = select_references(manifest, &manifest.categories(Role::Test), shots, seed)?;
    let mut banks = BTreeMap::new();
    for (cat, entries) in &refs {
        let archives = entries
            .iter()
            .map(|e| FeatureArchive::read(&manifest.resolve(&e.features)))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<&FeatureArchive> = archives.iter().collect();
        banks.insert(cat.clone(), scorer.build_bank(&views)?);
    }
    let scored = tests
        .par_iter()
        .map(|s| {
            let path = manifest.resolve(&s.features);
            let q = FeatureArchive::read(&path)?;
            let out = scorer.score(&q, &banks[&s.category]).map_err(|e| e.at(&path))?;
            let rec = ScoreRecord {
                id: s.id.clone(),
                category: s.category.clone(),
                s_text: out.s_text,
                s_vis: out.s_vis,
                s_res: out.s_res,
                s: out.s,
                map: format!("maps/{}", s.id),
            };
            Ok((rec, out.m))
        })
        .collect::<Result<Vec<_>>>()?;
    let ids = refs
        .into_iter()
        .map(|(c, e)| (c, e.into_iter().map(|s| s.id.clone()).collect()))
        .collect();
    Ok((ids, scored))
}

/// Builds a scorer from CLI-level options.
pub fn build_scorer(
    anchors: &TextAnchorSet,
    layer_ids: &[u32],
    mode: Mode,
    checkpoint: Option<&Path>,
    gamma: Option<f64>,
    weights: Option<&str>,
) -> Result<Scorer> {
    let adapters = match (mode, checkpoint) {
        (Mode::Identity, _) => AdapterBank::Identity,
        (Mode::Learned, Some(p)) => {
            let ck = Checkpoint::read(p)?;
            AdapterBank::Learned(LearnedAdapters::from_checkpoint(&ck).map_err(|e| e.at(p))?)
        }
        (Mode::Learned, None) => return Err(Error::ConfigInvalid("learned mode needs --checkpoint".into())),
    };
    let mut cfg = BranchConfig::for_mode(mode, layer_ids)?;
    if let Some(g) = gamma {
        cfg.gamma = g;
    }
    if let Some(w) = weights {
        cfg.weights = FusionWeights::parse(w, cfg.weights)?;
    }
    cfg.validate(layer_ids)?;
    Scorer::new(anchors, adapters, cfg)
}

fn first_test_archive(manifest: &DatasetManifest) -> Result<FeatureArchive> {
    let s = manifest
        .with_role(Role::Test)
        .next()
        .ok_or_else(|| Error::ManifestInvalid("no test samples".into()))?;
    FeatureArchive::read(&manifest.resolve(&s.features))
}

fn write_scores(dir: &Path, file: &ScoreFile, maps: &[(ScoreRecord, Tensor)]) -> Result<()> {
    mkdir(&dir.join("maps"))?;
    for (rec, map) in maps {
        write_map(map, &dir.join(&rec.map))?;
    }
    write_json(file, &dir.join("scores.json"))
}

pub fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&args.data.manifest)?;
    let anchors = load_anchors(&manifest, args.data.anchors.as_deref())?;
    if args.mode == Mode::Identity && args.checkpoint.is_some() {
        log::warn!("identity mode ignores --checkpoint");
    }
    if args.runs == 0 {
        return Err(Error::ConfigInvalid("runs must be at least 1".into()));
    }
    let probe = first_test_archive(&manifest)?;
    let scorer = build_scorer(
        &anchors,
        &probe.layer_ids,
        args.mode,
        args.checkpoint.as_deref(),
        args.gamma,
        args.weights.as_deref(),
    )?;
    for run in 0..args.runs {
        let seed = args.seed + run as u64;
        let dir = if args.runs == 1 { args.out.clone() } else { args.out.join(format!("run_{run}")) };
        let (references, scored) = score_dataset(&manifest, &scorer, args.shots, seed)?;
        let file = ScoreFile {
            version: SCORES_VERSION,
            mode: args.mode,
            shots: args.shots,
            seed,
            gamma: scorer.cfg.gamma,
            weights: scorer.cfg.weights,
            references,
            records: scored.iter().map(|(r, _)| r.clone()).collect(),
        };
        write_scores(&dir, &file, &scored)?;
        log::info!("run {run}: scored {} images into {}", scored.len(), dir.display());
    }
    Ok(())
}

/// Metrics for one score directory.
pub fn evaluate_scores(manifest: &DatasetManifest, dir: &Path, pixel: bool, opts: ProOptions) -> Result<MetricReport> {
    manifest.validate(pixel)?;
    let file: ScoreFile = read_json(&dir.join("scores.json"))?;
    let mut by_cat: BTreeMap<String, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in &file.records {
        let s = manifest
            .sample(&r.id)
            .ok_or_else(|| Error::ManifestInvalid(format!("scored sample {} is not in the manifest", r.id)))?;
        if s.category != r.category {
            return Err(Error::ManifestInvalid(format!("{}: category {} vs manifest {}", r.id, r.category, s.category)));
        }
        by_cat.entry(r.category.clone()).or_default().push(r);
    }

    let mut owned: Vec<(String, Vec<f64>, Vec<u8>, Vec<Tensor>, Vec<MaskImage>)> = Vec::new();
    for (cat, recs) in by_cat {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for r in recs {
            let s = manifest.sample(&r.id).expect("checked above");
            scores.push(r.s);
            labels.push(s.label);
            if pixel {
                let map = read_map(&dir.join(&r.map))?;
                let (h, w) = (map.shape()[0], map.shape()[1]);
                let mask = match &s.mask {
                    Some(m) => {
                        let path = manifest.resolve(m);
                        let mask = MaskImage::read(&path)?;
                        if (mask.height, mask.width) != (h, w) {
                            return Err(Error::shape(format!("mask {}x{} vs map {h}x{w}", mask.height, mask.width)).at(path));
                        }
                        mask
                    }
                    None => MaskImage::zeros(h, w),
                };
                maps.push(map);
                masks.push(mask);
            }
        }
        owned.push((cat, scores, labels, maps, masks));
    }
    let inputs: Vec<CategoryInput> = owned
        .iter()
        .map(|(cat, scores, labels, maps, masks)| CategoryInput {
            name: cat.clone(),
            scores: scores.clone(),
            labels: labels.clone(),
            pixel: pixel.then(|| (maps.iter().collect(), masks.iter().collect())),
        })
        .collect();
    metrics::evaluate(&inputs, opts)
}

fn mean_std(reports: &[MetricReport]) -> (CategoryMetrics, CategoryMetrics) {
    let mean = metrics::macro_average(reports.iter().map(|r| &r.macro_avg));
    let field = |m: &CategoryMetrics| [m.i_auc, m.i_ap, m.i_f1, m.p_auc, m.p_ap, m.p_f1, m.pro];
    let mu = field(&mean);
    let mut var = [0.0f64; 7];
    for r in reports {
        for (k, v) in field(&r.macro_avg).into_iter().enumerate() {
            if let (Some(v), Some(m)) = (v, mu[k]) {
                var[k] += (v - m) * (v - m) / reports.len() as f64;
            }
        }
    }
    let sd = |k: usize| mu[k].map(|_| var[k].sqrt());
    let std = CategoryMetrics {
        i_auc: sd(0),
        i_ap: sd(1),
        i_f1: sd(2),
        p_auc: sd(3),
        p_ap: sd(4),
        p_f1: sd(5),
        pro: sd(6),
    };
    (mean, std)
}

/// Score directories under `dir`: itself, or its `run_<i>` children.
fn score_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("scores.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<(usize, PathBuf)> = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::from(e).at(dir))? {
        let p = e.map_err(|e| Error::from(e).at(dir))?.path();
        let idx = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("run_"))
            .and_then(|n| n.parse().ok());
        if let Some(i) = idx.filter(|_| p.join("scores.json").is_file()) {
            runs.push((i, p));
        }
    }
    if runs.is_empty() {
        return Err(Error::ManifestInvalid(format!("no scores.json under {}", dir.display())));
    }
    runs.sort();
    Ok(runs.into_iter().map(|(_, p)| p).collect())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&args.manifest)?;
    let opts = ProOptions {
        fpr_limit: args.fpr_limit,
        eight_connected: !args.four_connected,
        bins: args.bins,
    };
    let dirs = score_dirs(&args.scores)?;
    let reports = dirs
        .iter()
        .map(|d| evaluate_scores(&manifest, d, !args.no_pixel, opts))
        .collect::<Result<Vec<_>>>()?;
    let text = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0])?
    } else {
        let (mean, std) = mean_std(&reports);
        serde_json::to_string_pretty(&RunsReport {
            version: metrics::REPORT_VERSION,
            runs: reports,
            mean,
            std,
        })?
    };
    match &args.out {
        Some(p) => fs::write(p, text + "\n").map_err(|e| Error::from(e).at(p)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::strong(args.seed);
    if let Some(mu) = args.mu {
        cfg.mu = mu;
    }
    if let Some(eta) = args.eta {
        cfg.eta = eta;
    }
    if let Some(s) = args.sharing {
        cfg.sharing = s;
    }
    if let Some(v) = args.nuisance_scale {
        cfg.nuisance_scale = v;
    }
    if let Some(v) = args.nuisance_smooth {
        cfg.nuisance_smooth = v;
    }
    if let Some(v) = args.text_tilt {
        cfg.text_tilt = v;
    }
    if let Some(n) = args.train_per_class {
        cfg.train_normal = n;
        cfg.train_anomalous = n;
    }
    cfg.strong = !args.weak;
    let ds = synthgen::generate(&cfg)?;
    ds.write(&args.out)?;
    write_json(&cfg, &args.out.join("synth_config.json"))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&args.data.manifest)?;
    let anchors = load_anchors(&manifest, args.data.anchors.as_deref())?;
    let mut cfg = TrainConfig {
        seed: args.seed,
        ..TrainConfig::default()
    };
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch {
        cfg.batch = b;
    }
    if let Some(g) = args.gamma {
        cfg.gamma = g;
    }
    let out = trainer::train(&manifest, &anchors, cfg)?;
    mkdir(&args.out)?;
    out.checkpoint.write(&args.out.join("checkpoint.r2ck"))?;
    trainer::write_log(&out.log, &args.out.join("train_log.json"))
}

/// Returns whether every check passed.
pub fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let report = verify::run_all(args.seed);
    for c in &report.checks {
        eprintln!("{} {:<22} {:.2}s  {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.seconds, c.detail);
    }
    if let Some(p) = &args.out {
        write_json(&report, p)?;
    }
    Ok(report.passed)
}

pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Score(a) => cmd_score(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Verify(a) => {
            if !cmd_verify(a)? {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
    }
    Ok(EXIT_OK)
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        EXIT_INVALID
    } else {
        EXIT_FAILURE
    }
}

/// Entry point of the `r2a` binary; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("R2A_LOG", "warn")).init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn weights_and_mode_parse() {
        let cli = Cli::try_parse_from([
            "r2a", "score", "--manifest", "m.json", "--mode", "learned", "--out", "o", "--weights", "pixel=1,1,1",
        ])
        .unwrap();
        match cli.command {
            Command::Score(a) => {
                assert_eq!(a.mode, Mode::Learned);
                assert_eq!(a.weights.as_deref(), Some("pixel=1,1,1"));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn exit_codes_split_validation_from_io() {
        assert_eq!(exit_code(&Error::ManifestInvalid("x".into())), EXIT_INVALID);
        let io = Error::Io(std::io::Error::other("disk"));
        assert_eq!(exit_code(&io.at("/x")), EXIT_FAILURE);
    }
}
