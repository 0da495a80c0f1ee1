//! Command-line front end for the `svco` toolkit.
//!
//! [`run`] parses an argument vector and returns the process exit code, so
//! tests can drive the tool without spawning it. Usage errors exit with 2,
//! runtime failures with 1.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use svco::model::checkpoint;
use svco::mvc::augment::{self, corpus_pair_id, RetryPolicy};
use svco::mvc::filter::{self, FilterConfig};
use svco::mvc::rewriter::{CachedRewriter, ExternalRewriter, Rewriter, TemplateRewriter};
use svco::mvc::store;
use svco::objectives::Objective;
use svco::probe::{self, DependencyPoint, MetricRow};
use svco::synth::{gen_corpus, ContrastType, Corpus, TypeMix};
use svco::train::{self, Criterion, TrainConfig};

type AnyError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Parser)]
#[command(name = "svco", version, about = "Visual-contrast preference tuning on a toy conditional model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic minimal-contrast corpus (and optionally an embedding store).
    GenData(GenDataArgs),
    /// Filter an embedding store by CLIP / DINO similarity.
    Filter(FilterArgs),
    /// Rewrite caption pairs into instruction-response records.
    Augment(AugmentArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Pair accuracy and the evaluation battery of a checkpoint.
    Eval(EvalArgs),
    /// Perplexity neglect probe of a checkpoint.
    Probe(ProbeArgs),
    /// Aggregate metrics: improvement, dependency trend, checkpoint selection.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `mvc`, `uniform`, or `object=..,attribute=..,count=..,position=..`.
    #[arg(long, default_value = "mvc")]
    mix: TypeMix,
    /// Mark every contrastive image with the style coordinate.
    #[arg(long)]
    shortcut: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write stand-in encoder embeddings for the pairs.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    clip_dim: usize,
    #[arg(long, default_value_t = 32)]
    dino_dim: usize,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    tau_clip: f64,
    #[arg(long, default_value_t = 0.5)]
    tau_dino: f64,
    /// Categories kept without the similarity test; repeat or comma-separate.
    /// Pass `none` to filter every category.
    #[arg(long, value_delimiter = ',', default_value = "position")]
    bypass: Vec<String>,
    /// Fraction of bypass records to keep; defaults to the pass rate of the rest.
    #[arg(long)]
    bypass_rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Filter report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RewriterKind {
    Template,
    External,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Caption-pair file or generated corpus.
    #[arg(long = "in")]
    input: PathBuf,
    /// Restrict to pairs listed in a kept-set file.
    #[arg(long)]
    kept: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "template")]
    rewriter: RewriterKind,
    /// Reply cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    max_attempts: u32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    kept: Option<PathBuf>,
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    hidden_layers: Option<usize>,
    #[arg(long)]
    criterion: Option<Criterion>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Evaluate on a copy of the corpus with the style coordinate cleared.
    #[arg(long)]
    strip_style: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Flat JSON object of base metrics.
    #[arg(long, requires = "tuned")]
    base: Option<PathBuf>,
    #[arg(long, requires = "base")]
    tuned: Option<PathBuf>,
    /// Metrics where lower is better; repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    lower_better: Vec<String>,
    /// CSV with columns `metric,with_images,without_images,improvement`.
    #[arg(long)]
    dependency: Option<PathBuf>,
    /// Run directory whose best checkpoint should be reported.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    criterion: Option<Criterion>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Filter(a) => filter_cmd(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, AnyError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| format!("cannot create {}: {e}", path.display()).into())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), AnyError> {
    let mut w = create(path)?;
    probe::write_json(value, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_csv(rows: &[MetricRow], path: &Path) -> Result<(), AnyError> {
    let mut w = create(path)?;
    probe::write_rows_csv(rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<(), AnyError> {
    let corpus = gen_corpus(a.seed, a.n, &a.mix, a.shortcut)?;
    corpus.save(&a.out)?;
    if let Some(path) = &a.store {
        let labels: Vec<(String, ContrastType)> = corpus
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| (corpus_pair_id(i), p.contrast_type))
            .collect();
        let records = store::synthetic_records(&labels, a.clip_dim, a.dino_dim, a.seed);
        store::save(&records, path)?;
    }
    println!("wrote {} pairs to {}", corpus.len(), a.out.display());
    Ok(())
}

fn parse_bypass(values: &[String]) -> Result<BTreeSet<ContrastType>, AnyError> {
    let mut out = BTreeSet::new();
    for v in values {
        if v == "none" {
            continue;
        }
        out.insert(v.parse::<ContrastType>()?);
    }
    Ok(out)
}

fn filter_cmd(a: FilterArgs) -> Result<(), AnyError> {
    let cfg = FilterConfig {
        tau_clip: a.tau_clip,
        tau_dino: a.tau_dino,
        bypass_categories: parse_bypass(&a.bypass)?,
        bypass_rate: a.bypass_rate,
        seed: a.seed,
    };
    let outcome = filter::run_filter_path(&a.store, &cfg)?;
    let mut w = create(&a.out)?;
    filter::write_kept(&outcome.kept, &mut w)?;
    w.flush()?;
    if let Some(path) = &a.report {
        write_json(&outcome.report, path)?;
    }
    println!(
        "kept {} of {} records -> {}",
        outcome.report.kept,
        outcome.report.total,
        a.out.display()
    );
    Ok(())
}

fn kept_ids(path: &Path) -> Result<HashSet<String>, AnyError> {
    let kept = filter::read_kept(BufReader::new(File::open(path)?))?;
    Ok(kept.into_iter().map(|k| k.pair_id).collect())
}

fn augment_cmd(a: AugmentArgs) -> Result<(), AnyError> {
    let mut pairs = augment::load_caption_pairs(&a.input)?;
    if let Some(path) = &a.kept {
        let ids = kept_ids(path)?;
        pairs.retain(|p| ids.contains(&p.pair_id));
    }
    let base: Box<dyn Rewriter> = match a.rewriter {
        RewriterKind::Template => Box::new(TemplateRewriter),
        RewriterKind::External => Box::new(ExternalRewriter::from_env()?),
    };
    let rewriter: Box<dyn Rewriter> = match &a.cache {
        Some(dir) => Box::new(CachedRewriter::new(base, dir)?),
        None => base,
    };
    let policy = RetryPolicy {
        max_attempts: a.max_attempts,
    };
    let (records, report) = augment::augment_all(&pairs, rewriter.as_ref(), policy)?;
    let mut w = create(&a.out)?;
    augment::write_augmented(&records, &mut w)?;
    w.flush()?;
    if let Some(path) = &a.report {
        write_json(&report, path)?;
    }
    println!(
        "augmented {} pairs ({} rewritten, {} fallbacks) -> {}",
        report.total,
        report.rewritten,
        report.total - report.rewritten,
        a.out.display()
    );
    Ok(())
}

fn load_corpus(path: &Path, kept: Option<&Path>) -> Result<Corpus, AnyError> {
    let corpus = Corpus::load(path)?;
    let Some(kept) = kept else {
        return Ok(corpus);
    };
    let ids = kept_ids(kept)?;
    Ok(Corpus {
        pairs: corpus
            .pairs
            .into_iter()
            .enumerate()
            .filter(|(i, _)| ids.contains(&corpus_pair_id(*i)))
            .map(|(_, p)| p)
            .collect(),
    })
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, AnyError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    if let Some(v) = a.objective {
        cfg.objective = v;
    }
    if let Some(v) = a.beta {
        cfg.betas.beta = v;
    }
    if let Some(v) = a.beta1 {
        cfg.betas.beta1 = v;
    }
    if let Some(v) = a.beta2 {
        cfg.betas.beta2 = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.checkpoint_interval {
        cfg.checkpoint_interval = v;
    }
    if let Some(v) = a.holdout_fraction {
        cfg.holdout_fraction = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    if let Some(v) = a.hidden_layers {
        cfg.hidden_layers = v;
    }
    if let Some(v) = a.criterion {
        cfg.criterion = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<(), AnyError> {
    let cfg = train_config(&a)?;
    let corpus = load_corpus(&a.corpus, a.kept.as_deref())?;
    let out = train::train(&cfg, &corpus, Some(&a.out))?;
    let last = out.run.steps.last().map_or(f64::NAN, |s| s.train_loss);
    println!(
        "{} steps, last batch loss {last:.6}; run record in {}",
        out.run.steps.len(),
        a.out.join(train::RUN_LOG).display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalReport {
    n: usize,
    pair_accuracy: f64,
    pair_accuracy_by_type: BTreeMap<ContrastType, f64>,
    battery: probe::Battery,
}

fn eval_cmd(a: EvalArgs) -> Result<(), AnyError> {
    let params = checkpoint::load(&a.checkpoint)?;
    let mut corpus = Corpus::load(&a.corpus)?;
    if a.strip_style {
        corpus = corpus.without_style();
    }
    let scores = probe::pair_log_probs(&params, &corpus)?;
    let mut by_type: BTreeMap<ContrastType, Vec<(f64, f64)>> = BTreeMap::new();
    for (p, s) in corpus.pairs.iter().zip(&scores) {
        by_type.entry(p.contrast_type).or_default().push(*s);
    }
    let report = EvalReport {
        n: corpus.len(),
        pair_accuracy: probe::accuracy_from_log_probs(&scores)?,
        pair_accuracy_by_type: by_type
            .into_iter()
            .map(|(k, v)| Ok((k, probe::accuracy_from_log_probs(&v)?)))
            .collect::<Result<_, probe::ProbeError>>()?,
        battery: probe::eval_battery(&params, &corpus)?,
    };
    println!("pair_accuracy {:.4} over {} pairs", report.pair_accuracy, report.n);
    if let Some(path) = &a.out {
        write_json(&report, path)?;
    }
    if let Some(path) = &a.csv {
        let mut rows = vec![MetricRow::new("pair_accuracy", report.pair_accuracy)];
        for (k, v) in &report.pair_accuracy_by_type {
            rows.push(MetricRow::new(&format!("pair_accuracy:{}", k.name()), *v));
        }
        for (k, v) in &report.battery.metrics {
            rows.push(MetricRow::new(&format!("battery:{k}"), *v));
        }
        write_csv(&rows, path)?;
    }
    Ok(())
}

fn probe_cmd(a: ProbeArgs) -> Result<(), AnyError> {
    let params = checkpoint::load(&a.checkpoint)?;
    let corpus = Corpus::load(&a.corpus)?;
    let report = probe::neglect_probe(&params, &corpus)?;
    write_json(&report, &a.out)?;
    if let Some(path) = &a.csv {
        write_csv(&report.rows(), path)?;
    }
    println!(
        "ppl match {:.3} / mismatch {:.3} / no image {:.3}; match < mismatch on {:.1}% of {} pairs",
        report.mean_ppl_match,
        report.mean_ppl_mismatch,
        report.mean_ppl_noimage,
        100.0 * report.frac_match_lt_mismatch,
        report.n
    );
    Ok(())
}

#[derive(Debug, serde::Deserialize)]
struct DependencyRow {
    metric: String,
    with_images: f64,
    without_images: f64,
    improvement: f64,
}

#[derive(Debug, Default, serde::Serialize)]
struct AggregateReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    avg_improvement_pct: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    dependency: Vec<DependencyPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    improvement_vs_dependency_slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    selected_checkpoint: Option<String>,
}

fn read_metrics(path: &Path) -> Result<BTreeMap<String, f64>, AnyError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn report_cmd(a: ReportArgs) -> Result<(), AnyError> {
    if a.base.is_none() && a.dependency.is_none() && a.run.is_none() {
        return Err("report needs --base/--tuned, --dependency or --run".into());
    }
    let mut report = AggregateReport::default();
    let mut rows = Vec::new();
    if let (Some(base), Some(tuned)) = (&a.base, &a.tuned) {
        let lower: BTreeSet<String> = a.lower_better.iter().cloned().collect();
        let v = probe::avg_improvement(&read_metrics(base)?, &read_metrics(tuned)?, &lower)?;
        println!("average improvement {v:+.4}%");
        rows.push(MetricRow::new("avg_improvement_pct", v));
        report.avg_improvement_pct = Some(v);
    }
    if let Some(path) = &a.dependency {
        let mut points = Vec::new();
        let mut rdr = csv::Reader::from_path(path)?;
        for row in rdr.deserialize() {
            let row: DependencyRow = row?;
            let p = DependencyPoint::new(&row.metric, row.with_images, row.without_images)?;
            rows.push(MetricRow::new(&format!("dependency:{}", p.metric), p.dependency));
            points.push((p.dependency, row.improvement));
            report.dependency.push(p);
        }
        let slope = probe::ols_slope(&points)?;
        println!("improvement vs dependency slope {slope:.6}");
        rows.push(MetricRow::new("improvement_vs_dependency_slope", slope));
        report.improvement_vs_dependency_slope = Some(slope);
    }
    if let Some(dir) = &a.run {
        let criterion = match a.criterion {
            Some(c) => c,
            None => {
                let text = std::fs::read_to_string(dir.join(train::CONFIG_FILE))?;
                TrainConfig::from_text(&text)?.criterion
            }
        };
        let path = train::select_checkpoint_path(dir, criterion)?;
        println!("selected checkpoint {}", path.display());
        report.selected_checkpoint = Some(path.display().to_string());
    }
    if let Some(path) = &a.out {
        write_json(&report, path)?;
    }
    if let Some(path) = &a.csv {
        write_csv(&rows, path)?;
    }
    Ok(())
}
