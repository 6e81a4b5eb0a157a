//! `vidproto` command-line pipeline.
//!
//! ```text
//! vidproto gen-data --out real.emb --n-ids 50 --per-id 20 --dim 64
//! vidproto train --data real.emb --out bank.ckpt --summary train.csv
//! vidproto simulate --checkpoint bank.ckpt --out synth.emb --partition virtual
//! vidproto metrics --data synth.emb --out props.csv
//! vidproto audit --queries synth.emb --reference real.emb --out leak.csv
//! ```
//!
//! Exit status: 0 on success, 1 when input or configuration is invalid, 2 on
//! I/O failure. `VIDPROTO_WORKERS` sets the worker thread count.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vidproto_core::config::RunConfig;
use vidproto_core::embedding::class_centers;
use vidproto_core::io::{self, Checkpoint};
use vidproto_core::leakage::{leakage_audit_with, leakage_verdict, LeakageReport, Verdict};
use vidproto_core::metrics::{prototype_similarity_matrix, property_report, similarity_distributions};
use vidproto_core::{
    generate_synthetic_clusters, gradient_check, resume_stage1, sample_surrogate_dataset, train_stage1, ArcFaceConfig,
    ClassCenterSet, Error, GradCheckInstance, Partition, Spread, Stage1State,
};

const WORKERS_ENV: &str = "VIDPROTO_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "vidproto", version, about = "Virtual-identity prototype training, dataset metrics and leakage audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic identity-cluster embedding file.
    GenData(GenDataArgs),
    /// Train real and virtual prototypes on fixed embeddings.
    Train(TrainArgs),
    /// Per-class consistency, separability and diversity as CSV.
    Metrics(MetricsArgs),
    /// Positive and negative cosine similarity histograms.
    Distrib(DistribArgs),
    /// Nearest reference class for every query class, with a verdict.
    Audit(AuditArgs),
    /// Sample surrogate embeddings around trained prototypes.
    Simulate(SimulateArgs),
    /// Dump embeddings and labels as plain CSV.
    ExportTsneCsv(ExportArgs),
    /// Compare analytic loss gradients with finite differences.
    CheckGrad(CheckGradArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_ids: Option<usize>,
    #[arg(long)]
    per_id: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Real embedding file.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh bank.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Similarity summary per checkpoint as CSV.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Plain-text run report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Final prototype cosine matrix as CSV.
    #[arg(long)]
    similarity_matrix: Option<PathBuf>,
    /// Min-max rescale the exported similarity matrix.
    #[arg(long)]
    minmax: bool,
    #[arg(long)]
    virtual_ids: Option<usize>,
    #[arg(long)]
    batch_real: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    lr_decay_at: Option<Vec<usize>>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Use prototypes as virtual embeddings, without noise.
    #[arg(long)]
    ablation_no_virtual_noise: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-embedding quality scores in [0, 1], one per line.
    #[arg(long)]
    quality: Option<PathBuf>,
    /// Property CSV whose averages normalize this report.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Name recorded for the baseline (defaults to its file stem).
    #[arg(long)]
    baseline_name: Option<String>,
}

#[derive(Args, Debug)]
struct DistribArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Output prefix; writes `<prefix>-positive.csv`, `<prefix>-negative-centers.csv`
    /// and `<prefix>-negative-members.csv`.
    #[arg(long)]
    out_prefix: PathBuf,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    max_pairs_per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Query embedding file, audited by class center.
    #[arg(long, conflicts_with = "query_prototypes", required_unless_present = "query_prototypes")]
    queries: Option<PathBuf>,
    /// Query prototypes from a checkpoint instead of an embedding file.
    #[arg(long)]
    query_prototypes: Option<PathBuf>,
    /// Partition of the query checkpoint.
    #[arg(long, default_value = "virtual")]
    partition: Partition,
    /// Reference embedding file, audited by class center.
    #[arg(long)]
    reference: PathBuf,
    /// Top-j neighbors CSV.
    #[arg(long)]
    out: PathBuf,
    /// Top-1 cosine histogram CSV.
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Reference self-baseline histogram CSV.
    #[arg(long)]
    baseline_histogram: Option<PathBuf>,
    /// Summary text block.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long)]
    top_j: Option<usize>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    quantile: Option<f64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    partition: Option<Partition>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    tightness: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CheckGradArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long)]
    seed: Option<u64>,
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Error> {
    match &arg.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), Error> {
    let mut cfg = load_config(&a.cfg)?;
    let d = &mut cfg.data;
    set(&mut d.n_ids, a.n_ids);
    set(&mut d.per_id, a.per_id);
    set(&mut d.dim, a.dim);
    set(&mut d.jitter, a.jitter);
    set(&mut d.seed, a.seed);
    let set = generate_synthetic_clusters(d.n_ids, d.per_id, d.dim, d.jitter, d.seed)?;
    io::write_embeddings(&set, &a.out)?;
    println!("wrote {} embeddings of {} ids (dim {}) to {}", set.len(), set.class_count(), set.dim(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let mut cfg = load_config(&a.cfg)?;
    let t = &mut cfg.train;
    set(&mut t.virtual_ids, a.virtual_ids);
    set(&mut t.batch_real, a.batch_real);
    set(&mut t.iterations, a.iterations);
    set(&mut t.learning_rate, a.learning_rate);
    set(&mut t.lr_decay_at, a.lr_decay_at);
    set(&mut t.margin, a.margin);
    set(&mut t.scale, a.scale);
    set(&mut t.checkpoint_every, a.checkpoint_every);
    set(&mut t.seed, a.seed);
    t.ablation_no_virtual_noise |= a.ablation_no_virtual_noise;

    let data = io::read_embeddings(&a.data)?;
    let report = match &a.init {
        Some(p) => {
            let ck = io::read_checkpoint(p)?;
            resume_stage1(Stage1State::new(ck.bank, ck.tracker)?, &data, t)?
        }
        None => train_stage1(&data, t)?,
    };
    io::write_checkpoint(&Checkpoint { bank: report.bank.clone(), tracker: report.tracker.clone() }, &a.out)?;
    if let Some(p) = &a.summary {
        io::write_train_summary_csv(&report, p)?;
    }
    if let Some(p) = &a.report {
        io::write_train_report_text(&report, p)?;
    }
    if let Some(p) = &a.similarity_matrix {
        io::write_matrix_csv(&prototype_similarity_matrix(&report.bank, a.minmax)?, p)?;
    }
    let last = report.checkpoints.last().expect("a report always has the initial checkpoint");
    print!("iterations={}", last.iteration);
    if let Some(l) = last.loss {
        print!(" loss={l}");
    }
    for (name, p) in [
        ("rr", last.summary.real_real),
        ("rv", last.summary.real_virtual),
        ("vv", last.summary.virtual_virtual),
    ] {
        if let Some(p) = p {
            print!(" {name}_mean={} {name}_max={}", p.mean, p.max);
        }
    }
    println!();
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<(), Error> {
    let _ = load_config(&a.cfg)?;
    let data = io::read_embeddings(&a.data)?;
    let scores = a.quality.as_deref().map(io::read_quality_scores).transpose()?;
    let mut report = property_report(&data, scores.as_ref())?;
    if let Some(p) = &a.baseline {
        let base = io::read_property_report_csv(p)?;
        let name = a
            .baseline_name
            .clone()
            .unwrap_or_else(|| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        report = report.normalized_by(&base.averages, name);
    }
    io::write_property_report_csv(&report, &a.out)?;
    let av = &report.averages;
    println!("classes={} consistency={} separability={}", report.classes.len(), av.consistency, av.separability);
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn distrib(a: DistribArgs) -> Result<(), Error> {
    let mut cfg = load_config(&a.cfg)?;
    let m = &mut cfg.metrics;
    set(&mut m.bins, a.bins);
    if a.max_pairs_per_class.is_some() {
        m.max_pairs_per_class = a.max_pairs_per_class;
    }
    set(&mut m.seed, a.seed);
    let data = io::read_embeddings(&a.data)?;
    let d = similarity_distributions(&data, m.bins, m.max_pairs_per_class, m.seed)?;
    for (name, h) in [
        ("-positive.csv", &d.positive),
        ("-negative-centers.csv", &d.negative_centers),
        ("-negative-members.csv", &d.negative_members),
    ] {
        io::write_histogram_csv(h, &with_suffix(&a.out_prefix, name))?;
    }
    println!(
        "positive_pairs={} negative_center_pairs={} negative_member_pairs={}",
        d.positive.total(),
        d.negative_centers.total(),
        d.negative_members.total()
    );
    Ok(())
}

fn summary_text(report: &LeakageReport, verdict: Option<&Verdict>) -> String {
    let top1 = report.top1_cosines();
    let max = top1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = top1.iter().sum::<f64>() / top1.len().max(1) as f64;
    let mut s = format!("queries = {}\ntop1_mean = {mean}\ntop1_max = {max}\n", report.queries.len());
    if let Some(v) = verdict {
        s.push_str(&format!(
            "quantile = {}\nquery_quantile = {}\nbaseline_quantile = {}\nmargin = {}\nleak_free = {}\n",
            v.quantile, v.query_quantile, v.baseline_quantile, v.margin, v.leak_free
        ));
    }
    s
}

fn audit(a: AuditArgs) -> Result<(), Error> {
    let mut cfg = load_config(&a.cfg)?;
    let au = &mut cfg.audit;
    set(&mut au.top_j, a.top_j);
    set(&mut au.block, a.block);
    set(&mut au.bins, a.bins);
    set(&mut au.quantile, a.quantile);
    let queries = match (&a.queries, &a.query_prototypes) {
        (Some(p), _) => class_centers(&io::read_embeddings(p)?)?,
        (None, Some(p)) => {
            let ck = io::read_checkpoint(p)?;
            let rows = a.partition.select(&ck.bank)?;
            let n = rows.rows();
            ClassCenterSet::from_centers(rows, vec![1; n])?
        }
        (None, None) => return Err(Error::ConfigInvalid("either --queries or --query-prototypes is required".into())),
    };
    let reference = class_centers(&io::read_embeddings(&a.reference)?)?;
    let report = leakage_audit_with(&queries, &reference, &au.options())?;
    let verdict = match report.baseline {
        Some(_) => Some(leakage_verdict(&report, au.quantile)?),
        None => None,
    };
    io::write_leakage_csv(&report, &a.out)?;
    if let Some(p) = &a.histogram {
        io::write_histogram_csv(&report.top1_histogram, p)?;
    }
    if let (Some(p), Some(b)) = (&a.baseline_histogram, &report.baseline) {
        io::write_histogram_csv(&b.histogram, p)?;
    }
    let text = summary_text(&report, verdict.as_ref());
    if let Some(p) = &a.summary {
        std::fs::write(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), Error> {
    let mut cfg = load_config(&a.cfg)?;
    let s = &mut cfg.surrogate;
    set(&mut s.partition, a.partition);
    set(&mut s.per_class, a.per_class);
    set(&mut s.spread, a.spread.map(Spread::Scalar));
    set(&mut s.tightness, a.tightness);
    set(&mut s.seed, a.seed);
    let ck = io::read_checkpoint(&a.checkpoint)?;
    let set = sample_surrogate_dataset(&ck.bank, s.partition, &s.sampling())?;
    io::write_embeddings(&set, &a.out)?;
    println!("wrote {} surrogate embeddings of {} {} classes to {}", set.len(), set.class_count(), s.partition, a.out.display());
    Ok(())
}

fn export(a: ExportArgs) -> Result<(), Error> {
    let _ = load_config(&a.cfg)?;
    let data = io::read_embeddings(&a.data)?;
    io::write_labeled_csv(&data, &a.out)?;
    println!("wrote {} rows to {}", data.len(), a.out.display());
    Ok(())
}

fn check_grad(a: CheckGradArgs) -> Result<(), Error> {
    let cfg = load_config(&a.cfg)?;
    let mut margin = cfg.train.margin;
    let mut scale = cfg.train.scale;
    set(&mut margin, a.margin);
    set(&mut scale, a.scale);
    let arc = ArcFaceConfig::new(margin, scale)?;
    if a.dim == 0 || a.classes == 0 || a.batch == 0 {
        return Err(Error::ConfigInvalid("dim, classes and batch must be at least 1".into()));
    }
    let inst = GradCheckInstance::random(a.dim, a.classes, a.batch, a.seed.unwrap_or(cfg.train.seed));
    let err = gradient_check(&arc, &inst, a.step)?;
    println!("max relative error: {err:e}");
    Ok(())
}

fn configure_workers() -> Result<(), Error> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::ConfigInvalid(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::ConfigInvalid(e.to_string()))
}

fn run(command: Command) -> Result<(), Error> {
    configure_workers()?;
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Metrics(a) => metrics(a),
        Command::Distrib(a) => distrib(a),
        Command::Audit(a) => audit(a),
        Command::Simulate(a) => simulate(a),
        Command::ExportTsneCsv(a) => export(a),
        Command::CheckGrad(a) => check_grad(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
