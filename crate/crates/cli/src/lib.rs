//! Command-line front end: dataset commands, training sweeps and evaluation.

pub mod spec;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vulnlab_core::checkpoint;
use vulnlab_core::datasetgen::{
    build_x1, commits_to_jsonl, corpus_stats, read_commits, read_samples, synth_corpus, LengthProfile,
    SentinelStrength, SynthOptions, X1Options,
};
use vulnlab_core::losses::{PartitionWeights, Reduction};
use vulnlab_core::metrics::{f1_at, optimal_threshold, roc_auc, ScoredSet};
use vulnlab_core::model::LanguageModel;
use vulnlab_core::packing::{FunctionSample, Regime};
use vulnlab_core::trainer::{score_samples, train};

use spec::{ExperimentSpec, Layout, Overrides, Sweep};

#[derive(Debug, Parser)]
#[command(name = "vulnlab", version, about = "Toy-scale vulnerability-classification finetuning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate, build or summarise datasets.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Train from a config file or a named preset.
    Train(TrainArgs),
    /// Score a dataset split with a saved checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Write a synthetic commit corpus (JSONL with a schema header).
    Synth(SynthArgs),
    /// Build the single-changed-function dataset and its splits.
    Build(BuildArgs),
    /// Length histogram and CWE table of a sample file.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 400)]
    pub n_pos: usize,
    #[arg(long, default_value_t = 0)]
    pub n_neg_hard: usize,
    #[arg(long, default_value_t = 0)]
    pub n_neg_easy: usize,
    /// `default` (reference histogram) or `short` (16-48 bytes).
    #[arg(long, default_value = "short")]
    pub profile: String,
    /// Blur the sentinel so pairs are hard to separate.
    #[arg(long)]
    pub weak_sentinel: bool,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub commits: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub include_p3: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.2, 0.2])]
    pub ratios: Vec<f64>,
    /// Allow the two sides of a pair to land in different splits.
    #[arg(long)]
    pub split_pairs: bool,
    #[arg(long)]
    pub split_by_project: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Sample JSONL file.
    #[arg(long)]
    pub input: PathBuf,
    /// Also write `histogram.csv`, `cwe.csv` and `stats.txt` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub context_size: Option<usize>,
    #[arg(long)]
    pub max_funcs_per_batch: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// e.g. `P1=3,P2=3`.
    #[arg(long)]
    pub weights: Option<PartitionWeights>,
    #[arg(long)]
    pub reduction: Option<Reduction>,
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub full_finetune: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample JSONL file to score.
    #[arg(long)]
    pub split: PathBuf,
    /// Must match the checkpoint when given.
    #[arg(long)]
    pub context_size: Option<usize>,
    /// Must match the checkpoint's training regime when given.
    #[arg(long)]
    pub regime: Option<Regime>,
    /// Decision threshold; defaults to the F1-optimal one on this split.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Data { command } => match command {
            DataCommand::Synth(a) => cmd_synth(&a),
            DataCommand::Build(a) => cmd_build(&a),
            DataCommand::Stats(a) => cmd_stats(&a),
        },
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let length_profile = match a.profile.as_str() {
        "default" => LengthProfile::default(),
        "short" => LengthProfile::uniform(16, 48),
        other => bail!("unknown length profile `{other}` (expected default or short)"),
    };
    let commits = synth_corpus(&SynthOptions {
        seed: a.seed,
        n_pos: a.n_pos,
        n_neg_hard: a.n_neg_hard,
        n_neg_easy: a.n_neg_easy,
        length_profile,
        sentinel: if a.weak_sentinel {
            SentinelStrength::WEAK
        } else {
            SentinelStrength::STRONG
        },
    })?;
    write_atomic(&a.out, commits_to_jsonl(&commits)?.as_bytes())?;
    eprintln!("wrote {} commits to {}", commits.len(), a.out.display());
    Ok(())
}

pub fn cmd_build(a: &BuildArgs) -> anyhow::Result<()> {
    if !a.commits.is_file() {
        bail!("commit file {} not found", a.commits.display());
    }
    let commits = read_commits(&a.commits)?;
    let ratios: [f64; 3] = a
        .ratios
        .as_slice()
        .try_into()
        .context("--ratios takes exactly three values")?;
    let bundle = build_x1(
        &commits,
        &X1Options {
            include_p3: a.include_p3,
            split_ratios: ratios,
            seed: a.seed,
            keep_pairs_together: !a.split_pairs,
            split_by_project: a.split_by_project,
        },
    )?;
    bundle.write(&a.out)?;
    let m = &bundle.metadata;
    eprintln!(
        "kept {}/{} commits; train/validation/test = {}/{}/{}; negatives per positive = {}",
        m.commits_kept,
        m.commits_total,
        m.train.total,
        m.validation.total,
        m.test.total,
        m.class_ratio.map_or("n/a".into(), |r| format!("{r:.2}"))
    );
    Ok(())
}

pub fn cmd_stats(a: &StatsArgs) -> anyhow::Result<()> {
    if !a.input.is_file() {
        bail!("sample file {} not found", a.input.display());
    }
    let samples = read_samples(&a.input)?;
    let stats = corpus_stats(&samples);
    print!("{}", stats.to_text());
    if let Some(dir) = &a.out {
        write_atomic(&dir.join("histogram.csv"), stats.histogram_csv().as_bytes())?;
        write_atomic(&dir.join("cwe.csv"), stats.cwe_csv().as_bytes())?;
        write_atomic(&dir.join("stats.txt"), stats.to_text().as_bytes())?;
    }
    Ok(())
}

/// Final metrics of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub regime: Regime,
    pub context_size: usize,
    pub max_funcs_per_batch: Option<usize>,
    pub reduction: Reduction,
    pub focal_gamma: f64,
    pub partition_weights: PartitionWeights,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub best_val_f1: f64,
    /// Chosen on validation, applied to test.
    pub threshold: f64,
    pub test_auc: f64,
    pub test_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub sweep: String,
    pub layout: Layout,
    pub runs: Vec<RunReport>,
}

fn load_split(dir: &Path, name: &str) -> anyhow::Result<Vec<FunctionSample>> {
    let p = dir.join(format!("{name}.jsonl"));
    read_samples(&p).with_context(|| format!("reading {}", p.display()))
}

fn resolve_sweep(a: &TrainArgs) -> anyhow::Result<(Sweep, PathBuf)> {
    let overrides = Overrides {
        data: a.data.clone(),
        out: a.out.clone(),
        seed: a.seed,
        context_size: a.context_size,
        max_funcs_per_batch: a.max_funcs_per_batch,
        gamma: a.gamma,
        weights: a.weights,
        reduction: a.reduction,
        regime: a.regime,
        epochs: a.epochs,
        lr_max: a.lr,
        full_finetune: a.full_finetune,
    };
    let mut sweep = match (&a.config, &a.preset) {
        (Some(path), _) => spec::single(ExperimentSpec::from_file(path)?),
        (None, Some(name)) => spec::preset(name)?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    let root = a.out.clone().unwrap_or_else(|| sweep.variants[0].spec.out.clone());
    for v in &mut sweep.variants {
        overrides.apply(&mut v.spec);
        v.spec.out = root.join(&v.slug);
    }
    Ok((sweep, root))
}

/// Trains every variant in order and writes per-run artifacts plus the
/// sweep summary. Configuration errors from all variants are reported
/// together before anything runs.
pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<SweepSummary> {
    let (sweep, root) = resolve_sweep(a)?;
    let mut problems = Vec::new();
    for v in &sweep.variants {
        problems.extend(v.spec.validate().into_iter().map(|p| format!("[{}] {p}", v.slug)));
    }
    problems.dedup();
    if !problems.is_empty() {
        bail!("invalid configuration:\n  - {}", problems.join("\n  - "));
    }

    let mut runs = Vec::new();
    for v in &sweep.variants {
        let s = &v.spec;
        let train_set = load_split(&s.data, "train")?;
        let val_set = load_split(&s.data, "validation")?;
        let test_set = load_split(&s.data, "test")?;
        eprintln!("[{}] training {} epochs on {} functions", v.slug, s.train.epochs, train_set.len());
        let model = LanguageModel::new(s.model.clone(), s.model_seed)?;
        let (best, history) = train(model, &train_set, &val_set, &s.train)?;
        let rec = history.best().clone();
        let scores = score_samples(&best, &test_set, s.train.regime())?;
        let test = ScoredSet::new(scores, test_set.iter().map(|x| x.label).collect())?;
        let report = RunReport {
            variant: v.label.clone(),
            regime: s.train.regime(),
            context_size: s.train.context_size,
            max_funcs_per_batch: s.train.max_funcs_per_batch,
            reduction: s.train.loss.reduction,
            focal_gamma: s.train.loss.focal_gamma,
            partition_weights: s.train.loss.partition_weights,
            best_epoch: history.best_epoch,
            best_val_auc: rec.val_auc,
            best_val_f1: rec.val_f1,
            threshold: rec.threshold,
            test_auc: roc_auc(&test)?,
            test_f1: f1_at(&test, rec.threshold),
        };
        write_atomic(&s.out.join("history.jsonl"), history.to_jsonl()?.as_bytes())?;
        best.save(&s.out.join("checkpoint.json"), Some(s.train.regime()))?;
        write_atomic(&s.out.join("report.json"), pretty(&report)?.as_bytes())?;
        write_atomic(&s.out.join("config.json"), pretty(s)?.as_bytes())?;
        eprintln!(
            "[{}] best epoch {}: val AUC {:.4}, test AUC {:.4}, test F1 {:.4}",
            v.slug, report.best_epoch, report.best_val_auc, report.test_auc, report.test_f1
        );
        runs.push(report);
    }

    let summary = SweepSummary {
        sweep: sweep.name.clone(),
        layout: sweep.layout,
        runs,
    };
    let table = render_table(&sweep.header, &summary);
    write_atomic(&root.join("summary.json"), pretty(&summary)?.as_bytes())?;
    write_atomic(&root.join("summary.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(summary)
}

fn pretty<T: Serialize>(v: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn grid(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|x| x.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, x)| format!("{x}{}", " ".repeat(widths[c] - x.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", line.join(" | ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "{}", rule.join("-+-"));
        }
    }
    out
}

fn f3(x: f64) -> String {
    format!("{x:.3}")
}

/// Plain-text summary table in the layout of the sweep.
pub fn render_table(header: &str, s: &SweepSummary) -> String {
    let mut rows: Vec<Vec<String>> = Vec::new();
    match s.layout {
        Layout::Scores => {
            rows.push(vec![header.into(), "ROC AUC".into(), "F1".into()]);
            for r in &s.runs {
                rows.push(vec![r.variant.clone(), f3(r.test_auc), f3(r.test_f1)]);
            }
        }
        Layout::Validation => {
            rows.push(vec![header.into(), "Validation ROC AUC".into()]);
            for r in &s.runs {
                rows.push(vec![r.variant.clone(), f3(r.best_val_auc)]);
            }
        }
        Layout::Test => {
            rows.push(vec![header.into(), "Test ROC AUC".into()]);
            for r in &s.runs {
                rows.push(vec![r.variant.clone(), f3(r.test_auc)]);
            }
        }
        Layout::Transposed => {
            let mut head = vec![header.to_string()];
            head.extend(s.runs.iter().map(|r| r.variant.clone()));
            rows.push(head);
            let line = |name: &str, f: &dyn Fn(&RunReport) -> String| {
                let mut v = vec![name.to_string()];
                v.extend(s.runs.iter().map(f));
                v
            };
            rows.push(line("ROC AUC", &|r| f3(r.test_auc)));
            rows.push(line("F1", &|r| f3(r.test_f1)));
            rows.push(line("Best val. epoch", &|r| r.best_epoch.to_string()));
            rows.push(line("Best threshold", &|r| f3(r.threshold)));
        }
        Layout::Weights => {
            rows.push(
                ["Weight", "Best val. AUC", "Best epoch", "Test AUC", "Test F1", "Threshold"]
                    .map(String::from)
                    .to_vec(),
            );
            for r in &s.runs {
                rows.push(vec![
                    r.variant.clone(),
                    f3(r.best_val_auc),
                    r.best_epoch.to_string(),
                    f3(r.test_auc),
                    f3(r.test_f1),
                    f3(r.threshold),
                ]);
            }
        }
        Layout::Combined => {
            rows.push(["Weight", "γ", "Val. AUC", "Test AUC", "Test F1"].map(String::from).to_vec());
            for r in &s.runs {
                let (w, g) = r.variant.split_once('|').unwrap_or((&r.variant, ""));
                rows.push(vec![w.into(), g.into(), f3(r.best_val_auc), f3(r.test_auc), f3(r.test_f1)]);
            }
        }
    }
    grid(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub split: String,
    pub samples: usize,
    pub regime: Regime,
    pub roc_auc: f64,
    pub f1: f64,
    pub threshold: f64,
    /// `given` or `optimal-on-split`.
    pub threshold_source: String,
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<EvalReport> {
    if !a.checkpoint.is_file() {
        bail!("checkpoint {} not found", a.checkpoint.display());
    }
    if !a.split.is_file() {
        bail!("split file {} not found", a.split.display());
    }
    let ck = checkpoint::load(&a.checkpoint)?;
    let ctx = ck.model.config().context_size;
    if let Some(c) = a.context_size {
        if c != ctx {
            bail!("checkpoint context size is {ctx}, requested {c}");
        }
    }
    let regime = match (a.regime, ck.regime) {
        (Some(r), Some(stored)) if r != stored => {
            bail!("checkpoint was trained with the {stored} regime, requested {r}")
        }
        (Some(r), _) => r,
        (None, Some(stored)) => stored,
        (None, None) => Regime::Classification,
    };
    let samples = read_samples(&a.split)?;
    let scores = score_samples(&ck.model, &samples, regime)?;
    let set = ScoredSet::new(scores, samples.iter().map(|s| s.label).collect())?;
    let auc = roc_auc(&set)?;
    let (threshold, source) = match a.threshold {
        Some(t) => (t, "given"),
        None => (optimal_threshold(&set)?.0, "optimal-on-split"),
    };
    let report = EvalReport {
        checkpoint: a.checkpoint.display().to_string(),
        split: a.split.display().to_string(),
        samples: samples.len(),
        regime,
        roc_auc: auc,
        f1: f1_at(&set, threshold),
        threshold,
        threshold_source: source.into(),
    };
    if let Some(out) = &a.out {
        write_atomic(out, pretty(&report)?.as_bytes())?;
    }
    Ok(report)
}
