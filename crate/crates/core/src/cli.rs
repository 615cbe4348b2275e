//! Command-line experiment runner: `train`, `eval`, `ablate`, `export-data`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::competition::CompetitionConfig;
use crate::config::RunConfig;
use crate::segnet::load_checkpoint;
use crate::synthdata::{export_dataset, generate_dataset, Dataset};
use crate::trainer::{evaluate, evaluate_oracle, train_run, EvalSummary, TrainMode, TutoringPolicy};

#[derive(Debug, Parser)]
#[command(name = "dcf", version, about = "Two-student semi-supervised segmentation with a competitive EMA teacher")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run and evaluate it on the test split.
    Train(ConfigArgs),
    /// Evaluate a checkpoint (or the ground truth itself) on the test split.
    Eval(EvalArgs),
    /// Sweep tutoring policies and/or competition metrics over several seeds.
    Ablate(AblateArgs),
    /// Write the synthetic dataset as PGM images.
    ExportData(ConfigArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file, applied before the overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `--key value` overrides for any config key, e.g. `--alpha 0.95 --out runs/a`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Score the ground truth against itself instead of a network.
    #[arg(long)]
    pub oracle: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Tutoring,
    Competition,
    Both,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub sweep: Sweep,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let config = resolve_config(&args)?;
            cmd_train(&config)?;
        }
        Command::Eval(args) => {
            let config = resolve_config(&args.config)?;
            let checkpoint = if args.oracle { None } else { args.checkpoint.as_deref() };
            cmd_eval(checkpoint, &config)?;
        }
        Command::Ablate(args) => {
            let config = resolve_config(&args.config)?;
            let sweeps: &[Sweep] = match args.sweep {
                Sweep::Both => &[Sweep::Tutoring, Sweep::Competition],
                Sweep::Tutoring => &[Sweep::Tutoring],
                Sweep::Competition => &[Sweep::Competition],
            };
            for &sweep in sweeps {
                let table = cmd_ablate(&config, sweep, &args.seeds, args.jobs)?;
                print!("{}", table.to_markdown());
            }
        }
        Command::ExportData(args) => {
            let config = resolve_config(&args)?;
            let dir = config.out.join("data");
            let written = export_dataset(&build_dataset(&config)?, &dir)?;
            println!("wrote {written} PGM files to {}", dir.display());
        }
    }
    Ok(())
}

/// Defaults, then the config file, then the overrides; validated.
pub fn resolve_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        config.apply_text(&text)?;
    }
    config.apply_overrides(&args.overrides)?;
    config.validate()?;
    Ok(config)
}

pub fn build_dataset(config: &RunConfig) -> anyhow::Result<Dataset> {
    Ok(generate_dataset(
        &config.scene(),
        config.data_seed,
        config.n_train,
        config.n_test,
        config.labeled_fraction,
    )?)
}

/// Trains into `config.out` and returns the test evaluation.
pub fn cmd_train(config: &RunConfig) -> anyhow::Result<EvalSummary> {
    config.validate()?;
    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    fs::write(config.out.join("config.resolved"), config.resolved())?;
    let dataset = build_dataset(config)?;
    let out = train_run(&dataset, &config.train_config(), Some(&config.out))?;
    println!(
        "{} seed {}: test Dice {:.4}, Jaccard {:.4}, 95HD {}, ASD {} ({} of {} with undefined distances)",
        config.mode,
        config.seed,
        out.eval.mean_dice,
        out.eval.mean_jaccard,
        fmt_opt(out.eval.mean_hd95),
        fmt_opt(out.eval.mean_asd),
        out.eval.undefined,
        out.eval.per_image.len()
    );
    Ok(out.eval)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

/// Scores a checkpoint, or the ground truth itself when `checkpoint` is
/// `None`, on the test split. Prints the table and writes it under `out`.
pub fn cmd_eval(checkpoint: Option<&Path>, config: &RunConfig) -> anyhow::Result<EvalSummary> {
    let dataset = build_dataset(config)?;
    let (summary, name) = match checkpoint {
        Some(path) => {
            let params = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
            (evaluate(&params, &dataset.test)?, format!("eval_{stem}.csv"))
        }
        None => (evaluate_oracle(&dataset.test)?, "eval_oracle.csv".to_string()),
    };
    let mut table = String::new();
    let _ = writeln!(table, "{:>6} {:>10} {:>10} {:>10} {:>10}", "image", "dice", "jaccard", "95hd", "asd");
    for (i, r) in summary.per_image.iter().enumerate() {
        let _ = writeln!(
            table,
            "{i:>6} {:>10.6} {:>10.6} {:>10} {:>10}",
            r.dice,
            r.jaccard,
            fmt_opt(r.hd95),
            fmt_opt(r.asd)
        );
    }
    let _ = writeln!(
        table,
        "{:>6} {:>10.6} {:>10.6} {:>10} {:>10}",
        "mean",
        summary.mean_dice,
        summary.mean_jaccard,
        fmt_opt(summary.mean_hd95),
        fmt_opt(summary.mean_asd)
    );
    let _ = writeln!(table, "undefined distances: {}", summary.undefined);
    print!("{table}");
    fs::create_dir_all(&config.out)?;
    let mut f = std::io::BufWriter::new(fs::File::create(config.out.join(&name))?);
    summary.write_csv(&mut f)?;
    f.flush()?;
    Ok(summary)
}

/// Mean and sample standard deviation over seeds of one metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub run_dirs: Vec<PathBuf>,
    pub dice: Option<MeanStd>,
    pub jaccard: Option<MeanStd>,
    pub hd95: Option<MeanStd>,
    pub asd: Option<MeanStd>,
}

impl AblationRow {
    /// Aggregates per-seed test summaries. Dice and Jaccard are in percent.
    pub fn from_runs(label: String, run_dirs: Vec<PathBuf>, evals: &[EvalSummary]) -> Self {
        let pct = |f: fn(&EvalSummary) -> f64| evals.iter().map(|e| 100.0 * f(e)).collect::<Vec<_>>();
        let defined = |f: fn(&EvalSummary) -> Option<f64>| evals.iter().filter_map(f).collect::<Vec<_>>();
        Self {
            label,
            run_dirs,
            dice: MeanStd::of(&pct(|e| e.mean_dice)),
            jaccard: MeanStd::of(&pct(|e| e.mean_jaccard)),
            hd95: MeanStd::of(&defined(|e| e.mean_hd95)),
            asd: MeanStd::of(&defined(|e| e.mean_asd)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub title: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let cell = |v: Option<MeanStd>| v.map_or_else(|| "n/a".into(), |m| format!("{:.2} ± {:.2}", m.mean, m.std));
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!("{} (mean ± std over seeds {})\n\n", self.title, seeds.join(", "));
        s.push_str("| Methods | Dice(%) ↑ | Jaccard(%) ↑ | 95HD(px) ↓ | ASD(px) ↓ |\n");
        s.push_str("|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                r.label,
                cell(r.dice),
                cell(r.jaccard),
                cell(r.hd95),
                cell(r.asd)
            );
        }
        s
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect::<String>()
        .split('-')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

/// Row label, run directory name and config of every row of a sweep.
pub fn sweep_rows(base: &RunConfig, sweep: Sweep) -> anyhow::Result<Vec<(String, String, RunConfig)>> {
    let mut rows = Vec::new();
    match sweep {
        Sweep::Tutoring => {
            for (i, policy) in TutoringPolicy::ALL.into_iter().enumerate() {
                let mut c = base.clone();
                c.tutoring = policy;
                rows.push((format!("({}) {}", i + 1, policy.description()), policy.name().to_string(), c));
            }
        }
        Sweep::Competition => {
            for comp in CompetitionConfig::ablation_set() {
                let mut c = base.clone();
                let label = comp.label();
                c.competition = comp;
                rows.push((label.clone(), slug(&label), c));
            }
        }
        Sweep::Both => bail!("sweep rows are built per sweep kind"),
    }
    Ok(rows)
}

/// Runs every row of `sweep` under every seed, DCF mode, into
/// `{out}/{sweep}/{row}/seed{n}`, then writes `summary_{sweep}.md`.
pub fn cmd_ablate(base: &RunConfig, sweep: Sweep, seeds: &[u64], jobs: usize) -> anyhow::Result<AblationTable> {
    if seeds.is_empty() {
        bail!("ablation needs at least one seed");
    }
    let sweep_name = match sweep {
        Sweep::Tutoring => "tutoring",
        Sweep::Competition => "competition",
        Sweep::Both => bail!("run the tutoring and competition sweeps separately"),
    };
    let mut base = base.clone();
    base.mode = TrainMode::Dcf;
    let rows = sweep_rows(&base, sweep)?;
    if rows.is_empty() {
        bail!("empty sweep");
    }
    let mut runs = Vec::new();
    for (r, (_, dir, config)) in rows.iter().enumerate() {
        for &seed in seeds {
            let mut c = config.clone();
            c.seed = seed;
            c.out = base.out.join(sweep_name).join(dir).join(format!("seed{seed}"));
            c.validate()?;
            runs.push((r, c));
        }
    }
    let results: Mutex<Vec<Option<anyhow::Result<EvalSummary>>>> = Mutex::new(runs.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, runs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((_, config)) = runs.get(i) else { break };
                info!("ablation run {}/{}: {}", i + 1, runs.len(), config.out.display());
                let result = cmd_train(config);
                results.lock().expect("no worker panicked")[i] = Some(result);
            });
        }
    });
    let results = results.into_inner().expect("no worker panicked");
    let mut evals: Vec<Vec<EvalSummary>> = rows.iter().map(|_| Vec::new()).collect();
    let mut dirs: Vec<Vec<PathBuf>> = rows.iter().map(|_| Vec::new()).collect();
    for ((r, config), result) in runs.iter().zip(results) {
        let eval = result
            .expect("every run was attempted")
            .with_context(|| format!("run {}", config.out.display()))?;
        evals[*r].push(eval);
        dirs[*r].push(config.out.clone());
    }
    let title = match sweep {
        Sweep::Tutoring => "Tutoring policies",
        _ => "Competition metrics",
    };
    let table = AblationTable {
        title: title.to_string(),
        seeds: seeds.to_vec(),
        rows: rows
            .into_iter()
            .zip(evals.iter().zip(dirs))
            .map(|((label, _, _), (e, d))| AblationRow::from_runs(label, d, e))
            .collect(),
    };
    fs::create_dir_all(&base.out)?;
    fs::write(base.out.join(format!("summary_{sweep_name}.md")), table.to_markdown())?;
    Ok(table)
}
