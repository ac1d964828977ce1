//! `gradfair` command-line tool: train, sweep, compare and generate data.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use gradfair::data::{load_dataset, split, synth_biased, synthetic_spec, DatasetSpec, DEFAULT_FRACTIONS};
use gradfair::grad_model::{NetworkConfig, Variant};
use gradfair::harness::{
    lambda_sweep, results_header, run_experiment, save_checkpoint, Experiment, ExperimentResult, SweepRow,
    TrainConfig, SWEEP_HEADER,
};

use output::{OutputDir, Table};

/// Environment variable naming the directory under which runs without an
/// explicit `--out` are written.
pub const OUT_ROOT_ENV: &str = "GRADFAIR_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "gradfair", version, about = "Fair classifiers via gradient reversal on protected-attribute branches")]
struct Cli {
    /// Root directory for runs that do not pass --out.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration, select an epoch on validation, report test metrics.
    Train(TrainArgs),
    /// Repeat a training run over several lambda values.
    Sweep(SweepArgs),
    /// Run NN-Auto, GRAD-Auto, NN-Pred and GRAD-Pred on identical splits.
    Compare(CompareArgs),
    /// Write a synthetic biased dataset and its spec file.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Dataset spec file (TOML).
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated protected attributes to branch on; empty trains the
    /// unprotected baseline.
    #[arg(long, value_delimiter = ',', default_value = "")]
    protected: Vec<String>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    knn_k: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [DEFAULT_FRACTIONS.0, DEFAULT_FRACTIONS.1, DEFAULT_FRACTIONS.2])]
    splits: Vec<f64>,
    /// Output directory; defaults to a name derived from the run under the
    /// output root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "pred")]
    variant: Variant,
    #[arg(long, default_value_t = NetworkConfig::DEFAULT_LAMBDA)]
    lambda: f64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "pred")]
    variant: Variant,
    /// Comma list (`1,10,100`) or log range `log:START:END:COUNT`.
    #[arg(long)]
    lambdas: String,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = NetworkConfig::DEFAULT_LAMBDA)]
    lambda: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    d: usize,
    /// One leakage strength in [0, 1] per protected attribute.
    #[arg(long, value_delimiter = ',', default_value = "0.8")]
    bias: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&cli.out_root, a),
        Command::Sweep(a) => cmd_sweep(&cli.out_root, a),
        Command::Compare(a) => cmd_compare(&cli.out_root, a),
        Command::Synth(a) => cmd_synth(&cli.out_root, a),
    }
}

/// Parses `1,10,100` or `log:1:1000:4`.
fn parse_lambdas(spec: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = if let Some(range) = spec.strip_prefix("log:") {
        let parts: Vec<&str> = range.split(':').collect();
        ensure!(parts.len() == 3, "log range must be log:START:END:COUNT, got `{spec}`");
        let start: f64 = parts[0].parse().context("log range start")?;
        let end: f64 = parts[1].parse().context("log range end")?;
        let count: usize = parts[2].parse().context("log range count")?;
        ensure!(start > 0.0 && end > 0.0, "log range bounds must be positive");
        ensure!(count >= 1, "log range needs at least one point");
        if count == 1 {
            vec![start]
        } else {
            let (a, b) = (start.log10(), end.log10());
            (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect()
        }
    } else {
        spec.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().with_context(|| format!("bad lambda `{s}`")))
            .collect::<Result<_>>()?
    };
    ensure!(!values.is_empty(), "lambda list is empty");
    if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        bail!("lambda must be a finite non-negative number, got {bad}");
    }
    Ok(values)
}

fn fractions(common: &CommonArgs) -> Result<(f64, f64, f64)> {
    ensure!(common.splits.len() == 3, "--splits takes three fractions");
    Ok((common.splits[0], common.splits[1], common.splits[2]))
}

fn protected(common: &CommonArgs) -> Vec<String> {
    common
        .protected
        .iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

struct Loaded {
    spec: DatasetSpec,
    exp: Experiment,
}

fn load(common: &CommonArgs) -> Result<Loaded> {
    let spec = DatasetSpec::from_file(&common.data)
        .with_context(|| format!("reading dataset spec {}", common.data.display()))?;
    let ds = load_dataset(&spec)?;
    ds.audit(&spec)?;
    for p in protected(common) {
        ensure!(
            ds.protected_index(&p).is_some(),
            "protected attribute `{p}` is not declared in {} (declared: {})",
            common.data.display(),
            ds.protected_names.join(", ")
        );
    }
    let splits = split(&ds, fractions(common)?, common.seed)?;
    log::info!(
        "{}: {} rows, {} features; train {} / val {} / test {}",
        spec.name,
        ds.len(),
        ds.n_features(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let exp = Experiment::prepare(&spec.name, splits, common.knn_k)?;
    Ok(Loaded { spec, exp })
}

fn config(common: &CommonArgs, variant: Variant, lambda: f64) -> TrainConfig {
    TrainConfig {
        variant,
        epochs: common.epochs,
        batch_size: common.batch_size,
        lambda,
        knn_k: common.knn_k,
        seed: common.seed,
        protected: protected(common),
        ..TrainConfig::default()
    }
}

fn default_out(root: &Path, command: &str, data: &Path, tag: &str, seed: u64) -> PathBuf {
    let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    root.join(format!("{command}-{stem}-{tag}-seed{seed}"))
}

fn run_tag(cfg: &TrainConfig) -> String {
    let prot = if cfg.protected.is_empty() {
        "nn".to_string()
    } else {
        cfg.protected.join("+")
    };
    format!("{}-{prot}-l{}", cfg.variant.as_str(), cfg.lambda)
}

fn results_table(results: &[&ExperimentResult]) -> Table {
    let mut t = Table::new(results_header(&results[0].protected_names));
    for r in results {
        t.push(r.csv_row());
    }
    t
}

fn cmd_train(root: &Path, a: TrainArgs) -> Result<()> {
    let cfg = config(&a.common, a.variant, a.lambda);
    cfg.validate()?;
    let out = a
        .common
        .out
        .clone()
        .unwrap_or_else(|| default_out(root, "train", &a.common.data, &run_tag(&cfg), cfg.seed));
    let mut dir = OutputDir::create(&out)?;
    let loaded = load(&a.common)?;
    let r = run_experiment(&loaded.exp, &cfg)?;

    let table = results_table(&[&r]);
    dir.write_csv("results.csv", &table)?;
    dir.write_csv("history.csv", &output::history_table(&r))?;
    let ckpt = dir.path("checkpoint.bin");
    save_checkpoint(&r.snapshot, &ckpt)?;
    dir.record("checkpoint.bin");

    println!(
        "{} on {} (lambda {}, seed {}): selected epoch {} of {}",
        r.algorithm, r.dataset, cfg.lambda, cfg.seed, r.selected_epoch, cfg.epochs
    );
    print!("{}", table.render(&[]));
    dir.finish(output::Manifest::new("train", &a.common.data, &loaded.spec.name, Some(&cfg), &r, &loaded.exp))?;
    Ok(())
}

fn cmd_sweep(root: &Path, a: SweepArgs) -> Result<()> {
    let lambdas = parse_lambdas(&a.lambdas)?;
    let cfg = config(&a.common, a.variant, NetworkConfig::DEFAULT_LAMBDA);
    cfg.validate()?;
    let tag = format!("{}-sweep", cfg.variant.as_str());
    let out = a
        .common
        .out
        .clone()
        .unwrap_or_else(|| default_out(root, "sweep", &a.common.data, &tag, cfg.seed));
    let mut dir = OutputDir::create(&out)?;
    let loaded = load(&a.common)?;
    let rows: Vec<SweepRow> = lambda_sweep(&cfg, &lambdas, &loaded.exp)?;

    let mut table = Table::new(SWEEP_HEADER.iter().map(|s| s.to_string()).collect());
    for r in &rows {
        table.push(r.csv_row());
    }
    dir.write_csv("sweep.csv", &table)?;
    print!("{}", table.render(&[]));
    dir.finish(output::Manifest::sweep(&a.common.data, &loaded.spec.name, &cfg, &lambdas, &loaded.exp))?;
    Ok(())
}

fn cmd_compare(root: &Path, a: CompareArgs) -> Result<()> {
    let prot = protected(&a.common);
    ensure!(!prot.is_empty(), "compare needs --protected");
    let base = config(&a.common, Variant::Pred, a.lambda);
    base.validate()?;
    let out = a
        .common
        .out
        .clone()
        .unwrap_or_else(|| default_out(root, "compare", &a.common.data, &prot.join("+"), base.seed));
    let mut dir = OutputDir::create(&out)?;
    let loaded = load(&a.common)?;

    let configs: Vec<TrainConfig> = [(Variant::Auto, false), (Variant::Auto, true), (Variant::Pred, false), (Variant::Pred, true)]
        .into_iter()
        .map(|(variant, grad)| TrainConfig {
            variant,
            protected: if grad { prot.clone() } else { Vec::new() },
            ..base.clone()
        })
        .collect();
    let exp = &loaded.exp;
    let results: Vec<ExperimentResult> = thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run_experiment(exp, c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect::<std::result::Result<_, _>>()
    })?;

    let refs: Vec<&ExperimentResult> = results.iter().collect();
    let table = results_table(&refs);
    dir.write_csv("results.csv", &table)?;
    for r in &results {
        let name = format!("history-{}.csv", r.algorithm);
        dir.write_csv(&name, &output::history_table(r))?;
    }
    print!("{}", table.render(&output::best_markers(&table)));
    println!("* best in column");
    dir.finish(output::Manifest::compare(&a.common.data, &loaded.spec.name, &configs, exp))?;
    Ok(())
}

fn cmd_synth(root: &Path, a: SynthArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| {
        let bias: Vec<String> = a.bias.iter().map(|b| b.to_string()).collect();
        root.join(format!("synth-n{}-d{}-b{}-seed{}", a.n, a.d, bias.join("_"), a.seed))
    });
    let mut dir = OutputDir::create(&out)?;
    let ds = synth_biased(a.n, a.d, &a.bias, a.seed)?;
    let csv_name = "synthetic.csv";
    ds.write_csv(&dir.path(csv_name))?;
    dir.record(csv_name);
    let spec = synthetic_spec(&ds, csv_name);
    dir.write_text("synthetic.toml", &spec.to_toml())?;
    println!(
        "wrote {} rows, {} features, attributes {} to {}",
        ds.len(),
        ds.n_features(),
        ds.protected_names.join(","),
        out.display()
    );
    dir.finish(output::Manifest::synth(a.n, a.d, &a.bias, a.seed))?;
    Ok(())
}
