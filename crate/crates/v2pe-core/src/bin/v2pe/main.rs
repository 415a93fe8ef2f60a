//! Command-line entry point for the position-encoding lab.
//!
//! One config file drives everything; every subcommand is reproducible from
//! config + seeds. Outputs land under `out_dir/{suites,ckpt,results,attn}`
//! unless overridden. `V2PE_WORKERS` caps the scoring/training thread pool.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use v2pe_core::config::ExperimentConfig;
use v2pe_core::longmr::{
    make_suite, read_samples_jsonl, sweep, write_records_csv, write_samples_jsonl, EmbedSpec,
    EvalDelta, NeedleSample,
};
use v2pe_core::posindex::{assign_deltas, derive_positions};
use v2pe_core::selftest;
use v2pe_core::tinyformer::{train, TinyModel, TrainExample};

#[derive(Parser)]
#[command(
    name = "v2pe",
    version,
    about = "Variable visual position encoding lab: synthetic needle suites, tiny-transformer training, and position-scheme sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an evaluation suite (JSONL of needle samples).
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Output path; defaults to out_dir/suites/suite.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a freshly generated pool and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint stem; defaults to "model".
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Score one (delta, scheme) pair over a suite; prints CSV rows.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value = "adaptive")]
        delta: String,
        #[arg(long, default_value = "standard")]
        scheme: String,
    },
    /// Full index-scheme x embed-scheme grid; writes a CSV.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        /// Comma-separated: rationals, "uniform", "adaptive".
        #[arg(long)]
        deltas: String,
        /// Comma-separated: standard, linear, ntk.
        #[arg(long)]
        schemes: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tail attention rows (max over heads) for one sample, as a CSV matrix.
    DumpAttn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        /// Index of the sample within the suite.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 16)]
        tail_rows: usize,
        /// Index policy: a rational, "uniform", or "adaptive".
        #[arg(long, default_value = "1")]
        delta: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the headless invariant suite.
    Selftest,
}

fn main() -> Result<()> {
    init_workers()?;
    match Cli::parse().command {
        Command::Gen { config, out } => cmd_gen(&config, out),
        Command::Train { config, label } => cmd_train(&config, &label),
        Command::Eval {
            model,
            suite,
            delta,
            scheme,
        } => cmd_eval(&model, &suite, &delta, &scheme),
        Command::Sweep {
            model,
            suite,
            deltas,
            schemes,
            out,
        } => cmd_sweep(&model, &suite, &deltas, &schemes, out),
        Command::DumpAttn {
            model,
            suite,
            sample,
            layer,
            tail_rows,
            delta,
            out,
        } => cmd_dump_attn(&model, &suite, sample, layer, tail_rows, &delta, out),
        Command::Selftest => {
            if selftest::run_all() {
                Ok(())
            } else {
                bail!("selftest failed")
            }
        }
    }
}

fn init_workers() -> Result<()> {
    if let Ok(n) = std::env::var("V2PE_WORKERS") {
        let n: usize = n
            .parse()
            .with_context(|| format!("V2PE_WORKERS must be a number, got `{n}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing worker pool")?;
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_suite(path: &Path) -> Result<Vec<NeedleSample>> {
    let file = File::open(path).with_context(|| format!("opening suite {}", path.display()))?;
    let suite = read_samples_jsonl(BufReader::new(file))
        .with_context(|| format!("parsing suite {}", path.display()))?;
    if suite.is_empty() {
        bail!("suite {} is empty", path.display());
    }
    Ok(suite)
}

fn cmd_gen(config_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.join("suites").join("suite.jsonl"));
    ensure_parent(&out)?;
    let gen_cfg = cfg.data.gen_config(cfg.model.vocab_size, 0);
    let suite = make_suite(
        &cfg.eval.buckets,
        cfg.eval.per_bucket,
        &gen_cfg,
        cfg.eval.seed,
    )?;
    let mut file = BufWriter::new(File::create(&out)?);
    write_samples_jsonl(&suite, &mut file)?;
    file.flush()?;
    println!("wrote {} samples to {}", suite.len(), out.display());
    Ok(())
}

fn cmd_train(config_path: &Path, label: &str) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let gen_cfg = cfg.data.gen_config(cfg.model.vocab_size, 0);
    let pool = make_suite(
        &cfg.train.buckets,
        cfg.train.pool_per_bucket,
        &gen_cfg,
        cfg.train.data_seed,
    )?;
    let dataset: Vec<TrainExample> = pool.iter().map(|s| s.to_train_example()).collect();
    println!(
        "training on {} sequences (buckets {:?}), {} steps",
        dataset.len(),
        cfg.train.buckets,
        cfg.train.steps
    );
    let (model, log) = train(
        &cfg.model.model_config(),
        &cfg.train.settings(),
        &dataset,
        &cfg.train.delta_policy,
    )?;

    let ckpt_path = cfg.out_dir.join("ckpt").join(format!("{label}.ckpt"));
    ensure_parent(&ckpt_path)?;
    model.save(&ckpt_path)?;
    let log_path = cfg.out_dir.join("ckpt").join(format!("{label}.trainlog.jsonl"));
    let mut log_file = BufWriter::new(File::create(&log_path)?);
    for record in &log.records {
        serde_json::to_writer(&mut log_file, record)?;
        log_file.write_all(b"\n")?;
    }
    log_file.flush()?;
    println!(
        "saved {} (final loss {:.4}) and {}",
        ckpt_path.display(),
        log.final_loss().unwrap_or(f64::NAN),
        log_path.display()
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr<Err = String>>(csv: &str, what: &str) -> Result<Vec<T>> {
    let items: Result<Vec<T>, String> = csv.split(',').map(|s| s.trim().parse()).collect();
    items.map_err(|e| anyhow::anyhow!("parsing {what}: {e}"))
}

fn cmd_eval(model_path: &Path, suite_path: &Path, delta: &str, scheme: &str) -> Result<()> {
    let model = TinyModel::load(model_path)?;
    let suite = load_suite(suite_path)?;
    let deltas: Vec<EvalDelta> = parse_list(delta, "--delta")?;
    let schemes: Vec<EmbedSpec> = parse_list(scheme, "--scheme")?;
    let records = sweep(&model, &suite, &deltas, &schemes)?;
    let mut out = Vec::new();
    write_records_csv(&records, &mut out)?;
    print!("{}", String::from_utf8(out)?);
    Ok(())
}

fn cmd_sweep(
    model_path: &Path,
    suite_path: &Path,
    deltas: &str,
    schemes: &str,
    out: Option<PathBuf>,
) -> Result<()> {
    let model = TinyModel::load(model_path)?;
    let suite = load_suite(suite_path)?;
    let deltas: Vec<EvalDelta> = parse_list(deltas, "--deltas")?;
    let schemes: Vec<EmbedSpec> = parse_list(schemes, "--schemes")?;
    let records = sweep(&model, &suite, &deltas, &schemes)?;
    let out = out.unwrap_or_else(|| PathBuf::from("out/results/sweep.csv"));
    ensure_parent(&out)?;
    let mut file = BufWriter::new(File::create(&out)?);
    write_records_csv(&records, &mut file)?;
    file.flush()?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn cmd_dump_attn(
    model_path: &Path,
    suite_path: &Path,
    sample_index: usize,
    layer: usize,
    tail_rows: usize,
    delta: &str,
    out: Option<PathBuf>,
) -> Result<()> {
    let model = TinyModel::load(model_path)?;
    let suite = load_suite(suite_path)?;
    let Some(sample) = suite.get(sample_index) else {
        bail!("suite has {} samples, asked for {sample_index}", suite.len());
    };
    let eval_delta: EvalDelta = delta
        .parse()
        .map_err(|e: String| anyhow::anyhow!("parsing --delta: {e}"))?;
    let policy = eval_delta.policy(model.config().max_trained_window);
    let assignment = assign_deltas(&sample.haystack, &policy)?;
    let positions = derive_positions(&sample.haystack, &assignment, policy.target)?;
    let matrix = model.dump_attention(&sample.haystack, &positions, layer, tail_rows)?;

    let out = out.unwrap_or_else(|| PathBuf::from(format!("out/attn/layer{layer}.csv")));
    ensure_parent(&out)?;
    let mut file = BufWriter::new(File::create(&out)?);
    for row in matrix.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(file, "{}", line.join(","))?;
    }
    file.flush()?;
    println!(
        "wrote {}x{} attention matrix (layer {layer}, delta {eval_delta}) to {}",
        matrix.nrows(),
        matrix.ncols(),
        out.display()
    );
    Ok(())
}
