//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 for invalid input, 2 for runtime failures.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{LossMode, RunConfig};
use crate::dataset::{generate_synthetic, load_features, SyntheticSpec};
use crate::error::{Error, Result};
use crate::harness::{
    ablation_summary, ablation_suite, arms_csv, batch_size_sweep, load_data, split, sweep_summary, sweep_svg,
    Runner, SWEEP_MODES, SWEEP_SIZES,
};
use crate::trainer::{evaluate, gradcheck, train, Checkpoint, Model};

#[derive(Parser, Debug)]
#[command(name = "sslcl", version, about = "Sample-label contrastive training for imbalanced multimodal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set hp.alpha=2.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic feature file.
    GenData {
        #[arg(long, default_value = "meld-like")]
        preset: String,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every configured seed; writes a checkpoint and a metrics log per seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split of its data, or on `--data`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare autodiff gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Batch-size sweep over the sslcl, supcon and ce-only modes.
    SweepBatch {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_SIZES.to_vec())]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Similarity, component and label-network ablations.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// File, then `--set` overrides, then `SSLCL_SEED`.
fn effective_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(args.overrides.iter().map(String::as_str))?;
    config.apply_seed_env()?;
    config.validate()?;
    Ok(config)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { preset, n, seed, out } => {
            let data = generate_synthetic(&SyntheticSpec::preset(&preset, n, seed)?)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            data.save(&out)?;
            println!("wrote {} records ({} classes) to {}", data.len(), data.header.k, out.display());
        }
        Command::Train { cfg, out } => {
            let config = effective_config(&cfg)?;
            let data = load_data(&config)?;
            let parts = split(&data, config.split_seed)?;
            write(&out.join("config.json"), &config.to_json())?;
            for &seed in &config.seeds {
                let run = train(&config, seed, &parts.train, Some(&parts.val))?;
                let dir = out.join(format!("seed-{seed}"));
                write(&dir.join("checkpoint.json"), &run.checkpoint.to_json())?;
                write(&dir.join("metrics.jsonl"), &run.log.to_jsonl())?;
                let report = evaluate(&run.model, &parts.test)?;
                println!(
                    "seed {seed}: test w-F1 {:.4}, accuracy {:.4} -> {}",
                    report.weighted_f1,
                    report.accuracy,
                    dir.display()
                );
            }
        }
        Command::Eval { checkpoint, data } => {
            let ckpt = Checkpoint::from_json(&fs::read_to_string(&checkpoint)?)?;
            let model = Model::from_checkpoint(&ckpt)?;
            let target = match data {
                Some(path) => load_features(path)?,
                None => split(&load_data(&ckpt.config)?, ckpt.config.split_seed)?.test,
            };
            if target.header != ckpt.header {
                return Err(Error::Dataset("data header does not match the checkpoint".into()));
            }
            println!("{}", serde_json::to_string_pretty(&evaluate(&model, &target)?)?);
        }
        Command::Gradcheck { cfg, instances } => {
            let config = effective_config(&cfg)?;
            let report = gradcheck(&config, instances, config.seeds[0])?;
            for (group, err) in &report.max_rel_err {
                println!("{group:<8} max rel. err {err:.3e}");
            }
            println!(
                "{}: {} entries over {} instances, max rel. err {:.3e} at {}",
                if report.passed { "pass" } else { "FAIL" },
                report.entries_checked,
                report.instances,
                report.worst_rel_err,
                report.worst_parameter
            );
            if !report.passed {
                return Err(Error::NonFinite(format!(
                    "gradient check failed: rel. err {:.3e}",
                    report.worst_rel_err
                )));
            }
        }
        Command::SweepBatch { cfg, out, sizes, jobs } => {
            let config = effective_config(&cfg)?;
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(Error::Config("`sizes` must be positive batch sizes".into()));
            }
            let data = load_data(&config)?;
            let parts = split(&data, config.split_seed)?;
            let runner = Runner { split: &parts, jobs };
            let result = batch_size_sweep(&config, &runner, &sizes, &SWEEP_MODES)?;
            let summary = sweep_summary(&result, &config);
            write(&out.join("config.json"), &config.to_json())?;
            write(&out.join("sweep.csv"), &arms_csv(result.arms(), &data.header.label_names))?;
            write(&out.join("summary.txt"), &summary)?;
            write(&out.join("results.json"), &serde_json::to_string(&result)?)?;
            let svg = sweep_svg(&result).replacen(
                "\n",
                &format!("\n<desc>{}</desc>\n", xml_escape(&config.to_json())),
                1,
            );
            write(&out.join("sweep.svg"), &svg)?;
            print!("{summary}");
        }
        Command::Ablate { cfg, out, jobs } => {
            let mut config = effective_config(&cfg)?;
            config.loss_mode = LossMode::Sslcl;
            let data = load_data(&config)?;
            let parts = split(&data, config.split_seed)?;
            let runner = Runner { split: &parts, jobs };
            let result = ablation_suite(&config, &runner)?;
            let summary = ablation_summary(&result, &config);
            write(&out.join("config.json"), &config.to_json())?;
            write(&out.join("ablation.csv"), &arms_csv(&result.arms, &data.header.label_names))?;
            write(&out.join("summary.txt"), &summary)?;
            write(&out.join("results.json"), &serde_json::to_string(&result)?)?;
            print!("{summary}");
        }
    }
    Ok(())
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
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
