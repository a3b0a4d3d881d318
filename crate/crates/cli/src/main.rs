use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use nsens_core::harness::{self, ExperimentConfig};
use nsens_core::{Metric, Mode};

#[derive(Parser)]
#[command(name = "nsens", version, about = "Novelty-search ensembles with a random-forest distance surrogate")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `output_directory` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw, train and measure a sample of architectures; writes distances.csv.
    Sample,
    /// Fit the forest on a distance dataset and report held-out rank fidelity.
    TrainSurrogate {
        /// Distance dataset; defaults to <out>/distances.csv.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run novelty search and train the selected ensemble.
    Search {
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        metric: Option<Metric>,
        /// Surrogate model file; defaults to <out>/surrogate.nsrf.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Exact versus surrogate mode on matched seeds.
    Compare {
        #[arg(long)]
        metric: Option<Metric>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Score a saved ensemble on the test split.
    Evaluate {
        /// Ensemble directory; defaults to <out>/ensemble.
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Final accuracy per diversity metric over repeated seeds. The first
    /// metric is the baseline for the significance tests.
    MetricStudy {
        #[arg(long, value_delimiter = ',', default_value = "prop1,prop2,cos-dist")]
        metrics: Vec<Metric>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().context("--config is required")?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.base_dir.join(&cfg.output_directory));
    let default_in = |name: &str, given: &Option<PathBuf>| given.clone().unwrap_or_else(|| out.join(name));

    match &cli.command {
        Command::Sample => {
            let s = harness::cmd_sample(&cfg, &out)?;
            println!(
                "sampled {} architectures, {} pairs, {} rows -> {}",
                s.sample_size,
                s.unique_pairs,
                s.rows,
                out.join(harness::DISTANCES_FILE).display()
            );
        }
        Command::TrainSurrogate { dataset } => {
            let dataset = default_in(harness::DISTANCES_FILE, dataset);
            let s = harness::cmd_train_surrogate(&cfg, &dataset, &out)?;
            for m in &s.fidelity.metrics {
                println!(
                    "{:<10} spearman {:>7.4}{}  mae {:.4}",
                    m.metric.to_string(),
                    m.spearman,
                    if m.degenerate { " (degenerate)" } else { "" },
                    m.mean_abs_error
                );
            }
        }
        Command::Search { mode, metric, model } => {
            if let Some(mode) = mode {
                cfg.novelty_search.mode = *mode;
            }
            if let Some(metric) = metric {
                cfg.novelty_search.diversity_metric = *metric;
            }
            let model = default_in(harness::SURROGATE_FILE, model);
            let model: Option<&Path> = (cfg.novelty_search.mode == Mode::Surrogate).then_some(model.as_path());
            let r = harness::cmd_search(&cfg, model, &out)?;
            println!(
                "{} mode, {}: test accuracy {:.4} with {} members in {:.2}s",
                r.report.mode,
                r.report.metric,
                r.report.test_accuracy,
                r.report.ensemble.len(),
                r.report.seconds.total
            );
        }
        Command::Compare { metric, repetitions } => {
            if let Some(metric) = metric {
                cfg.novelty_search.diversity_metric = *metric;
            }
            if let Some(r) = repetitions {
                cfg.repetitions = *r;
            }
            let s = harness::cmd_compare(&cfg, &out)?;
            println!("mode       median_seconds  median_test_accuracy");
            println!("exact      {:>14.3}  {:>20.4}", s.median_exact_seconds, s.median_exact_accuracy);
            println!("surrogate  {:>14.3}  {:>20.4}", s.median_surrogate_seconds, s.median_surrogate_accuracy);
            println!("runtime ratio {:.2} (pretraining {:.2}s)", s.runtime_ratio_seconds, s.pretraining_seconds);
            if let Some(t) = s.accuracy_test {
                println!("accuracy Mann-Whitney p = {:.4}", t.p_value);
            }
        }
        Command::Evaluate { ensemble } => {
            let dir = default_in(harness::ENSEMBLE_DIR, ensemble);
            let e = harness::cmd_evaluate(&cfg, &dir, &out)?;
            println!("test accuracy {:.4} ({} members)", e.test_accuracy, e.members);
        }
        Command::MetricStudy { metrics, repetitions } => {
            if let Some(r) = repetitions {
                cfg.repetitions = *r;
            }
            let s = harness::cmd_metric_study(&cfg, metrics, &out)?;
            print_json(&s.results)?;
        }
    }
    Ok(())
}
