use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use rubi_core::config::RunConfig;
use rubi_core::datagen::{bias_audit, QuestionPattern, Split};
use rubi_core::experiment::{ablation_grid, execute_run, gen_data, load_data, load_run, run_grid};
use rubi_core::gradcheck::{run_suite, Checker, SUITE_TOLERANCE};
use rubi_core::report::{compare_runs, tv_comparison, ComparisonTable, RunReport};
use rubi_core::trainer::hex;

#[derive(Parser)]
#[command(name = "rubi-bench", version, about = "Changing-priors VQA benchmark: data, training, ablations, reports")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a configuration with every default filled in.
    DefaultConfig {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Generate the train / test_id / test_ood splits and the sidecar.
    GenData,
    /// Train one strategy for one or more seeds.
    Train {
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Overwrite existing run directories.
        #[arg(long)]
        force: bool,
    },
    /// Run the ablation grid and emit one comparison table per test split.
    Ablate {
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Retrain runs that already exist on disk.
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of every primitive and the composite losses.
    Gradcheck,
    /// Histograms, comparison tables and TV summary for finished runs.
    Report {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Only this pattern, as family:object (e.g. color:3).
        #[arg(long)]
        pattern: Vec<QuestionPattern>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = || -> Result<RunConfig> {
        let path = cli.config.as_deref().context("this command needs --config <path>")?;
        RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
    };
    match &cli.command {
        Command::DefaultConfig { seed } => {
            let text = serde_json::to_string_pretty(&RunConfig::with_seed(*seed))?;
            match writeln!(std::io::stdout(), "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => Ok(r?),
            }
        }
        Command::GenData => cmd_gen_data(&config()?),
        Command::Train { seeds, force } => cmd_train(&config()?, *seeds, *force),
        Command::Ablate { seeds, workers, force } => cmd_ablate(&config()?, *seeds, *workers, *force),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Report { runs, pattern, out } => cmd_report(runs, pattern, out),
    }
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let (dir, ds) = gen_data(cfg)?;
    println!("wrote {} / {} / {} examples to {}", ds.train.len(), ds.test_id.len(), ds.test_ood.len(), dir.display());
    println!("train bias audit ({} patterns):", ds.priors.entries.len());
    println!("{:<10} {:>6} {:>10} {:>8} {:>8}", "pattern", "n", "majority", "share", "entropy");
    let labels = ds.answers.labels();
    for a in bias_audit(&ds.train) {
        println!(
            "{:<10} {:>6} {:>10} {:>8.3} {:>8.3}",
            a.pattern.to_string(),
            a.n,
            labels[a.majority_answer],
            a.majority_share,
            a.entropy
        );
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_tables(dir: &Path, tables: &[ComparisonTable]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in tables {
        std::fs::write(dir.join(format!("comparison_{}.csv", t.split)), t.to_csv())?;
        write_json(&dir.join(format!("comparison_{}.json", t.split)), t)?;
        print!("{}", t.to_text());
    }
    println!("tables written to {}", dir.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, seeds: u64, force: bool) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let data = load_data(cfg)?;
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for k in 0..seeds {
        let c = cfg.reseeded(k);
        eprintln!("run {} ({}, seed {})", c.run_id(), c.strategy.label(), c.train.seed);
        let out = execute_run(&c, &data, force, |r| {
            eprintln!(
                "  epoch {:>2} lr {:.2e} l_qm {:.4} l_qo {:.4} train {:.4} test_id {:.4} test_ood {:.4}",
                r.epoch, r.lr, r.l_qm, r.l_qo, r.train_accuracy, r.test_id_accuracy, r.test_ood_accuracy
            )
        })?;
        println!("{}", out.dir.display());
        id.push(out.test_id);
        ood.push(out.test_ood);
    }
    let dir = cfg.output_dir.join("tables").join(cfg.run_id());
    write_tables(&dir, &[compare_runs(&id)?, compare_runs(&ood)?])
}

fn cmd_ablate(cfg: &RunConfig, seeds: u64, workers: usize, force: bool) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let data = load_data(cfg)?;
    let grid = ablation_grid();
    let results = run_grid(cfg, &data, &grid, seeds, workers, force, &|m| eprintln!("{m}"))?;
    let id: Vec<RunReport> = results.iter().flat_map(|r| r.test_id.clone()).collect();
    let ood: Vec<RunReport> = results.iter().flat_map(|r| r.test_ood.clone()).collect();
    let dir = cfg
        .output_dir
        .join("ablations")
        .join(format!("{}-x{seeds}", &hex(&cfg.digest())[..16]));
    write_tables(&dir, &[compare_runs(&id)?, compare_runs(&ood)?])
}

fn cmd_gradcheck() -> Result<()> {
    let out = run_suite(&Checker::default())?;
    let mut failed = 0;
    for o in &out {
        println!(
            "{:<20} max_rel_err {:.3e}  {}",
            o.name,
            o.max_error,
            if o.passed { "pass" } else { "FAIL" }
        );
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        bail!("{failed} gradient checks exceeded {SUITE_TOLERANCE:e}");
    }
    println!("all {} checks below {SUITE_TOLERANCE:e}", out.len());
    Ok(())
}

#[derive(Serialize)]
struct HistogramFile<'a> {
    run_id: &'a str,
    label: &'a str,
    split: &'a str,
    histograms: Vec<&'a rubi_core::report::PatternHistograms>,
}

fn cmd_report(runs: &[PathBuf], patterns: &[QuestionPattern], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut id = Vec::new();
    let mut ood = Vec::new();
    for dir in runs {
        let run = load_run(dir).with_context(|| format!("loading run {}", dir.display()))?;
        for r in [&run.test_id, &run.test_ood] {
            let hs: Vec<_> = if patterns.is_empty() {
                r.histograms.iter().collect()
            } else {
                patterns
                    .iter()
                    .map(|p| {
                        r.histograms
                            .iter()
                            .find(|h| h.pattern == *p)
                            .with_context(|| format!("unknown question pattern {p}"))
                    })
                    .collect::<Result<_>>()?
            };
            let file = HistogramFile {
                run_id: &run.run_id,
                label: &r.label,
                split: &r.split,
                histograms: hs,
            };
            write_json(&out.join(format!("histograms_{}_{}.json", run.run_id, r.split)), &file)?;
        }
        id.push(run.test_id);
        ood.push(run.test_ood);
    }
    write_tables(out, &[compare_runs(&id)?, compare_runs(&ood)?])?;

    let classical: Vec<RunReport> = ood.iter().filter(|r| r.label == "classical").cloned().collect();
    let mut labels: Vec<&str> = ood.iter().map(|r| r.label.as_str()).filter(|l| *l != "classical").collect();
    labels.sort_unstable();
    labels.dedup();
    if !classical.is_empty() && !labels.is_empty() {
        let mut summary = Vec::new();
        println!("{} TV to ground truth vs classical, per pattern:", Split::TestOod.name());
        for l in labels {
            let mine: Vec<RunReport> = ood.iter().filter(|r| r.label == l).cloned().collect();
            let c = tv_comparison(&mine, &classical)?;
            println!("  {:<32} closer on {}/{} patterns ({:.0}%)", l, c.wins, c.patterns.len(), 100.0 * c.fraction);
            summary.push(c);
        }
        write_json(&out.join("tv_summary.json"), &summary)?;
    }
    Ok(())
}
