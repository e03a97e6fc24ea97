//! Reproducible runs on disk: dataset generation, training runs with their
//! artifacts, and the ablation grid.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::{generate, read_dataset, write_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::DataDims;
use crate::report::{accuracy, distribution_report, RunReport};
use crate::sampler::SamplerKind;
use crate::strategy::{Combine, MaskActivation, Network, StrategyConfig};
use crate::trainer::{hex, init_seed, save_checkpoint, train, EpochRecord, RunLog};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUN_LOG_FILE: &str = "run_log.json";

pub fn report_file(split: Split) -> String {
    format!("report_{}.json", split.name())
}

/// Strategy label, suffixed with the sampler when it is not the standard one.
pub fn run_label(strategy: &StrategyConfig, sampler: SamplerKind) -> String {
    match sampler {
        SamplerKind::Standard => strategy.label(),
        s => format!("{}+{}", strategy.label(), s.name()),
    }
}

/// Generates the dataset of `cfg` into its data directory.
pub fn gen_data(cfg: &RunConfig) -> Result<(PathBuf, Dataset)> {
    let ds = generate(&cfg.dataset)?;
    let dir = cfg.data_dir();
    write_dataset(&ds, &dir)?;
    Ok((dir, ds))
}

/// Reads the dataset generated for `cfg`, checking it was made from the same spec.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir();
    if !dir.exists() {
        return Err(Error::Dataset(format!(
            "no dataset at {}; run gen-data with this config first",
            dir.display()
        )));
    }
    let ds = read_dataset(&dir)?;
    if ds.spec != cfg.dataset {
        return Err(Error::Dataset(format!(
            "dataset at {} was generated from a different spec",
            dir.display()
        )));
    }
    Ok(ds)
}

/// Evaluates a trained network on one split.
pub fn evaluate(
    net: &Network,
    data: &Dataset,
    split: Split,
    label: &str,
    cfg: &RunConfig,
    loss_trace: &[EpochRecord],
) -> Result<RunReport> {
    let examples = data.split(split);
    let preds = net.predict_many(examples)?;
    let patterns = data.spec.patterns();
    Ok(RunReport {
        label: label.to_string(),
        split: split.name().to_string(),
        config_digest: hex(&cfg.digest()),
        seed: cfg.train.seed,
        accuracy: accuracy(&preds, examples)?,
        histograms: distribution_report(&preds, examples, &data.train, &data.answers, &patterns, None)?,
        loss_trace: loss_trace.to_vec(),
    })
}

/// A finished run: its network (when trained in this process), log and
/// reports on both test splits.
#[derive(Debug)]
pub struct RunOutput {
    pub run_id: String,
    pub dir: PathBuf,
    pub log: RunLog,
    pub test_id: RunReport,
    pub test_ood: RunReport,
    pub net: Option<Network>,
}

/// Trains `cfg` on `data` in memory.
pub fn train_in_memory(
    cfg: &RunConfig,
    data: &Dataset,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Network, RunLog, RunReport, RunReport)> {
    cfg.validate()?;
    let mut net = Network::new(&cfg.model, DataDims::of(&data.spec), cfg.strategy, init_seed(cfg.train.seed))?;
    let log = train(&mut net, data, &cfg.train, on_epoch)?;
    let label = run_label(&cfg.strategy, cfg.train.sampler);
    let id = evaluate(&net, data, Split::TestId, &label, cfg, &log.epochs)?;
    let ood = evaluate(&net, data, Split::TestOod, &label, cfg, &log.epochs)?;
    Ok((net, log, id, ood))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Report(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// True when every artifact of the run in `dir` exists.
pub fn run_complete(dir: &Path) -> bool {
    [CONFIG_FILE, CHECKPOINT_FILE, RUN_LOG_FILE]
        .into_iter()
        .map(String::from)
        .chain([report_file(Split::TestId), report_file(Split::TestOod)])
        .all(|f| dir.join(f).is_file())
}

/// Trains `cfg` and writes config, checkpoint, run log and both reports to
/// its run directory. An existing run directory is refused unless `force`.
pub fn execute_run(
    cfg: &RunConfig,
    data: &Dataset,
    force: bool,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutput> {
    let dir = cfg.run_dir();
    if dir.exists() {
        if !force {
            return Err(Error::RunExists(dir));
        }
        std::fs::remove_dir_all(&dir)?;
    }
    let (net, log, test_id, test_ood) = train_in_memory(cfg, data, on_epoch)?;
    // Written to a sibling first so an interrupted run never looks complete.
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    write_json(&tmp.join(CONFIG_FILE), cfg)?;
    save_checkpoint(&net.store, &cfg.digest(), &tmp.join(CHECKPOINT_FILE))?;
    write_json(&tmp.join(RUN_LOG_FILE), &log)?;
    write_json(&tmp.join(report_file(Split::TestId)), &test_id)?;
    write_json(&tmp.join(report_file(Split::TestOod)), &test_ood)?;
    std::fs::rename(&tmp, &dir)?;
    Ok(RunOutput {
        run_id: cfg.run_id(),
        dir,
        log,
        test_id,
        test_ood,
        net: Some(net),
    })
}

/// Reads the artifacts of a finished run directory.
pub fn load_run(dir: &Path) -> Result<RunOutput> {
    if !run_complete(dir) {
        return Err(Error::Report(format!("{} is not a complete run directory", dir.display())));
    }
    let cfg: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
    Ok(RunOutput {
        run_id: cfg.run_id(),
        dir: dir.to_path_buf(),
        log: read_json(&dir.join(RUN_LOG_FILE))?,
        test_id: read_json(&dir.join(report_file(Split::TestId)))?,
        test_ood: read_json(&dir.join(report_file(Split::TestOod)))?,
        net: None,
    })
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub label: String,
    pub strategy: StrategyConfig,
    pub sampler: SamplerKind,
}

/// The nine ablation rows: strategies and mask variants under the standard
/// sampler, then classical under each sampler.
pub fn ablation_grid() -> Vec<GridCell> {
    let rubi = StrategyConfig::default();
    let strategies = [
        StrategyConfig::classical(),
        rubi,
        StrategyConfig {
            mask_activation: MaskActivation::Relu,
            ..rubi
        },
        StrategyConfig {
            combine: Combine::Sum,
            ..rubi
        },
        StrategyConfig {
            use_qo_loss: false,
            ..rubi
        },
        StrategyConfig::question_only(),
    ];
    let mut cells: Vec<GridCell> = strategies
        .into_iter()
        .map(|s| GridCell {
            label: s.label(),
            strategy: s,
            sampler: SamplerKind::Standard,
        })
        .collect();
    for sampler in [SamplerKind::Standard, SamplerKind::AnswerBalanced, SamplerKind::QtypeBalanced] {
        cells.push(GridCell {
            label: format!("classical+{}", sampler.name()),
            strategy: StrategyConfig::classical(),
            sampler,
        });
    }
    cells
}

impl GridCell {
    pub fn config(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.strategy = self.strategy;
        c.train.sampler = self.sampler;
        c
    }
}

/// Reports of one grid cell over all seeds.
#[derive(Debug)]
pub struct CellResult {
    pub cell: GridCell,
    pub test_id: Vec<RunReport>,
    pub test_ood: Vec<RunReport>,
}

/// Runs every cell of `cells` for `seeds` training seeds on up to `workers`
/// threads. Cells with identical configurations share one run; runs already
/// complete on disk are reused unless `force`.
pub fn run_grid(
    base: &RunConfig,
    data: &Dataset,
    cells: &[GridCell],
    seeds: u64,
    workers: usize,
    force: bool,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<Vec<CellResult>> {
    let mut jobs: Vec<RunConfig> = Vec::new();
    for cell in cells {
        for k in 0..seeds {
            let cfg = cell.config(base).reseeded(k);
            if !jobs.iter().any(|j| j.run_id() == cfg.run_id()) {
                jobs.push(cfg);
            }
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(RunReport, RunReport)>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = jobs.get(i) else { break };
                let label = run_label(&cfg.strategy, cfg.train.sampler);
                let dir = cfg.run_dir();
                let out = if !force && run_complete(&dir) {
                    progress(&format!("reusing {label} seed {} ({})", cfg.train.seed, cfg.run_id()));
                    load_run(&dir)
                } else {
                    progress(&format!("training {label} seed {} ({})", cfg.train.seed, cfg.run_id()));
                    execute_run(cfg, data, true, |_| {})
                };
                let out = out.map(|o| {
                    progress(&format!(
                        "done {label} seed {}: test_id {:.4} test_ood {:.4}",
                        cfg.train.seed, o.test_id.accuracy.overall, o.test_ood.accuracy.overall
                    ));
                    (o.test_id, o.test_ood)
                });
                results.lock().expect("no worker panicked")[i] = Some(out);
            });
        }
    });
    let mut done: Vec<(String, RunReport, RunReport)> = Vec::with_capacity(jobs.len());
    for (cfg, r) in jobs.iter().zip(results.into_inner().expect("no worker panicked")) {
        let (id, ood) = r.expect("every job ran")?;
        done.push((cfg.run_id(), id, ood));
    }
    Ok(cells
        .iter()
        .map(|cell| {
            let (mut test_id, mut test_ood) = (Vec::new(), Vec::new());
            for k in 0..seeds {
                let id = cell.config(base).reseeded(k).run_id();
                let (_, a, b) = done.iter().find(|(r, _, _)| *r == id).expect("job exists");
                test_id.push(RunReport {
                    label: cell.label.clone(),
                    ..a.clone()
                });
                test_ood.push(RunReport {
                    label: cell.label.clone(),
                    ..b.clone()
                });
            }
            CellResult {
                cell: cell.clone(),
                test_id,
                test_ood,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_nine_distinct_labels() {
        let g = ablation_grid();
        assert_eq!(g.len(), 9);
        let mut labels: Vec<&str> = g.iter().map(|c| c.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), 9);
        assert!(labels.contains(&"rubi(relu,product)"));
        assert!(labels.contains(&"rubi(sigmoid,sum)"));
        assert!(labels.contains(&"rubi(sigmoid,product,no_qo)"));
    }

    #[test]
    fn labels() {
        assert_eq!(run_label(&StrategyConfig::classical(), SamplerKind::Standard), "classical");
        assert_eq!(
            run_label(&StrategyConfig::classical(), SamplerKind::QtypeBalanced),
            "classical+qtype_balanced"
        );
    }
}
