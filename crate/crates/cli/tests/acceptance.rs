//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.
//!
//! Training runs use the default run configuration (training seeds 1..=3 on
//! the dataset of seed 1) and are cached under the cargo target directory,
//! keyed by a hash of the core sources and the workspace manifest and lock
//! file, so an unchanged tree reuses them.
//! Delete `target/tmp/acceptance` to force a full retrain.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use rubi_core::autodiff::{Grads, Tape, PRIMITIVES};
use rubi_core::config::RunConfig;
use rubi_core::datagen::{generate, read_answer_from_regions, write_dataset, DatasetSpec, Family, Split};
use rubi_core::experiment::{
    execute_run, gen_data, load_data, load_run, report_file, run_grid, GridCell, CHECKPOINT_FILE,
};
use rubi_core::gradcheck::COMPOSITES;
use rubi_core::model::{Batch, DataDims, ModelConfig};
use rubi_core::report::{tv_comparison, RunReport};
use rubi_core::sampler::SamplerKind;
use rubi_core::strategy::{
    apply_activation, fuse_predictions, Combine, MaskActivation, Network, StrategyConfig,
};
use rubi_core::trainer::init_seed;
use rubi_core::Tensor;

const SEEDS: u64 = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn source_hash() -> String {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/src");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    // dependency versions and features can change the numerics too
    files.push(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../Cargo.toml"));
    files.push(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../Cargo.lock"));
    let mut h = Sha256::new();
    for f in files {
        h.update(f.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn base_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::with_seed(1);
    c.output_dir = out.to_path_buf();
    c
}

fn rubi() -> StrategyConfig {
    StrategyConfig::default()
}

fn cells() -> Vec<GridCell> {
    let cell = |strategy: StrategyConfig, sampler: SamplerKind| GridCell {
        label: rubi_core::experiment::run_label(&strategy, sampler),
        strategy,
        sampler,
    };
    vec![
        cell(StrategyConfig::classical(), SamplerKind::Standard),
        cell(rubi(), SamplerKind::Standard),
        cell(StrategyConfig::classical(), SamplerKind::QtypeBalanced),
        cell(
            StrategyConfig {
                mask_activation: MaskActivation::Relu,
                ..rubi()
            },
            SamplerKind::Standard,
        ),
        cell(
            StrategyConfig {
                combine: Combine::Sum,
                ..rubi()
            },
            SamplerKind::Standard,
        ),
        cell(
            StrategyConfig {
                use_qo_loss: false,
                ..rubi()
            },
            SamplerKind::Standard,
        ),
        cell(StrategyConfig::question_only(), SamplerKind::Standard),
    ]
}

struct Runs {
    base: RunConfig,
    ood: BTreeMap<String, Vec<RunReport>>,
    id: BTreeMap<String, Vec<RunReport>>,
}

impl Runs {
    fn mean(&self, split: &BTreeMap<String, Vec<RunReport>>, label: &str) -> f64 {
        let rs = &split[label];
        rs.iter().map(|r| r.accuracy.overall).sum::<f64>() / rs.len() as f64
    }

    fn ood(&self, label: &str) -> f64 {
        self.mean(&self.ood, label)
    }

    fn id(&self, label: &str) -> f64 {
        self.mean(&self.id, label)
    }
}

fn train_all(out: &Path) -> Runs {
    let base = base_config(out);
    let data = if base.data_dir().exists() {
        load_data(&base).expect("cached dataset readable")
    } else {
        gen_data(&base).expect("dataset generation").1
    };
    let t0 = Instant::now();
    let progress = |m: &str| eprintln!("  [{:>5.0}s] {m}", t0.elapsed().as_secs_f64());
    let results = run_grid(&base, &data, &cells(), SEEDS, 1, false, &progress).expect("grid runs");
    let mut ood = BTreeMap::new();
    let mut id = BTreeMap::new();
    for r in results {
        ood.insert(r.cell.label.clone(), r.test_ood);
        id.insert(r.cell.label.clone(), r.test_id);
    }
    Runs { base, ood, id }
}

fn pts(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn c1(r: &Runs) -> Outcome {
    let (a, b) = (r.ood("rubi(sigmoid,product)"), r.ood("classical"));
    outcome(
        a - b >= 0.10,
        format!("test_ood rubi {} vs classical {}: gain {} pts (need >= 10)", pts(a), pts(b), pts(a - b)),
    )
}

fn c2(r: &Runs) -> Outcome {
    let (c, q, u) = (
        r.ood("classical"),
        r.ood("classical+qtype_balanced"),
        r.ood("rubi(sigmoid,product)"),
    );
    outcome(
        q - c >= 0.02 && u - q >= 0.02,
        format!(
            "test_ood classical {} < qtype_balanced {} < rubi {} (gaps {} / {}, need >= 2 each)",
            pts(c),
            pts(q),
            pts(u),
            pts(q - c),
            pts(u - q)
        ),
    )
}

fn c3(r: &Runs) -> Outcome {
    let (s, relu, sum) = (
        r.ood("rubi(sigmoid,product)"),
        r.ood("rubi(relu,product)"),
        r.ood("rubi(sigmoid,sum)"),
    );
    outcome(
        s - relu >= 0.03 && sum < s,
        format!(
            "test_ood sigmoid {} vs relu {} (gap {}, need >= 3); sum {} below product: {}",
            pts(s),
            pts(relu),
            pts(s - relu),
            pts(sum),
            sum < s
        ),
    )
}

fn c4(r: &Runs) -> Outcome {
    let (w, wo) = (r.ood("rubi(sigmoid,product)"), r.ood("rubi(sigmoid,product,no_qo)"));
    outcome(
        w - wo >= 0.0,
        format!("test_ood with L_QO {} vs without {} (gap {}, need >= 0)", pts(w), pts(wo), pts(w - wo)),
    )
}

fn c5(r: &Runs) -> Outcome {
    let (u, c) = (r.id("rubi(sigmoid,product)"), r.id("classical"));
    outcome(
        c - u <= 0.05,
        format!("test_id rubi {} vs classical {}: drop {} pts (need <= 5)", pts(u), pts(c), pts(c - u)),
    )
}

fn c6(r: &Runs) -> Outcome {
    let b = r.base.dataset.bias_strength;
    let spec = &r.base.dataset;
    let min_domain = Family::ALL.iter().map(|&f| spec.domain_size(f)).min().unwrap();
    let ceiling = (1.0 - b) / (min_domain as f64 - 1.0) + 0.10;
    let mut worst_train = f64::INFINITY;
    let mut worst_pattern: f64 = 0.0;
    for k in 0..SEEDS {
        let mut cfg = r.base.reseeded(k);
        cfg.strategy = StrategyConfig::question_only();
        let run = load_run(&cfg.run_dir()).expect("question_only run on disk");
        worst_train = worst_train.min(run.log.final_train_accuracy);
        for h in &run.test_ood.histograms {
            worst_pattern = worst_pattern.max(h.accuracy().unwrap_or(0.0));
        }
    }
    outcome(
        worst_train >= b - 0.05 && worst_pattern <= ceiling,
        format!(
            "question_only train accuracy {:.4} (need >= {:.2}); max per-pattern test_ood accuracy {:.4} (need <= {:.2})",
            worst_train,
            b - 0.05,
            worst_pattern,
            ceiling
        ),
    )
}

fn fused_ce(logits: &[f64], pre: &[f64], target: usize) -> (f64, f64) {
    let mut t = Tape::new();
    let row = |v: &[f64]| Tensor::from_rows(&[v.to_vec()]).unwrap();
    let l = t.constant(row(logits)).unwrap();
    let p = t.constant(row(pre)).unwrap();
    let m = apply_activation(&mut t, p, MaskActivation::Sigmoid).unwrap();
    let f = fuse_predictions(&mut t, l, m, Combine::Product).unwrap();
    let ce = |t: &mut Tape, x| {
        let c = t.cross_entropy(x, &[target]).unwrap();
        t.value(c).data()[0]
    };
    (ce(&mut t, l), ce(&mut t, f))
}

#[allow(clippy::approx_constant)]
fn c7() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    // equal nonnegative logits, pre-activation a positive multiple of one-hot
    for n in [2usize, 3, 6, 13] {
        for level in [0.5, 1.0, 3.0] {
            for c in [0.5, 2.0, 6.0] {
                let logits = vec![level; n];
                for (target, favored) in [(0, 0), (0, n - 1)] {
                    let mut pre = vec![0.0; n];
                    pre[favored] = c;
                    let (base, fused) = fused_ce(&logits, &pre, target);
                    ok &= if target == favored { fused < base } else { fused > base };
                }
            }
        }
    }
    // the two illustrated scenarios
    let ln4 = 4f64.ln();
    let (b1, f1) = fused_ce(&[3.0 + ln4, 3.0], &[3.456, 0.0], 0);
    let (b2, f2) = fused_ce(&[2.0, 2.0], &[0.0, 2.453], 0);
    let exact = (b1 - 0.2231).abs() < 1e-3 && (b2 - 0.6931).abs() < 1e-3;
    let illus = (f1 - 0.06).abs() < 0.01 && (f2 - 1.20).abs() < 0.01;
    ok &= exact && illus && f1 < b1 && f2 > b2;
    notes.push(format!(
        "CE(p=0.8) {b1:.4} -> {f1:.4}, CE(p=0.5) {b2:.4} -> {f2:.4}, 54 one-hot constructions directional"
    ));
    outcome(ok, notes.join("; "))
}

fn c8() -> Outcome {
    let spec = DatasetSpec {
        n_train: 256,
        n_test_id: 1,
        n_test_ood: 1,
        ..DatasetSpec::with_seed(8)
    };
    let ds = generate(&spec).unwrap();
    let dims = DataDims::of(&spec);
    let net = Network::new(&ModelConfig::default(), dims, rubi(), init_seed(8)).unwrap();
    let batch = Batch::new(ds.train.iter().take(64), &dims).unwrap();
    let mut from_qm = Grads::zeros_like(&net.store);
    let mut from_qo = Grads::zeros_like(&net.store);
    let mut total = Grads::zeros_like(&net.store);
    let tape_vals = {
        let mut t = Tape::with_params(&net.store);
        let g = net.compute_losses(&mut t, &batch).unwrap();
        t.backward_into(g.l_qm.unwrap(), &mut from_qm).unwrap();
        t.backward_into(g.l_qo.unwrap(), &mut from_qo).unwrap();
        net.backward_and_route(&t, &g, &mut total).unwrap();
        g.values
    };
    let e_q = net.model.e_q.params();
    let c_q = net.branch.c_q.params();
    let nn_q = net.branch.nn_q.params();
    let eq_zero = e_q.iter().all(|&id| from_qo.is_zero(id));
    let cq_zero = c_q.iter().all(|&id| from_qm.is_zero(id));
    let nnq_qm = nn_q.iter().any(|&id| !from_qm.is_zero(id));
    let nnq_qo = nn_q.iter().any(|&id| !from_qo.is_zero(id));
    let gap = (tape_vals.l_rubi - tape_vals.l_qm - tape_vals.l_qo).abs();
    // the routed single pass equals the sum of the two separate passes
    let mut sum_matches = true;
    for id in net.store.ids() {
        for ((a, b), t) in from_qm.get(id).iter().zip(from_qo.get(id)).zip(total.get(id)) {
            sum_matches &= ((a + b) - t).abs() <= 1e-12 * (1.0 + t.abs());
        }
    }
    outcome(
        eq_zero && cq_zero && nnq_qm && nnq_qo && gap <= 1e-12 && sum_matches,
        format!(
            "e_q zero from L_QO: {eq_zero}; c_q zero from L_QM: {cq_zero}; nn_q nonzero from L_QM/L_QO: {nnq_qm}/{nnq_qo}; |l_rubi - l_qm - l_qo| = {gap:.1e}"
        ),
    )
}

fn c9() -> Outcome {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_rubi-bench"))
        .arg("gradcheck")
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("rubi-bench runs");
    let elapsed = t0.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let mut worst: f64 = 0.0;
    let mut listed = true;
    for name in PRIMITIVES.iter().chain(COMPOSITES) {
        let lines: Vec<&str> = text
            .lines()
            .filter(|l| l.split_whitespace().next() == Some(name))
            .collect();
        listed &= lines.len() == 1;
        if let Some(err) = lines.first().and_then(|l| l.split_whitespace().nth(2)) {
            worst = worst.max(err.parse::<f64>().unwrap_or(f64::INFINITY));
        }
    }
    outcome(
        out.status.success() && listed && worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "{} checks, max relative error {worst:.2e} (need < 1e-4), {:.2}s (need < 30s)",
            PRIMITIVES.len() + COMPOSITES.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn files_equal(a: &Path, b: &Path) -> bool {
    std::fs::read(a).ok().is_some_and(|x| std::fs::read(b).ok().is_some_and(|y| x == y))
}

fn c10(r: &Runs) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    // dataset: two independent generations of the default spec
    let spec = &r.base.dataset;
    let (d1, d2) = (tmp.path().join("d1"), tmp.path().join("d2"));
    write_dataset(&generate(spec).unwrap(), &d1).unwrap();
    write_dataset(&generate(spec).unwrap(), &d2).unwrap();
    let data_same = ["train.jsonl", "test_id.jsonl", "test_ood.jsonl", "dataset.json"]
        .iter()
        .all(|f| files_equal(&d1.join(f), &d2.join(f)));
    let data_matches_cache = ["train.jsonl", "test_ood.jsonl"]
        .iter()
        .all(|f| files_equal(&d1.join(f), &r.base.data_dir().join(f)));
    // a fresh retrain of the default rubi run
    let mut cfg = r.base.clone();
    cfg.output_dir = tmp.path().join("fresh");
    let data = rubi_core::datagen::read_dataset(&d1).unwrap();
    let fresh = execute_run(&cfg, &data, false, |_| {}).unwrap();
    let cached = r.base.run_dir();
    let mut same = files_equal(&fresh.dir.join(CHECKPOINT_FILE), &cached.join(CHECKPOINT_FILE));
    for split in [Split::TestId, Split::TestOod] {
        same &= files_equal(&fresh.dir.join(report_file(split)), &cached.join(report_file(split)));
    }
    // and the generated data is consistent with its own construction rule
    let readable = data
        .train
        .iter()
        .take(2000)
        .filter(|e| read_answer_from_regions(spec, e) == e.answer)
        .count();
    outcome(
        data_same && data_matches_cache && same,
        format!(
            "dataset files identical: {data_same} (and equal to the cached copy: {data_matches_cache}); retrained checkpoint and reports identical: {same}; rule reader agrees on {readable}/2000 noisy train scenes"
        ),
    )
}

fn c11(r: &Runs) -> Outcome {
    let c = tv_comparison(&r.ood["rubi(sigmoid,product)"], &r.ood["classical"]).unwrap();
    outcome(
        c.fraction >= 0.70,
        format!(
            "rubi closer to test_ood truth than classical on {}/{} patterns ({:.1}%, need >= 70%)",
            c.wins,
            c.patterns.len(),
            100.0 * c.fraction
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters from the default harness do not
    // apply here; ignore any arguments.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(source_hash());
    eprintln!("acceptance runs under {}", out.display());
    let t0 = Instant::now();
    let runs = train_all(&out);
    eprintln!("training done in {:.0}s", t0.elapsed().as_secs_f64());

    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "OOD gain over classical", c1(&runs)),
        (2, "sampling baseline ordering", c2(&runs)),
        (3, "mask ablation", c3(&runs)),
        (4, "question-only loss ablation", c4(&runs)),
        (5, "in-distribution cost", c5(&runs)),
        (6, "question-only ceiling", c6(&runs)),
        (7, "loss modulation", c7()),
        (8, "gradient routing", c8()),
        (9, "autodiff soundness", c9()),
        (10, "reproducibility", c10(&runs)),
        (11, "distribution report", c11(&runs)),
    ];
    println!();
    for (n, name, o) in &results {
        println!(
            "criterion {n:>2} {:<4} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
