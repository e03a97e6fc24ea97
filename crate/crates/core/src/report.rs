//! Accuracy with per-family columns, answer-distribution histograms and
//! multi-run comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{AnswerSpace, Example, Family, QuestionPattern};
use crate::error::{Error, Result};
use crate::trainer::EpochRecord;

/// Accuracy columns: exist answers are Yes/No, count answers Number and
/// color answers Other. A family absent from the split is `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilyColumns {
    pub yes_no: Option<f64>,
    pub number: Option<f64>,
    pub other: Option<f64>,
}

impl FamilyColumns {
    pub fn get(&self, f: Family) -> Option<f64> {
        match f {
            Family::Exist => self.yes_no,
            Family::Count => self.number,
            Family::Color => self.other,
        }
    }

    fn set(&mut self, f: Family, v: Option<f64>) {
        match f {
            Family::Exist => self.yes_no = v,
            Family::Count => self.number = v,
            Family::Color => self.other = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    pub per_family: FamilyColumns,
    pub n: usize,
    pub family_counts: BTreeMap<String, usize>,
}

/// Top-1 exact-match accuracy, overall and per family.
pub fn accuracy(predictions: &[usize], examples: &[Example]) -> Result<Accuracy> {
    if predictions.len() != examples.len() {
        return Err(Error::Report(format!(
            "{} predictions for {} examples",
            predictions.len(),
            examples.len()
        )));
    }
    let mut hits = [0usize; 3];
    let mut counts = [0usize; 3];
    for (p, e) in predictions.iter().zip(examples) {
        let k = family_slot(e.pattern.family);
        counts[k] += 1;
        hits[k] += usize::from(*p == e.answer);
    }
    let total: usize = counts.iter().sum();
    let mut per_family = FamilyColumns::default();
    let mut family_counts = BTreeMap::new();
    for f in Family::ALL {
        let k = family_slot(f);
        per_family.set(f, (counts[k] > 0).then(|| hits[k] as f64 / counts[k] as f64));
        family_counts.insert(f.answer_type().to_string(), counts[k]);
    }
    Ok(Accuracy {
        overall: if total == 0 {
            0.0
        } else {
            hits.iter().sum::<usize>() as f64 / total as f64
        },
        per_family,
        n: total,
        family_counts,
    })
}

fn family_slot(f: Family) -> usize {
    match f {
        Family::Exist => 0,
        Family::Count => 1,
        Family::Color => 2,
    }
}

/// `min(#annotators agreeing with the prediction / 3, 1)`.
pub fn soft_accuracy(prediction: usize, annotators: &[usize]) -> f64 {
    let m = annotators.iter().filter(|&&a| a == prediction).count();
    (m as f64 / 3.0).min(1.0)
}

/// Half the L1 distance between two count histograms after normalization.
pub fn total_variation(a: &[usize], b: &[usize]) -> f64 {
    let na: usize = a.iter().sum();
    let nb: usize = b.iter().sum();
    if na == 0 || nb == 0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / na as f64 - y as f64 / nb as f64).abs())
        .sum::<f64>()
}

/// Three aligned answer histograms of one question pattern, indexed by
/// global answer id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternHistograms {
    pub pattern: QuestionPattern,
    pub train: Vec<usize>,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
    /// Examples of this pattern answered correctly.
    pub correct: usize,
    /// Total variation between `predicted` and `truth`.
    pub tv: f64,
}

impl PatternHistograms {
    pub fn accuracy(&self) -> Option<f64> {
        let n: usize = self.truth.iter().sum();
        (n > 0).then(|| self.correct as f64 / n as f64)
    }
}

/// Histograms for `patterns` (every pattern of the answer space's spec when
/// `None`), given predictions on `split`.
pub fn distribution_report(
    predictions: &[usize],
    split: &[Example],
    train: &[Example],
    answers: &AnswerSpace,
    all_patterns: &[QuestionPattern],
    patterns: Option<&[QuestionPattern]>,
) -> Result<Vec<PatternHistograms>> {
    if predictions.len() != split.len() {
        return Err(Error::Report(format!(
            "{} predictions for {} examples",
            predictions.len(),
            split.len()
        )));
    }
    let wanted: Vec<QuestionPattern> = match patterns {
        Some(ps) => {
            for p in ps {
                if !all_patterns.contains(p) {
                    return Err(Error::Report(format!("unknown question pattern {p}")));
                }
            }
            ps.to_vec()
        }
        None => all_patterns.to_vec(),
    };
    let a = answers.len();
    let mut table: BTreeMap<QuestionPattern, PatternHistograms> = wanted
        .iter()
        .map(|&p| {
            (
                p,
                PatternHistograms {
                    pattern: p,
                    train: vec![0; a],
                    predicted: vec![0; a],
                    truth: vec![0; a],
                    correct: 0,
                    tv: 0.0,
                },
            )
        })
        .collect();
    for e in train {
        if let Some(h) = table.get_mut(&e.pattern) {
            h.train[e.answer] += 1;
        }
    }
    for (&p, e) in predictions.iter().zip(split) {
        if let Some(h) = table.get_mut(&e.pattern) {
            if p >= a {
                return Err(Error::IndexOutOfRange {
                    what: "prediction",
                    index: p,
                    size: a,
                });
            }
            h.predicted[p] += 1;
            h.truth[e.answer] += 1;
            h.correct += usize::from(p == e.answer);
        }
    }
    Ok(wanted
        .iter()
        .map(|p| {
            let mut h = table.remove(p).expect("pattern inserted above");
            h.tv = total_variation(&h.predicted, &h.truth);
            h
        })
        .collect())
}

/// Evaluation of one trained run on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub split: String,
    pub config_digest: String,
    pub seed: u64,
    pub accuracy: Accuracy,
    pub histograms: Vec<PatternHistograms>,
    pub loss_trace: Vec<EpochRecord>,
}

/// Mean and sample standard deviation of one column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub runs: usize,
    pub overall: Stat,
    pub yes_no: Option<Stat>,
    pub number: Option<Stat>,
    pub other: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub split: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "strategy,runs,overall_mean,overall_std,yes_no_mean,yes_no_std,number_mean,number_std,other_mean,other_std\n",
        );
        let cell = |s: &Option<Stat>| s.map_or_else(|| ",".to_string(), |s| format!("{:.6},{:.6}", s.mean, s.std));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{},{},{}",
                r.label,
                r.runs,
                r.overall.mean,
                r.overall.std,
                cell(&r.yes_no),
                cell(&r.number),
                cell(&r.other)
            );
        }
        out
    }

    /// Fixed-width text rendering with `mean ± std` cells.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<32} {:>4} {:>16} {:>16} {:>16} {:>16}\n",
            format!("split: {}", self.split),
            "runs",
            "overall",
            "yes/no",
            "number",
            "other"
        );
        let cell = |s: Option<Stat>| {
            s.map_or_else(
                || "-".to_string(),
                |s| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std),
            )
        };
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<32} {:>4} {:>16} {:>16} {:>16} {:>16}",
                r.label,
                r.runs,
                cell(Some(r.overall)),
                cell(r.yes_no),
                cell(r.number),
                cell(r.other)
            );
        }
        out
    }
}

/// Groups reports by label and aggregates each column over seeds. Rows are
/// sorted by mean overall accuracy, best first.
pub fn compare_runs(reports: &[RunReport]) -> Result<ComparisonTable> {
    let Some(first) = reports.first() else {
        return Err(Error::Report("no reports to compare".into()));
    };
    if let Some(r) = reports.iter().find(|r| r.split != first.split) {
        return Err(Error::Report(format!(
            "mixed splits in one table: {} and {}",
            first.split, r.split
        )));
    }
    let mut groups: BTreeMap<&str, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(&r.label).or_default().push(r);
    }
    let mut rows: Vec<ComparisonRow> = groups
        .into_iter()
        .map(|(label, rs)| {
            let col = |f: Family| {
                let v: Vec<f64> = rs.iter().filter_map(|r| r.accuracy.per_family.get(f)).collect();
                Stat::of(&v)
            };
            let overall: Vec<f64> = rs.iter().map(|r| r.accuracy.overall).collect();
            ComparisonRow {
                label: label.to_string(),
                runs: rs.len(),
                overall: Stat::of(&overall).expect("group is non-empty"),
                yes_no: col(Family::Exist),
                number: col(Family::Count),
                other: col(Family::Color),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.overall.mean.total_cmp(&a.overall.mean).then_with(|| a.label.cmp(&b.label)));
    Ok(ComparisonTable {
        split: first.split.clone(),
        rows,
    })
}

/// Per-pattern comparison of prediction-to-truth total variation between two
/// strategies, each averaged over its runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvComparison {
    pub label: String,
    pub baseline: String,
    pub patterns: Vec<TvRow>,
    /// Patterns where `label` is strictly closer to the truth than `baseline`.
    pub wins: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvRow {
    pub pattern: QuestionPattern,
    pub tv: f64,
    pub baseline_tv: f64,
}

fn mean_tv(reports: &[RunReport]) -> Result<BTreeMap<QuestionPattern, f64>> {
    let mut acc: BTreeMap<QuestionPattern, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for h in &r.histograms {
            let e = acc.entry(h.pattern).or_default();
            e.0 += h.tv;
            e.1 += 1;
        }
    }
    if acc.is_empty() {
        return Err(Error::Report("reports carry no histograms".into()));
    }
    Ok(acc.into_iter().map(|(p, (s, n))| (p, s / n as f64)).collect())
}

pub fn tv_comparison(reports: &[RunReport], baseline: &[RunReport]) -> Result<TvComparison> {
    let label = |rs: &[RunReport]| {
        rs.first()
            .map(|r| r.label.clone())
            .ok_or_else(|| Error::Report("no reports to compare".into()))
    };
    let (la, lb) = (label(reports)?, label(baseline)?);
    let splits: Vec<&str> = reports.iter().chain(baseline).map(|r| r.split.as_str()).collect();
    if splits.iter().any(|s| *s != splits[0]) {
        return Err(Error::Report("mixed splits in one comparison".into()));
    }
    let (a, b) = (mean_tv(reports)?, mean_tv(baseline)?);
    let mut patterns = Vec::with_capacity(a.len());
    for (p, tv) in &a {
        let baseline_tv = *b
            .get(p)
            .ok_or_else(|| Error::Report(format!("pattern {p} missing from {lb}")))?;
        patterns.push(TvRow {
            pattern: *p,
            tv: *tv,
            baseline_tv,
        });
    }
    let wins = patterns.iter().filter(|r| r.tv < r.baseline_tv).count();
    Ok(TvComparison {
        label: la,
        baseline: lb,
        fraction: wins as f64 / patterns.len() as f64,
        wins,
        patterns,
    })
}
