//! Batch samplers: plain shuffling plus the two answer-balancing baselines.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, AnswerSpace, Example, QuestionPattern};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Every example once per epoch, shuffled.
    #[default]
    Standard,
    /// Uniform over observed answers, then uniform over that answer's examples.
    AnswerBalanced,
    /// Question pattern at its empirical frequency, then uniform over the
    /// pattern's answers, then uniform over matching examples.
    QtypeBalanced,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Standard => "standard",
            SamplerKind::AnswerBalanced => "answer_balanced",
            SamplerKind::QtypeBalanced => "qtype_balanced",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sampler {
    kind: SamplerKind,
    seed: u64,
    n: usize,
    by_answer: Vec<Vec<usize>>,
    pattern_of: Vec<QuestionPattern>,
    // pattern -> answer cells, each a non-empty list of example indices
    cells: BTreeMap<QuestionPattern, Vec<Vec<usize>>>,
}

impl Sampler {
    pub fn new(kind: SamplerKind, examples: &[Example], answers: &AnswerSpace, seed: u64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyCell("split has no examples".into()));
        }
        let mut answer_map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut cell_map: BTreeMap<QuestionPattern, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
        for (i, ex) in examples.iter().enumerate() {
            answer_map.entry(ex.answer).or_default().push(i);
            cell_map
                .entry(ex.pattern)
                .or_default()
                .entry(ex.answer)
                .or_default()
                .push(i);
        }
        if kind == SamplerKind::QtypeBalanced {
            for (p, cells) in &cell_map {
                for a in answers.domain(p.family) {
                    if !cells.contains_key(&a) {
                        return Err(Error::EmptyCell(format!("pattern {p} has no example with answer {a}")));
                    }
                }
            }
        }
        Ok(Self {
            kind,
            seed,
            n: examples.len(),
            by_answer: answer_map.into_values().collect(),
            pattern_of: examples.iter().map(|e| e.pattern).collect(),
            cells: cell_map
                .into_iter()
                .map(|(p, c)| (p, c.into_values().collect()))
                .collect(),
        })
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    /// Example indices drawn for one epoch; as many draws as examples.
    pub fn epoch(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x5A4D, epoch as u64]));
        match self.kind {
            SamplerKind::Standard => {
                let mut idx: Vec<usize> = (0..self.n).collect();
                idx.shuffle(&mut rng);
                idx
            }
            SamplerKind::AnswerBalanced => (0..self.n)
                .map(|_| {
                    let pool = &self.by_answer[rng.random_range(0..self.by_answer.len())];
                    pool[rng.random_range(0..pool.len())]
                })
                .collect(),
            SamplerKind::QtypeBalanced => (0..self.n)
                .map(|_| {
                    // a uniformly drawn example carries a pattern at its empirical frequency
                    let p = self.pattern_of[rng.random_range(0..self.n)];
                    let cells = &self.cells[&p];
                    let pool = &cells[rng.random_range(0..cells.len())];
                    pool[rng.random_range(0..pool.len())]
                })
                .collect(),
        }
    }

    pub fn batches(&self, epoch: usize, batch_size: usize) -> impl Iterator<Item = Vec<usize>> {
        let idx = self.epoch(epoch);
        let bs = batch_size.max(1);
        (0..idx.len().div_ceil(bs)).map(move |b| idx[b * bs..((b + 1) * bs).min(idx.len())].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DatasetSpec};

    fn data() -> crate::datagen::Dataset {
        generate(&DatasetSpec {
            n_train: 4000,
            n_test_id: 10,
            n_test_ood: 10,
            n_objects: 3,
            ..DatasetSpec::with_seed(21)
        })
        .unwrap()
    }

    #[test]
    fn standard_visits_every_example_once() {
        let ds = data();
        let s = Sampler::new(SamplerKind::Standard, &ds.train, &ds.answers, 1).unwrap();
        let mut seen: Vec<usize> = s.batches(0, 256).flatten().collect();
        assert_ne!(seen, (0..ds.train.len()).collect::<Vec<_>>());
        seen.sort_unstable();
        assert_eq!(seen, (0..ds.train.len()).collect::<Vec<_>>());
        assert_ne!(s.epoch(0), s.epoch(1));
    }

    #[test]
    fn answer_balanced_is_flat() {
        let ds = data();
        let s = Sampler::new(SamplerKind::AnswerBalanced, &ds.train, &ds.answers, 2).unwrap();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut total = 0;
        for e in 0..25 {
            for i in s.epoch(e) {
                *counts.entry(ds.train[i].answer).or_default() += 1;
                total += 1;
            }
        }
        assert!(total >= 100_000);
        let k = counts.len() as f64;
        for c in counts.values() {
            assert!((*c as f64 / total as f64 - 1.0 / k).abs() < 0.02);
        }
    }

    #[test]
    fn qtype_balanced_flattens_each_pattern() {
        let ds = data();
        let s = Sampler::new(SamplerKind::QtypeBalanced, &ds.train, &ds.answers, 3).unwrap();
        let mut per: BTreeMap<QuestionPattern, (usize, usize)> = BTreeMap::new();
        for e in 0..25 {
            for i in s.epoch(e) {
                let ex = &ds.train[i];
                let maj = ds.priors.get(ex.pattern).unwrap().a_maj;
                let c = per.entry(ex.pattern).or_default();
                c.0 += usize::from(ex.answer == maj);
                c.1 += 1;
            }
        }
        for (p, (hit, n)) in per {
            let d = ds.answers.domain(p.family).len() as f64;
            assert!((hit as f64 / n as f64 - 1.0 / d).abs() < 0.02, "{p}");
        }
    }

    #[test]
    fn qtype_balanced_rejects_missing_cell() {
        let ds = data();
        let few: Vec<Example> = ds.train.iter().take(5).cloned().collect();
        assert!(matches!(
            Sampler::new(SamplerKind::QtypeBalanced, &few, &ds.answers, 0),
            Err(Error::EmptyCell(_))
        ));
    }
}
