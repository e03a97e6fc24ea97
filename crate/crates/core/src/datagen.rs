//! Synthetic question/region corpus with per-pattern answer priors that
//! change between the training split and the out-of-distribution test split.
//!
//! Each region is `one-hot(object) ⊕ one-hot(color) ⊕ noise dims`, plus
//! Gaussian noise on every coordinate. Questions come from three templates
//! (color, exist, count) instantiated with an object word, and the scene is
//! always built so the answer can be read from the regions. Only the answer
//! distribution per question pattern is biased: in training the majority
//! answer `a_maj` carries mass `b`; in the swap-mode OOD split a different
//! answer `a_alt` carries it instead.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLOR_NAMES: &[&str] = &[
    "red", "green", "blue", "yellow", "white", "black", "orange", "purple", "pink", "brown", "gray", "cyan",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Color,
    Exist,
    Count,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Color, Family::Exist, Family::Count];

    pub fn name(self) -> &'static str {
        match self {
            Family::Color => "color",
            Family::Exist => "exist",
            Family::Count => "count",
        }
    }

    /// The answer-type column this family reports under.
    pub fn answer_type(self) -> &'static str {
        match self {
            Family::Color => "other",
            Family::Exist => "yes_no",
            Family::Count => "number",
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(Family::Color),
            "exist" => Ok(Family::Exist),
            "count" => Ok(Family::Count),
            _ => Err(Error::Dataset(format!("unknown question family `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuestionPattern {
    pub family: Family,
    pub object: usize,
}

impl fmt::Display for QuestionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.family.name(), self.object)
    }
}

impl FromStr for QuestionPattern {
    type Err = Error;

    /// Parses `family:object`, e.g. `color:3`.
    fn from_str(s: &str) -> Result<Self> {
        let (fam, obj) = s
            .split_once(':')
            .ok_or_else(|| Error::Dataset(format!("pattern `{s}` is not family:object")))?;
        let object = obj
            .parse()
            .map_err(|_| Error::Dataset(format!("pattern `{s}` has a non-numeric object")))?;
        Ok(Self {
            family: fam.parse()?,
            object,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodMode {
    Swap,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestId, Split::TestOod];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::TestId => 2,
            Split::TestOod => 3,
        }
    }
}

fn default_n_objects() -> usize {
    12
}
fn default_n_colors() -> usize {
    6
}
fn default_max_count() -> usize {
    4
}
fn default_n_v() -> usize {
    8
}
fn default_n_noise_dims() -> usize {
    4
}
fn default_noise_sigma() -> f64 {
    0.1
}
fn default_bias() -> f64 {
    0.8
}
fn default_n_train() -> usize {
    20_000
}
fn default_n_test() -> usize {
    5_000
}
fn default_ood_mode() -> OodMode {
    OodMode::Swap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    #[serde(default = "default_n_objects")]
    pub n_objects: usize,
    #[serde(default = "default_n_colors")]
    pub n_colors: usize,
    #[serde(default = "default_max_count")]
    pub max_count: usize,
    #[serde(default = "default_n_v")]
    pub n_v: usize,
    #[serde(default = "default_n_noise_dims")]
    pub n_noise_dims: usize,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_bias")]
    pub bias_strength: f64,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test_id: usize,
    #[serde(default = "default_n_test")]
    pub n_test_ood: usize,
    #[serde(default = "default_ood_mode")]
    pub ood_mode: OodMode,
}

impl DatasetSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            n_objects: default_n_objects(),
            n_colors: default_n_colors(),
            max_count: default_max_count(),
            n_v: default_n_v(),
            n_noise_dims: default_n_noise_dims(),
            noise_sigma: default_noise_sigma(),
            bias_strength: default_bias(),
            n_train: default_n_train(),
            n_test_id: default_n_test(),
            n_test_ood: default_n_test(),
            ood_mode: default_ood_mode(),
        }
    }

    pub fn d_raw(&self) -> usize {
        self.n_objects + self.n_colors + self.n_noise_dims
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::TestId => self.n_test_id,
            Split::TestOod => self.n_test_ood,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_objects < 2 {
            return fail("n_objects must be at least 2 (scenes need distractors)".into());
        }
        if self.n_colors < 2 || self.n_colors > COLOR_NAMES.len() {
            return fail(format!("n_colors must be in 2..={}", COLOR_NAMES.len()));
        }
        if self.max_count < 1 {
            return fail("max_count must be at least 1".into());
        }
        if self.n_v == 0 || self.max_count > self.n_v {
            return fail(format!(
                "max_count {} does not fit in {} regions",
                self.max_count, self.n_v
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and non-negative".into());
        }
        if self.n_train == 0 || self.n_test_id == 0 || self.n_test_ood == 0 {
            return fail("all split sizes must be positive".into());
        }
        let b = self.bias_strength;
        if !(b <= 1.0) {
            return fail(format!("bias_strength {b} exceeds 1"));
        }
        for fam in Family::ALL {
            let d = self.domain_size(fam);
            if b <= 1.0 / d as f64 {
                return fail(format!(
                    "no majority exists: bias_strength {b} is not above the uniform mass 1/{d} of the {} family",
                    fam.name()
                ));
            }
        }
        Ok(())
    }

    pub fn domain_size(&self, family: Family) -> usize {
        match family {
            Family::Color => self.n_colors,
            Family::Exist => 2,
            Family::Count => self.max_count + 1,
        }
    }

    pub fn patterns(&self) -> Vec<QuestionPattern> {
        Family::ALL
            .iter()
            .flat_map(|&family| (0..self.n_objects).map(move |object| QuestionPattern { family, object }))
            .collect()
    }
}

/// Global answer index space: colors, then counts `0..=max_count`, then
/// yes and no.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerSpace {
    pub n_colors: usize,
    pub max_count: usize,
}

impl AnswerSpace {
    pub fn new(spec: &DatasetSpec) -> Self {
        Self {
            n_colors: spec.n_colors,
            max_count: spec.max_count,
        }
    }

    pub fn len(&self) -> usize {
        self.n_colors + self.max_count + 1 + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn color(&self, c: usize) -> usize {
        c
    }

    pub fn count(&self, k: usize) -> usize {
        self.n_colors + k
    }

    pub fn yes(&self) -> usize {
        self.n_colors + self.max_count + 1
    }

    pub fn no(&self) -> usize {
        self.yes() + 1
    }

    pub fn domain(&self, family: Family) -> Vec<usize> {
        match family {
            Family::Color => (0..self.n_colors).collect(),
            Family::Count => (0..=self.max_count).map(|k| self.count(k)).collect(),
            Family::Exist => vec![self.yes(), self.no()],
        }
    }

    pub fn family_of(&self, answer: usize) -> Option<Family> {
        if answer < self.n_colors {
            Some(Family::Color)
        } else if answer < self.yes() {
            Some(Family::Count)
        } else if answer < self.len() {
            Some(Family::Exist)
        } else {
            None
        }
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = COLOR_NAMES[..self.n_colors].iter().map(|s| s.to_string()).collect();
        out.extend((0..=self.max_count).map(|k| k.to_string()));
        out.push("yes".into());
        out.push("no".into());
        out
    }
}

const TEMPLATE_WORDS: &[&str] = &["what", "color", "is", "the", "there", "a", "how", "many", "are"];

/// Question vocabulary: template words followed by one word per object.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    n_objects: usize,
}

impl Vocabulary {
    pub fn new(n_objects: usize) -> Self {
        Self { n_objects }
    }

    pub fn len(&self) -> usize {
        TEMPLATE_WORDS.len() + self.n_objects
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        w.extend((0..self.n_objects).map(|o| format!("object{o}")));
        w
    }

    fn word(w: &str) -> usize {
        TEMPLATE_WORDS.iter().position(|t| *t == w).expect("template word")
    }

    pub fn object_token(&self, object: usize) -> usize {
        TEMPLATE_WORDS.len() + object
    }

    /// Token ids of the question for a pattern.
    pub fn tokens(&self, p: QuestionPattern) -> Vec<usize> {
        let obj = self.object_token(p.object);
        let words: &[&str] = match p.family {
            Family::Color => &["what", "color", "is", "the"],
            Family::Exist => &["is", "there", "a"],
            Family::Count => &["how", "many"],
        };
        let mut t: Vec<usize> = words.iter().map(|w| Self::word(w)).collect();
        t.push(obj);
        if p.family == Family::Count {
            t.extend([Self::word("are"), Self::word("there")]);
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternPrior {
    pub pattern: QuestionPattern,
    /// Global answer ids, aligned with the probability vectors.
    pub domain: Vec<usize>,
    pub a_maj: usize,
    pub a_alt: usize,
    /// Shared by the training and in-distribution test splits.
    pub train: Vec<f64>,
    pub ood: Vec<f64>,
}

impl PatternPrior {
    pub fn probs(&self, split: Split) -> &[f64] {
        match split {
            Split::Train | Split::TestId => &self.train,
            Split::TestOod => &self.ood,
        }
    }

    pub fn prob_of(&self, split: Split, answer: usize) -> f64 {
        self.domain
            .iter()
            .position(|&a| a == answer)
            .map_or(0.0, |i| self.probs(split)[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTable {
    pub entries: Vec<PatternPrior>,
}

impl PriorTable {
    pub fn get(&self, p: QuestionPattern) -> Option<&PatternPrior> {
        self.entries.iter().find(|e| e.pattern == p)
    }
}

/// Mixes a base seed with stream identifiers into an independent 64-bit seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = splitmix(z);
    }
    splitmix(z)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn build_priors(spec: &DatasetSpec) -> Result<PriorTable> {
    spec.validate()?;
    let answers = AnswerSpace::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xA11]));
    let b = spec.bias_strength;
    let mut entries = Vec::new();
    for pattern in spec.patterns() {
        let domain = answers.domain(pattern.family);
        let d = domain.len();
        let maj = rng.random_range(0..d);
        let alt = (maj + rng.random_range(1..d)) % d;
        let biased = |at: usize| -> Vec<f64> {
            (0..d)
                .map(|i| if i == at { b } else { (1.0 - b) / (d - 1) as f64 })
                .collect()
        };
        let ood = match spec.ood_mode {
            OodMode::Swap => biased(alt),
            OodMode::Uniform => vec![1.0 / d as f64; d],
        };
        entries.push(PatternPrior {
            pattern,
            a_maj: domain[maj],
            a_alt: domain[alt],
            train: biased(maj),
            ood,
            domain,
        });
    }
    Ok(PriorTable { entries })
}

/// One (regions, question, answer) triplet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    /// `n_v` rows of `d_raw` features.
    pub regions: Vec<Vec<f64>>,
    pub tokens: Vec<usize>,
    pub answer: usize,
    #[serde(flatten)]
    pub pattern: QuestionPattern,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub answers: AnswerSpace,
    pub vocab: Vocabulary,
    pub priors: PriorTable,
    pub train: Vec<Example>,
    pub test_id: Vec<Example>,
    pub test_ood: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::TestId => &self.test_id,
            Split::TestOod => &self.test_ood,
        }
    }
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Builds example `index` of `split`. Depends only on the spec, the priors
/// and the index, so examples can be generated independently.
pub fn generate_example(
    spec: &DatasetSpec,
    priors: &PriorTable,
    vocab: &Vocabulary,
    split: Split,
    index: usize,
) -> Example {
    let answers = AnswerSpace::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[split.stream(), index as u64]));
    let family = Family::ALL[rng.random_range(0..3)];
    let object = rng.random_range(0..spec.n_objects);
    let pattern = QuestionPattern { family, object };
    let prior = priors.get(pattern).expect("prior for every pattern");
    let answer = prior.domain[sample_categorical(&mut rng, prior.probs(split))];

    // (object, color) per region slot
    let mut slots: Vec<(usize, usize)> = Vec::with_capacity(spec.n_v);
    let target_copies = match family {
        Family::Color => 1,
        Family::Count => answer - answers.count(0),
        Family::Exist => usize::from(answer == answers.yes()),
    };
    for _ in 0..target_copies {
        let color = if family == Family::Color {
            answer - answers.color(0)
        } else {
            rng.random_range(0..spec.n_colors)
        };
        slots.push((object, color));
    }
    while slots.len() < spec.n_v {
        let mut other = rng.random_range(0..spec.n_objects - 1);
        if other >= object {
            other += 1;
        }
        slots.push((other, rng.random_range(0..spec.n_colors)));
    }
    slots.shuffle(&mut rng);

    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("valid sigma"));
    let regions = slots
        .iter()
        .map(|&(o, c)| {
            let mut row = vec![0.0; spec.d_raw()];
            row[o] = 1.0;
            row[spec.n_objects + c] = 1.0;
            if let Some(n) = &noise {
                for x in &mut row {
                    *x += n.sample(&mut rng);
                }
            }
            row
        })
        .collect();

    Example {
        regions,
        tokens: vocab.tokens(pattern),
        answer,
        pattern,
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    let priors = build_priors(spec)?;
    let vocab = Vocabulary::new(spec.n_objects);
    let make = |split: Split| -> Vec<Example> {
        (0..spec.split_size(split))
            .map(|i| generate_example(spec, &priors, &vocab, split, i))
            .collect()
    };
    Ok(Dataset {
        train: make(Split::Train),
        test_id: make(Split::TestId),
        test_ood: make(Split::TestOod),
        answers: AnswerSpace::new(spec),
        vocab,
        priors,
        spec: spec.clone(),
    })
}

/// Answers a question by inspecting one-hot region components, as a check
/// that the image alone determines the answer.
pub fn read_answer_from_regions(spec: &DatasetSpec, ex: &Example) -> usize {
    let answers = AnswerSpace::new(spec);
    let has = |row: &[f64], i: usize| row[i] > 0.5;
    let o = ex.pattern.object;
    let holding: Vec<&Vec<f64>> = ex.regions.iter().filter(|r| has(r, o)).collect();
    match ex.pattern.family {
        Family::Exist => {
            if holding.is_empty() {
                answers.no()
            } else {
                answers.yes()
            }
        }
        Family::Count => answers.count(holding.len()),
        Family::Color => {
            let row = holding.first().map_or(&ex.regions[0], |r| *r);
            let c = (0..spec.n_colors)
                .find(|&c| has(row, spec.n_objects + c))
                .unwrap_or(0);
            answers.color(c)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    spec: DatasetSpec,
    priors: PriorTable,
    vocabulary: Vec<String>,
    answers: Vec<String>,
}

pub const SIDECAR_FILE: &str = "dataset.json";

pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

/// Writes one JSON-lines file per split and the sidecar into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for split in Split::ALL {
        let mut w = BufWriter::new(File::create(dir.join(split_file(split)))?);
        for ex in ds.split(split) {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let sidecar = Sidecar {
        spec: ds.spec.clone(),
        priors: ds.priors.clone(),
        vocabulary: ds.vocab.words(),
        answers: ds.answers.labels(),
    };
    let mut w = BufWriter::new(File::create(dir.join(SIDECAR_FILE))?);
    serde_json::to_writer_pretty(&mut w, &sidecar)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let sidecar: Sidecar = serde_json::from_reader(BufReader::new(File::open(dir.join(SIDECAR_FILE))?))?;
    sidecar.spec.validate()?;
    let answers = AnswerSpace::new(&sidecar.spec);
    let vocab = Vocabulary::new(sidecar.spec.n_objects);
    if sidecar.answers != answers.labels() || sidecar.vocabulary != vocab.words() {
        return Err(Error::Dataset("sidecar vocabulary or answer list disagrees with its spec".into()));
    }
    let read = |split: Split| -> Result<Vec<Example>> {
        let path = dir.join(split_file(split));
        let mut out = Vec::new();
        for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Example = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
            check_example(&sidecar.spec, &answers, &ex)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
            out.push(ex);
        }
        Ok(out)
    };
    Ok(Dataset {
        train: read(Split::Train)?,
        test_id: read(Split::TestId)?,
        test_ood: read(Split::TestOod)?,
        answers,
        vocab,
        priors: sidecar.priors,
        spec: sidecar.spec,
    })
}

fn check_example(spec: &DatasetSpec, answers: &AnswerSpace, ex: &Example) -> Result<()> {
    if ex.regions.len() != spec.n_v || ex.regions.iter().any(|r| r.len() != spec.d_raw()) {
        return Err(Error::Dataset("region matrix has the wrong shape".into()));
    }
    if ex.pattern.object >= spec.n_objects {
        return Err(Error::Dataset(format!("object {} out of range", ex.pattern.object)));
    }
    if answers.family_of(ex.answer) != Some(ex.pattern.family) {
        return Err(Error::Dataset(format!(
            "answer {} is not in the {} domain",
            ex.answer,
            ex.pattern.family.name()
        )));
    }
    if ex.tokens.is_empty() {
        return Err(Error::Dataset("empty question".into()));
    }
    Ok(())
}

/// Empirical answer statistics of one question pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternAudit {
    pub pattern: QuestionPattern,
    pub n: usize,
    /// Answer id to count, only answers that occur.
    pub counts: BTreeMap<usize, usize>,
    pub majority_answer: usize,
    pub majority_share: f64,
    /// Natural-log entropy of the empirical distribution.
    pub entropy: f64,
}

/// Per-pattern statistics, sorted by majority share descending.
pub fn bias_audit(examples: &[Example]) -> Vec<PatternAudit> {
    let mut cells: BTreeMap<QuestionPattern, BTreeMap<usize, usize>> = BTreeMap::new();
    for ex in examples {
        *cells.entry(ex.pattern).or_default().entry(ex.answer).or_default() += 1;
    }
    let mut out: Vec<PatternAudit> = cells
        .into_iter()
        .map(|(pattern, counts)| {
            let n: usize = counts.values().sum();
            // BTreeMap order makes ties resolve to the lowest answer id.
            let (&majority_answer, &top) = counts
                .iter()
                .fold(None, |best: Option<(&usize, &usize)>, (a, c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((a, c)),
                })
                .expect("non-empty cell");
            let entropy: f64 = counts
                .values()
                .map(|&c| {
                    let p = c as f64 / n as f64;
                    p * (1.0 / p).ln()
                })
                .sum();
            PatternAudit {
                pattern,
                n,
                majority_answer,
                majority_share: top as f64 / n as f64,
                entropy,
                counts,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.majority_share
            .total_cmp(&a.majority_share)
            .then(a.pattern.cmp(&b.pattern))
    });
    out
}
