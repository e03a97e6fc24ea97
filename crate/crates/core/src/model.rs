//! The base VQA model: question and region encoders, per-region bilinear
//! fusion, max pooling over regions and an MLP classifier.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::datagen::{DatasetSpec, Example};
use crate::error::{Error, Result};
use crate::layers::{Embedding, Init, Linear, LowRankBilinearFusion, Mlp};
use crate::tensor::Tensor;

/// Layer sizes. Input and output sizes come from the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_q: usize,
    /// Width of the projected regions; `None` keeps the raw width.
    pub d_v: Option<usize>,
    pub d_h: usize,
    pub d_m: usize,
    /// Hidden widths of the classifier; the output layer has one unit per answer.
    pub classifier_hidden: Vec<usize>,
    /// Hidden widths of the question-only network nn_q.
    pub nn_q_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_emb: 64,
            d_q: 64,
            d_v: None,
            d_h: 128,
            d_m: 128,
            classifier_hidden: vec![128],
            nn_q_hidden: vec![64],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.d_emb, self.d_q, self.d_v.unwrap_or(1), self.d_h, self.d_m];
        if sizes.contains(&0) || self.classifier_hidden.contains(&0) || self.nn_q_hidden.contains(&0) {
            return Err(Error::Config("model layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Sizes fixed by the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub vocab: usize,
    pub d_raw: usize,
    pub n_v: usize,
    pub answers: usize,
}

impl DataDims {
    pub fn of(spec: &DatasetSpec) -> Self {
        Self {
            vocab: crate::datagen::Vocabulary::new(spec.n_objects).len(),
            d_raw: spec.d_raw(),
            n_v: spec.n_v,
            answers: crate::datagen::AnswerSpace::new(spec).len(),
        }
    }
}

/// Mean of token embeddings followed by an affine map.
#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    pub embed: Embedding,
    pub proj: Linear,
}

impl QuestionEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, vocab: usize, d_emb: usize, d_q: usize) -> Self {
        Self {
            embed: Embedding::new(store, init, &format!("{name}.embed"), vocab, d_emb),
            proj: Linear::new(store, init, &format!("{name}.proj"), d_emb, d_q),
        }
    }

    /// Encodes a batch of questions packed as `tokens` with segment `offsets`.
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize], offsets: &[usize]) -> Result<Var> {
        let e = self.embed.lookup(tape, tokens)?;
        let m = tape.segment_mean(e, offsets)?;
        self.proj.forward(tape, m)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.embed.table];
        p.extend(self.proj.params());
        p
    }
}

/// Questions, regions and answers of a batch of examples in tensor form.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub offsets: Vec<usize>,
    /// `[B, n_v, d_raw]`
    pub regions: Tensor,
    pub answers: Vec<usize>,
}

impl Batch {
    pub fn new<'e>(examples: impl IntoIterator<Item = &'e Example>, dims: &DataDims) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut offsets = vec![0];
        let mut regions = Vec::new();
        let mut answers = Vec::new();
        for ex in examples {
            check_tokens(&ex.tokens, dims.vocab)?;
            check_regions(&ex.regions, dims)?;
            tokens.extend_from_slice(&ex.tokens);
            offsets.push(tokens.len());
            for r in &ex.regions {
                regions.extend_from_slice(r);
            }
            answers.push(ex.answer);
        }
        let b = answers.len();
        if b == 0 {
            return Err(Error::InvalidShape {
                op: "batch",
                shape: vec![0],
                reason: "a batch needs at least one example".into(),
            });
        }
        Ok(Self {
            tokens,
            offsets,
            regions: Tensor::new(vec![b, dims.n_v, dims.d_raw], regions)?,
            answers,
        })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidShape {
            op: "encode_question",
            shape: vec![0],
            reason: "empty token sequence".into(),
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::IndexOutOfRange {
            what: "token",
            index: t,
            size: vocab,
        });
    }
    Ok(())
}

fn check_regions(regions: &[Vec<f64>], dims: &DataDims) -> Result<()> {
    if regions.len() != dims.n_v || regions.iter().any(|r| r.len() != dims.d_raw) {
        return Err(Error::InvalidShape {
            op: "encode_image",
            shape: vec![regions.len(), regions.first().map_or(0, Vec::len)],
            reason: format!("expected {} regions of width {}", dims.n_v, dims.d_raw),
        });
    }
    Ok(())
}

/// `c(max_i m(e_v(v_i), e_q(q)))`.
#[derive(Clone, Debug)]
pub struct VqaModel {
    pub e_q: QuestionEncoder,
    pub e_v: Linear,
    pub fusion: LowRankBilinearFusion,
    pub classifier: Mlp,
    pub dims: DataDims,
}

impl VqaModel {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig, dims: DataDims) -> Result<Self> {
        cfg.validate()?;
        let d_v = cfg.d_v.unwrap_or(dims.d_raw);
        let e_q = QuestionEncoder::new(store, init, "e_q", dims.vocab, cfg.d_emb, cfg.d_q);
        let e_v = Linear::new(store, init, "e_v", dims.d_raw, d_v);
        let fusion = LowRankBilinearFusion::new(store, init, "fusion", cfg.d_q, d_v, cfg.d_h, cfg.d_m);
        let mut sizes = cfg.classifier_hidden.clone();
        sizes.push(dims.answers);
        let classifier = Mlp::new(store, init, "classifier", cfg.d_m, &sizes);
        Ok(Self {
            e_q,
            e_v,
            fusion,
            classifier,
            dims,
        })
    }

    pub fn d_q(&self) -> usize {
        self.e_q.proj.d_out
    }

    /// Parameters of the base model, question encoder included.
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.e_q.params();
        p.extend(self.e_v.params());
        p.extend(self.fusion.params());
        p.extend(self.classifier.params());
        p
    }

    /// `[B, d_q]` question representations of a batch.
    pub fn question_repr(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        self.e_q.forward(tape, &batch.tokens, &batch.offsets)
    }

    /// Logits `[B, |A|]` given question representations `q` from
    /// [`VqaModel::question_repr`].
    pub fn logits_from(&self, tape: &mut Tape, q: Var, batch: &Batch) -> Result<Var> {
        let raw = tape.constant(batch.regions.clone())?;
        let v = self.e_v.forward(tape, raw)?;
        let fused = self.fusion.fuse_regions(tape, q, v)?;
        let pooled = tape.max_rows(fused)?;
        self.classifier.forward(tape, pooled)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let q = self.question_repr(tape, batch)?;
        self.logits_from(tape, q, batch)
    }

    pub fn encode_question(&self, store: &ParamStore, tokens: &[usize]) -> Result<Tensor> {
        check_tokens(tokens, self.dims.vocab)?;
        let mut tape = Tape::with_params(store);
        let q = self.e_q.forward(&mut tape, tokens, &[0, tokens.len()])?;
        flat(tape.value(q))
    }

    /// `[n_v, d_v]` projected regions.
    pub fn encode_image(&self, store: &ParamStore, regions: &[Vec<f64>]) -> Result<Tensor> {
        check_regions(regions, &self.dims)?;
        let mut tape = Tape::with_params(store);
        let raw = tape.constant(Tensor::from_rows(regions)?)?;
        let v = self.e_v.forward(&mut tape, raw)?;
        Ok(tape.value(v).clone())
    }

    pub fn predict_logits(&self, store: &ParamStore, regions: &[Vec<f64>], tokens: &[usize]) -> Result<Tensor> {
        check_tokens(tokens, self.dims.vocab)?;
        check_regions(regions, &self.dims)?;
        let batch = Batch {
            tokens: tokens.to_vec(),
            offsets: vec![0, tokens.len()],
            regions: Tensor::new(vec![1, self.dims.n_v, self.dims.d_raw], regions.concat())?,
            answers: vec![0],
        };
        let mut tape = Tape::with_params(store);
        let l = self.forward(&mut tape, &batch)?;
        flat(tape.value(l))
    }

    pub fn predict_answer(&self, store: &ParamStore, regions: &[Vec<f64>], tokens: &[usize]) -> Result<usize> {
        Ok(Tensor::argmax(self.predict_logits(store, regions, tokens)?.data()))
    }

    /// Logits for many examples, evaluated in chunks of `chunk`.
    pub fn predict_logits_many(&self, store: &ParamStore, examples: &[Example], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(examples.len());
        for part in examples.chunks(chunk.max(1)) {
            let batch = Batch::new(part, &self.dims)?;
            let mut tape = Tape::with_params(store);
            let l = self.forward(&mut tape, &batch)?;
            let v = tape.value(l);
            out.extend((0..v.rows()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn predict_many(&self, store: &ParamStore, examples: &[Example]) -> Result<Vec<usize>> {
        Ok(self
            .predict_logits_many(store, examples, 512)?
            .iter()
            .map(|l| Tensor::argmax(l))
            .collect())
    }
}

fn flat(t: &Tensor) -> Result<Tensor> {
    Ok(Tensor::vector(t.data().to_vec()))
}
