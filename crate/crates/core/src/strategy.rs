//! Learning strategies: the classical cross-entropy baseline, RUBi's
//! question-only branch with mask fusion, and the standalone question-only
//! model.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamId, ParamStore, Tape, Var};
use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::layers::{Init, Linear, Mlp};
use crate::model::{Batch, DataDims, ModelConfig, QuestionEncoder, VqaModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskActivation {
    #[default]
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Product,
    Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Classical,
    #[default]
    Rubi,
    QuestionOnly,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Classical => "classical",
            Strategy::Rubi => "rubi",
            Strategy::QuestionOnly => "question_only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub mask_activation: MaskActivation,
    pub combine: Combine,
    pub use_qo_loss: bool,
    pub strategy: Strategy,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            mask_activation: MaskActivation::Sigmoid,
            combine: Combine::Product,
            use_qo_loss: true,
            strategy: Strategy::Rubi,
        }
    }
}

impl StrategyConfig {
    pub fn classical() -> Self {
        Self {
            strategy: Strategy::Classical,
            ..Self::default()
        }
    }

    pub fn question_only() -> Self {
        Self {
            strategy: Strategy::QuestionOnly,
            ..Self::default()
        }
    }

    /// Short label such as `rubi(sigmoid,product)` or `rubi(sigmoid,product,no_qo)`.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Rubi => {
                let act = match self.mask_activation {
                    MaskActivation::Sigmoid => "sigmoid",
                    MaskActivation::Relu => "relu",
                };
                let comb = match self.combine {
                    Combine::Product => "product",
                    Combine::Sum => "sum",
                };
                let qo = if self.use_qo_loss { "" } else { ",no_qo" };
                format!("rubi({act},{comb}{qo})")
            }
            s => s.name().to_string(),
        }
    }
}

/// `f_Q = c_q(nn_q(q))`; `nn_q` also produces the mask pre-activation.
#[derive(Clone, Debug)]
pub struct QuestionOnlyBranch {
    pub nn_q: Mlp,
    pub c_q: Linear,
}

impl QuestionOnlyBranch {
    pub fn new(store: &mut ParamStore, init: &mut Init, d_q: usize, hidden: &[usize], answers: usize) -> Self {
        let mut sizes = hidden.to_vec();
        sizes.push(answers);
        Self {
            nn_q: Mlp::new(store, init, "nn_q", d_q, &sizes),
            c_q: Linear::new(store, init, "c_q", answers, answers),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.nn_q.params();
        p.extend(self.c_q.params());
        p
    }

    /// `activation(nn_q(q))`.
    pub fn mask(&self, tape: &mut Tape, q: Var, activation: MaskActivation) -> Result<Var> {
        let pre = self.nn_q.forward(tape, q)?;
        apply_activation(tape, pre, activation)
    }

    /// `c_q(nn_q(detach(q)))`: the same values as the attached path, with no
    /// gradient reaching whatever produced `q`.
    pub fn question_only_logits(&self, tape: &mut Tape, q: Var) -> Result<Var> {
        let q = tape.detach(q);
        self.attached_logits(tape, q)
    }

    /// `c_q(nn_q(q))` with gradients flowing into `q`.
    pub fn attached_logits(&self, tape: &mut Tape, q: Var) -> Result<Var> {
        let h = self.nn_q.forward(tape, q)?;
        self.c_q.forward(tape, h)
    }
}

pub fn apply_activation(tape: &mut Tape, x: Var, activation: MaskActivation) -> Result<Var> {
    match activation {
        MaskActivation::Sigmoid => tape.sigmoid(x),
        MaskActivation::Relu => tape.relu(x),
    }
}

/// Combines base-model logits with the mask before the softmax.
pub fn fuse_predictions(tape: &mut Tape, logits: Var, mask: Var, combine: Combine) -> Result<Var> {
    if tape.shape(logits) != tape.shape(mask) {
        return Err(Error::ShapeMismatch {
            op: "fuse_predictions",
            lhs: tape.shape(logits).to_vec(),
            rhs: tape.shape(mask).to_vec(),
        });
    }
    match combine {
        Combine::Product => tape.mul(logits, mask),
        Combine::Sum => tape.add(logits, mask),
    }
}

/// Loss values of one step. `l_rubi` is the optimized total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTriple {
    pub l_qm: f64,
    pub l_qo: f64,
    pub l_rubi: f64,
}

/// Graph handles produced by [`Network::compute_losses`].
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub l_qm: Option<Var>,
    pub l_qo: Option<Var>,
    pub total: Var,
    /// Logits the strategy answers with: `f` for classical and RUBi,
    /// `f_Q` for the question-only model.
    pub answer_logits: Var,
    pub values: LossTriple,
}

/// Base model, question-only branch and (for the standalone question-only
/// model) a private question encoder, over one parameter store.
#[derive(Clone, Debug)]
pub struct Network {
    pub store: ParamStore,
    pub model: VqaModel,
    pub branch: QuestionOnlyBranch,
    pub qo_encoder: Option<QuestionEncoder>,
    pub strategy: StrategyConfig,
}

impl Network {
    pub fn new(cfg: &ModelConfig, dims: DataDims, strategy: StrategyConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let model = VqaModel::new(&mut store, &mut init, cfg, dims)?;
        let branch = QuestionOnlyBranch::new(&mut store, &mut init, cfg.d_q, &cfg.nn_q_hidden, dims.answers);
        let qo_encoder = (strategy.strategy == Strategy::QuestionOnly)
            .then(|| QuestionEncoder::new(&mut store, &mut init, "qo.e_q", dims.vocab, cfg.d_emb, cfg.d_q));
        Ok(Self {
            store,
            model,
            branch,
            qo_encoder,
            strategy,
        })
    }

    pub fn dims(&self) -> DataDims {
        self.model.dims
    }

    /// Builds the losses of `batch` on `tape` under the configured strategy.
    pub fn compute_losses(&self, tape: &mut Tape, batch: &Batch) -> Result<LossGraph> {
        let a = self.dims().answers;
        if let Some(&bad) = batch.answers.iter().find(|&&x| x >= a) {
            return Err(Error::IndexOutOfRange {
                what: "answer",
                index: bad,
                size: a,
            });
        }
        let cfg = self.strategy;
        let graph = match cfg.strategy {
            Strategy::Classical => {
                let logits = self.model.forward(tape, batch)?;
                let l_qm = tape.cross_entropy(logits, &batch.answers)?;
                LossGraph {
                    l_qm: Some(l_qm),
                    l_qo: None,
                    total: l_qm,
                    answer_logits: logits,
                    values: LossTriple::default(),
                }
            }
            Strategy::Rubi => {
                let q = self.model.question_repr(tape, batch)?;
                let logits = self.model.logits_from(tape, q, batch)?;
                let mask = self.branch.mask(tape, q, cfg.mask_activation)?;
                let fused = fuse_predictions(tape, logits, mask, cfg.combine)?;
                let l_qm = tape.cross_entropy(fused, &batch.answers)?;
                let (l_qo, total) = if cfg.use_qo_loss {
                    let qo = self.branch.question_only_logits(tape, q)?;
                    let l_qo = tape.cross_entropy(qo, &batch.answers)?;
                    (Some(l_qo), tape.add(l_qm, l_qo)?)
                } else {
                    (None, l_qm)
                };
                LossGraph {
                    l_qm: Some(l_qm),
                    l_qo,
                    total,
                    answer_logits: logits,
                    values: LossTriple::default(),
                }
            }
            Strategy::QuestionOnly => {
                let enc = self.qo_encoder.as_ref().ok_or_else(|| {
                    Error::Config("question_only strategy needs its own question encoder".into())
                })?;
                let q = enc.forward(tape, &batch.tokens, &batch.offsets)?;
                let logits = self.branch.attached_logits(tape, q)?;
                let l_qo = tape.cross_entropy(logits, &batch.answers)?;
                LossGraph {
                    l_qm: None,
                    l_qo: Some(l_qo),
                    total: l_qo,
                    answer_logits: logits,
                    values: LossTriple::default(),
                }
            }
        };
        let scalar = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        let values = LossTriple {
            l_qm: scalar(graph.l_qm),
            l_qo: scalar(graph.l_qo),
            l_rubi: scalar(Some(graph.total)),
        };
        Ok(LossGraph { values, ..graph })
    }

    /// Backpropagates the total loss into `grads` (which must be zeroed by
    /// the caller). Routing follows from the graph: `c_q` only sits on the
    /// `L_QO` path and that path starts from a detached question vector.
    pub fn backward_and_route(&self, tape: &Tape, graph: &LossGraph, grads: &mut Grads) -> Result<()> {
        tape.backward_into(graph.total, grads)?;
        Ok(())
    }

    /// Answers for `examples` under the deployed predictor: argmax of the base
    /// model `f`, except for the question-only model which answers with `f_Q`.
    pub fn predict_many(&self, examples: &[Example]) -> Result<Vec<usize>> {
        match &self.qo_encoder {
            Some(enc) if self.strategy.strategy == Strategy::QuestionOnly => {
                let mut out = Vec::with_capacity(examples.len());
                for part in examples.chunks(512) {
                    let batch = Batch::new(part, &self.model.dims)?;
                    let mut tape = Tape::with_params(&self.store);
                    let q = enc.forward(&mut tape, &batch.tokens, &batch.offsets)?;
                    let l = self.branch.attached_logits(&mut tape, q)?;
                    let v = tape.value(l);
                    out.extend((0..v.rows()).map(|i| Tensor::argmax(v.row(i))));
                }
                Ok(out)
            }
            _ => self.model.predict_many(&self.store, examples),
        }
    }
}
