//! Central-difference gradient checking.
//!
//! The relative error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` and a check
//! reports the maximum over all coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamId, ParamStore, Tape, Var, PRIMITIVES};
use crate::datagen::{derive_seed, generate, DatasetSpec};
use crate::model::{Batch, DataDims, ModelConfig};
use crate::strategy::{Network, StrategyConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Options shared by the checks. `corrupt` is forwarded to
/// [`Tape::corrupt_backward`] on the tape that computes analytic gradients.
#[derive(Clone, Copy, Debug)]
pub struct Checker {
    pub eps: f64,
    pub corrupt: Option<(&'static str, f64)>,
}

impl Default for Checker {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            corrupt: None,
        }
    }
}

fn scalar_of(tape: &Tape, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::NotDifferentiable(format!(
            "checked function must be scalar, got {:?}",
            v.shape()
        )));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "finite_difference_check" });
    }
    Ok(s)
}

impl Checker {
    fn tape<'a>(&self, store: Option<&'a ParamStore>) -> Tape<'a> {
        let mut tape = match store {
            Some(s) => Tape::with_params(s),
            None => Tape::new(),
        };
        if let Some((op, f)) = self.corrupt {
            tape.corrupt_backward(op, f);
        }
        tape
    }

    /// Checks the gradient of `f` with respect to its differentiable input.
    pub fn check_input<F>(&self, f: F, point: &Tensor) -> Result<f64>
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        self.check_input_with(None, f, point)
    }

    /// Like [`Checker::check_input`], with `f` free to read parameters from
    /// `store` (which are held fixed).
    pub fn check_input_with<F>(&self, store: Option<&ParamStore>, f: F, point: &Tensor) -> Result<f64>
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let mut tape = self.tape(store);
        let x = tape.input(point.clone())?;
        let y = f(&mut tape, x)?;
        scalar_of(&tape, y)?;
        let analytic = if tape.requires_grad(y) {
            tape.backward(y)?.get_or_zero(x, point.len())
        } else {
            vec![0.0; point.len()]
        };
        let eval = |p: Tensor| -> Result<f64> {
            let mut tape = match store {
                Some(s) => Tape::with_params(s),
                None => Tape::new(),
            };
            let x = tape.input(p)?;
            let y = f(&mut tape, x)?;
            scalar_of(&tape, y)
        };
        let mut worst: f64 = 0.0;
        for i in 0..point.len() {
            let mut plus = point.clone();
            plus.data_mut()[i] += self.eps;
            let mut minus = point.clone();
            minus.data_mut()[i] -= self.eps;
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * self.eps);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        Ok(worst)
    }

    /// Checks the gradient of `f` with respect to the listed parameters
    /// (all parameters when `ids` is `None`).
    pub fn check_params<F>(&self, store: &ParamStore, ids: Option<&[ParamId]>, f: F) -> Result<f64>
    where
        F: Fn(&mut Tape) -> Result<Var>,
    {
        let ids: Vec<ParamId> = ids.map_or_else(|| store.ids().collect(), <[ParamId]>::to_vec);
        let mut grads = Grads::zeros_like(store);
        {
            let mut tape = self.tape(Some(store));
            let y = f(&mut tape)?;
            scalar_of(&tape, y)?;
            if tape.requires_grad(y) {
                tape.backward_into(y, &mut grads)?;
            }
        }
        let mut probe = store.clone();
        let eval = |s: &ParamStore| -> Result<f64> {
            let mut tape = Tape::with_params(s);
            let y = f(&mut tape)?;
            scalar_of(&tape, y)
        };
        let mut worst: f64 = 0.0;
        for id in ids {
            for i in 0..store.get(id).len() {
                let base = store.get(id).data()[i];
                probe.get_mut(id).data_mut()[i] = base + self.eps;
                let up = eval(&probe)?;
                probe.get_mut(id).data_mut()[i] = base - self.eps;
                let down = eval(&probe)?;
                probe.get_mut(id).data_mut()[i] = base;
                let numeric = (up - down) / (2.0 * self.eps);
                worst = worst.max(relative_error(grads.get(id)[i], numeric));
            }
        }
        Ok(worst)
    }
}

/// Max relative error between reverse-mode and central-difference gradients
/// of the scalar function `f` at `point`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Checker { eps, corrupt: None }.check_input(f, point)
}

/// Outcome of one named check in [`run_suite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_error: f64,
    pub passed: bool,
}

/// Composite paths checked after the primitives.
pub const COMPOSITES: &[&str] = &["predict_logits", "fused_loss", "question_only_loss"];

pub const SUITE_TOLERANCE: f64 = 1e-4;
const POINTS: u64 = 10;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `Σ w ⊙ y` with fixed weights, so every output coordinate matters with a
/// distinct sensitivity.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone())?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check_primitive(checker: &Checker, name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let c34 = random_tensor(rng, &[3, 4]);
    let c42 = random_tensor(rng, &[4, 2]);
    let c23 = random_tensor(rng, &[2, 3]);
    let w32 = random_tensor(rng, &[3, 2]);
    let w34 = random_tensor(rng, &[3, 4]);
    let w24 = random_tensor(rng, &[2, 4]);
    let w243 = random_tensor(rng, &[2, 4, 3]);
    let w3 = random_tensor(rng, &[3]);
    let w13 = random_tensor(rng, &[1, 3]);
    let x34 = random_tensor(rng, &[3, 4]);
    let mut worst: f64 = 0.0;
    let mut run = |f: &dyn Fn(&mut Tape, Var) -> Result<Var>, point: &Tensor| -> Result<()> {
        worst = worst.max(checker.check_input(f, point)?);
        Ok(())
    };
    match name {
        "matmul" => {
            run(&|t, x| {
                let b = t.constant(c42.clone())?;
                let y = t.matmul(x, b)?;
                project(t, y, &w32)
            }, &x34)?;
            let b = random_tensor(rng, &[4, 2]);
            run(&|t, x| {
                let a = t.constant(c34.clone())?;
                let y = t.matmul(a, x)?;
                project(t, y, &w32)
            }, &b)?;
            let w = random_tensor(rng, &[2, 4]);
            run(&|t, x| {
                let a = t.constant(c34.clone())?;
                let y = t.matmul_t(a, x)?;
                project(t, y, &w32)
            }, &w)?;
        }
        "add" => {
            run(&|t, x| {
                let c = t.constant(c34.clone())?;
                let y = t.add(x, c)?;
                project(t, y, &w34)
            }, &x34)?;
            let b = random_tensor(rng, &[4]);
            run(&|t, x| {
                let c = t.constant(c34.clone())?;
                let y = t.add(c, x)?;
                project(t, y, &w34)
            }, &b)?;
        }
        "mul" => {
            run(&|t, x| {
                let c = t.constant(c34.clone())?;
                let y = t.mul(x, c)?;
                project(t, y, &w34)
            }, &x34)?;
            run(&|t, x| {
                let y = t.mul(x, x)?;
                project(t, y, &w34)
            }, &x34)?;
        }
        "scale" => run(&|t, x| {
            let y = t.scale(x, -1.7)?;
            project(t, y, &w34)
        }, &x34)?,
        "sigmoid" => run(&|t, x| {
            let y = t.sigmoid(x)?;
            project(t, y, &w34)
        }, &x34)?,
        "relu" => run(&|t, x| {
            let y = t.relu(x)?;
            project(t, y, &w34)
        }, &x34)?,
        "log_softmax" => run(&|t, x| {
            let y = t.log_softmax(x)?;
            project(t, y, &w34)
        }, &x34)?,
        "embedding" => {
            let table = random_tensor(rng, &[5, 4]);
            run(&|t, x| {
                let y = t.embedding(x, &[4, 0, 4])?;
                project(t, y, &w34)
            }, &table)?;
        }
        "segment_mean" => {
            let x = random_tensor(rng, &[5, 4]);
            run(&|t, x| {
                let y = t.segment_mean(x, &[0, 2, 5])?;
                project(t, y, &w24)
            }, &x)?;
        }
        "repeat_rows" => {
            let x = random_tensor(rng, &[2, 3]);
            run(&|t, x| {
                let y = t.repeat_rows(x, 4)?;
                project(t, y, &w243)
            }, &x)?;
        }
        "max_rows" => {
            let x = random_tensor(rng, &[2, 4, 3]);
            let w = random_tensor(rng, &[2, 3]);
            run(&|t, x| {
                let y = t.max_rows(x)?;
                project(t, y, &w)
            }, &x)?;
            run(&|t, x| {
                let y = t.max_rows(x)?;
                project(t, y, &w13)
            }, &c34.clone().reshape(vec![4, 3])?)?;
        }
        "gather" => run(&|t, x| {
            let y = t.gather(x, &[3, 0, 3])?;
            project(t, y, &w3)
        }, &x34)?,
        "sum" => run(&|t, x| {
            let y = t.mul(x, x)?;
            t.sum(y)
        }, &c23)?,
        "mean" => run(&|t, x| {
            let y = t.mul(x, x)?;
            t.mean(y)
        }, &c23)?,
        "detach" => {
            // Finite differences see through detach by construction, so the
            // check is that no gradient crosses it: the result is the largest
            // analytic gradient magnitude, which must be exactly zero.
            let mut tape = checker.tape(None);
            let x = tape.input(x34.clone())?;
            let d = tape.detach(x);
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq)?;
            let keep = tape.scale(x, 0.0)?;
            let ks = tape.sum(keep)?;
            let y = tape.add(s, ks)?;
            let g = tape.backward(y)?.get_or_zero(x, x34.len());
            worst = g.iter().fold(0.0, |m, v| m.max(v.abs()));
        }
        other => return Err(Error::NotDifferentiable(format!("no gradient check for `{other}`"))),
    }
    Ok(worst)
}

/// Small network over a small dataset, for the composite checks.
fn composite_fixture(strategy: StrategyConfig) -> Result<(Network, Batch)> {
    let spec = DatasetSpec {
        n_objects: 2,
        n_colors: 3,
        max_count: 2,
        n_v: 3,
        n_noise_dims: 1,
        n_train: 6,
        n_test_id: 1,
        n_test_ood: 1,
        ..DatasetSpec::with_seed(5)
    };
    let ds = generate(&spec)?;
    let cfg = ModelConfig {
        d_emb: 3,
        d_q: 4,
        d_v: Some(3),
        d_h: 4,
        d_m: 4,
        classifier_hidden: vec![4],
        nn_q_hidden: vec![3],
    };
    let dims = DataDims::of(&spec);
    let mut net = Network::new(&cfg, dims, strategy, 11)?;
    // Move every parameter off its initialization so no unit sits at a
    // relu kink by construction.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let ids: Vec<ParamId> = net.store.ids().collect();
    for id in ids {
        for v in net.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let batch = Batch::new(ds.train.iter().take(4), &dims)?;
    Ok((net, batch))
}

fn check_composite(checker: &Checker, name: &str) -> Result<f64> {
    match name {
        "predict_logits" => {
            let (net, batch) = composite_fixture(StrategyConfig::classical())?;
            let mut rng = ChaCha8Rng::seed_from_u64(29);
            let w = random_tensor(&mut rng, &[batch.len(), net.dims().answers]);
            let ids = net.model.params();
            checker.check_params(&net.store, Some(&ids), |t| {
                let logits = net.model.forward(t, &batch)?;
                project(t, logits, &w)
            })
        }
        "fused_loss" => {
            let (net, batch) = composite_fixture(StrategyConfig::default())?;
            checker.check_params(&net.store, None, |t| {
                let g = net.compute_losses(t, &batch)?;
                g.l_qm.ok_or_else(|| Error::NotDifferentiable("rubi graph without L_QM".into()))
            })
        }
        "question_only_loss" => {
            // L_QO inside RUBi reaches only the branch: the question vector
            // is detached, so e_q is held out of the numeric side as well.
            let (net, batch) = composite_fixture(StrategyConfig::default())?;
            let ids = net.branch.params();
            let in_rubi = checker.check_params(&net.store, Some(&ids), |t| {
                let g = net.compute_losses(t, &batch)?;
                g.l_qo.ok_or_else(|| Error::NotDifferentiable("rubi graph without L_QO".into()))
            })?;
            let (net, batch) = composite_fixture(StrategyConfig::question_only())?;
            let standalone = checker.check_params(&net.store, None, |t| Ok(net.compute_losses(t, &batch)?.total))?;
            Ok(in_rubi.max(standalone))
        }
        other => Err(Error::NotDifferentiable(format!("no composite check `{other}`"))),
    }
}

/// Checks every primitive at ten seeded random points in [-2, 2] and the
/// three composite loss paths, one outcome per name.
pub fn run_suite(checker: &Checker) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(PRIMITIVES.len() + COMPOSITES.len());
    let outcome = |name: &str, max_error: f64| {
        let passed = if name == "detach" {
            max_error == 0.0
        } else {
            max_error < SUITE_TOLERANCE
        };
        CheckOutcome {
            name: name.to_string(),
            max_error,
            passed,
        }
    };
    for (k, &name) in PRIMITIVES.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for point in 0..POINTS {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x6C, &[k as u64, point]));
            worst = worst.max(check_primitive(checker, name, &mut rng)?);
        }
        out.push(outcome(name, worst));
    }
    for &name in COMPOSITES {
        out.push(outcome(name, check_composite(checker, name)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let p = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = finite_difference_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn log_softmax_component() {
        let p = Tensor::vector(vec![0.3, -1.2, 1.7, 0.05, -0.6]);
        let err = finite_difference_check(
            |t, x| {
                let l = t.log_softmax(x)?;
                let g = t.gather(l, &[2])?;
                t.sum(g)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::vector(vec![0.5, -0.5]);
        let err = finite_difference_check(
            |t, x| {
                let c = t.constant(Tensor::scalar(7.0))?;
                let d = t.detach(x);
                let z = t.scale(d, 0.0)?;
                let s = t.sum(z)?;
                t.add(s, c)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nan_result_is_rejected() {
        let p = Tensor::vector(vec![1.0]);
        let r = finite_difference_check(|t, x| t.scale(x, f64::INFINITY), &p, 1e-5);
        assert!(r.is_err());
    }

    #[test]
    fn suite_passes_and_lists_each_name_once() {
        let out = run_suite(&Checker::default()).unwrap();
        let names: Vec<&str> = out.iter().map(|o| o.name.as_str()).collect();
        let want: Vec<&str> = PRIMITIVES.iter().chain(COMPOSITES).copied().collect();
        assert_eq!(names, want);
        for o in &out {
            assert!(o.passed, "{} {}", o.name, o.max_error);
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        for op in ["sigmoid", "max_rows", "segment_mean"] {
            let checker = Checker {
                corrupt: Some((op, 1.5)),
                ..Checker::default()
            };
            let out = run_suite(&checker).unwrap();
            let hit = out.iter().find(|o| o.name == op).unwrap();
            assert!(!hit.passed, "{op} corruption went unnoticed");
            assert!(out.iter().find(|o| o.name == "relu").unwrap().passed);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
