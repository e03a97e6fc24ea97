//! Adam with the warmup/step-decay schedule, the training loop and
//! checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamId, ParamStore, Tape};
use crate::datagen::{derive_seed, Dataset, Example};
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::sampler::{Sampler, SamplerKind};
use crate::strategy::Network;

fn d_base_lr() -> f64 {
    1.5e-4
}
fn d_peak_lr() -> f64 {
    6e-4
}
fn d_warmup() -> usize {
    7
}
fn d_decay_start() -> usize {
    14
}
fn d_decay_factor() -> f64 {
    0.25
}
fn d_decay_every() -> usize {
    2
}
fn d_batch() -> usize {
    256
}
fn d_epochs() -> usize {
    22
}
fn d_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn d_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_decay_start")]
    pub decay_start_epoch: usize,
    #[serde(default = "d_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "d_decay_every")]
    pub decay_every: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_betas")]
    pub betas: (f64, f64),
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub sampler: SamplerKind,
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            base_lr: d_base_lr(),
            peak_lr: d_peak_lr(),
            warmup_epochs: d_warmup(),
            decay_start_epoch: d_decay_start(),
            decay_factor: d_decay_factor(),
            decay_every: d_decay_every(),
            batch_size: d_batch(),
            epochs: d_epochs(),
            betas: d_betas(),
            adam_eps: d_eps(),
            sampler: SamplerKind::Standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.base_lr > 0.0
            && self.decay_factor > 0.0
            && self.adam_eps > 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && self.decay_every > 0;
        if !positive {
            return Err(Error::Config("learning rates, sizes and epochs must be positive".into()));
        }
        if self.peak_lr < self.base_lr {
            return Err(Error::Config(format!(
                "peak_lr {} is below base_lr {}",
                self.peak_lr, self.base_lr
            )));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate of `epoch`: linear warmup from `base_lr` to `peak_lr`, a
/// plateau, then a step decay every `decay_every` epochs.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        let frac = epoch as f64 / cfg.warmup_epochs as f64;
        cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * frac
    } else if epoch < cfg.decay_start_epoch {
        cfg.peak_lr
    } else {
        let k = 1 + (epoch - cfg.decay_start_epoch) / cfg.decay_every;
        cfg.peak_lr * cfg.decay_factor.powi(k as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value().len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of the parameters in `ids`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Grads,
    ids: &[ParamId],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    for &id in ids {
        if grads.get(id).iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: store.name(id).to_string(),
            });
        }
    }
    state.t += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for &id in ids {
        let g = grads.get(id);
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_qm: f64,
    pub l_qo: f64,
    pub l_rubi: f64,
    /// Running accuracy of the deployed predictor over this epoch's batches.
    pub train_accuracy: f64,
    pub test_id_accuracy: f64,
    pub test_ood_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub strategy: String,
    pub sampler: String,
    pub epochs: Vec<EpochRecord>,
    /// Accuracy of the deployed predictor on the whole train split after training.
    pub final_train_accuracy: f64,
}

pub fn accuracy_of(predictions: &[usize], examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(examples).filter(|(p, e)| **p == e.answer).count();
    hits as f64 / examples.len() as f64
}

/// Seed for the parameter initialization of a run.
pub fn init_seed(train_seed: u64) -> u64 {
    derive_seed(train_seed, &[0x1417])
}

/// Trains `net` in place on `data.train`, evaluating on both test splits
/// after every epoch. `on_epoch` sees each record as soon as it exists.
pub fn train(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunLog> {
    cfg.validate()?;
    let dims = net.dims();
    let sampler = Sampler::new(cfg.sampler, &data.train, &data.answers, cfg.seed)?;
    let mut adam = AdamState::new(&net.store);
    let mut grads = Grads::zeros_like(&net.store);
    let mut log = RunLog {
        strategy: net.strategy.label(),
        sampler: cfg.sampler.name().to_string(),
        ..RunLog::default()
    };
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let (mut s_qm, mut s_qo, mut s_tot) = (0.0, 0.0, 0.0);
        let mut hits = 0usize;
        let mut seen = 0usize;
        let mut steps = 0usize;
        for (step, idx) in sampler.batches(epoch, cfg.batch_size).enumerate() {
            let batch = Batch::new(idx.iter().map(|&i| &data.train[i]), &dims)?;
            grads.zero();
            let touched = {
                let mut tape = Tape::with_params(&net.store);
                let graph = net.compute_losses(&mut tape, &batch).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, step },
                    e => e,
                })?;
                let v = graph.values;
                if !(v.l_qm.is_finite() && v.l_qo.is_finite() && v.l_rubi.is_finite()) {
                    return Err(Error::NonFiniteLoss { epoch, step });
                }
                net.backward_and_route(&tape, &graph, &mut grads)?;
                let logits = tape.value(graph.answer_logits);
                for (i, &a) in batch.answers.iter().enumerate() {
                    hits += usize::from(crate::tensor::Tensor::argmax(logits.row(i)) == a);
                }
                seen += batch.len();
                s_qm += v.l_qm;
                s_qo += v.l_qo;
                s_tot += v.l_rubi;
                steps += 1;
                tape.touched_params()
            };
            adam_step(&mut net.store, &grads, &touched, &mut adam, lr, cfg.betas, cfg.adam_eps)?;
        }
        let n = steps.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            lr,
            l_qm: s_qm / n,
            l_qo: s_qo / n,
            l_rubi: s_tot / n,
            train_accuracy: hits as f64 / seen.max(1) as f64,
            test_id_accuracy: accuracy_of(&net.predict_many(&data.test_id)?, &data.test_id),
            test_ood_accuracy: accuracy_of(&net.predict_many(&data.test_ood)?, &data.test_ood),
        };
        on_epoch(&rec);
        log.epochs.push(rec);
    }
    log.final_train_accuracy = accuracy_of(&net.predict_many(&data.train)?, &data.train);
    Ok(log)
}

const MAGIC: &[u8; 8] = b"RUBICKPT";
const VERSION: u32 = 1;

/// Writes every parameter of `store` with its name and shape, tagged with
/// the 32-byte `digest` of the configuration that produced it.
pub fn save_checkpoint(store: &ParamStore, digest: &[u8; 32], path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(64 + store.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(digest);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value().shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in p.value().data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "checkpoint truncated: needed {} bytes at offset {}, file has {} bytes",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A decoded checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub params: Vec<(String, crate::tensor::Tensor)>,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let nd = r.u32()? as usize;
        let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("shape overflows".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = crate::tensor::Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last parameter",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint { digest, params })
}

/// Loads a checkpoint into `store`, which must have been built from the
/// configuration with the given `digest`.
pub fn load_checkpoint(store: &mut ParamStore, digest: &[u8; 32], path: &Path) -> Result<()> {
    let ck = read_checkpoint(path)?;
    if &ck.digest != digest {
        return Err(Error::Checkpoint(format!(
            "config digest mismatch: checkpoint {} vs expected {}",
            hex(&ck.digest),
            hex(digest)
        )));
    }
    if ck.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            ck.params.len(),
            store.len()
        )));
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(ck.params) {
        if store.name(id) != name || store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} does not match checkpoint entry {} {:?}",
                store.name(id),
                store.get(id).shape(),
                name,
                t.shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_points() {
        let c = TrainConfig::with_seed(0);
        assert!((lr_at(0, &c) - 1.5e-4).abs() < 1e-18);
        assert!((lr_at(7, &c) - 6e-4).abs() < 1e-18);
        assert!((lr_at(13, &c) - 6e-4).abs() < 1e-18);
        assert!((lr_at(14, &c) - 1.5e-4).abs() < 1e-18);
        assert!((lr_at(15, &c) - 1.5e-4).abs() < 1e-18);
        assert!((lr_at(16, &c) - 3.75e-5).abs() < 1e-18);
        let mut prev = 0.0;
        for e in 0..=7 {
            assert!(lr_at(e, &c) >= prev);
            prev = lr_at(e, &c);
        }
        for e in 14..40 {
            assert!(lr_at(e + 1, &c) <= lr_at(e, &c));
        }
    }

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![v]));
        (s, id)
    }

    #[test]
    fn zero_gradient_keeps_parameter() {
        let (mut s, id) = one_param(1.25);
        let g = Grads::zeros_like(&s);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &g, &[id], &mut st, 1e-3, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(s.get(id).data()[0], 1.25);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let (mut s, id) = one_param(0.0);
        let mut g = Grads::zeros_like(&s);
        g.get_mut(id)[0] = 0.3;
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &g, &[id], &mut st, 0.01, (0.9, 0.999), 1e-8).unwrap();
        // bias correction makes m̂ = g and v̂ = g² on the first step
        let want = -0.01 * 0.3 / (0.3 + 1e-8);
        assert!((s.get(id).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let (mut s, id) = one_param(0.0);
        let mut g = Grads::zeros_like(&s);
        g.get_mut(id)[0] = -2.0;
        let mut st = AdamState::new(&s);
        let mut last = 0.0;
        for _ in 0..200 {
            let before = s.get(id).data()[0];
            adam_step(&mut s, &g, &[id], &mut st, 0.01, (0.9, 0.999), 1e-8).unwrap();
            last = s.get(id).data()[0] - before;
        }
        assert!((last - 0.01).abs() < 1e-6, "{last}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = one_param(0.0);
        let mut g = Grads::zeros_like(&s);
        g.get_mut(id)[0] = f64::NAN;
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &g, &[id], &mut st, 0.01, (0.9, 0.999), 1e-8).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
        assert_eq!(st.t, 0);
    }

    #[test]
    fn untouched_parameters_do_not_move() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0]));
        let b = s.add("b", Tensor::vector(vec![1.0]));
        let mut g = Grads::zeros_like(&s);
        g.get_mut(a)[0] = 1.0;
        g.get_mut(b)[0] = 1.0;
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &g, &[a], &mut st, 0.1, (0.9, 0.999), 1e-8).unwrap();
        assert_ne!(s.get(a).data()[0], 1.0);
        assert_eq!(s.get(b).data()[0], 1.0);
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(vec![2, 3], vec![0.1, -2.5, 3e-300, f64::MAX, 0.0, -0.0]).unwrap());
        s.add("y", Tensor::vector(vec![std::f64::consts::PI]));
        let digest = [7u8; 32];
        save_checkpoint(&s, &digest, &path).unwrap();
        let mut t = s.clone();
        t.get_mut(ParamId(1)).data_mut()[0] = 0.0;
        load_checkpoint(&mut t, &digest, &path).unwrap();
        for id in s.ids() {
            let a: Vec<u64> = s.get(id).data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = t.get(id).data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert!(load_checkpoint(&mut t, &[8u8; 32], &path).unwrap_err().to_string().contains("digest"));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_checkpoint(&mut t, &digest, &path).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("bytes"), "{err}");
    }
}
