//! Parameterized building blocks: affine maps, embeddings, MLPs and the
//! low-rank bilinear fusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seeded parameter initializer. Values depend only on the seed and on the
/// order in which layers are constructed.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `Uniform(-a, a)` with `a = sqrt(6 / fan_in)`.
    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.bounded(shape, (6.0 / fan_in as f64).sqrt())
    }

    /// `Uniform(-a, a)`.
    pub fn bounded(&mut self, shape: &[usize], a: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.uniform(&[d_out, d_in], d_in));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let h = tape.matmul_t(x, w)?;
        tape.add(h, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, vocab: usize, dim: usize) -> Self {
        let table = store.add(format!("{name}.table"), init.bounded(&[vocab, dim], 1.0));
        Self { table, vocab, dim }
    }

    pub fn lookup(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let t = tape.param(self.table);
        tape.embedding(t, ids)
    }
}

/// Affine layers with ReLU between them and nothing after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists the output width of each layer.
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, sizes: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut prev = d_in;
        for (i, &d) in sizes.iter().enumerate() {
            layers.push(Linear::new(store, init, &format!("{name}.{i}"), prev, d));
            prev = d;
        }
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.d_in() {
            return Err(Error::ShapeMismatch {
                op: "mlp",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.d_in()],
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h)?;
            }
            h = layer.forward(tape, h)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// `fuse(q, v) = proj_out(proj_q(q) ⊙ proj_v(v))`.
#[derive(Clone, Debug)]
pub struct LowRankBilinearFusion {
    pub proj_q: Linear,
    pub proj_v: Linear,
    pub proj_out: Linear,
}

impl LowRankBilinearFusion {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d_q: usize,
        d_v: usize,
        d_h: usize,
        d_m: usize,
    ) -> Self {
        Self {
            proj_q: Linear::new(store, init, &format!("{name}.proj_q"), d_q, d_h),
            proj_v: Linear::new(store, init, &format!("{name}.proj_v"), d_v, d_h),
            proj_out: Linear::new(store, init, &format!("{name}.proj_out"), d_h, d_m),
        }
    }

    pub fn d_out(&self) -> usize {
        self.proj_out.d_out
    }

    /// Fuses `q` with `v` of the same shape class: `[B, d_q]` with `[B, d_v]`.
    pub fn fuse(&self, tape: &mut Tape, q: Var, v: Var) -> Result<Var> {
        let hq = self.proj_q.forward(tape, q)?;
        let hv = self.proj_v.forward(tape, v)?;
        let h = tape.mul(hq, hv)?;
        self.proj_out.forward(tape, h)
    }

    /// Fuses one question vector per example with each of its regions:
    /// `q` is `[B, d_q]`, `regions` is `[B, n_v, d_v]`, the result
    /// `[B, n_v, d_m]`.
    pub fn fuse_regions(&self, tape: &mut Tape, q: Var, regions: Var) -> Result<Var> {
        let s = tape.shape(regions).to_vec();
        if s.len() != 3 || tape.shape(q).first() != Some(&s[0]) {
            return Err(Error::ShapeMismatch {
                op: "fuse_regions",
                lhs: tape.shape(q).to_vec(),
                rhs: s,
            });
        }
        let hq = self.proj_q.forward(tape, q)?;
        let hq = tape.repeat_rows(hq, s[1])?;
        let hv = self.proj_v.forward(tape, regions)?;
        let h = tape.mul(hq, hv)?;
        self.proj_out.forward(tape, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.proj_q, &self.proj_v, &self.proj_out]
            .into_iter()
            .flat_map(Linear::params)
            .collect()
    }
}
