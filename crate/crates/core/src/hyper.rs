//! Chunked hypernetwork generating decoder heads and flows from domain
//! queries.
//!
//! Each target (decoder head, flow) has its own trunk and chunk-embedding
//! bank. Chunk `i` of a target is `trunk([mip(q), b_i])`; chunks are
//! concatenated, truncated to the target's parameter count and multiplied
//! elementwise by `sqrt(1 / fan_in)` of the layer each entry populates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adcore::{Tape, Tensor, Var};
use crate::bundle::{dense, Manifest, ParamBundle, TargetKind};
use crate::config::Config;
use crate::error::{DecodeError, Result};

/// `[cos q, sin q] / sqrt(d_q)`, a unit vector for every `q`.
pub fn mip_transform(q: &[f64]) -> Vec<f64> {
    let s = 1.0 / (q.len().max(1) as f64).sqrt();
    q.iter()
        .map(|x| x.cos() * s)
        .chain(q.iter().map(|x| x.sin() * s))
        .collect()
}

/// [`mip_transform`] on the tape for a `1 x d_q` query.
pub fn mip_tape(tape: &Tape, q: Var) -> Result<Var> {
    let d = tape.shape(q).1;
    let both = tape.concat(&[tape.cos(q), tape.sin(q)])?;
    Ok(tape.scale(both, 1.0 / (d.max(1) as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainQuery {
    pub id: u32,
    pub q: Vec<f64>,
    pub finalized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperSpec {
    pub d_q: usize,
    pub d_b: usize,
    pub trunk_hidden: Vec<usize>,
    pub chunk_decoder: usize,
    pub chunk_flow: usize,
}

impl HyperSpec {
    pub fn from_config(cfg: &Config) -> Self {
        HyperSpec {
            d_q: cfg.model.d_q,
            d_b: cfg.model.d_b,
            trunk_hidden: cfg.model.trunk_hidden.clone(),
            chunk_decoder: cfg.model.chunk_decoder,
            chunk_flow: cfg.model.chunk_flow,
        }
    }

    pub fn trunk_manifest(&self, chunk: usize) -> Manifest {
        let mut m = Manifest::new(TargetKind::HyperTrunk);
        let mut fan_in = 2 * self.d_q + self.d_b;
        for (i, &h) in self.trunk_hidden.iter().enumerate() {
            m = m.dense(&format!("trunk{i}"), fan_in, h);
            fan_in = h;
        }
        m.dense("trunk_out", fan_in, chunk)
    }
}

/// Trunk and chunk bank for one target network.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetGenerator {
    pub target: Manifest,
    pub chunk: usize,
    pub d_b: usize,
    pub trunk: ParamBundle,
    /// `n_chunks x d_b`, row-major.
    pub bank: Vec<f64>,
}

impl TargetGenerator {
    pub fn n_chunks(&self) -> usize {
        self.target.total().div_ceil(self.chunk)
    }

    pub fn bank_tensor(&self) -> Tensor {
        Tensor::new(self.n_chunks(), self.d_b, self.bank.clone()).expect("bank shape")
    }

    /// Generated flat parameters, `1 x total`.
    pub fn generate_tape(&self, tape: &Tape, q: Var, trunk: Var, bank: Var) -> Result<Var> {
        let n = self.n_chunks();
        let x = tape.concat(&[tape.repeat_rows(mip_tape(tape, q)?, n), bank])?;
        let p = self.trunk.manifest.unpack(tape, trunk)?;
        let layers = p.len() / 2;
        let mut a = x;
        for l in 0..layers {
            a = dense(tape, a, p[2 * l], p[2 * l + 1])?;
            if l + 1 < layers {
                a = tape.tanh(a);
            }
        }
        let flat = tape.reshape(a, 1, n * self.chunk)?;
        let flat = tape.slice(flat, 0, self.target.total())?;
        let gains = tape.constant(Tensor::row(self.target.fan_in_gains()));
        tape.mul(flat, gains)
    }

    pub fn generate(&self, q: &[f64]) -> Result<ParamBundle> {
        let tape = Tape::new();
        let qv = tape.constant(Tensor::row(q.to_vec()));
        let trunk = tape.constant(self.trunk.as_tensor());
        let bank = tape.constant(self.bank_tensor());
        let out = self.generate_tape(&tape, qv, trunk, bank)?;
        ParamBundle::new(self.target.clone(), tape.value(out).data().to_vec())
    }

    /// Data-dependent scaling: every trunk layer is rescaled so its
    /// pre-activations have unit variance over probe inputs built from random
    /// queries and the bank. Generated entries then have variance
    /// `1 / fan_in` of their target layer.
    fn principled_init(spec: &HyperSpec, target: Manifest, chunk: usize, rng: &mut ChaCha8Rng) -> Self {
        let trunk_manifest = spec.trunk_manifest(chunk);
        let d_b = spec.d_b;
        let n = target.total().div_ceil(chunk);
        let bank_std = Normal::new(0.0, (1.0 / d_b as f64).sqrt()).expect("valid std");
        let bank: Vec<f64> = (0..n * d_b).map(|_| bank_std.sample(rng)).collect();

        const PROBES: usize = 16;
        let width = 2 * spec.d_q + d_b;
        let mut x = Vec::with_capacity(PROBES * n * width);
        for _ in 0..PROBES {
            let q = random_query(spec.d_q, rng);
            let m = mip_transform(&q);
            for i in 0..n {
                x.extend_from_slice(&m);
                x.extend_from_slice(&bank[i * d_b..(i + 1) * d_b]);
            }
        }
        let mut act = Tensor::new(PROBES * n, width, x).expect("probe shape");
        let mut flat = Vec::with_capacity(trunk_manifest.total());
        let layers = trunk_manifest.entries.len() / 2;
        for l in 0..layers {
            let w_spec = &trunk_manifest.entries[2 * l];
            let w: Vec<f64> = (0..w_spec.len()).map(|_| StandardNormal.sample(rng)).collect();
            let w = Tensor::new(w_spec.rows, w_spec.cols, w).expect("weight shape");
            let pre = act.matmul(&w).expect("probe matmul");
            let ms = pre.data().iter().map(|v| v * v).sum::<f64>() / pre.len() as f64;
            let s = 1.0 / ms.sqrt().max(1e-12);
            flat.extend(w.data().iter().map(|v| v * s));
            flat.extend(std::iter::repeat_n(0.0, w_spec.cols));
            let scaled: Vec<f64> = pre.data().iter().map(|v| (v * s).tanh()).collect();
            act = Tensor::new(pre.rows(), pre.cols(), scaled).expect("activation shape");
        }
        TargetGenerator {
            target,
            chunk,
            d_b,
            trunk: ParamBundle::new(trunk_manifest, flat).expect("trunk size"),
            bank,
        }
    }
}

/// Coordinates uniform on `[-pi, pi)`.
pub fn random_query(d_q: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d_q)
        .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTarget {
    pub query_id: u32,
    pub decoder: Vec<f64>,
    pub flow: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypernetState {
    pub spec: HyperSpec,
    pub decoder: TargetGenerator,
    pub flow: TargetGenerator,
    pub queries: Vec<DomainQuery>,
    /// Outputs frozen when each query's phase finalized; never rewritten.
    pub stored: Vec<StoredTarget>,
}

/// Tape handles for the trainable hypernetwork tensors.
#[derive(Clone, Copy, Debug)]
pub struct HyperVars {
    pub decoder_trunk: Var,
    pub decoder_bank: Var,
    pub flow_trunk: Var,
    pub flow_bank: Var,
}

impl HypernetState {
    pub fn new(
        spec: HyperSpec,
        decoder_target: Manifest,
        flow_target: Manifest,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if decoder_target.target != TargetKind::DecoderHead || flow_target.target != TargetKind::Flow {
            return Err(DecodeError::invalid("hypernetwork targets must be a decoder head and a flow"));
        }
        let decoder = TargetGenerator::principled_init(&spec, decoder_target, spec.chunk_decoder, rng);
        let flow = TargetGenerator::principled_init(&spec, flow_target, spec.chunk_flow, rng);
        Ok(HypernetState {
            spec,
            decoder,
            flow,
            queries: Vec::new(),
            stored: Vec::new(),
        })
    }

    pub fn generator(&self, target: TargetKind) -> Result<&TargetGenerator> {
        match target {
            TargetKind::DecoderHead => Ok(&self.decoder),
            TargetKind::Flow => Ok(&self.flow),
            other => Err(DecodeError::invalid(format!(
                "the hypernetwork has no manifest for target {other:?}"
            ))),
        }
    }

    pub fn query(&self, id: u32) -> Result<&DomainQuery> {
        self.queries
            .iter()
            .find(|q| q.id == id)
            .ok_or_else(|| DecodeError::invalid(format!("no query with id {id}")))
    }

    pub fn finalized(&self) -> impl Iterator<Item = &DomainQuery> {
        self.queries.iter().filter(|q| q.finalized)
    }

    pub fn finalized_count(&self) -> usize {
        self.finalized().count()
    }

    /// Appends query `m` with a random initial vector.
    pub fn add_query(&mut self, rng: &mut ChaCha8Rng) -> Result<u32> {
        if let Some(q) = self.queries.iter().find(|q| !q.finalized) {
            return Err(DecodeError::Phase(format!(
                "query {} is still training; finalize it first",
                q.id
            )));
        }
        let id = self.queries.len() as u32 + 1;
        self.queries.push(DomainQuery {
            id,
            q: random_query(self.spec.d_q, rng),
            finalized: false,
        });
        Ok(id)
    }

    pub fn hypernet_forward(&self, query_id: u32, target: TargetKind) -> Result<ParamBundle> {
        let q = self.query(query_id)?;
        self.generator(target)?.generate(&q.q)
    }

    /// Freezes the in-progress query and stores its generated outputs.
    pub fn finalize_phase(&mut self) -> Result<u32> {
        let idx = self
            .queries
            .iter()
            .position(|q| !q.finalized)
            .ok_or_else(|| DecodeError::Phase("no phase in progress; the last phase is already finalized".into()))?;
        let q = self.queries[idx].clone();
        let decoder = self.decoder.generate(&q.q)?.flat;
        let flow = self.flow.generate(&q.q)?.flat;
        self.stored.push(StoredTarget {
            query_id: q.id,
            decoder,
            flow,
        });
        self.queries[idx].finalized = true;
        Ok(q.id)
    }

    /// `lambda * sum_i |stored_i - H(q_i)|^2` over finalized queries and both
    /// targets.
    pub fn reg_loss(&self, lambda: f64) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.stored {
            let q = &self.query(s.query_id)?.q;
            for (gen, stored) in [(&self.decoder, &s.decoder), (&self.flow, &s.flow)] {
                let now = gen.generate(q)?;
                total += now
                    .flat
                    .iter()
                    .zip(stored)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>();
            }
        }
        Ok(lambda * total)
    }

    pub fn reg_loss_tape(&self, tape: &Tape, vars: &HyperVars, lambda: f64) -> Result<Var> {
        let mut total = tape.constant(Tensor::scalar(0.0));
        for s in &self.stored {
            let q = tape.constant(Tensor::row(self.query(s.query_id)?.q.clone()));
            for (gen, trunk, bank, stored) in [
                (&self.decoder, vars.decoder_trunk, vars.decoder_bank, &s.decoder),
                (&self.flow, vars.flow_trunk, vars.flow_bank, &s.flow),
            ] {
                let now = gen.generate_tape(tape, q, trunk, bank)?;
                let diff = tape.sub(now, tape.constant(Tensor::row(stored.clone())))?;
                total = tape.add(total, tape.sum(tape.square(diff)))?;
            }
        }
        Ok(tape.scale(total, lambda))
    }

    /// Sup-norm distance between the current output for `query_id` and its
    /// stored target, over both targets.
    pub fn drift(&self, query_id: u32) -> Result<f64> {
        let s = self
            .stored
            .iter()
            .find(|s| s.query_id == query_id)
            .ok_or_else(|| DecodeError::invalid(format!("query {query_id} has no stored target")))?;
        let q = &self.query(query_id)?.q;
        let mut worst: f64 = 0.0;
        for (gen, stored) in [(&self.decoder, &s.decoder), (&self.flow, &s.flow)] {
            let now = gen.generate(q)?;
            for (a, b) in now.flat.iter().zip(stored) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }

    pub fn vars(&self, tape: &Tape) -> HyperVars {
        HyperVars {
            decoder_trunk: tape.param(self.decoder.trunk.as_tensor()),
            decoder_bank: tape.param(self.decoder.bank_tensor()),
            flow_trunk: tape.param(self.flow.trunk.as_tensor()),
            flow_bank: tape.param(self.flow.bank_tensor()),
        }
    }

    /// Trainable buffers in the order of [`HyperVars`].
    pub fn buffers_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.decoder.trunk.flat,
            &mut self.decoder.bank,
            &mut self.flow.trunk.flat,
            &mut self.flow.bank,
        ]
    }
}
