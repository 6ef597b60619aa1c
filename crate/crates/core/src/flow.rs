//! Affine-coupling normalizing flow over hidden representations.
//!
//! Layer `k` keeps one half of its input (the first half for even `k`, the
//! second for odd `k`) and maps the other half `b` to
//! `exp(s(a)) * b + t(a)` with `s` clamped to `[-clamp, clamp]`. The
//! log-density is `log N(z; 0, I) + sum_k sum(s_k)`.

use serde::{Deserialize, Serialize};

use crate::adcore::{Tape, Tensor, Var};
use crate::bundle::{dense, Manifest, ParamBundle, TargetKind};
use crate::config::Config;
use crate::error::{DecodeError, Result};
use crate::hyper::HypernetState;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub d: usize,
    pub layers: usize,
    pub hidden: usize,
    pub clamp: f64,
}

impl FlowSpec {
    pub fn new(d: usize, layers: usize, hidden: usize, clamp: f64) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(DecodeError::invalid(format!("flow dimension must be even, got {d}")));
        }
        if layers < 2 {
            return Err(DecodeError::invalid(format!("flow needs at least 2 layers, got {layers}")));
        }
        if !(clamp > 0.0) {
            return Err(DecodeError::invalid(format!("scale clamp must be positive, got {clamp}")));
        }
        Ok(FlowSpec {
            d,
            layers,
            hidden,
            clamp,
        })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        FlowSpec::new(
            cfg.model.d_h,
            cfg.model.flow_layers,
            cfg.model.flow_hidden,
            cfg.model.flow_scale_clamp,
        )
    }

    /// Per layer `k`: scale net `c{k}_s1`, `c{k}_s2` and shift net `c{k}_t1`,
    /// `c{k}_t2`, each `d/2 -> hidden -> d/2`.
    pub fn manifest(&self) -> Manifest {
        let half = self.d / 2;
        let mut m = Manifest::new(TargetKind::Flow);
        for k in 0..self.layers {
            m = m
                .dense(&format!("c{k}_s1"), half, self.hidden)
                .dense_scaled(&format!("c{k}_s2"), self.hidden, half, OUTPUT_GAIN)
                .dense(&format!("c{k}_t1"), half, self.hidden)
                .dense_scaled(&format!("c{k}_t2"), self.hidden, half, OUTPUT_GAIN);
        }
        m
    }

    fn layer_len(&self) -> usize {
        let half = self.d / 2;
        2 * (half * self.hidden + self.hidden + self.hidden * half + half)
    }
}

/// Generated coupling outputs start small so a fresh flow is close to the
/// identity.
pub const OUTPUT_GAIN: f64 = 0.1;

/// Which half a coupling layer keeps unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    KeepFirst,
    KeepSecond,
}

impl Parity {
    pub fn of_layer(k: usize) -> Parity {
        if k % 2 == 0 {
            Parity::KeepFirst
        } else {
            Parity::KeepSecond
        }
    }
}

/// One coupling layer on the tape. `h` is `n x d`; `p` holds the layer's
/// eight tensors in manifest order. Returns `(h', log_det)` with `log_det`
/// of shape `n x 1`.
pub fn coupling_tape(tape: &Tape, h: Var, p: &[Var], parity: Parity, clamp: f64) -> Result<(Var, Var)> {
    let (n, d) = tape.shape(h);
    if d % 2 != 0 {
        return Err(DecodeError::Shape {
            op: "coupling",
            lhs: (n, d),
            rhs: (n, d + 1),
        });
    }
    let half = d / 2;
    let (first, second) = (tape.slice(h, 0, half)?, tape.slice(h, half, d)?);
    let (a, b) = match parity {
        Parity::KeepFirst => (first, second),
        Parity::KeepSecond => (second, first),
    };
    let s = dense(tape, tape.tanh(dense(tape, a, p[0], p[1])?), p[2], p[3])?;
    let s = tape.clamp(s, -clamp, clamp);
    let t = dense(tape, tape.tanh(dense(tape, a, p[4], p[5])?), p[6], p[7])?;
    let b2 = tape.add(tape.mul(tape.exp(s), b)?, t)?;
    let out = match parity {
        Parity::KeepFirst => tape.concat(&[a, b2])?,
        Parity::KeepSecond => tape.concat(&[b2, a])?,
    };
    Ok((out, tape.sum_rows(s)))
}

/// Single-vector coupling layer; `layer` is one layer's slice of a flow
/// bundle.
pub fn coupling_forward(h: &[f64], layer: &[f64], spec: &FlowSpec, parity: Parity) -> Result<(Vec<f64>, f64)> {
    if h.len() % 2 != 0 {
        return Err(DecodeError::invalid(format!("coupling input has odd length {}", h.len())));
    }
    if h.len() != spec.d || layer.len() != spec.layer_len() {
        return Err(DecodeError::invalid("coupling input does not match the flow spec"));
    }
    let tape = Tape::new();
    let lm = layer_manifest(spec);
    let p = lm.unpack(&tape, tape.constant(Tensor::row(layer.to_vec())))?;
    let hv = tape.constant(Tensor::row(h.to_vec()));
    let (out, ld) = coupling_tape(&tape, hv, &p, parity, spec.clamp)?;
    Ok((tape.value(out).data().to_vec(), tape.item(ld)))
}

fn layer_manifest(spec: &FlowSpec) -> Manifest {
    let one = FlowSpec { layers: 1, ..*spec };
    one.manifest()
}

/// Exact inverse of [`coupling_forward`].
pub fn coupling_inverse(y: &[f64], layer: &[f64], spec: &FlowSpec, parity: Parity) -> Result<Vec<f64>> {
    if y.len() != spec.d || layer.len() != spec.layer_len() {
        return Err(DecodeError::invalid("coupling input does not match the flow spec"));
    }
    let half = spec.d / 2;
    let (first, second) = y.split_at(half);
    let (a, b2) = match parity {
        Parity::KeepFirst => (first, second),
        Parity::KeepSecond => (second, first),
    };
    let bundle = ParamBundle::new(layer_manifest(spec), layer.to_vec())?;
    let net = |w1: &str, b1: &str, w2: &str, b2n: &str| -> Vec<f64> {
        let w1 = bundle.tensor(w1).expect("layer tensor");
        let bb1 = bundle.tensor(b1).expect("layer tensor");
        let w2 = bundle.tensor(w2).expect("layer tensor");
        let bb2 = bundle.tensor(b2n).expect("layer tensor");
        let hid: Vec<f64> = (0..spec.hidden)
            .map(|j| {
                let z: f64 = (0..half).map(|i| a[i] * w1[i * spec.hidden + j]).sum::<f64>() + bb1[j];
                z.tanh()
            })
            .collect();
        (0..half)
            .map(|j| (0..spec.hidden).map(|i| hid[i] * w2[i * half + j]).sum::<f64>() + bb2[j])
            .collect()
    };
    let s = net("c0_s1_w", "c0_s1_b", "c0_s2_w", "c0_s2_b");
    let t = net("c0_t1_w", "c0_t1_b", "c0_t2_w", "c0_t2_b");
    let b: Vec<f64> = (0..half)
        .map(|i| (b2[i] - t[i]) * (-s[i].clamp(-spec.clamp, spec.clamp)).exp())
        .collect();
    Ok(match parity {
        Parity::KeepFirst => a.iter().chain(&b).copied().collect(),
        Parity::KeepSecond => b.iter().chain(a).copied().collect(),
    })
}

/// Log-density of each row of `h` (`n x d`) as an `n x 1` tensor, plus the
/// latent `z`.
pub fn log_prob_tape(tape: &Tape, spec: &FlowSpec, params: Var, h: Var) -> Result<(Var, Var)> {
    let p = spec.manifest().unpack(tape, params)?;
    let (n, d) = tape.shape(h);
    if d != spec.d {
        return Err(DecodeError::Shape {
            op: "flow",
            lhs: (n, d),
            rhs: (n, spec.d),
        });
    }
    let mut z = h;
    let mut log_det = tape.constant(Tensor::zeros(n, 1));
    for k in 0..spec.layers {
        let (next, ld) = coupling_tape(tape, z, &p[8 * k..8 * (k + 1)], Parity::of_layer(k), spec.clamp)?;
        z = next;
        log_det = tape.add(log_det, ld)?;
    }
    let quad = tape.scale(tape.sum_rows(tape.square(z)), -0.5);
    let lp = tape.add_scalar(tape.add(quad, log_det)?, -0.5 * d as f64 * LN_2PI);
    Ok((lp, z))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowEval {
    pub z: Vec<f64>,
    pub log_det: f64,
    pub log_prob: f64,
}

pub fn flow_log_prob(h: &[f64], params: &ParamBundle, spec: &FlowSpec) -> Result<FlowEval> {
    let t = Tensor::row(h.to_vec());
    Ok(flow_eval_batch(&t, params, spec)?.remove(0))
}

pub fn flow_eval_batch(h: &Tensor, params: &ParamBundle, spec: &FlowSpec) -> Result<Vec<FlowEval>> {
    spec.manifest().check_matches(&params.manifest)?;
    let tape = Tape::new();
    let p = tape.constant(params.as_tensor());
    let hv = tape.constant(h.clone());
    let (lp, z) = log_prob_tape(&tape, spec, p, hv)?;
    let lp = tape.value(lp);
    let z = tape.value(z);
    Ok((0..h.rows())
        .map(|i| {
            let zi = z.row_slice(i).to_vec();
            let sq: f64 = zi.iter().map(|v| v * v).sum();
            let log_prob = lp.get(i, 0);
            FlowEval {
                log_det: log_prob + 0.5 * sq + 0.5 * spec.d as f64 * LN_2PI,
                z: zi,
                log_prob,
            }
        })
        .collect())
}

/// Log-densities of every row, without the latents.
pub fn log_prob_batch(h: &Tensor, params: &ParamBundle, spec: &FlowSpec) -> Result<Vec<f64>> {
    spec.manifest().check_matches(&params.manifest)?;
    let tape = Tape::new();
    let p = tape.constant(params.as_tensor());
    let (lp, _) = log_prob_tape(&tape, spec, p, tape.constant(h.clone()))?;
    Ok(tape.value(lp).data().to_vec())
}

/// Inverse of the full flow.
pub fn flow_inverse(z: &[f64], params: &ParamBundle, spec: &FlowSpec) -> Result<Vec<f64>> {
    spec.manifest().check_matches(&params.manifest)?;
    let len = spec.layer_len();
    let mut h = z.to_vec();
    for k in (0..spec.layers).rev() {
        h = coupling_inverse(&h, &params.flat[k * len..(k + 1) * len], spec, Parity::of_layer(k))?;
    }
    Ok(h)
}

/// Mean negative log-likelihood over the rows of `h`.
pub fn domain_loss(h: &Tensor, params: &ParamBundle, spec: &FlowSpec) -> Result<f64> {
    if h.rows() == 0 {
        return Err(DecodeError::invalid("domain loss needs a nonempty batch"));
    }
    let lp = log_prob_batch(h, params, spec)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

pub fn domain_loss_tape(tape: &Tape, spec: &FlowSpec, params: Var, h: Var) -> Result<(Var, Var)> {
    if tape.shape(h).0 == 0 {
        return Err(DecodeError::invalid("domain loss needs a nonempty batch"));
    }
    let (lp, _) = log_prob_tape(tape, spec, params, h)?;
    Ok((tape.neg(tape.mean(lp)), lp))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub query_id: u32,
    /// `(query_id, log_prob)` for every finalized query, in id order.
    pub log_evidence: Vec<(u32, f64)>,
}

/// Picks the finalized query whose flow gives `h` the highest likelihood;
/// ties go to the smaller id.
pub fn select_domain(h: &[f64], state: &HypernetState, spec: &FlowSpec) -> Result<Selection> {
    let flows = finalized_flows(state)?;
    let t = Tensor::row(h.to_vec());
    Ok(select_batch(&t, &flows, spec)?.remove(0))
}

/// Generated flow bundles for every finalized query.
pub fn finalized_flows(state: &HypernetState) -> Result<Vec<(u32, ParamBundle)>> {
    let flows: Vec<(u32, ParamBundle)> = state
        .finalized()
        .map(|q| Ok((q.id, state.flow.generate(&q.q)?)))
        .collect::<Result<_>>()?;
    if flows.is_empty() {
        return Err(DecodeError::NoFinalizedQueries);
    }
    Ok(flows)
}

pub fn select_batch(h: &Tensor, flows: &[(u32, ParamBundle)], spec: &FlowSpec) -> Result<Vec<Selection>> {
    if flows.is_empty() {
        return Err(DecodeError::NoFinalizedQueries);
    }
    let per_flow: Vec<Vec<f64>> = flows
        .iter()
        .map(|(_, p)| log_prob_batch(h, p, spec))
        .collect::<Result<_>>()?;
    Ok((0..h.rows())
        .map(|i| {
            let log_evidence: Vec<(u32, f64)> =
                flows.iter().zip(&per_flow).map(|((id, _), lp)| (*id, lp[i])).collect();
            let mut best = log_evidence[0];
            for &(id, lp) in &log_evidence[1..] {
                if lp > best.1 || (lp == best.1 && id < best.0) {
                    best = (id, lp);
                }
            }
            Selection {
                query_id: best.0,
                log_evidence,
            }
        })
        .collect())
}
