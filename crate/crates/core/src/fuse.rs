//! Evidence mapping, Dirichlet posterior fusion, the Bayesian loss,
//! component merging and prediction assembly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::adcore::{digamma, lgamma, Tape, Var};
use crate::config::{EvidenceConfig, EvidenceMode};
use crate::contlearn::Framework;
use crate::error::{DecodeError, Result};
use crate::prednet::{MixturePrediction, Source};
use crate::scenegen::{Point, Scene};

const SIMPLEX_TOL: f64 = 1e-6;

/// Specialized evidence from a flow log-density.
pub fn evidence_from_loglik(log_prob: f64, d_h: usize, cfg: &EvidenceConfig) -> Result<f64> {
    if log_prob.is_nan() {
        return Err(DecodeError::Domain {
            func: "evidence",
            value: log_prob,
        });
    }
    let x = match cfg.mode {
        EvidenceMode::PerDimension => log_prob / d_h as f64,
        EvidenceMode::Raw => log_prob,
    };
    Ok(x.clamp(cfg.lo, cfg.hi).exp())
}

/// [`evidence_from_loglik`] for an `n x 1` column of log-densities.
pub fn evidence_tape(tape: &Tape, log_prob: Var, d_h: usize, cfg: &EvidenceConfig) -> Var {
    let x = match cfg.mode {
        EvidenceMode::PerDimension => tape.scale(log_prob, 1.0 / d_h as f64),
        EvidenceMode::Raw => log_prob,
    };
    tape.exp(tape.clamp(x, cfg.lo, cfg.hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub chi_post: Vec<f64>,
    pub e_post: f64,
    pub e0: f64,
    pub e_star: f64,
    pub m_star: Option<u32>,
}

impl PosteriorState {
    /// Dirichlet parameters `e_post * chi_post`.
    pub fn alpha(&self) -> Vec<f64> {
        self.chi_post.iter().map(|c| c * self.e_post).collect()
    }

    /// Share of the posterior contributed by the specialized model.
    pub fn specialized_share(&self) -> f64 {
        self.e_star / self.e_post
    }
}

fn check_simplex(name: &str, chi: &[f64]) -> Result<()> {
    let sum: f64 = chi.iter().sum();
    if chi.is_empty() || chi.iter().any(|c| !(*c >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(DecodeError::invalid(format!(
            "{name} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

pub fn posterior_merge(chi0: &[f64], e0: f64, chi_star: &[f64], e_star: f64) -> Result<PosteriorState> {
    check_simplex("chi0", chi0)?;
    check_simplex("chi_star", chi_star)?;
    if chi0.len() != chi_star.len() {
        return Err(DecodeError::invalid("chi0 and chi_star differ in length"));
    }
    if !(e0 > 0.0) || !(e_star >= 0.0) || !e_star.is_finite() {
        return Err(DecodeError::invalid(format!(
            "evidences must satisfy e0 > 0 and e_star >= 0, got {e0} and {e_star}"
        )));
    }
    let e_post = e0 + e_star;
    let chi_post = chi0
        .iter()
        .zip(chi_star)
        .map(|(a, b)| (e0 * a + e_star * b) / e_post)
        .collect();
    Ok(PosteriorState {
        chi_post,
        e_post,
        e0,
        e_star,
        m_star: None,
    })
}

fn check_alpha(alpha: &[f64], winner: usize) -> Result<()> {
    if winner >= alpha.len() {
        return Err(DecodeError::invalid(format!(
            "winner {winner} outside {} modes",
            alpha.len()
        )));
    }
    if let Some(&a) = alpha.iter().find(|a| !(**a > 0.0)) {
        return Err(DecodeError::Domain {
            func: "dirichlet alpha",
            value: a,
        });
    }
    Ok(())
}

/// `E[-ln eta_w]` for `eta ~ Dir(alpha)`: `psi(alpha_0) - psi(alpha_w)`.
pub fn expected_nll(alpha: &[f64], winner: usize) -> Result<f64> {
    check_alpha(alpha, winner)?;
    let a0: f64 = alpha.iter().sum();
    Ok(digamma(a0)? - digamma(alpha[winner])?)
}

pub fn dirichlet_entropy(alpha: &[f64]) -> Result<f64> {
    check_alpha(alpha, 0)?;
    let a0: f64 = alpha.iter().sum();
    let m = alpha.len() as f64;
    let mut ln_b = -lgamma(a0)?;
    let mut tail = 0.0;
    for &a in alpha {
        ln_b += lgamma(a)?;
        tail += (a - 1.0) * digamma(a)?;
    }
    Ok(ln_b + (a0 - m) * digamma(a0)? - tail)
}

/// Expected negative log-likelihood minus Dirichlet entropy.
pub fn bayes_loss(alpha: &[f64], winner: usize) -> Result<f64> {
    Ok(expected_nll(alpha, winner)? - dirichlet_entropy(alpha)?)
}

/// Mean [`bayes_loss`] over the rows of an `n x M` alpha tensor.
pub fn bayes_loss_tape(tape: &Tape, alpha: Var, winners: &[usize]) -> Result<Var> {
    let (n, m) = tape.shape(alpha);
    let a0 = tape.sum_rows(alpha);
    let psi_a = tape.digamma(alpha)?;
    let psi_a0 = tape.digamma(a0)?;
    let nll = tape.sub(psi_a0, tape.pick(psi_a, winners)?)?;
    let ln_b = tape.sub(tape.sum_rows(tape.lgamma(alpha)?), tape.lgamma(a0)?)?;
    let mid = tape.mul(tape.add_scalar(a0, -(m as f64)), psi_a0)?;
    let tail = tape.sum_rows(tape.mul(tape.add_scalar(alpha, -1.0), psi_a)?);
    let entropy = tape.sub(tape.add(ln_b, mid)?, tail)?;
    let per = tape.sub(nll, entropy)?;
    Ok(tape.scale(tape.sum(per), 1.0 / n.max(1) as f64))
}

/// `e0 chi0 + e_star chi_star` with `chi0` (`n x M`) fixed and `e_star`
/// an `n x 1` column.
pub fn fused_alpha_tape(tape: &Tape, chi0: Var, e0: f64, chi_star: Var, e_star: Var) -> Result<Var> {
    tape.add(tape.scale(chi0, e0), tape.mul(chi_star, e_star)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub trajectory: Vec<Point>,
    pub provenance: Source,
    /// Mode index within the model that produced the component.
    pub mode: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedPrediction {
    /// Ranked by descending weight.
    pub components: Vec<Component>,
    pub posterior: PosteriorState,
}

impl FusedPrediction {
    pub fn trajectories(&self) -> Vec<&[Point]> {
        self.components.iter().map(|c| c.trajectory.as_slice()).collect()
    }

    /// Total weight held by generalized and by specialized components.
    pub fn weight_split(&self) -> (f64, f64) {
        let mut g = 0.0;
        let mut s = 0.0;
        for c in &self.components {
            match c.provenance {
                Source::Generalized => g += c.weight,
                Source::Specialized(_) => s += c.weight,
            }
        }
        (g, s)
    }
}

fn endpoint_distance(a: &[Point], b: &[Point]) -> f64 {
    let (p, q) = (a[a.len() - 1], b[b.len() - 1]);
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Greedy endpoint suppression over the weighted union of both models.
///
/// Candidates are visited by descending weight (generalized first on ties).
/// A candidate within `radius` of a kept component is suppressed and its
/// weight moves to that component. At most `M` components are kept; if fewer
/// than `M` survive, suppressed candidates are appended with zero weight.
pub fn nms_merge(
    gen: &MixturePrediction,
    spec: Option<&MixturePrediction>,
    posterior: &PosteriorState,
    radius: f64,
) -> Result<FusedPrediction> {
    if !(radius > 0.0) {
        return Err(DecodeError::invalid(format!("suppression radius must be positive, got {radius}")));
    }
    let m = gen.chi.len();
    let Some(spec) = spec else {
        let mut components: Vec<Component> = gen
            .chi
            .iter()
            .zip(&gen.trajectories)
            .enumerate()
            .map(|(j, (&w, t))| Component {
                weight: w,
                trajectory: t.clone(),
                provenance: gen.source,
                mode: j,
            })
            .collect();
        components.sort_by(|a, b| b.weight.total_cmp(&a.weight));
        return Ok(FusedPrediction {
            components,
            posterior: posterior.clone(),
        });
    };
    if spec.chi.len() != m {
        return Err(DecodeError::invalid("generalized and specialized predictions differ in M"));
    }
    let (e0, es) = (posterior.e0, posterior.e_star);
    let z = e0 + es;
    let mut pool: Vec<Component> = Vec::with_capacity(2 * m);
    for (pred, e) in [(gen, e0), (spec, es)] {
        for (j, (&c, t)) in pred.chi.iter().zip(&pred.trajectories).enumerate() {
            pool.push(Component {
                weight: e * c / z,
                trajectory: t.clone(),
                provenance: pred.source,
                mode: j,
            });
        }
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| pool[b].weight.total_cmp(&pool[a].weight).then(a.cmp(&b)));
    let mut kept: Vec<Component> = Vec::with_capacity(m);
    let mut suppressed: Vec<Component> = Vec::new();
    for i in order {
        let c = &pool[i];
        match kept
            .iter()
            .position(|k| endpoint_distance(&k.trajectory, &c.trajectory) < radius)
        {
            Some(k) => {
                kept[k].weight += c.weight;
                suppressed.push(Component {
                    weight: 0.0,
                    ..c.clone()
                });
            }
            None if kept.len() < m => kept.push(c.clone()),
            None => {}
        }
    }
    let mut fill = suppressed.into_iter();
    while kept.len() < m {
        match fill.next() {
            Some(c) => kept.push(c),
            None => break,
        }
    }
    kept.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    Ok(FusedPrediction {
        components: kept,
        posterior: posterior.clone(),
    })
}

pub fn sample_dirichlet(alpha: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    check_alpha(alpha, 0)?;
    let mut draws = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let g = Gamma::new(a, 1.0).map_err(|e| DecodeError::invalid(format!("gamma({a}): {e}")))?;
        draws.push(g.sample(rng));
    }
    let s: f64 = draws.iter().sum();
    if !(s > 0.0) {
        let best = alpha
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut out = vec![0.0; alpha.len()];
        out[best] = 1.0;
        return Ok(out);
    }
    Ok(draws.into_iter().map(|d| d / s).collect())
}

/// Draws `k` component indices: `eta ~ Dir(e_post * w)` over the weighted
/// components, then one component from `Categorical(eta)`.
pub fn sample_components(fused: &FusedPrediction, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let live: Vec<usize> = (0..fused.components.len())
        .filter(|&i| fused.components[i].weight > 0.0)
        .collect();
    if live.is_empty() {
        return Err(DecodeError::invalid("no component carries weight"));
    }
    let alpha: Vec<f64> = live
        .iter()
        .map(|&i| fused.posterior.e_post * fused.components[i].weight)
        .collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let eta = sample_dirichlet(&alpha, rng)?;
        let mut u: f64 = rng.random();
        let mut pick = live[live.len() - 1];
        for (j, p) in eta.iter().enumerate() {
            if u < *p {
                pick = live[j];
                break;
            }
            u -= p;
        }
        out.push(pick);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub fused: FusedPrediction,
    /// Ranked components when deterministic, otherwise `k` sampled ones.
    pub samples: Vec<Vec<Point>>,
    /// `(query_id, log_prob)` for every finalized query.
    pub log_evidence: Vec<(u32, f64)>,
}

/// Encode, select a domain, decode with both heads, fuse and merge. The
/// deterministic branch returns the fused components by rank; the stochastic
/// branch samples `k` trajectories.
pub fn predict(
    scene: &Scene,
    framework: &Framework,
    k: usize,
    deterministic: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Prediction> {
    if k == 0 {
        return Err(DecodeError::invalid("sample count must be at least 1"));
    }
    let view = framework.view()?;
    let h = framework.encoder.encode_batch(std::slice::from_ref(scene))?;
    let parts = view.parts(&h)?.remove(0);
    let fused = view.fuse(&parts, framework.config.loss.e0)?;
    let samples = if deterministic {
        fused.components.iter().map(|c| c.trajectory.clone()).collect()
    } else {
        sample_components(&fused, k, rng)?
            .into_iter()
            .map(|i| fused.components[i].trajectory.clone())
            .collect()
    };
    Ok(Prediction {
        fused,
        samples,
        log_evidence: parts.log_evidence,
    })
}
