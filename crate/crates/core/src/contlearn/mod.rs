//! Pretraining, sequential expansion phases, evaluation and baselines.

mod baseline;
mod checkpoint;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adcore::{Tape, Tensor, Var};
use crate::bundle::ParamBundle;
use crate::config::Config;
use crate::error::{DecodeError, Result};
use crate::flow::{self, FlowSpec};
use crate::fuse::{self, FusedPrediction, PosteriorState};
use crate::hyper::{HyperSpec, HyperVars, HypernetState};
use crate::metrics;
use crate::prednet::{self, Anchors, Encoder, HeadSpec, MixturePrediction, Source};
use crate::scenegen::Scene;
use crate::train::{self, shuffled_batches, Trainer};

pub use baseline::{run_baseline, BaselineKind, BaselineReport, PlanStep};
pub use checkpoint::{
    checkpoint_digest, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_motion: f64,
    pub l_domain: f64,
    pub l_reg: f64,
    pub lr: f64,
    /// Seconds since the phase started; not persisted.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    /// 0 for pretraining.
    pub phase: usize,
    pub domain: String,
    pub epochs: Vec<EpochLog>,
}

impl PhaseLog {
    /// SHA-256 over the CSV rows without wall time.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.epochs {
            h.update(format!("{},{},{},{},{}\n", e.epoch, e.l_motion, e.l_domain, e.l_reg, e.lr));
        }
        hex::encode(h.finalize())
    }

    /// `epoch,l_motion,l_domain,l_reg,lr,wall_time`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_motion,l_domain,l_reg,lr,wall_time\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                e.epoch, e.l_motion, e.l_domain, e.l_reg, e.lr, e.wall_time
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Framework {
    pub config: Config,
    pub encoder: Encoder,
    pub generalized: ParamBundle,
    pub anchors: Anchors,
    pub hyper: HypernetState,
    pub logs: Vec<PhaseLog>,
}

/// Pretrains the generalized model and sets up an empty hypernetwork.
pub fn run_pretrain(cfg: &Config, mix: &[Scene]) -> Result<Framework> {
    cfg.validate()?;
    let pre = prednet::pretrain_generalized(mix, cfg)?;
    let hyper = HypernetState::new(
        HyperSpec::from_config(cfg),
        HeadSpec::from_config(cfg).manifest(),
        FlowSpec::from_config(cfg)?.manifest(),
        &mut train::rng(cfg.seed, train::STREAM_HYPER_INIT),
    )?;
    Ok(Framework {
        config: cfg.clone(),
        encoder: pre.encoder,
        generalized: pre.decoder,
        anchors: pre.anchors,
        hyper,
        logs: vec![PhaseLog {
            phase: 0,
            domain: "pretrain-mix".into(),
            epochs: pre.log,
        }],
    })
}

/// Per-sample tensors an expansion step consumes.
#[derive(Clone, Debug)]
pub struct ExpansionBatch {
    pub h: Tensor,
    pub chi0: Tensor,
    pub gt: Tensor,
    pub winners: Vec<usize>,
}

impl ExpansionBatch {
    pub fn from_scenes(fw: &Framework, scenes: &[Scene]) -> Result<Self> {
        let h = fw.encoder.encode_batch(scenes)?;
        let gen = fw.generalized_predictions(&h)?;
        let m = fw.anchors.len();
        let chi0 = Tensor::new(scenes.len(), m, gen.iter().flat_map(|p| p.chi.clone()).collect())?;
        Ok(ExpansionBatch {
            h,
            chi0,
            gt: prednet::future_matrix(scenes, fw.config.data.dims.t_f)?,
            winners: fw.anchors.winners(scenes),
        })
    }

    fn subset(&self, idx: &[usize]) -> Self {
        ExpansionBatch {
            h: prednet::gather(&self.h, idx),
            chi0: prednet::gather(&self.chi0, idx),
            gt: prednet::gather(&self.gt, idx),
            winners: idx.iter().map(|&i| self.winners[i]).collect(),
        }
    }
}

/// Tape handles of one expansion loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub motion: Var,
    pub bayes: Var,
    pub regression: Var,
    pub domain: Var,
    pub reg: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub motion: f64,
    pub bayes: f64,
    pub regression: f64,
    pub domain: f64,
    pub reg: f64,
}

/// `L_motion + beta L_domain + L_reg` for query vector `q` (`1 x d_q`).
pub fn expansion_loss(
    tape: &Tape,
    fw: &Framework,
    vars: &HyperVars,
    q: Var,
    batch: &ExpansionBatch,
) -> Result<LossVars> {
    let cfg = &fw.config;
    let head_spec = HeadSpec::from_config(cfg);
    let flow_spec = FlowSpec::from_config(cfg)?;
    let theta = fw.hyper.decoder.generate_tape(tape, q, vars.decoder_trunk, vars.decoder_bank)?;
    let omega = fw.hyper.flow.generate_tape(tape, q, vars.flow_trunk, vars.flow_bank)?;
    let h = tape.constant(batch.h.clone());
    let out = prednet::head_tape(tape, &head_spec, theta, h, &fw.anchors)?;
    let chi_star = tape.softmax(out.logits);
    let (domain, lp) = flow::domain_loss_tape(tape, &flow_spec, omega, h)?;
    let e_star = fuse::evidence_tape(tape, lp, cfg.model.d_h, &cfg.loss.evidence);
    let chi0 = tape.constant(batch.chi0.clone());
    let alpha = fuse::fused_alpha_tape(tape, chi0, cfg.loss.e0, chi_star, e_star)?;
    let bayes = fuse::bayes_loss_tape(tape, alpha, &batch.winners)?;
    let gt = tape.constant(batch.gt.clone());
    let regression = prednet::regression_tape(tape, out.trajectories, &batch.winners, fw.anchors.len(), gt)?;
    let motion = tape.add(bayes, tape.scale(regression, cfg.loss.regression_weight))?;
    let reg = fw.hyper.reg_loss_tape(tape, vars, cfg.loss.lambda)?;
    let total = tape.add(tape.add(motion, tape.scale(domain, cfg.loss.beta_domain))?, reg)?;
    Ok(LossVars {
        total,
        motion,
        bayes,
        regression,
        domain,
        reg,
    })
}

/// Evaluates the expansion loss of the in-progress query on `scenes`.
pub fn probe_loss(fw: &Framework, scenes: &[Scene]) -> Result<LossBreakdown> {
    let q = fw
        .hyper
        .queries
        .iter()
        .find(|q| !q.finalized)
        .ok_or_else(|| DecodeError::Phase("no phase in progress".into()))?;
    let batch = ExpansionBatch::from_scenes(fw, scenes)?;
    let tape = Tape::new();
    let vars = fw.hyper.vars(&tape);
    let qv = tape.constant(Tensor::row(q.q.clone()));
    let l = expansion_loss(&tape, fw, &vars, qv, &batch)?;
    Ok(LossBreakdown {
        total: tape.item(l.total),
        motion: tape.item(l.motion),
        bayes: tape.item(l.bayes),
        regression: tape.item(l.regression),
        domain: tape.item(l.domain),
        reg: tape.item(l.reg),
    })
}

impl Framework {
    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec::from_config(&self.config)
    }

    pub fn flow_spec(&self) -> Result<FlowSpec> {
        FlowSpec::from_config(&self.config)
    }

    pub fn phases_done(&self) -> usize {
        self.hyper.finalized_count()
    }

    pub fn generalized_predictions(&self, h: &Tensor) -> Result<Vec<MixturePrediction>> {
        prednet::decode_batch(h, &self.generalized, &self.head_spec(), &self.anchors, Source::Generalized)
    }

    /// Starts phase `phase`: appends its query. Phases run in order from 1.
    pub fn begin_phase(&mut self, phase: usize) -> Result<()> {
        let done = self.phases_done();
        if self.hyper.queries.iter().any(|q| !q.finalized) {
            return Err(DecodeError::Phase("a phase is already in progress".into()));
        }
        if phase != done + 1 {
            return Err(DecodeError::Phase(format!(
                "phase {phase} requested but {done} phase(s) are finalized; next is {}",
                done + 1
            )));
        }
        let mut rng = train::rng(self.config.seed.wrapping_add(phase as u64), train::STREAM_QUERY);
        self.hyper.add_query(&mut rng)?;
        Ok(())
    }

    /// Reads the generated heads and flows of all finalized queries.
    pub fn view(&self) -> Result<PhaseView<'_>> {
        let flow_spec = self.flow_spec()?;
        let mut heads = Vec::new();
        let mut flows = Vec::new();
        for q in self.hyper.finalized() {
            heads.push((q.id, self.hyper.decoder.generate(&q.q)?));
            flows.push((q.id, self.hyper.flow.generate(&q.q)?));
        }
        Ok(PhaseView {
            fw: self,
            head_spec: self.head_spec(),
            flow_spec,
            heads,
            flows,
        })
    }
}

/// Trains phase `phase` on `train_scenes` and finalizes it.
///
/// On divergence the framework is left exactly as it was before the call.
pub fn run_expansion(fw: &mut Framework, train_scenes: &[Scene], phase: usize, domain: &str) -> Result<()> {
    if train_scenes.is_empty() {
        return Err(DecodeError::invalid("empty expansion dataset"));
    }
    let mut work = fw.clone();
    work.begin_phase(phase)?;
    let data = ExpansionBatch::from_scenes(&work, train_scenes)?;
    let tc = work.config.expansion.clone();
    let qi = work.hyper.queries.len() - 1;
    let mut q = work.hyper.queries[qi].q.clone();
    let sizes: Vec<usize> = work
        .hyper
        .buffers_mut()
        .iter()
        .map(|b| b.len())
        .chain([q.len()])
        .collect();
    let mut trainer = Trainer::new(&tc, &sizes);
    let mut shuffle = train::rng(work.config.seed, train::STREAM_EXPANSION + phase as u64);
    let started = Instant::now();
    let mut epochs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = trainer.start_epoch(epoch);
        let mut sums = [0.0; 3];
        let mut count = 0usize;
        for idx in shuffled_batches(train_scenes.len(), tc.batch_size, &mut shuffle) {
            let batch = data.subset(&idx);
            let tape = Tape::new();
            let vars = work.hyper.vars(&tape);
            let qv = tape.param(Tensor::row(q.clone()));
            let l = expansion_loss(&tape, &work, &vars, qv, &batch)?;
            let total = tape.item(l.total);
            train::check_finite(epoch, "expansion loss", total)?;
            let mut g = tape.backward(l.total)?;
            let grads = [
                g.take(vars.decoder_trunk),
                g.take(vars.decoder_bank),
                g.take(vars.flow_trunk),
                g.take(vars.flow_bank),
                g.take(qv),
            ];
            let [a, b, c, d] = work.hyper.buffers_mut();
            trainer.step(&mut [a, b, c, d, &mut q], &grads)?;
            let n = idx.len() as f64;
            sums[0] += tape.item(l.motion) * n;
            sums[1] += tape.item(l.domain) * n;
            sums[2] += tape.item(l.reg) * n;
            count += idx.len();
        }
        let c = count as f64;
        log::info!(
            "phase {phase} epoch {epoch}: motion {:.4}, domain {:.3}, reg {:.3e}, lr {lr:.3e}",
            sums[0] / c,
            sums[1] / c,
            sums[2] / c
        );
        epochs.push(EpochLog {
            epoch,
            l_motion: sums[0] / c,
            l_domain: sums[1] / c,
            l_reg: sums[2] / c,
            lr,
            wall_time: started.elapsed().as_secs_f64(),
        });
    }
    work.hyper.queries[qi].q = q;
    work.hyper.finalize_phase()?;
    work.logs.push(PhaseLog {
        phase,
        domain: domain.to_string(),
        epochs,
    });
    *fw = work;
    Ok(())
}

/// Generated specialized models of one framework state.
pub struct PhaseView<'a> {
    fw: &'a Framework,
    pub head_spec: HeadSpec,
    pub flow_spec: FlowSpec,
    pub heads: Vec<(u32, ParamBundle)>,
    pub flows: Vec<(u32, ParamBundle)>,
}

/// Everything fusion needs for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParts {
    pub generalized: MixturePrediction,
    pub specialized: Option<MixturePrediction>,
    pub m_star: Option<u32>,
    pub log_evidence: Vec<(u32, f64)>,
    pub e_star: f64,
}

impl PhaseView<'_> {
    pub fn parts(&self, h: &Tensor) -> Result<Vec<SceneParts>> {
        let gen = self.fw.generalized_predictions(h)?;
        if self.flows.is_empty() {
            return Ok(gen
                .into_iter()
                .map(|g| SceneParts {
                    generalized: g,
                    specialized: None,
                    m_star: None,
                    log_evidence: Vec::new(),
                    e_star: 0.0,
                })
                .collect());
        }
        let sel = flow::select_batch(h, &self.flows, &self.flow_spec)?;
        let mut per_head = Vec::with_capacity(self.heads.len());
        for (id, p) in &self.heads {
            per_head.push(prednet::decode_batch(h, p, &self.head_spec, &self.fw.anchors, Source::Specialized(*id))?);
        }
        let cfg = &self.fw.config;
        gen.into_iter()
            .zip(sel)
            .enumerate()
            .map(|(i, (g, s))| {
                let k = self
                    .heads
                    .iter()
                    .position(|(id, _)| *id == s.query_id)
                    .expect("selected query has a head");
                let lp = s.log_evidence[k].1;
                Ok(SceneParts {
                    generalized: g,
                    specialized: Some(per_head[k][i].clone()),
                    m_star: Some(s.query_id),
                    e_star: fuse::evidence_from_loglik(lp, cfg.model.d_h, &cfg.loss.evidence)?,
                    log_evidence: s.log_evidence,
                })
            })
            .collect()
    }

    pub fn fuse(&self, parts: &SceneParts, e0: f64) -> Result<FusedPrediction> {
        let gen = &parts.generalized;
        let spec_chi = parts.specialized.as_ref().map_or(&gen.chi, |s| &s.chi);
        let mut post: PosteriorState = fuse::posterior_merge(&gen.chi, e0, spec_chi, parts.e_star)?;
        post.m_star = parts.m_star;
        fuse::nms_merge(gen, parts.specialized.as_ref(), &post, self.fw.config.loss.nms_radius)
    }

    /// Fused and generalized-only displacement errors on `scenes`.
    pub fn evaluate(&self, scenes: &[Scene], e0: f64) -> Result<DomainEval> {
        let h = self.fw.encoder.encode_batch(scenes)?;
        let parts = self.parts(&h)?;
        self.evaluate_parts(scenes, &parts, e0)
    }

    pub fn evaluate_parts(&self, scenes: &[Scene], parts: &[SceneParts], e0: f64) -> Result<DomainEval> {
        let mut ev = DomainEval::default();
        for (s, p) in scenes.iter().zip(parts) {
            let fused = self.fuse(p, e0)?;
            let tr = fused.trajectories();
            ev.ade += metrics::min_ade(&tr, &s.future)?;
            ev.fde += metrics::min_fde(&tr, &s.future)?;
            let gt: Vec<&[_]> = p.generalized.trajectories.iter().map(Vec::as_slice).collect();
            ev.generalized_ade += metrics::min_ade(&gt, &s.future)?;
            ev.generalized_fde += metrics::min_fde(&gt, &s.future)?;
            ev.max_e_star = ev.max_e_star.max(p.e_star);
            ev.selected.push(p.m_star.unwrap_or(0));
        }
        let n = scenes.len().max(1) as f64;
        ev.ade /= n;
        ev.fde /= n;
        ev.generalized_ade /= n;
        ev.generalized_fde /= n;
        Ok(ev)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    pub ade: f64,
    pub fde: f64,
    pub generalized_ade: f64,
    pub generalized_fde: f64,
    pub max_e_star: f64,
    /// Selected query per scene, 0 when none is finalized.
    pub selected: Vec<u32>,
}
