//! End-to-end experiment: data generation, pretraining, the expansion plan,
//! evaluation, baselines, the holdout floor check and the e0 sweep.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::contlearn::{
    self, checkpoint_digest, run_baseline, save_checkpoint, BaselineKind, BaselineReport, Framework,
};
use crate::error::{DecodeError, Result};
use crate::flow;
use crate::metrics::{self, Confusion, ResultMatrix};
use crate::scenegen::{generate_domain, generate_pretrain_mix, Dataset, DomainSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub mix: Dataset,
    pub domains: Vec<(DomainSpec, Dataset)>,
}

impl Corpus {
    pub fn domain(&self, name: &str) -> Result<&Dataset> {
        self.domains
            .iter()
            .find(|(s, _)| s.name == name)
            .map(|(_, d)| d)
            .ok_or_else(|| DecodeError::Config(format!("no dataset for domain `{name}`")))
    }
}

/// Seed of domain `tag`'s scene stream.
pub fn domain_seed(seed: u64, tag: u8) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(tag as u64)
}

pub fn generate_corpus(cfg: &Config) -> Result<Corpus> {
    cfg.validate()?;
    let dims = cfg.data.dims;
    let specs: Vec<DomainSpec> = cfg
        .data
        .pretrain_domains
        .iter()
        .map(|n| cfg.domain(n).cloned())
        .collect::<Result<_>>()?;
    let mix = generate_pretrain_mix(&specs, &cfg.data.mix_weights, &dims, cfg.data.mix_count, cfg.seed)?;
    let mix = Dataset {
        dims,
        train_count: mix.len(),
        scenes: mix,
    };
    let n = cfg.data.train_count + cfg.data.val_count;
    let domains = cfg
        .data
        .domains
        .iter()
        .map(|spec| {
            let scenes = generate_domain(spec, &dims, n, domain_seed(cfg.seed, spec.tag))?;
            Ok((
                spec.clone(),
                Dataset {
                    dims,
                    train_count: cfg.data.train_count,
                    scenes,
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(Corpus { mix, domains })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: String,
    pub ade: f64,
    pub fde: f64,
    pub generalized_ade: f64,
    pub generalized_fde: f64,
    pub max_e_star: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowAuroc {
    pub query_id: u32,
    pub domain: String,
    pub auroc: f64,
    pub mean_in_domain_log_prob: f64,
    pub mean_out_of_domain_log_prob: f64,
    /// ROC points for the out-of-domain score `-log_prob`.
    pub roc: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Awareness {
    pub flows: Vec<FlowAuroc>,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: usize,
    pub domain: String,
    pub checkpoint_sha256: String,
    pub training_log_sha256: String,
    /// Sup-norm drift of each earlier query from its stored target.
    pub drift: Vec<(u32, f64)>,
    pub scores: Vec<DomainScore>,
    pub awareness: Awareness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Staircase {
    pub method: String,
    pub domains: Vec<String>,
    pub ade: ResultMatrix,
    pub fde: ResultMatrix,
    pub aer_ade: f64,
    pub fgt_ade: f64,
    pub aer_fde: f64,
    pub fgt_fde: f64,
}

impl Staircase {
    pub fn new(method: &str, domains: Vec<String>, ade: ResultMatrix, fde: ResultMatrix) -> Result<Self> {
        Ok(Staircase {
            method: method.to_string(),
            domains,
            aer_ade: metrics::aer(&ade)?,
            fgt_ade: metrics::fgt(&ade)?,
            aer_fde: metrics::aer(&fde)?,
            fgt_fde: metrics::fgt(&fde)?,
            ade,
            fde,
        })
    }

    /// `method,domain,phase,min_ade,min_fde`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,domain,phase,min_ade,min_fde\n");
        for (i, (ra, rf)) in self.ade.rows.iter().zip(&self.fde.rows).enumerate() {
            for (k, (a, f)) in ra.iter().zip(rf).enumerate() {
                out.push_str(&format!("{},{},{},{a},{f}\n", self.method, self.domains[i], i + k + 1));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub e0: f64,
    pub domain: String,
    /// `specialized` or `unfamiliar`.
    pub role: String,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub config_sha256: String,
    pub pretrain_checkpoint_sha256: String,
    pub phases: Vec<PhaseRecord>,
    pub decode: Staircase,
    pub baselines: Vec<Staircase>,
    /// Domains outside the plan, evaluated after the last phase.
    pub holdout: Vec<DomainScore>,
    pub ablation: Vec<AblationRow>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn baseline(&self, method: &str) -> Option<&Staircase> {
        self.baselines.iter().find(|b| b.method == method)
    }
}

pub fn config_digest(cfg: &Config) -> String {
    hex::encode(Sha256::digest(cfg.to_toml().as_bytes()))
}

/// Scores every configured domain's held-out split.
pub fn score_domains(fw: &Framework, corpus: &Corpus, names: &[String]) -> Result<Vec<DomainScore>> {
    let view = fw.view()?;
    names
        .iter()
        .map(|n| {
            let ev = view.evaluate(corpus.domain(n)?.val(), fw.config.loss.e0)?;
            Ok(DomainScore {
                domain: n.clone(),
                ade: ev.ade,
                fde: ev.fde,
                generalized_ade: ev.generalized_ade,
                generalized_fde: ev.generalized_fde,
                max_e_star: ev.max_e_star,
            })
        })
        .collect()
}

/// Flow AUROC against the other plan domains and argmax selection over the
/// learned domains.
pub fn awareness(fw: &Framework, corpus: &Corpus) -> Result<Awareness> {
    let view = fw.view()?;
    let plan = &fw.config.data.phases;
    let hs: Vec<_> = plan
        .iter()
        .map(|n| fw.encoder.encode_batch(corpus.domain(n)?.val()))
        .collect::<Result<_>>()?;
    let mut flows = Vec::new();
    for (k, (id, params)) in view.flows.iter().enumerate() {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0.0, 0.0, 0.0);
        for (d, h) in hs.iter().enumerate() {
            let lp = flow::log_prob_batch(h, params, &view.flow_spec)?;
            let outside = d != k;
            for v in lp {
                scores.push(-v);
                labels.push(outside);
                if outside {
                    sout += v;
                    nout += 1.0;
                } else {
                    sin += v;
                    nin += 1.0;
                }
            }
        }
        flows.push(FlowAuroc {
            query_id: *id,
            domain: plan[k].clone(),
            auroc: metrics::auroc(&scores, &labels)?,
            mean_in_domain_log_prob: sin / nin,
            mean_out_of_domain_log_prob: sout / nout,
            roc: metrics::roc_curve(&scores, &labels),
        });
    }
    let mut selected = Vec::new();
    let mut truth = Vec::new();
    for (d, h) in hs.iter().enumerate().take(view.flows.len()) {
        for s in flow::select_batch(h, &view.flows, &view.flow_spec)? {
            selected.push(s.query_id);
            truth.push(d as u32 + 1);
        }
    }
    let confusion = if truth.is_empty() {
        metrics::from_matrix(Vec::new(), Vec::new())
    } else {
        metrics::confusion(&selected, &truth)?
    };
    Ok(Awareness { flows, confusion })
}

/// Fused error on the most recently learned domain and on the plan domains
/// not learned yet, for each prior evidence in `grid`.
pub fn ablate_e0(fw: &Framework, corpus: &Corpus, grid: &[f64]) -> Result<Vec<AblationRow>> {
    let phase = fw.phases_done();
    if phase == 0 {
        return Err(DecodeError::Phase("the e0 sweep needs at least one finalized phase".into()));
    }
    let learned = &fw.config.data.phases[..phase];
    let view = fw.view()?;
    let mut rows = Vec::new();
    let mut targets: Vec<(String, &'static str)> = vec![(learned[phase - 1].clone(), "specialized")];
    for name in &fw.config.data.phases[phase..] {
        targets.push((name.clone(), "unfamiliar"));
    }
    for (name, role) in targets {
        let val = corpus.domain(&name)?.val();
        let h = fw.encoder.encode_batch(val)?;
        let parts = view.parts(&h)?;
        for &e0 in grid {
            let ev = view.evaluate_parts(val, &parts, e0)?;
            rows.push(AblationRow {
                e0,
                domain: name.clone(),
                role: role.to_string(),
                ade: ev.ade,
                fde: ev.fde,
            });
        }
    }
    Ok(rows)
}

pub fn baseline_staircase(kind: BaselineKind, fw: &Framework, corpus: &Corpus) -> Result<Staircase> {
    let plan = &fw.config.data.phases;
    let sets: Vec<&Dataset> = plan.iter().map(|n| corpus.domain(n)).collect::<Result<_>>()?;
    let steps: Vec<contlearn::PlanStep<'_>> = plan
        .iter()
        .zip(&sets)
        .map(|(n, d)| (n.as_str(), d.train(), d.val()))
        .collect();
    let BaselineReport { ade, fde, .. } = run_baseline(kind, fw, &steps)?;
    Staircase::new(kind.name(), plan.clone(), ade, fde)
}

pub struct PipelineRun {
    pub report: Report,
    /// Pretraining checkpoint first, then one per phase.
    pub checkpoints: Vec<Vec<u8>>,
    pub frameworks: Vec<Framework>,
}

pub fn run_pipeline(cfg: &Config, corpus: &Corpus) -> Result<PipelineRun> {
    let plan = cfg.data.phases.clone();
    let mut fw = contlearn::run_pretrain(cfg, corpus.mix.train())?;
    let mut checkpoints = vec![save_checkpoint(&fw)?];
    let mut frameworks = vec![fw.clone()];
    let mut phases = Vec::new();
    let mut ade_rows = vec![Vec::new(); plan.len()];
    let mut fde_rows = vec![Vec::new(); plan.len()];
    for (j, name) in plan.iter().enumerate() {
        let phase = j + 1;
        contlearn::run_expansion(&mut fw, corpus.domain(name)?.train(), phase, name)?;
        let bytes = save_checkpoint(&fw)?;
        let scores = score_domains(&fw, corpus, &plan[..phase])?;
        for (i, s) in scores.iter().enumerate() {
            ade_rows[i].push(s.ade);
            fde_rows[i].push(s.fde);
        }
        let drift = fw
            .hyper
            .stored
            .iter()
            .filter(|s| s.query_id < phase as u32)
            .map(|s| Ok((s.query_id, fw.hyper.drift(s.query_id)?)))
            .collect::<Result<_>>()?;
        phases.push(PhaseRecord {
            phase,
            domain: name.clone(),
            checkpoint_sha256: checkpoint_digest(&bytes),
            training_log_sha256: fw.logs.last().map(|l| l.digest()).unwrap_or_default(),
            drift,
            scores,
            awareness: awareness(&fw, corpus)?,
        });
        checkpoints.push(bytes);
        frameworks.push(fw.clone());
    }
    let decode = Staircase::new(
        "decode",
        plan.clone(),
        ResultMatrix::new(ade_rows)?,
        ResultMatrix::new(fde_rows)?,
    )?;
    let base = &frameworks[0];
    let baselines = [
        BaselineKind::FrozenGeneralized,
        BaselineKind::NaiveFinetune,
        BaselineKind::ExperienceReplay {
            buffer: cfg.baseline.replay_buffer,
        },
    ]
    .into_iter()
    .map(|k| baseline_staircase(k, base, corpus))
    .collect::<Result<Vec<_>>>()?;
    let holdout_names: Vec<String> = cfg.holdout_domains().iter().map(|d| d.name.clone()).collect();
    let holdout = score_domains(&fw, corpus, &holdout_names)?;
    let ab_phase = cfg.ablation.phase.clamp(1, plan.len());
    let ablation = ablate_e0(&frameworks[ab_phase], corpus, &cfg.ablation.e0_grid)?;
    Ok(PipelineRun {
        report: Report {
            seed: cfg.seed,
            config_sha256: config_digest(cfg),
            pretrain_checkpoint_sha256: checkpoint_digest(&checkpoints[0]),
            phases,
            decode,
            baselines,
            holdout,
            ablation,
        },
        checkpoints,
        frameworks,
    })
}
