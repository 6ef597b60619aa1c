use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use decode_core::contlearn::{self, BaselineKind, Framework, PlanStep};
use decode_core::experiment::{self, Awareness, DomainScore, Staircase};
use decode_core::fuse::{self, Component, PosteriorState};
use decode_core::metrics::{self, ResultMatrix};
use decode_core::scenegen::{write_dataset, Scene};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::workspace::{write, Workspace};
use crate::Common;

pub fn gen_data(common: &Common) -> Result<()> {
    let ws = Workspace::open(common)?;
    let corpus = experiment::generate_corpus(&ws.config)?;
    let dir = ws.dir("data")?;
    write_dataset(&ws.dataset_path("mix"), &corpus.mix)
        .with_context(|| format!("writing into {}", dir.display()))?;
    println!("mix: {} scenes", corpus.mix.scenes.len());
    for (spec, ds) in &corpus.domains {
        write_dataset(&ws.dataset_path(&spec.name), ds)?;
        println!("{}: {} train, {} val", spec.name, ds.train().len(), ds.val().len());
    }
    write(&ws.root.join("config.toml"), ws.config.to_toml())
}

fn save_phase(ws: &Workspace, phase: usize, fw: &Framework) -> Result<()> {
    ws.dir("checkpoints")?;
    let path = ws.checkpoint_path(phase);
    contlearn::write_checkpoint(&path, fw).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    let logs = ws.dir("logs")?;
    let log = fw.logs.last().expect("a trained framework has a log");
    write(&logs.join(format!("phase-{phase}.csv")), log.to_csv())
}

pub fn pretrain(common: &Common) -> Result<()> {
    let ws = Workspace::open(common)?;
    let mix = ws.dataset("mix")?;
    let fw = contlearn::run_pretrain(&ws.config, mix.train())?;
    save_phase(&ws, 0, &fw)?;
    let last = fw.logs[0].epochs.last().map_or(f64::NAN, |e| e.l_motion);
    println!("pretrained on {} scenes, final motion loss {last:.5}", mix.train().len());
    Ok(())
}

#[derive(Serialize)]
struct Advisory {
    phase: usize,
    domain: String,
    finalized_before: usize,
    generalized_min_ade: f64,
    current_min_ade: f64,
    max_e_star: f64,
    e0: f64,
}

pub fn expand(common: &Common, phase: usize, checkpoint: Option<PathBuf>) -> Result<()> {
    let ws = Workspace::open(common)?;
    if phase == 0 {
        bail!("phases start at 1; phase 0 is pretraining");
    }
    let mut fw = ws.framework(phase - 1, checkpoint.as_deref())?;
    let name = fw.config.phase_domain(phase)?.name.clone();
    let ds = ws.dataset(&name)?;

    let ev = fw.view()?.evaluate(ds.val(), fw.config.loss.e0)?;
    let advisory = Advisory {
        phase,
        domain: name.clone(),
        finalized_before: fw.phases_done(),
        generalized_min_ade: ev.generalized_ade,
        current_min_ade: ev.ade,
        max_e_star: ev.max_e_star,
        e0: fw.config.loss.e0,
    };
    println!(
        "incoming `{name}`: current minADE {:.4} (generalized {:.4}), max e* {:.3} vs e0 {}",
        ev.ade, ev.generalized_ade, ev.max_e_star, advisory.e0
    );
    let logs = ws.dir("logs")?;
    write(
        &logs.join(format!("phase-{phase}-advisory.json")),
        serde_json::to_string_pretty(&advisory)?,
    )?;

    contlearn::run_expansion(&mut fw, ds.train(), phase, &name)?;
    save_phase(&ws, phase, &fw)?;
    for s in fw.hyper.stored.iter().filter(|s| s.query_id < phase as u32) {
        println!("query {} drift {:.3e}", s.query_id, fw.hyper.drift(s.query_id)?);
    }
    let after = fw.view()?.evaluate(ds.val(), fw.config.loss.e0)?;
    println!("phase {phase} `{name}`: minADE {:.4}, minFDE {:.4}", after.ade, after.fde);
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    phase: usize,
    config_sha256: String,
    config: &'a decode_core::Config,
    decode: &'a Staircase,
    baselines: &'a [Staircase],
    scores: &'a [DomainScore],
    holdout: &'a [DomainScore],
    drift: Vec<(u32, f64)>,
    awareness: AwarenessSummary<'a>,
}

#[derive(Serialize)]
struct AwarenessSummary<'a> {
    auroc: Vec<(String, f64)>,
    mean_in_domain_log_prob: Vec<(String, f64)>,
    mean_out_of_domain_log_prob: Vec<(String, f64)>,
    confusion: &'a metrics::Confusion,
}

fn restricted_baseline(kind: BaselineKind, base: &Framework, corpus: &experiment::Corpus, plan: &[String]) -> Result<Staircase> {
    let sets = plan.iter().map(|n| corpus.domain(n)).collect::<decode_core::Result<Vec<_>>>()?;
    let steps: Vec<PlanStep<'_>> = plan
        .iter()
        .zip(&sets)
        .map(|(n, d)| (n.as_str(), d.train(), d.val()))
        .collect();
    let r = contlearn::run_baseline(kind, base, &steps)?;
    Ok(Staircase::new(kind.name(), plan.to_vec(), r.ade, r.fde)?)
}

pub fn eval(common: &Common, phase: usize, checkpoint: Option<PathBuf>) -> Result<()> {
    let ws = Workspace::open(common)?;
    if phase == 0 {
        bail!("nothing to evaluate before phase 1; pass --phase 1 or later");
    }
    let corpus = ws.corpus()?;
    let base = ws.framework(0, None)?;
    let cfg = base.config.clone();
    if phase > cfg.data.phases.len() {
        bail!("phase {phase} outside the plan (1..={})", cfg.data.phases.len());
    }
    let plan = cfg.data.phases[..phase].to_vec();
    let mut ade = vec![Vec::new(); phase];
    let mut fde = vec![Vec::new(); phase];
    let mut last = None;
    for j in 1..=phase {
        let path = if j == phase { checkpoint.as_deref() } else { None };
        let fw = ws.framework(j, path)?;
        for (i, s) in experiment::score_domains(&fw, &corpus, &plan[..j])?.iter().enumerate() {
            ade[i].push(s.ade);
            fde[i].push(s.fde);
        }
        last = Some(fw);
    }
    let fw = last.expect("phase >= 1");
    let decode = Staircase::new("decode", plan.clone(), ResultMatrix::new(ade)?, ResultMatrix::new(fde)?)?;
    let baselines = [
        BaselineKind::FrozenGeneralized,
        BaselineKind::NaiveFinetune,
        BaselineKind::ExperienceReplay {
            buffer: cfg.baseline.replay_buffer,
        },
    ]
    .into_iter()
    .map(|k| restricted_baseline(k, &base, &corpus, &plan))
    .collect::<Result<Vec<_>>>()?;
    let scores = experiment::score_domains(&fw, &corpus, &plan)?;
    let holdout_names: Vec<String> = cfg.holdout_domains().iter().map(|d| d.name.clone()).collect();
    let holdout = experiment::score_domains(&fw, &corpus, &holdout_names)?;
    let aw: Awareness = experiment::awareness(&fw, &corpus)?;
    let drift = fw
        .hyper
        .stored
        .iter()
        .filter(|s| s.query_id < phase as u32)
        .map(|s| Ok((s.query_id, fw.hyper.drift(s.query_id)?)))
        .collect::<decode_core::Result<_>>()?;

    let dir = ws.dir(&format!("eval/phase-{phase}"))?;
    let mut csv = decode.to_csv();
    for b in &baselines {
        csv.extend(b.to_csv().lines().skip(1).map(|l| format!("{l}\n")));
    }
    write(&dir.join("staircase.csv"), csv)?;
    for f in &aw.flows {
        let mut roc = String::from("fpr,tpr\n");
        for (x, y) in &f.roc {
            writeln!(roc, "{x},{y}")?;
        }
        write(&dir.join(format!("roc-{}.csv", f.domain)), roc)?;
    }
    let mut conf = String::from("true_query,selected_query,count\n");
    for (t, row) in aw.confusion.classes.iter().zip(&aw.confusion.matrix) {
        for (p, n) in aw.confusion.classes.iter().zip(row) {
            writeln!(conf, "{t},{p},{n}")?;
        }
    }
    write(&dir.join("confusion.csv"), conf)?;
    let named = |g: fn(&experiment::FlowAuroc) -> f64| aw.flows.iter().map(|f| (f.domain.clone(), g(f))).collect();
    let summary = EvalSummary {
        phase,
        config_sha256: experiment::config_digest(&cfg),
        config: &cfg,
        decode: &decode,
        baselines: &baselines,
        scores: &scores,
        holdout: &holdout,
        drift,
        awareness: AwarenessSummary {
            auroc: named(|f| f.auroc),
            mean_in_domain_log_prob: named(|f| f.mean_in_domain_log_prob),
            mean_out_of_domain_log_prob: named(|f| f.mean_out_of_domain_log_prob),
            confusion: &aw.confusion,
        },
    };
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    println!("{:<20} {:>8} {:>8} {:>8} {:>8}", "method", "AER", "FGT", "AER-FDE", "FGT-FDE");
    for s in std::iter::once(&decode).chain(&baselines) {
        println!(
            "{:<20} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            s.method, s.aer_ade, s.fgt_ade, s.aer_fde, s.fgt_fde
        );
    }
    for f in &aw.flows {
        println!("flow `{}` AUROC {:.4}", f.domain, f.auroc);
    }
    println!("selection accuracy {:.4}", aw.confusion.accuracy);
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    scene_id: u64,
    phase: usize,
    selected_query: Option<u32>,
    log_evidence: &'a [(u32, f64)],
    e0: f64,
    e_star: f64,
    /// Share of the posterior evidence held by the generalized model.
    generalized_weight: f64,
    specialized_weight: f64,
    posterior: &'a PosteriorState,
    fused: &'a [Component],
    generalized_chi: &'a [f64],
    fused_min_ade: f64,
    fused_min_fde: f64,
    generalized_min_ade: f64,
    generalized_min_fde: f64,
    /// Component indices drawn by the stochastic sampler.
    samples: Vec<usize>,
}

fn find_scene(ws: &Workspace, id: u64) -> Result<Scene> {
    let names = std::iter::once("mix".to_string()).chain(ws.config.data.domains.iter().map(|d| d.name.clone()));
    for name in names {
        if let Some(s) = ws.dataset(&name)?.scenes.into_iter().find(|s| s.scene_id == id) {
            return Ok(s);
        }
    }
    bail!("no scene with id {id} in {}", ws.root.join("data").display())
}

pub fn predict(
    common: &Common,
    scene: u64,
    phase: Option<usize>,
    checkpoint: Option<PathBuf>,
    samples: usize,
) -> Result<()> {
    let ws = Workspace::open(common)?;
    let phase = match (phase, &checkpoint) {
        (Some(p), _) => p,
        (None, Some(_)) => usize::MAX,
        (None, None) => ws
            .latest_phase()
            .context("no checkpoints found; run `decode pretrain` first")?,
    };
    let fw = ws.framework(phase, checkpoint.as_deref())?;
    let phase = fw.phases_done();
    let s = find_scene(&ws, scene)?;
    let view = fw.view()?;
    let h = fw.encoder.encode_batch(std::slice::from_ref(&s))?;
    let parts = view.parts(&h)?.remove(0);
    let e0 = fw.config.loss.e0;
    let fused = view.fuse(&parts, e0)?;
    let gen_tr: Vec<&[_]> = parts.generalized.trajectories.iter().map(Vec::as_slice).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(fw.config.seed ^ scene);
    let drawn = if samples > 0 {
        fuse::sample_components(&fused, samples, &mut rng)?
    } else {
        Vec::new()
    };
    let share = fused.posterior.specialized_share();
    let out = Prediction {
        scene_id: scene,
        phase,
        selected_query: parts.m_star,
        log_evidence: &parts.log_evidence,
        e0,
        e_star: parts.e_star,
        generalized_weight: 1.0 - share,
        specialized_weight: share,
        posterior: &fused.posterior,
        fused: &fused.components,
        generalized_chi: &parts.generalized.chi,
        fused_min_ade: metrics::min_ade(&fused.trajectories(), &s.future)?,
        fused_min_fde: metrics::min_fde(&fused.trajectories(), &s.future)?,
        generalized_min_ade: metrics::min_ade(&gen_tr, &s.future)?,
        generalized_min_fde: metrics::min_fde(&gen_tr, &s.future)?,
        samples: drawn,
    };
    let dir = ws.dir("predict")?;
    write(
        &dir.join(format!("scene-{scene}-phase-{phase}.json")),
        serde_json::to_string_pretty(&out)?,
    )?;
    println!(
        "scene {scene}: query {:?}, e* {:.4}, weights generalized {:.3} / specialized {:.3}, minADE {:.4} (generalized {:.4})",
        out.selected_query,
        out.e_star,
        out.generalized_weight,
        out.specialized_weight,
        out.fused_min_ade,
        out.generalized_min_ade
    );
    Ok(())
}

pub fn ablate(common: &Common, phase: Option<usize>, checkpoint: Option<PathBuf>) -> Result<()> {
    let ws = Workspace::open(common)?;
    let phase = phase.unwrap_or(ws.config.ablation.phase);
    let fw = ws.framework(phase, checkpoint.as_deref())?;
    let corpus = ws.corpus()?;
    let rows = experiment::ablate_e0(&fw, &corpus, &fw.config.ablation.e0_grid)?;
    let mut csv = String::from("e0,domain,role,min_ade,min_fde\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.e0, r.domain, r.role, r.ade, r.fde)?;
        println!("e0 {:>7} {:<16} {:<12} minADE {:.4} minFDE {:.4}", r.e0, r.domain, r.role, r.ade, r.fde);
    }
    let dir = ws.dir("ablation")?;
    write(&dir.join(format!("e0-phase-{}.csv", fw.phases_done())), csv)
}

pub fn report(common: &Common) -> Result<()> {
    let ws = Workspace::open(common)?;
    let corpus = experiment::generate_corpus(&ws.config)?;
    let run = experiment::run_pipeline(&ws.config, &corpus)?;
    let dir = ws.dir("report")?;
    let r = &run.report;
    write(&dir.join("report.json"), r.to_json()?)?;
    let mut csv = r.decode.to_csv();
    for b in &r.baselines {
        csv.extend(b.to_csv().lines().skip(1).map(|l| format!("{l}\n")));
    }
    write(&dir.join("staircase.csv"), csv)?;
    let mut ab = String::from("e0,domain,role,min_ade,min_fde\n");
    for a in &r.ablation {
        writeln!(ab, "{},{},{},{},{}", a.e0, a.domain, a.role, a.ade, a.fde)?;
    }
    write(&dir.join("ablation.csv"), ab)?;
    let ck = ws.dir("report/checkpoints")?;
    for (m, bytes) in run.checkpoints.iter().enumerate() {
        write(&ck.join(format!("phase-{m}.ck")), bytes)?;
    }
    for s in std::iter::once(&r.decode).chain(&r.baselines) {
        println!("{:<20} AER {:.4} FGT {:.4}", s.method, s.aer_ade, s.fgt_ade);
    }
    println!("report digest {}", contlearn::checkpoint_digest(r.to_json()?.as_bytes()));
    Ok(())
}
