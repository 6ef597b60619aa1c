use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Framework;
use crate::adcore::{Tape, Tensor};
use crate::error::{DecodeError, Result};
use crate::metrics::{self, ResultMatrix};
use crate::prednet::{self, Source};
use crate::scenegen::Scene;
use crate::train::{self, shuffled_batches, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// One head, initialized from the generalized head, trained on each
    /// domain in turn.
    NaiveFinetune,
    /// The generalized model, untouched.
    FrozenGeneralized,
    /// Like naive fine-tuning, with a reservoir of past scenes filling
    /// `replay_ratio` of every batch.
    ExperienceReplay { buffer: usize },
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::NaiveFinetune => "naive-finetune",
            BaselineKind::FrozenGeneralized => "frozen-generalized",
            BaselineKind::ExperienceReplay { .. } => "experience-replay",
        }
    }

    fn stream(&self) -> u64 {
        match self {
            BaselineKind::NaiveFinetune => 0,
            BaselineKind::FrozenGeneralized => 10,
            BaselineKind::ExperienceReplay { .. } => 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub kind: BaselineKind,
    pub ade: ResultMatrix,
    pub fde: ResultMatrix,
}

/// One phase of a plan: domain name, training scenes, held-out scenes.
pub type PlanStep<'a> = (&'a str, &'a [Scene], &'a [Scene]);

struct Stream {
    h: Tensor,
    gt: Tensor,
    winners: Vec<usize>,
}

/// Runs a baseline over the plan, starting from the pretrained model in
/// `fw`, and returns its staircase.
pub fn run_baseline(kind: BaselineKind, fw: &Framework, plan: &[PlanStep<'_>]) -> Result<BaselineReport> {
    if let BaselineKind::ExperienceReplay { buffer: 0 } = kind {
        return Err(DecodeError::invalid("replay buffer size must be positive"));
    }
    let cfg = &fw.config;
    let spec = fw.head_spec();
    let m = fw.anchors.len();
    let streams: Vec<Stream> = plan
        .iter()
        .map(|(_, tr, _)| {
            Ok(Stream {
                h: fw.encoder.encode_batch(tr)?,
                gt: prednet::future_matrix(tr, cfg.data.dims.t_f)?,
                winners: fw.anchors.winners(tr),
            })
        })
        .collect::<Result<_>>()?;
    let val_h: Vec<Tensor> = plan
        .iter()
        .map(|(_, _, va)| fw.encoder.encode_batch(va))
        .collect::<Result<_>>()?;

    let mut head = fw.generalized.clone();
    let mut reservoir: Vec<(usize, usize)> = Vec::new();
    let mut seen = 0usize;
    let mut ade_rows = vec![Vec::new(); plan.len()];
    let mut fde_rows = vec![Vec::new(); plan.len()];
    for (j, stream) in streams.iter().enumerate() {
        let mut rng = train::rng(cfg.seed, train::STREAM_BASELINE + kind.stream() + j as u64);
        if kind != BaselineKind::FrozenGeneralized {
            let tc = &cfg.expansion;
            let (cur, rep) = match kind {
                BaselineKind::ExperienceReplay { .. } if !reservoir.is_empty() => {
                    let rep = ((tc.batch_size as f64) * cfg.baseline.replay_ratio).round() as usize;
                    let rep = rep.min(tc.batch_size - 1);
                    (tc.batch_size - rep, rep)
                }
                _ => (tc.batch_size, 0),
            };
            let mut trainer = Trainer::new(tc, &[head.flat.len()]);
            for epoch in 0..tc.epochs {
                trainer.start_epoch(epoch);
                for idx in shuffled_batches(stream.winners.len(), cur, &mut rng) {
                    let mut rows_h = prednet::gather(&stream.h, &idx).into_data();
                    let mut rows_gt = prednet::gather(&stream.gt, &idx).into_data();
                    let mut w: Vec<usize> = idx.iter().map(|&i| stream.winners[i]).collect();
                    for _ in 0..rep {
                        let (p, i) = reservoir[rng.random_range(0..reservoir.len())];
                        rows_h.extend_from_slice(streams[p].h.row_slice(i));
                        rows_gt.extend_from_slice(streams[p].gt.row_slice(i));
                        w.push(streams[p].winners[i]);
                    }
                    let n = w.len();
                    let tape = Tape::new();
                    let p = tape.param(head.as_tensor());
                    let h = tape.constant(Tensor::new(n, spec.d_h, rows_h)?);
                    let gt = tape.constant(Tensor::new(n, 2 * spec.t_f, rows_gt)?);
                    let out = prednet::head_tape(&tape, &spec, p, h, &fw.anchors)?;
                    let ce = prednet::cross_entropy_tape(&tape, out.logits, &w)?;
                    let reg = prednet::regression_tape(&tape, out.trajectories, &w, m, gt)?;
                    let loss = tape.add(ce, tape.scale(reg, cfg.loss.regression_weight))?;
                    train::check_finite(epoch, "baseline loss", tape.item(loss))?;
                    let mut g = tape.backward(loss)?;
                    trainer.step(&mut [&mut head.flat], &[g.take(p)])?;
                }
            }
            if let BaselineKind::ExperienceReplay { buffer } = kind {
                for i in 0..stream.winners.len() {
                    if reservoir.len() < buffer {
                        reservoir.push((j, i));
                    } else {
                        let r = rng.random_range(0..=seen);
                        if r < buffer {
                            reservoir[r] = (j, i);
                        }
                    }
                    seen += 1;
                }
            }
        }
        for i in 0..=j {
            let preds = prednet::decode_batch(&val_h[i], &head, &spec, &fw.anchors, Source::Generalized)?;
            let (mut ade, mut fde) = (0.0, 0.0);
            for (p, s) in preds.iter().zip(plan[i].2) {
                let tr: Vec<&[_]> = p.trajectories.iter().map(Vec::as_slice).collect();
                ade += metrics::min_ade(&tr, &s.future)?;
                fde += metrics::min_fde(&tr, &s.future)?;
            }
            let n = plan[i].2.len().max(1) as f64;
            ade_rows[i].push(ade / n);
            fde_rows[i].push(fde / n);
        }
    }
    Ok(BaselineReport {
        kind,
        ade: ResultMatrix::new(ade_rows)?,
        fde: ResultMatrix::new(fde_rows)?,
    })
}
