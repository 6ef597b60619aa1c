//! Acceptance suite. Runs every criterion, prints one `PASS`/`FAIL` line per
//! criterion and exits non-zero if any failed.
//!
//! Criteria 6 through 11 share one stock pipeline run; criterion 11 runs it a
//! second time and compares bytes.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use decode_core::adcore::{AdamW, AdamWConfig, Tape, Tensor, Var};
use decode_core::bundle::ParamBundle;
use decode_core::config::Config;
use decode_core::experiment::{self, PipelineRun, Report};
use decode_core::flow::{self, FlowSpec};
use decode_core::fuse;
use decode_core::metrics::{self, ResultMatrix};
use decode_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

// ---------------------------------------------------------------- 1

/// A random chain of differentiable ops over `x` (3x4) and `w` (4x4),
/// reduced against a fixed random weighting.
fn composite(seed: u64) -> (impl Fn(&Tape, &[Var]) -> Result<Var>, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(3..7);
    let ops: Vec<u8> = (0..depth).map(|_| rng.random_range(0..15)).collect();
    let tensor = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let x = tensor(3, 4, &mut rng);
    let w = tensor(4, 4, &mut rng);
    let c = tensor(3, 4, &mut rng);
    let f = move |t: &Tape, v: &[Var]| -> Result<Var> {
        let (x, w) = (v[0], v[1]);
        let mut y = x;
        for &op in &ops {
            let pos = t.add_scalar(t.square(y), 1.0);
            y = match op {
                0 => t.tanh(y),
                1 => t.sin(y),
                2 => t.cos(y),
                3 => t.exp(t.scale(y, 0.5)),
                4 => t.log(pos),
                5 => t.sqrt(pos),
                6 => t.digamma(t.add_scalar(pos, 0.5))?,
                7 => t.lgamma(t.add_scalar(pos, 0.5))?,
                8 => t.softmax(y),
                9 => t.scale(t.matmul(y, w)?, 0.5),
                10 => t.mul(y, x)?,
                11 => t.div(y, pos)?,
                12 => t.sub(y, t.log_sum_exp(y))?,
                13 => t.sub(y, t.scale(t.repeat_rows(t.sum_cols(y), 3), 0.1))?,
                _ => t.sub(y, t.scale(x, 0.3))?,
            };
        }
        Ok(t.sum(t.mul(y, t.constant(c.clone()))?))
    };
    (f, vec![x, w])
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for seed in 0..100 {
        let (f, inputs) = composite(1000 + seed);
        let err = common::grad_check(&f, &inputs);
        worst = worst.max(err);
        if !(err < 1e-4) {
            failures += 1;
        }
    }
    let el = start.elapsed();
    Outcome::new(
        failures == 0 && within(el, 30),
        format!("100 composites, worst rel err {worst:.2e}, {failures} over 1e-4, {:.1}s", el.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 2

fn random_flow(spec: &FlowSpec, scale: f64, rng: &mut ChaCha8Rng) -> ParamBundle {
    let m = spec.manifest();
    let n = Normal::new(0.0, scale).unwrap();
    let flat = (0..m.total()).map(|_| n.sample(rng)).collect();
    ParamBundle::new(m, flat).unwrap()
}

fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let piv = a[c][c];
        acc += piv.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / piv;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let spec = FlowSpec::new(8, 4, 16, 5.0).unwrap();
    let mut inv: f64 = 0.0;
    for _ in 0..1000 {
        let p = random_flow(&spec, 0.4, &mut rng);
        let h: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z = flow::flow_log_prob(&h, &p, &spec).unwrap().z;
        let back = flow::flow_inverse(&z, &p, &spec).unwrap();
        for (a, b) in h.iter().zip(&back) {
            inv = inv.max((a - b).abs());
        }
    }

    let spec = FlowSpec::new(4, 4, 8, 5.0).unwrap();
    let mut det: f64 = 0.0;
    for _ in 0..50 {
        let p = random_flow(&spec, 0.3, &mut rng);
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ev = flow::flow_log_prob(&h, &p, &spec).unwrap();
        let step = 1e-6;
        let mut jac = vec![vec![0.0; 4]; 4];
        for j in 0..4 {
            let mut up = h.clone();
            up[j] += step;
            let mut dn = h.clone();
            dn[j] -= step;
            let zu = flow::flow_log_prob(&up, &p, &spec).unwrap().z;
            let zd = flow::flow_log_prob(&dn, &p, &spec).unwrap().z;
            for i in 0..4 {
                jac[i][j] = (zu[i] - zd[i]) / (2.0 * step);
            }
        }
        det = det.max((ev.log_det - log_abs_det(jac)).abs());
    }

    let spec = FlowSpec::new(2, 4, 16, 5.0).unwrap();
    let mut p = random_flow(&spec, 0.1, &mut rng);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let data: Vec<f64> = (0..512)
        .flat_map(|i| {
            let c = if i % 2 == 0 { [-1.0, 0.5] } else { [1.0, -0.5] };
            [c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]
        })
        .collect();
    let h = Tensor::new(512, 2, data).unwrap();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &[p.flat.len()],
    );
    for _ in 0..150 {
        let tape = Tape::new();
        let pv = tape.param(p.as_tensor());
        let (loss, _) = flow::domain_loss_tape(&tape, &spec, pv, tape.constant(h.clone())).unwrap();
        let mut g = tape.backward(loss).unwrap();
        opt.step(&mut [&mut p.flat], &[g.take(pv)]).unwrap();
    }
    let (lo, hi, n) = (-7.0, 7.0, 420);
    let dx = (hi - lo) / n as f64;
    let pts: Vec<f64> = (0..n * n)
        .flat_map(|k| [lo + (k / n) as f64 * dx + dx / 2.0, lo + (k % n) as f64 * dx + dx / 2.0])
        .collect();
    let lp = flow::log_prob_batch(&Tensor::new(n * n, 2, pts).unwrap(), &p, &spec).unwrap();
    let mass: f64 = lp.iter().map(|v| v.exp()).sum::<f64>() * dx * dx;

    let el = start.elapsed();
    Outcome::new(
        inv < 1e-9 && det < 1e-5 && (mass - 1.0).abs() <= 0.02 && within(el, 120),
        format!(
            "inverse {inv:.1e}, log-det {det:.1e}, density mass {mass:.4}, {:.1}s",
            el.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.random_range(2..6);
        let alpha: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..10.0)).collect();
        let w = rng.random_range(0..m);
        let closed = fuse::expected_nll(&alpha, w).unwrap();
        let gammas: Vec<Gamma<f64>> = alpha.iter().map(|&a| Gamma::new(a, 1.0).unwrap()).collect();
        let mut acc = 0.0;
        let n = 1_000_000;
        for _ in 0..n {
            let g: Vec<f64> = gammas.iter().map(|d| d.sample(&mut rng)).collect();
            acc -= (g[w] / g.iter().sum::<f64>()).ln();
        }
        worst = worst.max((closed - acc / n as f64).abs());
    }
    let unit = fuse::bayes_loss(&[1.0, 1.0], 0).unwrap();
    let el = start.elapsed();
    Outcome::new(
        worst < 1e-2 && (unit - 1.0).abs() < 1e-12 && within(el, 60),
        format!("worst |closed - MC| {worst:.2e}, Dir(1,1) loss {unit}, {:.1}s", el.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 4

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_4() -> Outcome {
    let e0 = Config::default().loss.e0;
    let (chi0, chi_s) = ([0.5, 0.5], [0.9, 0.1]);
    let low = fuse::posterior_merge(&chi0, e0, &chi_s, 0.0).unwrap();
    let high = fuse::posterior_merge(&chi0, e0, &chi_s, 1e6).unwrap();
    let worked = fuse::posterior_merge(&chi0, 10.0, &chi_s, 30.0).unwrap();
    let (d0, d1) = (sup(&low.chi_post, &chi0), sup(&high.chi_post, &chi_s));
    let exact = worked.chi_post == vec![0.8, 0.2] && worked.e_post == 40.0;
    Outcome::new(
        d0 <= 1e-6 && d1 <= 1e-6 && exact,
        format!(
            "e0 {e0}: |chi_post - chi0| at e*=0 {d0:.1e}, |chi_post - chi*| at e*=1e6 {d1:.3e}, worked example {:?}/{}",
            worked.chi_post, worked.e_post
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..8);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (i..n).map(|_| f64::from(rng.random_range(0u32..100_000)) / 1024.0).collect())
            .collect();
        let r = ResultMatrix::new(rows.clone()).unwrap();
        let mut s = 0.0;
        let mut c = 0.0;
        let mut f = 0.0;
        for (i, row) in rows.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                s += v;
                c += 1.0;
                if k > 0 {
                    f += v - rows[i][0];
                }
            }
        }
        let fgt = if n == 1 { 0.0 } else { f / (n * (n - 1) / 2) as f64 };
        if metrics::aer(&r).unwrap() != s / c || metrics::fgt(&r).unwrap() != fgt {
            mismatches += 1;
        }
    }
    let hand = ResultMatrix::new(vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0], vec![1.0]]).unwrap();
    let hand_ok = (metrics::aer(&hand).unwrap() - 10.0 / 6.0).abs() < 1e-15
        && (metrics::fgt(&hand).unwrap() - 4.0 / 3.0).abs() < 1e-15;

    let mut auroc_err: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..400);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0u8..30))).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        auroc_err = auroc_err.max((metrics::auroc(&scores, &labels).unwrap() - num / den).abs());
    }
    let table = metrics::from_matrix(vec![0, 1], vec![vec![1951, 25], vec![9, 504]]);
    Outcome::new(
        mismatches == 0 && hand_ok && auroc_err < 1e-12 && (table.accuracy - 0.986).abs() < 5e-4,
        format!(
            "{mismatches}/100 staircase mismatches, hand case {}, AUROC err {auroc_err:.1e}, table accuracy {:.4}",
            if hand_ok { "ok" } else { "wrong" },
            table.accuracy
        ),
    )
}

// ---------------------------------------------------------------- 6..11

fn criterion_6(r: &Report, el: Duration) -> Outcome {
    let worst_auroc = r
        .phases
        .iter()
        .flat_map(|p| p.awareness.flows.iter().map(|f| f.auroc))
        .fold(f64::INFINITY, f64::min);
    let worst_sel = r
        .phases
        .iter()
        .map(|p| p.awareness.confusion.accuracy)
        .fold(f64::INFINITY, f64::min);
    let last = r.phases.last().unwrap();
    let per_flow: Vec<String> = last
        .awareness
        .flows
        .iter()
        .map(|f| format!("{} {:.3}", f.domain, f.auroc))
        .collect();
    Outcome::new(
        worst_auroc >= 0.95 && worst_sel >= 0.95 && within(el, 15 * 60),
        format!(
            "final AUROC [{}], min over phases {worst_auroc:.3}, min selection accuracy {worst_sel:.3}, pipeline {:.0}s",
            per_flow.join(", "),
            el.as_secs_f64()
        ),
    )
}

fn criterion_7(r: &Report, el: Duration) -> Outcome {
    let get = |m: &str| r.baseline(m).unwrap();
    let (naive, replay, frozen) = (get("naive-finetune"), get("experience-replay"), get("frozen-generalized"));
    let d = &r.decode;
    let ok = d.fgt_ade < 0.25 * naive.fgt_ade
        && d.fgt_ade < replay.fgt_ade
        && frozen.fgt_ade == 0.0
        && d.aer_ade < frozen.aer_ade
        && within(el, 45 * 60);
    Outcome::new(
        ok,
        format!(
            "FGT decode {:.4} naive {:.4} replay {:.4} frozen {}; AER decode {:.4} frozen {:.4}",
            d.fgt_ade, naive.fgt_ade, replay.fgt_ade, frozen.fgt_ade, d.aer_ade, frozen.aer_ade
        ),
    )
}

fn criterion_8(r: &Report) -> Outcome {
    let last = r.phases.last().unwrap();
    let worst = last.drift.iter().map(|d| d.1).fold(0.0, f64::max);
    let expected = r.phases.len() - 1;
    Outcome::new(
        last.drift.len() == expected && worst < 1e-2,
        format!("{} earlier queries, worst drift {worst:.2e}", last.drift.len()),
    )
}

fn criterion_9(r: &Report) -> Outcome {
    let rel: Vec<(String, f64)> = r
        .holdout
        .iter()
        .map(|s| (s.domain.clone(), (s.ade - s.generalized_ade).abs() / s.generalized_ade))
        .collect();
    let worst = rel.iter().map(|x| x.1).fold(0.0, f64::max);
    let detail: Vec<String> = r
        .holdout
        .iter()
        .zip(&rel)
        .map(|(s, (_, d))| format!("{} fused {:.4} vs generalized {:.4} ({:.2}%)", s.domain, s.ade, s.generalized_ade, 100.0 * d))
        .collect();
    Outcome::new(!rel.is_empty() && worst < 0.01, detail.join("; "))
}

fn criterion_10(r: &Report, el: Duration) -> Outcome {
    let mut ok = !r.ablation.is_empty() && within(el, 30 * 60);
    let mut detail = Vec::new();
    let mut domains: Vec<(&str, &str)> = r.ablation.iter().map(|a| (a.domain.as_str(), a.role.as_str())).collect();
    domains.dedup();
    for (domain, role) in domains {
        let mut rows: Vec<(f64, f64)> = r
            .ablation
            .iter()
            .filter(|a| a.domain == domain)
            .map(|a| (a.e0, a.ade))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let ades: Vec<f64> = rows.iter().map(|x| x.1).collect();
        let shape = if role == "specialized" {
            ades.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-3))
        } else {
            let n = ades.len();
            ades.windows(2).all(|w| w[1] <= w[0] * (1.0 + 5e-3))
                && n >= 2
                && (ades[n - 1] - ades[n - 2]).abs() <= 0.02 * ades[n - 2]
        };
        ok &= shape;
        let series: Vec<String> = ades.iter().map(|a| format!("{a:.4}")).collect();
        detail.push(format!("{role} {domain} [{}]", series.join(" ")));
    }
    Outcome::new(ok, detail.join("; "))
}

fn criterion_11(a: &PipelineRun, b: &PipelineRun) -> Outcome {
    let same_ck = a.checkpoints == b.checkpoints;
    let (ja, jb) = (a.report.to_json().unwrap(), b.report.to_json().unwrap());
    let csv_a: Vec<String> = a.report.baselines.iter().map(|s| s.to_csv()).collect();
    let csv_b: Vec<String> = b.report.baselines.iter().map(|s| s.to_csv()).collect();
    Outcome::new(
        same_ck && ja == jb && csv_a == csv_b,
        format!(
            "{} checkpoints {}, report JSON {}",
            a.checkpoints.len(),
            if same_ck { "identical" } else { "differ" },
            if ja == jb { "identical" } else { "differs" }
        ),
    )
}

fn stock_run() -> (PipelineRun, Duration) {
    let start = Instant::now();
    let cfg = Config::default();
    let corpus = experiment::generate_corpus(&cfg).expect("corpus");
    let run = experiment::run_pipeline(&cfg, &corpus).expect("pipeline");
    (run, start.elapsed())
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "autodiff gradients", criterion_1()),
        (2, "flow correctness", criterion_2()),
        (3, "Dirichlet machinery", criterion_3()),
        (4, "posterior fusion limits", criterion_4()),
        (5, "metric oracles", criterion_5()),
    ];
    let (run, el) = stock_run();
    let (again, _) = stock_run();
    let r = &run.report;
    results.push((6, "domain awareness", criterion_6(r, el)));
    results.push((7, "forgetting ordering", criterion_7(r, el)));
    results.push((8, "hypernetwork preservation", criterion_8(r)));
    results.push((9, "performance floor", criterion_9(r)));
    results.push((10, "e0 ablation shape", criterion_10(r, el)));
    results.push((11, "determinism", criterion_11(&run, &again)));

    let mut failed = 0;
    for (n, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag} {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
