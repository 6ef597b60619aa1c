//! Generalized encoder, anchor-conditioned decoder head and motion losses.
//!
//! The encoder maps a target-centred scene to a hidden vector `h`. A decoder
//! head is applied once per mode anchor with shared weights; each application
//! yields one mode logit and a trajectory offset. Trajectories are the
//! straight ramp towards the anchor plus `offset_scale` times the offset.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adcore::{Tape, Tensor, Var};
use crate::bundle::{dense, Manifest, ParamBundle, TargetKind};
use crate::config::Config;
use crate::contlearn::EpochLog;
use crate::error::{DecodeError, Result};
use crate::fuse::{self, PosteriorState};
use crate::scenegen::{Point, Scene, SceneDims};
use crate::train::{self, shuffled_batches, Trainer};

/// Number of encoder input features for the given dimensions.
pub fn feature_len(dims: &SceneDims) -> usize {
    2 * dims.t_p + 5 * dims.n_nb
}

/// Flattens a scene into encoder features.
///
/// Past positions contribute `x / 10` and `y` (lateral offsets are small, so
/// they keep metre scale); each neighbour slot contributes its last
/// position / 20, its last velocity / 10 and its mask bit. Masked slots are
/// zero. The domain tag is never read.
pub fn scene_features(scene: &Scene, dims: &SceneDims) -> Result<Vec<f64>> {
    if scene.past.len() != dims.t_p
        || scene.neighbors.len() != dims.n_nb
        || scene.mask.len() != dims.n_nb
    {
        return Err(DecodeError::invalid(format!(
            "scene {} does not match dimensions {dims:?}",
            scene.scene_id
        )));
    }
    if scene.past[dims.t_p - 1] != [0.0, 0.0] {
        return Err(DecodeError::invalid(format!(
            "scene {} is not target-centred: last past point is {:?}",
            scene.scene_id,
            scene.past[dims.t_p - 1]
        )));
    }
    let mut f = Vec::with_capacity(feature_len(dims));
    for p in &scene.past {
        f.push(p[0] / 10.0);
        f.push(p[1]);
    }
    for (track, &valid) in scene.neighbors.iter().zip(&scene.mask) {
        if valid && track.len() >= 2 {
            let last = track[track.len() - 1];
            let prev = track[track.len() - 2];
            f.extend([
                last[0] / 20.0,
                last[1] / 20.0,
                (last[0] - prev[0]) / dims.dt / 10.0,
                (last[1] - prev[1]) / dims.dt / 10.0,
                1.0,
            ]);
        } else {
            f.extend([0.0; 5]);
        }
    }
    if f.iter().any(|x| !x.is_finite()) {
        return Err(DecodeError::invalid(format!(
            "scene {} has non-finite coordinates",
            scene.scene_id
        )));
    }
    Ok(f)
}

pub fn feature_matrix(scenes: &[Scene], dims: &SceneDims) -> Result<Tensor> {
    let mut data = Vec::with_capacity(scenes.len() * feature_len(dims));
    for s in scenes {
        data.extend(scene_features(s, dims)?);
    }
    Tensor::new(scenes.len(), feature_len(dims), data)
}

/// Ground-truth futures as rows of interleaved `x, y`.
pub fn future_matrix(scenes: &[Scene], t_f: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(scenes.len() * 2 * t_f);
    for s in scenes {
        if s.future.len() != t_f {
            return Err(DecodeError::invalid(format!(
                "scene {} has {} future steps, expected {t_f}",
                s.scene_id,
                s.future.len()
            )));
        }
        data.extend(s.future.iter().flatten());
    }
    Tensor::new(scenes.len(), 2 * t_f, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input: usize,
    pub hidden: usize,
    pub d_h: usize,
}

impl EncoderSpec {
    pub fn from_config(cfg: &Config) -> Self {
        EncoderSpec {
            input: feature_len(&cfg.data.dims),
            hidden: cfg.model.encoder_hidden,
            d_h: cfg.model.d_h,
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::new(TargetKind::Encoder)
            .dense("enc1", self.input, self.hidden)
            .dense("enc2", self.hidden, self.d_h)
    }
}

/// Two tanh layers; `x` is `n x input`.
pub fn encode_tape(tape: &Tape, spec: &EncoderSpec, params: Var, x: Var) -> Result<Var> {
    let p = spec.manifest().unpack(tape, params)?;
    let a = tape.tanh(dense(tape, x, p[0], p[1])?);
    Ok(tape.tanh(dense(tape, a, p[2], p[3])?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub dims: SceneDims,
    pub params: ParamBundle,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, dims: SceneDims, params: ParamBundle) -> Result<Self> {
        spec.manifest().check_matches(&params.manifest)?;
        Ok(Encoder { spec, dims, params })
    }

    pub fn encode(&self, scene: &Scene) -> Result<Vec<f64>> {
        Ok(self.encode_batch(std::slice::from_ref(scene))?.into_data())
    }

    /// Hidden representations, one row per scene.
    pub fn encode_batch(&self, scenes: &[Scene]) -> Result<Tensor> {
        let x = feature_matrix(scenes, &self.dims)?;
        self.encode_features(x)
    }

    pub fn encode_features(&self, x: Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = tape.constant(self.params.as_tensor());
        let x = tape.constant(x);
        let h = encode_tape(&tape, &self.spec, p, x)?;
        Ok((*tape.value(h)).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub d_h: usize,
    pub hidden: usize,
    pub t_f: usize,
    pub offset_scale: f64,
}

impl HeadSpec {
    pub fn from_config(cfg: &Config) -> Self {
        HeadSpec {
            d_h: cfg.model.d_h,
            hidden: cfg.model.decoder_hidden,
            t_f: cfg.data.dims.t_f,
            offset_scale: cfg.model.offset_scale,
        }
    }

    /// `head1: [d_h + 2, hidden]`, `head2: [hidden, 1 + 2 t_f]`. Column 0 of
    /// `head2` produces the logit, the rest the offsets.
    pub fn manifest(&self) -> Manifest {
        Manifest::new(TargetKind::DecoderHead)
            .dense("head1", self.d_h + 2, self.hidden)
            .dense("head2", self.hidden, 1 + 2 * self.t_f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub points: Vec<Point>,
}

impl Anchors {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// k-means++ seeding followed by Lloyd iterations.
    pub fn kmeans(endpoints: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Result<Anchors> {
        if k == 0 || endpoints.len() < k {
            return Err(DecodeError::invalid(format!(
                "k-means needs at least {k} points, got {}",
                endpoints.len()
            )));
        }
        let d2 = |a: Point, b: Point| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        let mut centers = vec![endpoints[rng.random_range(0..endpoints.len())]];
        while centers.len() < k {
            let dist: Vec<f64> = endpoints
                .iter()
                .map(|&p| centers.iter().map(|&c| d2(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = dist.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut chosen = dist.len() - 1;
                for (i, d) in dist.iter().enumerate() {
                    if u < *d {
                        chosen = i;
                        break;
                    }
                    u -= d;
                }
                chosen
            } else {
                rng.random_range(0..endpoints.len())
            };
            centers.push(endpoints[pick]);
        }
        let mut assign = vec![usize::MAX; endpoints.len()];
        for _ in 0..200 {
            let mut changed = false;
            for (a, &p) in assign.iter_mut().zip(endpoints) {
                let best = nearest(&centers, p);
                if *a != best {
                    *a = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = vec![[0.0, 0.0, 0.0]; k];
            for (&a, p) in assign.iter().zip(endpoints) {
                sums[a][0] += p[0];
                sums[a][1] += p[1];
                sums[a][2] += 1.0;
            }
            for (c, s) in centers.iter_mut().zip(&sums) {
                if s[2] > 0.0 {
                    *c = [s[0] / s[2], s[1] / s[2]];
                }
            }
        }
        Ok(Anchors { points: centers })
    }

    pub fn nearest(&self, p: Point) -> usize {
        nearest(&self.points, p)
    }

    /// Winner mode per scene: the anchor nearest the true endpoint.
    pub fn winners(&self, scenes: &[Scene]) -> Vec<usize> {
        scenes.iter().map(|s| self.nearest(s.endpoint())).collect()
    }

    fn features(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0] / 50.0, p[1] / 50.0]).collect()
    }

    fn ramps(&self, t_f: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 2 * t_f);
        for a in &self.points {
            for t in 0..t_f {
                let s = (t + 1) as f64 / t_f as f64;
                out.push(a[0] * s);
                out.push(a[1] * s);
            }
        }
        out
    }
}

fn nearest(centers: &[Point], p: Point) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Tape outputs of a decoder head over a batch of `b` hidden vectors.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `b x M`
    pub logits: Var,
    /// `(b M) x 2 t_f`; row `i M + j` is mode `j` of sample `i`.
    pub trajectories: Var,
}

pub fn head_tape(
    tape: &Tape,
    spec: &HeadSpec,
    params: Var,
    h: Var,
    anchors: &Anchors,
) -> Result<HeadOutput> {
    let p = spec.manifest().unpack(tape, params)?;
    let (b, d) = tape.shape(h);
    if d != spec.d_h {
        return Err(DecodeError::Shape {
            op: "decode",
            lhs: (b, d),
            rhs: (b, spec.d_h),
        });
    }
    let m = anchors.len();
    let feats = anchors.features();
    let ramps = anchors.ramps(spec.t_f);
    let mut a = Vec::with_capacity(b * m * 2);
    let mut base = Vec::with_capacity(b * ramps.len());
    for _ in 0..b {
        a.extend_from_slice(&feats);
        base.extend_from_slice(&ramps);
    }
    let a = tape.constant(Tensor::new(b * m, 2, a)?);
    let base = tape.constant(Tensor::new(b * m, 2 * spec.t_f, base)?);
    let x = tape.concat(&[tape.repeat_rows(h, m), a])?;
    let hid = tape.tanh(dense(tape, x, p[0], p[1])?);
    let out = dense(tape, hid, p[2], p[3])?;
    let logits = tape.reshape(tape.slice(out, 0, 1)?, b, m)?;
    let offsets = tape.slice(out, 1, 1 + 2 * spec.t_f)?;
    let trajectories = tape.add(tape.scale(offsets, spec.offset_scale), base)?;
    Ok(HeadOutput {
        logits,
        trajectories,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Generalized,
    Specialized(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixturePrediction {
    pub chi: Vec<f64>,
    /// `M` trajectories of `t_f` points.
    pub trajectories: Vec<Vec<Point>>,
    pub source: Source,
}

impl MixturePrediction {
    pub fn endpoints(&self) -> Vec<Point> {
        self.trajectories.iter().map(|t| t[t.len() - 1]).collect()
    }
}

/// Decodes every row of `h` with one head.
pub fn decode_batch(
    h: &Tensor,
    params: &ParamBundle,
    spec: &HeadSpec,
    anchors: &Anchors,
    source: Source,
) -> Result<Vec<MixturePrediction>> {
    spec.manifest().check_matches(&params.manifest)?;
    let tape = Tape::new();
    let p = tape.constant(params.as_tensor());
    let hv = tape.constant(h.clone());
    let out = head_tape(&tape, spec, p, hv, anchors)?;
    let chi = tape.value(tape.softmax(out.logits));
    let traj = tape.value(out.trajectories);
    let m = anchors.len();
    Ok((0..h.rows())
        .map(|i| MixturePrediction {
            chi: chi.row_slice(i).to_vec(),
            trajectories: (0..m)
                .map(|j| {
                    traj.row_slice(i * m + j)
                        .chunks_exact(2)
                        .map(|c| [c[0], c[1]])
                        .collect()
                })
                .collect(),
            source,
        })
        .collect())
}

pub fn decode(
    h: &[f64],
    params: &ParamBundle,
    spec: &HeadSpec,
    anchors: &Anchors,
    source: Source,
) -> Result<MixturePrediction> {
    let h = Tensor::row(h.to_vec());
    Ok(decode_batch(&h, params, spec, anchors, source)?.remove(0))
}

/// Mean over samples of `log_sum_exp(logits) - logit[winner]`.
pub fn cross_entropy_tape(tape: &Tape, logits: Var, winners: &[usize]) -> Result<Var> {
    let lse = tape.log_sum_exp(logits);
    let picked = tape.pick(logits, winners)?;
    Ok(tape.mean(tape.sub(lse, picked)?))
}

/// Winner-mode L2: mean over samples and steps of the squared Euclidean
/// error, in m².
pub fn regression_tape(
    tape: &Tape,
    trajectories: Var,
    winners: &[usize],
    m: usize,
    gt: Var,
) -> Result<Var> {
    let idx: Vec<usize> = winners.iter().enumerate().map(|(i, &w)| i * m + w).collect();
    let chosen = tape.gather_rows(trajectories, &idx)?;
    let (b, cols) = tape.shape(gt);
    let diff = tape.sub(chosen, gt)?;
    Ok(tape.scale(tape.sum(tape.square(diff)), 1.0 / (b * cols / 2).max(1) as f64))
}

/// Squared-error convention of [`regression_tape`] for one trajectory.
pub fn regression_error(pred: &[Point], gt: &[Point]) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2))
        .sum();
    s / gt.len().max(1) as f64
}

/// Classification term plus `regression_weight` times the winner-mode L2.
///
/// Without a posterior the classification term is the cross-entropy of
/// `pred.chi`; with one it is the Bayesian loss of the fused Dirichlet.
pub fn motion_loss(
    pred: &MixturePrediction,
    gt_future: &[Point],
    anchors: &Anchors,
    posterior: Option<&PosteriorState>,
    regression_weight: f64,
) -> Result<f64> {
    if pred.chi.len() != anchors.len() || pred.trajectories.len() != anchors.len() {
        return Err(DecodeError::invalid("prediction and anchors disagree on M"));
    }
    let end = *gt_future
        .last()
        .ok_or_else(|| DecodeError::invalid("empty ground truth"))?;
    let w = anchors.nearest(end);
    if pred.trajectories[w].len() != gt_future.len() {
        return Err(DecodeError::invalid("prediction horizon differs from ground truth"));
    }
    let class = match posterior {
        None => -pred.chi[w].ln(),
        Some(post) => fuse::bayes_loss(&post.alpha(), w)?,
    };
    Ok(class + regression_weight * regression_error(&pred.trajectories[w], gt_future))
}

/// Gaussian draws with standard deviation `sqrt(1 / fan_in)` for weights and
/// zeros for biases.
pub fn random_params(manifest: &Manifest, rng: &mut ChaCha8Rng) -> ParamBundle {
    let mut flat = Vec::with_capacity(manifest.total());
    for e in &manifest.entries {
        if e.rows == 1 && e.name.ends_with("_b") {
            flat.extend(std::iter::repeat_n(0.0, e.len()));
        } else {
            let n = Normal::new(0.0, (1.0 / e.fan_in.max(1) as f64).sqrt()).expect("valid std");
            flat.extend((0..e.len()).map(|_| n.sample(rng)));
        }
    }
    ParamBundle {
        manifest: manifest.clone(),
        flat,
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub encoder: Encoder,
    pub decoder: ParamBundle,
    pub anchors: Anchors,
    pub log: Vec<EpochLog>,
}

/// Fits encoder and generalized head jointly on the mixed corpus with
/// cross-entropy plus weighted winner-mode L2.
pub fn pretrain_generalized(mix: &[Scene], cfg: &Config) -> Result<Pretrained> {
    if mix.is_empty() {
        return Err(DecodeError::invalid("empty pretraining corpus"));
    }
    let dims = cfg.data.dims;
    let enc_spec = EncoderSpec::from_config(cfg);
    let head_spec = HeadSpec::from_config(cfg);
    let endpoints: Vec<Point> = mix.iter().map(Scene::endpoint).collect();
    let anchors = Anchors::kmeans(&endpoints, cfg.model.modes, &mut train::rng(cfg.seed, train::STREAM_ANCHORS))?;
    let mut init = train::rng(cfg.seed, train::STREAM_PRETRAIN_INIT);
    let mut enc = random_params(&enc_spec.manifest(), &mut init);
    let mut dec = random_params(&head_spec.manifest(), &mut init);

    let x_all = feature_matrix(mix, &dims)?;
    let y_all = future_matrix(mix, dims.t_f)?;
    let winners = anchors.winners(mix);
    let tc = &cfg.pretrain;
    let mut trainer = Trainer::new(tc, &[enc.flat.len(), dec.flat.len()]);
    let mut shuffle = train::rng(cfg.seed, train::STREAM_PRETRAIN_SHUFFLE);
    let started = Instant::now();
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = trainer.start_epoch(epoch);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in shuffled_batches(mix.len(), tc.batch_size, &mut shuffle) {
            let tape = Tape::new();
            let pe = tape.param(enc.as_tensor());
            let pd = tape.param(dec.as_tensor());
            let x = tape.constant(gather(&x_all, &batch));
            let y = tape.constant(gather(&y_all, &batch));
            let w: Vec<usize> = batch.iter().map(|&i| winners[i]).collect();
            let h = encode_tape(&tape, &enc_spec, pe, x)?;
            let out = head_tape(&tape, &head_spec, pd, h, &anchors)?;
            let ce = cross_entropy_tape(&tape, out.logits, &w)?;
            let reg = regression_tape(&tape, out.trajectories, &w, anchors.len(), y)?;
            let loss = tape.add(ce, tape.scale(reg, cfg.loss.regression_weight))?;
            let value = tape.item(loss);
            train::check_finite(epoch, "pretraining loss", value)?;
            let mut g = tape.backward(loss)?;
            let grads = [g.take(pe), g.take(pd)];
            trainer.step(&mut [&mut enc.flat, &mut dec.flat], &grads)?;
            total += value * batch.len() as f64;
            count += batch.len();
        }
        let mean = total / count as f64;
        log::info!("pretrain epoch {epoch}: motion loss {mean:.5}, lr {lr:.3e}");
        log.push(EpochLog {
            epoch,
            l_motion: mean,
            l_domain: 0.0,
            l_reg: 0.0,
            lr,
            wall_time: started.elapsed().as_secs_f64(),
        });
    }
    Ok(Pretrained {
        encoder: Encoder::new(enc_spec, dims, enc)?,
        decoder: dec,
        anchors,
        log,
    })
}

/// Rows of `t` selected by `idx`.
pub(crate) fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * t.cols());
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::new(idx.len(), t.cols(), data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_domain, DomainSpec};

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.model.modes = 4;
        cfg
    }

    fn anchors4() -> Anchors {
        Anchors {
            points: vec![[30.0, 0.0], [20.0, 10.0], [20.0, -10.0], [80.0, 0.0]],
        }
    }

    fn zero_head(spec: &HeadSpec) -> ParamBundle {
        ParamBundle::zeros(spec.manifest())
    }

    #[test]
    fn zero_logit_weights_give_uniform_chi() {
        let cfg = small_cfg();
        let spec = HeadSpec::from_config(&cfg);
        let mut p = random_params(&spec.manifest(), &mut train::rng(1, 0));
        let cols = 1 + 2 * spec.t_f;
        let w = p.tensor_mut("head2_w").unwrap();
        for r in 0..spec.hidden {
            w[r * cols] = 0.0;
        }
        p.tensor_mut("head2_b").unwrap()[0] = 0.0;
        let h = vec![0.3; spec.d_h];
        let pred = decode(&h, &p, &spec, &anchors4(), Source::Generalized).unwrap();
        for c in &pred.chi {
            assert!((c - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn logit_weight_perturbation_leaves_trajectories() {
        let cfg = small_cfg();
        let spec = HeadSpec::from_config(&cfg);
        let p = random_params(&spec.manifest(), &mut train::rng(2, 0));
        let mut q = p.clone();
        q.tensor_mut("head2_w").unwrap()[5 * (1 + 2 * spec.t_f)] += 0.3;
        let h: Vec<f64> = (0..spec.d_h).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = decode(&h, &p, &spec, &anchors4(), Source::Generalized).unwrap();
        let b = decode(&h, &q, &spec, &anchors4(), Source::Generalized).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        assert_ne!(a.chi, b.chi);
        let again = decode(&h, &p, &spec, &anchors4(), Source::Generalized).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn manifest_mismatch_names_shapes() {
        let cfg = small_cfg();
        let spec = HeadSpec::from_config(&cfg);
        let wrong = HeadSpec { hidden: 8, ..spec };
        let err = decode(&[0.0; 64], &zero_head(&wrong), &spec, &anchors4(), Source::Generalized)
            .unwrap_err()
            .to_string();
        assert!(err.contains("head1_w[66x64]") && err.contains("head1_w[66x8]"), "{err}");
    }

    #[test]
    fn motion_loss_examples() {
        let anchors = anchors4();
        let gt: Vec<Point> = (1..=30).map(|t| [t as f64, 0.0]).collect();
        let mut traj = vec![gt.clone(); 4];
        let mut chi = vec![0.0; 4];
        chi[0] = 1.0;
        let exact = MixturePrediction {
            chi: chi.clone(),
            trajectories: traj.clone(),
            source: Source::Generalized,
        };
        assert_eq!(motion_loss(&exact, &gt, &anchors, None, 1.0).unwrap(), 0.0);

        let uniform = MixturePrediction {
            chi: vec![0.25; 4],
            trajectories: traj.clone(),
            source: Source::Generalized,
        };
        let ce = motion_loss(&uniform, &gt, &anchors, None, 0.0).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);

        for p in traj[0].iter_mut() {
            p[0] += 1.0;
        }
        let shifted = MixturePrediction {
            chi,
            trajectories: traj,
            source: Source::Generalized,
        };
        assert!((motion_loss(&shifted, &gt, &anchors, None, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encoder_ignores_domain_tag_and_rejects_uncentred() {
        let cfg = small_cfg();
        let dims = cfg.data.dims;
        let spec = EncoderSpec::from_config(&cfg);
        let enc = Encoder::new(spec, dims, random_params(&spec.manifest(), &mut train::rng(3, 0))).unwrap();
        let scenes = generate_domain(&DomainSpec::stock_turn(), &dims, 2, 9).unwrap();
        let mut other = scenes[0].clone();
        other.domain_tag = 42;
        assert_eq!(enc.encode(&scenes[0]).unwrap(), enc.encode(&other).unwrap());
        let mut moved = scenes[1].clone();
        moved.past[dims.t_p - 1][0] = 0.5;
        assert!(enc.encode(&moved).is_err());
    }

    #[test]
    fn kmeans_is_seeded() {
        let pts: Vec<Point> = (0..300)
            .map(|i| {
                let c = (i % 3) as f64 * 50.0;
                [c + (i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()]
            })
            .collect();
        let a = Anchors::kmeans(&pts, 3, &mut train::rng(5, 0)).unwrap();
        let b = Anchors::kmeans(&pts, 3, &mut train::rng(5, 0)).unwrap();
        assert_eq!(a, b);
        let mut xs: Vec<f64> = a.points.iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        for (x, want) in xs.iter().zip([0.0, 50.0, 100.0]) {
            assert!((x - want).abs() < 0.2, "{xs:?}");
        }
    }
}
