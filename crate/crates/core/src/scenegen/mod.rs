//! Synthetic multi-domain driving scenes.
//!
//! Each domain is a kinematic family (circulating arcs, highway straights,
//! intersection turns) with its own speed, curvature and behaviour-mode
//! distribution. Vehicles are integrated exactly along piecewise-constant
//! curvature arcs, then re-expressed in the target-centric frame: the last
//! observed position is the origin and the heading at `t = 0` is `+x`.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DecodeError, Result};

pub use io::{read_dataset, write_dataset, Dataset, DATASET_MAGIC, DATASET_VERSION};

pub type Point = [f64; 2];

/// Horizon and context sizes shared by every scene in a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDims {
    /// Past samples, including the current one at `t = 0`.
    pub t_p: usize,
    /// Future samples after `t = 0`.
    pub t_f: usize,
    /// Neighbour slots (padded).
    pub n_nb: usize,
    /// Sampling period in seconds.
    pub dt: f64,
}

impl Default for SceneDims {
    fn default() -> Self {
        SceneDims {
            t_p: 10,
            t_f: 60,
            n_nb: 4,
            dt: 0.1,
        }
    }
}

impl SceneDims {
    pub fn validate(&self) -> Result<()> {
        if self.t_p < 2 {
            return Err(DecodeError::Spec {
                field: "t_p",
                reason: "need at least two past samples".into(),
            });
        }
        if self.t_f == 0 {
            return Err(DecodeError::Spec {
                field: "t_f",
                reason: "future horizon must be positive".into(),
            });
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DecodeError::Spec {
                field: "dt",
                reason: format!("timestep must be positive, got {}", self.dt),
            });
        }
        Ok(())
    }

    pub fn horizon_seconds(&self) -> f64 {
        self.t_f as f64 * self.dt
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    /// Generating domain. Evaluation bookkeeping only; inference never reads it.
    pub domain_tag: u8,
    pub past: Vec<Point>,
    pub future: Vec<Point>,
    /// `n_nb` tracks of `t_p` points each; invalid slots are all zero.
    pub neighbors: Vec<Vec<Point>>,
    pub mask: Vec<bool>,
}

impl Scene {
    pub fn endpoint(&self) -> Point {
        *self.future.last().expect("non-empty future")
    }

    /// Speed over the last observed step.
    pub fn current_speed(&self, dt: f64) -> f64 {
        let n = self.past.len();
        dist(self.past[n - 1], self.past[n - 2]) / dt
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KinematicFamily {
    /// Circulating at constant curvature; modes: continue, exit tangentially.
    Arc,
    /// Near-zero curvature; modes: keep lane, drift left, drift right.
    Straight,
    /// Straight approach; modes: go straight, turn left, turn right.
    Turn,
    /// Arc geometry at higher speed with strong acceleration.
    AggressiveArc,
}

impl KinematicFamily {
    pub fn mode_count(self) -> usize {
        match self {
            KinematicFamily::Arc | KinematicFamily::AggressiveArc => 2,
            KinematicFamily::Straight | KinematicFamily::Turn => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub tag: u8,
    pub family: KinematicFamily,
    /// m/s
    pub speed_range: [f64; 2],
    /// 1/m. For `turn` this is the magnitude of the turning curvature.
    pub curvature_range: [f64; 2],
    /// m/s^2
    pub accel_range: [f64; 2],
    /// Per-step heading random walk, radians.
    pub heading_noise_std: f64,
    pub mode_weights: Vec<f64>,
}

fn check_range(field: &'static str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] {
        return Err(DecodeError::Spec {
            field,
            reason: format!("expected finite [lo, hi] with lo <= hi, got {r:?}"),
        });
    }
    Ok(())
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        check_range("speed_range", self.speed_range)?;
        if self.speed_range[0] <= 0.0 {
            return Err(DecodeError::Spec {
                field: "speed_range",
                reason: format!("speeds must be positive, got {:?}", self.speed_range),
            });
        }
        check_range("curvature_range", self.curvature_range)?;
        check_range("accel_range", self.accel_range)?;
        if !(self.heading_noise_std >= 0.0 && self.heading_noise_std.is_finite()) {
            return Err(DecodeError::Spec {
                field: "heading_noise_std",
                reason: format!("must be finite and >= 0, got {}", self.heading_noise_std),
            });
        }
        let modes = self.family.mode_count();
        if self.mode_weights.len() != modes {
            return Err(DecodeError::Spec {
                field: "mode_weights",
                reason: format!(
                    "{:?} has {modes} modes, got {} weights",
                    self.family,
                    self.mode_weights.len()
                ),
            });
        }
        let total: f64 = self.mode_weights.iter().sum();
        if self.mode_weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(DecodeError::Spec {
                field: "mode_weights",
                reason: format!("weights must be non-negative and sum to 1, got {:?}", self.mode_weights),
            });
        }
        Ok(())
    }

    /// Roundabout-like circulation.
    pub fn stock_arc() -> Self {
        DomainSpec {
            name: "arc".into(),
            tag: 1,
            family: KinematicFamily::Arc,
            speed_range: [5.0, 12.0],
            curvature_range: [0.03, 0.08],
            accel_range: [-0.5, 0.5],
            heading_noise_std: 0.002,
            mode_weights: vec![0.6, 0.4],
        }
    }

    /// Highway-like driving.
    pub fn stock_straight() -> Self {
        DomainSpec {
            name: "straight".into(),
            tag: 2,
            family: KinematicFamily::Straight,
            speed_range: [25.0, 40.0],
            curvature_range: [-0.0005, 0.0005],
            accel_range: [-0.5, 0.5],
            heading_noise_std: 0.001,
            mode_weights: vec![0.6, 0.2, 0.2],
        }
    }

    /// Intersection-like approach and turn.
    pub fn stock_turn() -> Self {
        DomainSpec {
            name: "turn".into(),
            tag: 3,
            family: KinematicFamily::Turn,
            speed_range: [3.0, 10.0],
            curvature_range: [0.07, 0.125],
            accel_range: [-0.5, 0.5],
            heading_noise_std: 0.002,
            mode_weights: vec![0.4, 0.3, 0.3],
        }
    }

    /// Arc geometry with shifted speed and acceleration; never used to train
    /// a specialist in the stock plan.
    pub fn stock_aggressive_arc() -> Self {
        DomainSpec {
            name: "aggressive-arc".into(),
            tag: 4,
            family: KinematicFamily::AggressiveArc,
            speed_range: [14.0, 20.0],
            curvature_range: [0.03, 0.08],
            accel_range: [1.0, 2.5],
            heading_noise_std: 0.004,
            mode_weights: vec![0.6, 0.4],
        }
    }

    pub fn stock() -> Vec<DomainSpec> {
        vec![
            Self::stock_arc(),
            Self::stock_straight(),
            Self::stock_turn(),
            Self::stock_aggressive_arc(),
        ]
    }
}

/// Raw world-frame kinematics of one generated vehicle.
#[derive(Clone, Debug)]
pub struct WorldTrack {
    pub positions: Vec<Point>,
    pub headings: Vec<f64>,
    pub mode: usize,
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn pick_mode(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Curvature program over the whole track, one value per integration step.
fn curvature_program(
    spec: &DomainSpec,
    dims: &SceneDims,
    rng: &mut ChaCha8Rng,
    speed: f64,
    mode: usize,
) -> Vec<f64> {
    let steps = dims.t_p + dims.t_f - 1;
    let now = dims.t_p - 1;
    let horizon = dims.horizon_seconds();
    let t_of = |k: usize| (k as f64 - now as f64) * dims.dt;
    let mut kappa = vec![0.0; steps];
    match spec.family {
        KinematicFamily::Arc | KinematicFamily::AggressiveArc => {
            let k0 = uniform(rng, spec.curvature_range);
            let exit_at = rng.random_range(0.15..0.6) * horizon;
            for (k, v) in kappa.iter_mut().enumerate() {
                *v = if mode == 1 && t_of(k) >= exit_at { 0.0 } else { k0 };
            }
        }
        KinematicFamily::Straight => {
            let k0 = uniform(rng, spec.curvature_range);
            let start = rng.random_range(0.0..0.15) * horizon;
            let duration = rng.random_range(0.6..0.85) * horizon;
            let lateral = 3.5;
            let sign = if mode == 1 { 1.0 } else { -1.0 };
            let reach = speed * duration;
            let amp = lateral * std::f64::consts::PI.powi(2) / (2.0 * reach * reach);
            for (k, v) in kappa.iter_mut().enumerate() {
                let t = t_of(k);
                *v = k0;
                if mode > 0 && t >= start && t < start + duration {
                    let phase = std::f64::consts::PI * (t - start) / duration;
                    *v += sign * amp * phase.cos();
                }
            }
        }
        KinematicFamily::Turn => {
            let k_turn = uniform(rng, spec.curvature_range);
            let start = rng.random_range(0.05..0.35) * horizon;
            let sign = if mode == 1 { 1.0 } else { -1.0 };
            // Turn until the heading has changed by a quarter circle.
            let mut turned = 0.0;
            for (k, out) in kappa.iter_mut().enumerate() {
                if mode > 0 && t_of(k) >= start && turned < std::f64::consts::FRAC_PI_2 {
                    *out = sign * k_turn;
                    turned += k_turn * speed * dims.dt;
                }
            }
        }
    }
    kappa
}

/// Integrates one vehicle in a randomly placed world frame.
pub fn simulate_world(spec: &DomainSpec, dims: &SceneDims, rng: &mut ChaCha8Rng) -> WorldTrack {
    let speed = uniform(rng, spec.speed_range);
    let accel = uniform(rng, spec.accel_range);
    let mode = pick_mode(rng, &spec.mode_weights);
    let kappa = curvature_program(spec, dims, rng, speed, mode);
    let noise = Normal::new(0.0, spec.heading_noise_std.max(0.0)).expect("finite std");

    let total = dims.t_p + dims.t_f;
    let mut pos = [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)];
    let mut psi: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut v = speed;
    let mut positions = Vec::with_capacity(total);
    let mut headings = Vec::with_capacity(total);
    positions.push(pos);
    headings.push(psi);
    for &k in kappa.iter().take(total - 1) {
        let ds = (v * dims.dt + 0.5 * accel * dims.dt * dims.dt).max(0.0);
        let psi_next = psi + k * ds;
        if k.abs() > 1e-12 {
            pos[0] += (psi_next.sin() - psi.sin()) / k;
            pos[1] -= (psi_next.cos() - psi.cos()) / k;
        } else {
            pos[0] += ds * psi.cos();
            pos[1] += ds * psi.sin();
        }
        psi = psi_next;
        if spec.heading_noise_std > 0.0 {
            psi += noise.sample(rng);
        }
        v = (v + accel * dims.dt).max(0.5);
        positions.push(pos);
        headings.push(psi);
    }
    WorldTrack {
        positions,
        headings,
        mode,
    }
}

/// Rigid transform into the frame where `origin` is zero and `heading` is `+x`.
pub fn to_target_frame(p: Point, origin: Point, heading: f64) -> Point {
    let (s, c) = heading.sin_cos();
    let dx = p[0] - origin[0];
    let dy = p[1] - origin[1];
    [c * dx + s * dy, -s * dx + c * dy]
}

fn neighbors(
    dims: &SceneDims,
    rng: &mut ChaCha8Rng,
    speed: f64,
) -> (Vec<Vec<Point>>, Vec<bool>) {
    let count = rng.random_range(0..=dims.n_nb);
    let mut tracks = Vec::with_capacity(dims.n_nb);
    let mut mask = Vec::with_capacity(dims.n_nb);
    for slot in 0..dims.n_nb {
        if slot >= count {
            tracks.push(vec![[0.0, 0.0]; dims.t_p]);
            mask.push(false);
            continue;
        }
        let lane: f64 = [-3.5, 0.0, 3.5][rng.random_range(0..3)];
        let mut lon: f64 = rng.random_range(-25.0..25.0);
        if lane == 0.0 && lon.abs() < 6.0 {
            lon = 6.0f64.copysign(lon);
        }
        let p0 = [lon, lane + rng.random_range(-0.3..0.3)];
        let vel = [speed * rng.random_range(0.8..1.2), rng.random_range(-0.2..0.2)];
        let now = (dims.t_p - 1) as f64;
        let track = (0..dims.t_p)
            .map(|k| {
                let t = (k as f64 - now) * dims.dt;
                [p0[0] + vel[0] * t, p0[1] + vel[1] * t]
            })
            .collect();
        tracks.push(track);
        mask.push(true);
    }
    (tracks, mask)
}

fn scene_from_rng(spec: &DomainSpec, dims: &SceneDims, rng: &mut ChaCha8Rng, scene_id: u64) -> Scene {
    let world = simulate_world(spec, dims, rng);
    let now = dims.t_p - 1;
    let origin = world.positions[now];
    let heading = world.headings[now];
    let frame: Vec<Point> = world
        .positions
        .iter()
        .map(|&p| to_target_frame(p, origin, heading))
        .collect();
    let (neighbors, mask) = neighbors(dims, rng, dist(world.positions[now], world.positions[now - 1]) / dims.dt);
    Scene {
        scene_id,
        domain_tag: spec.tag,
        past: frame[..dims.t_p].to_vec(),
        future: frame[dims.t_p..].to_vec(),
        neighbors,
        mask,
    }
}

/// Per-scene generator: the scene index selects an independent ChaCha stream.
fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn domain_scene_id(tag: u8, index: usize) -> u64 {
    ((tag as u64 + 1) << 32) | index as u64
}

pub fn generate_domain(spec: &DomainSpec, dims: &SceneDims, n: usize, seed: u64) -> Result<Vec<Scene>> {
    spec.validate()?;
    dims.validate()?;
    if n == 0 {
        return Err(DecodeError::invalid("scene count must be positive"));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = scene_rng(seed, i as u64);
            scene_from_rng(spec, dims, &mut rng, domain_scene_id(spec.tag, i))
        })
        .collect())
}

/// Mixed corpus: each scene's domain is drawn from `weights`.
pub fn generate_pretrain_mix(
    specs: &[DomainSpec],
    weights: &[f64],
    dims: &SceneDims,
    n: usize,
    seed: u64,
) -> Result<Vec<Scene>> {
    if specs.is_empty() {
        return Err(DecodeError::invalid("pretraining mix needs at least one domain"));
    }
    if weights.len() != specs.len() {
        return Err(DecodeError::invalid(format!(
            "{} mix weights for {} domains",
            weights.len(),
            specs.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(DecodeError::invalid(format!(
            "mix weights must be non-negative and sum to 1, got {weights:?}"
        )));
    }
    if n == 0 {
        return Err(DecodeError::invalid("scene count must be positive"));
    }
    for s in specs {
        s.validate()?;
    }
    dims.validate()?;
    Ok((0..n)
        .map(|i| {
            let mut rng = scene_rng(seed, i as u64);
            let d = pick_mode(&mut rng, weights);
            scene_from_rng(&specs[d], dims, &mut rng, i as u64)
        })
        .collect())
}
