use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::adcore::{AdamW, LrSchedule};
use crate::config::TrainConfig;
use crate::error::{DecodeError, Result};

/// AdamW plus the epoch schedule.
pub(crate) struct Trainer {
    opt: AdamW,
    schedule: LrSchedule,
}

impl Trainer {
    pub(crate) fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        Trainer {
            opt: AdamW::new(cfg.optimizer(), sizes),
            schedule: cfg.schedule(),
        }
    }

    /// Sets the rate for `epoch` and returns it.
    pub(crate) fn start_epoch(&mut self, epoch: usize) -> f64 {
        let lr = self.schedule.lr(epoch);
        self.opt.set_lr(lr);
        lr
    }

    pub(crate) fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        self.opt.step(params, grads)
    }
}

pub(crate) fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn check_finite(epoch: usize, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(DecodeError::Diverged {
            epoch,
            reason: format!("{what} became {value}"),
        })
    }
}

pub(crate) const STREAM_ANCHORS: u64 = 1;
pub(crate) const STREAM_PRETRAIN_INIT: u64 = 2;
pub(crate) const STREAM_PRETRAIN_SHUFFLE: u64 = 3;
pub(crate) const STREAM_HYPER_INIT: u64 = 4;
pub(crate) const STREAM_QUERY: u64 = 5;
/// Expansion phase `m` shuffles with stream `STREAM_EXPANSION + m`.
pub(crate) const STREAM_EXPANSION: u64 = 100;
/// Baseline runs shuffle with stream `STREAM_BASELINE + 10 kind + phase`.
pub(crate) const STREAM_BASELINE: u64 = 200;

pub(crate) fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
