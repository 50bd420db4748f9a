//! Teacher pre-training, student distillation, checkpoints and evaluation.

mod ablation;
mod checkpoint;
mod config;
mod evaluate;
mod train;

pub use ablation::{run_ablation, AblationRow, AblationTable, Scheme, SchemeOutcome};
pub use checkpoint::{param_digest, Checkpoint, Role, CHECKPOINT_VERSION};
pub use config::{Config, ModelConfig, TrainingConfig, SEED_ENV};
pub use evaluate::{evaluate, evaluate_labeled, predict_frames, Evaluation};
pub use train::{train_student, train_teacher, IterationLog, TrainOptions, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polynomial decay `base · (1 − iter/max)^power`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub power: f64,
    pub max_iterations: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainingConfig, max_iterations: usize) -> Self {
        Self {
            base_lr: cfg.base_lr,
            power: cfg.poly_power,
            max_iterations,
        }
    }
}

pub fn poly_lr(iter: usize, schedule: &Schedule) -> Result<f64> {
    let max = schedule.max_iterations;
    if iter > max {
        return Err(Error::validation(format!(
            "iteration {iter} beyond schedule end {max}"
        )));
    }
    if max == 0 {
        return Ok(schedule.base_lr);
    }
    Ok(schedule.base_lr * (1.0 - iter as f64 / max as f64).powf(schedule.power))
}

/// Values are stored as f32 in checkpoints; keeping the live copy on the
/// f32 grid makes reloads bit-exact.
pub(crate) fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub buffer: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64, params: usize) -> Self {
        Self {
            momentum,
            buffer: vec![0.0; params],
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        let mut offset = 0;
        for (p, g) in params.into_iter().zip(grads) {
            debug_assert_eq!(p.len(), g.len());
            let v = &mut self.buffer[offset..offset + p.len()];
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = (self.momentum * *v + g) as f32 as f64;
                *p = (*p - lr * *v) as f32 as f64;
            }
            offset += p.len();
        }
        debug_assert_eq!(offset, self.buffer.len());
    }
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    #[serde(with = "crate::io::u64_string")]
    pub seed: u64,
    #[serde(with = "crate::io::u64_string")]
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng, seed: u64) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::validation(format!("bad rng word position '{}'", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Fresh generator for one role of a run.
pub(crate) fn role_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sched(max: usize) -> Schedule {
        Schedule {
            base_lr: 0.01,
            power: 0.9,
            max_iterations: max,
        }
    }

    #[test]
    fn poly_lr_endpoints() {
        assert_eq!(poly_lr(0, &sched(100)).unwrap(), 0.01);
        assert_eq!(poly_lr(100, &sched(100)).unwrap(), 0.0);
        let mid = poly_lr(50, &sched(100)).unwrap();
        assert!((mid - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!(matches!(
            poly_lr(101, &sched(100)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn sgd_matches_hand_recurrence() {
        let mut p = vec![1.0, -2.0];
        let mut sgd = Sgd::new(0.9, 2);
        sgd.step(vec![&mut p], vec![&[0.5, 0.25]], 0.1);
        assert_eq!(p, vec![(1.0f64 - 0.05) as f32 as f64, -2.025f32 as f64]);
        sgd.step(vec![&mut p], vec![&[0.5, 0.25]], 0.1);
        // v = 0.9·0.5 + 0.5 = 0.95
        assert!((p[0] - (0.95 - 0.095)).abs() < 1e-6);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = role_rng(9, 2);
        let _: Vec<u32> = (0..7).map(|_| rng.gen()).collect();
        let state = RngState::capture(&rng, 9);
        let mut back = state.restore().unwrap();
        let a: Vec<u64> = (0..5).map(|_| rng.gen()).collect();
        let b: Vec<u64> = (0..5).map(|_| back.gen()).collect();
        assert_eq!(a, b);
    }
}
