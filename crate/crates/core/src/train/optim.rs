use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    SgdNesterov {
        momentum: f32,
        /// exponent of the `(1 - epoch / epochs)` learning-rate decay
        poly_power: f32,
    },
    AdamW {
        beta1: f32,
        beta2: f32,
        eps: f32,
    },
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self::SgdNesterov {
            momentum: 0.99,
            poly_power: 0.9,
        }
    }

    pub fn adamw() -> Self {
        Self::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Learning rate for `epoch` (0-based) of `epochs`.
    pub fn learning_rate(&self, base: f32, epoch: usize, epochs: usize) -> f32 {
        match *self {
            Self::SgdNesterov { poly_power, .. } => {
                base * (1.0 - epoch as f32 / epochs as f32).max(0.0).powf(poly_power)
            }
            Self::AdamW { .. } => base,
        }
    }
}

/// Moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// SGD velocity or Adam first moment
    pub first: Vec<Vec<f32>>,
    /// Adam second moment; empty for SGD
    pub second: Vec<Vec<f32>>,
}

const STATE_MAGIC: &[u8; 4] = b"FOPT";

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect();
        Self {
            step: 0,
            first: zeros(),
            second: match config {
                OptimizerConfig::SgdNesterov { .. } => Vec::new(),
                OptimizerConfig::AdamW { .. } => zeros(),
            },
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = STATE_MAGIC.to_vec();
        out.extend(self.step.to_le_bytes());
        for group in [&self.first, &self.second] {
            out.extend((group.len() as u64).to_le_bytes());
            for buf in group {
                out.extend((buf.len() as u64).to_le_bytes());
                for v in buf {
                    out.extend(v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Format {
            path: "<optimizer state>".into(),
            detail: "truncated or corrupt".into(),
        };
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        if take(4)? != STATE_MAGIC {
            return Err(bad());
        }
        let read_u64 = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap());
        let step = read_u64(take(8)?);
        let mut groups = Vec::new();
        for _ in 0..2 {
            let count = read_u64(take(8)?) as usize;
            let mut group = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let len = read_u64(take(8)?) as usize;
                let raw = take(len.checked_mul(4).ok_or_else(bad)?)?;
                group.push(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
            }
            groups.push(group);
        }
        if pos != bytes.len() {
            return Err(bad());
        }
        let second = groups.pop().unwrap();
        let first = groups.pop().unwrap();
        Ok(Self { step, first, second })
    }
}

/// One update of every parameter tensor in place.
pub fn optimizer_step(
    params: &mut [&mut [f32]],
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    lr: f32,
    weight_decay: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Config(format!(
            "{} parameters, {} gradients, {} optimizer buffers",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    state.step += 1;
    match *config {
        OptimizerConfig::SgdNesterov { momentum, .. } => {
            for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.first) {
                for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    let g = g + weight_decay * *p;
                    *v = momentum * *v - lr * g;
                    *p += momentum * *v - lr * g;
                }
            }
        }
        OptimizerConfig::AdamW { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(state.step as i32);
            let c2 = 1.0 - beta2.powi(state.step as i32);
            for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.first).zip(&mut state.second) {
                for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *p -= lr * weight_decay * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step(p: &mut Vec<f32>, g: &[f32], state: &mut OptimizerState, cfg: &OptimizerConfig, lr: f32, wd: f32) {
        optimizer_step(&mut [p.as_mut_slice()], &[g.to_vec()], state, cfg, lr, wd).unwrap();
    }

    #[test]
    fn plain_gradient_descent_on_square() {
        let cfg = OptimizerConfig::SgdNesterov {
            momentum: 0.0,
            poly_power: 0.9,
        };
        let mut state = OptimizerState::new(&cfg, &[1]);
        let mut p = vec![1.0];
        step(&mut p, &[2.0], &mut state, &cfg, 0.1, 0.0);
        assert!((p[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn nesterov_two_steps_by_hand() {
        let cfg = OptimizerConfig::SgdNesterov {
            momentum: 0.5,
            poly_power: 0.9,
        };
        let mut state = OptimizerState::new(&cfg, &[1]);
        let mut p = vec![0.0];
        step(&mut p, &[1.0], &mut state, &cfg, 0.1, 0.0);
        // v = -0.1, p = 0.5 * -0.1 - 0.1 = -0.15
        assert!((p[0] + 0.15).abs() < 1e-7);
        step(&mut p, &[1.0], &mut state, &cfg, 0.1, 0.0);
        // v = -0.05 - 0.1 = -0.15, p = -0.15 - 0.075 - 0.1
        assert!((p[0] + 0.325).abs() < 1e-7);
    }

    #[test]
    fn adamw_first_step_has_magnitude_lr() {
        let cfg = OptimizerConfig::adamw();
        for g in [0.5f32, -3.0, 1e-3] {
            let mut state = OptimizerState::new(&cfg, &[1]);
            let mut p = vec![2.0];
            step(&mut p, &[g], &mut state, &cfg, 1e-3, 0.0);
            assert!(((2.0 - p[0]).abs() - 1e-3).abs() <= 1e-6, "{g}");
        }
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let cfg = OptimizerConfig::adamw();
        let mut state = OptimizerState::new(&cfg, &[2]);
        let mut p = vec![1.0, -4.0];
        step(&mut p, &[0.0, 0.0], &mut state, &cfg, 1e-2, 0.1);
        assert_eq!(p, vec![1.0 * (1.0 - 1e-3), -4.0 * (1.0 - 1e-3)]);
    }

    #[test]
    fn poly_decay_schedule() {
        let sgd = OptimizerConfig::sgd();
        assert_eq!(sgd.learning_rate(0.01, 0, 10), 0.01);
        assert!((sgd.learning_rate(0.01, 5, 10) - 0.01 * 0.5f32.powf(0.9)).abs() < 1e-9);
        assert_eq!(OptimizerConfig::adamw().learning_rate(1e-3, 7, 10), 1e-3);
    }

    #[test]
    fn mismatched_buffers_are_rejected() {
        let cfg = OptimizerConfig::sgd();
        let mut state = OptimizerState::new(&cfg, &[1, 1]);
        let mut p = vec![0.0];
        assert!(optimizer_step(&mut [p.as_mut_slice()], &[vec![0.0]], &mut state, &cfg, 0.1, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn zero_gradient_is_a_fixpoint(p0 in proptest::collection::vec(-10f32..10.0, 1..20), adam in any::<bool>()) {
            let cfg = if adam { OptimizerConfig::adamw() } else { OptimizerConfig::sgd() };
            let mut state = OptimizerState::new(&cfg, &[p0.len()]);
            let mut p = p0.clone();
            for _ in 0..3 {
                step(&mut p, &vec![0.0; p0.len()], &mut state, &cfg, 0.1, 0.0);
            }
            prop_assert_eq!(p, p0);
        }

        #[test]
        fn state_round_trips_bit_exactly(
            bufs in proptest::collection::vec(proptest::collection::vec(any::<f32>(), 0..10), 0..5),
            adam in any::<bool>(),
            step in any::<u64>(),
        ) {
            let state = OptimizerState {
                step,
                first: bufs.clone(),
                second: if adam { bufs } else { Vec::new() },
            };
            let bytes = state.to_bytes();
            let back = OptimizerState::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back.to_bytes(), &bytes);
            prop_assert!(OptimizerState::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        }
    }
}
