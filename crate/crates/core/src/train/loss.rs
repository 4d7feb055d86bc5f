use crate::tensor::{Backward, BackwardCtx, Real, Tape, Tensor, TensorError, Var};
use crate::Result;

/// Smoothing term of the soft Dice loss.
pub const DICE_EPSILON: f64 = 1e-5;

fn check_target(op: &'static str, shape: &[usize], target: &[u8]) -> Result<(usize, usize)> {
    if shape.len() < 3 || shape[1] != 2 {
        return Err(TensorError::Invalid {
            op,
            detail: format!("expected [N, 2, ...] input, got {shape:?}"),
        }
        .into());
    }
    let n = shape[0];
    let vox: usize = shape[2..].iter().product();
    if target.len() != n * vox {
        return Err(TensorError::ShapeMismatch {
            op,
            axis: "target",
            expected: n * vox,
            found: target.len(),
        }
        .into());
    }
    if target.iter().any(|&y| y > 1) {
        return Err(TensorError::Invalid {
            op,
            detail: "target must be binary".into(),
        }
        .into());
    }
    Ok((n, vox))
}

struct SoftDiceFn {
    target: Vec<u8>,
    n: usize,
    vox: usize,
}

/// Per-sample `(Σ p·y, Σ p + Σ y)` on the foreground channel.
fn dice_sums<T: Real>(probs: &[T], target: &[u8], n: usize, vox: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|s| {
            let p = &probs[(2 * s + 1) * vox..(2 * s + 2) * vox];
            let y = &target[s * vox..(s + 1) * vox];
            p.iter().zip(y).fold((0.0, 0.0), |(i, t), (&p, &y)| {
                (i + p.f64() * y as f64, t + p.f64() + y as f64)
            })
        })
        .collect()
}

impl<T: Real> Backward<T> for SoftDiceFn {
    fn name(&self) -> &'static str {
        "soft_dice_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad_output()[0].f64() / self.n as f64;
        let probs = ctx.input(0).data();
        let mut grad = vec![T::zero(); probs.len()];
        for (s, (inter, total)) in dice_sums(probs, &self.target, self.n, self.vox).into_iter().enumerate() {
            let den = total + DICE_EPSILON;
            let num = 2.0 * inter + DICE_EPSILON;
            let y = &self.target[s * self.vox..(s + 1) * self.vox];
            let dst = &mut grad[(2 * s + 1) * self.vox..(2 * s + 2) * self.vox];
            for (d, &y) in dst.iter_mut().zip(y) {
                *d = T::of(-g * (2.0 * y as f64 * den - num) / (den * den));
            }
        }
        vec![Some(grad)]
    }
}

/// `1 - (2 Σ p·y + ε) / (Σ p + Σ y + ε)` on the foreground channel, averaged over the batch.
pub fn soft_dice_loss<T: Real>(tape: &mut Tape<T>, probs: Var, target: &[u8]) -> Result<Var> {
    let pt = tape.value(probs);
    let (n, vox) = check_target("soft_dice_loss", pt.shape(), target)?;
    let loss = dice_sums(pt.data(), target, n, vox)
        .into_iter()
        .map(|(i, t)| 1.0 - (2.0 * i + DICE_EPSILON) / (t + DICE_EPSILON))
        .sum::<f64>()
        / n as f64;
    let out = Tensor::scalar(T::of(loss));
    Ok(tape.apply(
        SoftDiceFn {
            target: target.to_vec(),
            n,
            vox,
        },
        &[probs],
        out,
    ))
}

struct CrossEntropyFn {
    target: Vec<u8>,
    n: usize,
    vox: usize,
}

impl<T: Real> Backward<T> for CrossEntropyFn {
    fn name(&self) -> &'static str {
        "cross_entropy_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad_output()[0].f64() / (self.n * self.vox) as f64;
        let x = ctx.input(0).data();
        let mut grad = vec![T::zero(); x.len()];
        for s in 0..self.n {
            let base = 2 * s * self.vox;
            for v in 0..self.vox {
                let (a, b) = (x[base + v].f64(), x[base + self.vox + v].f64());
                let p1 = 1.0 / (1.0 + (a - b).exp());
                let y = self.target[s * self.vox + v] as f64;
                grad[base + v] = T::of(g * ((1.0 - p1) - (1.0 - y)));
                grad[base + self.vox + v] = T::of(g * (p1 - y));
            }
        }
        vec![Some(grad)]
    }
}

/// Mean over voxels of `-log softmax(logits)[target]`, two classes.
pub fn cross_entropy_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: &[u8]) -> Result<Var> {
    let xt = tape.value(logits);
    let (n, vox) = check_target("cross_entropy_loss", xt.shape(), target)?;
    let x = xt.data();
    let mut total = 0.0f64;
    for s in 0..n {
        let base = 2 * s * vox;
        for v in 0..vox {
            let (a, b) = (x[base + v].f64(), x[base + vox + v].f64());
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            total += lse - if target[s * vox + v] == 1 { b } else { a };
        }
    }
    let out = Tensor::scalar(T::of(total / (n * vox) as f64));
    Ok(tape.apply(
        CrossEntropyFn {
            target: target.to_vec(),
            n,
            vox,
        },
        &[logits],
        out,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs_from_fg(fg: &[f32]) -> Tensor {
        let mut d: Vec<f32> = fg.iter().map(|p| 1.0 - p).collect();
        d.extend_from_slice(fg);
        Tensor::new([1, 2, fg.len(), 1, 1], d).unwrap()
    }

    fn eval_dice(p: &Tensor, y: &[u8]) -> f32 {
        let mut tape = Tape::new();
        let v = tape.constant(p.clone());
        let l = soft_dice_loss(&mut tape, v, y).unwrap();
        tape.value(l).item().unwrap()
    }

    fn eval_ce(x: &Tensor, y: &[u8]) -> f32 {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let l = cross_entropy_loss(&mut tape, v, y).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn dice_perfect_and_total_miss() {
        let y = [1, 0, 1, 1, 0, 0, 1, 0];
        let fg: Vec<f32> = y.iter().map(|&v| v as f32).collect();
        assert!(eval_dice(&probs_from_fg(&fg), &y) <= 1e-4);
        assert!((eval_dice(&probs_from_fg(&[0.0; 8]), &y) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dice_direct_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fg: Vec<f32> = (0..16).map(|_| rng.random()).collect();
        let y: Vec<u8> = (0..16).map(|i| u8::from(i % 3 == 0)).collect();
        // two samples of 2x2x2
        let mut data = Vec::new();
        for s in 0..2 {
            let f = &fg[s * 8..(s + 1) * 8];
            data.extend(f.iter().map(|p| 1.0 - p));
            data.extend_from_slice(f);
        }
        let p = Tensor::new([2, 2, 2, 2, 2], data).unwrap();
        let mut want = 0.0f64;
        for s in 0..2 {
            let (mut i, mut sp, mut sy) = (0.0, 0.0, 0.0);
            for v in 0..8 {
                i += fg[s * 8 + v] as f64 * y[s * 8 + v] as f64;
                sp += fg[s * 8 + v] as f64;
                sy += y[s * 8 + v] as f64;
            }
            want += 1.0 - (2.0 * i + 1e-5) / (sp + sy + 1e-5);
        }
        assert!((eval_dice(&p, &y) as f64 - want / 2.0).abs() <= 1e-6);
    }

    #[test]
    fn cross_entropy_cases() {
        let y = [0u8, 1, 1, 0];
        assert!((eval_ce(&Tensor::zeros([1, 2, 4, 1, 1]), &y) - std::f32::consts::LN_2).abs() < 1e-6);
        let big = Tensor::new([1, 2, 1, 1, 1], vec![1000.0, 0.0]).unwrap();
        assert!(eval_ce(&big, &[0]).abs() < 1e-6);
        assert!((eval_ce(&big, &[1]) - 1000.0).abs() < 1e-3);

        let x = Tensor::new([1, 2, 2, 1, 1], vec![0.3, -1.2, 0.9, 0.4]).unwrap();
        let y = [1u8, 0];
        let lp = |a: f64, b: f64, pick_b: bool| {
            let z = a.exp() + b.exp();
            -(if pick_b { b } else { a }.exp() / z).ln()
        };
        let want = (lp(0.3, 0.9, true) + lp(-1.2, 0.4, false)) / 2.0;
        assert!((eval_ce(&x, &y) as f64 - want).abs() <= 1e-6);
    }

    #[test]
    fn bad_targets_are_rejected() {
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(Tensor::zeros([1, 2, 2, 1, 1]));
        assert!(soft_dice_loss(&mut tape, v, &[0]).is_err());
        assert!(cross_entropy_loss(&mut tape, v, &[0, 2]).is_err());
        let three = tape.constant(Tensor::zeros([1, 3, 2, 1, 1]));
        assert!(cross_entropy_loss(&mut tape, three, &[0, 1]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn([2, 2, 2, 2, 1], |_| rng.random_range(-1.0..1.0));
        let y: Vec<u8> = (0..8).map(|i| u8::from(i % 3 != 1)).collect();
        for which in 0..2 {
            let run = |t: &Tensor| {
                let mut tape = Tape::new();
                let v = tape.leaf(t.clone().with_requires_grad(true));
                let l = if which == 0 {
                    cross_entropy_loss(&mut tape, v, &y).unwrap()
                } else {
                    let p = tape.softmax_channel(v).unwrap();
                    soft_dice_loss(&mut tape, p, &y).unwrap()
                };
                let value = tape.value(l).item().unwrap() as f64;
                tape.backward(l).unwrap();
                (value, tape.grad(v).unwrap().to_vec())
            };
            let (_, analytic) = run(&x);
            let coords: Vec<(usize, usize)> = (0..16).map(|i| (0, i)).collect();
            let numeric = finite_difference_grad(&mut [x.clone()], &coords, 1e-2, |p| run(&p[0]).0);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((*a as f64 - n).abs() < 1e-4, "{which}: {a} vs {n}");
            }
        }
    }
}
