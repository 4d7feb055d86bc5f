//! Acquisition-time conditioning.
//!
//! A two-layer generator maps the time vector `[t1, t2, t3]` of the three input
//! phases to `2C` numbers; the first `C` give the per-channel scale and the last
//! `C` the per-channel shift applied to a `C`-channel feature map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Backward, BackwardCtx, Real, Tape, Tensor, TensorError, Var, DEFAULT_LEAKY_SLOPE};
use crate::{Error, Result};

/// Times are divided by this before entering a generator.
pub const TIME_SCALE_SECONDS: f32 = 600.0;
pub const DEFAULT_HIDDEN: usize = 16;

/// Acquisition times (seconds since injection) of the pre-contrast, first
/// post-contrast and selected later phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeVector {
    pub t1: f32,
    pub t2: f32,
    pub t3: f32,
}

impl TimeVector {
    pub fn new(t1: f32, t2: f32, t3: f32) -> Result<Self> {
        let t = Self { t1, t2, t3 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { t1, t2, t3 } = *self;
        if !(t1.is_finite() && t2.is_finite() && t3.is_finite()) {
            return Err(Error::InvalidTimes(format!("non-finite times {self:?}")));
        }
        if t1 < 0.0 || t1 > t2 || t2 > t3 {
            return Err(Error::InvalidTimes(format!("expected 0 <= t1 <= t2 <= t3, got {self:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f32; 3] {
        [self.t1, self.t2, self.t3]
    }

    pub fn normalized(&self) -> [f32; 3] {
        self.as_array().map(|t| t / TIME_SCALE_SECONDS)
    }
}

/// Weights of one two-layer generator targeting a `channels`-channel feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmGeneratorParams {
    /// `[hidden, 3]`
    pub w1: Tensor,
    /// `[hidden]`
    pub b1: Tensor,
    /// `[2C, hidden]`
    pub w2: Tensor,
    /// `[2C]`
    pub b2: Tensor,
}

impl FilmGeneratorParams {
    /// He-initialized hidden layer, zero output layer (identity modulation).
    pub fn new(channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0f32, (2.0f32 / 3.0).sqrt()).expect("valid std");
        Self {
            w1: Tensor::from_fn([hidden, 3], |_| normal.sample(rng)),
            b1: Tensor::zeros([hidden]),
            w2: Tensor::zeros([2 * channels, hidden]),
            b2: Tensor::zeros([2 * channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.b2.numel() / 2
    }

    pub fn hidden(&self) -> usize {
        self.b1.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, two_c) = (self.hidden(), self.b2.numel());
        let ok = self.w1.shape() == [h, 3]
            && self.w2.shape() == [two_c, h]
            && two_c % 2 == 0
            && self.b1.rank() == 1
            && self.b2.rank() == 1;
        if !ok {
            return Err(Error::Config(format!(
                "malformed generator: w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            )));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilmCoefficients {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Tape handles of one generator's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GeneratorVars {
    pub fn bind<T: Real>(tape: &mut Tape<T>, params: &FilmGeneratorParams, requires_grad: bool) -> Self {
        let mut leaf = |t: &Tensor| tape.leaf(t.cast::<T>().with_requires_grad(requires_grad));
        Self {
            w1: leaf(&params.w1),
            b1: leaf(&params.b1),
            w2: leaf(&params.w2),
            b2: leaf(&params.b2),
        }
    }
}

/// Records the generator for a batch of time vectors; returns `(gamma, beta)`, each `[N, C]`.
pub fn generate_on_tape<T: Real>(tape: &mut Tape<T>, gen: GeneratorVars, times: &[TimeVector]) -> Result<(Var, Var)> {
    if times.is_empty() {
        return Err(Error::InvalidTimes("empty batch of time vectors".into()));
    }
    let input: Vec<T> = times.iter().flat_map(|t| t.normalized()).map(|v| T::of(v as f64)).collect();
    let x = tape.constant(Tensor::new([times.len(), 3], input)?);
    let h = tape.linear(x, gen.w1, gen.b1)?;
    let h = tape.leaky_relu(h, DEFAULT_LEAKY_SLOPE);
    let out = tape.linear(h, gen.w2, gen.b2)?;
    let channels = tape.value(out).shape()[1] / 2;
    let raw_gamma = tape.slice_last(out, 0, channels)?;
    let gamma = tape.add_scalar(raw_gamma, 1.0);
    let beta = tape.slice_last(out, channels, channels)?;
    Ok((gamma, beta))
}

/// Evaluate a generator for a single time vector.
pub fn generate_coefficients(t: &TimeVector, params: &FilmGeneratorParams) -> Result<FilmCoefficients> {
    params.validate()?;
    let mut tape = Tape::new();
    let vars = GeneratorVars::bind(&mut tape, params, false);
    let (g, b) = generate_on_tape(&mut tape, vars, std::slice::from_ref(t))?;
    Ok(FilmCoefficients {
        gamma: tape.value(g).data().to_vec(),
        beta: tape.value(b).data().to_vec(),
    })
}

struct ModulateFn {
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl<T: Real> Backward<T> for ModulateFn {
    fn name(&self) -> &'static str {
        "film_modulate"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, gamma) = (ctx.input(0).data(), ctx.input(1).data());
        let g = ctx.grad_output();
        let v = self.spatial;
        let rows = self.batch * self.channels;
        let gx = ctx.needs_grad(0).then(|| {
            let mut gx = vec![T::zero(); g.len()];
            for r in 0..rows {
                for i in r * v..(r + 1) * v {
                    gx[i] = g[i] * gamma[r];
                }
            }
            gx
        });
        let ggamma = ctx.needs_grad(1).then(|| {
            (0..rows)
                .map(|r| {
                    T::of((r * v..(r + 1) * v).map(|i| g[i].f64() * x[i].f64()).sum::<f64>())
                })
                .collect()
        });
        let gbeta = ctx.needs_grad(2).then(|| {
            (0..rows)
                .map(|r| T::of(g[r * v..(r + 1) * v].iter().map(|a| a.f64()).sum::<f64>()))
                .collect()
        });
        vec![gx, ggamma, gbeta]
    }
}

fn check_coeff_shape<T: Real>(x: &Tensor<T>, coeff: &Tensor<T>) -> Result<(), TensorError> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if coeff.rank() != 2 || coeff.shape()[1] != c {
        return Err(TensorError::ShapeMismatch {
            op: "film_modulate",
            axis: "channels",
            expected: x.shape()[1],
            found: coeff.shape().last().copied().unwrap_or(0),
        });
    }
    if coeff.shape()[0] != n {
        return Err(TensorError::ShapeMismatch {
            op: "film_modulate",
            axis: "batch",
            expected: n,
            found: coeff.shape()[0],
        });
    }
    Ok(())
}

/// `gamma[n, c] * x + beta[n, c]` over every voxel of channel `c` of sample `n`.
pub fn modulate_on_tape<T: Real>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let (xt, gt, bt) = (tape.value(x), tape.value(gamma), tape.value(beta));
    if xt.rank() < 3 {
        return Err(TensorError::Rank {
            op: "film_modulate",
            expected: 5,
            found: xt.shape().to_vec(),
        }
        .into());
    }
    check_coeff_shape(xt, gt)?;
    check_coeff_shape(xt, bt)?;
    let (n, c, v) = (xt.shape()[0], xt.shape()[1], xt.spatial_len());
    let mut data = vec![T::zero(); xt.numel()];
    for r in 0..n * c {
        let (g, b) = (gt.data()[r], bt.data()[r]);
        for i in r * v..(r + 1) * v {
            data[i] = g * xt.data()[i] + b;
        }
    }
    let out = Tensor::new(xt.shape().to_vec(), data)?;
    Ok(tape.apply(
        ModulateFn {
            batch: n,
            channels: c,
            spatial: v,
        },
        &[x, gamma, beta],
        out,
    ))
}

/// Apply one set of coefficients to every sample of `x`.
pub fn modulate(x: &Tensor, coeffs: &FilmCoefficients) -> Result<Tensor> {
    if coeffs.gamma.len() != coeffs.beta.len() {
        return Err(Error::Config("gamma and beta lengths differ".into()));
    }
    let n = x.shape().first().copied().unwrap_or(1);
    let c = coeffs.gamma.len();
    let tile = |v: &[f32]| Tensor::new([n, c], v.iter().copied().cycle().take(n * c).collect());
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(tile(&coeffs.gamma)?);
    let b = tape.constant(tile(&coeffs.beta)?);
    let y = modulate_on_tape(&mut tape, xv, g, b)?;
    Ok(tape.into_value(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn time_vector_invariants() {
        assert!(TimeVector::new(0.0, 90.0, 180.0).is_ok());
        assert!(TimeVector::new(0.0, 200.0, 180.0).is_err());
        assert!(TimeVector::new(-1.0, 0.0, 1.0).is_err());
        assert!(TimeVector::new(0.0, f32::NAN, 1.0).is_err());
    }

    #[test]
    fn zero_output_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = FilmGeneratorParams::new(5, DEFAULT_HIDDEN, &mut rng);
        let c = generate_coefficients(&TimeVector::new(0.0, 75.0, 300.0).unwrap(), &p).unwrap();
        assert_eq!(c.gamma, vec![1.0; 5]);
        assert_eq!(c.beta, vec![0.0; 5]);
        let x = random_map(&[1, 5, 2, 3, 2], 1);
        assert_eq!(modulate(&x, &c).unwrap(), x);
    }

    #[test]
    fn hand_evaluated_two_layer_map() {
        // hidden = 1, C = 1
        let p = FilmGeneratorParams {
            w1: Tensor::new([1, 3], vec![0.5, -1.0, 2.0]).unwrap(),
            b1: Tensor::new([1], vec![-0.1]).unwrap(),
            w2: Tensor::new([2, 1], vec![0.3, -0.7]).unwrap(),
            b2: Tensor::new([2], vec![0.05, 0.2]).unwrap(),
        };
        let t = TimeVector::new(0.0, 90.0, 180.0).unwrap();
        let c = generate_coefficients(&t, &p).unwrap();
        let x = [0.0f64, 90.0 / 600.0, 180.0 / 600.0];
        let pre = 0.5 * x[0] - 1.0 * x[1] + 2.0 * x[2] - 0.1;
        let h = if pre >= 0.0 { pre } else { 0.01 * pre };
        let gamma = 1.0 + (0.3 * h + 0.05);
        let beta = -0.7 * h + 0.2;
        assert!((c.gamma[0] as f64 - gamma).abs() <= 1e-6);
        assert!((c.beta[0] as f64 - beta).abs() <= 1e-6);
    }

    #[test]
    fn distinct_times_give_distinct_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = FilmGeneratorParams::new(4, DEFAULT_HIDDEN, &mut rng);
        let normal = Normal::new(0.0f32, 0.5).unwrap();
        p.w2.data_mut().iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        let a = generate_coefficients(&TimeVector::new(0.0, 60.0, 120.0).unwrap(), &p).unwrap();
        let b = generate_coefficients(&TimeVector::new(0.0, 90.0, 400.0).unwrap(), &p).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn modulate_elementwise_oracle() {
        let x = random_map(&[1, 2, 2, 2, 2], 3);
        let c = FilmCoefficients {
            gamma: vec![2.0, -1.0],
            beta: vec![0.5, 0.0],
        };
        let y = modulate(&x, &c).unwrap();
        for (i, (&yv, &xv)) in y.data().iter().zip(x.data()).enumerate() {
            let ch = i / 8;
            assert_eq!(yv, c.gamma[ch] * xv + c.beta[ch]);
        }
    }

    #[test]
    fn pure_shift() {
        let x = random_map(&[1, 2, 2, 2, 1], 4);
        let c = FilmCoefficients {
            gamma: vec![0.0, 0.0],
            beta: vec![1.25, -3.0],
        };
        let y = modulate(&x, &c).unwrap();
        assert!(y.data()[..4].iter().all(|&v| v == 1.25));
        assert!(y.data()[4..].iter().all(|&v| v == -3.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = random_map(&[1, 3, 2, 2, 2], 5);
        let c = FilmCoefficients {
            gamma: vec![1.0; 2],
            beta: vec![0.0; 2],
        };
        assert!(matches!(
            modulate(&x, &c),
            Err(Error::Tensor(TensorError::ShapeMismatch { axis: "channels", .. }))
        ));
    }

    #[test]
    fn composition_of_modulations() {
        let x = random_map(&[1, 3, 2, 2, 2], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut coeffs = || FilmCoefficients {
            gamma: (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
            beta: (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let (c1, c2) = (coeffs(), coeffs());
        let twice = modulate(&modulate(&x, &c1).unwrap(), &c2).unwrap();
        let fused = FilmCoefficients {
            gamma: c1.gamma.iter().zip(&c2.gamma).map(|(a, b)| a * b).collect(),
            beta: (0..3).map(|i| c2.gamma[i] * c1.beta[i] + c2.beta[i]).collect(),
        };
        let once = modulate(&x, &fused).unwrap();
        assert!(twice.max_abs_diff(&once) <= 1e-6 * 8.0);
    }

    #[test]
    fn gamma_gradient_is_upstream_times_input() {
        let x0 = random_map(&[1, 2, 2, 2, 2], 8);
        let up = random_map(&[1, 2, 2, 2, 2], 9);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let g = tape.leaf(Tensor::new([1, 2], vec![0.7, -1.3]).unwrap().with_requires_grad(true));
        let b = tape.leaf(Tensor::zeros([1, 2]).with_requires_grad(true));
        let y = modulate_on_tape(&mut tape, x, g, b).unwrap();
        let u = tape.constant(up.clone());
        let prod = tape.mul(y, u).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        for c in 0..2 {
            let want: f32 = (c * 8..(c + 1) * 8).map(|i| up.data()[i] * x0.data()[i]).sum();
            assert!((tape.grad(g).unwrap()[c] - want).abs() <= 1e-5);
        }
    }
}
