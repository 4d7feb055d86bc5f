//! Finite-difference gradient suite over every recorded primitive and a small FiLM U-Net.
//!
//! Checks run in double precision so that a small central-difference step stays well above rounding noise.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::film::{self, FilmGeneratorParams, GeneratorVars, TimeVector};
use crate::tensor::{finite_difference_grad, GradCheckReport, Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use crate::train::{cross_entropy_loss, soft_dice_loss};
use crate::unet::{build_model, ArchitectureConfig, Placement};
use crate::Result;

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
/// Minimum number of model parameters sampled by the end-to-end check.
pub const MODEL_SAMPLE: usize = 120;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

type Forward = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Problem {
    inputs: Vec<Tensor<f64>>,
    forward: Forward,
    /// coordinates sampled per input tensor
    per_input: usize,
    /// total coordinates sampled across inputs; overrides `per_input`
    total: Option<usize>,
}

/// One registered check: the primitive it covers and how to build its problem.
pub struct GradCase {
    pub name: &'static str,
    build: fn(&mut ChaCha8Rng) -> Problem,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so no perturbation crosses a kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn problem(inputs: Vec<Tensor<f64>>, forward: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Problem {
    Problem {
        inputs,
        forward: Box::new(forward),
        per_input: 24,
        total: None,
    }
}

fn times() -> [TimeVector; 2] {
    [
        TimeVector::new(0.0, 75.0, 310.0).expect("valid"),
        TimeVector::new(0.0, 20.0, 140.0).expect("valid"),
    ]
}

/// Every check in the suite.
pub fn gradient_suite() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "conv3d",
            build: |rng| {
                let x = uniform(&[2, 2, 4, 4, 3], -1.0, 1.0, rng);
                let w = uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, rng);
                let b = uniform(&[3], -0.5, 0.5, rng);
                problem(vec![x, w, b], |t, v| Ok(t.conv3d(v[0], v[1], v[2], [1; 3], [1; 3])?))
            },
        },
        GradCase {
            name: "conv3d_strided",
            build: |rng| {
                let x = uniform(&[1, 2, 4, 6, 4], -1.0, 1.0, rng);
                let w = uniform(&[3, 2, 2, 2, 2], -0.5, 0.5, rng);
                let b = uniform(&[3], -0.5, 0.5, rng);
                problem(vec![x, w, b], |t, v| Ok(t.conv3d(v[0], v[1], v[2], [2; 3], [0; 3])?))
            },
        },
        GradCase {
            name: "conv_transpose3d",
            build: |rng| {
                let x = uniform(&[2, 3, 2, 3, 2], -1.0, 1.0, rng);
                let w = uniform(&[3, 2, 2, 2, 2], -0.5, 0.5, rng);
                let b = uniform(&[2], -0.5, 0.5, rng);
                problem(vec![x, w, b], |t, v| Ok(t.conv_transpose3d(v[0], v[1], v[2], [2; 3])?))
            },
        },
        GradCase {
            name: "instance_norm",
            build: |rng| {
                let x = uniform(&[2, 3, 3, 2, 2], -2.0, 2.0, rng);
                let g = uniform(&[3], 0.5, 1.5, rng);
                let s = uniform(&[3], -0.5, 0.5, rng);
                problem(vec![x, g, s], |t, v| Ok(t.instance_norm(v[0], v[1], v[2], 1e-5)?))
            },
        },
        GradCase {
            name: "leaky_relu",
            build: |rng| {
                let x = away_from_zero(&[2, 3, 2, 2, 2], rng);
                problem(vec![x], |t, v| Ok(t.leaky_relu(v[0], DEFAULT_LEAKY_SLOPE)))
            },
        },
        GradCase {
            name: "softmax_channel",
            build: |rng| {
                let x = uniform(&[2, 3, 2, 2, 2], -2.0, 2.0, rng);
                problem(vec![x], |t, v| Ok(t.softmax_channel(v[0])?))
            },
        },
        GradCase {
            name: "linear",
            build: |rng| {
                let x = uniform(&[3, 4], -1.0, 1.0, rng);
                let w = uniform(&[5, 4], -1.0, 1.0, rng);
                let b = uniform(&[5], -1.0, 1.0, rng);
                problem(vec![x, w, b], |t, v| Ok(t.linear(v[0], v[1], v[2])?))
            },
        },
        GradCase {
            name: "concat_channels",
            build: |rng| {
                let a = uniform(&[2, 2, 2, 2, 1], -1.0, 1.0, rng);
                let b = uniform(&[2, 3, 2, 2, 1], -1.0, 1.0, rng);
                problem(vec![a, b], |t, v| Ok(t.concat_channels(v[0], v[1])?))
            },
        },
        GradCase {
            name: "slice_last",
            build: |rng| {
                let x = uniform(&[3, 6], -1.0, 1.0, rng);
                problem(vec![x], |t, v| Ok(t.slice_last(v[0], 2, 3)?))
            },
        },
        GradCase {
            name: "add",
            build: |rng| {
                let a = uniform(&[2, 5], -1.0, 1.0, rng);
                let b = uniform(&[2, 5], -1.0, 1.0, rng);
                problem(vec![a, b], |t, v| Ok(t.add(v[0], v[1])?))
            },
        },
        GradCase {
            name: "mul",
            build: |rng| {
                let a = uniform(&[2, 5], -1.0, 1.0, rng);
                let b = uniform(&[2, 5], -1.0, 1.0, rng);
                problem(vec![a, b], |t, v| Ok(t.mul(v[0], v[1])?))
            },
        },
        GradCase {
            name: "scale",
            build: |rng| {
                let x = uniform(&[7], -1.0, 1.0, rng);
                problem(vec![x], |t, v| Ok(t.scale(v[0], -1.7)))
            },
        },
        GradCase {
            name: "add_scalar",
            build: |rng| {
                let x = uniform(&[7], -1.0, 1.0, rng);
                problem(vec![x], |t, v| Ok(t.add_scalar(v[0], 0.3)))
            },
        },
        GradCase {
            name: "sum",
            build: |rng| {
                let x = uniform(&[2, 3, 2], -1.0, 1.0, rng);
                problem(vec![x], |t, v| {
                    let s = t.sum(v[0]);
                    let m = t.mean(v[0]);
                    Ok(t.add(s, m)?)
                })
            },
        },
        GradCase {
            name: "film_generator",
            build: |rng| {
                let mut gen = FilmGeneratorParams::new(3, 4, rng);
                gen.w2 = uniform(&[6, 4], -1.0, 1.0, rng).cast();
                gen.b2 = uniform(&[6], -0.5, 0.5, rng).cast();
                // biases keep hidden pre-activations clear of the kink
                gen.b1 = Tensor::from_fn([4], |i| if i % 2 == 0 { 0.8 } else { -0.8 });
                gen.w1 = uniform(&[4, 3], -0.3, 0.3, rng).cast();
                let inputs = gen.tensors().map(Tensor::cast).to_vec();
                problem(inputs, |t, v| {
                    let (gamma, beta) = film::generate_on_tape(
                        t,
                        GeneratorVars {
                            w1: v[0],
                            b1: v[1],
                            w2: v[2],
                            b2: v[3],
                        },
                        &times(),
                    )?;
                    let gamma = t.scale(gamma, 0.7);
                    Ok(t.add(gamma, beta)?)
                })
            },
        },
        GradCase {
            name: "film_modulate",
            build: |rng| {
                let x = uniform(&[2, 3, 2, 2, 2], -1.0, 1.0, rng);
                let g = uniform(&[2, 3], 0.5, 1.5, rng);
                let b = uniform(&[2, 3], -0.5, 0.5, rng);
                problem(vec![x, g, b], |t, v| film::modulate_on_tape(t, v[0], v[1], v[2]))
            },
        },
        GradCase {
            name: "soft_dice_loss",
            build: |rng| {
                let p = uniform(&[2, 2, 2, 2, 2], 0.05, 0.95, rng);
                let target: Vec<u8> = (0..16).map(|_| rng.random_range(0..2)).collect();
                problem(vec![p], move |t, v| soft_dice_loss(t, v[0], &target))
            },
        },
        GradCase {
            name: "cross_entropy_loss",
            build: |rng| {
                let x = uniform(&[2, 2, 2, 2, 2], -2.0, 2.0, rng);
                let target: Vec<u8> = (0..16).map(|_| rng.random_range(0..2)).collect();
                problem(vec![x], move |t, v| cross_entropy_loss(t, v[0], &target))
            },
        },
        GradCase {
            name: "unet_film_all",
            build: |rng| {
                let mut model = build_model(&ArchitectureConfig {
                    stage_channels: vec![4, 8],
                    bottleneck_channels: 8,
                    placement: Placement::All,
                    seed: rng.random(),
                    ..Default::default()
                })
                .expect("valid architecture");
                // move generators off their identity initialization so every path carries gradient
                for p in model.params_mut() {
                    if p.name.ends_with(".w2") || p.name.ends_with(".b2") {
                        p.tensor = uniform(p.tensor.shape(), -0.3, 0.3, rng).cast();
                    }
                }
                let x = uniform(&[1, 3, 8, 8, 8], 0.0, 1.2, rng);
                let mut inputs: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor.cast()).collect();
                inputs.push(x);
                let t = TimeVector::new(0.0, 95.0, 260.0).expect("valid");
                let mut p = problem(inputs, move |tape, v| {
                    let (params, x) = v.split_at(v.len() - 1);
                    model.forward_on_tape(tape, params, x[0], &[t])
                });
                p.total = Some(MODEL_SAMPLE);
                p
            },
        },
    ]
}

/// Run one case. `tamper` scales the analytic gradient to emulate a broken backward rule.
pub fn run_case(case: &GradCase, seed: u64, tamper: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prob = (case.build)(&mut rng);
    run_problem(case.name, prob, &mut rng, tamper)
}

fn run_problem(name: &str, mut prob: Problem, rng: &mut ChaCha8Rng, tamper: bool) -> Result<GradCheckReport> {
    // probe the output shape, then fix a random projection
    let mut probe = Tape::<f64>::new();
    let vars: Vec<Var> = prob.inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = (prob.forward)(&mut probe, &vars)?;
    let out_shape = probe.value(out).shape().to_vec();
    let proj = uniform(&out_shape, -1.0, 1.0, rng);

    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = prob
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = (prob.forward)(&mut tape, &vars)?;
    let r = tape.constant(proj.clone());
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted);
    tape.backward(loss)?;

    let mut coords = Vec::new();
    match prob.total {
        Some(total) => {
            let sizes: Vec<usize> = prob.inputs.iter().map(Tensor::numel).collect();
            let all: usize = sizes.iter().sum();
            for flat in sample(rng, all, total.min(all)) {
                let (mut t, mut i) = (0, flat);
                while i >= sizes[t] {
                    i -= sizes[t];
                    t += 1;
                }
                coords.push((t, i));
            }
        }
        None => {
            for (t, x) in prob.inputs.iter().enumerate() {
                let n = x.numel();
                coords.extend(sample(rng, n, prob.per_input.min(n)).into_iter().map(|i| (t, i)));
            }
        }
    }
    coords.sort_unstable();
    let factor = if tamper { 1.05 } else { 1.0 };
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(t, i)| tape.grad(vars[t]).map_or(0.0, |g| g[i]) * factor)
        .collect();

    let forward = &prob.forward;
    let numeric = finite_difference_grad(&mut prob.inputs, &coords, FD_STEP, |inputs| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = forward(&mut tape, &vars).expect("forward succeeded once");
        let y = tape.value(out).data();
        y.iter().zip(proj.data()).map(|(&a, &b)| a * b).sum()
    });
    Ok(GradCheckReport::from_pairs(name, &analytic, &numeric, GRADCHECK_TOLERANCE))
}

/// Run the whole suite; `tamper` names a case whose analytic gradient is corrupted.
pub fn run_gradient_suite(seed: u64, tamper: Option<&str>) -> Result<Vec<GradCheckReport>> {
    gradient_suite()
        .iter()
        .map(|c| run_case(c, seed, tamper == Some(c.name)))
        .collect()
}
