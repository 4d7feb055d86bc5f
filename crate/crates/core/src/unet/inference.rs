use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::film::TimeVector;
use crate::metrics::SegmentationMask;
use crate::phantom::DceStudy;
use crate::pipeline::{canonical_triplet, crop, normalize_study};
use crate::tensor::{softmax_channel_values, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// window size; clipped to the volume along short axes
    pub patch: [usize; 3],
    /// fraction of a window shared with its neighbour
    pub overlap: f32,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            patch: [32; 3],
            overlap: 0.5,
        }
    }
}

/// Window origins along one axis; the last window is flush with the far edge.
pub fn window_starts(dim: usize, window: usize, overlap: f32) -> Vec<usize> {
    if window >= dim {
        return vec![0];
    }
    let step = ((window as f32 * (1.0 - overlap)).round() as usize).max(1);
    let mut starts: Vec<usize> = (0..dim - window).step_by(step).collect();
    starts.push(dim - window);
    starts
}

/// Softmax probabilities `[1, C, D, H, W]` averaged over overlapping windows.
pub fn sliding_window_probabilities(
    model: &ModelParams,
    input: &Tensor,
    times: TimeVector,
    cfg: &InferenceConfig,
) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 5 || shape[0] != 1 {
        return Err(Error::Config(format!("expected a 1 x C x D x H x W input, got {shape:?}")));
    }
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {}", cfg.overlap)));
    }
    let dims = [shape[2], shape[3], shape[4]];
    let window = [0, 1, 2].map(|a| cfg.patch[a].min(dims[a]));
    let in_c = shape[1];
    let classes = model.config().num_classes;
    let vox: usize = dims.iter().product();
    let mut sum = vec![0f32; classes * vox];
    let mut count = vec![0u32; vox];
    let starts = [0, 1, 2].map(|a| window_starts(dims[a], window[a], cfg.overlap));
    let wvox: usize = window.iter().product();
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                let patch = Tensor::new(
                    [1, in_c, window[0], window[1], window[2]],
                    crop(input.data(), dims, [z, y, x], window),
                )?;
                let probs = softmax_channel_values(&model.forward(&patch, &[times])?)?;
                for c in 0..classes {
                    let src = &probs.data()[c * wvox..(c + 1) * wvox];
                    let mut i = 0;
                    for dz in 0..window[0] {
                        for dy in 0..window[1] {
                            let row = ((z + dz) * dims[1] + y + dy) * dims[2] + x;
                            for dx in 0..window[2] {
                                sum[c * vox + row + dx] += src[i];
                                if c == 0 {
                                    count[row + dx] += 1;
                                }
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    for (c, chunk) in sum.chunks_mut(vox).enumerate() {
        assert!(c < classes);
        for (v, &n) in chunk.iter_mut().zip(&count) {
            *v /= n as f32;
        }
    }
    Ok(Tensor::new([1, classes, dims[0], dims[1], dims[2]], sum)?)
}

/// Tumor mask predicted from the canonical `(pre, first, second)` triplet of a raw study.
pub fn predict_mask(model: &ModelParams, study: &DceStudy, cfg: &InferenceConfig) -> Result<SegmentationMask> {
    study.validate()?;
    let normalized = normalize_study(study)?;
    let triplet = canonical_triplet(&normalized)?;
    let probs = sliding_window_probabilities(model, &triplet.to_tensor(study.dims)?, triplet.times, cfg)?;
    let vox = study.voxels();
    let p = probs.data();
    let mask = (0..vox).map(|v| u8::from(p[vox + v] > p[v])).collect();
    SegmentationMask::new(study.dims, study.spacing, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{build_model, ArchitectureConfig, Placement};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> ModelParams {
        build_model(&ArchitectureConfig {
            stage_channels: vec![2, 4],
            bottleneck_channels: 4,
            placement: Placement::All,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    fn input(dims: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 3, dims[0], dims[1], dims[2]], |_| rng.random())
    }

    #[test]
    fn starts_cover_the_axis() {
        assert_eq!(window_starts(8, 8, 0.5), vec![0]);
        assert_eq!(window_starts(4, 8, 0.5), vec![0]);
        assert_eq!(window_starts(16, 8, 0.5), vec![0, 4, 8]);
        assert_eq!(window_starts(20, 8, 0.5), vec![0, 4, 8, 12]);
        assert_eq!(window_starts(18, 8, 0.0), vec![0, 8, 10]);
    }

    #[test]
    fn single_window_equals_direct_forward() {
        let model = small_model();
        let x = input([8, 8, 8], 1);
        let t = TimeVector::new(0.0, 60.0, 200.0).unwrap();
        let probs = sliding_window_probabilities(&model, &x, t, &InferenceConfig::default()).unwrap();
        let direct = softmax_channel_values(&model.forward(&x, &[t]).unwrap()).unwrap();
        assert_eq!(probs, direct);
    }

    #[test]
    fn overlap_average_matches_enumeration() {
        let model = small_model();
        let dims = [8, 12, 8];
        let x = input(dims, 2);
        let t = TimeVector::new(0.0, 30.0, 90.0).unwrap();
        let cfg = InferenceConfig {
            patch: [8, 8, 8],
            overlap: 0.5,
        };
        let got = sliding_window_probabilities(&model, &x, t, &cfg).unwrap();
        // windows along height start at 0 and 4
        let mut want = vec![0f64; 2 * 8 * 12 * 8];
        let mut hits = vec![0f64; 8 * 12 * 8];
        for y0 in [0usize, 4] {
            let mut win = Vec::new();
            for c in 0..3 {
                for z in 0..8 {
                    for y in 0..8 {
                        for xx in 0..8 {
                            win.push(x.data()[c * 768 + (z * 12 + y0 + y) * 8 + xx]);
                        }
                    }
                }
            }
            let out = model.forward(&Tensor::new([1, 3, 8, 8, 8], win).unwrap(), &[t]).unwrap();
            for z in 0..8 {
                for y in 0..8 {
                    for xx in 0..8 {
                        let l = [0, 1].map(|c| out.data()[c * 512 + (z * 8 + y) * 8 + xx] as f64);
                        let m = l[0].max(l[1]);
                        let e = l.map(|v| (v - m).exp());
                        let dst = (z * 12 + y0 + y) * 8 + xx;
                        for c in 0..2 {
                            want[c * 768 + dst] += e[c] / (e[0] + e[1]);
                        }
                        hits[dst] += 1.0;
                    }
                }
            }
        }
        for (i, g) in got.data().iter().enumerate() {
            assert!((*g as f64 - want[i] / hits[i % 768]).abs() < 1e-5);
        }
    }

    #[test]
    fn indivisible_window_is_rejected() {
        let model = small_model();
        let x = input([6, 8, 8], 3);
        let t = TimeVector::new(0.0, 30.0, 90.0).unwrap();
        assert!(sliding_window_probabilities(&model, &x, t, &InferenceConfig::default()).is_err());
    }
}
