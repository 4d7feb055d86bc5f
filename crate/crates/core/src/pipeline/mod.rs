//! Intensity normalization, resampling, phase-triplet construction and patch sampling.

mod manifest;

pub use manifest::{load_split, make_manifest, Manifest, ManifestEntry, Split, SplitRatios, MANIFEST_FILE};

use rand::Rng;

use crate::film::TimeVector;
use crate::metrics::percentile_linear;
use crate::phantom::DceStudy;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Upper clamp applied after normalization.
pub const NORMALIZED_CLAMP: f32 = 1.5;

/// Pooled min / 99th-percentile normalization of every phase, clamped to `[0, 1.5]`.
pub fn normalize_study(study: &DceStudy) -> Result<DceStudy> {
    if study.phases.is_empty() {
        return Err(Error::Data(format!("{}: study has no phases", study.case_id)));
    }
    let pooled: Vec<f64> = study.phases.iter().flatten().map(|&v| v as f64).collect();
    let min = pooled.iter().copied().fold(f64::INFINITY, f64::min);
    let q99 = percentile_linear(&pooled, 99.0)?;
    if !(q99 > min) {
        return Err(Error::Data(format!(
            "{}: constant intensities (min = 99th percentile = {min})",
            study.case_id
        )));
    }
    let scale = 1.0 / (q99 - min);
    let mut out = study.clone();
    for phase in &mut out.phases {
        for v in phase.iter_mut() {
            *v = (((*v as f64 - min) * scale) as f32).clamp(0.0, NORMALIZED_CLAMP);
        }
    }
    Ok(out)
}

/// A 3D volume with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

/// Trilinear resampling onto `target_spacing` with voxel 0 fixed at the origin.
pub fn resample_volume(volume: &Volume, target_spacing: [f32; 3]) -> Result<Volume> {
    if volume.spacing.iter().chain(&target_spacing).any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!(
            "spacings must be positive: {:?} -> {target_spacing:?}",
            volume.spacing
        )));
    }
    if volume.data.len() != volume.dims.iter().product::<usize>() {
        return Err(Error::Data("volume data does not match dims".into()));
    }
    let mut dims = [0; 3];
    for a in 0..3 {
        let exact = volume.dims[a] as f64 * volume.spacing[a] as f64 / target_spacing[a] as f64;
        dims[a] = ((exact - 1e-6).ceil() as usize).max(1);
    }
    let ratio = [0, 1, 2].map(|a| target_spacing[a] as f64 / volume.spacing[a] as f64);
    let src = &volume.data;
    let [sd, sh, sw] = volume.dims;
    let at = |z: usize, y: usize, x: usize| src[(z * sh + y) * sw + x] as f64;
    let axis = |i: usize, a: usize, n: usize| {
        let c = (i as f64 * ratio[a]).min((n - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, c - lo as f64)
    };
    let mut data = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        let (z0, z1, fz) = axis(z, 0, sd);
        for y in 0..dims[1] {
            let (y0, y1, fy) = axis(y, 1, sh);
            for x in 0..dims[2] {
                let (x0, x1, fx) = axis(x, 2, sw);
                let lerp = |a: f64, b: f64, f: f64| a * (1.0 - f) + b * f;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                data.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz) as f32);
            }
        }
    }
    Ok(Volume {
        dims,
        spacing: target_spacing,
        data,
    })
}

/// Resample every phase (and the mask, by nearest neighbour) of a study.
pub fn resample_study(study: &DceStudy, target_spacing: [f32; 3]) -> Result<DceStudy> {
    let mut out = study.clone();
    let mut dims = study.dims;
    out.phases = study
        .phases
        .iter()
        .map(|p| {
            let v = resample_volume(
                &Volume {
                    dims: study.dims,
                    spacing: study.spacing,
                    data: p.clone(),
                },
                target_spacing,
            )?;
            dims = v.dims;
            Ok(v.data)
        })
        .collect::<Result<_>>()?;
    if let Some(mask) = &study.truth_mask {
        let v = resample_volume(
            &Volume {
                dims: study.dims,
                spacing: study.spacing,
                data: mask.iter().map(|&m| m as f32).collect(),
            },
            target_spacing,
        )?;
        out.truth_mask = Some(v.data.iter().map(|&m| u8::from(m >= 0.5)).collect());
    }
    out.dims = dims;
    out.spacing = target_spacing;
    Ok(out)
}

/// Pre-contrast, first post-contrast and one later phase of a study.
#[derive(Debug, Clone, Copy)]
pub struct Triplet<'a> {
    pub volumes: [&'a [f32]; 3],
    pub times: TimeVector,
    pub third_phase_index: usize,
}

impl Triplet<'_> {
    /// `[1, 3, D, H, W]` input tensor.
    pub fn to_tensor(&self, dims: [usize; 3]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(3 * self.volumes[0].len());
        for v in self.volumes {
            data.extend_from_slice(v);
        }
        Ok(Tensor::new([1, 3, dims[0], dims[1], dims[2]], data)?)
    }
}

/// One triplet per later phase `k >= 2`: `(phase 0, phase 1, phase k)`.
pub fn build_triplets(study: &DceStudy) -> Result<Vec<Triplet<'_>>> {
    if study.phases.len() < 3 || study.times.len() != study.phases.len() {
        return Err(Error::Data(format!(
            "{}: need at least 3 phases with acquisition times, got {}",
            study.case_id,
            study.phases.len()
        )));
    }
    (2..study.phases.len())
        .map(|k| {
            Ok(Triplet {
                volumes: [&study.phases[0], &study.phases[1], &study.phases[k]],
                times: TimeVector::new(study.times[0], study.times[1], study.times[k])?,
                third_phase_index: k,
            })
        })
        .collect()
}

/// Triplet used at inference: `[pre, first, second]`.
pub fn canonical_triplet(study: &DceStudy) -> Result<Triplet<'_>> {
    Ok(build_triplets(study)?.swap_remove(0))
}

/// Copy an axis-aligned box out of a `[channels, D, H, W]` buffer.
pub fn crop<T: Copy>(src: &[T], dims: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Vec<T> {
    let vox: usize = dims.iter().product();
    let channels = src.len() / vox;
    let mut out = Vec::with_capacity(channels * size.iter().product::<usize>());
    for c in 0..channels {
        for z in origin[0]..origin[0] + size[0] {
            for y in origin[1]..origin[1] + size[1] {
                let row = c * vox + (z * dims[1] + y) * dims[2] + origin[2];
                out.extend_from_slice(&src[row..row + size[2]]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `[3, pD, pH, pW]`
    pub channels: Tensor,
    pub times: TimeVector,
    /// one 0/1 byte per patch voxel
    pub label: Vec<u8>,
    pub case_id: String,
    pub third_phase_index: usize,
    pub origin: [usize; 3],
}

/// Crop a patch; with probability `fg_probability` it is centred on a random tumor voxel.
pub fn sample_patch(
    study: &DceStudy,
    triplet: &Triplet<'_>,
    patch_size: [usize; 3],
    fg_probability: f32,
    rng: &mut impl Rng,
) -> Result<TrainingSample> {
    let dims = study.dims;
    if (0..3).any(|a| patch_size[a] == 0 || patch_size[a] > dims[a]) {
        return Err(Error::Config(format!("patch {patch_size:?} does not fit volume {dims:?}")));
    }
    let mask = study
        .truth_mask
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{}: training needs a truth mask", study.case_id)))?;
    let max_origin = [0, 1, 2].map(|a| dims[a] - patch_size[a]);
    let want_fg = rng.random::<f32>() < fg_probability;
    let fg: Vec<usize> = if want_fg {
        mask.iter().enumerate().filter(|(_, &m)| m == 1).map(|(i, _)| i).collect()
    } else {
        Vec::new()
    };
    let origin = if fg.is_empty() {
        max_origin.map(|m| rng.random_range(0..=m))
    } else {
        let v = fg[rng.random_range(0..fg.len())];
        let center = [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]];
        [0, 1, 2].map(|a| center[a].saturating_sub(patch_size[a] / 2).min(max_origin[a]))
    };
    let mut channels = Vec::with_capacity(3 * patch_size.iter().product::<usize>());
    for v in triplet.volumes {
        channels.extend(crop(v, dims, origin, patch_size));
    }
    Ok(TrainingSample {
        channels: Tensor::new([3, patch_size[0], patch_size[1], patch_size[2]], channels)?,
        times: triplet.times,
        label: crop(mask, dims, origin, patch_size),
        case_id: study.case_id.clone(),
        third_phase_index: triplet.third_phase_index,
        origin,
    })
}
