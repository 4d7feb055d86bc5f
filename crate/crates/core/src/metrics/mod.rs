//! Overlap and surface-distance metrics plus paired significance testing.

mod report;
mod ttest;

pub use report::{
    evaluate_model, evaluate_predictions, read_report_csv, write_comparison_csv, write_report_csv, CaseMetrics,
    Comparison, MetricsReport, SIGNIFICANCE_LEVEL,
};
pub use ttest::{paired_ttest, regularized_incomplete_beta, student_t_two_tailed_p, TTestResult};

use crate::{Error, Result};

/// Binary 3D mask with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Data(format!("mask of {} voxels does not match dims {dims:?}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Data(format!("mask spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn empty(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        Self::new(dims, spacing, vec![0; dims.iter().product()]).expect("valid empty mask")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    /// Foreground voxels with a background face-neighbor or on the volume border.
    pub fn surface(&self) -> Vec<[usize; 3]> {
        let [d, h, w] = self.dims;
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if self.data[self.idx(z, y, x)] == 0 {
                        continue;
                    }
                    let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                    if border
                        || self.data[self.idx(z - 1, y, x)] == 0
                        || self.data[self.idx(z + 1, y, x)] == 0
                        || self.data[self.idx(z, y - 1, x)] == 0
                        || self.data[self.idx(z, y + 1, x)] == 0
                        || self.data[self.idx(z, y, x - 1)] == 0
                        || self.data[self.idx(z, y, x + 1)] == 0
                    {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

fn check_compatible(a: &SegmentationMask, b: &SegmentationMask) -> Result<()> {
    if a.dims != b.dims || a.spacing != b.spacing {
        return Err(Error::Data(format!(
            "masks differ in geometry: {:?}@{:?} vs {:?}@{:?}",
            a.dims, a.spacing, b.dims, b.spacing
        )));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks agree perfectly (1.0).
pub fn dice(a: &SegmentationMask, b: &SegmentationMask) -> Result<f64> {
    check_compatible(a, b)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Percentile `q` in `[0, 100]` with linear interpolation between order statistics.
pub fn percentile_linear(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metric("percentile of an empty list".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Metric("percentile of a list containing NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(percentile_sorted(&sorted, q))
}

pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * (q / 100.0).clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 10th percentile of per-case Dice scores.
pub fn dice10(scores: &[f64]) -> Result<f64> {
    percentile_linear(scores, 10.0)
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest marked site.
///
/// Separable lower-envelope transform, one pass per axis (depth, height, width).
pub fn squared_distance_transform(dims: [usize; 3], spacing: [f32; 3], sites: &[bool]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut f: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [h * w, w, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let step = strides[axis];
        let s = spacing[axis] as f64;
        let starts: Vec<usize> = (0..d * h * w)
            .filter(|&i| (i / step) % len == 0)
            .collect();
        for start in starts {
            line.clear();
            line.extend((0..len).map(|k| f[start + k * step]));
            envelope_1d(&line, s, &mut out);
            for k in 0..len {
                f[start + k * step] = out[k];
            }
        }
    }
    f
}

/// `out[q] = min_p (s * (q - p))^2 + f[p]` over finite `f[p]`.
fn envelope_1d(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let mut verts: Vec<usize> = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n + 1);
    let key = |p: usize| f[p] + (s * p as f64).powi(2);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&v) = verts.last() else {
                verts.push(q);
                bounds.clear();
                bounds.push(f64::NEG_INFINITY);
                bounds.push(f64::INFINITY);
                break;
            };
            let x = (key(q) - key(v)) / (2.0 * s * s * (q - v) as f64);
            if x <= bounds[verts.len() - 1] {
                verts.pop();
                bounds.pop();
                continue;
            }
            verts.push(q);
            *bounds.last_mut().unwrap() = x;
            bounds.push(f64::INFINITY);
            break;
        }
    }
    if verts.is_empty() {
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while bounds[k + 1] < q as f64 {
            k += 1;
        }
        let p = verts[k];
        *o = (s * (q as f64 - p as f64)).powi(2) + f[p];
    }
}

fn directed_surface_distances(from: &[[usize; 3]], to_sites: &[bool], dims: [usize; 3], spacing: [f32; 3]) -> Vec<f64> {
    let dt = squared_distance_transform(dims, spacing, to_sites);
    from.iter()
        .map(|&[z, y, x]| dt[(z * dims[1] + y) * dims[2] + x].sqrt())
        .collect()
}

/// 95th percentile (linear rule) of the pooled surface-to-surface distances in both directions.
///
/// Undefined, and reported as [`Error::Metric`], when either mask is empty.
pub fn hd95(a: &SegmentationMask, b: &SegmentationMask) -> Result<f64> {
    check_compatible(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metric("HD95 is undefined for an empty mask".into()));
    }
    let (sa, sb) = (a.surface(), b.surface());
    let sites = |pts: &[[usize; 3]]| {
        let mut m = vec![false; a.data.len()];
        for p in pts {
            m[a.idx(p[0], p[1], p[2])] = true;
        }
        m
    };
    let mut dists = directed_surface_distances(&sa, &sites(&sb), a.dims, a.spacing);
    dists.extend(directed_surface_distances(&sb, &sites(&sa), a.dims, a.spacing));
    percentile_linear(&dists, 95.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> SegmentationMask {
        let mut m = SegmentationMask::empty(dims, [1.0; 3]);
        for p in on {
            let i = m.idx(p[0], p[1], p[2]);
            m.data[i] = 1;
        }
        m
    }

    fn random_mask(seed: u64, dims: [usize; 3], spacing: [f32; 3]) -> SegmentationMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.random_range(0.05..0.5);
        let data = (0..dims.iter().product()).map(|_| u8::from(rng.random_bool(p))).collect();
        SegmentationMask::new(dims, spacing, data).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = mask([4, 4, 4], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask([4, 4, 4], &[[2, 2, 2]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let e = SegmentationMask::empty([4, 4, 4], [1.0; 3]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        // |A| = 4, |B| = 6, |A ∩ B| = 3
        let a = mask([4, 4, 4], &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [3, 3, 3]]);
        let b = mask([4, 4, 4], &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [1, 0, 0], [1, 0, 1], [1, 0, 2]]);
        assert!((dice(&a, &b).unwrap() - 0.6).abs() < 1e-12);
        let c = SegmentationMask::empty([4, 4, 5], [1.0; 3]);
        assert!(dice(&a, &c).is_err());
    }

    #[test]
    fn dice10_cases() {
        assert_eq!(dice10(&[0.7; 9]).unwrap(), 0.7);
        assert!((dice10(&[0.0, 1.0]).unwrap() - 0.1).abs() < 1e-12);
        assert!(dice10(&[]).is_err());
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let d10 = dice10(&scores).unwrap();
        assert!(scores.iter().filter(|&&s| s >= d10).count() >= 90);
    }

    #[test]
    fn hd95_simple_cases() {
        let a = mask([8, 8, 8], &[[2, 2, 2], [2, 2, 3], [3, 2, 2]]);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        let p = mask([8, 8, 8], &[[1, 4, 4]]);
        let q = mask([8, 8, 8], &[[4, 4, 4]]);
        assert_eq!(hd95(&p, &q).unwrap(), 3.0);
        let e = SegmentationMask::empty([8, 8, 8], [1.0; 3]);
        assert!(matches!(hd95(&p, &e), Err(Error::Metric(_))));
    }

    #[test]
    fn surface_of_solid_cube_excludes_interior() {
        let mut pts = Vec::new();
        for z in 1..6 {
            for y in 1..6 {
                for x in 1..6 {
                    pts.push([z, y, x]);
                }
            }
        }
        let m = mask([7, 7, 7], &pts);
        assert_eq!(m.surface().len(), 125 - 27);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        for seed in 0..10 {
            let spacing = [0.8, 1.0, 1.7];
            let m = random_mask(seed, [5, 6, 7], spacing);
            let sites: Vec<bool> = m.data.iter().map(|&v| v == 1).collect();
            let dt = squared_distance_transform(m.dims, spacing, &sites);
            let on: Vec<[usize; 3]> = (0..5)
                .flat_map(|z| (0..6).flat_map(move |y| (0..7).map(move |x| [z, y, x])))
                .filter(|p| m.data[m.idx(p[0], p[1], p[2])] == 1)
                .collect();
            for z in 0..5 {
                for y in 0..6 {
                    for x in 0..7 {
                        let want = on
                            .iter()
                            .map(|p| {
                                let dz = (z as f64 - p[0] as f64) * spacing[0] as f64;
                                let dy = (y as f64 - p[1] as f64) * spacing[1] as f64;
                                let dx = (x as f64 - p[2] as f64) * spacing[2] as f64;
                                dz * dz + dy * dy + dx * dx
                            })
                            .fold(f64::INFINITY, f64::min);
                        let got = dt[m.idx(z, y, x)];
                        assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
                    }
                }
            }
        }
    }

    fn translate(m: &SegmentationMask, off: [usize; 3], dims: [usize; 3]) -> SegmentationMask {
        let mut out = SegmentationMask::empty(dims, m.spacing);
        let [d, h, w] = m.dims;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = m.data[m.idx(z, y, x)];
                    let i = out.idx(z + off[0], y + off[1], x + off[2]);
                    out.data[i] = v;
                }
            }
        }
        out
    }

    #[test]
    fn translation_invariance() {
        let a = random_mask(21, [6, 6, 6], [1.0; 3]);
        let b = random_mask(22, [6, 6, 6], [1.0; 3]);
        // embed in a larger grid so border surface voxels stay borders only where the mask touches
        let big = [10, 10, 10];
        let (a0, b0) = (translate(&a, [1, 1, 1], big), translate(&b, [1, 1, 1], big));
        let (a1, b1) = (translate(&a, [3, 2, 4], big), translate(&b, [3, 2, 4], big));
        assert_eq!(dice(&a0, &b0).unwrap(), dice(&a1, &b1).unwrap());
        assert_eq!(hd95(&a0, &b0).unwrap(), hd95(&a1, &b1).unwrap());
    }

    proptest! {
        #[test]
        fn symmetric_and_spacing_scaled(seed_a in 0u64..1000, seed_b in 1000u64..2000, k in 1u32..4) {
            let a = random_mask(seed_a, [6, 5, 7], [1.0; 3]);
            let b = random_mask(seed_b, [6, 5, 7], [1.0; 3]);
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            let h = hd95(&a, &b).unwrap();
            prop_assert_eq!(h, hd95(&b, &a).unwrap());
            let s = 2f32.powi(k as i32 - 2);
            let scale = |m: &SegmentationMask| SegmentationMask::new(m.dims, [s; 3], m.data.clone()).unwrap();
            prop_assert_eq!(hd95(&scale(&a), &scale(&b)).unwrap(), h * s as f64);
            prop_assert_eq!(dice(&scale(&a), &scale(&b)).unwrap(), dice(&a, &b).unwrap());
        }
    }
}
