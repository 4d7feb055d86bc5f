//! Synthetic dynamic contrast-enhanced studies with known tumor masks.
//!
//! Three tissue classes share a smooth pre-contrast baseline and differ in how
//! they take up contrast: tumors wash in fast and wash out, benign parenchyma
//! and fat enhance slowly and persistently. Benign masses share the tumors' size
//! and shape and follow the tumor curve slowed down threefold, so a mass imaged late
//! looks like a tumor imaged early unless the acquisition times are known.

mod io;

pub use io::{read_study, write_study, StudySidecar, STUDY_FORMAT_VERSION};

use std::collections::BTreeMap;
use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::SegmentationMask;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Fat,
    Benign,
    Tumor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticParams {
    pub amplitude: f32,
    /// per second
    pub uptake_rate: f32,
    /// per second; zero for persistent enhancement
    pub washout_rate: f32,
}

impl KineticParams {
    pub const fn new(amplitude: f32, uptake_rate: f32, washout_rate: f32) -> Self {
        Self {
            amplitude,
            uptake_rate,
            washout_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.uptake_rate > 0.0 && self.washout_rate >= 0.0) {
            return Err(Error::Config(format!("invalid kinetic parameters {self:?}")));
        }
        Ok(())
    }

    /// Time of peak enhancement, `None` for persistent curves.
    pub fn peak_time(&self) -> Option<f32> {
        (self.washout_rate > 0.0).then(|| (1.0 + self.uptake_rate / self.washout_rate).ln() / self.uptake_rate)
    }
}

pub const TUMOR_KINETICS: KineticParams = KineticParams::new(1.0, 0.05, 0.002);
pub const BENIGN_KINETICS: KineticParams = KineticParams::new(0.7, 0.008, 0.0);
pub const FAT_KINETICS: KineticParams = KineticParams::new(0.05, 0.005, 0.0);
pub const MASS_KINETICS: KineticParams = KineticParams::new(1.0, 0.05 / 3.0, 0.002 / 3.0);

/// `amplitude * (1 - exp(-uptake * t)) * exp(-washout * t)`
pub fn enhancement_curve(params: &KineticParams, t: f32) -> f32 {
    params.amplitude * (1.0 - (-params.uptake_rate * t).exp()) * (-params.washout_rate * t).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub volume_size: [usize; 3],
    /// mm
    pub spacing: [f32; 3],
    pub num_lesions: usize,
    /// lesion-sized masses with benign kinetics, drawn from the same radius range
    pub num_benign_masses: usize,
    /// mm
    pub lesion_radius_range: (f32, f32),
    /// seconds, starting at 0
    pub acquisition_schedule: Vec<f32>,
    pub noise_sigma: f32,
    pub tissue_params: BTreeMap<Tissue, KineticParams>,
    /// enhancement of benign masses; their voxels are labelled benign
    pub mass_kinetics: KineticParams,
    /// pre-contrast signal per tissue
    pub baseline_intensity: BTreeMap<Tissue, f32>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            volume_size: [48, 48, 48],
            spacing: [1.0, 1.0, 1.0],
            num_lesions: 1,
            num_benign_masses: 2,
            lesion_radius_range: (4.0, 8.0),
            acquisition_schedule: vec![0.0, 90.0, 180.0, 270.0],
            noise_sigma: 0.02,
            tissue_params: BTreeMap::from([
                (Tissue::Fat, FAT_KINETICS),
                (Tissue::Benign, BENIGN_KINETICS),
                (Tissue::Tumor, TUMOR_KINETICS),
            ]),
            mass_kinetics: MASS_KINETICS,
            baseline_intensity: BTreeMap::from([(Tissue::Fat, 0.35), (Tissue::Benign, 0.2), (Tissue::Tumor, 0.2)]),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn kinetics(&self, tissue: Tissue) -> KineticParams {
        self.tissue_params[&tissue]
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.acquisition_schedule;
        if s.len() < 3 || s[0] != 0.0 || s.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(format!(
                "schedule must start at 0, be strictly increasing and have at least 3 phases: {s:?}"
            )));
        }
        if self.volume_size.contains(&0) || self.spacing.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("volume size and spacing must be positive".into()));
        }
        for t in [Tissue::Fat, Tissue::Benign, Tissue::Tumor] {
            self.tissue_params
                .get(&t)
                .ok_or_else(|| Error::Config(format!("missing kinetics for {t:?}")))?
                .validate()?;
            if !self.baseline_intensity.contains_key(&t) {
                return Err(Error::Config(format!("missing baseline intensity for {t:?}")));
            }
        }
        self.mass_kinetics.validate()?;
        let (rmin, rmax) = self.lesion_radius_range;
        let extent = (0..3)
            .map(|a| self.volume_size[a] as f32 * self.spacing[a])
            .fold(f32::INFINITY, f32::min);
        if self.num_lesions + self.num_benign_masses > 0 && !(rmin > 0.0 && rmin <= rmax && 2.0 * rmax + 2.0 < extent) {
            return Err(Error::Config(format!(
                "lesion radii {:?} do not fit a {extent} mm volume",
                self.lesion_radius_range
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Tissue metadata carried alongside a generated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueMetadata {
    pub kinetics: BTreeMap<Tissue, KineticParams>,
    pub baseline_intensity: BTreeMap<Tissue, f32>,
    pub noise_sigma: f32,
    pub num_lesions: usize,
    pub num_benign_masses: usize,
    pub mass_kinetics: KineticParams,
}

/// Ordered phases of one examination. Volumes are `[D, H, W]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DceStudy {
    pub case_id: String,
    pub dims: [usize; 3],
    /// mm
    pub spacing: [f32; 3],
    /// seconds since injection, aligned with `phases`
    pub times: Vec<f32>,
    pub phases: Vec<Vec<f32>>,
    pub truth_mask: Option<Vec<u8>>,
    pub tissue: Option<TissueMetadata>,
}

impl DceStudy {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.voxels();
        if self.phases.len() != self.times.len() || self.phases.len() < 3 {
            return Err(Error::Data(format!(
                "{}: need >= 3 phases with one time each, got {} phases / {} times",
                self.case_id,
                self.phases.len(),
                self.times.len()
            )));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data(format!("{}: times not strictly increasing", self.case_id)));
        }
        if self.phases.iter().any(|p| p.len() != n) || self.truth_mask.as_ref().is_some_and(|m| m.len() != n) {
            return Err(Error::Data(format!("{}: volumes do not match dims {:?}", self.case_id, self.dims)));
        }
        Ok(())
    }

    pub fn truth(&self) -> Option<SegmentationMask> {
        self.truth_mask
            .as_ref()
            .map(|m| SegmentationMask::new(self.dims, self.spacing, m.clone()).expect("validated mask"))
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f32; 3],
    radii: [f32; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f32; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f32>() <= 1.0
    }

    fn max_radius(&self) -> f32 {
        self.radii.iter().copied().fold(0.0, f32::max)
    }
}

const PLACEMENT_RETRIES: usize = 1000;

/// Tumors first, then benign masses; no two ellipsoids touch.
fn place_lesions(spec: &PhantomSpec, extent: [f32; 3], rng: &mut ChaCha8Rng) -> Result<Vec<Ellipsoid>> {
    let (rmin, rmax) = spec.lesion_radius_range;
    let total = spec.num_lesions + spec.num_benign_masses;
    let mut lesions: Vec<Ellipsoid> = Vec::with_capacity(total);
    for k in 0..total {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let radii = [0; 3].map(|_| rng.random_range(rmin..=rmax));
            // keep lesions inside the central part of the volume, where the parenchyma sits
            let mut center = [0.0; 3];
            for a in 0..3 {
                let lo = (radii[a] + 1.0).max(0.2 * extent[a]);
                let hi = (extent[a] - radii[a] - 1.0).min(0.8 * extent[a]);
                center[a] = if hi > lo { rng.random_range(lo..hi) } else { 0.5 * extent[a] };
            }
            let cand = Ellipsoid { center, radii };
            let clear = lesions.iter().all(|o| {
                let d = (0..3).map(|a| (cand.center[a] - o.center[a]).powi(2)).sum::<f32>().sqrt();
                d > cand.max_radius() + o.max_radius() + 1.0
            });
            if clear {
                lesions.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Phantom(format!(
                "could not place lesion {} of {} without overlap after {PLACEMENT_RETRIES} attempts",
                k + 1,
                total
            )));
        }
    }
    Ok(lesions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Tissue(Tissue),
    Mass,
}

impl Region {
    fn tissue(self) -> Tissue {
        match self {
            Region::Tissue(t) => t,
            Region::Mass => Tissue::Benign,
        }
    }
}

/// Region per voxel and smooth baseline-gain field for a spec.
fn tissue_layout(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<Region>, Vec<f32>)> {
    let [d, h, w] = spec.volume_size;
    let extent = [0, 1, 2].map(|a| spec.volume_size[a] as f32 * spec.spacing[a]);
    let gland: Vec<Ellipsoid> = (0..3)
        .map(|_| {
            let center = [0, 1, 2].map(|a| extent[a] * rng.random_range(0.4..0.6));
            let radii = [0, 1, 2].map(|a| extent[a] * rng.random_range(0.22..0.36));
            Ellipsoid { center, radii }
        })
        .collect();
    let mut lesions = place_lesions(spec, extent, rng)?;
    let masses = lesions.split_off(spec.num_lesions);
    let waves: Vec<([f32; 3], f32)> = (0..3)
        .map(|_| {
            let freq = [0; 3].map(|_| rng.random_range(0.5..1.5) * 2.0 * PI);
            (freq, rng.random_range(0.0..2.0 * PI))
        })
        .collect();

    let mut labels = Vec::with_capacity(d * h * w);
    let mut gain = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [
                    (z as f32 + 0.5) * spec.spacing[0],
                    (y as f32 + 0.5) * spec.spacing[1],
                    (x as f32 + 0.5) * spec.spacing[2],
                ];
                let region = if lesions.iter().any(|l| l.contains(p)) {
                    Region::Tissue(Tissue::Tumor)
                } else if masses.iter().any(|m| m.contains(p)) {
                    Region::Mass
                } else if gland.iter().any(|g| g.contains(p)) {
                    Region::Tissue(Tissue::Benign)
                } else {
                    Region::Tissue(Tissue::Fat)
                };
                labels.push(region);
                let field: f32 = waves
                    .iter()
                    .map(|(f, ph)| ((0..3).map(|a| f[a] * p[a] / extent[a]).sum::<f32>() + ph).sin())
                    .sum::<f32>()
                    / waves.len() as f32;
                gain.push(1.0 + 0.1 * field);
            }
        }
    }
    Ok((labels, gain))
}

/// Deterministic study from a spec; the case id is derived from the seed.
pub fn generate_study(spec: &PhantomSpec) -> Result<DceStudy> {
    spec.validate()?;
    let mut geo_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let (labels, gain) = tissue_layout(spec, &mut geo_rng)?;
    let baseline: Vec<f32> = labels
        .iter()
        .zip(&gain)
        .map(|(r, g)| spec.baseline_intensity[&r.tissue()] * g)
        .collect();
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0f32, spec.noise_sigma).expect("sigma > 0"));
    let phases = spec
        .acquisition_schedule
        .iter()
        .map(|&t| {
            let enh: BTreeMap<Tissue, f32> = spec
                .tissue_params
                .iter()
                .map(|(k, p)| (*k, enhancement_curve(p, t)))
                .collect();
            let mass = enhancement_curve(&spec.mass_kinetics, t);
            labels
                .iter()
                .zip(&baseline)
                .map(|(region, &b)| {
                    let v = b + match region {
                        Region::Tissue(t) => enh[t],
                        Region::Mass => mass,
                    };
                    match &noise {
                        Some(n) => v + n.sample(&mut noise_rng),
                        None => v,
                    }
                })
                .collect()
        })
        .collect();
    let mask = labels.iter().map(|&r| u8::from(r == Region::Tissue(Tissue::Tumor))).collect();
    Ok(DceStudy {
        case_id: format!("case_{:016x}", spec.seed),
        dims: spec.volume_size,
        spacing: spec.spacing,
        times: spec.acquisition_schedule.clone(),
        phases,
        truth_mask: Some(mask),
        tissue: Some(TissueMetadata {
            kinetics: spec.tissue_params.clone(),
            baseline_intensity: spec.baseline_intensity.clone(),
            noise_sigma: spec.noise_sigma,
            num_lesions: spec.num_lesions,
            num_benign_masses: spec.num_benign_masses,
            mass_kinetics: spec.mass_kinetics,
        }),
    })
}

/// How acquisition schedules vary between cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulePolicy {
    /// When false every case reuses the template schedule.
    pub enabled: bool,
    pub min_phases: usize,
    pub max_phases: usize,
    /// seconds from injection to the first post-contrast phase
    pub first_post_range: (f32, f32),
    /// seconds between consecutive later phases
    pub interval_range: (f32, f32),
}

impl Default for SchedulePolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            min_phases: 3,
            max_phases: 6,
            first_post_range: (15.0, 180.0),
            interval_range: (40.0, 320.0),
        }
    }
}

/// Per-case randomization applied by [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetPolicy {
    pub schedule: SchedulePolicy,
    /// relative half-width of the uniform amplitude scaling per tissue
    pub amplitude_jitter: f32,
    /// relative half-width of the uniform rate scaling per tissue
    pub rate_jitter: f32,
    /// inclusive range of lesion counts
    pub lesion_count: (usize, usize),
    /// inclusive range of benign mass counts
    pub benign_mass_count: (usize, usize),
}

impl Default for DatasetPolicy {
    fn default() -> Self {
        Self {
            schedule: SchedulePolicy::default(),
            amplitude_jitter: 0.2,
            rate_jitter: 0.2,
            lesion_count: (1, 2),
            benign_mass_count: (1, 3),
        }
    }
}

impl DatasetPolicy {
    /// Every case shares the template's schedule, kinetics and lesion count.
    pub fn fixed() -> Self {
        Self {
            schedule: SchedulePolicy {
                enabled: false,
                ..Default::default()
            },
            amplitude_jitter: 0.0,
            rate_jitter: 0.0,
            lesion_count: (usize::MAX, usize::MAX),
            benign_mass_count: (usize::MAX, usize::MAX),
        }
    }
}

fn case_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

fn sample_schedule(policy: &SchedulePolicy, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let phases = rng.random_range(policy.min_phases..=policy.max_phases);
    let mut t = rng.random_range(policy.first_post_range.0..=policy.first_post_range.1).round();
    let mut schedule = vec![0.0, t];
    while schedule.len() < phases {
        t += rng.random_range(policy.interval_range.0..=policy.interval_range.1).round();
        schedule.push(t);
    }
    schedule
}

/// The spec used for case `index` of a dataset.
pub fn sample_case_spec(template: &PhantomSpec, policy: &DatasetPolicy, seed: u64, index: usize) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed(seed, index));
    let mut spec = template.clone();
    spec.seed = rng.random();
    if policy.schedule.enabled {
        spec.acquisition_schedule = sample_schedule(&policy.schedule, &mut rng);
    }
    if policy.lesion_count.0 != usize::MAX {
        spec.num_lesions = rng.random_range(policy.lesion_count.0..=policy.lesion_count.1.max(policy.lesion_count.0));
    }
    if policy.benign_mass_count.0 != usize::MAX {
        let (lo, hi) = policy.benign_mass_count;
        spec.num_benign_masses = rng.random_range(lo..=hi.max(lo));
    }
    let jitter = |rng: &mut ChaCha8Rng, half: f32| if half > 0.0 { 1.0 + rng.random_range(-half..=half) } else { 1.0 };
    for p in spec.tissue_params.values_mut().chain([&mut spec.mass_kinetics]) {
        p.amplitude *= jitter(&mut rng, policy.amplitude_jitter);
        let r = jitter(&mut rng, policy.rate_jitter);
        p.uptake_rate *= r;
        p.washout_rate *= r;
    }
    spec
}

/// `count` studies with per-case schedules, geometry and kinetics; ids are `case_000`, `case_001`, ...
pub fn generate_dataset(template: &PhantomSpec, count: usize, policy: &DatasetPolicy, seed: u64) -> Result<Vec<DceStudy>> {
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut study = generate_study(&sample_case_spec(template, policy, seed, i))?;
            study.case_id = format!("case_{i:03}");
            Ok(study)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            volume_size: [24, 24, 24],
            lesion_radius_range: (3.0, 5.0),
            seed: 17,
            ..Default::default()
        }
    }

    #[test]
    fn curve_is_zero_before_injection() {
        for p in [TUMOR_KINETICS, BENIGN_KINETICS, FAT_KINETICS] {
            assert_eq!(enhancement_curve(&p, 0.0), 0.0);
        }
    }

    #[test]
    fn persistent_curve_is_monotone_to_amplitude() {
        let mut prev = 0.0;
        for i in 0..=200 {
            let v = enhancement_curve(&BENIGN_KINETICS, i as f32 * 10.0);
            assert!(v >= prev);
            assert!(v <= BENIGN_KINETICS.amplitude);
            prev = v;
        }
        assert!((enhancement_curve(&BENIGN_KINETICS, 5000.0) - 0.7).abs() < 1e-6);
        assert_eq!(BENIGN_KINETICS.peak_time(), None);
    }

    #[test]
    fn tumor_crosses_below_benign_late() {
        let (t, b) = (TUMOR_KINETICS, BENIGN_KINETICS);
        assert!(enhancement_curve(&t, 90.0) > enhancement_curve(&b, 90.0));
        assert!(enhancement_curve(&t, 600.0) < enhancement_curve(&b, 600.0));
    }

    #[test]
    fn tumor_peak_matches_grid_argmax() {
        let peak = TUMOR_KINETICS.peak_time().unwrap();
        let best = (0..60000)
            .map(|i| i as f32 * 0.01)
            .max_by(|a, b| {
                enhancement_curve(&TUMOR_KINETICS, *a)
                    .partial_cmp(&enhancement_curve(&TUMOR_KINETICS, *b))
                    .unwrap()
            })
            .unwrap();
        assert!((peak - best).abs() < 0.5, "{peak} vs {best}");
    }

    #[test]
    fn no_lesions_gives_empty_mask() {
        let spec = PhantomSpec {
            num_lesions: 0,
            ..small_spec()
        };
        let s = generate_study(&spec).unwrap();
        assert!(s.truth_mask.unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn noiseless_tumor_follows_its_curve() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            num_lesions: 2,
            ..small_spec()
        };
        let s = generate_study(&spec).unwrap();
        let mask = s.truth_mask.as_ref().unwrap();
        assert!(mask.iter().any(|&m| m == 1));
        for (k, &t) in s.times.iter().enumerate() {
            let e = enhancement_curve(&TUMOR_KINETICS, t);
            for (i, &m) in mask.iter().enumerate() {
                if m == 1 {
                    assert_eq!(s.phases[k][i], s.phases[0][i] + e);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_study(&small_spec()).unwrap(), generate_study(&small_spec()).unwrap());
    }

    #[test]
    fn pre_contrast_ignores_kinetics() {
        let a = generate_study(&small_spec()).unwrap();
        let mut spec = small_spec();
        spec.tissue_params.insert(Tissue::Tumor, KineticParams::new(3.0, 0.2, 0.01));
        spec.tissue_params.insert(Tissue::Benign, KineticParams::new(0.1, 0.001, 0.0));
        let b = generate_study(&spec).unwrap();
        assert_eq!(a.phases[0], b.phases[0]);
        assert_ne!(a.phases[1], b.phases[1]);
    }

    #[test]
    fn early_contrast_exceeds_late_contrast() {
        let spec = PhantomSpec {
            num_lesions: 2,
            seed: 3,
            ..Default::default()
        };
        let s = generate_study(&spec).unwrap();
        let mask = s.truth_mask.as_ref().unwrap();
        let mean = |phase: &[f32], fg: bool| {
            let v: Vec<f32> = phase.iter().zip(mask).filter(|(_, &m)| (m == 1) == fg).map(|(v, _)| *v).collect();
            v.iter().sum::<f32>() / v.len() as f32
        };
        let ratio = |k: usize| mean(&s.phases[k], true) / mean(&s.phases[k], false);
        assert!(ratio(1) > ratio(3), "{} vs {}", ratio(1), ratio(3));
    }

    #[test]
    fn overcrowded_lesions_fail() {
        let spec = PhantomSpec {
            volume_size: [16, 16, 16],
            num_lesions: 20,
            lesion_radius_range: (6.0, 6.5),
            ..Default::default()
        };
        assert!(matches!(generate_study(&spec), Err(Error::Phantom(_))));
    }

    #[test]
    fn invalid_schedule_rejected() {
        let mut spec = small_spec();
        spec.acquisition_schedule = vec![0.0, 90.0];
        assert!(generate_study(&spec).is_err());
        spec.acquisition_schedule = vec![10.0, 90.0, 180.0];
        assert!(generate_study(&spec).is_err());
    }

    #[test]
    fn singleton_dataset_matches_direct_generation() {
        let policy = DatasetPolicy::default();
        let ds = generate_dataset(&small_spec(), 1, &policy, 5).unwrap();
        let mut direct = generate_study(&sample_case_spec(&small_spec(), &policy, 5, 0)).unwrap();
        direct.case_id = "case_000".into();
        assert_eq!(ds[0], direct);
    }

    #[test]
    fn fixed_policy_shares_schedule() {
        let ds = generate_dataset(&small_spec(), 4, &DatasetPolicy::fixed(), 1).unwrap();
        assert!(ds.iter().all(|s| s.times == small_spec().acquisition_schedule));
    }

    #[test]
    fn default_policy_spans_second_post_contrast_times() {
        let policy = DatasetPolicy::default();
        let t2: Vec<f32> = (0..100)
            .map(|i| sample_case_spec(&PhantomSpec::default(), &policy, 2024, i).acquisition_schedule[2])
            .collect();
        let lo = t2.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = t2.iter().copied().fold(0.0, f32::max);
        assert!(lo <= 120.0 && hi >= 400.0, "[{lo}, {hi}]");
        let counts: Vec<usize> = (0..100)
            .map(|i| sample_case_spec(&PhantomSpec::default(), &policy, 2024, i).acquisition_schedule.len())
            .collect();
        assert!(counts.iter().all(|&c| (3..=6).contains(&c)));
    }

    #[test]
    fn benign_masses_stay_out_of_the_mask_and_follow_their_curve() {
        let spec = PhantomSpec {
            volume_size: [32, 32, 32],
            num_lesions: 0,
            num_benign_masses: 2,
            noise_sigma: 0.0,
            acquisition_schedule: vec![0.0, 60.0, 300.0],
            ..Default::default()
        };
        let study = generate_study(&spec).unwrap();
        assert!(study.truth_mask.as_ref().unwrap().iter().all(|&v| v == 0));
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (labels, _) = tissue_layout(&spec, &mut rng).unwrap();
        let masses: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Region::Mass).collect();
        assert!(!masses.is_empty());
        for &i in &masses {
            for (k, &t) in study.times.iter().enumerate() {
                let e = study.phases[k][i] - study.phases[0][i];
                assert!((e - enhancement_curve(&MASS_KINETICS, t)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn slowed_tumor_curve_matches_the_mass_curve() {
        for t in [20.0, 90.0, 400.0] {
            let slow = enhancement_curve(&TUMOR_KINETICS, t);
            let mass = enhancement_curve(&MASS_KINETICS, 3.0 * t);
            assert!((slow - mass).abs() < 1e-5, "{t}: {slow} vs {mass}");
        }
    }
}
