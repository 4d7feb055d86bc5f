//! On-disk study format: `<case_id>.json` sidecar, `<case_id>.raw` phases as
//! little-endian f32 concatenated in phase order, `<case_id>.mask` as one u8 per voxel.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DceStudy, TissueMetadata};
use crate::{Error, Result};

pub const STUDY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySidecar {
    pub format_version: u32,
    pub case_id: String,
    /// `[D, H, W]`
    pub shape: [usize; 3],
    /// mm
    pub spacing: [f32; 3],
    /// seconds since injection
    pub times: Vec<f32>,
    pub num_phases: usize,
    pub dtype: String,
    pub has_mask: bool,
    pub tissue: Option<TissueMetadata>,
}

pub fn write_study(dir: &Path, study: &DceStudy) -> Result<()> {
    study.validate()?;
    let sidecar = StudySidecar {
        format_version: STUDY_FORMAT_VERSION,
        case_id: study.case_id.clone(),
        shape: study.dims,
        spacing: study.spacing,
        times: study.times.clone(),
        num_phases: study.phases.len(),
        dtype: "f32le".into(),
        has_mask: study.truth_mask.is_some(),
        tissue: study.tissue.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&sidecar)?;
    json.push(b'\n');
    fs::write(dir.join(format!("{}.json", study.case_id)), json)?;
    let mut raw = Vec::with_capacity(4 * study.voxels() * study.phases.len());
    for phase in &study.phases {
        for v in phase {
            raw.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(format!("{}.raw", study.case_id)), raw)?;
    if let Some(mask) = &study.truth_mask {
        fs::write(dir.join(format!("{}.mask", study.case_id)), mask)?;
    }
    Ok(())
}

pub fn read_study(dir: &Path, case_id: &str) -> Result<DceStudy> {
    let json_path = dir.join(format!("{case_id}.json"));
    let sidecar: StudySidecar = serde_json::from_slice(&fs::read(&json_path)?)?;
    let bad = |path: &Path, detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    if sidecar.format_version != STUDY_FORMAT_VERSION || sidecar.dtype != "f32le" {
        return Err(bad(
            &json_path,
            format!("unsupported version {} / dtype {}", sidecar.format_version, sidecar.dtype),
        ));
    }
    let n: usize = sidecar.shape.iter().product();
    let raw_path = dir.join(format!("{case_id}.raw"));
    let raw = fs::read(&raw_path)?;
    if raw.len() != 4 * n * sidecar.num_phases {
        return Err(bad(
            &raw_path,
            format!("expected {} bytes, found {}", 4 * n * sidecar.num_phases, raw.len()),
        ));
    }
    let phases = raw
        .chunks_exact(4 * n)
        .map(|p| p.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
        .collect();
    let truth_mask = if sidecar.has_mask {
        let mask_path = dir.join(format!("{case_id}.mask"));
        let mask = fs::read(&mask_path)?;
        if mask.len() != n || mask.iter().any(|&v| v > 1) {
            return Err(bad(&mask_path, "mask must hold one 0/1 byte per voxel".into()));
        }
        Some(mask)
    } else {
        None
    };
    let study = DceStudy {
        case_id: sidecar.case_id,
        dims: sidecar.shape,
        spacing: sidecar.spacing,
        times: sidecar.times,
        phases,
        truth_mask,
        tissue: sidecar.tissue,
    };
    study.validate()?;
    Ok(study)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_study, PhantomSpec};

    #[test]
    fn study_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut study = generate_study(&PhantomSpec {
            volume_size: [8, 10, 12],
            lesion_radius_range: (1.5, 2.5),
            num_benign_masses: 1,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        study.case_id = "case_007".into();
        write_study(dir.path(), &study).unwrap();
        assert_eq!(read_study(dir.path(), "case_007").unwrap(), study);
        let raw = fs::metadata(dir.path().join("case_007.raw")).unwrap().len();
        assert_eq!(raw as usize, 4 * 8 * 10 * 12 * study.phases.len());
    }

    #[test]
    fn truncated_raw_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut study = generate_study(&PhantomSpec {
            volume_size: [8, 8, 8],
            lesion_radius_range: (1.5, 2.0),
            num_benign_masses: 0,
            ..Default::default()
        })
        .unwrap();
        study.case_id = "c".into();
        write_study(dir.path(), &study).unwrap();
        let p = dir.path().join("c.raw");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_study(dir.path(), "c"), Err(Error::Format { .. })));
    }
}
