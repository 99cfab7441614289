//! Case volumes, 2D slices, dataset splits and on-disk layout.
//!
//! Volumes are indexed `[x, y, z]` as stored in NIfTI; slice `z` is the
//! `[x, y]` plane, so a slice pixel `(row, col)` is voxel `(x, y)`.

mod phantom;

pub use phantom::{generate_cohort, generate_phantom, generate_phantom_with_geometry, PhantomSpec, SliceGeometry};

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use nifti::{IntoNdArray, NiftiObject, NiftiVolume, ReaderOptions};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{INFARCTION, NO_REFLOW};

/// Largest valid label value.
pub const MAX_LABEL: u8 = 4;

/// One subject: intensity volume, label volume and spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub image: Array3<f64>,
    pub labels: Array3<u8>,
    pub voxel_spacing: [f64; 3],
    pub pathological: bool,
}

impl CaseRecord {
    /// Builds a case, checking dimensions and labels; `pathological` is derived.
    pub fn new(
        case_id: impl Into<String>,
        image: Array3<f64>,
        labels: Array3<u8>,
        voxel_spacing: [f64; 3],
    ) -> Result<Self> {
        if image.dim() != labels.dim() {
            return Err(Error::DataFormat(format!(
                "image dimensions {:?} differ from label dimensions {:?}",
                image.dim(),
                labels.dim()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > MAX_LABEL) {
            return Err(Error::LabelRange { value: bad as f64 });
        }
        let pathological = labels.iter().any(|&l| l == INFARCTION || l == NO_REFLOW);
        Ok(Self {
            case_id: case_id.into(),
            image,
            labels,
            voxel_spacing,
            pathological,
        })
    }

    pub fn num_slices(&self) -> usize {
        self.image.dim().2
    }
}

/// A single short-axis slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub case_id: String,
    pub z_index: usize,
    /// `z_index / (num_slices - 1)`, zero for single-slice volumes.
    pub z_norm: f64,
    pub image: Array2<f64>,
    pub labels: Array2<u8>,
}

impl SliceSample {
    pub fn dim(&self) -> (usize, usize) {
        self.image.dim()
    }
}

/// Identifies a slice inside a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceKey {
    pub case_id: String,
    pub z_index: usize,
}

/// A seeded train/validation partition of a slice list. Indices refer to the
/// slice list the manifest was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<SliceKey>,
    pub split_seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl DatasetManifest {
    pub fn train_samples<'a>(&self, all: &'a [SliceSample]) -> Vec<&'a SliceSample> {
        self.train.iter().map(|&i| &all[i]).collect()
    }

    pub fn validation_samples<'a>(&self, all: &'a [SliceSample]) -> Vec<&'a SliceSample> {
        self.validation.iter().map(|&i| &all[i]).collect()
    }
}

fn read_volume(path: &Path) -> Result<(ndarray::ArrayD<f64>, [f64; 3])> {
    let obj = ReaderOptions::new().read_file(path)?;
    let header = obj.header().clone();
    let volume = obj.into_volume();
    if volume.dim().is_empty() {
        return Err(Error::DataFormat(format!("{} has no dimensions", path.display())));
    }
    let arr = volume.into_ndarray::<f64>()?;
    let spacing = [
        header.pixdim[1] as f64,
        header.pixdim[2] as f64,
        header.pixdim[3] as f64,
    ];
    Ok((arr, spacing))
}

/// Coerces a 2D, 3D, or trailing-singleton 4D array into `[x, y, z]`.
fn as_volume(arr: ndarray::ArrayD<f64>, path: &Path) -> Result<Array3<f64>> {
    let shape = arr.shape().to_vec();
    let arr = match shape.len() {
        2 => arr.insert_axis(Axis(2)),
        3 => arr,
        4 if shape[3] == 1 => arr.index_axis_move(Axis(3), 0),
        _ => {
            return Err(Error::DataFormat(format!(
                "{}: unsupported volume shape {shape:?}",
                path.display()
            )))
        }
    };
    arr.into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| Error::DataFormat(e.to_string()))
}

/// Loads one case from an image file and a label file.
pub fn load_case(image_path: &Path, label_path: &Path) -> Result<CaseRecord> {
    let (img, spacing) = read_volume(image_path)?;
    let (lab, _) = read_volume(label_path)?;
    let image = as_volume(img, image_path)?;
    let raw_labels = as_volume(lab, label_path)?;
    if image.dim() != raw_labels.dim() {
        return Err(Error::DataFormat(format!(
            "image {:?} and labels {:?} have different dimensions",
            image.dim(),
            raw_labels.dim()
        )));
    }
    if let Some(&bad) = image.iter().find(|v| !v.is_finite()) {
        return Err(Error::DataFormat(format!("non-finite intensity {bad}")));
    }
    let mut labels = Array3::zeros(raw_labels.dim());
    for (dst, &v) in labels.iter_mut().zip(raw_labels.iter()) {
        if v.fract() != 0.0 || !(0.0..=MAX_LABEL as f64).contains(&v) {
            return Err(Error::LabelRange { value: v });
        }
        *dst = v as u8;
    }
    let case_id = case_id_from_path(image_path);
    CaseRecord::new(case_id, image, labels, spacing)
}

fn case_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .to_string()
}

/// Writes a case's image (float32) and labels (uint8) as NIfTI.
pub fn write_case(case: &CaseRecord, image_path: &Path, label_path: &Path) -> Result<()> {
    let mut header = nifti::NiftiHeader::default();
    header.pixdim[1] = case.voxel_spacing[0] as f32;
    header.pixdim[2] = case.voxel_spacing[1] as f32;
    header.pixdim[3] = case.voxel_spacing[2] as f32;
    for p in [image_path, label_path] {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
    }
    let img = case.image.mapv(|v| v as f32);
    nifti::writer::WriterOptions::new(image_path)
        .reference_header(&header)
        .write_nifti(&img)?;
    nifti::writer::WriterOptions::new(label_path)
        .reference_header(&header)
        .write_nifti(&case.labels)?;
    Ok(())
}

/// Writes a 2D label map as a single-slice NIfTI volume.
pub fn write_label_slice(labels: ArrayView2<'_, u8>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let vol = labels.to_owned().insert_axis(Axis(2));
    nifti::writer::WriterOptions::new(path).write_nifti(&vol)?;
    Ok(())
}

/// Splits a case into its slices, preserving values exactly.
pub fn extract_slices(case: &CaseRecord) -> Vec<SliceSample> {
    let nz = case.num_slices();
    (0..nz)
        .map(|z| SliceSample {
            case_id: case.case_id.clone(),
            z_index: z,
            z_norm: if nz > 1 { z as f64 / (nz - 1) as f64 } else { 0.0 },
            image: case.image.slice(s![.., .., z]).to_owned(),
            labels: case.labels.slice(s![.., .., z]).to_owned(),
        })
        .collect()
}

/// Inverse of [`extract_slices`] for slices of one case in z order.
pub fn stack_slices(slices: &[SliceSample]) -> Result<(Array3<f64>, Array3<u8>)> {
    let first = slices
        .first()
        .ok_or_else(|| Error::InsufficientData("no slices to stack".into()))?;
    let (h, w) = first.dim();
    let mut image = Array3::zeros((h, w, slices.len()));
    let mut labels = Array3::zeros((h, w, slices.len()));
    for (z, s) in slices.iter().enumerate() {
        if s.dim() != (h, w) {
            return Err(Error::Shape("slices differ in size".into()));
        }
        image.slice_mut(s![.., .., z]).assign(&s.image);
        labels.slice_mut(s![.., .., z]).assign(&s.labels);
    }
    Ok((image, labels))
}

/// Seeded slice-level split. The training count is `round(fraction * N)`
/// rounded half up, clamped so both sides are non-empty.
pub fn split_dataset(samples: &[SliceSample], train_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 slices to split, got {n}"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} must lie in (0,1)"
        )));
    }
    let n_train = train_count(n, train_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut train = order[..n_train].to_vec();
    let mut validation = order[n_train..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    Ok(DatasetManifest {
        samples: samples
            .iter()
            .map(|s| SliceKey {
                case_id: s.case_id.clone(),
                z_index: s.z_index,
            })
            .collect(),
        split_seed: seed,
        train,
        validation,
    })
}

pub(crate) fn train_count(n: usize, fraction: f64) -> usize {
    let raw = (fraction * n as f64 + 0.5).floor() as usize;
    raw.clamp(1, n - 1)
}

/// Per-slice min-max scaling to `[0,1]`; constant images map to zeros.
pub fn normalize_intensity(image: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in image.iter() {
        if !v.is_finite() {
            return Err(Error::DataFormat(format!("non-finite intensity {v}")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if image.is_empty() || hi <= lo {
        return Ok(Array2::zeros(image.dim()));
    }
    let range = hi - lo;
    Ok(image.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0)))
}

/// File locations of one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFiles {
    pub case_id: String,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// EMIDEC layout: `<root>/<id>/Images/<id>.nii.gz` and `<root>/<id>/Contours/<id>.nii.gz`.
pub fn emidec_paths(root: &Path, case_id: &str) -> CaseFiles {
    let file = format!("{case_id}.nii.gz");
    CaseFiles {
        case_id: case_id.to_string(),
        image_path: root.join(case_id).join("Images").join(&file),
        label_path: root.join(case_id).join("Contours").join(&file),
    }
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<CaseFiles>> {
    let text = fs::read_to_string(path)?;
    let mut entries: Vec<CaseFiles> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut entries {
        if e.image_path.is_relative() {
            e.image_path = base.join(&e.image_path);
        }
        if e.label_path.is_relative() {
            e.label_path = base.join(&e.label_path);
        }
    }
    Ok(entries)
}

/// Finds the cases under `root`: `manifest.json` when present, else the
/// EMIDEC directory layout (`.nii.gz` or `.nii`). Sorted by case id.
pub fn discover_cases(root: &Path) -> Result<Vec<CaseFiles>> {
    let manifest = root.join(MANIFEST_FILE);
    if manifest.is_file() {
        return read_manifest(&manifest);
    }
    if !root.is_dir() {
        return Err(Error::InsufficientData(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let id = entry.file_name().to_string_lossy().into_owned();
        let mut files = emidec_paths(root, &id);
        if !files.image_path.is_file() {
            files.image_path.set_extension("");
        }
        if !files.label_path.is_file() {
            files.label_path.set_extension("");
        }
        if files.image_path.is_file() && files.label_path.is_file() {
            found.push(files);
        }
    }
    found.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(found)
}

/// Loads every case under `root` (see [`discover_cases`]).
pub fn load_dataset(root: &Path) -> Result<Vec<CaseRecord>> {
    let files = discover_cases(root)?;
    if files.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no cases found under {}",
            root.display()
        )));
    }
    files
        .iter()
        .map(|f| {
            let mut case = load_case(&f.image_path, &f.label_path)?;
            case.case_id = f.case_id.clone();
            Ok(case)
        })
        .collect()
}

/// All slices of all cases, intensity-normalized per slice.
pub fn prepare_slices(cases: &[CaseRecord]) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for case in cases {
        for mut s in extract_slices(case) {
            s.image = normalize_intensity(s.image.view())?;
            out.push(s);
        }
    }
    Ok(out)
}

/// Writes cases in the EMIDEC layout plus a manifest with relative paths.
pub fn write_dataset(root: &Path, cases: &[CaseRecord]) -> Result<Vec<CaseFiles>> {
    fs::create_dir_all(root)?;
    let mut manifest = Vec::with_capacity(cases.len());
    for case in cases {
        let files = emidec_paths(root, &case.case_id);
        write_case(case, &files.image_path, &files.label_path)?;
        manifest.push(CaseFiles {
            case_id: case.case_id.clone(),
            image_path: files.image_path.strip_prefix(root).unwrap_or(&files.image_path).to_path_buf(),
            label_path: files.label_path.strip_prefix(root).unwrap_or(&files.label_path).to_path_buf(),
        });
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(root.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn case(nz: usize) -> CaseRecord {
        let image = Array3::from_shape_fn((4, 3, nz), |(x, y, z)| (x * 100 + y * 10 + z) as f64);
        let labels = Array3::from_shape_fn((4, 3, nz), |(x, y, z)| ((x + y + z) % 3) as u8);
        CaseRecord::new("c", image, labels, [1.0; 3]).unwrap()
    }

    #[test]
    fn healthy_and_pathological_flags() {
        let healthy = CaseRecord::new("h", Array3::zeros((2, 2, 2)), Array3::zeros((2, 2, 2)), [1.0; 3]).unwrap();
        assert!(!healthy.pathological);
        let mut labels = Array3::zeros((2, 2, 2));
        labels[[1, 1, 1]] = 4;
        let sick = CaseRecord::new("p", Array3::zeros((2, 2, 2)), labels, [1.0; 3]).unwrap();
        assert!(sick.pathological);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let r = CaseRecord::new("x", Array3::zeros((128, 128, 8)), Array3::zeros((128, 128, 7)), [1.0; 3]);
        assert!(matches!(r, Err(Error::DataFormat(_))));
    }

    #[test]
    fn z_norm_spacing() {
        let s = extract_slices(&case(8));
        assert_eq!(s.len(), 8);
        for (z, sl) in s.iter().enumerate() {
            assert!((sl.z_norm - z as f64 / 7.0).abs() < 1e-15);
        }
        assert_eq!(s[7].z_norm, 1.0);
        let single = extract_slices(&case(1));
        assert_eq!(single[0].z_norm, 0.0);
    }

    #[test]
    fn restacking_is_identity() {
        let c = case(5);
        let (img, lab) = stack_slices(&extract_slices(&c)).unwrap();
        assert_eq!(img, c.image);
        assert_eq!(lab, c.labels);
    }

    fn dummy_slices(n: usize) -> Vec<SliceSample> {
        (0..n)
            .map(|z| SliceSample {
                case_id: "c".into(),
                z_index: z,
                z_norm: 0.0,
                image: Array2::zeros((1, 1)),
                labels: Array2::zeros((1, 1)),
            })
            .collect()
    }

    #[test]
    fn split_round_half_up() {
        let m = split_dataset(&dummy_slices(708), 0.9, 3).unwrap();
        assert_eq!(m.train.len(), 637);
        assert_eq!(m.validation.len(), 71);
        assert_eq!(train_count(10, 0.25), 3); // 2.5 rounds up
    }

    #[test]
    fn split_is_deterministic_disjoint_cover() {
        let s = dummy_slices(10);
        let a = split_dataset(&s, 0.9, 42).unwrap();
        let b = split_dataset(&s, 0.9, 42).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.train.iter().chain(&a.validation).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_needs_two_samples() {
        assert!(matches!(
            split_dataset(&dummy_slices(1), 0.9, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn normalize_cases() {
        let img = ndarray::array![[100.0, 200.0], [300.0, 150.0]];
        let n = normalize_intensity(img.view()).unwrap();
        assert_eq!(n, img.mapv(|v| (v - 100.0) / 200.0));
        let c = Array2::from_elem((3, 3), 7.0);
        assert_eq!(normalize_intensity(c.view()).unwrap(), Array2::<f64>::zeros((3, 3)));
        let unit = ndarray::array![[0.0, 0.25], [1.0, 0.5]];
        assert_eq!(normalize_intensity(unit.view()).unwrap(), unit);
        let bad = ndarray::array![[0.0, f64::NAN]];
        assert!(matches!(normalize_intensity(bad.view()), Err(Error::DataFormat(_))));
    }
}
