//! Core 3D grid types, bit-exact file I/O, resampling, and intensity
//! normalization.
//!
//! Volumes are dense scalar grids in x-fastest linear order. Two tiny binary
//! formats keep round trips byte-exact: `GVL1` for float volumes and `GSG1`
//! for u16 label maps (same header layout, different payload type).

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const VOLUME_MAGIC: &[u8; 4] = b"GVL1";
const LABELS_MAGIC: &[u8; 4] = b"GSG1";

/// Dense 3D scalar grid with voxel spacing in mm. Immutable after
/// construction; data is x-fastest: `index = x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!(
                "spacing components must be positive and finite, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                n
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {} at linear index {}",
                data[i], i
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    /// Constant-valued volume, handy for masks and tests.
    pub fn constant(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }
}

/// Integer-labelled segmentation aligned with a [`Volume3D`]; label 0 marks
/// everything outside the intracranial cavity (ICC).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap3D {
    dims: [usize; 3],
    spacing: [f32; 3],
    labels: Vec<u16>,
}

impl LabelMap3D {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], labels: Vec<u16>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!(
                "spacing components must be positive and finite, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "label count {} does not match dims {:?} (expected {})",
                labels.len(),
                dims,
                n
            )));
        }
        Ok(Self { dims, spacing, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.index(x, y, z)]
    }

    /// Highest label present; equals the structure count `s` when labels
    /// partition the ICC into `1..=s`.
    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Number of in-ICC voxels (label > 0).
    pub fn icc_voxel_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// Subject diagnosis. Class order everywhere in the pipeline is CN < AD < FTD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "AD")]
    Ad,
    #[serde(rename = "FTD")]
    Ftd,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::Cn, Diagnosis::Ad, Diagnosis::Ftd];

    pub fn is_patient(self) -> bool {
        !matches!(self, Diagnosis::Cn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::Cn => "CN",
            Diagnosis::Ad => "AD",
            Diagnosis::Ftd => "FTD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// One cohort member: where its files live plus subject metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub volume: PathBuf,
    pub labels: PathBuf,
    pub age: f64,
    pub diagnosis: Diagnosis,
    pub split: SplitKind,
}

/// Dataset membership and metadata for a cohort, stored as a JSON array.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CohortManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CohortManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let manifest = Self { entries };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.subject_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate subject_id {:?}",
                    e.subject_id
                )));
            }
            if !(18.0..=110.0).contains(&e.age) {
                return Err(Error::Validation(format!(
                    "subject {:?} age {} outside [18, 110]",
                    e.subject_id, e.age
                )));
            }
        }
        Ok(())
    }

    /// Loads the manifest and checks that every referenced path resolves
    /// relative to the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let manifest: CohortManifest = serde_json::from_reader(BufReader::new(file))?;
        manifest.validate()?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for e in &manifest.entries {
            for p in [&e.volume, &e.labels] {
                let resolved = base.join(p);
                if !resolved.exists() {
                    return Err(Error::Validation(format!(
                        "subject {:?}: referenced path {} does not exist",
                        e.subject_id,
                        resolved.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<([usize; 3], [f32; 3])> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut buf4 = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut buf4)
            .map_err(|_| Error::Format("truncated header: dims".into()))?;
        *d = u32::from_le_bytes(buf4) as usize;
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        r.read_exact(&mut buf4)
            .map_err(|_| Error::Format("truncated header: spacing".into()))?;
        *s = f32::from_le_bytes(buf4);
    }
    Ok((dims, spacing))
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], dims: [usize; 3], spacing: [f32; 3]) -> Result<()> {
    w.write_all(magic)?;
    for d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::Validation(format!("dimension {d} exceeds u32 range")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a `GVL1` volume file.
pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let mut r = BufReader::new(File::open(path)?);
    let (dims, spacing) = read_header(&mut r, VOLUME_MAGIC)?;
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Format(format!("truncated payload: expected {} bytes", n * 4)))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3D::new(dims, spacing, data)
}

/// Writes a `GVL1` volume file; `read_volume(write_volume(v))` is
/// byte-identical.
pub fn write_volume(v: &Volume3D, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, VOLUME_MAGIC, v.dims, v.spacing)?;
    for value in &v.data {
        w.write_all(&value.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `GSG1` label file.
pub fn read_labels(path: &Path) -> Result<LabelMap3D> {
    let mut r = BufReader::new(File::open(path)?);
    let (dims, spacing) = read_header(&mut r, LABELS_MAGIC)?;
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;
    let mut payload = vec![0u8; n * 2];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Format(format!("truncated payload: expected {} bytes", n * 2)))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let labels = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelMap3D::new(dims, spacing, labels)
}

/// Writes a `GSG1` label file.
pub fn write_labels(l: &LabelMap3D, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, LABELS_MAGIC, l.dims, l.spacing)?;
    for value in &l.labels {
        w.write_all(&value.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Mean-pools 2x2x2 blocks. Output dims are `ceil(d/2)` per axis; partial
/// blocks at the far boundaries average only the voxels that exist. Spacing
/// doubles. Accumulation is in f64.
pub fn downsample2(v: &Volume3D) -> Volume3D {
    let [nx, ny, nz] = v.dims;
    let od = [nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2)];
    let mut out = vec![0f32; od[0] * od[1] * od[2]];
    for oz in 0..od[2] {
        for oy in 0..od[1] {
            for ox in 0..od[0] {
                let mut sum = 0f64;
                let mut count = 0u32;
                for z in (2 * oz)..((2 * oz + 2).min(nz)) {
                    for y in (2 * oy)..((2 * oy + 2).min(ny)) {
                        for x in (2 * ox)..((2 * ox + 2).min(nx)) {
                            sum += f64::from(v.at(x, y, z));
                            count += 1;
                        }
                    }
                }
                out[ox + od[0] * (oy + od[1] * oz)] = (sum / f64::from(count)) as f32;
            }
        }
    }
    let sp = v.spacing;
    Volume3D::new(od, [sp[0] * 2.0, sp[1] * 2.0, sp[2] * 2.0], out)
        .expect("downsample of a valid volume is valid")
}

/// Corner-aligned trilinear upsampling: output index `o` samples input
/// coordinate `o * (D-1) / (T-1)`; single-voxel axes replicate.
pub fn upsample_trilinear(v: &Volume3D, target_dims: [usize; 3]) -> Result<Volume3D> {
    let d = v.dims;
    for a in 0..3 {
        if target_dims[a] < d[a] {
            return Err(Error::Validation(format!(
                "target dims {:?} smaller than source {:?} on axis {}",
                target_dims, d, a
            )));
        }
    }
    // Per-axis source coordinate split into base index and fraction.
    let axis_map = |dim: usize, target: usize| -> Vec<(usize, f64)> {
        (0..target)
            .map(|o| {
                if dim == 1 || target == 1 {
                    return (0, 0.0);
                }
                let c = o as f64 * (dim - 1) as f64 / (target - 1) as f64;
                let i = (c.floor() as usize).min(dim - 2);
                (i, c - i as f64)
            })
            .collect()
    };
    let xs = axis_map(d[0], target_dims[0]);
    let ys = axis_map(d[1], target_dims[1]);
    let zs = axis_map(d[2], target_dims[2]);

    let mut out = vec![0f32; target_dims[0] * target_dims[1] * target_dims[2]];
    let mut idx = 0;
    for &(z0, fz) in &zs {
        let z1 = if fz > 0.0 { z0 + 1 } else { z0 };
        for &(y0, fy) in &ys {
            let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
            for &(x0, fx) in &xs {
                let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
                let c000 = f64::from(v.at(x0, y0, z0));
                let c100 = f64::from(v.at(x1, y0, z0));
                let c010 = f64::from(v.at(x0, y1, z0));
                let c110 = f64::from(v.at(x1, y1, z0));
                let c001 = f64::from(v.at(x0, y0, z1));
                let c101 = f64::from(v.at(x1, y0, z1));
                let c011 = f64::from(v.at(x0, y1, z1));
                let c111 = f64::from(v.at(x1, y1, z1));
                let c00 = c000 + (c100 - c000) * fx;
                let c10 = c010 + (c110 - c010) * fx;
                let c01 = c001 + (c101 - c001) * fx;
                let c11 = c011 + (c111 - c011) * fx;
                let c0 = c00 + (c10 - c00) * fy;
                let c1 = c01 + (c11 - c01) * fy;
                out[idx] = (c0 + (c1 - c0) * fz) as f32;
                idx += 1;
            }
        }
    }
    // Keep physical extent: spacing shrinks by the axis dilation factor.
    let mut spacing = v.spacing;
    for a in 0..3 {
        if target_dims[a] > 1 && d[a] > 1 {
            spacing[a] *= (d[a] as f32 - 1.0) / (target_dims[a] as f32 - 1.0);
        }
    }
    Volume3D::new(target_dims, spacing, out)
}

/// Standardizes in-mask voxels (label > 0) to mean 0 and population std 1;
/// out-of-mask voxels become 0. Statistics accumulate in f64.
pub fn zscore_normalize(v: &Volume3D, mask: &LabelMap3D) -> Result<Volume3D> {
    if v.dims != mask.dims {
        return Err(Error::Shape(format!(
            "volume dims {:?} do not match mask dims {:?}",
            v.dims, mask.dims
        )));
    }
    let mut sum = 0f64;
    let mut count = 0usize;
    for (val, &lab) in v.data.iter().zip(mask.labels.iter()) {
        if lab > 0 {
            sum += f64::from(*val);
            count += 1;
        }
    }
    if count < 2 {
        return Err(Error::DegenerateInput(format!(
            "mask has {count} voxels, need at least 2"
        )));
    }
    let mean = sum / count as f64;
    let mut ssq = 0f64;
    for (val, &lab) in v.data.iter().zip(mask.labels.iter()) {
        if lab > 0 {
            let d = f64::from(*val) - mean;
            ssq += d * d;
        }
    }
    let var = ssq / count as f64;
    if var <= 0.0 {
        return Err(Error::DegenerateInput(
            "in-mask intensity variance is zero".into(),
        ));
    }
    let std = var.sqrt();
    let data = v
        .data
        .iter()
        .zip(mask.labels.iter())
        .map(|(val, &lab)| {
            if lab > 0 {
                ((f64::from(*val) - mean) / std) as f32
            } else {
                0.0
            }
        })
        .collect();
    Volume3D::new(v.dims, v.spacing, data)
}
