//! On-disk storage for datasets and checkpoints.
//!
//! Dataset file (`ABPT`):
//! `magic | version u32 | manifest_len u64 | manifest json | blob section`.
//! Each case owns one contiguous byte range of the blob section, recorded in
//! the manifest as an offset relative to the section start, so reading a case
//! touches only the manifest and that range.
//!
//! Container file (checkpoints):
//! `magic | version u32 | header_len u64 | header json | blob_count u64 | blobs`.
//!
//! JSON is written in canonical form: object keys sorted, no whitespace.

mod blob;
mod generate;

pub use blob::{Blob, DType};
pub use generate::{generate_case, generate_cases, CaseSpec, GenConfig, ShapeFamily};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fields::{FieldSample, FlowConditions};
use crate::geometry::{ShapeParams, SurfacePointSet, VolumePointSet};
use crate::math::Vec3;

pub const DATASET_MAGIC: [u8; 4] = *b"ABPT";
pub const DATASET_VERSION: u32 = 1;

/// Serializes `v` with sorted keys and no insignificant whitespace.
pub fn canonical_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(v)?)?)
}

/// Writes through `f` into a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let name = path.file_name().ok_or_else(|| invalid(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => Ok(std::fs::rename(&tmp, path)?),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn read_preamble(r: &mut impl Read, magic: [u8; 4], version: u32) -> Result<serde_json::Value> {
    let mut m = [0u8; 4];
    blob::read_exact(r, &mut m)?;
    if m != magic {
        return Err(Error::Corrupt(format!("bad magic {m:?}")));
    }
    let v = blob::read_u32(r)?;
    if v != version {
        return Err(Error::Corrupt(format!("unsupported version {v}")));
    }
    let len = blob::read_u64(r)?;
    if len > 1 << 32 {
        return Err(Error::Corrupt(format!("header length {len}")));
    }
    let mut buf = vec![0; len as usize];
    blob::read_exact(r, &mut buf)?;
    serde_json::from_slice(&buf).map_err(|e| Error::Corrupt(format!("header json: {e}")))
}

fn write_preamble(w: &mut impl Write, magic: [u8; 4], version: u32, header: &str) -> Result<u64> {
    w.write_all(&magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    Ok(4 + 4 + 8 + header.len() as u64)
}

/// Writes a JSON header followed by blobs, atomically.
pub fn write_container(path: &Path, magic: [u8; 4], version: u32, header: &impl Serialize, blobs: &[Blob]) -> Result<()> {
    let header = canonical_json(header)?;
    write_atomic(path, |w| {
        write_preamble(w, magic, version, &header)?;
        w.write_all(&(blobs.len() as u64).to_le_bytes())?;
        for b in blobs {
            b.write_to(w)?;
        }
        Ok(())
    })
}

/// Reads a file written by [`write_container`]. Trailing bytes are corrupt.
pub fn read_container(path: &Path, magic: [u8; 4], version: u32) -> Result<(serde_json::Value, Vec<Blob>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| not_found_or_io(e, path))?);
    let header = read_preamble(&mut r, magic, version)?;
    let count = blob::read_u64(&mut r)?;
    let mut blobs = Vec::new();
    for _ in 0..count {
        blobs.push(Blob::read_from(&mut r)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Corrupt("trailing bytes after last blob".into()));
    }
    Ok((header, blobs))
}

fn not_found_or_io(e: std::io::Error, path: &Path) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::NotFound(path.display().to_string())
    } else {
        Error::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// One surface set and one volume set with their aligned fields.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CaseView {
    pub surface: SurfacePointSet,
    pub volume: VolumePointSet,
    pub fields: FieldSample,
}

impl CaseView {
    fn validate(&self, what: &str) -> Result<()> {
        let (s, v, f) = (&self.surface, &self.volume, &self.fields);
        let ns = s.count();
        let nv = v.count();
        if s.normals.len() != ns || s.areas.len() != ns || f.surface_pressure.len() != ns || f.wall_shear.len() != ns {
            return Err(invalid(format!("{what}: surface arrays not aligned")));
        }
        if f.volume_pressure.len() != nv || f.velocity.len() != nv {
            return Err(invalid(format!("{what}: volume arrays not aligned")));
        }
        Ok(())
    }

    fn blobs(&self, prefix: &str) -> Vec<Blob> {
        let s = &self.surface;
        let f = &self.fields;
        let (ns, nv) = (s.count(), self.volume.count());
        let v3 = |name: &str, v: &[Vec3]| Blob::new(format!("{prefix}.{name}"), DType::F32, vec![v.len(), 3], v.iter().flatten().copied().collect());
        let v1 = |name: &str, v: &[f64], n: usize| Blob::new(format!("{prefix}.{name}"), DType::F32, vec![n], v.to_vec());
        vec![
            v3("surface.positions", &s.positions),
            v3("surface.normals", &s.normals),
            v1("surface.areas", &s.areas, ns),
            v1("surface.pressure", &f.surface_pressure, ns),
            v3("surface.shear", &f.wall_shear),
            v3("volume.positions", &self.volume.positions),
            v1("volume.pressure", &f.volume_pressure, nv),
            v3("volume.velocity", &f.velocity),
        ]
    }

    fn from_blobs(prefix: &str, blobs: &[Blob]) -> Result<Self> {
        let find = |name: &str| {
            let full = format!("{prefix}.{name}");
            blobs.iter().find(|b| b.name == full).ok_or_else(|| Error::Corrupt(format!("missing blob `{full}`")))
        };
        let v3 = |name: &str| -> Result<Vec<Vec3>> {
            let b = find(name)?;
            if b.shape.len() != 2 || b.shape[1] != 3 {
                return Err(Error::Corrupt(format!("blob `{}` shape {:?}", b.name, b.shape)));
            }
            Ok(b.values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
        };
        let v1 = |name: &str| -> Result<Vec<f64>> { Ok(find(name)?.values.clone()) };
        let view = CaseView {
            surface: SurfacePointSet {
                positions: v3("surface.positions")?,
                normals: v3("surface.normals")?,
                areas: v1("surface.areas")?,
            },
            volume: VolumePointSet { positions: v3("volume.positions")? },
            fields: FieldSample {
                surface_pressure: v1("surface.pressure")?,
                wall_shear: v3("surface.shear")?,
                volume_pressure: v1("volume.pressure")?,
                velocity: v3("volume.velocity")?,
            },
        };
        view.validate(prefix).map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(view)
    }

    fn quantize(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        let s = &mut self.surface;
        s.positions.iter_mut().chain(&mut s.normals).flatten().for_each(q);
        s.areas.iter_mut().for_each(q);
        self.volume.positions.iter_mut().flatten().for_each(q);
        let f = &mut self.fields;
        f.surface_pressure.iter_mut().chain(&mut f.volume_pressure).for_each(q);
        f.wall_shear.iter_mut().chain(&mut f.velocity).flatten().for_each(q);
    }
}

/// One simulated case: solution-adapted sets (anisotropic surface, random
/// volume) and CAD-like sets (isotropic surface, regular grid) with fields.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: u64,
    pub shape: ShapeParams,
    pub conditions: FlowConditions,
    pub split: Split,
    pub solution: CaseView,
    pub cad: CaseView,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<()> {
        self.solution.validate("solution")?;
        self.cad.validate("cad")?;
        if self.solution.surface.count() == 0 || self.solution.volume.count() == 0 {
            return Err(invalid(format!("case {} has an empty solution point set", self.id)));
        }
        Ok(())
    }

    /// Rounds every array to f32 precision, the precision stored on disk.
    pub fn quantize(&mut self) {
        self.solution.quantize();
        self.cad.quantize();
    }

    fn blobs(&self) -> Vec<Blob> {
        let mut b = self.solution.blobs("solution");
        b.extend(self.cad.blobs("cad"));
        b
    }
}

pub const SURFACE_VARIABLES: [&str; 2] = ["surface_pressure", "wall_shear"];
pub const VOLUME_VARIABLES: [&str; 2] = ["volume_pressure", "velocity"];
/// Channel order of standardized model outputs: surface then volume.
pub const CHANNELS: [&str; 8] = ["p_s", "tau_x", "tau_y", "tau_z", "p_v", "u_x", "u_y", "u_z"];

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: [f64; 8],
    pub std: [f64; 8],
}

impl NormStats {
    /// Statistics over the solution views of the train-split cases only.
    pub fn from_train_cases<'a>(cases: impl IntoIterator<Item = &'a CaseRecord>) -> Result<Self> {
        let mut sum = [0.0; 8];
        let mut sq = [0.0; 8];
        let mut count = [0usize; 8];
        let mut add = |c: usize, v: f64| {
            sum[c] += v;
            sq[c] += v * v;
            count[c] += 1;
        };
        for case in cases.into_iter().filter(|c| c.split == Split::Train) {
            let f = &case.solution.fields;
            for (p, t) in f.surface_pressure.iter().zip(&f.wall_shear) {
                add(0, *p);
                (0..3).for_each(|k| add(1 + k, t[k]));
            }
            for (p, u) in f.volume_pressure.iter().zip(&f.velocity) {
                add(4, *p);
                (0..3).for_each(|k| add(5 + k, u[k]));
            }
        }
        if count.contains(&0) {
            return Err(invalid("standardization needs at least one train case with points"));
        }
        let mut mean = [0.0; 8];
        let mut std = [0.0; 8];
        for c in 0..8 {
            let n = count[c] as f64;
            mean[c] = sum[c] / n;
            let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
            // Degenerate channels keep unit scale.
            std[c] = if var.sqrt() > 1e-12 * (1.0 + mean[c].abs()) { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self { mean: [0.0; 8], std: [1.0; 8] }
    }

    pub fn standardize(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn destandardize(&self, channel: usize, z: f64) -> f64 {
        z * self.std[channel] + self.mean[channel]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: u64,
    pub split: Split,
    pub shape: ShapeParams,
    pub conditions: FlowConditions,
    /// Byte offset relative to the blob section.
    pub offset: u64,
    pub length: u64,
    pub blob_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: serde_json::Value,
    pub stats: NormStats,
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Option<Split>) -> Vec<u64> {
        self.cases.iter().filter(|c| split.is_none_or(|s| c.split == s)).map(|c| c.id).collect()
    }
}

/// Writes `cases` to a single ABPT file. Arrays are stored as f32.
pub fn write_dataset(path: &Path, cases: &[CaseRecord], generator: serde_json::Value) -> Result<DatasetManifest> {
    let mut ids = std::collections::BTreeSet::new();
    for c in cases {
        c.validate()?;
        if !ids.insert(c.id) {
            return Err(invalid(format!("duplicate case id {}", c.id)));
        }
    }
    let stats = NormStats::from_train_cases(cases)?;
    let mut entries = Vec::with_capacity(cases.len());
    let mut offset = 0u64;
    let all_blobs: Vec<Vec<Blob>> = cases.iter().map(CaseRecord::blobs).collect();
    for (c, blobs) in cases.iter().zip(&all_blobs) {
        let length: u64 = blobs.iter().map(|b| b.encoded_len() as u64).sum();
        entries.push(CaseEntry {
            id: c.id,
            split: c.split,
            shape: c.shape,
            conditions: c.conditions,
            offset,
            length,
            blob_count: blobs.len() as u64,
        });
        offset += length;
    }
    let manifest = DatasetManifest { format_version: DATASET_VERSION, generator, stats, cases: entries };
    let header = canonical_json(&manifest)?;
    write_atomic(path, |w| {
        write_preamble(w, DATASET_MAGIC, DATASET_VERSION, &header)?;
        for blobs in &all_blobs {
            for b in blobs {
                b.write_to(w)?;
            }
        }
        Ok(())
    })?;
    Ok(manifest)
}

/// Open handle on an ABPT file; cases are read lazily.
#[derive(Debug, Clone)]
pub struct Dataset {
    path: PathBuf,
    manifest: DatasetManifest,
    blob_start: u64,
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| not_found_or_io(e, path))?;
        let file_len = file.metadata()?.len();
        let mut r = BufReader::new(file);
        let value = read_preamble(&mut r, DATASET_MAGIC, DATASET_VERSION)?;
        let manifest: DatasetManifest =
            serde_json::from_value(value).map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
        let blob_start = r.stream_position()?;
        let mut expected = 0u64;
        for c in &manifest.cases {
            if c.offset != expected {
                return Err(Error::Corrupt(format!("case {} offset {} breaks contiguity", c.id, c.offset)));
            }
            expected = c.offset + c.length;
        }
        if blob_start + expected != file_len {
            return Err(Error::Corrupt(format!("file holds {} bytes, manifest describes {}", file_len, blob_start + expected)));
        }
        Ok(Self { path: path.to_path_buf(), manifest, blob_start })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_case(&self, id: u64) -> Result<CaseRecord> {
        let e = self
            .manifest
            .cases
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::NotFound(format!("case {id} in {}", self.path.display())))?;
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(self.blob_start + e.offset))?;
        let mut buf = vec![0; e.length as usize];
        blob::read_exact(&mut f, &mut buf)?;
        let mut r = buf.as_slice();
        let blobs = (0..e.blob_count).map(|_| Blob::read_from(&mut r)).collect::<Result<Vec<_>>>()?;
        if !r.is_empty() {
            return Err(Error::Corrupt(format!("case {id} has trailing bytes")));
        }
        Ok(CaseRecord {
            id,
            shape: e.shape,
            conditions: e.conditions,
            split: e.split,
            solution: CaseView::from_blobs("solution", &blobs)?,
            cad: CaseView::from_blobs("cad", &blobs)?,
        })
    }

    pub fn read_split(&self, split: Split) -> Result<Vec<CaseRecord>> {
        self.manifest.ids(Some(split)).into_iter().map(|id| self.read_case(id)).collect()
    }
}

/// Reads one case from the dataset at `path`.
pub fn read_case(path: &Path, id: u64) -> Result<CaseRecord> {
    Dataset::open(path)?.read_case(id)
}
