//! On-disk dataset layout.
//!
//! ```text
//! DIR/manifest.tsv        one line per volume: id, path, n_slices, anomaly kind or "none"
//! DIR/volumes/<id>.ubrv   volume container (training-visible)
//! DIR/latent.ubrz         ground-truth latent sidecar (never read by training)
//! DIR/labels.csv          per-slice band labels derived from the latents
//! ```
//!
//! The volume container is `"UBRV" | u32 version | u32 n | u32 H | u32 W |
//! f64 spacing | n·H·W f64`, all little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{generate_volume, inject_anomaly, AnomalyClass, AnomalyKind, PhantomSpec, Volume};
use crate::error::{Result, UbrError};
use crate::rng;

pub const VOLUME_MAGIC: &[u8; 4] = b"UBRV";
pub const VOLUME_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const LATENT_SIDECAR_FILE: &str = "latent.ubrz";
pub const LABELS_FILE: &str = "labels.csv";
const MANIFEST_COMMENT: &str = "ubr manifest v1";
const SIDECAR_COMMENT: &str = "ubr latent sidecar v1";

/// Body-zone band of a latent coordinate: thirds of the axis.
pub fn band_of(z: f64) -> u8 {
    if z < 1.0 / 3.0 {
        0
    } else if z < 2.0 / 3.0 {
        1
    } else {
        2
    }
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 8 * volume.slices.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for v in [volume.len(), volume.height, volume.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&volume.spacing.to_le_bytes());
    for p in &volume.slices {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    fs::write(path, encode_volume(volume)).map_err(|e| UbrError::io(path, e))
}

pub fn read_volume(path: &Path, id: &str) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| UbrError::io(path, e))?;
    if bytes.len() < 28 || &bytes[..4] != VOLUME_MAGIC {
        return Err(UbrError::format(path, "not a volume container"));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let version = u32_at(4) as u32;
    if version != VOLUME_VERSION {
        return Err(UbrError::format(path, format!("unsupported volume version {version}")));
    }
    let (n, h, w) = (u32_at(8), u32_at(12), u32_at(16));
    let spacing = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let expected = 28 + 8 * n * h * w;
    if bytes.len() != expected || n == 0 || h == 0 || w == 0 {
        return Err(UbrError::format(
            path,
            format!("volume of {n}×{h}×{w} needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let slices = bytes[28..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Volume {
        id: id.to_string(),
        height: h,
        width: w,
        spacing,
        slices,
        latent: None,
        anomaly: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the dataset directory.
    pub path: PathBuf,
    pub n_slices: usize,
    pub anomaly: Option<AnomalyClass>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    path: String,
    n_slices: usize,
    anomaly: String,
}

/// Tab-separated writer with a leading `#` comment line. `flexible` allows
/// records of varying length and suppresses the header row.
fn tsv_writer(path: &Path, comment: &str, flexible: bool) -> Result<csv::Writer<fs::File>> {
    let mut file = fs::File::create(path).map_err(|e| UbrError::io(path, e))?;
    writeln!(file, "# {comment}").map_err(|e| UbrError::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .delimiter(b'\t')
        .flexible(flexible)
        .has_headers(!flexible)
        .from_writer(file))
}

fn tsv_reader(path: &Path, headers: bool) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| UbrError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .comment(Some(b'#'))
        .has_headers(headers)
        .flexible(!headers)
        .from_reader(file))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = tsv_writer(path, MANIFEST_COMMENT, false)?;
    for e in entries {
        let row = ManifestRow {
            id: e.id.clone(),
            path: e.path.to_string_lossy().into_owned(),
            n_slices: e.n_slices,
            anomaly: e.anomaly.map_or("none", AnomalyClass::name).to_string(),
        };
        w.serialize(row).map_err(|e| UbrError::csv(path, e))?;
    }
    w.flush().map_err(|e| UbrError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    tsv_reader(path, true)?
        .deserialize::<ManifestRow>()
        .map(|row| {
            let row = row.map_err(|e| UbrError::csv(path, e))?;
            let anomaly = match row.anomaly.as_str() {
                "none" => None,
                other => Some(
                    other
                        .parse()
                        .map_err(|_| UbrError::format(path, format!("volume `{}`: unknown anomaly kind `{other}`", row.id)))?,
                ),
            };
            Ok(ManifestEntry {
                id: row.id,
                path: PathBuf::from(row.path),
                n_slices: row.n_slices,
                anomaly,
            })
        })
        .collect()
}

/// One tab-separated line per volume: id, slice count, then the latents.
pub fn write_latent_sidecar(path: &Path, volumes: &[Volume]) -> Result<()> {
    let mut w = tsv_writer(path, SIDECAR_COMMENT, true)?;
    for v in volumes {
        let z = v
            .latent
            .as_ref()
            .ok_or_else(|| UbrError::InvalidArgument(format!("volume `{}` has no latent coordinates", v.id)))?;
        let mut record = vec![v.id.clone(), z.len().to_string()];
        // Display for f64 is the shortest round-tripping form.
        record.extend(z.iter().map(f64::to_string));
        w.write_record(&record).map_err(|e| UbrError::csv(path, e))?;
    }
    w.flush().map_err(|e| UbrError::io(path, e))
}

pub fn read_latent_sidecar(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for record in tsv_reader(path, false)?.records() {
        let record = record.map_err(|e| UbrError::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |what: &str| UbrError::format(path, format!("line {line}: {what}"));
        let id = record.get(0).ok_or_else(|| bad("missing id"))?;
        let n: usize = record.get(1).and_then(|f| f.parse().ok()).ok_or_else(|| bad("missing slice count"))?;
        let z = record
            .iter()
            .skip(2)
            .map(str::parse)
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| bad("bad latent value"))?;
        if z.len() != n {
            return Err(bad(&format!("declares {n} values, has {}", z.len())));
        }
        out.insert(id.to_string(), z);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub volume_id: String,
    pub slice_index: usize,
    pub class: u8,
}

/// Per-slice band labels, `volume_id,slice_index,class`.
pub fn write_labels(path: &Path, volumes: &[Volume]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| UbrError::csv(path, e))?;
    for v in volumes {
        let z = v
            .latent
            .as_ref()
            .ok_or_else(|| UbrError::InvalidArgument(format!("volume `{}` has no latent coordinates", v.id)))?;
        for (i, &zi) in z.iter().enumerate() {
            let record = LabelRecord {
                volume_id: v.id.clone(),
                slice_index: i,
                class: band_of(zi),
            };
            w.serialize(record).map_err(|e| UbrError::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| UbrError::io(path, e))
}

/// Reads a labels CSV into `volume_id → per-slice class`.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| UbrError::csv(path, e))?;
    let mut rows: BTreeMap<String, Vec<(usize, u8)>> = BTreeMap::new();
    for record in reader.deserialize::<LabelRecord>() {
        let r = record.map_err(|e| UbrError::csv(path, e))?;
        if r.class > 2 {
            return Err(UbrError::format(path, format!("volume `{}` slice {}: class must be 0, 1 or 2", r.volume_id, r.slice_index)));
        }
        rows.entry(r.volume_id).or_default().push((r.slice_index, r.class));
    }
    rows.into_iter()
        .map(|(id, mut r)| {
            r.sort_unstable();
            if r.iter().enumerate().any(|(i, &(idx, _))| i != idx) {
                return Err(UbrError::format(path, format!("volume `{id}`: slice indices must be 0..n without gaps")));
            }
            Ok((id, r.into_iter().map(|(_, c)| c).collect()))
        })
        .collect()
}

/// In-memory collection of volumes sharing one slice size.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    volumes: Vec<Volume>,
}

impl Dataset {
    pub fn new(volumes: Vec<Volume>) -> Result<Self> {
        if let Some(first) = volumes.first() {
            if let Some(v) = volumes.iter().find(|v| (v.height, v.width) != (first.height, first.width)) {
                return Err(UbrError::InvalidArgument(format!(
                    "volume `{}` is {}×{}, expected {}×{}",
                    v.id, v.height, v.width, first.height, first.width
                )));
            }
        }
        Ok(Dataset { volumes })
    }

    /// Loads the training-visible part of a dataset directory. Latents are
    /// not read; anomaly labels come from the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = read_manifest(&dir.join(MANIFEST_FILE))?;
        let mut volumes = Vec::with_capacity(entries.len());
        for e in entries {
            let path = dir.join(&e.path);
            let mut v = read_volume(&path, &e.id).map_err(|err| match err {
                UbrError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                    UbrError::format(path.clone(), format!("volume `{}` listed in the manifest is missing", e.id))
                }
                other => other,
            })?;
            if v.len() != e.n_slices {
                return Err(UbrError::format(
                    &path,
                    format!("manifest lists {} slices for `{}`, file has {}", e.n_slices, e.id, v.len()),
                ));
            }
            v.anomaly = e.anomaly;
            volumes.push(v);
        }
        Self::new(volumes)
    }

    pub fn volumes(&self) -> &[Volume] {
        &self.volumes
    }

    pub fn into_volumes(self) -> Vec<Volume> {
        self.volumes
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn image_size(&self) -> Option<[usize; 2]> {
        self.volumes.first().map(|v| [v.height, v.width])
    }

    pub fn get(&self, id: &str) -> Option<&Volume> {
        self.volumes.iter().find(|v| v.id == id)
    }

    pub fn attach_latents(&mut self, latents: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for v in &mut self.volumes {
            let z = latents.get(&v.id).ok_or_else(|| UbrError::UnknownVolume(v.id.clone()))?;
            if z.len() != v.len() {
                return Err(UbrError::InvalidArgument(format!(
                    "sidecar has {} latents for `{}` with {} slices",
                    z.len(),
                    v.id,
                    v.len()
                )));
            }
            v.latent = Some(z.clone());
        }
        Ok(())
    }

    /// Generates `n` volumes; each is independently anomalous with
    /// probability `anomaly_fraction`, its kind drawn uniformly from `kinds`.
    pub fn generate(n: usize, spec: &PhantomSpec, anomaly_fraction: f64, kinds: &[AnomalyClass], seed: u64) -> Result<Self> {
        spec.validate()?;
        if !(0.0..=1.0).contains(&anomaly_fraction) {
            return Err(UbrError::InvalidArgument(format!("anomaly fraction {anomaly_fraction} is not in [0, 1]")));
        }
        if anomaly_fraction > 0.0 && kinds.is_empty() {
            return Err(UbrError::InvalidArgument("anomalies requested but no anomaly kinds enabled".into()));
        }
        let volumes = (0..n)
            .map(|i| {
                let mut r = rng::stream(seed, "phantom", i as u64);
                let v = generate_volume(format!("vol{i:05}"), spec, &mut r)?;
                let mut r = rng::stream(seed, "anomaly", i as u64);
                if anomaly_fraction > 0.0 && r.random_bool(anomaly_fraction) {
                    let class = kinds[r.random_range(0..kinds.len())];
                    let kind = AnomalyKind::sample(class, v.len(), &mut r);
                    inject_anomaly(v, kind, &mut r)
                } else {
                    Ok(v)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(volumes)
    }

    /// Writes manifest, volume containers, latent sidecar and band labels.
    pub fn write(&self, dir: &Path) -> Result<Vec<ManifestEntry>> {
        let vol_dir = dir.join("volumes");
        fs::create_dir_all(&vol_dir).map_err(|e| UbrError::io(&vol_dir, e))?;
        let mut entries = Vec::with_capacity(self.volumes.len());
        for v in &self.volumes {
            let rel = PathBuf::from("volumes").join(format!("{}.ubrv", v.id));
            write_volume(&dir.join(&rel), v)?;
            entries.push(ManifestEntry {
                id: v.id.clone(),
                path: rel,
                n_slices: v.len(),
                anomaly: v.anomaly,
            });
        }
        write_manifest(&dir.join(MANIFEST_FILE), &entries)?;
        if self.volumes.iter().all(|v| v.latent.is_some()) {
            write_latent_sidecar(&dir.join(LATENT_SIDECAR_FILE), &self.volumes)?;
            write_labels(&dir.join(LABELS_FILE), &self.volumes)?;
        }
        Ok(entries)
    }
}

/// Generates and writes a dataset directory; returns its manifest.
pub fn generate_dataset(
    dir: &Path,
    n_volumes: usize,
    spec: &PhantomSpec,
    anomaly_fraction: f64,
    kinds: &[AnomalyClass],
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    if n_volumes == 0 {
        return Err(UbrError::InvalidArgument("a dataset needs at least one volume".into()));
    }
    Dataset::generate(n_volumes, spec, anomaly_fraction, kinds, seed)?.write(dir)
}
