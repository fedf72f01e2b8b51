//! On-disk clip feature store.
//!
//! A store is two files: a fixed-stride binary feature file and a
//! line-delimited metadata sidecar (`<store>.meta.tsv`). Row `i` of the
//! sidecar describes feature row `i`.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! 0   magic            8 bytes  "ACAVFS01"
//! 8   format_version   u32
//! 12  clip_count       u64
//! 20  checksum         u64      FNV-1a over the feature block
//! 28  space_count      u32
//! 32  spaces           space_count x (modality u32, layer u32, dim u32)
//! ..  feature block    clip_count x stride, stride = 4 * sum(dim)
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ACAVFS01";
pub const FORMAT_VERSION: u32 = 1;
/// Marker written to the sidecar for absent optional fields.
pub const ABSENT: &str = "\\N";

const FIXED_HEADER: u64 = 32;
const SPACE_ENTRY: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    fn code(self) -> u32 {
        match self {
            Modality::Audio => 0,
            Modality::Visual => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Modality::Audio),
            1 => Ok(Modality::Visual),
            other => Err(Error::Format(format!("unknown modality code {other}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "audio" | "a" => Ok(Modality::Audio),
            "visual" | "video" | "v" => Ok(Modality::Visual),
            other => Err(Error::invalid(format!("unknown modality {other:?}"))),
        }
    }
}

/// One feature space: a (modality, layer) pair. Layers are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Space {
    pub modality: Modality,
    pub layer: usize,
}

impl Space {
    pub fn new(modality: Modality, layer: usize) -> Self {
        Self { modality, layer }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.modality, self.layer)
    }
}

impl FromStr for Space {
    type Err = Error;

    /// Parses `audio3`, `audio:3` or `visual:5`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let split = s
            .find(|c: char| c.is_ascii_digit())
            .ok_or_else(|| Error::invalid(format!("space {s:?} has no layer index")))?;
        let (m, l) = s.split_at(split);
        let modality = m.trim_end_matches(':').parse()?;
        let layer = l
            .parse()
            .map_err(|_| Error::invalid(format!("bad layer index in {s:?}")))?;
        Ok(Space::new(modality, layer))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub space: Space,
    pub dim: usize,
}

/// Ordered list of feature spaces carried by every record of a store.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerSpec {
    entries: Vec<LayerEntry>,
}

impl LayerSpec {
    pub fn new(entries: Vec<LayerEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.dim == 0 {
                return Err(Error::invalid(format!("space {} has zero dim", e.space)));
            }
            if e.space.layer == 0 {
                return Err(Error::invalid("layer indices are 1-based"));
            }
            if !seen.insert(e.space) {
                return Err(Error::invalid(format!("space {} listed twice", e.space)));
            }
        }
        Ok(Self { entries })
    }

    /// `layers` audio and `layers` visual spaces, audio first, all of width `dim`.
    pub fn symmetric(layers: usize, dim: usize) -> Self {
        let entries = [Modality::Audio, Modality::Visual]
            .into_iter()
            .flat_map(|m| (1..=layers).map(move |l| LayerEntry { space: Space::new(m, l), dim }))
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[LayerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn spaces(&self) -> impl Iterator<Item = Space> + '_ {
        self.entries.iter().map(|e| e.space)
    }

    pub fn position(&self, space: Space) -> Option<usize> {
        self.entries.iter().position(|e| e.space == space)
    }

    /// Highest layer index present for `modality` (the penultimate feature layer).
    pub fn top_layer(&self, modality: Modality) -> Option<usize> {
        self.entries
            .iter()
            .filter(|e| e.space.modality == modality)
            .map(|e| e.space.layer)
            .max()
    }

    fn stride_floats(&self) -> usize {
        self.entries.iter().map(|e| e.dim).sum()
    }

    fn offset_floats(&self, index: usize) -> usize {
        self.entries[..index].iter().map(|e| e.dim).sum()
    }
}

/// Per-clip metadata. Optional fields are `None` when unknown.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub source_id: String,
    pub duration_s: f64,
    pub language: Option<String>,
    pub category: Option<String>,
    pub flags: BTreeSet<String>,
}

impl ClipRecord {
    pub fn new(clip_id: impl Into<String>, duration_s: f64) -> Self {
        let clip_id = clip_id.into();
        Self {
            source_id: clip_id.clone(),
            clip_id,
            duration_s,
            ..Default::default()
        }
    }

    /// Sidecar line (without the trailing newline).
    pub fn to_line(&self) -> Result<String> {
        for field in [&self.clip_id, &self.source_id]
            .into_iter()
            .chain(self.language.iter())
            .chain(self.category.iter())
            .chain(self.flags.iter())
        {
            if field.contains(['\t', '\n', '\r']) {
                return Err(Error::invalid(format!("field {field:?} contains a tab or newline")));
            }
        }
        if self.flags.iter().any(|f| f.contains(',') || f.is_empty()) {
            return Err(Error::invalid("flags must be non-empty and comma-free"));
        }
        let opt = |o: &Option<String>| o.clone().unwrap_or_else(|| ABSENT.to_string());
        let flags = if self.flags.is_empty() {
            ABSENT.to_string()
        } else {
            self.flags.iter().cloned().collect::<Vec<_>>().join(",")
        };
        Ok(format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.clip_id,
            self.source_id,
            self.duration_s,
            opt(&self.language),
            opt(&self.category),
            flags
        ))
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!(
                "metadata line has {} fields, expected 6: {line:?}",
                fields.len()
            )));
        }
        let opt = |s: &str| (s != ABSENT).then(|| s.to_string());
        let duration_s = fields[2]
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("bad duration {:?}", fields[2])))?;
        let flags = if fields[5] == ABSENT || fields[5].is_empty() {
            BTreeSet::new()
        } else {
            fields[5].split(',').map(str::to_string).collect()
        };
        Ok(Self {
            clip_id: fields[0].to_string(),
            source_id: fields[1].to_string(),
            duration_s,
            language: opt(fields[3]),
            category: opt(fields[4]),
            flags,
        })
    }
}

/// Reads a metadata sidecar (or any file in the same format).
pub fn read_metadata(path: &Path) -> Result<Vec<ClipRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        out.push(ClipRecord::parse_line(&line)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub clip_count: usize,
    pub layer_spec: LayerSpec,
    pub format_version: u32,
    pub checksum: u64,
}

pub fn sidecar_path(store: &Path) -> PathBuf {
    let mut s = store.as_os_str().to_owned();
    s.push(".meta.tsv");
    PathBuf::from(s)
}

#[derive(Debug, Clone, Copy)]
struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Single-writer store builder. Records are validated before any byte is written.
pub struct StoreWriter {
    path: PathBuf,
    features: BufWriter<File>,
    meta: BufWriter<File>,
    layer_spec: LayerSpec,
    ids: HashSet<String>,
    count: usize,
    hash: Fnv64,
    row: Vec<u8>,
}

impl StoreWriter {
    pub fn create(path: impl AsRef<Path>, layer_spec: LayerSpec) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let meta_path = sidecar_path(&path);
        let meta = File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut features = BufWriter::new(file);
        let mut header = Vec::with_capacity(header_len(&layer_spec) as usize);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&0u64.to_le_bytes());
        header.extend_from_slice(&0u64.to_le_bytes());
        header.extend_from_slice(&(layer_spec.len() as u32).to_le_bytes());
        for e in layer_spec.entries() {
            header.extend_from_slice(&e.space.modality.code().to_le_bytes());
            header.extend_from_slice(&(e.space.layer as u32).to_le_bytes());
            header.extend_from_slice(&(e.dim as u32).to_le_bytes());
        }
        features.write_all(&header).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            features,
            meta: BufWriter::new(meta),
            layer_spec,
            ids: HashSet::new(),
            count: 0,
            hash: Fnv64::new(),
            row: Vec::new(),
        })
    }

    /// Appends one clip. `features[i]` belongs to `layer_spec.entries()[i]`.
    pub fn append(&mut self, record: &ClipRecord, features: &[Vec<f32>]) -> Result<()> {
        if features.len() != self.layer_spec.len() {
            return Err(Error::DimensionMismatch {
                what: format!("feature spaces of clip {}", record.clip_id),
                expected: self.layer_spec.len(),
                got: features.len(),
            });
        }
        for (entry, v) in self.layer_spec.entries().iter().zip(features) {
            if v.len() != entry.dim {
                return Err(Error::DimensionMismatch {
                    what: format!("clip {} space {}", record.clip_id, entry.space),
                    expected: entry.dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "clip {} space {}",
                    record.clip_id, entry.space
                )));
            }
        }
        if !(record.duration_s >= 0.0) {
            return Err(Error::invalid(format!(
                "clip {} has negative or NaN duration",
                record.clip_id
            )));
        }
        if self.ids.contains(&record.clip_id) {
            return Err(Error::DuplicateClip(record.clip_id.clone()));
        }
        let line = record.to_line()?;

        self.row.clear();
        for v in features {
            for x in v {
                self.row.extend_from_slice(&x.to_le_bytes());
            }
        }
        self.hash.update(&self.row);
        self.features
            .write_all(&self.row)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(self.meta, "{line}").map_err(|e| Error::io(sidecar_path(&self.path), e))?;
        self.ids.insert(record.clip_id.clone());
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<StoreManifest> {
        let StoreWriter {
            path,
            features,
            mut meta,
            layer_spec,
            count,
            hash,
            ..
        } = self;
        meta.flush().map_err(|e| Error::io(sidecar_path(&path), e))?;
        let mut file = features
            .into_inner()
            .map_err(|e| Error::io(&path, e.into_error()))?;
        file.seek(SeekFrom::Start(12)).map_err(|e| Error::io(&path, e))?;
        file.write_all(&(count as u64).to_le_bytes())
            .and_then(|_| file.write_all(&hash.0.to_le_bytes()))
            .and_then(|_| file.sync_all())
            .map_err(|e| Error::io(&path, e))?;
        Ok(StoreManifest {
            clip_count: count,
            layer_spec,
            format_version: FORMAT_VERSION,
            checksum: hash.0,
        })
    }
}

fn header_len(spec: &LayerSpec) -> u64 {
    FIXED_HEADER + SPACE_ENTRY * spec.len() as u64
}

/// Writes a complete store from `(metadata, per-space features)` records.
pub fn write_store<I>(path: impl AsRef<Path>, layer_spec: LayerSpec, records: I) -> Result<StoreManifest>
where
    I: IntoIterator<Item = (ClipRecord, Vec<Vec<f32>>)>,
{
    let mut writer = StoreWriter::create(path, layer_spec)?;
    for (record, features) in records {
        writer.append(&record, &features)?;
    }
    writer.finish()
}

/// Read handle over a store. Cheap to clone; every read opens its own file handle,
/// so a reader can be shared across worker threads.
#[derive(Debug, Clone)]
pub struct StoreReader {
    path: PathBuf,
    manifest: StoreManifest,
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl StoreReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut fixed = [0u8; FIXED_HEADER as usize];
        file.read_exact(&mut fixed).map_err(|e| Error::io(&path, e))?;
        if &fixed[..8] != MAGIC {
            return Err(Error::Format(format!("{} is not a feature store", path.display())));
        }
        let u32_at = |b: &[u8], at: usize| u32::from_le_bytes(b[at..at + 4].try_into().unwrap());
        let u64_at = |b: &[u8], at: usize| u64::from_le_bytes(b[at..at + 8].try_into().unwrap());
        let format_version = u32_at(&fixed, 8);
        if format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {format_version}")));
        }
        let clip_count = u64_at(&fixed, 12) as usize;
        let checksum = u64_at(&fixed, 20);
        let spaces = u32_at(&fixed, 28) as usize;
        let mut raw = vec![0u8; spaces * SPACE_ENTRY as usize];
        file.read_exact(&mut raw).map_err(|e| Error::io(&path, e))?;
        let entries = raw
            .chunks_exact(SPACE_ENTRY as usize)
            .map(|c| {
                Ok(LayerEntry {
                    space: Space::new(Modality::from_code(u32_at(c, 0))?, u32_at(c, 4) as usize),
                    dim: u32_at(c, 8) as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let layer_spec = LayerSpec::new(entries).map_err(|e| Error::Format(e.to_string()))?;

        let expected_len =
            header_len(&layer_spec) + (clip_count * layer_spec.stride_floats() * 4) as u64;
        let actual_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        if actual_len != expected_len {
            return Err(Error::Format(format!(
                "store is {actual_len} bytes, header implies {expected_len}"
            )));
        }

        let meta_path = sidecar_path(&path);
        let meta = File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut ids = Vec::with_capacity(clip_count);
        for line in BufReader::new(meta).lines() {
            let line = line.map_err(|e| Error::io(&meta_path, e))?;
            if line.is_empty() {
                continue;
            }
            let id = line.split('\t').next().unwrap_or_default().to_string();
            ids.push(id);
        }
        if ids.len() != clip_count {
            return Err(Error::Format(format!(
                "sidecar lists {} clips, store header {clip_count}",
                ids.len()
            )));
        }
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self {
            path,
            manifest: StoreManifest {
                clip_count,
                layer_spec,
                format_version,
                checksum,
            },
            ids,
            index,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn layer_spec(&self) -> &LayerSpec {
        &self.manifest.layer_spec
    }

    pub fn len(&self) -> usize {
        self.manifest.clip_count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.clip_count == 0
    }

    pub fn clip_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, clip_id: &str) -> Option<usize> {
        self.index.get(clip_id).copied()
    }

    pub fn dim(&self, space: Space) -> Result<usize> {
        let pos = self.space_position(space)?;
        Ok(self.layer_spec().entries()[pos].dim)
    }

    fn space_position(&self, space: Space) -> Result<usize> {
        self.layer_spec().position(space).ok_or(Error::UnknownLayer {
            modality: space.modality.to_string(),
            layer: space.layer,
        })
    }

    pub fn metadata(&self) -> Result<Vec<ClipRecord>> {
        read_metadata(&sidecar_path(&self.path))
    }

    /// Streams one space's vectors, in store order. With `clip_ids`, only those
    /// clips are yielded (still in store order).
    pub fn read_layer(
        &self,
        modality: Modality,
        layer: usize,
        clip_ids: Option<&[String]>,
    ) -> Result<LayerIter<'_>> {
        let space = Space::new(modality, layer);
        let indices = match clip_ids {
            None => None,
            Some(ids) => {
                let mut idx = ids
                    .iter()
                    .map(|id| self.index_of(id).ok_or_else(|| Error::UnknownClip(id.clone())))
                    .collect::<Result<Vec<_>>>()?;
                idx.sort_unstable();
                idx.dedup();
                Some(idx)
            }
        };
        self.read_layer_indices(space, indices)
    }

    /// Like [`read_layer`](Self::read_layer) but addressed by row index.
    pub fn read_layer_indices(&self, space: Space, indices: Option<Vec<usize>>) -> Result<LayerIter<'_>> {
        let pos = self.space_position(space)?;
        let spec = self.layer_spec();
        let dim = spec.entries()[pos].dim;
        if let Some(bad) = indices.as_ref().and_then(|ix| ix.iter().find(|&&i| i >= self.len())) {
            return Err(Error::invalid(format!("row {bad} out of range")));
        }
        let file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(LayerIter {
            reader: self,
            file: BufReader::with_capacity(1 << 16, file),
            dim,
            base: header_len(spec) + (spec.offset_floats(pos) * 4) as u64,
            stride: (spec.stride_floats() * 4) as u64,
            cursor: None,
            indices,
            next: 0,
            buf: vec![0u8; dim * 4],
        })
    }

    /// Recomputes the feature checksum and compares it with the header.
    pub fn verify(&self) -> Result<()> {
        let mut file = BufReader::new(File::open(&self.path).map_err(|e| Error::io(&self.path, e))?);
        file.seek(SeekFrom::Start(header_len(self.layer_spec())))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut hash = Fnv64::new();
        let mut chunk = vec![0u8; 1 << 16];
        loop {
            let n = file.read(&mut chunk).map_err(|e| Error::io(&self.path, e))?;
            if n == 0 {
                break;
            }
            hash.update(&chunk[..n]);
        }
        if hash.0 != self.manifest.checksum {
            return Err(Error::Format(format!(
                "checksum mismatch: header {:#x}, data {:#x}",
                self.manifest.checksum, hash.0
            )));
        }
        Ok(())
    }

    /// Loads one space fully into memory as 64-bit rows.
    pub fn load_space(&self, space: Space) -> Result<Dataset> {
        let dim = self.dim(space)?;
        let mut data = Vec::with_capacity(self.len() * dim);
        for item in self.read_layer_indices(space, None)? {
            let (_, v) = item?;
            data.extend(v.iter().map(|&x| f64::from(x)));
        }
        Dataset::new(data, dim)
    }
}

/// Streaming iterator over one space. Holds a single row buffer.
pub struct LayerIter<'a> {
    reader: &'a StoreReader,
    file: BufReader<File>,
    dim: usize,
    base: u64,
    stride: u64,
    cursor: Option<u64>,
    indices: Option<Vec<usize>>,
    next: usize,
    buf: Vec<u8>,
}

impl LayerIter<'_> {
    fn read_row(&mut self, row: usize) -> Result<Vec<f32>> {
        let offset = self.base + row as u64 * self.stride;
        let path = &self.reader.path;
        match self.cursor {
            Some(c) if c <= offset && offset - c < (1 << 20) => {
                self.file
                    .seek_relative((offset - c) as i64)
                    .map_err(|e| Error::io(path, e))?;
            }
            _ => {
                self.file
                    .seek(SeekFrom::Start(offset))
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        self.file.read_exact(&mut self.buf).map_err(|e| Error::io(path, e))?;
        self.cursor = Some(offset + self.buf.len() as u64);
        Ok(self
            .buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Iterator for LayerIter<'_> {
    type Item = Result<(String, Vec<f32>)>;

    fn next(&mut self) -> Option<Self::Item> {
        let row = match &self.indices {
            Some(ix) => *ix.get(self.next)?,
            None if self.next < self.reader.len() => self.next,
            None => return None,
        };
        self.next += 1;
        Some(self.read_row(row).map(|v| (self.reader.ids[row].clone(), v)))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let total = self.indices.as_ref().map_or(self.reader.len(), Vec::len);
        let left = total - self.next;
        (left, Some(left))
    }
}

/// Dense row-major set of 64-bit vectors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    data: Vec<f64>,
    dim: usize,
}

impl Dataset {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dataset dim must be positive"));
        }
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                what: "dataset buffer length".into(),
                expected: dim * (data.len() / dim + 1),
                got: data.len(),
            });
        }
        Ok(Self { data, dim })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "dataset row".into(),
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, dim.max(1))
    }

    pub fn with_dim(dim: usize) -> Self {
        Self { data: Vec::new(), dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim, "row width");
        self.data.extend_from_slice(row);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::with_dim(self.dim);
        for &i in indices {
            out.push(self.row(i));
        }
        out
    }

    /// Float32 copy of row `i`, as the store would hold it.
    pub fn row_f32(&self, i: usize) -> Vec<f32> {
        self.row(i).iter().map(|&x| x as f32).collect()
    }
}
