//! Per-clip vector-quantized cluster IDs across all feature spaces.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{assign, Clustering, StoreSpace};
use crate::store::{Space, StoreReader};

/// One row per clip, one cluster ID per space. IDs for space `s` lie in `0..ks[s]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentTable {
    clip_ids: Vec<String>,
    spaces: Vec<Space>,
    ks: Vec<usize>,
    ids: Vec<u32>,
}

impl AssignmentTable {
    pub fn new(clip_ids: Vec<String>, spaces: Vec<Space>, ks: Vec<usize>, ids: Vec<u32>) -> Result<Self> {
        if spaces.len() != ks.len() {
            return Err(Error::invalid("one k per space is required"));
        }
        if ids.len() != clip_ids.len() * spaces.len() {
            return Err(Error::DimensionMismatch {
                what: "assignment ids".into(),
                expected: clip_ids.len() * spaces.len(),
                got: ids.len(),
            });
        }
        if !spaces.is_empty() {
            for row in ids.chunks_exact(spaces.len()) {
                for (&id, &k) in row.iter().zip(&ks) {
                    if id as usize >= k {
                        return Err(Error::InvalidClusterId { id, k });
                    }
                }
            }
        }
        Ok(Self {
            clip_ids,
            spaces,
            ks,
            ids,
        })
    }

    /// Builds a table from per-space ID columns.
    pub fn from_columns(clip_ids: Vec<String>, columns: Vec<(Space, usize, Vec<u32>)>) -> Result<Self> {
        let n = clip_ids.len();
        if let Some((s, _, col)) = columns.iter().find(|(_, _, c)| c.len() != n) {
            return Err(Error::DimensionMismatch {
                what: format!("assignment column {s}"),
                expected: n,
                got: col.len(),
            });
        }
        let width = columns.len();
        let mut ids = vec![0u32; n * width];
        for (j, (_, _, col)) in columns.iter().enumerate() {
            for (i, &id) in col.iter().enumerate() {
                ids[i * width + j] = id;
            }
        }
        let spaces = columns.iter().map(|c| c.0).collect();
        let ks = columns.iter().map(|c| c.1).collect();
        Self::new(clip_ids, spaces, ks, ids)
    }

    pub fn len(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.spaces.len()
    }

    pub fn spaces(&self) -> &[Space] {
        &self.spaces
    }

    pub fn ks(&self) -> &[usize] {
        &self.ks
    }

    pub fn clip_ids(&self) -> &[String] {
        &self.clip_ids
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let w = self.width();
        &self.ids[i * w..(i + 1) * w]
    }

    pub fn space_index(&self, space: Space) -> Option<usize> {
        self.spaces.iter().position(|&s| s == space)
    }

    pub fn column(&self, space_index: usize) -> impl Iterator<Item = u32> + '_ {
        let w = self.width();
        self.ids.iter().skip(space_index).step_by(w.max(1)).copied()
    }

    /// Row indices of the given clip IDs.
    pub fn rows_of(&self, clip_ids: &[String]) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .clip_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        clip_ids
            .iter()
            .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::UnknownClip(id.clone())))
            .collect()
    }

    /// Rows `rows` only, in the given order.
    pub fn subset(&self, rows: &[usize]) -> AssignmentTable {
        let mut ids = Vec::with_capacity(rows.len() * self.width());
        for &r in rows {
            ids.extend_from_slice(self.row(r));
        }
        AssignmentTable {
            clip_ids: rows.iter().map(|&r| self.clip_ids[r].clone()).collect(),
            spaces: self.spaces.clone(),
            ks: self.ks.clone(),
            ids,
        }
    }

    /// Keeps only the listed spaces, in the listed order.
    pub fn project(&self, spaces: &[Space]) -> Result<AssignmentTable> {
        let cols = spaces
            .iter()
            .map(|&s| {
                self.space_index(s).ok_or(Error::UnknownLayer {
                    modality: s.modality.to_string(),
                    layer: s.layer,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ids = Vec::with_capacity(self.len() * cols.len());
        for i in 0..self.len() {
            let row = self.row(i);
            ids.extend(cols.iter().map(|&c| row[c]));
        }
        Ok(AssignmentTable {
            clip_ids: self.clip_ids.clone(),
            spaces: spaces.to_vec(),
            ks: cols.iter().map(|&c| self.ks[c]).collect(),
            ids,
        })
    }

    /// Text format: a `#spaces` header of `space/k` tokens, then one
    /// tab-separated `clip_id id id ...` line per clip.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header: Vec<String> = self
            .spaces
            .iter()
            .zip(&self.ks)
            .map(|(s, k)| format!("{s}/{k}"))
            .collect();
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "#spaces\t{}", header.join("\t"))?;
            for i in 0..self.len() {
                write!(w, "{}", self.clip_ids[i])?;
                for id in self.row(i) {
                    write!(w, "\t{id}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .ok_or_else(|| Error::Format("empty assignment file".into()))?;
        let mut fields = header.split('\t');
        if fields.next() != Some("#spaces") {
            return Err(Error::Format("assignment file lacks #spaces header".into()));
        }
        let mut spaces = Vec::new();
        let mut ks = Vec::new();
        for tok in fields {
            let (s, k) = tok
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("bad space token {tok:?}")))?;
            spaces.push(s.parse::<Space>()?);
            ks.push(k.parse::<usize>().map_err(|_| Error::Format(format!("bad k in {tok:?}")))?);
        }
        let mut clip_ids = Vec::new();
        let mut ids = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let mut f = line.split('\t');
            clip_ids.push(f.next().unwrap_or_default().to_string());
            let before = ids.len();
            for tok in f {
                ids.push(tok.parse::<u32>().map_err(|_| Error::Format(format!("bad cluster id {tok:?}")))?);
            }
            if ids.len() - before != spaces.len() {
                return Err(Error::Format(format!("row {:?} has the wrong width", clip_ids.last())));
            }
        }
        Self::new(clip_ids, spaces, ks, ids)
    }
}

/// Assigns the clips of `reader` (all of them, or `rows` in that order) in every
/// declared space. Requires one clustering per space of the store's layer spec,
/// matched by `Clustering::space`.
pub fn build_assignment_table(
    reader: &StoreReader,
    clusterings: &[Clustering],
    rows: Option<&[usize]>,
) -> Result<AssignmentTable> {
    let mut columns = Vec::new();
    for space in reader.layer_spec().spaces() {
        let model = clusterings
            .iter()
            .find(|c| c.space == Some(space))
            .ok_or_else(|| Error::invalid(format!("no clustering for space {space}")))?;
        let source = StoreSpace { rows, ..StoreSpace::new(reader, space) };
        columns.push((space, model.k, assign(model, &source)?));
    }
    let ids = match rows {
        Some(rows) => rows.iter().map(|&r| reader.clip_ids()[r].clone()).collect(),
        None => reader.clip_ids().to_vec(),
    };
    AssignmentTable::from_columns(ids, columns)
}
