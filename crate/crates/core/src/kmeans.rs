//! K-means over one feature space: mini-batch SGD fitting with dead-centroid
//! reinitialization, Lloyd's algorithm as the in-memory reference, and
//! nearest-centroid assignment.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Dataset, Space, StoreReader};

/// Early-exit signal for batch visitors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// A source of equal-width vectors that can be replayed batch by batch.
pub trait VectorSource {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Visits consecutive row-major batches of at most `batch_size` rows, in source order.
    fn for_each_batch(&self, batch_size: usize, f: &mut dyn FnMut(&[f64]) -> Result<Flow>) -> Result<()>;
}

impl VectorSource for Dataset {
    fn dim(&self) -> usize {
        Dataset::dim(self)
    }

    fn len(&self) -> usize {
        Dataset::len(self)
    }

    fn for_each_batch(&self, batch_size: usize, f: &mut dyn FnMut(&[f64]) -> Result<Flow>) -> Result<()> {
        for chunk in self.as_slice().chunks(batch_size.max(1) * self.dim()) {
            if f(chunk)? == Flow::Stop {
                break;
            }
        }
        Ok(())
    }
}

/// One space of an on-disk store, streamed from disk on every pass.
/// With `rows`, only those rows are visited, in the given order.
#[derive(Debug, Clone, Copy)]
pub struct StoreSpace<'a> {
    pub reader: &'a StoreReader,
    pub space: Space,
    pub rows: Option<&'a [usize]>,
}

impl<'a> StoreSpace<'a> {
    pub fn new(reader: &'a StoreReader, space: Space) -> Self {
        Self { reader, space, rows: None }
    }

    pub fn with_rows(self, rows: &'a [usize]) -> Self {
        Self { rows: Some(rows), ..self }
    }
}

impl VectorSource for StoreSpace<'_> {
    fn dim(&self) -> usize {
        self.reader.dim(self.space).unwrap_or(0)
    }

    fn len(&self) -> usize {
        self.rows.map_or(self.reader.len(), <[usize]>::len)
    }

    fn for_each_batch(&self, batch_size: usize, f: &mut dyn FnMut(&[f64]) -> Result<Flow>) -> Result<()> {
        let dim = self.reader.dim(self.space)?;
        let mut buf = Vec::with_capacity(batch_size.max(1) * dim);
        for item in self.reader.read_layer_indices(self.space, self.rows.map(<[usize]>::to_vec))? {
            let (_, v) = item?;
            buf.extend(v.iter().map(|&x| f64::from(x)));
            if buf.len() == batch_size.max(1) * dim {
                if f(&buf)? == Flow::Stop {
                    return Ok(());
                }
                buf.clear();
            }
        }
        if !buf.is_empty() {
            f(&buf)?;
        }
        Ok(())
    }
}

/// Per-dimension affine rescaling applied before every distance computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &dyn VectorSource) -> Result<Self> {
        let dim = data.dim();
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        data.for_each_batch(4096, &mut |batch| {
            for row in batch.chunks_exact(dim) {
                n += 1;
                for j in 0..dim {
                    let d = row[j] - mean[j];
                    mean[j] += d / n as f64;
                    m2[j] += d * (row[j] - mean[j]);
                }
            }
            Ok(Flow::Continue)
        })?;
        let inv_std = m2
            .iter()
            .map(|&s| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, inv_std })
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..x.len() {
            out[j] = (x[j] - self.mean[j]) * self.inv_std[j];
        }
    }
}

/// A fitted set of centroids for one feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub space: Option<Space>,
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    /// Batches in which each centroid received at least one sample, since its last (re)initialization.
    pub update_counts: Vec<u64>,
    /// Batches elapsed since each centroid's last (re)initialization.
    pub steps_since_init: Vec<u64>,
    /// Batches processed since the fit started.
    pub step_count: u64,
    pub reinit_count: u64,
    pub rng_seed: u64,
    pub standardizer: Option<Standardizer>,
}

impl Clustering {
    pub fn from_centroids(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let k = centroids.len();
        if k == 0 {
            return Err(Error::invalid("at least one centroid is required"));
        }
        let dim = centroids[0].len();
        if let Some(bad) = centroids.iter().find(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch {
                what: "centroid".into(),
                expected: dim,
                got: bad.len(),
            });
        }
        let flat = centroids.concat();
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("centroids".into()));
        }
        Ok(Self {
            space: None,
            k,
            dim,
            centroids: flat,
            update_counts: vec![0; k],
            steps_since_init: vec![0; k],
            step_count: 0,
            reinit_count: 0,
            rng_seed: 0,
            standardizer: None,
        })
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Utilization rate of centroid `c` (1.0 before its first step).
    pub fn utilization(&self, c: usize) -> f64 {
        if self.steps_since_init[c] == 0 {
            1.0
        } else {
            self.update_counts[c] as f64 / self.steps_since_init[c] as f64
        }
    }

    /// Nearest centroid of a raw (unstandardized) vector and its squared distance.
    pub fn nearest(&self, x: &[f64]) -> (u32, f64) {
        match &self.standardizer {
            None => nearest(&self.centroids, self.dim, x),
            Some(s) => {
                let mut z = vec![0.0; x.len()];
                s.apply_into(x, &mut z);
                nearest(&self.centroids, self.dim, &z)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::new();
        buf.extend_from_slice(CLUSTERING_MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.k as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        let (has_space, modality, layer) = match self.space {
            Some(s) => (1u32, s.modality as u32, s.layer as u32),
            None => (0, 0, 0),
        };
        for v in [has_space, modality, layer, u32::from(self.standardizer.is_some())] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.step_count, self.reinit_count, self.rng_seed] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for x in &self.centroids {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for v in self.update_counts.iter().chain(&self.steps_since_init) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(s) = &self.standardizer {
            for x in s.mean.iter().chain(&s.inv_std) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { bytes: &bytes, at: 0 };
        if cur.take(8)? != CLUSTERING_MAGIC {
            return Err(Error::Format(format!("{} is not a clustering file", path.display())));
        }
        if cur.u32()? != 1 {
            return Err(Error::Format("unsupported clustering version".into()));
        }
        let k = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let has_space = cur.u32()?;
        let modality = cur.u32()?;
        let layer = cur.u32()? as usize;
        let has_std = cur.u32()? == 1;
        let step_count = cur.u64()?;
        let reinit_count = cur.u64()?;
        let rng_seed = cur.u64()?;
        let centroids = (0..k * dim).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        let update_counts = (0..k).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
        let steps_since_init = (0..k).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
        let standardizer = if has_std {
            let mean = (0..dim).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            let inv_std = (0..dim).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            Some(Standardizer { mean, inv_std })
        } else {
            None
        };
        let space = (has_space == 1).then(|| {
            let m = if modality == 0 {
                crate::store::Modality::Audio
            } else {
                crate::store::Modality::Visual
            };
            Space::new(m, layer)
        });
        Ok(Self {
            space,
            k,
            dim,
            centroids,
            update_counts,
            steps_since_init,
            step_count,
            reinit_count,
            rng_seed,
            standardizer,
        })
    }
}

const CLUSTERING_MAGIC: &[u8; 8] = b"ACAVKM01";

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Format("truncated clustering file".into()))?;
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lowest-index nearest centroid and its squared distance.
#[inline]
pub(crate) fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(centroid, x);
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

fn nearest_all(centroids: &[f64], dim: usize, batch: &[f64]) -> Vec<(u32, f64)> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch
            .par_chunks_exact(dim)
            .map(|x| nearest(centroids, dim, x))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.chunks_exact(dim).map(|x| nearest(centroids, dim, x)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub k: usize,
    /// Weight of the batch mean in the convex update.
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Reinitialize centroids whose utilization drops below `1/k^2`.
    pub reinit: bool,
    pub standardize: bool,
}

impl Default for SgdParams {
    fn default() -> Self {
        Self {
            k: 500,
            lr: 1e-2,
            epochs: 100,
            batch_size: 100_000,
            seed: 0,
            reinit: true,
            standardize: false,
        }
    }
}

impl SgdParams {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr <= 1.0) {
            return Err(Error::invalid(format!("lr {} outside (0, 1]", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

fn check_finite(batch: &[f64]) -> Result<()> {
    if batch.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("input vectors".into()));
    }
    Ok(())
}

fn bits(row: &[f64]) -> Vec<u64> {
    row.iter().map(|x| (x + 0.0).to_bits()).collect()
}

/// Picks `k` distinct rows, uniformly without replacement from the first batch;
/// later batches are consulted only if the first lacks `k` distinct rows.
fn init_from_stream(
    data: &dyn VectorSource,
    k: usize,
    batch_size: usize,
    std: Option<&Standardizer>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let dim = data.dim();
    let mut seen = HashSet::new();
    let mut chosen = Vec::with_capacity(k * dim);
    let mut z = vec![0.0; dim];
    data.for_each_batch(batch_size, &mut |batch| {
        check_finite(batch)?;
        let rows = batch.len() / dim;
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(rng);
        for r in order {
            let row = &batch[r * dim..(r + 1) * dim];
            let row = match std {
                Some(s) => {
                    s.apply_into(row, &mut z);
                    &z[..]
                }
                None => row,
            };
            if seen.insert(bits(row)) {
                chosen.extend_from_slice(row);
                if seen.len() == k {
                    return Ok(Flow::Stop);
                }
            }
        }
        Ok(Flow::Continue)
    })?;
    if seen.len() < k {
        return Err(Error::TooFewDistinct {
            needed: k,
            found: seen.len(),
        });
    }
    Ok(chosen)
}

/// Fits centroids by mini-batch SGD.
pub fn fit_sgd(data: &dyn VectorSource, params: &SgdParams) -> Result<Clustering> {
    fit_sgd_observed(data, params, &mut |_| {})
}

/// [`fit_sgd`] with a callback invoked after every batch (after any reinitialization).
pub fn fit_sgd_observed(
    data: &dyn VectorSource,
    params: &SgdParams,
    observer: &mut dyn FnMut(&Clustering),
) -> Result<Clustering> {
    params.validate()?;
    let dim = data.dim();
    if dim == 0 {
        return Err(Error::invalid("vector source has zero dim"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let standardizer = if params.standardize {
        Some(Standardizer::fit(data)?)
    } else {
        None
    };
    let k = params.k;
    let centroids = init_from_stream(data, k, params.batch_size, standardizer.as_ref(), &mut rng)?;
    let mut model = Clustering {
        space: None,
        k,
        dim,
        centroids,
        update_counts: vec![0; k],
        steps_since_init: vec![0; k],
        step_count: 0,
        reinit_count: 0,
        rng_seed: params.seed,
        standardizer,
    };
    let threshold = 1.0 / (k as f64 * k as f64);
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    let mut scratch = Vec::new();

    for _ in 0..params.epochs {
        data.for_each_batch(params.batch_size, &mut |raw| {
            check_finite(raw)?;
            let batch: &[f64] = match &model.standardizer {
                Some(s) => {
                    scratch.resize(raw.len(), 0.0);
                    for (x, z) in raw.chunks_exact(dim).zip(scratch.chunks_exact_mut(dim)) {
                        s.apply_into(x, z);
                    }
                    &scratch
                }
                None => raw,
            };
            sums.iter_mut().for_each(|s| *s = 0.0);
            counts.iter_mut().for_each(|c| *c = 0);
            let nearest = nearest_all(&model.centroids, dim, batch);
            for (row, &(c, _)) in batch.chunks_exact(dim).zip(&nearest) {
                let c = c as usize;
                counts[c] += 1;
                for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                    *s += x;
                }
            }
            let lr = params.lr;
            for c in 0..k {
                model.steps_since_init[c] += 1;
                if counts[c] == 0 {
                    continue;
                }
                model.update_counts[c] += 1;
                let count = counts[c] as f64;
                let centroid = &mut model.centroids[c * dim..(c + 1) * dim];
                // (1 - lr) m + lr mean, written so a centroid sitting on its batch mean stays put exactly
                for (m, s) in centroid.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *m += lr * (s / count - *m);
                }
            }
            model.step_count += 1;
            if params.reinit {
                let rows = batch.len() / dim;
                for c in 0..k {
                    if model.utilization(c) < threshold {
                        let r = rng.random_range(0..rows);
                        model.centroids[c * dim..(c + 1) * dim]
                            .copy_from_slice(&batch[r * dim..(r + 1) * dim]);
                        model.update_counts[c] = 0;
                        model.steps_since_init[c] = 0;
                        model.reinit_count += 1;
                    }
                }
            }
            observer(&model);
            Ok(Flow::Continue)
        })?;
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LloydParams {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for LloydParams {
    fn default() -> Self {
        Self {
            k: 500,
            max_iters: 100,
            tol: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LloydTrace {
    /// Mean squared distance to the nearest centroid, measured at each iteration's assignment step.
    pub objective: Vec<f64>,
    /// Largest centroid displacement per iteration.
    pub movement: Vec<f64>,
}

impl LloydTrace {
    pub fn iterations(&self) -> usize {
        self.objective.len()
    }
}

/// Lloyd's algorithm, initialized with `k` distinct rows drawn uniformly without replacement.
pub fn fit_lloyd(data: &Dataset, params: &LloydParams) -> Result<(Clustering, LloydTrace)> {
    if params.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let init = init_from_stream(data, params.k, data.len().max(1), None, &mut rng)?;
    let rows = init.chunks_exact(data.dim()).map(<[f64]>::to_vec).collect();
    let mut start = Clustering::from_centroids(rows)?;
    start.rng_seed = params.seed;
    fit_lloyd_from(data, start, params.max_iters, params.tol)
}

/// Lloyd iterations from given centroids until the largest displacement is `<= tol`.
/// Empty clusters are reseeded at the point farthest from its assigned centroid.
pub fn fit_lloyd_from(
    data: &Dataset,
    mut model: Clustering,
    max_iters: usize,
    tol: f64,
) -> Result<(Clustering, LloydTrace)> {
    check_finite(data.as_slice())?;
    if data.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            what: "lloyd input".into(),
            expected: model.dim,
            got: data.dim(),
        });
    }
    let (k, dim) = (model.k, model.dim);
    let n = data.len();
    let mut trace = LloydTrace {
        objective: Vec::new(),
        movement: Vec::new(),
    };
    for _ in 0..max_iters.max(1) {
        let nearest = nearest_all(&model.centroids, dim, data.as_slice());
        trace
            .objective
            .push(nearest.iter().map(|&(_, d)| d).sum::<f64>() / n.max(1) as f64);
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (row, &(c, _)) in data.rows().zip(&nearest) {
            counts[c as usize] += 1;
            for (s, x) in sums[c as usize * dim..(c as usize + 1) * dim].iter_mut().zip(row) {
                *s += x;
            }
        }
        let mut next = model.centroids.clone();
        let mut used = HashSet::new();
        for c in 0..k {
            let target = &mut next[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                let count = counts[c] as f64;
                for (t, s) in target.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *t = s / count;
                }
            } else if let Some(far) = (0..n)
                .filter(|i| !used.contains(i))
                .max_by(|&a, &b| nearest[a].1.total_cmp(&nearest[b].1).then(b.cmp(&a)))
            {
                used.insert(far);
                target.copy_from_slice(data.row(far));
            }
        }
        let movement = next
            .chunks_exact(dim)
            .zip(model.centroids.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        model.centroids = next;
        model.step_count += 1;
        for c in 0..k {
            model.steps_since_init[c] += 1;
            if counts[c] > 0 {
                model.update_counts[c] += 1;
            }
        }
        trace.movement.push(movement);
        if movement <= tol {
            break;
        }
    }
    Ok((model, trace))
}

/// Nearest-centroid IDs for every vector in `data`, in source order.
pub fn assign(model: &Clustering, data: &dyn VectorSource) -> Result<Vec<u32>> {
    if data.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            what: "assignment input".into(),
            expected: model.dim,
            got: data.dim(),
        });
    }
    let dim = model.dim;
    let mut out = Vec::with_capacity(data.len());
    let mut scratch = Vec::new();
    data.for_each_batch(8192, &mut |raw| {
        let batch: &[f64] = match &model.standardizer {
            Some(s) => {
                scratch.resize(raw.len(), 0.0);
                for (x, z) in raw.chunks_exact(dim).zip(scratch.chunks_exact_mut(dim)) {
                    s.apply_into(x, z);
                }
                &scratch
            }
            None => raw,
        };
        out.extend(nearest_all(&model.centroids, dim, batch).into_iter().map(|(c, _)| c));
        Ok(Flow::Continue)
    })?;
    Ok(out)
}

/// Mean squared distance from each vector to its nearest centroid.
pub fn quantization_error(model: &Clustering, data: &dyn VectorSource) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    let dim = model.dim;
    data.for_each_batch(8192, &mut |batch| {
        for row in batch.chunks_exact(dim) {
            total += model.nearest(row).1;
            n += 1;
        }
        Ok(Flow::Continue)
    })?;
    Ok(total / n.max(1) as f64)
}
