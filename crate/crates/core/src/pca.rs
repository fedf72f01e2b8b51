//! PCA projections and the projection-similarity ranking baselines.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrastive::{cosine, top_layers};
use crate::error::{Error, Result};
use crate::store::{Dataset, StoreReader};

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and matching unit eigenvectors (as rows).
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || total == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    (values, vectors)
}

/// Principal components of a dataset, with the largest-magnitude entry of
/// every component made positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `out_dim` rows of length `d`.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each component.
    pub variances: Vec<f64>,
    /// Components spanning directions of (numerically) zero variance. Their
    /// orientation is arbitrary and they project every sample to ~0.
    pub zero_variance: Vec<bool>,
}

pub fn fit_pca(data: &Dataset, out_dim: usize) -> Result<PcaModel> {
    let (n, d) = (data.len(), data.dim());
    if out_dim == 0 || out_dim > d {
        return Err(Error::invalid(format!("PCA output dimension {out_dim} must be in 1..={d}")));
    }
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two samples"));
    }
    let mut mean = vec![0.0; d];
    for row in data.rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in data.rows() {
        for ((c, x), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let (values, mut vectors) = symmetric_eigen(&cov, d);
    vectors.truncate(out_dim);
    for v in &mut vectors {
        let lead = v.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let variances: Vec<f64> = values.into_iter().take(out_dim).map(|v| v.max(0.0)).collect();
    let zero_variance = variances.iter().map(|&v| v <= 1e-12 * top.max(f64::MIN_POSITIVE)).collect();
    Ok(PcaModel {
        mean,
        components: vectors,
        variances,
        zero_variance,
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "PCA input".into(),
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect())
    }
}

/// Similarity used to compare projected visual and audio features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankMetric {
    Inner,
    Cosine,
    /// Negated squared Euclidean distance.
    NegL2,
}

impl RankMetric {
    pub const ALL: [RankMetric; 3] = [RankMetric::Inner, RankMetric::Cosine, RankMetric::NegL2];

    pub fn name(self) -> &'static str {
        match self {
            RankMetric::Inner => "inner",
            RankMetric::Cosine => "cosine",
            RankMetric::NegL2 => "l2",
        }
    }

    /// Cosine against a zero vector scores 0.
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            RankMetric::Inner => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            RankMetric::Cosine => cosine(a, b).unwrap_or(0.0),
            RankMetric::NegL2 => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
        }
    }
}

impl FromStr for RankMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(RankMetric::Inner),
            "cosine" | "cos" => Ok(RankMetric::Cosine),
            "l2" | "neg_l2" => Ok(RankMetric::NegL2),
            _ => Err(Error::invalid(format!("unknown ranking metric {s:?}"))),
        }
    }
}

/// Per-modality PCA models fitted on the top feature layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingBaseline {
    pub visual: PcaModel,
    pub audio: PcaModel,
}

impl RankingBaseline {
    /// Projects both modalities to `min(dim_v, dim_a, out_dim)` dimensions.
    pub fn fit(visual: &Dataset, audio: &Dataset, out_dim: usize) -> Result<Self> {
        let k = out_dim.min(visual.dim()).min(audio.dim());
        Ok(Self {
            visual: fit_pca(visual, k)?,
            audio: fit_pca(audio, k)?,
        })
    }

    pub fn fit_store(reader: &StoreReader, rows: Option<&[usize]>, out_dim: usize) -> Result<Self> {
        let (visual, audio) = top_layers(reader, rows)?;
        Self::fit(&visual, &audio, out_dim)
    }

    pub fn score(&self, visual: &Dataset, audio: &Dataset, metric: RankMetric) -> Result<Vec<f64>> {
        if visual.len() != audio.len() {
            return Err(Error::DimensionMismatch {
                what: "paired scoring features".into(),
                expected: visual.len(),
                got: audio.len(),
            });
        }
        visual
            .rows()
            .zip(audio.rows())
            .map(|(v, a)| Ok(metric.score(&self.visual.project(v)?, &self.audio.project(a)?)))
            .collect()
    }

    pub fn score_store(&self, reader: &StoreReader, rows: Option<&[usize]>, metric: RankMetric) -> Result<Vec<f64>> {
        let (visual, audio) = top_layers(reader, rows)?;
        self.score(&visual, &audio, metric)
    }
}
