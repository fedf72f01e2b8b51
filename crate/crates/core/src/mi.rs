//! Clustering-based mutual information.
//!
//! For two partitions `A`, `B` of a set `X` with contingency counts `n_ij`,
//! the plug-in MI in nats is
//!
//! ```text
//! MI(A, B) = sum_ij (n_ij / n) ln(n n_ij / (n_i n_j))
//!          = ln n + (sum_ij n_ij ln n_ij - sum_i n_i ln n_i - sum_j n_j ln n_j) / n
//! ```
//!
//! The second form is what [`ContingencyState`] maintains: the three
//! `c ln c` sums are cached per pair and per clustering, so inserting a clip
//! touches one joint cell and two marginals per pair.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentTable;
use crate::error::{Error, Result};
use crate::store::{Modality, Space};

/// Dense `rows x cols` table of co-occurrence counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u64>,
}

impl Contingency {
    pub fn new(rows: usize, cols: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "contingency table".into(),
                expected: rows * cols,
                got: counts.len(),
            });
        }
        Ok(Self { rows, cols, counts })
    }

    pub fn from_nested(rows: &[Vec<u64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged contingency table"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_labels(a: &[u32], b: &[u32], ka: usize, kb: usize) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                what: "label lists".into(),
                expected: a.len(),
                got: b.len(),
            });
        }
        let mut counts = vec![0u64; ka * kb];
        for (&x, &y) in a.iter().zip(b) {
            if x as usize >= ka {
                return Err(Error::InvalidClusterId { id: x, k: ka });
            }
            if y as usize >= kb {
                return Err(Error::InvalidClusterId { id: y, k: kb });
            }
            counts[x as usize * kb + y as usize] += 1;
        }
        Ok(Self { rows: ka, cols: kb, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.rows)
            .map(|i| self.counts[i * self.cols..(i + 1) * self.cols].iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j)).sum())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0; self.counts.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                counts[j * self.rows + i] = self.get(i, j);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            counts,
        }
    }
}

/// Plug-in MI (nats) of a contingency table. Empty cells contribute nothing;
/// tiny negative round-off is clamped to zero.
pub fn mi_pair(joint: &Contingency) -> Result<f64> {
    let n = joint.total();
    if n == 0 {
        return Err(Error::invalid("mutual information of an empty table"));
    }
    let rows = joint.row_sums();
    let cols = joint.col_sums();
    let nf = n as f64;
    let mut mi = 0.0;
    for i in 0..joint.rows {
        for j in 0..joint.cols {
            let c = joint.get(i, j);
            if c == 0 {
                continue;
            }
            let c = c as f64;
            mi += (c / nf) * (nf * c / (rows[i] as f64 * cols[j] as f64)).ln();
        }
    }
    Ok(mi.max(0.0))
}

/// Plug-in entropy (nats) of a count vector.
pub fn entropy(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / nf;
            p * p.ln()
        })
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingKind {
    /// Audio layer `l` with visual layer `l`.
    Diagonal,
    /// Every audio layer with every visual layer.
    Bipartite,
    /// Every pair of clusterings regardless of modality.
    Combination,
}

impl fmt::Display for PairingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairingKind::Diagonal => "diagonal",
            PairingKind::Bipartite => "bipartite",
            PairingKind::Combination => "combination",
        })
    }
}

impl FromStr for PairingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "diagonal" => Ok(PairingKind::Diagonal),
            "bipartite" => Ok(PairingKind::Bipartite),
            "combination" => Ok(PairingKind::Combination),
            other => Err(Error::invalid(format!("unknown pairing scheme {other:?}"))),
        }
    }
}

/// Per-layer weights. Generated families are centred on the middle layer,
/// so layer `(L+1)/2` always has weight 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerWeights {
    Uniform,
    /// `1 + slope (l - mid)`, clamped to `[0.1, 1.9]`.
    Linear(f64),
    /// `exp(rate (l - mid))`.
    Exp(f64),
    /// One weight per layer, layer 1 first.
    Explicit(Vec<f64>),
}

impl Default for LayerWeights {
    fn default() -> Self {
        LayerWeights::Uniform
    }
}

impl LayerWeights {
    /// Weight of 1-based `layer` out of `layers`.
    pub fn weight(&self, layer: usize, layers: usize) -> Result<f64> {
        let mid = (layers as f64 + 1.0) / 2.0;
        let offset = layer as f64 - mid;
        let w = match self {
            LayerWeights::Uniform => 1.0,
            LayerWeights::Linear(slope) => (1.0 + slope * offset).clamp(0.1, 1.9),
            LayerWeights::Exp(rate) => (rate * offset).exp(),
            LayerWeights::Explicit(ws) => *ws
                .get(layer.wrapping_sub(1))
                .ok_or_else(|| Error::invalid(format!("no weight for layer {layer}")))?,
        };
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::invalid(format!("layer {layer} weight {w} is not positive")));
        }
        Ok(w)
    }
}

impl FromStr for LayerWeights {
    type Err = Error;

    /// `uniform`, `linear(0.25)`, `exp(-1)` or a comma list `0.5,0.8,1,1.2,1.5`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let arg = |prefix: &str| -> Option<Result<f64>> {
            s.strip_prefix(prefix)
                .and_then(|r| r.strip_prefix('('))
                .and_then(|r| r.strip_suffix(')'))
                .map(|v| v.trim().parse().map_err(|_| Error::invalid(format!("bad weight argument in {s:?}"))))
        };
        if s.eq_ignore_ascii_case("uniform") {
            return Ok(LayerWeights::Uniform);
        }
        if let Some(v) = arg("linear") {
            return Ok(LayerWeights::Linear(v?));
        }
        if let Some(v) = arg("exp") {
            return Ok(LayerWeights::Exp(v?));
        }
        let ws = s
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad weights {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerWeights::Explicit(ws))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingScheme {
    pub kind: PairingKind,
    pub weights: LayerWeights,
}

impl PairingScheme {
    pub fn new(kind: PairingKind) -> Self {
        Self {
            kind,
            weights: LayerWeights::Uniform,
        }
    }

    pub fn with_weights(mut self, weights: LayerWeights) -> Self {
        self.weights = weights;
        self
    }

    /// Column pairs `(i, j)` into `spaces` selected by this scheme, with
    /// normalized pair weights (product of the two layer weights, summing to 1).
    pub fn pairs(&self, spaces: &[Space]) -> Result<Vec<(usize, usize, f64)>> {
        let of = |m: Modality| -> Vec<(usize, Space)> {
            let mut v: Vec<_> = spaces
                .iter()
                .copied()
                .enumerate()
                .filter(|(_, s)| s.modality == m)
                .collect();
            v.sort_by_key(|(_, s)| s.layer);
            v
        };
        let audio = of(Modality::Audio);
        let visual = of(Modality::Visual);
        let raw: Vec<(usize, usize)> = match self.kind {
            PairingKind::Diagonal => {
                if audio.len() != visual.len() {
                    return Err(Error::invalid("diagonal pairing needs matching audio and visual layers"));
                }
                audio
                    .iter()
                    .map(|&(i, a)| {
                        visual
                            .iter()
                            .find(|(_, v)| v.layer == a.layer)
                            .map(|&(j, _)| (i, j))
                            .ok_or(Error::UnknownLayer {
                                modality: "visual".into(),
                                layer: a.layer,
                            })
                    })
                    .collect::<Result<_>>()?
            }
            PairingKind::Bipartite => audio
                .iter()
                .flat_map(|&(i, _)| visual.iter().map(move |&(j, _)| (i, j)))
                .collect(),
            PairingKind::Combination => (0..spaces.len())
                .flat_map(|i| (i + 1..spaces.len()).map(move |j| (i, j)))
                .collect(),
        };
        if raw.is_empty() {
            return Err(Error::invalid(format!("{} pairing selects no pairs", self.kind)));
        }
        let layers = spaces.iter().map(|s| s.layer).max().unwrap_or(1);
        let mut weighted = raw
            .into_iter()
            .map(|(i, j)| {
                let w = self.weights.weight(spaces[i].layer, layers)? * self.weights.weight(spaces[j].layer, layers)?;
                Ok((i, j, w))
            })
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = weighted.iter().map(|p| p.2).sum();
        for p in &mut weighted {
            p.2 /= total;
        }
        Ok(weighted)
    }
}

impl Default for PairingScheme {
    fn default() -> Self {
        Self::new(PairingKind::Combination)
    }
}

/// Growable table of `c ln c` for integer `c`.
#[derive(Debug, Clone, Default)]
struct XLogX(Vec<f64>);

impl XLogX {
    fn ensure(&mut self, max: u64) {
        let max = max as usize;
        if self.0.len() <= max {
            let start = self.0.len();
            self.0.extend((start..=max.max(1)).map(|c| if c < 2 { 0.0 } else { c as f64 * (c as f64).ln() }));
        }
    }

    #[inline]
    fn at(&self, c: u64) -> f64 {
        self.0[c as usize]
    }

    /// Change of `c ln c` when a count goes from `c` to `c + 1`.
    #[inline]
    fn step(&self, c: u64) -> f64 {
        self.0[c as usize + 1] - self.0[c as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairState {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
    pub ka: usize,
    pub kb: usize,
    /// Row-major `ka x kb`.
    pub joint: Vec<u64>,
}

/// Joint and marginal counts for every scheme pair over a selected set.
#[derive(Debug, Clone)]
pub struct ContingencyState {
    spaces: Vec<Space>,
    ks: Vec<usize>,
    pairs: Vec<PairState>,
    marginals: Vec<Vec<u64>>,
    n: u64,
    /// `sum_ij n_ij ln n_ij` per pair.
    joint_terms: Vec<f64>,
    /// `sum_i n_i ln n_i` per clustering.
    marginal_terms: Vec<f64>,
    /// Total pair weight touching each clustering.
    column_weight: Vec<f64>,
    xlogx: XLogX,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairScore {
    pub a: Space,
    pub b: Space,
    pub weight: f64,
    pub mi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiScore {
    /// Weighted mean of the per-pair values, nats.
    pub value: f64,
    pub per_pair: Vec<PairScore>,
}

impl ContingencyState {
    /// Empty state (`n = 0`) for the given table layout.
    pub fn empty(spaces: &[Space], ks: &[usize], scheme: &PairingScheme) -> Result<Self> {
        let pairs: Vec<PairState> = scheme
            .pairs(spaces)?
            .into_iter()
            .map(|(a, b, weight)| PairState {
                a,
                b,
                weight,
                ka: ks[a],
                kb: ks[b],
                joint: vec![0; ks[a] * ks[b]],
            })
            .collect();
        let mut column_weight = vec![0.0; spaces.len()];
        for p in &pairs {
            column_weight[p.a] += p.weight;
            column_weight[p.b] += p.weight;
        }
        let mut xlogx = XLogX::default();
        xlogx.ensure(2);
        Ok(Self {
            spaces: spaces.to_vec(),
            ks: ks.to_vec(),
            joint_terms: vec![0.0; pairs.len()],
            pairs,
            marginals: ks.iter().map(|&k| vec![0; k]).collect(),
            n: 0,
            marginal_terms: vec![0.0; spaces.len()],
            column_weight,
            xlogx,
        })
    }

    /// Tallies `rows` of `table` in one pass and computes every cached sum from scratch.
    pub fn build(table: &AssignmentTable, rows: &[usize], scheme: &PairingScheme) -> Result<Self> {
        let mut state = Self::empty(table.spaces(), table.ks(), scheme)?;
        for &r in rows {
            let row = table.row(r);
            state.check(row)?;
            for (c, &id) in row.iter().enumerate() {
                state.marginals[c][id as usize] += 1;
            }
            for p in &mut state.pairs {
                p.joint[row[p.a] as usize * p.kb + row[p.b] as usize] += 1;
            }
        }
        state.n = rows.len() as u64;
        state.xlogx.ensure(state.n + 1);
        state.recompute_terms();
        Ok(state)
    }

    fn recompute_terms(&mut self) {
        let t = &self.xlogx;
        self.joint_terms = self.pairs.iter().map(|p| p.joint.iter().map(|&c| t.at(c)).sum()).collect();
        self.marginal_terms = self.marginals.iter().map(|m| m.iter().map(|&c| t.at(c)).sum()).collect();
    }

    fn check(&self, candidate: &[u32]) -> Result<()> {
        if candidate.len() != self.ks.len() {
            return Err(Error::DimensionMismatch {
                what: "candidate cluster ids".into(),
                expected: self.ks.len(),
                got: candidate.len(),
            });
        }
        for (&id, &k) in candidate.iter().zip(&self.ks) {
            if id as usize >= k {
                return Err(Error::InvalidClusterId { id, k });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn pairs(&self) -> &[PairState] {
        &self.pairs
    }

    pub fn marginals(&self) -> &[Vec<u64>] {
        &self.marginals
    }

    pub fn spaces(&self) -> &[Space] {
        &self.spaces
    }

    #[inline]
    fn pair_mi(&self, ln_n: f64, n: f64, joint: f64, ma: f64, mb: f64) -> f64 {
        (ln_n + (joint - ma - mb) / n).max(0.0)
    }

    /// Weighted mean MI over the scheme pairs. Defined as 0 for `n <= 1`.
    pub fn score(&self) -> MiScore {
        let per_pair: Vec<PairScore> = self
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| PairScore {
                a: self.spaces[p.a],
                b: self.spaces[p.b],
                weight: p.weight,
                mi: if self.n <= 1 {
                    0.0
                } else {
                    let n = self.n as f64;
                    self.pair_mi(n.ln(), n, self.joint_terms[i], self.marginal_terms[p.a], self.marginal_terms[p.b])
                },
            })
            .collect();
        let value = per_pair.iter().map(|p| p.weight * p.mi).sum();
        MiScore { value, per_pair }
    }

    pub fn value(&self) -> f64 {
        if self.n <= 1 {
            return 0.0;
        }
        let n = self.n as f64;
        let ln_n = n.ln();
        self.pairs
            .iter()
            .enumerate()
            .map(|(i, p)| p.weight * self.pair_mi(ln_n, n, self.joint_terms[i], self.marginal_terms[p.a], self.marginal_terms[p.b]))
            .sum()
    }

    /// `score(state + candidate) - score(state)`, without mutating the state.
    pub fn delta_score(&self, candidate: &[u32]) -> Result<f64> {
        self.check(candidate)?;
        let n_new = self.n + 1;
        let after = if n_new <= 1 {
            0.0
        } else {
            let t = &self.xlogx;
            let n = n_new as f64;
            let ln_n = n.ln();
            let marg: Vec<f64> = candidate
                .iter()
                .enumerate()
                .map(|(c, &id)| self.marginal_terms[c] + t.step(self.marginals[c][id as usize]))
                .collect();
            self.pairs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let cell = p.joint[candidate[p.a] as usize * p.kb + candidate[p.b] as usize];
                    let joint = self.joint_terms[i] + t.step(cell);
                    p.weight * self.pair_mi(ln_n, n, joint, marg[p.a], marg[p.b])
                })
                .sum()
        };
        Ok(after - self.value())
    }

    /// Count-space gain of inserting `candidate`:
    /// `sum_p w_p [step(n_ab) - step(n_a) - step(n_b)]`.
    ///
    /// `score(state + x) = ln(n+1) + (sum_p w_p G_p + gain(x)) / (n+1)` (up to the
    /// zero clamp), so ranking candidates by `gain` ranks them by the objective
    /// after insertion. IDs are not validated.
    #[inline]
    pub fn gain(&self, candidate: &[u32]) -> f64 {
        let t = &self.xlogx;
        let mut g = 0.0;
        for p in &self.pairs {
            g += p.weight * t.step(p.joint[candidate[p.a] as usize * p.kb + candidate[p.b] as usize]);
        }
        for (c, &id) in candidate.iter().enumerate() {
            g -= self.column_weight[c] * t.step(self.marginals[c][id as usize]);
        }
        g
    }

    pub fn add_clip(&mut self, candidate: &[u32]) -> Result<()> {
        self.check(candidate)?;
        self.xlogx.ensure(self.n + 2);
        let t = &self.xlogx;
        for (c, &id) in candidate.iter().enumerate() {
            let m = &mut self.marginals[c][id as usize];
            self.marginal_terms[c] += t.step(*m);
            *m += 1;
        }
        for (i, p) in self.pairs.iter_mut().enumerate() {
            let cell = &mut p.joint[candidate[p.a] as usize * p.kb + candidate[p.b] as usize];
            self.joint_terms[i] += t.step(*cell);
            *cell += 1;
        }
        self.n += 1;
        self.xlogx.ensure(self.n + 1);
        Ok(())
    }

    /// Joint table of pair `i` as a standalone [`Contingency`].
    pub fn joint(&self, i: usize) -> Contingency {
        let p = &self.pairs[i];
        Contingency {
            rows: p.ka,
            cols: p.kb,
            counts: p.joint.clone(),
        }
    }
}

/// Cluster-ID histogram of `rows` in one space: `(cluster id, count)` sorted by
/// decreasing count, ties by ascending ID. Every ID in `0..k` is listed.
pub fn cluster_histogram(table: &AssignmentTable, rows: &[usize], space: Space) -> Result<Vec<(u32, u64)>> {
    let col = table.space_index(space).ok_or(Error::UnknownLayer {
        modality: space.modality.to_string(),
        layer: space.layer,
    })?;
    let mut counts = vec![0u64; table.ks()[col]];
    for &r in rows {
        counts[table.row(r)[col] as usize] += 1;
    }
    let mut hist: Vec<(u32, u64)> = counts.into_iter().enumerate().map(|(i, c)| (i as u32, c)).collect();
    hist.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(hist)
}

/// Fraction of the histogram mass held by its `top` largest clusters.
pub fn top_mass(hist: &[(u32, u64)], top: usize) -> f64 {
    let total: u64 = hist.iter().map(|h| h.1).sum();
    if total == 0 {
        return 0.0;
    }
    let mut counts: Vec<u64> = hist.iter().map(|h| h.1).collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    counts.iter().take(top).sum::<u64>() as f64 / total as f64
}
