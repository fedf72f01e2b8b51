//! Greedy and batch-greedy maximization of the clustering MI objective, and
//! top-N selection from per-clip scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentTable;
use crate::error::{Error, Result};
use crate::mi::{ContingencyState, PairingScheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub target_size: usize,
    pub batch_size: usize,
    pub selection_size: usize,
    pub seed: u64,
    pub scheme: PairingScheme,
}

impl SelectionConfig {
    /// Defaults for pipeline-scale runs: `b = 10000`, `s = 500`.
    pub fn large(target_size: usize) -> Self {
        Self {
            target_size,
            batch_size: 10_000,
            selection_size: 500,
            seed: 0,
            scheme: PairingScheme::default(),
        }
    }

    /// Defaults for retrieval benchmarks: `b = 100`, `s = 25`.
    pub fn small(target_size: usize) -> Self {
        Self {
            batch_size: 100,
            selection_size: 25,
            ..Self::large(target_size)
        }
    }

    pub fn validate(&self, pool: usize) -> Result<()> {
        if self.selection_size == 0 || self.selection_size > self.batch_size {
            return Err(Error::invalid(format!(
                "need 1 <= s <= b, got s={} b={}",
                self.selection_size, self.batch_size
            )));
        }
        if self.target_size > pool {
            return Err(Error::invalid(format!(
                "target size {} exceeds the {pool} available clips",
                self.target_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterStats {
    pub candidates: usize,
    pub selected: usize,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Table rows in selection order.
    pub rows: Vec<usize>,
    pub chosen: Vec<String>,
    /// Objective after each insertion.
    pub step_scores: Vec<f64>,
    pub outer: Vec<OuterStats>,
}

impl SelectionResult {
    fn new(table: &AssignmentTable, rows: Vec<usize>, step_scores: Vec<f64>, outer: Vec<OuterStats>) -> Self {
        let chosen = rows.iter().map(|&r| table.clip_ids()[r].clone()).collect();
        Self {
            rows,
            chosen,
            step_scores,
            outer,
        }
    }
}

struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Stopwatch(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.0.elapsed().as_secs_f64() * 1e3
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

/// Cluster-ID buckets over a candidate batch, one CSR index per clustering.
struct Buckets {
    offsets: Vec<Vec<usize>>,
    members: Vec<Vec<usize>>,
}

impl Buckets {
    fn build(table: &AssignmentTable, batch: &[usize]) -> Self {
        let width = table.width();
        let mut offsets = Vec::with_capacity(width);
        let mut members = Vec::with_capacity(width);
        for c in 0..width {
            let k = table.ks()[c];
            let mut off = vec![0usize; k + 1];
            for &r in batch {
                off[table.row(r)[c] as usize + 1] += 1;
            }
            for i in 0..k {
                off[i + 1] += off[i];
            }
            let mut fill = off.clone();
            let mut mem = vec![0usize; batch.len()];
            for (pos, &r) in batch.iter().enumerate() {
                let id = table.row(r)[c] as usize;
                mem[fill[id]] = pos;
                fill[id] += 1;
            }
            offsets.push(off);
            members.push(mem);
        }
        Self { offsets, members }
    }

    fn bucket(&self, c: usize, id: u32) -> &[usize] {
        let off = &self.offsets[c];
        &self.members[c][off[id as usize]..off[id as usize + 1]]
    }
}

fn gains_for(state: &ContingencyState, table: &AssignmentTable, batch: &[usize]) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if batch.len() >= 4096 {
            return batch.par_iter().map(|&r| state.gain(table.row(r))).collect();
        }
    }
    batch.iter().map(|&r| state.gain(table.row(r))).collect()
}

/// Greedily moves up to `limit` rows of `batch` (ascending row order) into `state`.
/// Ranks candidates by [`ContingencyState::gain`]; ties go to the smallest row.
/// Only candidates sharing a cluster with the latest pick are rescored.
fn greedy_from_batch(
    state: &mut ContingencyState,
    table: &AssignmentTable,
    batch: &[usize],
    limit: usize,
    rows: &mut Vec<usize>,
    step_scores: &mut Vec<f64>,
) -> Result<usize> {
    debug_assert!(batch.windows(2).all(|w| w[0] < w[1]));
    let limit = limit.min(batch.len());
    if limit == 0 {
        return Ok(0);
    }
    let mut gains = gains_for(state, table, batch);
    let buckets = Buckets::build(table, batch);
    let mut active = vec![true; batch.len()];
    let mut stamp = vec![0usize; batch.len()];

    for step in 1..=limit {
        let mut best: Option<usize> = None;
        for (pos, &g) in gains.iter().enumerate() {
            if active[pos] && best.is_none_or(|b| g > gains[b]) {
                best = Some(pos);
            }
        }
        let pos = best.expect("batch has an active candidate while under the limit");
        let row = batch[pos];
        let ids = table.row(row);
        state.add_clip(ids)?;
        active[pos] = false;
        rows.push(row);
        step_scores.push(state.value());
        if step == limit {
            break;
        }
        for (c, &id) in ids.iter().enumerate() {
            for &other in buckets.bucket(c, id) {
                if active[other] && stamp[other] != step {
                    stamp[other] = step;
                    gains[other] = state.gain(table.row(batch[other]));
                }
            }
        }
    }
    Ok(limit)
}

/// Plain greedy: each step takes the clip maximizing the objective after
/// insertion, over every remaining clip.
pub fn greedy(table: &AssignmentTable, target_size: usize, scheme: &PairingScheme) -> Result<SelectionResult> {
    if target_size > table.len() {
        return Err(Error::invalid(format!(
            "target size {target_size} exceeds the {} available clips",
            table.len()
        )));
    }
    let mut state = ContingencyState::empty(table.spaces(), table.ks(), scheme)?;
    let all: Vec<usize> = (0..table.len()).collect();
    let mut rows = Vec::with_capacity(target_size);
    let mut scores = Vec::with_capacity(target_size);
    let clock = Stopwatch::start();
    greedy_from_batch(&mut state, table, &all, target_size, &mut rows, &mut scores)?;
    let outer = vec![OuterStats {
        candidates: all.len(),
        selected: rows.len(),
        elapsed_ms: clock.ms(),
    }];
    Ok(SelectionResult::new(table, rows, scores, outer))
}

/// Batch greedy: each outer round samples `b` clips uniformly without
/// replacement from the unselected pool and greedily takes `s` of them.
pub fn batch_greedy(table: &AssignmentTable, config: &SelectionConfig) -> Result<SelectionResult> {
    config.validate(table.len())?;
    let m = config.target_size;
    let mut state = ContingencyState::empty(table.spaces(), table.ks(), &config.scheme)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pool: Vec<usize> = (0..table.len()).collect();
    let mut selected = vec![false; table.len()];
    let mut rows = Vec::with_capacity(m);
    let mut scores = Vec::with_capacity(m);
    let mut outer = Vec::new();

    while rows.len() < m {
        let clock = Stopwatch::start();
        let b = config.batch_size.min(pool.len());
        for t in 0..b {
            let j = rng.random_range(t..pool.len());
            pool.swap(t, j);
        }
        let mut batch = pool[..b].to_vec();
        batch.sort_unstable();
        let before = rows.len();
        let limit = config.selection_size.min(m - rows.len());
        greedy_from_batch(&mut state, table, &batch, limit, &mut rows, &mut scores)?;
        for &r in &rows[before..] {
            selected[r] = true;
        }
        for i in (0..b).rev() {
            if selected[pool[i]] {
                pool.swap_remove(i);
            }
        }
        outer.push(OuterStats {
            candidates: b,
            selected: rows.len() - before,
            elapsed_ms: clock.ms(),
        });
    }
    Ok(SelectionResult::new(table, rows, scores, outer))
}

/// Indices of the `n` highest scores, descending; ties by smallest index.
pub fn rank_select(scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if n > scores.len() {
        return Err(Error::invalid(format!("cannot take {n} of {} scores", scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n < idx.len() {
        idx.select_nth_unstable_by(n - 1, cmp);
        idx.truncate(n);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}
