//! Metadata pre-filtering and per-video clip deduplication.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::store::ClipRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub excluded_categories: BTreeSet<String>,
    pub excluded_keywords: BTreeSet<String>,
    pub allowed_languages: BTreeSet<String>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            min_duration_s: 30.0,
            max_duration_s: 600.0,
            excluded_categories: set(&["gaming", "animation", "screencast", "music"]),
            excluded_keywords: BTreeSet::new(),
            allowed_languages: set(&["en", "es", "pt", "ru", "ja", "fr", "de", "ko"]),
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_duration_s < self.max_duration_s) {
            return Err(Error::Config(format!(
                "min_duration_s ({}) must be below max_duration_s ({})",
                self.min_duration_s, self.max_duration_s
            )));
        }
        Ok(())
    }

    /// Parses a flat `key = value` policy file. Set-valued keys take comma lists;
    /// keys not given keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let mut policy = FilterPolicy::default();
        for (section, key, value) in kv.iter() {
            if !section.is_empty() && section != "filter" {
                return Err(Error::Config(format!("unknown section [{section}] in policy")));
            }
            let list = || -> BTreeSet<String> {
                value
                    .split(',')
                    .map(|s| s.trim().to_lowercase())
                    .filter(|s| !s.is_empty())
                    .collect()
            };
            match key {
                "min_duration_s" => policy.min_duration_s = KeyValues::number(key, value)?,
                "max_duration_s" => policy.max_duration_s = KeyValues::number(key, value)?,
                "excluded_categories" => policy.excluded_categories = list(),
                "excluded_keywords" => policy.excluded_keywords = list(),
                "allowed_languages" => policy.allowed_languages = list(),
                other => return Err(Error::Config(format!("unknown policy key {other:?}"))),
            }
        }
        policy.validate()?;
        Ok(policy)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }
}

/// Why a record was rejected. Rules are checked in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reason {
    Accepted,
    Malformed,
    Duration,
    Category,
    Keyword,
    Language,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reason::Accepted => "ok",
            Reason::Malformed => "malformed",
            Reason::Duration => "duration",
            Reason::Category => "category",
            Reason::Keyword => "keyword",
            Reason::Language => "language",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub clip_id: String,
    pub accepted: bool,
    pub reason: Reason,
}

fn tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn keyword_hit(flags: &BTreeSet<String>, keywords: &BTreeSet<String>) -> bool {
    let keys: Vec<Vec<String>> = keywords.iter().map(|k| tokens(k)).filter(|k| !k.is_empty()).collect();
    flags.iter().any(|flag| {
        let toks = tokens(flag);
        keys.iter()
            .any(|k| toks.windows(k.len()).any(|w| w == k.as_slice()))
    })
}

/// Classifies one record. Pure: depends only on the record and the policy.
pub fn check_record(record: &ClipRecord, policy: &FilterPolicy) -> Reason {
    if record.clip_id.is_empty() || !record.duration_s.is_finite() || record.duration_s < 0.0 {
        return Reason::Malformed;
    }
    if record.duration_s < policy.min_duration_s || record.duration_s > policy.max_duration_s {
        return Reason::Duration;
    }
    if let Some(cat) = &record.category {
        if policy.excluded_categories.contains(&cat.trim().to_lowercase()) {
            return Reason::Category;
        }
    }
    if keyword_hit(&record.flags, &policy.excluded_keywords) {
        return Reason::Keyword;
    }
    match &record.language {
        Some(lang) if policy.allowed_languages.contains(&lang.trim().to_lowercase()) => Reason::Accepted,
        _ => Reason::Language,
    }
}

pub fn filter_metadata<'a, I>(records: I, policy: &'a FilterPolicy) -> impl Iterator<Item = FilterDecision> + 'a
where
    I: IntoIterator<Item = &'a ClipRecord>,
    I::IntoIter: 'a,
{
    records.into_iter().map(move |r| {
        let reason = check_record(r, policy);
        FilterDecision {
            clip_id: r.clip_id.clone(),
            accepted: reason == Reason::Accepted,
            reason,
        }
    })
}

/// Symmetric pairwise clip-similarity scores with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    scores: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(n: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != n * n {
            return Err(Error::DimensionMismatch {
                what: "similarity matrix".into(),
                expected: n * n,
                got: scores.len(),
            });
        }
        for i in 0..n {
            if scores[i * n + i] != 0.0 {
                return Err(Error::invalid(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..i {
                let (a, b) = (scores[i * n + j], scores[j * n + i]);
                if !a.is_finite() {
                    return Err(Error::NonFinite(format!("score ({i},{j})")));
                }
                if a != b {
                    return Err(Error::invalid(format!("scores ({i},{j}) and ({j},{i}) differ")));
                }
            }
        }
        Ok(Self { n, scores })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("similarity matrix must be square"));
        }
        Self::new(n, rows.concat())
    }

    /// Whitespace-separated rows, one per line. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad score {t:?}"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(&rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.n + j]
    }

    /// Sum of pairwise scores within `set`.
    pub fn objective(&self, set: &[usize]) -> f64 {
        let mut total = 0.0;
        for (a, &i) in set.iter().enumerate() {
            for &j in &set[a + 1..] {
                total += self.get(i, j);
            }
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DedupResult {
    /// Chosen indices, ascending.
    pub indices: Vec<usize>,
    pub objective: f64,
    /// Accepted improving swaps.
    pub iterations: usize,
    pub locally_optimal: bool,
    /// Objective after initialization and after every accepted swap.
    pub trace: Vec<f64>,
}

/// Chooses `min(k, n)` clips with minimum total pairwise similarity.
///
/// First-improvement single-swap local search is run from several
/// deterministic starts: the `k` rows with the smallest sums, then a greedy
/// construction seeded at every clip. The lowest local optimum wins, earliest
/// start on ties; `iterations` and `trace` describe that winning run.
pub fn select_clips(matrix: &SimilarityMatrix, k: usize, max_iters: usize) -> Result<DedupResult> {
    let n = matrix.n();
    if n == 0 {
        return Err(Error::invalid("empty similarity matrix"));
    }
    if k == 0 || max_iters == 0 {
        return Err(Error::invalid("k and max_iters must be at least 1"));
    }
    let k = k.min(n);
    let row_sums: Vec<f64> = (0..n).map(|i| (0..n).map(|j| matrix.get(i, j)).sum()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| row_sums[a].total_cmp(&row_sums[b]).then(a.cmp(&b)));

    let mut starts = vec![order[..k].to_vec()];
    if k < n {
        starts.extend((0..n).map(|seed| construct(matrix, k, seed)));
    }
    let mut seen = Vec::new();
    let mut best: Option<DedupResult> = None;
    for mut start in starts {
        start.sort_unstable();
        if seen.contains(&start) {
            continue;
        }
        seen.push(start.clone());
        let run = local_search(matrix, start, max_iters);
        if best.as_ref().map_or(true, |b| run.objective < b.objective - 1e-12) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Grows a set from `seed`, each time adding the clip least similar to those already chosen.
fn construct(matrix: &SimilarityMatrix, k: usize, seed: usize) -> Vec<usize> {
    let mut set = vec![seed];
    while set.len() < k {
        let next = (0..matrix.n())
            .filter(|c| !set.contains(c))
            .map(|c| (set.iter().map(|&w| matrix.get(c, w)).sum::<f64>(), c))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, c)| c)
            .expect("k <= n");
        set.push(next);
    }
    set
}

fn local_search(matrix: &SimilarityMatrix, mut chosen: Vec<usize>, max_iters: usize) -> DedupResult {
    let n = matrix.n();
    let k = chosen.len();
    let mut in_set = vec![false; n];
    for &i in &chosen {
        in_set[i] = true;
    }
    let mut objective = matrix.objective(&chosen);
    let mut trace = vec![objective];
    let mut iterations = 0;
    let mut locally_optimal = false;
    'search: while iterations < max_iters {
        for pos in 0..k {
            let out = chosen[pos];
            for cand in (0..n).filter(|&c| !in_set[c]) {
                let delta: f64 = chosen
                    .iter()
                    .filter(|&&w| w != out)
                    .map(|&w| matrix.get(cand, w) - matrix.get(out, w))
                    .sum();
                if delta < -1e-12 {
                    in_set[out] = false;
                    in_set[cand] = true;
                    chosen[pos] = cand;
                    chosen.sort_unstable();
                    objective = matrix.objective(&chosen);
                    trace.push(objective);
                    iterations += 1;
                    continue 'search;
                }
            }
        }
        locally_optimal = true;
        break;
    }
    DedupResult {
        indices: chosen,
        objective,
        iterations,
        locally_optimal,
        trace,
    }
}
