//! End-to-end curation runs driven by one config file: filter, cluster every
//! space, assign, select (or train heads and rank), with a provenance record
//! written after every stage.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::{build_assignment_table, AssignmentTable};
use crate::config::{stage_seed, KeyValues};
use crate::contrastive::{score_store, train_heads_on_store, Batching, TrainConfig};
use crate::error::{Error, Result};
use crate::filter::{check_record, FilterPolicy, Reason};
use crate::kmeans::{fit_sgd, Clustering, SgdParams, StoreSpace};
use crate::mi::{cluster_histogram, top_mass, LayerWeights, PairingKind};
use crate::select::{batch_greedy, rank_select, SelectionConfig};
use crate::store::{Space, StoreReader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Cluster, assign and maximize MI with batch greedy.
    Mi,
    /// Train projection heads and keep the best-scoring clips.
    Contrastive,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mi" | "clustering" => Ok(Mode::Mi),
            "contrastive" => Ok(Mode::Contrastive),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// `0` uses every available core.
    pub workers: usize,
    pub mode: Mode,
    pub store: PathBuf,
    pub out_dir: PathBuf,
    /// Filter policy file; the built-in policy applies when absent.
    pub policy: Option<PathBuf>,
    pub filter: bool,
    pub cluster: SgdParams,
    pub select: SelectionConfig,
    pub train: TrainConfig,
    /// Config text the run was parsed from, kept for provenance.
    pub source: String,
}

impl PipelineConfig {
    pub fn new(store: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, target_size: usize) -> Self {
        Self {
            seed: 0,
            workers: 0,
            mode: Mode::Mi,
            store: store.into(),
            out_dir: out_dir.into(),
            policy: None,
            filter: true,
            cluster: SgdParams::default(),
            select: SelectionConfig::large(target_size),
            train: TrainConfig::default(),
            source: String::new(),
        }
    }

    /// Parses the sectioned `key = value` format. Relative paths resolve
    /// against `base`. Unknown sections and keys are errors.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let mut c = Self::new(PathBuf::new(), PathBuf::new(), 0);
        let mut have_store = false;
        let mut have_out = false;
        let mut have_target = false;
        let path = |v: &str| base.join(v);
        for (section, key, value) in kv.iter() {
            let num = |v: &str| -> Result<f64> { KeyValues::number(key, v) };
            let int = |v: &str| -> Result<usize> { KeyValues::number(key, v) };
            let flag = |v: &str| -> Result<bool> {
                match v {
                    "true" | "yes" | "1" => Ok(true),
                    "false" | "no" | "0" => Ok(false),
                    _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
                }
            };
            match (section, key) {
                ("", "seed") => c.seed = KeyValues::number(key, value)?,
                ("", "workers") => c.workers = int(value)?,
                ("", "mode") => c.mode = value.parse()?,
                ("paths", "store") => {
                    c.store = path(value);
                    have_store = true;
                }
                ("paths", "out_dir") => {
                    c.out_dir = path(value);
                    have_out = true;
                }
                ("paths", "policy") => c.policy = Some(path(value)),
                ("filter", "enabled") => c.filter = flag(value)?,
                ("cluster", "k") => c.cluster.k = int(value)?,
                ("cluster", "lr") => c.cluster.lr = num(value)?,
                ("cluster", "epochs") => c.cluster.epochs = int(value)?,
                ("cluster", "batch_size") => c.cluster.batch_size = int(value)?,
                ("cluster", "reinit") => c.cluster.reinit = flag(value)?,
                ("cluster", "standardize") => c.cluster.standardize = flag(value)?,
                ("select", "target_size") => {
                    c.select.target_size = int(value)?;
                    have_target = true;
                }
                ("select", "batch_size") => c.select.batch_size = int(value)?,
                ("select", "selection_size") => c.select.selection_size = int(value)?,
                ("select", "pairing") => c.select.scheme.kind = value.parse::<PairingKind>()?,
                ("select", "weights") => c.select.scheme.weights = value.parse::<LayerWeights>()?,
                ("train", "tau") => c.train.tau = num(value)?,
                ("train", "batch_size") => c.train.batch_size = int(value)?,
                ("train", "epochs") => c.train.epochs = int(value)?,
                ("train", "lr") => c.train.lr = num(value)?,
                ("train", "d_out") => c.train.d_out = int(value)?,
                _ if !matches!(section, "" | "paths" | "filter" | "cluster" | "select" | "train") => {
                    return Err(Error::Config(format!("unknown section [{section}]")));
                }
                _ => {
                    let name = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
                    return Err(Error::Config(format!("unknown key {name:?}")));
                }
            }
        }
        for (ok, what) in [(have_store, "paths.store"), (have_out, "paths.out_dir"), (have_target, "select.target_size")] {
            if !ok {
                return Err(Error::Config(format!("missing required key {what}")));
            }
        }
        c.source = text.to_string();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Checks that every input path exists.
    pub fn check_paths(&self) -> Result<()> {
        let inputs = std::iter::once(&self.store).chain(self.policy.as_ref());
        for p in inputs {
            if !p.exists() {
                return Err(Error::Config(format!("path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Effective settings as JSON, without the source text. Overrides applied
    /// after parsing are included.
    pub fn canonical(&self) -> Result<String> {
        let bare = Self {
            source: String::new(),
            ..self.clone()
        };
        Ok(serde_json::to_string(&bare)?)
    }

    /// SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Filter,
    Cluster,
    Assign,
    Select,
    TrainHeads,
    Rank,
    Report,
}

impl Stage {
    /// Process exit status reported when this stage fails.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Filter => 3,
            Stage::Cluster => 4,
            Stage::Assign => 5,
            Stage::Select => 6,
            Stage::TrainHeads => 7,
            Stage::Rank => 8,
            Stage::Report => 9,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Filter => "filter",
            Stage::Cluster => "cluster",
            Stage::Assign => "assign",
            Stage::Select => "select",
            Stage::TrainHeads => "train-heads",
            Stage::Rank => "rank",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn new(stage: Stage, source: Error) -> Self {
        Self { stage, source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
    /// Effective config as JSON; deserializes back into a [`PipelineConfig`].
    pub config: String,
    pub seed: u64,
    /// Derived per-stage seeds, by stage label.
    pub seeds: Vec<(String, u64)>,
    pub workers: usize,
    pub stages: Vec<StageTime>,
    pub complete: bool,
    pub failed: Option<String>,
}

impl Provenance {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Files a run leaves in `out_dir`.
pub mod files {
    pub const FILTER: &str = "filter.tsv";
    pub const ASSIGNMENTS: &str = "assignments.tsv";
    pub const SELECTION: &str = "selection.txt";
    pub const TRACE: &str = "trace.tsv";
    pub const HEADS: &str = "heads.json";
    pub const SCORES: &str = "scores.tsv";
    pub const PROVENANCE: &str = "provenance.json";

    pub fn clustering(space: &crate::store::Space) -> String {
        format!("clusters-{space}.bin")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub selected: Vec<String>,
    pub provenance: Provenance,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Accepted rows of the store under `policy`, in store order, plus the
/// per-clip decision table as TSV.
pub fn filter_rows(reader: &StoreReader, policy: &FilterPolicy) -> Result<(Vec<usize>, String)> {
    let records = reader.metadata()?;
    let mut rows = Vec::new();
    let mut tsv = String::from("clip_id\taccepted\treason\n");
    for r in &records {
        let reason = check_record(r, policy);
        let idx = reader.index_of(&r.clip_id).ok_or_else(|| Error::UnknownClip(r.clip_id.clone()))?;
        if reason == Reason::Accepted {
            rows.push(idx);
        }
        tsv.push_str(&format!("{}\t{}\t{}\n", r.clip_id, reason == Reason::Accepted, reason));
    }
    rows.sort_unstable();
    Ok((rows, tsv))
}

/// Fits one clustering per space of the store over `rows`, each seeded from
/// `stage_seed(seed, "cluster-<space>")`.
pub fn cluster_store(reader: &StoreReader, rows: Option<&[usize]>, params: &SgdParams, seed: u64) -> Result<Vec<Clustering>> {
    let spaces: Vec<Space> = reader.layer_spec().spaces().collect();
    let fit = |space: &Space| -> Result<Clustering> {
        let p = SgdParams {
            seed: stage_seed(seed, &format!("cluster-{space}")),
            ..params.clone()
        };
        let source = StoreSpace { rows, ..StoreSpace::new(reader, *space) };
        let mut model = fit_sgd(&source, &p)?;
        model.space = Some(*space);
        Ok(model)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        spaces.par_iter().map(fit).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        spaces.iter().map(fit).collect()
    }
}

struct Run<'a> {
    config: &'a PipelineConfig,
    provenance: Provenance,
}

impl Run<'_> {
    fn save(&self) -> Result<()> {
        let path = self.config.out_dir.join(files::PROVENANCE);
        write(&path, &serde_json::to_string_pretty(&self.provenance)?)
    }

    fn stage<T>(&mut self, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T, StageError> {
        let clock = Instant::now();
        match f() {
            Ok(v) => {
                self.provenance.stages.push(StageTime {
                    stage,
                    seconds: clock.elapsed().as_secs_f64(),
                });
                self.save().map_err(|e| StageError::new(stage, e))?;
                Ok(v)
            }
            Err(e) => {
                self.provenance.failed = Some(format!("{stage}: {e}"));
                let _ = self.save();
                Err(StageError::new(stage, e))
            }
        }
    }
}

/// Runs every stage of `config` in order. Artifacts land in `config.out_dir`;
/// `provenance.json` is rewritten after each stage and only marked complete
/// once the selection is written.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunSummary, StageError> {
    config.check_paths().map_err(|e| StageError::new(Stage::Config, e))?;
    fs::create_dir_all(&config.out_dir).map_err(|e| StageError::new(Stage::Config, Error::io(&config.out_dir, e)))?;
    let stale = config.out_dir.join(files::SELECTION);
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| StageError::new(Stage::Config, Error::io(&stale, e)))?;
    }
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| StageError::new(Stage::Config, Error::Config(e.to_string())))?;
        pool.install(|| run_stages(config))
    }
    #[cfg(not(feature = "parallel"))]
    run_stages(config)
}

fn run_stages(config: &PipelineConfig) -> Result<RunSummary, StageError> {
    let out = |name: &str| config.out_dir.join(name);
    let cfg_err = |e| StageError::new(Stage::Config, e);
    let mut run = Run {
        config,
        provenance: Provenance {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash().map_err(cfg_err)?,
            config: config.canonical().map_err(cfg_err)?,
            seed: config.seed,
            seeds: Vec::new(),
            workers: config.workers,
            stages: Vec::new(),
            complete: false,
            failed: None,
        },
    };
    let reader = run.stage(Stage::Config, || {
        let reader = StoreReader::open(&config.store)?;
        match config.mode {
            Mode::Mi => config.select.validate(usize::MAX)?,
            Mode::Contrastive => {}
        }
        Ok(reader)
    })?;

    let rows: Option<Vec<usize>> = run.stage(Stage::Filter, || {
        if !config.filter {
            return Ok(None);
        }
        let policy = match &config.policy {
            Some(p) => FilterPolicy::load(p)?,
            None => FilterPolicy::default(),
        };
        let (rows, tsv) = filter_rows(&reader, &policy)?;
        write(&out(files::FILTER), &tsv)?;
        Ok(Some(rows))
    })?;
    let rows = rows.as_deref();

    let selected = match config.mode {
        Mode::Mi => {
            for space in reader.layer_spec().spaces() {
                let label = format!("cluster-{space}");
                run.provenance.seeds.push((label.clone(), stage_seed(config.seed, &label)));
            }
            let clusterings = run.stage(Stage::Cluster, || {
                let models = cluster_store(&reader, rows, &config.cluster, config.seed)?;
                for m in &models {
                    if let Some(space) = &m.space {
                        m.save(&out(&files::clustering(space)))?;
                    }
                }
                Ok(models)
            })?;
            let table = run.stage(Stage::Assign, || {
                let table = build_assignment_table(&reader, &clusterings, rows)?;
                table.save(&out(files::ASSIGNMENTS))?;
                Ok(table)
            })?;
            let select_seed = stage_seed(config.seed, "select");
            run.provenance.seeds.push(("select".into(), select_seed));
            run.stage(Stage::Select, || {
                let cfg = SelectionConfig {
                    seed: select_seed,
                    ..config.select.clone()
                };
                let result = batch_greedy(&table, &cfg)?;
                let mut trace = String::from("step\tclip_id\tobjective\n");
                for (i, (id, s)) in result.chosen.iter().zip(&result.step_scores).enumerate() {
                    trace.push_str(&format!("{}\t{id}\t{s:.12}\n", i + 1));
                }
                write(&out(files::TRACE), &trace)?;
                Ok(result.chosen)
            })?
        }
        Mode::Contrastive => {
            let train_seed = stage_seed(config.seed, "train-heads");
            run.provenance.seeds.push(("train-heads".into(), train_seed));
            let heads = run.stage(Stage::TrainHeads, || {
                let cfg = TrainConfig {
                    seed: train_seed,
                    batching: Batching::Uniform,
                    ..config.train.clone()
                };
                let (heads, _) = train_heads_on_store(&reader, rows, &cfg)?;
                heads.save(&out(files::HEADS))?;
                Ok(heads)
            })?;
            run.stage(Stage::Rank, || {
                let scores = score_store(&heads, &reader, rows)?;
                let ids: Vec<&String> = match rows {
                    Some(rows) => rows.iter().map(|&r| &reader.clip_ids()[r]).collect(),
                    None => reader.clip_ids().iter().collect(),
                };
                let mut tsv = String::from("clip_id\tscore\n");
                for (id, s) in ids.iter().zip(&scores) {
                    tsv.push_str(&format!("{id}\t{s:.12}\n"));
                }
                write(&out(files::SCORES), &tsv)?;
                let top = rank_select(&scores, config.select.target_size)?;
                Ok(top.into_iter().map(|i| ids[i].clone()).collect::<Vec<String>>())
            })?
        }
    };
    write_selection(&out(files::SELECTION), &selected).map_err(|e| StageError::new(Stage::Report, e))?;
    run.provenance.complete = true;
    run.save().map_err(|e| StageError::new(Stage::Report, e))?;
    Ok(RunSummary {
        selected,
        provenance: run.provenance,
    })
}

pub fn write_selection(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    write(path, &text)
}

pub fn read_selection(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Two-sample chi-square homogeneity test over the clusters either sample uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

pub fn chi_square(a: &[u64], b: &[u64]) -> Result<ChiSquare> {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "histogram".into(),
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let n = na + nb;
    let mut stat = 0.0;
    let mut bins = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let t = (x + y) as f64;
        if t == 0.0 {
            continue;
        }
        bins += 1;
        let (ea, eb) = (na * t / n, nb * t / n);
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    if na == 0.0 || nb == 0.0 || bins < 2 {
        return Ok(ChiSquare {
            statistic: 0.0,
            dof: 0,
            p_value: 1.0,
        });
    }
    let dof = bins - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(ChiSquare {
        statistic: stat,
        dof,
        p_value: dist.sf(stat),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceHistogram {
    pub space: Space,
    /// Per-cluster counts indexed by cluster ID.
    pub selected: Vec<u64>,
    pub random: Vec<u64>,
    pub selected_top10: f64,
    pub random_top10: f64,
    pub chi_square: ChiSquare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub selected: usize,
    pub spaces: Vec<SpaceHistogram>,
    /// Objective after each insertion, when a trace exists.
    pub objective: Vec<f64>,
}

fn by_id(hist: &[(u32, u64)]) -> Vec<u64> {
    let mut v = vec![0u64; hist.len()];
    for &(id, c) in hist {
        v[id as usize] = c;
    }
    v
}

/// Cluster histograms of the selected rows against an equal-size random subset
/// of the table drawn with `seed`.
pub fn histogram_report(table: &AssignmentTable, selected: &[usize], seed: u64) -> Result<HistogramReport> {
    if selected.is_empty() {
        return Ok(HistogramReport {
            selected: 0,
            spaces: Vec::new(),
            objective: Vec::new(),
        });
    }
    let mut all: Vec<usize> = (0..table.len()).collect();
    let (random, _) = all.partial_shuffle(&mut ChaCha8Rng::seed_from_u64(seed), selected.len());
    let random = random.to_vec();
    let spaces = table
        .spaces()
        .iter()
        .map(|&space| {
            let hs = cluster_histogram(table, selected, space)?;
            let hr = cluster_histogram(table, &random, space)?;
            let (s, r) = (by_id(&hs), by_id(&hr));
            Ok(SpaceHistogram {
                space,
                chi_square: chi_square(&s, &r)?,
                selected_top10: top_mass(&hs, 10),
                random_top10: top_mass(&hr, 10),
                selected: s,
                random: r,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HistogramReport {
        selected: selected.len(),
        spaces,
        objective: Vec::new(),
    })
}

/// Builds the histogram report from the artifacts of a finished MI run.
pub fn report_dir(out_dir: &Path, seed: u64) -> Result<HistogramReport> {
    let table = AssignmentTable::load(&out_dir.join(files::ASSIGNMENTS))?;
    let ids = read_selection(&out_dir.join(files::SELECTION))?;
    let rows = table.rows_of(&ids)?;
    let mut report = histogram_report(&table, &rows, stage_seed(seed, "report"))?;
    let trace = out_dir.join(files::TRACE);
    if trace.exists() {
        let text = fs::read_to_string(&trace).map_err(|e| Error::io(&trace, e))?;
        report.objective = text
            .lines()
            .skip(1)
            .filter_map(|l| l.rsplit('\t').next())
            .map(|v| KeyValues::number("objective", v))
            .collect::<Result<Vec<f64>>>()?;
    }
    Ok(report)
}

impl HistogramReport {
    pub fn to_text(&self) -> String {
        if self.selected == 0 {
            return "empty selection\n".to_string();
        }
        let mut s = format!("selected clips: {}\n", self.selected);
        s.push_str("space       top10(sel)  top10(rand)  chi2        dof   p\n");
        for h in &self.spaces {
            s.push_str(&format!(
                "{:<11} {:>10.4}  {:>11.4}  {:>10.3}  {:>4}  {:.3e}\n",
                h.space.to_string(),
                h.selected_top10,
                h.random_top10,
                h.chi_square.statistic,
                h.chi_square.dof,
                h.chi_square.p_value
            ));
        }
        for h in &self.spaces {
            s.push_str(&format!("\n{} cluster counts (selected | random)\n", h.space));
            let peak = h.selected.iter().chain(&h.random).copied().max().unwrap_or(1).max(1);
            let bar = |c: u64| "#".repeat(((c as f64 / peak as f64) * 30.0).round() as usize);
            for (id, (&a, &b)) in h.selected.iter().zip(&h.random).enumerate() {
                if a + b > 0 {
                    s.push_str(&format!("{id:>5} {a:>7} {:<30} | {b:>7} {}\n", bar(a), bar(b)));
                }
            }
        }
        if let (Some(first), Some(last)) = (self.objective.first(), self.objective.last()) {
            s.push_str(&format!(
                "\nobjective: {} steps, {first:.6} -> {last:.6} nats\n",
                self.objective.len()
            ));
        }
        s
    }
}
