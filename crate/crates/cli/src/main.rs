//! `acav`: every curation stage as a subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acav_core::assignment::{build_assignment_table, AssignmentTable};
use acav_core::bench::{
    ablate, generate_task, run_bench, AblationAxis, BenchConfig, ClusteringAlg, Method, TaskKind, TaskSpec,
};
use acav_core::config::stage_seed;
use acav_core::contrastive::{score_store, train_heads_on_store, HeadPair, TrainConfig};
use acav_core::error::Error;
use acav_core::filter::{select_clips, FilterPolicy, SimilarityMatrix};
use acav_core::kmeans::{fit_lloyd, fit_sgd, quantization_error, Clustering, LloydParams, SgdParams, StoreSpace};
use acav_core::mi::{ContingencyState, LayerWeights, PairingKind, PairingScheme};
use acav_core::pca::{RankMetric, RankingBaseline};
use acav_core::pipeline::{
    files, filter_rows, histogram_report, read_selection, report_dir, run_pipeline, write_selection,
    PipelineConfig, Stage,
};
use acav_core::select::{batch_greedy, greedy, rank_select, SelectionConfig};
use acav_core::store::{write_store, ClipRecord, LayerEntry, LayerSpec, Space, StoreReader};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "acav", version, about = "Audio-visual correspondence dataset curation")]
struct Cli {
    /// Worker threads (0 = all cores). ACAV_WORKERS takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a feature store from JSON lines, or from a synthetic task.
    Ingest(IngestArgs),
    /// Apply the metadata filter policy to a store or metadata file.
    Filter(FilterArgs),
    /// Pick the k least similar clips of one video from a similarity matrix.
    Dedup(DedupArgs),
    /// Fit k-means for one or all spaces of a store.
    Cluster(ClusterArgs),
    /// Assign every clip to its nearest centroid in each space.
    Assign(AssignArgs),
    /// Report the averaged pairwise MI of a set of clips.
    Score(ScoreArgs),
    /// Choose clips by (batch) greedy MI maximization.
    Select(SelectArgs),
    /// Train contrastive projection heads on a store.
    TrainHeads(TrainArgs),
    /// Keep the clips whose trained embeddings agree best.
    Rank(RankArgs),
    /// Keep the clips whose PCA-projected features agree best.
    BaselineRank(BaselineArgs),
    /// Compare every method on a synthetic retrieval task.
    Bench(BenchArgs),
    /// Sweep one setting of the clustering method on a synthetic task.
    Ablate(AblateArgs),
    /// Cluster histograms of a selection against a random subset.
    Report(ReportArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// JSON lines: metadata fields plus `features: {"audio1": [...], ...}`.
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Generate a synthetic task instead (natural_class, arbitrary_class, sample_level).
    #[arg(long)]
    synthetic: Option<TaskKind>,
    #[command(flatten)]
    task: TaskArgs,
    /// Which split of the synthetic task to write.
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
    /// Where to write the ground-truth positive clip IDs of a synthetic split.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TaskArgs {
    #[arg(long, default_value_t = 32)]
    classes: usize,
    /// Pairs per class in each split.
    #[arg(long, default_value_t = 50)]
    cap: usize,
    #[arg(long, default_value_t = 1.5)]
    noise: f64,
    #[arg(long, default_value_t = 0.3)]
    within: f64,
    /// Fraction of positives drawn with a tenth of the noise.
    #[arg(long, default_value_t = 0.0)]
    easy: f64,
    #[arg(long, default_value_t = 0.5)]
    positive_fraction: f64,
    #[arg(long, default_value_t = 5)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TaskArgs {
    fn spec(&self, kind: TaskKind) -> TaskSpec {
        TaskSpec {
            per_class_cap: self.cap,
            noise_scale: self.noise,
            within_class: self.within,
            easy_fraction: self.easy,
            positive_fraction: self.positive_fraction,
            layers: self.layers,
            feature_dim: self.dim,
            seed: self.seed,
            ..TaskSpec::new(kind, self.classes)
        }
    }
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long, required_unless_present = "metadata")]
    store: Option<PathBuf>,
    /// Metadata lines in the store sidecar format.
    #[arg(long, alias = "meta", conflicts_with = "store")]
    metadata: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Accepted clip IDs, one per line.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-clip decision table (TSV); printed when neither output is given.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct DedupArgs {
    /// Whitespace-separated similarity matrix.
    #[arg(long, alias = "scores")]
    matrix: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    store: PathBuf,
    /// Space such as `audio3`, or `all`.
    #[arg(long, default_value = "all")]
    space: String,
    #[arg(long, default_value_t = 500)]
    k: usize,
    #[arg(long, default_value = "sgd")]
    alg: ClusteringAlg,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 100_000)]
    batch_size: usize,
    #[arg(long)]
    no_reinit: bool,
    #[arg(long)]
    standardize: bool,
    /// Lloyd iteration cap.
    #[arg(long, default_value_t = 300)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Restrict fitting to these clip IDs (one per line).
    #[arg(long)]
    clips: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving one `clusters-<space>.bin` per space.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AssignArgs {
    #[arg(long)]
    store: PathBuf,
    /// Directory of `clusters-<space>.bin` files.
    #[arg(long)]
    clusters: PathBuf,
    #[arg(long)]
    clips: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SchemeArgs {
    #[arg(long, default_value = "combination")]
    pairing: PairingKind,
    /// `uniform`, `linear(a)`, `exp(a)` or a comma list of per-layer weights.
    #[arg(long, default_value = "uniform")]
    weights: LayerWeights,
}

impl SchemeArgs {
    fn scheme(&self) -> PairingScheme {
        PairingScheme::new(self.pairing).with_weights(self.weights.clone())
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    assignments: PathBuf,
    /// Clip IDs to score; all clips when absent.
    #[arg(long)]
    selection: Option<PathBuf>,
    #[command(flatten)]
    scheme: SchemeArgs,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    assignments: PathBuf,
    /// Target subset size M.
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 10_000)]
    b: usize,
    #[arg(long, default_value_t = 500)]
    s: usize,
    /// Plain greedy over the whole pool.
    #[arg(long)]
    greedy: bool,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-step objective (TSV).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    clips: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    d_out: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    heads: PathBuf,
    #[arg(long)]
    clips: Option<PathBuf>,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    clips: Option<PathBuf>,
    /// inner, cosine or l2.
    #[arg(long, default_value = "cosine")]
    metric: RankMetric,
    #[arg(long, default_value_t = 64)]
    pca_dim: usize,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "sample_level")]
    task: TaskKind,
    #[command(flatten)]
    spec: TaskArgs,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Comma list of methods, or `all`.
    #[arg(long, default_value = "all")]
    methods: String,
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    /// Report path; `.json` gets JSON, anything else aligned text.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// pairing, sb_ratio, centroids, clustering_alg or layer_weights.
    #[arg(long)]
    axis: String,
    #[arg(long, default_value = "sample_level")]
    task: TaskKind,
    #[command(flatten)]
    spec: TaskArgs,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    /// Batch size of the sb_ratio axis.
    #[arg(long, default_value_t = 160)]
    b: usize,
    /// Selection sizes of the sb_ratio axis (0 = plain greedy).
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,40,80")]
    s: Vec<usize>,
    /// Grid for the other axes; layer_weights entries are separated by `;`.
    #[arg(long)]
    grid: Option<String>,
    /// `.json`, `.tsv` or text.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a `run`.
    #[arg(long, conflicts_with_all = ["assignments", "selection"])]
    dir: Option<PathBuf>,
    #[arg(long, requires = "selection")]
    assignments: Option<PathBuf>,
    #[arg(long)]
    selection: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

struct Failure {
    stage: Stage,
    error: Error,
}

type Outcome<T = ()> = Result<T, Failure>;

trait At<T> {
    fn at(self, stage: Stage) -> Outcome<T>;
}

impl<T, E: Into<Error>> At<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Outcome<T> {
        self.map_err(|e| Failure { stage, error: e.into() })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn clip_rows(reader: &StoreReader, clips: Option<&Path>) -> Result<Option<Vec<usize>>, Error> {
    let Some(path) = clips else { return Ok(None) };
    let mut rows = read_selection(path)?
        .iter()
        .map(|id| reader.index_of(id).ok_or_else(|| Error::UnknownClip(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_unstable();
    rows.dedup();
    Ok(Some(rows))
}

#[derive(Deserialize)]
struct IngestLine {
    #[serde(flatten)]
    record: ClipRecord,
    features: BTreeMap<String, Vec<f32>>,
}

fn ingest(a: IngestArgs) -> Outcome {
    let st = Stage::Config;
    if let Some(kind) = a.synthetic {
        let task = generate_task(&a.task.spec(kind)).at(st)?;
        let split = if a.split == "train" { &task.train } else { &task.test };
        let manifest = split.write_store(&a.out).at(st)?;
        if let Some(truth) = &a.truth {
            let ids = split.clip_ids();
            let pos: Vec<String> = ids.into_iter().zip(&split.positive).filter(|(_, p)| **p).map(|(id, _)| id).collect();
            write_selection(truth, &pos).at(st)?;
        }
        println!("wrote {} clips to {}", manifest.clip_count, a.out.display());
        return Ok(());
    }
    let input = a
        .input
        .ok_or_else(|| Error::Config("ingest needs --input or --synthetic".into()))
        .at(st)?;
    let file = fs::File::open(&input).map_err(|e| io_err(&input, e)).at(st)?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(&input, e)).at(st)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: IngestLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))
            .at(st)?;
        lines.push(parsed);
    }
    let first = lines.first().ok_or_else(|| Error::Format("no records".into())).at(st)?;
    let mut entries = first
        .features
        .iter()
        .map(|(name, v)| Ok(LayerEntry { space: name.parse::<Space>()?, dim: v.len() }))
        .collect::<Result<Vec<_>, Error>>()
        .at(st)?;
    entries.sort_by_key(|e| e.space);
    let spec = LayerSpec::new(entries.clone()).at(st)?;
    let records = lines.into_iter().map(|l| {
        let feats = entries
            .iter()
            .map(|e| l.features.get(&e.space.to_string()).cloned().unwrap_or_default())
            .collect();
        (l.record, feats)
    });
    let manifest = write_store(&a.out, spec, records).at(st)?;
    println!("wrote {} clips to {}", manifest.clip_count, a.out.display());
    Ok(())
}

fn filter(a: FilterArgs) -> Outcome {
    let st = Stage::Filter;
    let policy = match &a.policy {
        Some(p) => FilterPolicy::load(p).at(st)?,
        None => FilterPolicy::default(),
    };
    let (ids, tsv) = match (&a.store, &a.metadata) {
        (Some(store), _) => {
            let reader = StoreReader::open(store).at(st)?;
            let (rows, tsv) = filter_rows(&reader, &policy).at(st)?;
            (rows.into_iter().map(|r| reader.clip_ids()[r].clone()).collect::<Vec<_>>(), tsv)
        }
        (None, Some(meta)) => {
            let records = acav_core::store::read_metadata(meta).at(st)?;
            let mut tsv = String::from("clip_id\taccepted\treason\n");
            let mut ids = Vec::new();
            for d in acav_core::filter::filter_metadata(&records, &policy) {
                tsv.push_str(&format!("{}\t{}\t{}\n", d.clip_id, d.accepted, d.reason));
                if d.accepted {
                    ids.push(d.clip_id);
                }
            }
            (ids, tsv)
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    if let Some(p) = &a.out {
        write_selection(p, &ids).at(st)?;
    }
    if a.table.is_some() || a.out.is_none() {
        write_or_print(a.table.as_deref(), &tsv).at(st)?;
    }
    eprintln!("{} accepted", ids.len());
    Ok(())
}

fn dedup(a: DedupArgs) -> Outcome {
    let st = Stage::Filter;
    let text = fs::read_to_string(&a.matrix).map_err(|e| io_err(&a.matrix, e)).at(st)?;
    let m = SimilarityMatrix::parse(&text).at(st)?;
    let r = select_clips(&m, a.k, a.max_iters).at(st)?;
    let idx: Vec<String> = r.indices.iter().map(usize::to_string).collect();
    println!("{}\tobjective={:.6}\tswaps={}", idx.join(","), r.objective, r.iterations);
    Ok(())
}

fn spaces_of(reader: &StoreReader, which: &str) -> Result<Vec<Space>, Error> {
    if which == "all" {
        Ok(reader.layer_spec().spaces().collect())
    } else {
        which.split(',').map(str::parse).collect()
    }
}

fn cluster(a: ClusterArgs) -> Outcome {
    let st = Stage::Cluster;
    let reader = StoreReader::open(&a.store).at(st)?;
    let rows = clip_rows(&reader, a.clips.as_deref()).at(st)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e)).at(st)?;
    for space in spaces_of(&reader, &a.space).at(st)? {
        let seed = stage_seed(a.seed, &format!("cluster-{space}"));
        let source = StoreSpace { rows: rows.as_deref(), ..StoreSpace::new(&reader, space) };
        let mut model = match a.alg {
            ClusteringAlg::Sgd => fit_sgd(
                &source,
                &SgdParams {
                    k: a.k,
                    lr: a.lr,
                    epochs: a.epochs,
                    batch_size: a.batch_size,
                    seed,
                    reinit: !a.no_reinit,
                    standardize: a.standardize,
                },
            )
            .at(st)?,
            ClusteringAlg::Lloyd => {
                let mut data = reader.load_space(space).at(st)?;
                if let Some(rows) = &rows {
                    data = data.select(rows);
                }
                fit_lloyd(&data, &LloydParams { k: a.k, max_iters: a.max_iters, tol: a.tol, seed }).at(st)?.0
            }
        };
        model.space = Some(space);
        let qe = quantization_error(&model, &source).at(st)?;
        model.save(&a.out_dir.join(files::clustering(&space))).at(st)?;
        println!("{space}\tk={}\tquantization_error={qe:.6}\treinits={}", model.k, model.reinit_count);
    }
    Ok(())
}

fn assign(a: AssignArgs) -> Outcome {
    let st = Stage::Assign;
    let reader = StoreReader::open(&a.store).at(st)?;
    let rows = clip_rows(&reader, a.clips.as_deref()).at(st)?;
    let models = reader
        .layer_spec()
        .spaces()
        .map(|s| Clustering::load(&a.clusters.join(files::clustering(&s))))
        .collect::<Result<Vec<_>, _>>()
        .at(st)?;
    let table = build_assignment_table(&reader, &models, rows.as_deref()).at(st)?;
    table.save(&a.out).at(st)?;
    println!("assigned {} clips in {} spaces", table.len(), table.width());
    Ok(())
}

fn score(a: ScoreArgs) -> Outcome {
    let st = Stage::Select;
    let table = AssignmentTable::load(&a.assignments).at(st)?;
    let rows = match &a.selection {
        Some(p) => table.rows_of(&read_selection(p).at(st)?).at(st)?,
        None => (0..table.len()).collect(),
    };
    let state = ContingencyState::build(&table, &rows, &a.scheme.scheme()).at(st)?;
    let s = state.score();
    println!("clips\t{}", rows.len());
    println!("objective\t{:.9}", s.value);
    for p in &s.per_pair {
        println!("{}-{}\tweight={:.6}\tmi={:.9}", p.a, p.b, p.weight, p.mi);
    }
    Ok(())
}

fn select(a: SelectArgs) -> Outcome {
    let st = Stage::Select;
    let table = AssignmentTable::load(&a.assignments).at(st)?;
    let scheme = a.scheme.scheme();
    let result = if a.greedy {
        greedy(&table, a.m, &scheme).at(st)?
    } else {
        let cfg = SelectionConfig {
            target_size: a.m,
            batch_size: a.b,
            selection_size: a.s,
            seed: stage_seed(a.seed, "select"),
            scheme,
        };
        batch_greedy(&table, &cfg).at(st)?
    };
    write_selection(&a.out, &result.chosen).at(st)?;
    if let Some(t) = &a.trace {
        let mut s = String::from("step\tclip_id\tobjective\n");
        for (i, (id, v)) in result.chosen.iter().zip(&result.step_scores).enumerate() {
            s.push_str(&format!("{}\t{id}\t{v:.12}\n", i + 1));
        }
        write_text(t, &s).at(st)?;
    }
    println!(
        "selected {} clips, objective {:.6}",
        result.rows.len(),
        result.step_scores.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let st = Stage::TrainHeads;
    let reader = StoreReader::open(&a.store).at(st)?;
    let rows = clip_rows(&reader, a.clips.as_deref()).at(st)?;
    let cfg = TrainConfig {
        tau: a.tau,
        batch_size: a.batch_size,
        epochs: a.epochs,
        lr: a.lr,
        d_out: a.d_out,
        seed: stage_seed(a.seed, "train-heads"),
        ..TrainConfig::default()
    };
    let (heads, log) = train_heads_on_store(&reader, rows.as_deref(), &cfg).at(st)?;
    heads.save(&a.out).at(st)?;
    for (e, l) in log.epoch_loss.iter().enumerate() {
        println!("epoch {}\tloss {l:.6}", e + 1);
    }
    Ok(())
}

fn emit_ranking(reader: &StoreReader, rows: Option<&[usize]>, scores: &[f64], m: usize, out: &Path, scores_out: Option<&Path>) -> Result<(), Error> {
    let ids: Vec<&String> = match rows {
        Some(rows) => rows.iter().map(|&r| &reader.clip_ids()[r]).collect(),
        None => reader.clip_ids().iter().collect(),
    };
    if let Some(p) = scores_out {
        let mut s = String::from("clip_id\tscore\n");
        for (id, v) in ids.iter().zip(scores) {
            s.push_str(&format!("{id}\t{v:.12}\n"));
        }
        write_text(p, &s)?;
    }
    let top: Vec<String> = rank_select(scores, m)?.into_iter().map(|i| ids[i].clone()).collect();
    write_selection(out, &top)?;
    println!("kept {} of {} clips", top.len(), ids.len());
    Ok(())
}

fn rank(a: RankArgs) -> Outcome {
    let st = Stage::Rank;
    let reader = StoreReader::open(&a.store).at(st)?;
    let rows = clip_rows(&reader, a.clips.as_deref()).at(st)?;
    let heads = HeadPair::load(&a.heads).at(st)?;
    let scores = score_store(&heads, &reader, rows.as_deref()).at(st)?;
    emit_ranking(&reader, rows.as_deref(), &scores, a.m, &a.out, a.scores.as_deref()).at(st)
}

fn baseline_rank(a: BaselineArgs) -> Outcome {
    let st = Stage::Rank;
    let reader = StoreReader::open(&a.store).at(st)?;
    let rows = clip_rows(&reader, a.clips.as_deref()).at(st)?;
    let model = RankingBaseline::fit_store(&reader, rows.as_deref(), a.pca_dim).at(st)?;
    let scores = model.score_store(&reader, rows.as_deref(), a.metric).at(st)?;
    emit_ranking(&reader, rows.as_deref(), &scores, a.m, &a.out, a.scores.as_deref()).at(st)
}

fn bench(a: BenchArgs) -> Outcome {
    let st = Stage::Config;
    let spec = a.spec.spec(a.task);
    let cfg = BenchConfig {
        runs: a.runs,
        selection_fraction: a.fraction,
        methods: Method::parse_list(&a.methods).at(st)?,
        ..BenchConfig::default()
    };
    let report = run_bench(&spec, &cfg).at(st)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        let text = if out.extension().is_some_and(|e| e == "json") {
            report.to_json().at(st)?
        } else {
            report.to_text()
        };
        write_text(out, &text).at(st)?;
    }
    Ok(())
}

fn parse_grid<T>(grid: Option<&str>, sep: char, default: &str) -> Result<Vec<T>, Error>
where
    T: std::str::FromStr,
    Error: From<T::Err>,
{
    grid.unwrap_or(default)
        .split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(Error::from))
        .collect()
}

fn ablate_cmd(a: AblateArgs) -> Outcome {
    let st = Stage::Config;
    let g = a.grid.as_deref();
    let axis = match a.axis.as_str() {
        "pairing" => AblationAxis::Pairing(parse_grid(g, ',', "diagonal,bipartite,combination").at(st)?),
        "sb_ratio" => AblationAxis::SbRatio { batch_size: a.b, selection_sizes: a.s.clone() },
        "centroids" => AblationAxis::Centroids(
            g.unwrap_or("8,16,32,64,128")
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad centroid count {s:?}"))))
                .collect::<Result<_, _>>()
                .at(st)?,
        ),
        "clustering_alg" => AblationAxis::ClusteringAlg(parse_grid(g, ',', "sgd,lloyd").at(st)?),
        "layer_weights" => AblationAxis::LayerWeights(parse_grid(g, ';', "uniform;linear(0.25);linear(-0.25);exp(1);exp(-1)").at(st)?),
        other => return Err(Error::Config(format!("unknown ablation axis {other:?}"))).at(st),
    };
    let cfg = BenchConfig {
        runs: a.runs,
        selection_fraction: a.fraction,
        ..BenchConfig::default()
    };
    let table = ablate(&a.spec.spec(a.task), &cfg, &axis).at(st)?;
    print!("{}", table.to_text());
    if let Some(out) = &a.out {
        let text = match out.extension().and_then(|e| e.to_str()) {
            Some("json") => table.to_json().at(st)?,
            Some("tsv") => table.to_tsv(),
            _ => table.to_text(),
        };
        write_text(out, &text).at(st)?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Outcome {
    let st = Stage::Report;
    let report = match (&a.dir, &a.assignments, &a.selection) {
        (Some(dir), _, _) => report_dir(dir, a.seed).at(st)?,
        (None, Some(assign), Some(sel)) => {
            let table = AssignmentTable::load(assign).at(st)?;
            let rows = table.rows_of(&read_selection(sel).at(st)?).at(st)?;
            histogram_report(&table, &rows, stage_seed(a.seed, "report")).at(st)?
        }
        _ => return Err(Error::Config("report needs --dir or --assignments with --selection".into())).at(st),
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from).at(st)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn run(a: RunArgs, workers: Option<usize>) -> Outcome {
    let mut config = PipelineConfig::load(&a.config).at(Stage::Config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(w) = workers {
        config.workers = w;
    }
    match run_pipeline(&config) {
        Ok(summary) => {
            println!(
                "selected {} clips -> {}",
                summary.selected.len(),
                config.out_dir.join(files::SELECTION).display()
            );
            for t in &summary.provenance.stages {
                println!("{:<12} {:.3}s", t.stage.to_string(), t.seconds);
            }
            Ok(())
        }
        Err(e) => Err(Failure { stage: e.stage, error: e.source }),
    }
}

/// `ACAV_WORKERS` wins over `--workers`; `None` keeps the config's own value.
fn resolve_workers(flag: usize) -> Result<Option<usize>, Error> {
    match std::env::var("ACAV_WORKERS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("ACAV_WORKERS={v:?} is not a count"))),
        Err(_) => Ok((flag > 0).then_some(flag)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = match resolve_workers(cli.workers) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(Stage::Config.exit_code() as u8);
        }
    };
    if let Some(w) = workers {
        // the pipeline builds its own pool from the config; this covers the single-stage commands
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let outcome = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Filter(a) => filter(a),
        Command::Dedup(a) => dedup(a),
        Command::Cluster(a) => cluster(a),
        Command::Assign(a) => assign(a),
        Command::Score(a) => score(a),
        Command::Select(a) => select(a),
        Command::TrainHeads(a) => train(a),
        Command::Rank(a) => rank(a),
        Command::BaselineRank(a) => baseline_rank(a),
        Command::Bench(a) => bench(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a, workers),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error in stage {}: {}", f.stage, f.error);
            ExitCode::from(f.stage.exit_code() as u8)
        }
    }
}
