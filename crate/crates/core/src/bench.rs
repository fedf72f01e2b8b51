//! Seeded correspondence-retrieval tasks over synthetic multi-layer features,
//! the retrieval methods compared on them, and ablation sweeps.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentTable;
use crate::config::stage_seed;
use crate::contrastive::{score_pairs, Batching, TrainConfig};
use crate::error::{Error, Result};
use crate::kmeans::{assign, fit_lloyd, fit_sgd, quantization_error, LloydParams, SgdParams};
use crate::mi::{LayerWeights, PairingKind, PairingScheme};
use crate::pca::{RankMetric, RankingBaseline};
use crate::select::{batch_greedy, greedy, rank_select, SelectionConfig};
use crate::store::{write_store, ClipRecord, Dataset, LayerSpec, Modality, Space, StoreManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Both modalities share class centers; audio features pass through a fixed rotation.
    NaturalClass,
    /// Each modality has its own class centers, linked by a fixed class bijection.
    ArbitraryClass,
    /// One latent vector per pair drives both modalities; negatives are permuted pairs.
    SampleLevel,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::NaturalClass => "natural_class",
            TaskKind::ArbitraryClass => "arbitrary_class",
            TaskKind::SampleLevel => "sample_level",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural_class" => Ok(TaskKind::NaturalClass),
            "arbitrary_class" => Ok(TaskKind::ArbitraryClass),
            "sample_level" => Ok(TaskKind::SampleLevel),
            _ => Err(Error::invalid(format!("unknown task kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_classes: usize,
    /// Pairs per class in each split.
    pub per_class_cap: usize,
    pub positive_fraction: f64,
    /// Dimension of the latent class/sample vector.
    pub base_dim: usize,
    /// Dimension of every emitted feature layer.
    pub feature_dim: usize,
    pub layers: usize,
    /// Layer `l` carries Gaussian noise of scale `noise_scale (L - l + 1) / L`.
    pub noise_scale: f64,
    /// Spread of samples around their class center.
    pub within_class: f64,
    /// Width of the per-clip latent private to each modality (content the
    /// other modality carries no trace of).
    pub private_dim: usize,
    pub private_scale: f64,
    /// How far each layer's map departs from the one below: `0` repeats the
    /// map at every layer, `1` draws every layer independently.
    pub layer_drift: f64,
    /// Fraction of positives generated with a tenth of the noise.
    pub easy_fraction: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, n_classes: usize) -> Self {
        Self {
            kind,
            n_classes,
            per_class_cap: 1000,
            positive_fraction: 0.5,
            base_dim: 16,
            feature_dim: 32,
            layers: 5,
            noise_scale: 0.5,
            within_class: 0.3,
            private_dim: 0,
            private_scale: 1.0,
            layer_drift: 1.0,
            easy_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let class_level = self.kind != TaskKind::SampleLevel;
        if self.n_classes < if class_level { 4 } else { 1 } {
            return Err(Error::invalid("class-level tasks need at least 4 classes"));
        }
        if self.per_class_cap == 0 || self.base_dim == 0 || self.feature_dim == 0 || self.layers == 0 {
            return Err(Error::invalid("task sizes must be positive"));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::invalid("positive_fraction must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.layer_drift) {
            return Err(Error::invalid("layer_drift must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.easy_fraction) {
            return Err(Error::invalid("easy_fraction must lie in [0, 1]"));
        }
        if !(self.noise_scale >= 0.0 && self.within_class >= 0.0 && self.private_scale >= 0.0) {
            return Err(Error::invalid("noise scales must be non-negative"));
        }
        if self.kind == TaskKind::NaturalClass && self.base_dim > self.feature_dim {
            return Err(Error::invalid("natural_class needs base_dim <= feature_dim"));
        }
        Ok(())
    }

    pub fn pairs_per_split(&self) -> usize {
        self.n_classes * self.per_class_cap
    }

    pub fn positives_per_split(&self) -> usize {
        (self.positive_fraction * self.pairs_per_split() as f64).ceil() as usize
    }

    fn latent_dim(&self) -> usize {
        self.base_dim + self.private_dim
    }

    pub fn layer_noise(&self, layer: usize) -> f64 {
        self.noise_scale * (self.layers - layer + 1) as f64 / self.layers as f64
    }
}

/// One split of a task: per-layer features for both modalities plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    /// `visual[l - 1]` holds layer `l`.
    pub visual: Vec<Dataset>,
    pub audio: Vec<Dataset>,
    pub positive: Vec<bool>,
    pub easy: Vec<bool>,
    pub visual_class: Vec<usize>,
    pub audio_class: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.visual.len()
    }

    pub fn top_visual(&self) -> &Dataset {
        self.visual.last().expect("split has layers")
    }

    pub fn top_audio(&self) -> &Dataset {
        self.audio.last().expect("split has layers")
    }

    pub fn clip_ids(&self) -> Vec<String> {
        (0..self.len()).map(|i| format!("p{i:06}")).collect()
    }

    /// Audio layers first, then visual, matching [`LayerSpec::symmetric`].
    pub fn spaces(&self) -> Vec<(Space, &Dataset)> {
        let a = self.audio.iter().enumerate().map(|(l, d)| (Space::new(Modality::Audio, l + 1), d));
        let v = self.visual.iter().enumerate().map(|(l, d)| (Space::new(Modality::Visual, l + 1), d));
        a.chain(v).collect()
    }

    /// Writes the split as a feature store; clip IDs are [`Split::clip_ids`] and
    /// every record passes the default filter policy.
    pub fn write_store(&self, path: &Path) -> Result<StoreManifest> {
        let dim = self.visual[0].dim();
        let spec = LayerSpec::symmetric(self.layers(), dim);
        let spaces = self.spaces();
        let records = self.clip_ids().into_iter().enumerate().map(|(i, id)| {
            let feats = spaces.iter().map(|(_, d)| d.row_f32(i)).collect();
            let record = ClipRecord {
                language: Some("en".into()),
                ..ClipRecord::new(id, 60.0)
            };
            (record, feats)
        });
        write_store(path, spec, records)
    }

    /// Precision (percent) of a selection of row indices.
    pub fn precision(&self, rows: &[usize]) -> f64 {
        precision(&self.positive, rows)
    }
}

pub fn precision(positive: &[bool], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let tp = rows.iter().filter(|&&r| positive[r]).count();
    100.0 * tp as f64 / rows.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTask {
    pub spec: TaskSpec,
    pub train: Split,
    pub test: Split,
    /// Visual class -> audio class for `arbitrary_class` tasks.
    pub bijection: Option<Vec<usize>>,
    /// Classes used for positive pairs (class-level tasks only).
    pub positive_classes: Vec<usize>,
}

fn gaussian(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Row-major `rows x cols` matrix with N(0, 1/cols) entries.
fn random_map(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    gaussian(rng, rows * cols, 1.0 / (cols as f64).sqrt())
}

/// Random orthogonal `n x n` matrix by Gram-Schmidt over Gaussian rows.
fn random_orthogonal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v = gaussian(rng, n, 1.0);
        for _ in 0..2 {
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
    }
    q.concat()
}

fn mat_vec(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols).map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Fixed generative structure shared by the train and test splits.
struct World {
    visual_centers: Vec<Vec<f64>>,
    audio_centers: Vec<Vec<f64>>,
    visual_maps: Vec<Vec<f64>>,
    audio_maps: Vec<Vec<f64>>,
    rotation: Option<Vec<f64>>,
    private_centers: Vec<Vec<f64>>,
    bijection: Option<Vec<usize>>,
    positive_classes: Vec<usize>,
    negative_classes: Vec<usize>,
}

impl World {
    fn new(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Self {
        let centers = |rng: &mut ChaCha8Rng| (0..spec.n_classes).map(|_| gaussian(rng, spec.base_dim, 1.0)).collect::<Vec<_>>();
        // each map mixes its predecessor with a fresh draw, keeping entry variance 1/latent_dim
        let maps = |rng: &mut ChaCha8Rng| {
            let (keep, fresh) = ((1.0 - spec.layer_drift * spec.layer_drift).sqrt(), spec.layer_drift);
            let mut out: Vec<Vec<f64>> = vec![random_map(rng, spec.feature_dim, spec.latent_dim())];
            for _ in 1..spec.layers {
                let next = random_map(rng, spec.feature_dim, spec.latent_dim());
                let prev = out.last().expect("non-empty");
                out.push(prev.iter().zip(next).map(|(p, n)| keep * p + fresh * n).collect());
            }
            out
        };
        let visual_centers = centers(rng);
        let visual_maps = maps(rng);
        let (audio_centers, audio_maps, rotation, bijection) = match spec.kind {
            TaskKind::NaturalClass => (
                visual_centers.clone(),
                visual_maps.clone(),
                Some(random_orthogonal(rng, spec.feature_dim)),
                None,
            ),
            TaskKind::ArbitraryClass => {
                let mut perm: Vec<usize> = (0..spec.n_classes).collect();
                perm.shuffle(rng);
                (centers(rng), maps(rng), None, Some(perm))
            }
            TaskKind::SampleLevel => (Vec::new(), maps(rng), None, None),
        };
        let private_centers = if spec.private_dim == 0 {
            Vec::new()
        } else {
            (0..spec.n_classes).map(|_| gaussian(rng, spec.private_dim, spec.private_scale)).collect()
        };
        let mut classes: Vec<usize> = (0..spec.n_classes).collect();
        classes.shuffle(rng);
        let half = spec.n_classes / 2;
        let (mut positive_classes, mut negative_classes) = match spec.kind {
            TaskKind::SampleLevel => (Vec::new(), Vec::new()),
            _ => (classes[..half].to_vec(), classes[half..].to_vec()),
        };
        positive_classes.sort_unstable();
        negative_classes.sort_unstable();
        Self {
            visual_centers,
            audio_centers,
            visual_maps,
            audio_maps,
            rotation,
            private_centers,
            bijection,
            positive_classes,
            negative_classes,
        }
    }

    fn emit(&self, spec: &TaskSpec, maps: &[Vec<f64>], latent: &[f64], gain: f64, rotate: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        maps.iter()
            .enumerate()
            .map(|(l, m)| {
                let noise = spec.layer_noise(l + 1) * gain;
                let mut x = mat_vec(m, spec.latent_dim(), latent);
                x.iter_mut().zip(gaussian(rng, spec.feature_dim, noise)).for_each(|(a, e)| *a += e);
                match (&self.rotation, rotate) {
                    (Some(q), true) => mat_vec(q, spec.feature_dim, &x),
                    _ => x,
                }
            })
            .collect()
    }

    /// Class-centered shared part followed by a private part.
    fn sample(&self, centers: &[Vec<f64>], class: usize, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x: Vec<f64> = centers[class]
            .iter()
            .zip(gaussian(rng, spec.base_dim, spec.within_class))
            .map(|(c, e)| c + e)
            .collect();
        x.extend(self.private(spec, rng));
        x
    }

    fn private(&self, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
        if self.private_centers.is_empty() {
            return Vec::new();
        }
        let c = &self.private_centers[rng.random_range(0..self.private_centers.len())];
        c.iter().zip(gaussian(rng, spec.private_dim, spec.within_class)).map(|(c, e)| c + e).collect()
    }

    fn with_private(&self, shared: &[f64], spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = shared[..spec.base_dim].to_vec();
        x.extend(self.private(spec, rng));
        x
    }

    fn split(&self, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Split {
        let n = spec.pairs_per_split();
        let n_pos = spec.positives_per_split();
        let n_easy = (spec.easy_fraction * n_pos as f64).round() as usize;
        // (visual latent, audio latent, visual class, audio class, positive)
        let mut pairs: Vec<(Vec<f64>, Vec<f64>, usize, usize, bool)> = Vec::with_capacity(n);
        match spec.kind {
            TaskKind::SampleLevel => {
                // (visual latent, audio latent, class) per clip
                let clips: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..n)
                    .map(|i| {
                        let c = i % spec.n_classes;
                        let v = self.sample(&self.visual_centers, c, spec, rng);
                        let a = self.with_private(&v, spec, rng);
                        (v, a, c)
                    })
                    .collect();
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(rng);
                let (pos, neg) = order.split_at(n_pos);
                for &i in pos {
                    pairs.push((clips[i].0.clone(), clips[i].1.clone(), clips[i].2, clips[i].2, true));
                }
                // audio of negative i comes from negative perm[i] != i
                let mut perm: Vec<usize> = neg.to_vec();
                if perm.len() > 1 {
                    perm.shuffle(rng);
                    for i in 0..perm.len() {
                        if perm[i] == neg[i] {
                            let j = (i + 1) % perm.len();
                            perm.swap(i, j);
                        }
                    }
                }
                for (&i, &j) in neg.iter().zip(&perm) {
                    pairs.push((clips[i].0.clone(), clips[j].1.clone(), clips[i].2, clips[j].2, false));
                }
            }
            _ => {
                let audio_class = |c: usize| self.bijection.as_ref().map_or(c, |b| b[c]);
                for i in 0..n_pos {
                    let c = self.positive_classes[i % self.positive_classes.len()];
                    let v = self.sample(&self.visual_centers, c, spec, rng);
                    let a = self.sample(&self.audio_centers, audio_class(c), spec, rng);
                    pairs.push((v, a, c, audio_class(c), true));
                }
                let m = self.negative_classes.len();
                for i in 0..n - n_pos {
                    let c = self.negative_classes[i % m];
                    let other = self.negative_classes[(i % m + 1 + rng.random_range(0..m - 1)) % m];
                    let v = self.sample(&self.visual_centers, c, spec, rng);
                    let a = self.sample(&self.audio_centers, audio_class(other), spec, rng);
                    pairs.push((v, a, c, audio_class(other), false));
                }
            }
        }
        pairs.shuffle(rng);
        let mut easy_left = n_easy;
        let mut split = Split {
            visual: vec![Dataset::with_dim(spec.feature_dim); spec.layers],
            audio: vec![Dataset::with_dim(spec.feature_dim); spec.layers],
            positive: Vec::with_capacity(n),
            easy: Vec::with_capacity(n),
            visual_class: Vec::with_capacity(n),
            audio_class: Vec::with_capacity(n),
        };
        for (v, a, cv, ca, pos) in pairs {
            let easy = pos && easy_left > 0;
            if easy {
                easy_left -= 1;
            }
            let gain = if easy { 0.1 } else { 1.0 };
            for (l, x) in self.emit(spec, &self.visual_maps, &v, gain, false, rng).iter().enumerate() {
                split.visual[l].push(x);
            }
            for (l, x) in self.emit(spec, &self.audio_maps, &a, gain, true, rng).iter().enumerate() {
                split.audio[l].push(x);
            }
            split.positive.push(pos);
            split.easy.push(easy);
            split.visual_class.push(cv);
            split.audio_class.push(ca);
        }
        split
    }
}

/// Generates train and test splits of a task from its seed.
pub fn generate_task(spec: &TaskSpec) -> Result<GeneratedTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::new(spec, &mut rng);
    let train = world.split(spec, &mut rng);
    let test = world.split(spec, &mut rng);
    Ok(GeneratedTask {
        spec: spec.clone(),
        train,
        test,
        bijection: world.bijection,
        positive_classes: world.positive_classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    RankingInner,
    RankingCos,
    RankingL2,
    Contrastive,
    Clustering,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::RankingInner,
        Method::RankingCos,
        Method::RankingL2,
        Method::Contrastive,
        Method::Clustering,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::RankingInner => "ranking-inner",
            Method::RankingCos => "ranking-cos",
            Method::RankingL2 => "ranking-l2",
            Method::Contrastive => "contrastive",
            Method::Clustering => "clustering",
        }
    }

    fn metric(self) -> Option<RankMetric> {
        match self {
            Method::RankingInner => Some(RankMetric::Inner),
            Method::RankingCos => Some(RankMetric::Cosine),
            Method::RankingL2 => Some(RankMetric::NegL2),
            _ => None,
        }
    }

    /// Parses a comma list of method names, or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        if s.trim() == "all" {
            return Ok(Method::ALL.to_vec());
        }
        s.split(',').map(|t| t.trim().parse()).collect()
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusteringAlg {
    Sgd,
    Lloyd,
}

impl FromStr for ClusteringAlg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(ClusteringAlg::Sgd),
            "lloyd" | "em" => Ok(ClusteringAlg::Lloyd),
            _ => Err(Error::invalid(format!("unknown clustering algorithm {s:?}"))),
        }
    }
}

/// Settings of the clustering-based retrieval method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSettings {
    /// Centroids per space; `None` uses the task's class count.
    pub k: Option<usize>,
    pub alg: ClusteringAlg,
    pub sgd: SgdParams,
    pub lloyd_iters: usize,
    pub batch_size: usize,
    /// `0` runs plain greedy.
    pub selection_size: usize,
    pub scheme: PairingScheme,
}

impl Default for ClusteringSettings {
    fn default() -> Self {
        Self {
            k: None,
            alg: ClusteringAlg::Sgd,
            sgd: SgdParams {
                k: 0,
                lr: 0.1,
                epochs: 20,
                batch_size: 256,
                seed: 0,
                reinit: true,
                standardize: false,
            },
            lloyd_iters: 100,
            batch_size: 100,
            selection_size: 25,
            scheme: PairingScheme::new(PairingKind::Combination),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub runs: usize,
    pub selection_fraction: f64,
    pub methods: Vec<Method>,
    pub pca_dim: usize,
    pub train: TrainConfig,
    pub clustering: ClusteringSettings,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            selection_fraction: 0.5,
            methods: Method::ALL.to_vec(),
            pca_dim: 64,
            train: TrainConfig::bench(),
            clustering: ClusteringSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub precisions: Vec<f64>,
    pub mean: f64,
    /// Half-width of the 99% normal-approximation interval.
    pub ci99: f64,
    /// Mean precision of the selection so far after each outer round
    /// (clustering method only).
    pub curve: Vec<f64>,
}

impl MethodReport {
    pub fn from_runs(method: impl Into<String>, precisions: Vec<f64>, curves: &[Vec<f64>]) -> Self {
        let (mean, ci99) = mean_ci99(&precisions);
        let len = curves.iter().map(Vec::len).min().unwrap_or(0);
        let curve = (0..len)
            .map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / curves.len() as f64)
            .collect();
        Self {
            method: method.into(),
            precisions,
            mean,
            ci99,
            curve,
        }
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.mean - self.ci99, self.mean + self.ci99)
    }
}

/// Mean and `2.576 sd / sqrt(R)` with the sample standard deviation.
pub fn mean_ci99(xs: &[f64]) -> (f64, f64) {
    let r = xs.len();
    if r == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / r as f64;
    if r == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (r - 1) as f64;
    (mean, 2.576 * var.sqrt() / (r as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub task: TaskSpec,
    pub runs: usize,
    pub selection_fraction: f64,
    pub methods: Vec<MethodReport>,
    pub notes: Vec<String>,
}

impl BenchReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "task {} classes={} noise={} pairs/split={} runs={}\n",
            self.task.kind,
            self.task.n_classes,
            self.task.noise_scale,
            self.task.pairs_per_split(),
            self.runs
        );
        out.push_str(&format_rows(
            "method",
            self.methods.iter().map(|m| (m.method.clone(), m)),
        ));
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

fn format_rows<'a>(label: &str, rows: impl Iterator<Item = (String, &'a MethodReport)>) -> String {
    let rows: Vec<_> = rows.collect();
    let width = rows.iter().map(|(l, _)| l.len()).chain([label.len()]).max().unwrap_or(0);
    let mut out = format!("{label:<width$}  {:>9}  {:>8}\n", "precision", "ci99");
    for (l, m) in rows {
        let _ = writeln!(out, "{l:<width$}  {:>9.3}  {:>8.3}", m.mean, m.ci99);
    }
    out
}

fn run_seed(spec: &TaskSpec, run: usize) -> u64 {
    stage_seed(spec.seed, &format!("run{run}"))
}

fn selection_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("selection fraction {fraction} outside (0, 1]")));
    }
    Ok((fraction * n as f64).floor() as usize)
}

/// Fits one clustering per space of the split and returns the assignment table.
pub fn cluster_split(split: &Split, k: usize, settings: &ClusteringSettings, seed: u64) -> Result<(AssignmentTable, f64)> {
    let mut columns = Vec::new();
    let mut error = 0.0;
    let spaces = split.spaces();
    for (space, data) in &spaces {
        let seed = stage_seed(seed, &format!("cluster-{space}"));
        let model = match settings.alg {
            ClusteringAlg::Sgd => {
                let params = SgdParams {
                    k,
                    seed,
                    ..settings.sgd.clone()
                };
                fit_sgd(*data, &params)?
            }
            ClusteringAlg::Lloyd => {
                let params = LloydParams {
                    k,
                    max_iters: settings.lloyd_iters,
                    tol: 1e-9,
                    seed,
                };
                fit_lloyd(data, &params)?.0
            }
        };
        error += quantization_error(&model, *data)? / spaces.len() as f64;
        columns.push((*space, k, assign(&model, *data)?));
    }
    Ok((AssignmentTable::from_columns(split.clip_ids(), columns)?, error))
}

/// Selection by the clustering method on a prepared table. Returns the
/// selected rows and the precision after each outer round.
pub fn select_by_clustering(
    table: &AssignmentTable,
    positive: &[bool],
    m: usize,
    settings: &ClusteringSettings,
    seed: u64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let result = if settings.selection_size == 0 {
        greedy(table, m, &settings.scheme)?
    } else {
        let config = SelectionConfig {
            target_size: m,
            batch_size: settings.batch_size,
            selection_size: settings.selection_size,
            seed: stage_seed(seed, "select"),
            scheme: settings.scheme.clone(),
        };
        batch_greedy(table, &config)?
    };
    let mut curve = Vec::with_capacity(result.outer.len());
    let mut upto = 0;
    for o in &result.outer {
        upto += o.selected;
        curve.push(precision(positive, &result.rows[..upto]));
    }
    Ok((result.rows, curve))
}

struct RunOutcome {
    precision: Vec<f64>,
    curves: Vec<Vec<f64>>,
}

fn run_once(spec: &TaskSpec, config: &BenchConfig, run: usize) -> Result<RunOutcome> {
    let seed = run_seed(spec, run);
    let task = generate_task(&TaskSpec { seed, ..spec.clone() })?;
    let test = &task.test;
    let m = selection_count(test.len(), config.selection_fraction)?;
    let mut precision_out = Vec::new();
    let mut curves = Vec::new();
    let mut baseline = None;
    for &method in &config.methods {
        let (p, curve) = match method {
            Method::RankingInner | Method::RankingCos | Method::RankingL2 => {
                if baseline.is_none() {
                    baseline = Some(RankingBaseline::fit(test.top_visual(), test.top_audio(), config.pca_dim)?);
                }
                let b = baseline.as_ref().expect("fitted above");
                let scores = b.score(test.top_visual(), test.top_audio(), method.metric().expect("ranking method"))?;
                (test.precision(&rank_select(&scores, m)?), Vec::new())
            }
            Method::Contrastive => {
                let batching = match spec.kind {
                    TaskKind::SampleLevel => Batching::Uniform,
                    _ => Batching::ClassStratified(task.train.visual_class.clone()),
                };
                let train = TrainConfig {
                    seed: stage_seed(seed, "train-heads"),
                    batching,
                    ..config.train.clone()
                };
                let (heads, _) = crate::contrastive::train_heads(task.train.top_visual(), task.train.top_audio(), &train)?;
                let scores = score_pairs(&heads, test.top_visual(), test.top_audio())?;
                (test.precision(&rank_select(&scores, m)?), Vec::new())
            }
            Method::Clustering => {
                let k = config.clustering.k.unwrap_or(spec.n_classes);
                let (table, _) = cluster_split(test, k, &config.clustering, seed)?;
                let (rows, curve) = select_by_clustering(&table, &test.positive, m, &config.clustering, seed)?;
                (test.precision(&rows), curve)
            }
        };
        precision_out.push(p);
        curves.push(curve);
    }
    Ok(RunOutcome {
        precision: precision_out,
        curves,
    })
}

fn collect_runs<T: Send>(runs: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..runs).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..runs).map(f).collect()
    }
}

/// Runs every configured method on `runs` seeded instances of the task.
pub fn run_bench(spec: &TaskSpec, config: &BenchConfig) -> Result<BenchReport> {
    spec.validate()?;
    if config.runs == 0 || config.methods.is_empty() {
        return Err(Error::invalid("bench needs at least one run and one method"));
    }
    let outcomes = collect_runs(config.runs, |r| run_once(spec, config, r))?;
    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let p: Vec<f64> = outcomes.iter().map(|o| o.precision[i]).collect();
            let c: Vec<Vec<f64>> = outcomes.iter().map(|o| o.curves[i].clone()).collect();
            MethodReport::from_runs(m.name(), p, &c)
        })
        .collect();
    let mut notes = Vec::new();
    if config.methods.contains(&Method::Clustering) {
        notes.push("clustering centroids are fitted on the test split".to_string());
    }
    if config.methods.contains(&Method::Contrastive) {
        notes.push("projection heads are trained on the train split only".to_string());
    }
    Ok(BenchReport {
        task: spec.clone(),
        runs: config.runs,
        selection_fraction: config.selection_fraction,
        methods,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AblationAxis {
    Pairing(Vec<PairingKind>),
    /// Fixed batch size with a list of selection sizes; `0` stands for plain greedy.
    SbRatio { batch_size: usize, selection_sizes: Vec<usize> },
    Centroids(Vec<usize>),
    ClusteringAlg(Vec<ClusteringAlg>),
    LayerWeights(Vec<LayerWeights>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Pairing(_) => "pairing",
            AblationAxis::SbRatio { .. } => "sb_ratio",
            AblationAxis::Centroids(_) => "centroids",
            AblationAxis::ClusteringAlg(_) => "clustering_alg",
            AblationAxis::LayerWeights(_) => "layer_weights",
        }
    }

    fn points(&self, base: &ClusteringSettings) -> Vec<(String, ClusteringSettings)> {
        let with = |f: &dyn Fn(&mut ClusteringSettings)| {
            let mut s = base.clone();
            f(&mut s);
            s
        };
        match self {
            AblationAxis::Pairing(kinds) => kinds
                .iter()
                .map(|&k| (k.to_string(), with(&|s| s.scheme.kind = k)))
                .collect(),
            AblationAxis::SbRatio { batch_size, selection_sizes } => selection_sizes
                .iter()
                .map(|&sz| {
                    let label = if sz == 0 {
                        "greedy".to_string()
                    } else {
                        format!("b={batch_size} s={sz} s/b={}", sz as f64 / *batch_size as f64)
                    };
                    (
                        label,
                        with(&|s| {
                            s.batch_size = *batch_size;
                            s.selection_size = sz;
                        }),
                    )
                })
                .collect(),
            AblationAxis::Centroids(ks) => ks
                .iter()
                .map(|&k| (format!("k={k}"), with(&|s| s.k = Some(k))))
                .collect(),
            AblationAxis::ClusteringAlg(algs) => algs
                .iter()
                .map(|&a| (format!("{a:?}").to_lowercase(), with(&|s| s.alg = a)))
                .collect(),
            AblationAxis::LayerWeights(ws) => ws
                .iter()
                .map(|w| (format!("{w:?}").to_lowercase(), with(&|s| s.scheme.weights = w.clone())))
                .collect(),
        }
    }

    /// Whether grid points share the same clustering of a run.
    fn shares_tables(&self) -> bool {
        !matches!(self, AblationAxis::Centroids(_) | AblationAxis::ClusteringAlg(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub report: MethodReport,
    /// Mean quantization error per space, averaged over runs.
    pub quantization_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub task: TaskSpec,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("ablation {} on {} ({} classes)\n", self.axis, self.task.kind, self.task.n_classes);
        out.push_str(&format_rows(self.axis.as_str(), self.rows.iter().map(|r| (r.label.clone(), &r.report))));
        out
    }

    /// Tab-separated rows: label, mean, ci99, then per-run precisions.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("point\tprecision\tci99\truns\n");
        for r in &self.rows {
            let runs: Vec<String> = r.report.precisions.iter().map(|p| format!("{p:.3}")).collect();
            let _ = writeln!(out, "{}\t{:.3}\t{:.3}\t{}", r.label, r.report.mean, r.report.ci99, runs.join(","));
        }
        out
    }
}

/// Runs the clustering method at every grid point of an axis. Every point
/// sees the same task instances and seeds in run `r`.
pub fn ablate(spec: &TaskSpec, config: &BenchConfig, axis: &AblationAxis) -> Result<AblationTable> {
    spec.validate()?;
    if config.runs == 0 {
        return Err(Error::invalid("ablation needs at least one run"));
    }
    let points = axis.points(&config.clustering);
    if points.is_empty() {
        return Err(Error::invalid("empty ablation grid"));
    }
    let per_run = collect_runs(config.runs, |r| {
        let seed = run_seed(spec, r);
        let task = generate_task(&TaskSpec { seed, ..spec.clone() })?;
        let test = &task.test;
        let m = selection_count(test.len(), config.selection_fraction)?;
        let mut shared = None;
        let mut out = Vec::with_capacity(points.len());
        for (_, settings) in &points {
            let k = settings.k.unwrap_or(spec.n_classes);
            if shared.is_none() || !axis.shares_tables() {
                shared = Some(cluster_split(test, k, settings, seed)?);
            }
            let (table, err) = shared.as_ref().expect("set above");
            let (rows, curve) = select_by_clustering(table, &test.positive, m, settings, seed)?;
            out.push((test.precision(&rows), curve, *err));
        }
        Ok(out)
    })?;
    let rows = points
        .iter()
        .enumerate()
        .map(|(i, (label, _))| {
            let p: Vec<f64> = per_run.iter().map(|r| r[i].0).collect();
            let c: Vec<Vec<f64>> = per_run.iter().map(|r| r[i].1.clone()).collect();
            let err = per_run.iter().map(|r| r[i].2).sum::<f64>() / per_run.len() as f64;
            AblationRow {
                label: label.clone(),
                report: MethodReport::from_runs("clustering", p, &c),
                quantization_error: err,
            }
        })
        .collect();
    Ok(AblationTable {
        axis: axis.name().to_string(),
        task: spec.clone(),
        rows,
    })
}
