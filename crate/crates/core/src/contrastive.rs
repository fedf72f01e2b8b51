//! Contrastive (InfoNCE-style) correspondence scoring with linear projection heads.
//!
//! For a batch of `N` pairs with projected embeddings `z_v`, `z_a` and cosine
//! similarity `S`, the per-pair loss in each direction is
//! `-ln( exp(S(v_i, a_i)/tau) / sum_j exp(S(v_i, a_j)/tau) )`. The batch loss
//! is the sum of both directions averaged over the `N` pairs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Dataset, Modality, Space, StoreReader};

/// Affine map `z = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `d_out x d_in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProjectionHead {
    /// Uniform `(-1/sqrt(d_in), 1/sqrt(d_in))` initialization.
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weight = (0..d_in * d_out).map(|_| draw()).collect();
        let bias = (0..d_out).map(|_| draw()).collect();
        Self {
            d_in,
            d_out,
            weight,
            bias,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.d_in)
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect()
    }

    pub fn forward_all(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        if data.dim() != self.d_in {
            return Err(Error::DimensionMismatch {
                what: "projection head input".into(),
                expected: self.d_in,
                got: data.dim(),
            });
        }
        Ok(data.rows().map(|x| self.forward(x)).collect())
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|x| x.is_finite())
    }
}

/// Audio and visual heads trained jointly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPair {
    pub audio: ProjectionHead,
    pub visual: ProjectionHead,
    pub tau: f64,
}

impl HeadPair {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; errors on a zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn unit_rows(z: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut units = Vec::with_capacity(z.len());
    let mut norms = Vec::with_capacity(z.len());
    for (i, row) in z.iter().enumerate() {
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm(i));
        }
        units.push(row.iter().map(|x| x / n).collect());
        norms.push(n);
    }
    Ok((units, norms))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Symmetric contrastive loss of a batch of paired embeddings.
pub fn contrastive_loss(zv: &[Vec<f64>], za: &[Vec<f64>], tau: f64) -> Result<f64> {
    Ok(loss_and_grad(zv, za, tau, false)?.0)
}

/// Loss and its gradients with respect to `zv` and `za`.
pub fn contrastive_loss_grad(zv: &[Vec<f64>], za: &[Vec<f64>], tau: f64) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    loss_and_grad(zv, za, tau, true)
}

fn loss_and_grad(
    zv: &[Vec<f64>],
    za: &[Vec<f64>],
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = zv.len();
    if n == 0 || za.len() != n {
        return Err(Error::invalid(format!(
            "contrastive batch needs equal non-zero pair counts, got {} and {}",
            zv.len(),
            za.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let (uv, nv) = unit_rows(zv)?;
    let (ua, na) = unit_rows(za)?;
    let logits: Vec<f64> = (0..n * n)
        .map(|ij| dot(&uv[ij / n], &ua[ij % n]) / tau)
        .collect();
    let at = |i: usize, j: usize| logits[i * n + j];

    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp((0..n).map(move |j| at(i, j)))).collect();
    let col_lse: Vec<f64> = (0..n).map(|j| log_sum_exp((0..n).map(move |i| at(i, j)))).collect();
    let loss = (0..n)
        .map(|i| (row_lse[i] - at(i, i)) + (col_lse[i] - at(i, i)))
        .sum::<f64>()
        / n as f64;
    if !want_grad {
        return Ok((loss, Vec::new(), Vec::new()));
    }

    // dLoss/dS_ij = (softmax_row_ij + softmax_col_ij - 2 delta_ij) / (n tau)
    let scale = 1.0 / (n as f64 * tau);
    let mut d_uv = vec![vec![0.0; uv[0].len()]; n];
    let mut d_ua = vec![vec![0.0; ua[0].len()]; n];
    for i in 0..n {
        for j in 0..n {
            let l = at(i, j);
            let mut g = (l - row_lse[i]).exp() + (l - col_lse[j]).exp();
            if i == j {
                g -= 2.0;
            }
            let g = g * scale;
            for (d, a) in d_uv[i].iter_mut().zip(&ua[j]) {
                *d += g * a;
            }
            for (d, v) in d_ua[j].iter_mut().zip(&uv[i]) {
                *d += g * v;
            }
        }
    }
    let through_norm = |u: &[Vec<f64>], du: Vec<Vec<f64>>, norms: &[f64]| -> Vec<Vec<f64>> {
        du.into_iter()
            .zip(u)
            .zip(norms)
            .map(|((d, u), &nz)| {
                let proj = dot(&d, u);
                d.iter().zip(u).map(|(di, ui)| (di - ui * proj) / nz).collect()
            })
            .collect()
    };
    let gv = through_norm(&uv, d_uv, &nv);
    let ga = through_norm(&ua, d_ua, &na);
    Ok((loss, gv, ga))
}

/// Gradients of the batch loss with respect to both heads' parameters, laid out
/// as `weight` then `bias`.
pub fn head_gradients(
    heads: &HeadPair,
    visual: &[&[f64]],
    audio: &[&[f64]],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let zv: Vec<Vec<f64>> = visual.iter().map(|x| heads.visual.forward(x)).collect();
    let za: Vec<Vec<f64>> = audio.iter().map(|x| heads.audio.forward(x)).collect();
    let (loss, gzv, gza) = contrastive_loss_grad(&zv, &za, heads.tau)?;
    let backprop = |head: &ProjectionHead, xs: &[&[f64]], gz: &[Vec<f64>]| -> Vec<f64> {
        let mut g = vec![0.0; head.param_count()];
        let (gw, gb) = g.split_at_mut(head.weight.len());
        for (x, dz) in xs.iter().zip(gz) {
            for (o, &d) in dz.iter().enumerate() {
                gb[o] += d;
                for (w, xi) in gw[o * head.d_in..(o + 1) * head.d_in].iter_mut().zip(x.iter()) {
                    *w += d * xi;
                }
            }
        }
        g
    };
    let gv = backprop(&heads.visual, visual, &gzv);
    let ga = backprop(&heads.audio, audio, &gza);
    Ok((loss, ga, gv))
}

/// Adam with the AMSGrad running maximum of the second moment and bias correction.
#[derive(Debug, Clone)]
pub struct AmsGrad {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
}

impl AmsGrad {
    pub fn new(params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
            v_max: vec![0.0; params],
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.enumerate() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            self.v_max[i] = self.v_max[i].max(self.v[i]);
            let denom = (self.v_max[i] / bc2).sqrt() + self.eps;
            *p -= self.lr * (self.m[i] / bc1) / denom;
        }
    }
}

/// How training mini-batches are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Batching {
    /// Shuffle each epoch and cut into batches of `batch_size` pairs.
    Uniform,
    /// One random pair per class per batch; `labels[i]` is pair `i`'s class.
    ClassStratified(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub d_out: usize,
    pub seed: u64,
    pub batching: Batching,
}

impl Default for TrainConfig {
    /// Pipeline-scale defaults: 3 epochs of 1024-pair batches at lr 2e-4.
    fn default() -> Self {
        Self {
            tau: 0.1,
            batch_size: 1024,
            epochs: 3,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            d_out: 128,
            seed: 0,
            batching: Batching::Uniform,
        }
    }
}

impl TrainConfig {
    /// Retrieval-benchmark defaults: 100 epochs of 10-pair batches.
    pub fn bench() -> Self {
        Self {
            batch_size: 10,
            epochs: 100,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains both heads on paired features (`visual[i]` with `audio[i]`).
pub fn train_heads(visual: &Dataset, audio: &Dataset, config: &TrainConfig) -> Result<(HeadPair, TrainLog)> {
    if visual.len() != audio.len() {
        return Err(Error::DimensionMismatch {
            what: "paired training features".into(),
            expected: visual.len(),
            got: audio.len(),
        });
    }
    if !(config.tau > 0.0) || config.batch_size == 0 || config.d_out == 0 {
        return Err(Error::invalid("tau, batch_size and d_out must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut heads = HeadPair {
        audio: ProjectionHead::init(audio.dim(), config.d_out, &mut rng),
        visual: ProjectionHead::init(visual.dim(), config.d_out, &mut rng),
        tau: config.tau,
    };
    let mut opt_a = AmsGrad::new(heads.audio.param_count(), config.lr, config.beta1, config.beta2, config.eps);
    let mut opt_v = AmsGrad::new(heads.visual.param_count(), config.lr, config.beta1, config.beta2, config.eps);
    let mut log = TrainLog { epoch_loss: Vec::new() };
    let n = visual.len();
    if n == 0 {
        return Ok((heads, log));
    }
    let classes: Option<Vec<Vec<usize>>> = match &config.batching {
        Batching::Uniform => None,
        Batching::ClassStratified(labels) => {
            if labels.len() != n {
                return Err(Error::invalid("one class label per training pair is required"));
            }
            let k = labels.iter().max().map_or(0, |m| m + 1);
            let mut by_class = vec![Vec::new(); k];
            for (i, &l) in labels.iter().enumerate() {
                by_class[l].push(i);
            }
            Some(by_class.into_iter().filter(|c| !c.is_empty()).collect())
        }
    };

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        let batches: Vec<Vec<usize>> = match &classes {
            None => {
                order.shuffle(&mut rng);
                order.chunks(config.batch_size).map(<[usize]>::to_vec).collect()
            }
            Some(by_class) => {
                let steps = (n / by_class.len()).max(1);
                (0..steps)
                    .map(|_| by_class.iter().map(|c| c[rng.random_range(0..c.len())]).collect())
                    .collect()
            }
        };
        let mut total = 0.0;
        for batch in &batches {
            let xv: Vec<&[f64]> = batch.iter().map(|&i| visual.row(i)).collect();
            let xa: Vec<&[f64]> = batch.iter().map(|&i| audio.row(i)).collect();
            let (loss, ga, gv) = head_gradients(&heads, &xv, &xa)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss {loss} at epoch {epoch}")));
            }
            total += loss;
            opt_a.step(heads.audio.params_mut(), &ga);
            opt_v.step(heads.visual.params_mut(), &gv);
        }
        if !heads.audio.is_finite() || !heads.visual.is_finite() {
            return Err(Error::Diverged(format!("non-finite parameters after epoch {epoch}")));
        }
        log.epoch_loss.push(total / batches.len() as f64);
    }
    Ok((heads, log))
}

/// Trains on the top (penultimate-feature) layer of each modality of a store.
pub fn train_heads_on_store(reader: &StoreReader, rows: Option<&[usize]>, config: &TrainConfig) -> Result<(HeadPair, TrainLog)> {
    let (visual, audio) = top_layers(reader, rows)?;
    train_heads(&visual, &audio, config)
}

/// Top layer of each modality as `(visual, audio)`, optionally restricted to `rows`.
pub fn top_layers(reader: &StoreReader, rows: Option<&[usize]>) -> Result<(Dataset, Dataset)> {
    let top = |m: Modality| {
        reader
            .layer_spec()
            .top_layer(m)
            .map(|l| Space::new(m, l))
            .ok_or_else(|| Error::invalid(format!("store has no {m} layers")))
    };
    let load = |m: Modality| -> Result<Dataset> {
        let data = reader.load_space(top(m)?)?;
        Ok(match rows {
            Some(rows) => data.select(rows),
            None => data,
        })
    };
    Ok((load(Modality::Visual)?, load(Modality::Audio)?))
}

/// Cosine similarity of each clip's projected visual and audio embeddings.
pub fn score_pairs(heads: &HeadPair, visual: &Dataset, audio: &Dataset) -> Result<Vec<f64>> {
    let zv = heads.visual.forward_all(visual)?;
    let za = heads.audio.forward_all(audio)?;
    if zv.len() != za.len() {
        return Err(Error::DimensionMismatch {
            what: "paired scoring features".into(),
            expected: zv.len(),
            got: za.len(),
        });
    }
    zv.iter()
        .zip(&za)
        .enumerate()
        .map(|(i, (v, a))| cosine(v, a).ok_or(Error::ZeroNorm(i)))
        .collect()
}

pub fn score_store(heads: &HeadPair, reader: &StoreReader, rows: Option<&[usize]>) -> Result<Vec<f64>> {
    let (visual, audio) = top_layers(reader, rows)?;
    score_pairs(heads, &visual, &audio)
}
