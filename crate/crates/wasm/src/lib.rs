//! Browser bindings: small, synchronous entry points that take plain numbers
//! and return JSON strings for `www/index.html` to draw. Seeds are `u32` on the
//! JS side so they stay ordinary numbers rather than BigInts.

use acav_core::assignment::AssignmentTable;
use acav_core::bench::{cluster_split, generate_task, precision, ClusteringSettings, TaskKind, TaskSpec};
use acav_core::kmeans::{assign, fit_lloyd, fit_sgd, quantization_error, LloydParams, SgdParams};
use acav_core::mi::{ContingencyState, PairingKind, PairingScheme};
use acav_core::select::{batch_greedy, greedy, SelectionConfig};
use acav_core::store::{Dataset, LayerSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct Fit {
    centroids: Vec<[f64; 2]>,
    labels: Vec<u32>,
    quantization_error: f64,
}

#[derive(Serialize)]
struct KmeansOut {
    sgd: Fit,
    lloyd: Fit,
    reinits: u64,
}

fn fit_out(model: &acav_core::kmeans::Clustering, data: &Dataset) -> acav_core::Result<Fit> {
    Ok(Fit {
        centroids: (0..model.k).map(|c| [model.centroid(c)[0], model.centroid(c)[1]]).collect(),
        labels: assign(model, data)?,
        quantization_error: quantization_error(model, data)?,
    })
}

pub fn kmeans_json(xy: &[f64], k: usize, lr: f64, epochs: usize, batch_size: usize, seed: u64) -> acav_core::Result<String> {
    let data = Dataset::new(xy.to_vec(), 2)?;
    let sgd = fit_sgd(
        &data,
        &SgdParams {
            k,
            lr,
            epochs,
            batch_size,
            seed,
            reinit: true,
            standardize: false,
        },
    )?;
    let (lloyd, _) = fit_lloyd(&data, &LloydParams { k, max_iters: 300, tol: 1e-9, seed })?;
    let out = KmeansOut {
        sgd: fit_out(&sgd, &data)?,
        lloyd: fit_out(&lloyd, &data)?,
        reinits: sgd.reinit_count,
    };
    Ok(serde_json::to_string(&out)?)
}

/// Mini-batch SGD and Lloyd's k-means on flat `[x0, y0, x1, y1, ...]` points.
#[wasm_bindgen]
pub fn kmeans(xy: &[f64], k: usize, lr: f64, epochs: usize, batch_size: usize, seed: u32) -> Result<String, JsError> {
    kmeans_json(xy, k, lr, epochs, batch_size, seed.into()).map_err(to_js)
}

#[derive(Serialize)]
struct PairRow {
    a: String,
    b: String,
    weight: f64,
    mi: f64,
}

#[derive(Serialize)]
struct PairingOut {
    scheme: String,
    objective: f64,
    pairs: Vec<PairRow>,
}

/// Per-pair MI of a random table where cluster IDs in the two modalities agree
/// with probability `agreement` at every layer.
pub fn pairing_json(layers: usize, k: usize, n: usize, agreement: f64, seed: u64) -> acav_core::Result<String> {
    use acav_core::config::stage_seed;
    let spec = LayerSpec::symmetric(layers, 1);
    let spaces: Vec<_> = spec.spaces().collect();
    let mut state = seed;
    let mut next = || {
        state = stage_seed(state, "demo");
        state
    };
    let mut ids = Vec::with_capacity(n * spaces.len());
    for _ in 0..n {
        let latent = (next() % k as u64) as u32;
        for _ in &spaces {
            let keep = (next() >> 11) as f64 / (1u64 << 53) as f64 <= agreement;
            ids.push(if keep { latent } else { (next() % k as u64) as u32 });
        }
    }
    let clip_ids = (0..n).map(|i| format!("c{i}")).collect();
    let table = AssignmentTable::new(clip_ids, spaces, vec![k; 2 * layers], ids)?;
    let rows: Vec<usize> = (0..n).collect();
    let out = [PairingKind::Diagonal, PairingKind::Bipartite, PairingKind::Combination]
        .into_iter()
        .map(|kind| {
            let score = ContingencyState::build(&table, &rows, &PairingScheme::new(kind))?.score();
            Ok(PairingOut {
                scheme: kind.to_string(),
                objective: score.value,
                pairs: score
                    .per_pair
                    .into_iter()
                    .map(|p| PairRow {
                        a: p.a.to_string(),
                        b: p.b.to_string(),
                        weight: p.weight,
                        mi: p.mi,
                    })
                    .collect(),
            })
        })
        .collect::<acav_core::Result<Vec<_>>>()?;
    Ok(serde_json::to_string(&out)?)
}

/// Pair lists and MI of the three pairing schemes on a random table.
#[wasm_bindgen]
pub fn pairing(layers: usize, k: usize, n: usize, agreement: f64, seed: u32) -> Result<String, JsError> {
    pairing_json(layers, k, n, agreement, seed.into()).map_err(to_js)
}

#[derive(Serialize)]
struct CurveOut {
    pairs: usize,
    target: usize,
    /// Running precision after each selected clip.
    greedy: Vec<f64>,
    batch: Vec<f64>,
    base_rate: f64,
}

fn running_precision(positive: &[bool], rows: &[usize]) -> Vec<f64> {
    let mut hits = 0usize;
    rows.iter()
        .enumerate()
        .map(|(i, &r)| {
            hits += usize::from(positive[r]);
            100.0 * hits as f64 / (i + 1) as f64
        })
        .collect()
}

pub fn selection_curve_json(
    classes: usize,
    per_class: usize,
    noise: f64,
    easy: f64,
    b: usize,
    s: usize,
    seed: u64,
) -> acav_core::Result<String> {
    let spec = TaskSpec {
        per_class_cap: per_class,
        noise_scale: noise,
        easy_fraction: easy,
        feature_dim: 16,
        base_dim: 8,
        seed,
        ..TaskSpec::new(TaskKind::SampleLevel, classes)
    };
    let task = generate_task(&spec)?;
    let split = &task.test;
    let settings = ClusteringSettings::default();
    let (table, _) = cluster_split(split, classes, &settings, seed)?;
    let target = split.len() / 2;
    let plain = greedy(&table, target, &settings.scheme)?;
    let cfg = SelectionConfig {
        batch_size: b,
        selection_size: s,
        seed,
        ..SelectionConfig::small(target)
    };
    let batch = batch_greedy(&table, &cfg)?;
    let all: Vec<usize> = (0..split.len()).collect();
    let out = CurveOut {
        pairs: split.len(),
        target,
        greedy: running_precision(&split.positive, &plain.rows),
        batch: running_precision(&split.positive, &batch.rows),
        base_rate: precision(&split.positive, &all),
    };
    Ok(serde_json::to_string(&out)?)
}

/// Running precision of plain and batch greedy on a synthetic sample-level task.
#[wasm_bindgen]
pub fn selection_curve(
    classes: usize,
    per_class: usize,
    noise: f64,
    easy: f64,
    b: usize,
    s: usize,
    seed: u32,
) -> Result<String, JsError> {
    selection_curve_json(classes, per_class, noise, easy, b, s, seed.into()).map_err(to_js)
}
