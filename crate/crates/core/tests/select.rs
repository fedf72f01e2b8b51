use std::collections::HashMap;

use acav_core::assignment::AssignmentTable;
use acav_core::mi::PairingScheme;
use acav_core::select::{batch_greedy, greedy, rank_select, SelectionConfig};
use acav_core::store::{Modality, Space};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spaces(layers: usize) -> Vec<Space> {
    let mut s: Vec<Space> = (1..=layers).map(|l| Space::new(Modality::Audio, l)).collect();
    s.extend((1..=layers).map(|l| Space::new(Modality::Visual, l)));
    s
}

/// Half the clips carry one shared class ID in every space; the rest are noise.
fn planted(n: usize, layers: usize, k: usize, seed: u64) -> (AssignmentTable, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = 2 * layers;
    let mut ids = Vec::with_capacity(n * w);
    let mut positive = Vec::with_capacity(n);
    for i in 0..n {
        let pos = i % 2 == 0;
        let class = rng.random_range(0..k as u32);
        for _ in 0..w {
            let flip = rng.random::<f64>() < 0.2;
            ids.push(if pos && !flip { class } else { rng.random_range(0..k as u32) });
        }
        positive.push(pos);
    }
    let sp = spaces(layers);
    let table = AssignmentTable::new((0..n).map(|i| format!("c{i}")).collect(), sp.clone(), vec![k; w], ids).unwrap();
    (table, positive)
}

fn objective(table: &AssignmentTable, rows: &[usize]) -> f64 {
    let w = table.width();
    if rows.len() <= 1 {
        return 0.0;
    }
    let n = rows.len() as f64;
    let mut total = 0.0;
    let mut pairs = 0.0;
    for a in 0..w {
        for b in a + 1..w {
            let mut joint: HashMap<(u32, u32), f64> = HashMap::new();
            let mut pa: HashMap<u32, f64> = HashMap::new();
            let mut pb: HashMap<u32, f64> = HashMap::new();
            for &r in rows {
                let (x, y) = (table.row(r)[a], table.row(r)[b]);
                *joint.entry((x, y)).or_default() += 1.0;
                *pa.entry(x).or_default() += 1.0;
                *pb.entry(y).or_default() += 1.0;
            }
            total += joint.iter().map(|(&(x, y), &c)| c / n * (n * c / (pa[&x] * pb[&y])).ln()).sum::<f64>();
            pairs += 1.0;
        }
    }
    total / pairs
}

/// Step-by-step greedy that rescores every candidate from raw labels.
fn naive_greedy(table: &AssignmentTable, m: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..m {
        let mut best: Option<(f64, usize)> = None;
        for c in (0..table.len()).filter(|c| !chosen.contains(c)) {
            let mut trial = chosen.clone();
            trial.push(c);
            let v = objective(table, &trial);
            if best.map_or(true, |(bv, _)| v > bv + 1e-12) {
                best = Some((v, c));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

fn precision(positive: &[bool], rows: &[usize]) -> f64 {
    100.0 * rows.iter().filter(|&&r| positive[r]).count() as f64 / rows.len() as f64
}

#[test]
fn greedy_matches_naive_oracle() {
    let (table, _) = planted(80, 2, 4, 1);
    let fast = greedy(&table, 25, &PairingScheme::default()).unwrap();
    assert_eq!(fast.rows, naive_greedy(&table, 25));
    for (i, s) in fast.step_scores.iter().enumerate() {
        assert!((s - objective(&table, &fast.rows[..=i])).abs() < 1e-9);
    }
}

#[test]
fn greedy_edge_cases() {
    let (table, _) = planted(30, 1, 3, 2);
    let scheme = PairingScheme::default();
    let all = greedy(&table, 30, &scheme).unwrap();
    let mut sorted = all.rows.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..30).collect::<Vec<_>>());
    assert_eq!(greedy(&table, 1, &scheme).unwrap().rows, vec![0]);
    assert!(greedy(&table, 31, &scheme).is_err());
    assert!(greedy(&table, 0, &scheme).unwrap().rows.is_empty());
}

#[test]
fn batch_greedy_degenerates_to_greedy() {
    let (table, _) = planted(300, 2, 6, 3);
    let scheme = PairingScheme::default();
    let plain = greedy(&table, 40, &scheme).unwrap();
    for (b, s) in [(300, 40), (300, 1), (10_000, 40)] {
        let config = SelectionConfig {
            target_size: 40,
            batch_size: b,
            selection_size: s,
            seed: 9,
            scheme: scheme.clone(),
        };
        let got = batch_greedy(&table, &config).unwrap();
        assert_eq!(got.rows, plain.rows, "b={b} s={s}");
        assert_eq!(got.chosen, plain.chosen);
    }
}

#[test]
fn batch_greedy_bookkeeping() {
    let (table, _) = planted(500, 2, 6, 4);
    let config = SelectionConfig {
        seed: 5,
        ..SelectionConfig::small(230)
    };
    let res = batch_greedy(&table, &config).unwrap();
    assert_eq!(res.rows.len(), 230);
    let mut uniq = res.rows.clone();
    uniq.sort_unstable();
    uniq.dedup();
    assert_eq!(uniq.len(), 230);
    assert_eq!(res.outer.len(), 10);
    assert_eq!(res.outer.last().unwrap().selected, 5);
    assert!(res.outer.iter().all(|o| o.candidates == 100));
    assert_eq!(batch_greedy(&table, &config).unwrap().rows, res.rows);

    let bad = SelectionConfig {
        selection_size: 200,
        ..config.clone()
    };
    assert!(batch_greedy(&table, &bad).is_err());
    assert!(batch_greedy(&table, &SelectionConfig::small(501)).is_err());
}

#[test]
fn batch_greedy_tracks_greedy_precision() {
    let (table, positive) = planted(800, 2, 8, 6);
    let scheme = PairingScheme::default();
    let g = precision(&positive, &greedy(&table, 400, &scheme).unwrap().rows);
    let config = SelectionConfig {
        seed: 1,
        ..SelectionConfig::small(400)
    };
    let b = precision(&positive, &batch_greedy(&table, &config).unwrap().rows);
    assert!(g > 80.0, "greedy {g}");
    assert!((g - b).abs() <= 5.0, "greedy {g} batch {b}");
}

#[test]
fn rank_select_matches_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scores: Vec<f64> = (0..100_000).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut oracle: Vec<usize> = (0..scores.len()).collect();
    oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    assert_eq!(rank_select(&scores, 1000).unwrap(), oracle[..1000]);
    assert_eq!(rank_select(&scores, scores.len()).unwrap(), oracle);
    assert_eq!(rank_select(&[2.0; 5], 3).unwrap(), vec![0, 1, 2]);
    assert!(rank_select(&[1.0, f64::NAN], 1).is_err());
    assert!(rank_select(&[1.0], 2).is_err());
}
