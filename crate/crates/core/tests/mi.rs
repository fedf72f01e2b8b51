use std::collections::HashMap;

use acav_core::assignment::AssignmentTable;
use acav_core::mi::{
    cluster_histogram, entropy, mi_pair, top_mass, Contingency, ContingencyState, LayerWeights, PairingKind, PairingScheme,
};
use acav_core::store::{Modality, Space};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spaces(layers: usize) -> Vec<Space> {
    let mut s: Vec<Space> = (1..=layers).map(|l| Space::new(Modality::Audio, l)).collect();
    s.extend((1..=layers).map(|l| Space::new(Modality::Visual, l)));
    s
}

fn random_table(n: usize, layers: usize, k: usize, seed: u64) -> AssignmentTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = spaces(layers);
    let ids = (0..n * sp.len()).map(|_| rng.random_range(0..k as u32)).collect();
    AssignmentTable::new((0..n).map(|i| format!("c{i}")).collect(), sp.clone(), vec![k; sp.len()], ids).unwrap()
}

fn labels_mi(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len() as f64;
    let mut joint: HashMap<(u32, u32), f64> = HashMap::new();
    let mut pa: HashMap<u32, f64> = HashMap::new();
    let mut pb: HashMap<u32, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0 / n;
        *pa.entry(x).or_default() += 1.0 / n;
        *pb.entry(y).or_default() += 1.0 / n;
    }
    joint.iter().map(|(&(x, y), &p)| p * (p / (pa[&x] * pb[&y])).ln()).sum()
}

fn column(table: &AssignmentTable, rows: &[usize], c: usize) -> Vec<u32> {
    rows.iter().map(|&r| table.row(r)[c]).collect()
}

#[test]
fn small_tables() {
    let mi = mi_pair(&Contingency::from_nested(&[vec![2, 0], vec![0, 2]]).unwrap()).unwrap();
    assert!((mi - std::f64::consts::LN_2).abs() < 1e-12);
    let mi = mi_pair(&Contingency::from_nested(&[vec![1, 1], vec![1, 1]]).unwrap()).unwrap();
    assert_eq!(mi, 0.0);
    let a = [0, 0, 1, 0, 1, 1];
    let b = [0, 0, 0, 1, 1, 1];
    let joint = Contingency::from_labels(&a, &b, 2, 2).unwrap();
    assert_eq!(joint, Contingency::from_nested(&[vec![2, 1], vec![1, 2]]).unwrap());
    assert!((mi_pair(&joint).unwrap() - labels_mi(&a, &b)).abs() < 1e-12);
    assert!(mi_pair(&Contingency::new(2, 2, vec![0; 4]).unwrap()).is_err());
}

#[test]
fn pair_counts_per_scheme() {
    let count = |layers: usize, kind: PairingKind| PairingScheme::new(kind).pairs(&spaces(layers)).unwrap().len();
    assert_eq!(count(1, PairingKind::Combination), 1);
    assert_eq!(count(5, PairingKind::Combination), 45);
    assert_eq!(count(5, PairingKind::Bipartite), 25);
    assert_eq!(count(5, PairingKind::Diagonal), 5);
}

#[test]
fn degenerate_subsets_score_zero() {
    let table = random_table(10, 5, 4, 1);
    let scheme = PairingScheme::default();
    assert_eq!(ContingencyState::build(&table, &[], &scheme).unwrap().value(), 0.0);
    assert_eq!(ContingencyState::build(&table, &[3], &scheme).unwrap().value(), 0.0);
    let empty = ContingencyState::empty(table.spaces(), table.ks(), &scheme).unwrap();
    assert_eq!(empty.delta_score(table.row(0)).unwrap(), 0.0);
}

#[test]
fn uniform_combination_is_mean_of_45_pair_mis() {
    let table = random_table(300, 5, 6, 2);
    let rows: Vec<usize> = (0..300).collect();
    let state = ContingencyState::build(&table, &rows, &PairingScheme::default()).unwrap();
    let mut total = 0.0;
    for i in 0..10 {
        for j in i + 1..10 {
            total += labels_mi(&column(&table, &rows, i), &column(&table, &rows, j));
        }
    }
    assert!((state.value() - total / 45.0).abs() < 1e-12);
}

#[test]
fn explicit_weights_give_weighted_mean() {
    let ws = [0.5, 0.8, 1.0, 1.2, 1.5];
    let table = random_table(200, 3, 5, 3);
    let rows: Vec<usize> = (0..200).collect();
    let scheme = PairingScheme::new(PairingKind::Diagonal).with_weights(LayerWeights::Explicit(ws.to_vec()));
    let state = ContingencyState::build(&table, &rows, &scheme).unwrap();
    assert_eq!(state.pairs().len(), 3);
    let (mut num, mut den) = (0.0, 0.0);
    for l in 0..3 {
        let w = ws[l] * ws[l];
        num += w * labels_mi(&column(&table, &rows, l), &column(&table, &rows, 3 + l));
        den += w;
    }
    assert!((state.value() - num / den).abs() < 1e-12);
}

#[test]
fn linear_weights_are_centred_on_the_middle_layer() {
    let w: Vec<f64> = (1..=5).map(|l| LayerWeights::Linear(0.25).weight(l, 5).unwrap()).collect();
    assert_eq!(w, vec![0.5, 0.75, 1.0, 1.25, 1.5]);
    assert_eq!(LayerWeights::Linear(2.0).weight(1, 5).unwrap(), 0.1);
    assert!(LayerWeights::Explicit(vec![1.0, -1.0]).weight(2, 2).is_err());
    assert_eq!("linear(0.25)".parse::<LayerWeights>().unwrap(), LayerWeights::Linear(0.25));
}

#[test]
fn delta_matches_copy_and_recompute() {
    let table = random_table(1200, 5, 8, 4);
    let scheme = PairingScheme::default();
    let base: Vec<usize> = (0..200).collect();
    let state = ContingencyState::build(&table, &base, &scheme).unwrap();
    for r in 200..1200 {
        let mut copy = state.clone();
        copy.add_clip(table.row(r)).unwrap();
        let want = copy.value() - state.value();
        assert!((state.delta_score(table.row(r)).unwrap() - want).abs() <= 1e-12);
    }
}

#[test]
fn rebuild_reproduces_score_bit_for_bit() {
    let table = random_table(100, 5, 8, 5);
    let scheme = PairingScheme::default();
    let rows: Vec<usize> = (0..60).collect();
    let a = ContingencyState::build(&table, &rows, &scheme).unwrap().value();
    let mut with: Vec<usize> = rows.clone();
    with.push(77);
    let _ = ContingencyState::build(&table, &with, &scheme).unwrap();
    let b = ContingencyState::build(&table, &rows, &scheme).unwrap().value();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn add_clip_counts_and_commutes() {
    let table = random_table(50, 5, 4, 6);
    let scheme = PairingScheme::default();
    let mut state = ContingencyState::empty(table.spaces(), table.ks(), &scheme).unwrap();
    state.add_clip(table.row(0)).unwrap();
    assert_eq!(state.n(), 1);
    let cells: u64 = state.pairs().iter().map(|p| p.joint.iter().sum::<u64>()).sum();
    assert_eq!(cells, 45);

    let mut order: Vec<usize> = (0..50).collect();
    let forward = ContingencyState::build(&table, &order, &scheme).unwrap();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    let mut shuffled = ContingencyState::empty(table.spaces(), table.ks(), &scheme).unwrap();
    for &r in &order {
        shuffled.add_clip(table.row(r)).unwrap();
    }
    for (a, b) in forward.pairs().iter().zip(shuffled.pairs()) {
        assert_eq!(a.joint, b.joint);
    }
    assert_eq!(forward.marginals(), shuffled.marginals());

    let bad = vec![9u32; 10];
    assert!(state.add_clip(&bad).is_err());
    assert!(state.add_clip(&bad[..3]).is_err());
}

#[test]
fn histograms() {
    let table = random_table(400, 2, 7, 8);
    let space = Space::new(Modality::Visual, 2);
    let empty = cluster_histogram(&table, &[], space).unwrap();
    assert!(empty.iter().all(|h| h.1 == 0));
    assert_eq!(top_mass(&empty, 3), 0.0);

    let rows: Vec<usize> = (0..400).step_by(3).collect();
    let hist = cluster_histogram(&table, &rows, space).unwrap();
    let col = table.space_index(space).unwrap();
    let mut tally = vec![0u64; 7];
    for (i, line) in (0..400).map(|r| table.row(r)[col]).enumerate() {
        if i % 3 == 0 {
            tally[line as usize] += 1;
        }
    }
    for (id, c) in &hist {
        assert_eq!(*c, tally[*id as usize]);
    }
    for w in hist.windows(2) {
        assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
    }
    let all: Vec<usize> = (0..400).collect();
    assert_eq!(cluster_histogram(&table, &all, space).unwrap().iter().map(|h| h.1).sum::<u64>(), 400);
    assert!(cluster_histogram(&table, &rows, Space::new(Modality::Audio, 9)).is_err());
}

proptest! {
    #[test]
    fn mi_bounds_and_symmetry(pairs in prop::collection::vec((0u32..6, 0u32..5), 1..300)) {
        let (a, b): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        let joint = Contingency::from_labels(&a, &b, 6, 5).unwrap();
        let mi = mi_pair(&joint).unwrap();
        let ha = entropy(&joint.row_sums());
        let hb = entropy(&joint.col_sums());
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= ha.min(hb) + 1e-12);
        prop_assert!((mi - mi_pair(&joint.transpose()).unwrap()).abs() < 1e-12);
        prop_assert!((mi - labels_mi(&a, &b)).abs() < 1e-9);
    }
}
