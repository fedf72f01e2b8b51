use acav_core::kmeans::{assign, fit_lloyd, fit_lloyd_from, fit_sgd, fit_sgd_observed, quantization_error, Clustering, LloydParams, SgdParams, StoreSpace};
use acav_core::store::{write_store, ClipRecord, Dataset, LayerSpec, Modality, Space, StoreReader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn sgd(k: usize, seed: u64) -> SgdParams {
    SgdParams {
        k,
        lr: 0.1,
        epochs: 100,
        batch_size: 64,
        seed,
        ..SgdParams::default()
    }
}

fn sorted_rows(m: &Clustering) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..m.k).map(|c| m.centroid(c).to_vec()).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rows
}

#[test]
fn identical_vectors_are_a_fixed_point() {
    let v = [1.5, -2.25, 3.0];
    let data = Dataset::from_rows(&vec![v; 10]).unwrap();
    let m = fit_sgd(&data, &sgd(1, 0)).unwrap();
    assert_eq!(m.centroid(0), &v);
}

#[test]
fn single_centroid_moves_to_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<f64>> = (0..500).map(|_| vec![rng.random_range(0.0..4.0), rng.random_range(-1.0..1.0)]).collect();
    let data = Dataset::from_rows(&rows).unwrap();
    let mean = [rows.iter().map(|r| r[0]).sum::<f64>() / 500.0, rows.iter().map(|r| r[1]).sum::<f64>() / 500.0];
    let full = SgdParams {
        batch_size: 500,
        ..sgd(1, 2)
    };
    let m = fit_sgd(&data, &full).unwrap();
    assert!((m.centroid(0)[0] - mean[0]).abs() < 1e-3 && (m.centroid(0)[1] - mean[1]).abs() < 1e-3);
    let (l, _) = fit_lloyd(&data, &LloydParams { k: 1, ..LloydParams::default() }).unwrap();
    assert!((l.centroid(0)[0] - mean[0]).abs() < 1e-12 && (l.centroid(0)[1] - mean[1]).abs() < 1e-12);
}

#[test]
fn distinct_points_are_recovered() {
    let points: Vec<Vec<f64>> = (0..6).map(|i| vec![10.0 * i as f64, -5.0 * i as f64]).collect();
    let data = Dataset::from_rows(&points).unwrap();
    let m = fit_sgd(&data, &sgd(6, 3)).unwrap();
    for (a, b) in sorted_rows(&m).iter().zip(&points) {
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}

#[test]
fn two_blob_mixture_agrees_with_lloyd() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sigma = 1.0;
    let rows: Vec<Vec<f64>> = (0..4000)
        .map(|i| {
            let cx = if i % 2 == 0 { 0.0 } else { 10.0 * sigma };
            vec![cx + sigma * rng.sample::<f64, _>(StandardNormal), sigma * rng.sample::<f64, _>(StandardNormal)]
        })
        .collect();
    let data = Dataset::from_rows(&rows).unwrap();
    let params = SgdParams {
        k: 2,
        lr: 0.1,
        seed: 5,
        ..SgdParams::default()
    };
    let s = sorted_rows(&fit_sgd(&data, &params).unwrap());
    let l = sorted_rows(&fit_lloyd(&data, &LloydParams { k: 2, seed: 5, ..LloydParams::default() }).unwrap().0);
    for (a, b) in s.iter().zip(&l) {
        let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(d < 0.05 * sigma, "centroid distance {d}");
    }
}

#[test]
fn lloyd_objective_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<Vec<f64>> = (0..100).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let data = Dataset::from_rows(&rows).unwrap();
    let (_, trace) = fit_lloyd(&data, &LloydParams { k: 3, seed: 7, ..LloydParams::default() }).unwrap();
    assert!(trace.iterations() > 1);
    for w in trace.objective.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
}

#[test]
fn converged_lloyd_stops_after_one_iteration() {
    let rows = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
    let data = Dataset::from_rows(&rows).unwrap();
    let start = Clustering::from_centroids(vec![vec![0.5], vec![10.5]]).unwrap();
    let (_, trace) = fit_lloyd_from(&data, start, 50, 0.0).unwrap();
    assert_eq!(trace.iterations(), 1);
    assert_eq!(trace.movement, vec![0.0]);
}

#[test]
fn assignment_rules() {
    let centroids: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 0.0]).collect();
    let m = Clustering::from_centroids(centroids.clone()).unwrap();
    assert_eq!(m.nearest(&[3.0, 0.0]).0, 3);
    let odd = Clustering::from_centroids(vec![vec![9.0, 9.0], vec![0.0, 1.0], vec![9.0, -9.0], vec![7.0, 7.0], vec![0.0, -1.0]]).unwrap();
    assert_eq!(odd.nearest(&[0.0, 0.0]).0, 1);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f64>> = (0..1000).map(|_| vec![rng.random_range(-1.0..7.0), rng.random_range(-3.0..3.0)]).collect();
    let data = Dataset::from_rows(&rows).unwrap();
    let got = assign(&m, &data).unwrap();
    for (row, id) in rows.iter().zip(got) {
        let d: Vec<f64> = centroids.iter().map(|c| (c[0] - row[0]).powi(2) + (c[1] - row[1]).powi(2)).collect();
        let best = (0..6).fold(0, |b, i| if d[i] < d[b] { i } else { b });
        assert_eq!(id as usize, best);
    }
    assert!(assign(&m, &Dataset::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).is_err());
}

#[test]
fn starved_centroids_are_reinitialized() {
    // three distinct values, so initialization must put one centroid on the rare outlier
    let mut rows: Vec<Vec<f64>> = (0..2000).map(|i| vec![(i % 2) as f64]).collect();
    rows.insert(1000, vec![100.0]);
    let data = Dataset::from_rows(&rows).unwrap();
    let k = 3;
    let threshold = 1.0 / (k * k) as f64;
    let mut violations = 0;
    let params = SgdParams {
        k,
        lr: 0.2,
        epochs: 30,
        batch_size: 16,
        seed: 10,
        reinit: true,
        standardize: false,
    };
    let model = fit_sgd_observed(&data, &params, &mut |m| {
        violations += (0..m.k).filter(|&c| m.utilization(c) < threshold).count();
    })
    .unwrap();
    assert_eq!(violations, 0);
    assert!(model.reinit_count > 0);
    assert!((0..k).all(|c| model.centroid(c).iter().all(|x| x.is_finite())));
    let off = fit_sgd(&data, &SgdParams { reinit: false, ..params }).unwrap();
    assert_eq!(off.reinit_count, 0);
}

#[test]
fn sgd_is_deterministic_and_save_load_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let data = Dataset::from_rows(&rows).unwrap();
    let p = SgdParams { standardize: true, ..sgd(5, 12) };
    let a = fit_sgd(&data, &p).unwrap();
    assert_eq!(a, fit_sgd(&data, &p).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    a.save(&path).unwrap();
    let b = Clustering::load(&path).unwrap();
    assert_eq!(a, b);
    assert_eq!(quantization_error(&a, &data).unwrap(), quantization_error(&b, &data).unwrap());
}

#[test]
fn streamed_store_matches_in_memory_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let records: Vec<(ClipRecord, Vec<Vec<f32>>)> = (0..400)
        .map(|i| {
            let feats = (0..2).map(|_| (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
            (ClipRecord::new(format!("c{i}"), 60.0), feats)
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.bin");
    write_store(&path, LayerSpec::symmetric(1, 3), records).unwrap();
    let reader = StoreReader::open(&path).unwrap();
    let space = Space::new(Modality::Visual, 1);
    let params = sgd(4, 14);
    let streamed = fit_sgd(&StoreSpace::new(&reader, space), &params).unwrap();
    let memory = fit_sgd(&reader.load_space(space).unwrap(), &params).unwrap();
    assert_eq!(streamed.centroids, memory.centroids);

    let rows = [5usize, 17, 100, 399];
    let subset = StoreSpace::new(&reader, space).with_rows(&rows);
    assert_eq!(assign(&memory, &subset).unwrap().len(), 4);
}

#[test]
fn parameter_validation() {
    let data = Dataset::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    assert!(fit_sgd(&data, &SgdParams { k: 0, ..sgd(1, 0) }).is_err());
    assert!(fit_sgd(&data, &SgdParams { lr: 0.0, ..sgd(1, 0) }).is_err());
    assert!(fit_sgd(&data, &sgd(3, 0)).is_err());
    let bad = Dataset::from_rows(&[vec![f64::NAN], vec![1.0]]).unwrap();
    assert!(fit_sgd(&bad, &sgd(1, 0)).is_err());
}
