use acav_core::contrastive::{contrastive_loss, cosine, score_pairs, train_heads, TrainConfig};
use acav_core::pca::{fit_pca, RankMetric, RankingBaseline};
use acav_core::store::Dataset;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

#[test]
fn loss_of_trivial_batches() {
    let z = vec![vec![0.3, -1.0, 2.0]];
    assert!(contrastive_loss(&z, &z, 0.1).unwrap().abs() < 1e-15);

    let zv = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let per_direction = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
    // mean over pairs of the two directional terms
    let want = 2.0 * per_direction;
    assert!((contrastive_loss(&zv, &zv, 0.1).unwrap() - want).abs() < 1e-12, "{}", contrastive_loss(&zv, &zv, 0.1).unwrap());
    assert!(contrastive_loss(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], 0.1).is_err());
    assert!(contrastive_loss(&zv, &zv[..1], 0.1).is_err());
}

#[test]
fn loss_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let zv = gaussian_rows(8, 5, &mut rng);
    let za = gaussian_rows(8, 5, &mut rng);
    let mut order: Vec<usize> = (0..8).collect();
    order.shuffle(&mut rng);
    let pv: Vec<_> = order.iter().map(|&i| zv[i].clone()).collect();
    let pa: Vec<_> = order.iter().map(|&i| za[i].clone()).collect();
    let (a, b) = (contrastive_loss(&zv, &za, 0.2).unwrap(), contrastive_loss(&pv, &pa, 0.2).unwrap());
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn cosine_oracle() {
    let v = [1.0, 2.0, -3.0];
    assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
    assert!((cosine(&v, &[-1.0, -2.0, 3.0]).unwrap() + 1.0).abs() < 1e-15);
    assert!(cosine(&v, &[0.0; 3]).is_none());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let a: Vec<f64> = (0..128).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..128).map(|_| rng.sample(StandardNormal)).collect();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((cosine(&a, &b).unwrap() - dot / (na * nb)).abs() < 1e-12);
    }
}

fn linked_pairs(n: usize, rng: &mut ChaCha8Rng, map: &[Vec<f64>]) -> (Dataset, Dataset) {
    let visual = gaussian_rows(n, 12, rng);
    let audio: Vec<Vec<f64>> = visual
        .iter()
        .map(|v| {
            map.iter()
                .map(|row| row.iter().zip(v).map(|(m, x)| m * x).sum::<f64>() + 0.05 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    (Dataset::from_rows(&visual).unwrap(), Dataset::from_rows(&audio).unwrap())
}

fn training_config() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        epochs: 20,
        lr: 5e-3,
        d_out: 16,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn training_separates_held_out_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let map = gaussian_rows(10, 12, &mut rng);
    let (tv, ta) = linked_pairs(800, &mut rng, &map);
    let (hv, ha) = linked_pairs(200, &mut rng, &map);
    let (heads, log) = train_heads(&tv, &ta, &training_config()).unwrap();
    assert!(log.epoch_loss.last().unwrap() < log.epoch_loss.first().unwrap());

    let within = score_pairs(&heads, &hv, &ha).unwrap();
    let shifted: Vec<Vec<f64>> = (0..200).map(|i| ha.row((i + 1) % 200).to_vec()).collect();
    let cross = score_pairs(&heads, &hv, &Dataset::from_rows(&shifted).unwrap()).unwrap();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(mean(&within) - mean(&cross) >= 0.3, "within {} cross {}", mean(&within), mean(&cross));
}

#[test]
fn zero_epochs_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map = gaussian_rows(10, 12, &mut rng);
    let (v, a) = linked_pairs(100, &mut rng, &map);
    let config = training_config();
    let untrained = train_heads(&v, &a, &TrainConfig { epochs: 0, ..config.clone() }).unwrap().0;
    let again = train_heads(&v, &a, &TrainConfig { epochs: 0, ..config.clone() }).unwrap().0;
    assert_eq!(untrained, again);
    let short = TrainConfig { epochs: 2, ..config };
    let (x, y) = (train_heads(&v, &a, &short).unwrap().0, train_heads(&v, &a, &short).unwrap().0);
    assert_eq!(x, y);
    assert_ne!(x, untrained);
}

#[test]
fn pca_on_a_line() {
    let dir = [1.0, 2.0, -2.0];
    let rows: Vec<Vec<f64>> = (0..50).map(|t| dir.iter().map(|d| d * (t as f64 - 20.0) + 1.0).collect()).collect();
    let model = fit_pca(&Dataset::from_rows(&rows).unwrap(), 3).unwrap();
    let c = &model.components[0];
    let cos = c.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() / 3.0;
    assert!((cos.abs() - 1.0).abs() < 1e-12);
    let total: f64 = model.variances.iter().sum();
    assert!((model.variances[0] / total - 1.0).abs() < 1e-12);
    assert_eq!(model.zero_variance, vec![false, true, true]);
    assert!(fit_pca(&Dataset::from_rows(&rows[..1]).unwrap(), 1).is_err());
    assert!(fit_pca(&Dataset::from_rows(&rows).unwrap(), 4).is_err());
}

#[test]
fn ranking_metrics() {
    let (e1, e2) = ([1.0, 0.0], [0.0, 1.0]);
    assert_eq!(RankMetric::Inner.score(&e1, &e2), 0.0);
    assert_eq!(RankMetric::Cosine.score(&e1, &e2), 0.0);
    assert_eq!(RankMetric::NegL2.score(&e1, &e2), -2.0);
    assert!((RankMetric::Cosine.score(&e1, &e1) - 1.0).abs() < 1e-15);
    assert_eq!(RankMetric::NegL2.score(&e1, &e1), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = Dataset::from_rows(&gaussian_rows(60, 5, &mut rng)).unwrap();
    let a = Dataset::from_rows(&gaussian_rows(60, 7, &mut rng)).unwrap();
    let base = RankingBaseline::fit(&v, &a, 64).unwrap();
    assert_eq!(base.visual.out_dim(), 5);
    assert_eq!(base.score(&v, &a, RankMetric::Inner).unwrap().len(), 60);
}
