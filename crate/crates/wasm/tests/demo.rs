use acav_wasm::{kmeans_json, pairing_json, selection_curve_json};
use serde_json::Value;

fn blobs() -> Vec<f64> {
    let centers = [(50.0, 50.0), (300.0, 60.0), (170.0, 300.0)];
    let mut xy = Vec::new();
    for (i, &(cx, cy)) in centers.iter().enumerate() {
        for j in 0..40 {
            let t = (i * 40 + j) as f64;
            xy.push(cx + 5.0 * (t * 0.7).sin());
            xy.push(cy + 5.0 * (t * 1.3).cos());
        }
    }
    xy
}

#[test]
fn kmeans_finds_separated_blobs() {
    let xy = blobs();
    let fits: Vec<Value> = (1..=8)
        .map(|seed| serde_json::from_str(&kmeans_json(&xy, 3, 0.1, 30, 32, seed).unwrap()).unwrap())
        .collect();
    for out in &fits {
        for fit in ["sgd", "lloyd"] {
            assert_eq!(out[fit]["centroids"].as_array().unwrap().len(), 3);
            assert_eq!(out[fit]["labels"].as_array().unwrap().len(), 120);
        }
    }
    // a single random start can settle in a local optimum; the best of eight should not
    let qe = |v: &Value| v["lloyd"]["quantization_error"].as_f64().unwrap();
    let best = fits.iter().min_by(|a, b| qe(a).total_cmp(&qe(b))).unwrap();
    let labels = best["lloyd"]["labels"].as_array().unwrap();
    for blob in labels.chunks(40) {
        assert!(blob.iter().all(|l| l == &blob[0]));
    }
    assert!(qe(best) < 40.0 * 120.0, "{}", qe(best));
}

#[test]
fn kmeans_rejects_odd_input() {
    assert!(kmeans_json(&[1.0, 2.0, 3.0], 1, 0.1, 5, 8, 1).is_err());
    assert!(kmeans_json(&[1.0, 2.0], 2, 0.1, 5, 8, 1).is_err());
}

#[test]
fn pairing_counts_and_agreement() {
    let out: Value = serde_json::from_str(&pairing_json(5, 6, 1500, 0.7, 7).unwrap()).unwrap();
    let counts: Vec<usize> = out
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["pairs"].as_array().unwrap().len())
        .collect();
    assert_eq!(counts, [5, 25, 45]);

    let objective = |agreement: f64| -> f64 {
        let v: Value = serde_json::from_str(&pairing_json(2, 6, 1500, agreement, 7).unwrap()).unwrap();
        v[0]["objective"].as_f64().unwrap()
    };
    let (low, high) = (objective(0.0), objective(0.9));
    assert!(low < 0.05 && high > 0.5, "low {low} high {high}");
}

#[test]
fn selection_curve_shapes() {
    let json = selection_curve_json(8, 20, 1.5, 0.5, 40, 10, 3).unwrap();
    let out: Value = serde_json::from_str(&json).unwrap();
    let target = out["target"].as_u64().unwrap() as usize;
    assert_eq!(target, out["pairs"].as_u64().unwrap() as usize / 2);
    for key in ["greedy", "batch"] {
        let curve = out[key].as_array().unwrap();
        assert_eq!(curve.len(), target);
        assert!(curve.iter().all(|p| (0.0..=100.0).contains(&p.as_f64().unwrap())));
    }
    assert_eq!(json, selection_curve_json(8, 20, 1.5, 0.5, 40, 10, 3).unwrap());
}
