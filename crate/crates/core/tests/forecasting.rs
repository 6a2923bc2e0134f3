use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;
use wallet_core::features::{fit_norm, FeatureRow, NUM_FEATURES};
use wallet_core::forecaster::{
    evaluate, forecast_horizon, persistence, predict_point, train, ForecastModels, ModelKind, Registry, TrainConfig,
};
use wallet_core::neural::{Activation, DenseLayer, FeedForward, LstmCell, LstmNetwork, Matrix};
use wallet_core::sim::{generate_trace, SimScenario};
use wallet_core::{Duration, Timestamp};

const TEN_MIN: Duration = Duration::from_mins(10);

fn at(i: usize) -> Timestamp {
    Timestamp::from_secs(600 * i as i64)
}

#[test]
fn persistence_on_a_random_walk_matches_half_normal_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let step = Normal::new(0.0, 1.0).unwrap();
    let mut y = 0.0;
    let rows: Vec<FeatureRow> = (0..10_001)
        .map(|i| {
            y += step.sample(&mut rng);
            FeatureRow {
                timestamp: at(i),
                features: [0.0; NUM_FEATURES],
                target: y,
            }
        })
        .collect();
    let e = persistence(&rows, TEN_MIN).unwrap();
    assert_eq!(e.residuals.len(), 10_000);
    let expected = (2.0 / std::f64::consts::PI).sqrt();
    assert!((e.mae_raw - expected).abs() / expected < 0.05, "{} vs {expected}", e.mae_raw);
}

/// Moisture exactly affine in the five features.
fn affine_rows(n: usize) -> Vec<FeatureRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let noise = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|i| {
            let f: [f64; NUM_FEATURES] = std::array::from_fn(|_| noise.sample(&mut rng));
            let x = [-95.0 + 3.0 * f[0], 6.0 + f[1], 15.0 + 5.0 * f[2], 65.0 + 8.0 * f[3], 1013.0 + 2.0 * f[4]];
            let target = 400.0 - 2.0 * x[0] + 5.0 * x[1] + 1.5 * x[2] - 0.8 * x[3] + 0.3 * x[4];
            FeatureRow {
                timestamp: at(i),
                features: x,
                target,
            }
        })
        .collect()
}

/// Ordinary least squares via the normal equations, solved by Gaussian elimination.
fn least_squares_mae(train: &[FeatureRow], test: &[FeatureRow]) -> f64 {
    const K: usize = NUM_FEATURES + 1;
    let design = |r: &FeatureRow| {
        let mut v = [1.0; K];
        v[1..].copy_from_slice(&r.features);
        v
    };
    let mut a = [[0.0; K + 1]; K];
    for r in train {
        let x = design(r);
        for i in 0..K {
            for j in 0..K {
                a[i][j] += x[i] * x[j];
            }
            a[i][K] += x[i] * r.target;
        }
    }
    for col in 0..K {
        let pivot = (col..K).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, pivot);
        for row in 0..K {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..=K {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let beta: Vec<f64> = (0..K).map(|i| a[i][K] / a[i][i]).collect();
    let total: f64 = test
        .iter()
        .map(|r| {
            let x = design(r);
            let p: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            (p - r.target).abs()
        })
        .sum();
    total / test.len() as f64
}

#[test]
fn ffnn_fits_an_affine_target() {
    let rows = affine_rows(2000);
    let cfg = TrainConfig::default();
    let out = train(&rows, &cfg).unwrap();
    let [n_train, n_val, _] = out.split;
    let test = &rows[n_train + n_val..];
    let range = out.models.norm.target_range();
    let oracle = least_squares_mae(&rows[..n_train], test);
    assert!(oracle < 1e-6 * range, "oracle should fit exactly, got {oracle}");
    assert!(
        out.metrics.ffnn_mae < 0.01 * range,
        "ffnn mae {} vs 1% of range {}",
        out.metrics.ffnn_mae,
        0.01 * range
    );
}

/// A model whose FFNN reproduces the target when target == feature 0.
fn echo_model(rows: &[FeatureRow]) -> ForecastModels {
    let mut w = Matrix::zeros(1, NUM_FEATURES);
    w[(0, 0)] = 1.0;
    let ffnn = FeedForward::new(vec![DenseLayer::new(w, vec![0.0], Activation::Linear).unwrap()]).unwrap();
    let head = FeedForward::new(vec![DenseLayer::new(Matrix::zeros(1, 2), vec![0.5], Activation::Linear).unwrap()]).unwrap();
    ForecastModels {
        version: "v0".into(),
        ffnn,
        lstm: LstmNetwork::new(LstmCell::zeros(NUM_FEATURES, 2), head).unwrap(),
        norm: fit_norm(rows).unwrap(),
        lookback: 6,
        cadence: TEN_MIN,
        ensemble_weight: 0.5,
    }
}

fn echo_rows(n: usize) -> Vec<FeatureRow> {
    (0..n)
        .map(|i| {
            let v = 300.0 + 40.0 * (i as f64 * 0.3).sin();
            FeatureRow {
                timestamp: at(i),
                features: [v, (i % 7) as f64, (i % 5) as f64, (i % 3) as f64, (i % 11) as f64],
                target: v,
            }
        })
        .collect()
}

#[test]
fn exact_model_scores_zero() {
    let rows = echo_rows(50);
    let m = echo_model(&rows);
    let e = evaluate(&m, ModelKind::Ffnn, &rows, &m.norm).unwrap();
    assert!(e.mae_raw < 1e-12);
    assert!(e.msle_normalized.unwrap() < 1e-24);
    assert_eq!(evaluate(&m, ModelKind::Lstm, &rows, &m.norm).unwrap().residuals.len(), 50 - 6);
}

proptest! {
    #[test]
    fn raw_mae_is_range_times_normalized_mae(
        targets in prop::collection::vec(-1e3f64..1e3, 4..30),
        preds in prop::collection::vec(-1e3f64..1e3, 30),
    ) {
        let rows: Vec<FeatureRow> = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| FeatureRow { timestamp: at(i), features: [i as f64, (i * i) as f64, 1.0 / (i as f64 + 1.0), (i as f64).sqrt(), (i % 2) as f64], target: t })
            .collect();
        let Ok(stats) = fit_norm(&rows) else { return Ok(()) };
        let n = rows.len() as f64;
        let raw: f64 = rows.iter().zip(&preds).map(|(r, p)| (r.target - p).abs()).sum::<f64>() / n;
        let normalized: f64 = rows
            .iter()
            .zip(&preds)
            .map(|(r, &p)| (stats.normalize_target(r.target) - stats.normalize_target(p)).abs())
            .sum::<f64>() / n;
        prop_assert!((raw - stats.target_range() * normalized).abs() <= 1e-9 * raw.max(1.0));
    }
}

fn blob(v: &Value) -> Vec<f64> {
    STANDARD
        .decode(v.as_str().unwrap())
        .unwrap()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn act(name: &str, z: f64) -> f64 {
    match name {
        "elu" if z <= 0.0 => z.exp() - 1.0,
        "tanh" => z.tanh(),
        _ => z,
    }
}

fn dense_from_json(layer: &Value, x: &[f64]) -> Vec<f64> {
    let (i, o) = (layer["inputs"].as_u64().unwrap() as usize, layer["outputs"].as_u64().unwrap() as usize);
    let (w, b) = (blob(&layer["weights"]), blob(&layer["bias"]));
    (0..o)
        .map(|r| act(layer["activation"].as_str().unwrap(), b[r] + (0..i).map(|c| w[r * i + c] * x[c]).sum::<f64>()))
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn lstm_from_json(doc: &Value, window: &[Vec<f64>]) -> f64 {
    let layers = doc["layers"].as_array().unwrap();
    let cell = &layers[0];
    let (d, h) = (cell["inputs"].as_u64().unwrap() as usize, cell["hidden"].as_u64().unwrap() as usize);
    let order: Vec<&str> = cell["gate_order"].as_array().unwrap().iter().map(|g| g.as_str().unwrap()).collect();
    assert_eq!(order, ["input", "forget", "output", "candidate"]);
    let (w, u, b) = (blob(&cell["input_weights"]), blob(&cell["recurrent_weights"]), blob(&cell["biases"]));
    let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
    for x in window {
        let pre = |g: usize, k: usize| {
            b[g * h + k]
                + (0..d).map(|j| w[g * h * d + k * d + j] * x[j]).sum::<f64>()
                + (0..h).map(|j| u[g * h * h + k * h + j] * hs[j]).sum::<f64>()
        };
        let mut next_h = vec![0.0; h];
        let mut next_c = vec![0.0; h];
        for k in 0..h {
            let (i, f, o, g) = (sigmoid(pre(0, k)), sigmoid(pre(1, k)), sigmoid(pre(2, k)), pre(3, k).tanh());
            next_c[k] = f * cs[k] + i * g;
            next_h[k] = o * next_c[k].tanh();
        }
        hs = next_h;
        cs = next_c;
    }
    let mut v = hs;
    for layer in &layers[1..] {
        v = dense_from_json(layer, &v);
    }
    v[0]
}

#[test]
fn served_prediction_matches_recomputation_from_files() {
    let mut scenario = SimScenario::default();
    scenario.duration_mins = 600 * 10;
    let trace = generate_trace(&scenario).unwrap();
    let mut cfg = TrainConfig::default().with_epochs(3);
    cfg.seed = 9;
    let outcome = train(&trace.rows, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let version = reg.publish(&outcome, &cfg).unwrap();
    let served = reg.load_current().unwrap();
    let history = &trace.rows[trace.rows.len() - 7..];
    let r = predict_point(&served, history, None).unwrap();
    assert_eq!(r.model_version, version);

    let read = |name: &str| -> Value { serde_json::from_str(&std::fs::read_to_string(dir.path().join(&version).join(name)).unwrap()).unwrap() };
    let norm = read("norm.json");
    let vec5 = |k: &str| -> Vec<f64> { norm[k].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect() };
    let (mean, lo, hi) = (vec5("mean"), vec5("min"), vec5("max"));
    let (t_min, t_max) = (norm["target_min"].as_f64().unwrap(), norm["target_max"].as_f64().unwrap());
    let scale = |row: &FeatureRow| -> Vec<f64> { (0..NUM_FEATURES).map(|j| (row.features[j] - mean[j] - lo[j]) / (hi[j] - lo[j])).collect() };
    let unscale = |y: f64| y * (t_max - t_min) + t_min;

    let ffnn = read("ffnn.model");
    let mut v = scale(&history[6]);
    for layer in ffnn["layers"].as_array().unwrap() {
        v = dense_from_json(layer, &v);
    }
    let window: Vec<Vec<f64>> = history[1..].iter().map(scale).collect();
    let lstm = unscale(lstm_from_json(&read("lstm.model"), &window));
    let ffnn = unscale(v[0]);

    let tol = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
    assert!(tol(r.ffnn_pred, ffnn), "{} vs {ffnn}", r.ffnn_pred);
    assert!(tol(r.lstm_pred, lstm), "{} vs {lstm}", r.lstm_pred);
    assert!(tol(r.ensemble, 0.5 * ffnn + 0.5 * lstm));

    let steps = forecast_horizon(&served, history, 3, None).unwrap();
    assert_eq!(steps[0], r);
    for (k, s) in steps.iter().enumerate() {
        assert_eq!(s.timestamp, history[6].timestamp + TEN_MIN.mul(k as i64 + 1));
        // Exogenous inputs are frozen, so the FFNN output cannot move.
        assert_eq!(s.ffnn_pred, r.ffnn_pred);
    }
}
