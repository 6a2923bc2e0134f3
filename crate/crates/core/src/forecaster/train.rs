use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{apply_norm, fit_norm, window, FeatureError, FeatureRow, NormStats, WindowedSample, NUM_FEATURES};
use crate::neural::{mae, msle_guarded, AdamConfig, AdamState, Matrix, NeuralError, Parameters};
use crate::{Ffnn, LstmNet};

use super::{ensemble, ForecastError, ForecastModels, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_msle: f64,
    pub val_msle: f64,
    /// Validation MAE in raw moisture units.
    pub val_mae: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
}

/// Test-split MAEs in raw moisture units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    /// Same-tick estimate over every test row.
    pub ffnn_mae: f64,
    /// Next-tick forecast over every test window.
    pub lstm_mae: f64,
    /// Next-tick ensemble over the LSTM's test windows.
    pub ensemble_mae: f64,
    /// `ŷ(t) = y(t - 1)` over the LSTM's test windows.
    pub persistence_mae: f64,
    pub ffnn_test_rows: usize,
    pub lstm_test_windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub models: ForecastModels,
    pub ffnn_history: TrainingHistory,
    pub lstm_history: TrainingHistory,
    pub metrics: TestMetrics,
    /// Rows in the train, validation and test splits.
    pub split: [usize; 3],
}

const STREAM_FFNN_INIT: u64 = 10;
const STREAM_FFNN_SHUFFLE: u64 = 11;
const STREAM_LSTM_INIT: u64 = 20;
const STREAM_LSTM_SHUFFLE: u64 = 21;

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

struct Schedule {
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    checkpoint: bool,
}

/// Shuffled mini-batch Adam. `batch_grad` returns the mean loss and gradient
/// for a batch of training indices; `validate` returns `(msle, raw mae)`.
fn fit<M, G>(
    model: &mut M,
    n_train: usize,
    schedule: &Schedule,
    rng: &mut ChaCha8Rng,
    batch_grad: impl Fn(&M, &[usize]) -> Result<(f64, G), NeuralError>,
    validate: impl Fn(&M) -> Result<(f64, f64), NeuralError>,
) -> Result<TrainingHistory, NeuralError>
where
    M: Parameters<f64> + Clone,
    G: Parameters<f64>,
{
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(schedule.learning_rate), model.num_params());
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, M)> = None;
    for epoch in 1..=schedule.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let (loss, grad) = batch_grad(model, batch)?;
            adam.step_model(model, &grad)?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_msle = loss_sum / n_train as f64;
        if !train_msle.is_finite() {
            return Err(NeuralError::Domain(format!("training diverged at epoch {epoch}")));
        }
        let (val_msle, val_mae) = validate(model)?;
        history.epochs.push(EpochStats {
            epoch,
            train_msle,
            val_msle,
            val_mae,
        });
        if schedule.checkpoint && best.as_ref().map_or(true, |(b, _)| val_msle < *b) {
            best = Some((val_msle, model.clone()));
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(history)
}

struct FfnnSplit<'a> {
    rows: &'a [FeatureRow],
    raw: &'a [FeatureRow],
}

fn ffnn_preds(net: &Ffnn, rows: &[FeatureRow]) -> Vec<f64> {
    rows.iter().map(|r| net.forward_unchecked(&r.features)[0]).collect()
}

fn raw_mae(norm: &NormStats, preds_norm: &[f64], raw_targets: impl Iterator<Item = f64>) -> f64 {
    let actual: Vec<f64> = raw_targets.collect();
    let preds: Vec<f64> = preds_norm.iter().map(|&p| norm.denormalize_target(p)).collect();
    mae(&actual, &preds).unwrap_or(f64::NAN)
}

fn train_ffnn(
    cfg: &TrainConfig,
    norm: &NormStats,
    train: FfnnSplit<'_>,
    val: FfnnSplit<'_>,
) -> Result<(Ffnn, TrainingHistory), NeuralError> {
    let c = &cfg.ffnn;
    let mut net = Ffnn::xavier(NUM_FEATURES, &c.hidden, 1, c.activation, &mut stream(cfg.seed, STREAM_FFNN_INIT));
    let schedule = Schedule {
        epochs: c.epochs,
        batch_size: c.batch_size,
        learning_rate: c.learning_rate,
        checkpoint: cfg.checkpoint_best_val,
    };
    let val_targets: Vec<f64> = val.rows.iter().map(|r| r.target).collect();
    let history = fit(
        &mut net,
        train.rows.len(),
        &schedule,
        &mut stream(cfg.seed, STREAM_FFNN_SHUFFLE),
        |net, idx| {
            let mut data = Vec::with_capacity(idx.len() * NUM_FEATURES);
            let mut targets = Vec::with_capacity(idx.len());
            for &i in idx {
                data.extend_from_slice(&train.rows[i].features);
                targets.push(train.rows[i].target);
            }
            net.backprop_msle(&Matrix::from_vec(idx.len(), NUM_FEATURES, data)?, &targets)
        },
        |net| {
            let preds = ffnn_preds(net, val.rows);
            Ok((
                msle_guarded(&val_targets, &preds)?,
                raw_mae(norm, &preds, val.raw.iter().map(|r| r.target)),
            ))
        },
    )?;
    Ok((net, history))
}

fn lstm_preds(net: &LstmNet, samples: &[&WindowedSample]) -> Result<Vec<f64>, NeuralError> {
    samples.iter().map(|s| Ok(net.forward(&s.inputs)?[0])).collect()
}

fn train_lstm(
    cfg: &TrainConfig,
    norm: &NormStats,
    raw: &[FeatureRow],
    train: &[&WindowedSample],
    val: &[&WindowedSample],
) -> Result<(LstmNet, TrainingHistory), NeuralError> {
    let c = &cfg.lstm;
    let mut net = LstmNet::xavier(
        NUM_FEATURES,
        c.units,
        c.dense_units,
        1,
        c.dense_activation,
        &mut stream(cfg.seed, STREAM_LSTM_INIT),
    );
    let schedule = Schedule {
        epochs: c.epochs,
        batch_size: c.batch_size,
        learning_rate: c.learning_rate,
        checkpoint: cfg.checkpoint_best_val,
    };
    let val_targets: Vec<f64> = val.iter().map(|s| s.target).collect();
    let history = fit(
        &mut net,
        train.len(),
        &schedule,
        &mut stream(cfg.seed, STREAM_LSTM_SHUFFLE),
        |net, idx| {
            let windows: Vec<&Matrix<f64>> = idx.iter().map(|&i| &train[i].inputs).collect();
            let targets: Vec<f64> = idx.iter().map(|&i| train[i].target).collect();
            net.backprop_msle(&windows, &targets)
        },
        |net| {
            let preds = lstm_preds(net, val)?;
            Ok((
                msle_guarded(&val_targets, &preds)?,
                raw_mae(norm, &preds, val.iter().map(|s| raw[s.target_index].target)),
            ))
        },
    )?;
    Ok((net, history))
}

/// Fits both models on one chronological split of `rows`.
///
/// Normalization statistics come from the training split only. FFNN rows
/// and LSTM windows are assigned to the split that holds their target row.
/// The two models train concurrently on independent seeded streams, so the
/// result depends only on `rows` and `cfg`.
pub fn train(rows: &[FeatureRow], cfg: &TrainConfig) -> Result<TrainOutcome, ForecastError> {
    cfg.validate()?;
    if rows.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(ForecastError::Unordered);
    }
    let (n_train, n_val, n_test) = cfg.split.sizes(rows.len())?;
    let val_start = n_train;
    let test_start = n_train + n_val;
    let norm = fit_norm(&rows[..n_train])?;
    let normed: Vec<FeatureRow> = rows.iter().map(|r| apply_norm(&norm, r)).collect();

    let lookback = cfg.lstm.lookback;
    let windows = window(&normed, lookback, cfg.cadence())?;
    let by_split = |lo: usize, hi: usize| -> Vec<&WindowedSample> {
        windows.iter().filter(|s| (lo..hi).contains(&s.target_index)).collect()
    };
    let (w_train, w_val, w_test) = (
        by_split(0, val_start),
        by_split(val_start, test_start),
        by_split(test_start, rows.len()),
    );
    if w_train.is_empty() || w_val.is_empty() || w_test.is_empty() {
        return Err(FeatureError::TooShort { lookback }.into());
    }

    let (ffnn, lstm) = std::thread::scope(|scope| {
        let f = scope.spawn(|| {
            train_ffnn(
                cfg,
                &norm,
                FfnnSplit {
                    rows: &normed[..n_train],
                    raw: &rows[..n_train],
                },
                FfnnSplit {
                    rows: &normed[val_start..test_start],
                    raw: &rows[val_start..test_start],
                },
            )
        });
        let l = scope.spawn(|| train_lstm(cfg, &norm, rows, &w_train, &w_val));
        (
            f.join().expect("ffnn training thread panicked"),
            l.join().expect("lstm training thread panicked"),
        )
    });
    let (ffnn, ffnn_history) = ffnn?;
    let (lstm, lstm_history) = lstm?;

    let test_rows = &normed[test_start..];
    let ffnn_test = ffnn_preds(&ffnn, test_rows);
    let ffnn_mae = raw_mae(&norm, &ffnn_test, rows[test_start..].iter().map(|r| r.target));

    let lstm_test = lstm_preds(&lstm, &w_test)?;
    let actual: Vec<f64> = w_test.iter().map(|s| rows[s.target_index].target).collect();
    let lstm_raw: Vec<f64> = lstm_test.iter().map(|&p| norm.denormalize_target(p)).collect();
    let ens: Vec<f64> = w_test
        .iter()
        .zip(&lstm_raw)
        .map(|(s, &l)| {
            let f = norm.denormalize_target(ffnn.forward_unchecked(&normed[s.target_index - 1].features)[0]);
            ensemble(cfg.ensemble_weight, f, l)
        })
        .collect();
    let persisted: Vec<f64> = w_test.iter().map(|s| rows[s.target_index - 1].target).collect();

    let metrics = TestMetrics {
        ffnn_mae,
        lstm_mae: mae(&actual, &lstm_raw)?,
        ensemble_mae: mae(&actual, &ens)?,
        persistence_mae: mae(&actual, &persisted)?,
        ffnn_test_rows: n_test,
        lstm_test_windows: w_test.len(),
    };

    Ok(TrainOutcome {
        models: ForecastModels {
            version: String::new(),
            ffnn,
            lstm,
            norm,
            lookback,
            cadence: cfg.cadence(),
            ensemble_weight: cfg.ensemble_weight,
        },
        ffnn_history,
        lstm_history,
        metrics,
        split: [n_train, n_val, n_test],
    })
}
