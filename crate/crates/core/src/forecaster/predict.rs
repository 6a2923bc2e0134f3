use serde::{Deserialize, Serialize};

use crate::features::{contiguous_runs, FeatureRow, NormStats, NUM_FEATURES};
use crate::neural::{msle_guarded, Matrix};
use crate::time::{Duration, Timestamp};

use super::{ensemble, ForecastError, ForecastModels, ForecastResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ffnn,
    Lstm,
    Ensemble,
    Persistence,
}

impl ModelKind {
    /// Rows consumed before the first residual.
    pub fn warm_up(self, lookback: usize) -> usize {
        match self {
            ModelKind::Ffnn => 0,
            ModelKind::Lstm | ModelKind::Ensemble => lookback,
            ModelKind::Persistence => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub timestamp: Timestamp,
    pub actual: f64,
    pub predicted: f64,
}

impl Residual {
    pub fn residual(&self) -> f64 {
        self.actual - self.predicted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub kind: ModelKind,
    pub mae_raw: f64,
    /// MSLE on normalized targets; absent when no stats were available.
    pub msle_normalized: Option<f64>,
    pub residuals: Vec<Residual>,
}

impl ForecastModels {
    fn ffnn_raw(&self, raw: &FeatureRow) -> f64 {
        let x = self.norm.normalize_features(&raw.features);
        self.norm.denormalize_target(self.ffnn.forward_unchecked(&x)[0])
    }

    /// LSTM forecast for the tick after the last of `rows` (exactly `lookback` rows).
    fn lstm_raw(&self, rows: &[FeatureRow]) -> Result<f64, ForecastError> {
        let mut data = Vec::with_capacity(rows.len() * NUM_FEATURES);
        for r in rows {
            data.extend_from_slice(&self.norm.normalize_features(&r.features));
        }
        let w = Matrix::from_vec(rows.len(), NUM_FEATURES, data)?;
        Ok(self.norm.denormalize_target(self.lstm.forward(&w)?[0]))
    }
}

/// Length of the cadence-contiguous run at the end of `rows`.
fn trailing_run(rows: &[FeatureRow], cadence: Duration) -> usize {
    contiguous_runs(rows, cadence).last().map_or(0, |(a, b)| b - a)
}

/// One-step forecast for the tick after the newest row.
///
/// Uses the trailing `lookback + 1` contiguous rows: the FFNN reads the
/// newest, the LSTM the newest `lookback`. `now`, when given, only sets the
/// `stale` flag.
pub fn predict_point(models: &ForecastModels, rows: &[FeatureRow], now: Option<Timestamp>) -> Result<ForecastResult, ForecastError> {
    let need = models.lookback + 1;
    if rows.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(ForecastError::Unordered);
    }
    let got = trailing_run(rows, models.cadence);
    if got < need {
        return Err(ForecastError::InsufficientHistory { need, got });
    }
    let tail = &rows[rows.len() - need..];
    let latest = &tail[need - 1];
    let ffnn_pred = models.ffnn_raw(latest);
    let lstm_pred = models.lstm_raw(&tail[1..])?;
    let stale = now.map_or(false, |n| n.since(latest.timestamp) > models.cadence.mul(2));
    Ok(ForecastResult {
        timestamp: latest.timestamp + models.cadence,
        ffnn_pred,
        lstm_pred,
        ensemble: ensemble(models.ensemble_weight, ffnn_pred, lstm_pred),
        model_version: models.version.clone(),
        stale,
    })
}

/// `k` iterated one-step forecasts with the exogenous features held at the
/// newest observed row.
pub fn forecast_horizon(
    models: &ForecastModels,
    rows: &[FeatureRow],
    k: usize,
    now: Option<Timestamp>,
) -> Result<Vec<ForecastResult>, ForecastError> {
    if k == 0 {
        return Err(ForecastError::InvalidConfig("forecast needs at least one step".into()));
    }
    let need = models.lookback + 1;
    let start = rows.len().saturating_sub(need);
    let mut history: Vec<FeatureRow> = rows[start..].to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let r = predict_point(models, &history, now)?;
        let mut next = *history.last().expect("predict_point checked the length");
        next.timestamp = r.timestamp;
        history.remove(0);
        history.push(next);
        out.push(r);
    }
    Ok(out)
}

/// Residuals of `kind` over `rows` (raw units), checked against `stats`.
pub fn evaluate(
    models: &ForecastModels,
    kind: ModelKind,
    rows: &[FeatureRow],
    stats: &NormStats,
) -> Result<Evaluation, ForecastError> {
    let (expected, got) = (models.norm.fingerprint(), stats.fingerprint());
    if expected != got {
        return Err(ForecastError::StatsMismatch { expected, got });
    }
    if rows.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(ForecastError::Unordered);
    }
    let l = models.lookback;
    let mut residuals = Vec::new();
    match kind {
        ModelKind::Ffnn => {
            for r in rows {
                residuals.push(Residual {
                    timestamp: r.timestamp,
                    actual: r.target,
                    predicted: models.ffnn_raw(r),
                });
            }
        }
        ModelKind::Lstm | ModelKind::Ensemble | ModelKind::Persistence => {
            let warm = kind.warm_up(l);
            for (a, b) in contiguous_runs(rows, models.cadence) {
                for i in a + warm..b {
                    let predicted = match kind {
                        ModelKind::Persistence => rows[i - 1].target,
                        ModelKind::Lstm => models.lstm_raw(&rows[i - l..i])?,
                        _ => ensemble(
                            models.ensemble_weight,
                            models.ffnn_raw(&rows[i - 1]),
                            models.lstm_raw(&rows[i - l..i])?,
                        ),
                    };
                    residuals.push(Residual {
                        timestamp: rows[i].timestamp,
                        actual: rows[i].target,
                        predicted,
                    });
                }
            }
        }
    }
    let mut eval = summarize(kind, residuals)?;
    let actual: Vec<f64> = eval.residuals.iter().map(|r| stats.normalize_target(r.actual)).collect();
    let predicted: Vec<f64> = eval.residuals.iter().map(|r| stats.normalize_target(r.predicted)).collect();
    eval.msle_normalized = Some(msle_guarded(&actual, &predicted)?);
    Ok(eval)
}

/// The naive `ŷ(t) = y(t - 1)` forecaster, needing no model.
pub fn persistence(rows: &[FeatureRow], cadence: Duration) -> Result<Evaluation, ForecastError> {
    let mut residuals = Vec::new();
    for (a, b) in contiguous_runs(rows, cadence) {
        for i in a + 1..b {
            residuals.push(Residual {
                timestamp: rows[i].timestamp,
                actual: rows[i].target,
                predicted: rows[i - 1].target,
            });
        }
    }
    summarize(ModelKind::Persistence, residuals)
}

fn summarize(kind: ModelKind, residuals: Vec<Residual>) -> Result<Evaluation, ForecastError> {
    if residuals.is_empty() {
        return Err(ForecastError::InsufficientHistory {
            need: kind.warm_up(0) + 1,
            got: 0,
        });
    }
    let mae_raw = residuals.iter().map(|r| r.residual().abs()).sum::<f64>() / residuals.len() as f64;
    Ok(Evaluation {
        kind,
        mae_raw,
        msle_normalized: None,
        residuals,
    })
}
