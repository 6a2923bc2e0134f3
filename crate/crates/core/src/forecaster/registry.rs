use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::features::NormStats;
use crate::neural::model_file::{ffnn_from_str, ffnn_to_string, lstm_from_str, lstm_to_string, NormRef};
use crate::time::Duration;

use super::{ForecastError, ForecastModels, TestMetrics, TrainConfig, TrainOutcome, TrainingHistory};

const CURRENT: &str = "CURRENT";
const NORM_FILE: &str = "norm.json";

/// Contents of `meta.json` for one published version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub version: String,
    pub norm_fingerprint: String,
    pub lookback: usize,
    pub cadence_mins: i64,
    pub ensemble_weight: f64,
    pub split: [usize; 3],
    pub metrics: TestMetrics,
    pub config: TrainConfig,
}

/// Versioned model directories under one root, plus a `CURRENT` pointer.
#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

fn parse_version(name: &str) -> Option<u64> {
    name.strip_prefix('v')?.parse().ok()
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), ForecastError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data always serializes")
}

fn history_csv(ffnn: &TrainingHistory, lstm: &TrainingHistory) -> Result<Vec<u8>, ForecastError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| ForecastError::Registry(e.to_string());
    w.write_record(["model", "epoch", "train_msle", "val_msle", "val_mae"]).map_err(err)?;
    for (name, h) in [("ffnn", ffnn), ("lstm", lstm)] {
        for e in &h.epochs {
            w.write_record([
                name.to_owned(),
                e.epoch.to_string(),
                e.train_msle.to_string(),
                e.val_msle.to_string(),
                e.val_mae.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.into_inner().map_err(|e| ForecastError::Registry(e.to_string()))
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Registry, ForecastError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Registry { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn versions(&self) -> Result<Vec<u64>, ForecastError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                if let Some(v) = entry.file_name().to_str().and_then(parse_version) {
                    out.push(v);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Writes a new version and makes it current. Returns its name.
    pub fn publish(&self, outcome: &TrainOutcome, cfg: &TrainConfig) -> Result<String, ForecastError> {
        let next = self.versions()?.last().map_or(1, |v| v + 1);
        let version = format!("v{next}");
        let staging = self.root.join(format!(".staging-{version}"));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;

        let m = &outcome.models;
        let norm_ref = NormRef {
            file: NORM_FILE.into(),
            fingerprint: m.norm.fingerprint(),
        };
        let info = ModelInfo {
            version: version.clone(),
            norm_fingerprint: norm_ref.fingerprint.clone(),
            lookback: m.lookback,
            cadence_mins: cfg.cadence_mins,
            ensemble_weight: m.ensemble_weight,
            split: outcome.split,
            metrics: outcome.metrics,
            config: cfg.clone(),
        };
        fs::write(staging.join("ffnn.model"), ffnn_to_string(&m.ffnn, &norm_ref))?;
        fs::write(staging.join("lstm.model"), lstm_to_string(&m.lstm, &norm_ref))?;
        fs::write(staging.join(NORM_FILE), json(&m.norm))?;
        fs::write(staging.join("meta.json"), json(&info))?;
        fs::write(staging.join("history.csv"), history_csv(&outcome.ffnn_history, &outcome.lstm_history)?)?;
        fs::rename(&staging, self.root.join(&version))?;
        self.set_current(&version)?;
        Ok(version)
    }

    pub fn set_current(&self, version: &str) -> Result<(), ForecastError> {
        if !self.root.join(version).is_dir() {
            return Err(ForecastError::Registry(format!("unknown version {version}")));
        }
        write_atomic(&self.root.join(CURRENT), version.as_bytes())
    }

    pub fn current(&self) -> Result<Option<String>, ForecastError> {
        match fs::read_to_string(self.root.join(CURRENT)) {
            Ok(s) => Ok(Some(s.trim().to_owned())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn info(&self, version: &str) -> Result<ModelInfo, ForecastError> {
        let text = fs::read_to_string(self.root.join(version).join("meta.json"))?;
        serde_json::from_str(&text).map_err(|e| ForecastError::Registry(format!("{version}/meta.json: {e}")))
    }

    pub fn load(&self, version: &str) -> Result<ForecastModels, ForecastError> {
        let dir = self.root.join(version);
        if !dir.is_dir() {
            return Err(ForecastError::Registry(format!("unknown version {version}")));
        }
        let info = self.info(version)?;
        let norm: NormStats = serde_json::from_str(&fs::read_to_string(dir.join(NORM_FILE))?)
            .map_err(|e| ForecastError::Registry(format!("{version}/{NORM_FILE}: {e}")))?;
        let got = norm.fingerprint();
        let (ffnn, ffnn_ref) = ffnn_from_str(&fs::read_to_string(dir.join("ffnn.model"))?)?;
        let (lstm, lstm_ref) = lstm_from_str(&fs::read_to_string(dir.join("lstm.model"))?)?;
        for expected in [&info.norm_fingerprint, &ffnn_ref.fingerprint, &lstm_ref.fingerprint] {
            if *expected != got {
                return Err(ForecastError::StatsMismatch {
                    expected: expected.clone(),
                    got,
                });
            }
        }
        Ok(ForecastModels {
            version: version.to_owned(),
            ffnn,
            lstm,
            norm,
            lookback: info.lookback,
            cadence: Duration::from_mins(info.cadence_mins),
            ensemble_weight: info.ensemble_weight,
        })
    }

    pub fn load_current(&self) -> Result<ForecastModels, ForecastError> {
        let v = self.current()?.ok_or(ForecastError::NoModel)?;
        self.load(&v)
    }

    /// Published versions in ascending order.
    pub fn list(&self) -> Result<Vec<ModelInfo>, ForecastError> {
        self.versions()?.into_iter().map(|v| self.info(&format!("v{v}"))).collect()
    }
}
