//! Embedded time-series store.
//!
//! Each series lives in `<root>/<device_id>/<metric>/`. Appends go to
//! `wal.log`; once the log grows past a threshold the whole series is written
//! as a sorted, checksummed segment (`NNNNNNNN.seg`) and the log is reset.
//! Everything is also held in memory, so queries never touch the disk.
//! See [`format`] for the byte layouts.

pub mod format;
mod csvio;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use wallet_core::reading::{is_valid_device_id, is_valid_metric, SeriesPoint};
use wallet_core::Timestamp;

use format::{decode_segment, decode_wal, encode_record, encode_segment, wal_header, WalTail, WAL_HEADER_LEN};

pub use csvio::{export_csv, parse_csv, ImportSummary};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store is closed")]
    Closed,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("invalid series key: {0}")]
    InvalidKey(String),
    #[error("invalid range: from {from} is after to {to}")]
    InvalidRange { from: Timestamp, to: Timestamp },
    #[error("value {0} is not finite")]
    NonFinite(f64),
    #[error("csv: {0}")]
    Csv(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeriesKey {
    pub device_id: String,
    pub metric: String,
}

impl SeriesKey {
    pub fn new(device_id: impl Into<String>, metric: impl Into<String>) -> Result<Self, StoreError> {
        let key = SeriesKey {
            device_id: device_id.into(),
            metric: metric.into(),
        };
        if !is_valid_device_id(&key.device_id) {
            return Err(StoreError::InvalidKey(format!("device id {:?}", key.device_id)));
        }
        if !is_valid_metric(&key.metric) {
            return Err(StoreError::InvalidKey(format!("metric {:?}", key.metric)));
        }
        Ok(key)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// fsync the log after every append. Without it an acknowledged point
    /// survives a process crash but not a power loss.
    pub fsync: bool,
    /// Log records that trigger compaction into a segment.
    pub compact_threshold: usize,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            fsync: false,
            compact_threshold: 8192,
        }
    }
}

struct Writer {
    wal: File,
    records: usize,
    next_segment: u64,
}

struct Series {
    key: SeriesKey,
    dir: PathBuf,
    points: RwLock<BTreeMap<i64, f64>>,
    writer: Mutex<Writer>,
}

pub struct Store {
    root: PathBuf,
    opts: StoreOptions,
    series: RwLock<HashMap<SeriesKey, Arc<Series>>>,
    closed: AtomicBool,
}

fn segment_number(path: &Path) -> Option<u64> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".seg")?.parse().ok()
}

fn sync_dir(dir: &Path) -> Result<(), StoreError> {
    File::open(dir).and_then(|d| d.sync_all()).map_err(io_err(dir))
}

impl Series {
    fn create(root: &Path, key: SeriesKey) -> Result<Series, StoreError> {
        let dir = root.join(&key.device_id).join(&key.metric);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join("wal.log");
        let mut wal = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        wal.write_all(&wal_header()).map_err(io_err(&path))?;
        Ok(Series {
            key,
            dir,
            points: RwLock::new(BTreeMap::new()),
            writer: Mutex::new(Writer {
                wal,
                records: 0,
                next_segment: 1,
            }),
        })
    }

    /// Segments in number order, then the log; later writes win.
    fn load(dir: PathBuf, key: SeriesKey) -> Result<Series, StoreError> {
        let mut segments = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.extension().map_or(false, |e| e == "tmp") {
                // An interrupted compaction; the log still holds its points.
                fs::remove_file(&path).map_err(io_err(&path))?;
            } else if let Some(n) = segment_number(&path) {
                segments.push((n, path));
            }
        }
        segments.sort();
        let mut points = BTreeMap::new();
        for (_, path) in &segments {
            let bytes = fs::read(path).map_err(io_err(path))?;
            let (seg_key, pts) = decode_segment(&bytes).map_err(|reason| StoreError::Corrupt {
                path: path.clone(),
                reason,
            })?;
            if seg_key != key {
                return Err(StoreError::Corrupt {
                    path: path.clone(),
                    reason: format!("segment belongs to {}/{}", seg_key.device_id, seg_key.metric),
                });
            }
            points.extend(pts);
        }

        let path = dir.join("wal.log");
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let (records, tail) = decode_wal(&bytes).map_err(|reason| StoreError::Corrupt {
            path: path.clone(),
            reason,
        })?;
        let mut wal = OpenOptions::new().create(true).read(true).write(true).open(&path).map_err(io_err(&path))?;
        if let WalTail::Torn { valid_len } = tail {
            log::warn!("{}: dropping torn log tail after {} records", path.display(), records.len());
            wal.set_len(valid_len as u64).map_err(io_err(&path))?;
            if valid_len == 0 {
                wal.write_all(&wal_header()).map_err(io_err(&path))?;
            }
        }
        wal.seek(SeekFrom::End(0)).map_err(io_err(&path))?;
        let n = records.len();
        points.extend(records);
        Ok(Series {
            key,
            dir,
            points: RwLock::new(points),
            writer: Mutex::new(Writer {
                wal,
                records: n,
                next_segment: segments.last().map_or(1, |(n, _)| n + 1),
            }),
        })
    }

    fn append(&self, batch: &[(i64, f64)], opts: &StoreOptions) -> Result<(), StoreError> {
        let mut w = self.writer.lock().expect("series writer poisoned");
        let mut buf = Vec::with_capacity(batch.len() * format::WAL_RECORD_LEN);
        for &(t, v) in batch {
            encode_record(t, v, &mut buf);
        }
        let path = self.dir.join("wal.log");
        w.wal.write_all(&buf).map_err(io_err(&path))?;
        if opts.fsync {
            w.wal.sync_data().map_err(io_err(&path))?;
        }
        w.records += batch.len();
        self.points.write().expect("series points poisoned").extend(batch.iter().copied());
        if w.records >= opts.compact_threshold {
            self.compact_locked(&mut w)?;
        }
        Ok(())
    }

    fn compact_locked(&self, w: &mut Writer) -> Result<(), StoreError> {
        let bytes = {
            let points = self.points.read().expect("series points poisoned");
            encode_segment(&self.key, points.iter().map(|(&t, &v)| (t, v)))
        };
        let n = w.next_segment;
        let final_path = self.dir.join(format!("{n:08}.seg"));
        let tmp = self.dir.join(format!("{n:08}.seg.tmp"));
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(&bytes).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &final_path).map_err(io_err(&final_path))?;
        sync_dir(&self.dir)?;
        // The new segment supersedes every older one and the whole log.
        for entry in fs::read_dir(&self.dir).map_err(io_err(&self.dir))? {
            let path = entry.map_err(io_err(&self.dir))?.path();
            if segment_number(&path).map_or(false, |k| k < n) {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        let wal_path = self.dir.join("wal.log");
        w.wal.set_len(WAL_HEADER_LEN as u64).map_err(io_err(&wal_path))?;
        w.wal.seek(SeekFrom::End(0)).map_err(io_err(&wal_path))?;
        w.wal.sync_all().map_err(io_err(&wal_path))?;
        w.records = 0;
        w.next_segment = n + 1;
        Ok(())
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>, opts: StoreOptions) -> Result<Store, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let mut series = HashMap::new();
        for dev in fs::read_dir(&root).map_err(io_err(&root))? {
            let dev = dev.map_err(io_err(&root))?;
            let dev_name = dev.file_name().to_string_lossy().into_owned();
            if !dev.path().is_dir() || !is_valid_device_id(&dev_name) {
                continue;
            }
            for m in fs::read_dir(dev.path()).map_err(io_err(&dev.path()))? {
                let m = m.map_err(io_err(&dev.path()))?;
                let metric = m.file_name().to_string_lossy().into_owned();
                if !m.path().is_dir() || !is_valid_metric(&metric) {
                    continue;
                }
                let key = SeriesKey::new(dev_name.clone(), metric)?;
                let s = Series::load(m.path(), key.clone())?;
                series.insert(key, Arc::new(s));
            }
        }
        log::info!("opened store at {} with {} series", root.display(), series.len());
        Ok(Store {
            root,
            opts,
            series: RwLock::new(series),
            closed: AtomicBool::new(false),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn check_open(&self) -> Result<(), StoreError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(StoreError::Closed);
        }
        Ok(())
    }

    fn get(&self, key: &SeriesKey) -> Option<Arc<Series>> {
        self.series.read().expect("series map poisoned").get(key).cloned()
    }

    fn get_or_create(&self, key: &SeriesKey) -> Result<Arc<Series>, StoreError> {
        if let Some(s) = self.get(key) {
            return Ok(s);
        }
        let mut map = self.series.write().expect("series map poisoned");
        if let Some(s) = map.get(key) {
            return Ok(s.clone());
        }
        let s = Arc::new(Series::create(&self.root, key.clone())?);
        map.insert(key.clone(), s.clone());
        Ok(s)
    }

    pub fn append(&self, key: &SeriesKey, point: SeriesPoint) -> Result<(), StoreError> {
        self.append_many(key, &[point])
    }

    /// Appends in order; a repeated timestamp keeps the later value.
    pub fn append_many(&self, key: &SeriesKey, points: &[SeriesPoint]) -> Result<(), StoreError> {
        self.check_open()?;
        if let Some(p) = points.iter().find(|p| !p.value.is_finite()) {
            return Err(StoreError::NonFinite(p.value));
        }
        if points.is_empty() {
            return Ok(());
        }
        let batch: Vec<(i64, f64)> = points.iter().map(|p| (p.timestamp.micros(), p.value)).collect();
        self.get_or_create(key)?.append(&batch, &self.opts)
    }

    /// Points with `from <= t < to`, ascending.
    pub fn query(&self, key: &SeriesKey, from: Timestamp, to: Timestamp) -> Result<Vec<SeriesPoint>, StoreError> {
        self.check_open()?;
        if from > to {
            return Err(StoreError::InvalidRange { from, to });
        }
        let Some(s) = self.get(key) else { return Ok(Vec::new()) };
        let points = s.points.read().expect("series points poisoned");
        Ok(points
            .range(from.micros()..to.micros())
            .map(|(&t, &v)| SeriesPoint::new(Timestamp::from_micros(t), v))
            .collect())
    }

    /// Every point of the series, ascending.
    pub fn query_all(&self, key: &SeriesKey) -> Result<Vec<SeriesPoint>, StoreError> {
        self.check_open()?;
        let Some(s) = self.get(key) else { return Ok(Vec::new()) };
        let points = s.points.read().expect("series points poisoned");
        Ok(points.iter().map(|(&t, &v)| SeriesPoint::new(Timestamp::from_micros(t), v)).collect())
    }

    pub fn latest(&self, key: &SeriesKey) -> Result<Option<SeriesPoint>, StoreError> {
        self.check_open()?;
        let Some(s) = self.get(key) else { return Ok(None) };
        let points = s.points.read().expect("series points poisoned");
        Ok(points.last_key_value().map(|(&t, &v)| SeriesPoint::new(Timestamp::from_micros(t), v)))
    }

    pub fn len(&self, key: &SeriesKey) -> usize {
        self.get(key).map_or(0, |s| s.points.read().expect("series points poisoned").len())
    }

    pub fn keys(&self) -> Vec<SeriesKey> {
        let mut keys: Vec<SeriesKey> = self.series.read().expect("series map poisoned").keys().cloned().collect();
        keys.sort();
        keys
    }

    pub fn metrics(&self, device_id: &str) -> Vec<String> {
        self.keys().into_iter().filter(|k| k.device_id == device_id).map(|k| k.metric).collect()
    }

    /// Writes the series out as a fresh segment and resets its log.
    pub fn compact(&self, key: &SeriesKey) -> Result<(), StoreError> {
        self.check_open()?;
        if let Some(s) = self.get(key) {
            let mut w = s.writer.lock().expect("series writer poisoned");
            s.compact_locked(&mut w)?;
        }
        Ok(())
    }

    /// Flushes every log to disk and rejects further operations.
    pub fn close(&self) -> Result<(), StoreError> {
        if self.closed.swap(true, Ordering::AcqRel) {
            return Ok(());
        }
        for s in self.series.read().expect("series map poisoned").values() {
            let w = s.writer.lock().expect("series writer poisoned");
            let path = s.dir.join("wal.log");
            w.wal.sync_all().map_err(io_err(&path))?;
        }
        Ok(())
    }
}
