//! Append-only per-hive record logs.
//!
//! Each hive owns one file, `<hive_id>.jsonl`, holding one JSON object per
//! line. A record is acknowledged only after its full line, newline included,
//! has been written and flushed to disk. A crash can therefore leave at most
//! one incomplete final line; the writer truncates it away on open and
//! readers ignore it.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOG_EXTENSION: &str = "jsonl";
pub const CSV_HEADER: &str = "hive_id,seq,ts_ms,f1_g,f2_g,f3_g,f4_g,total_g,x_mm,y_mm";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("out-of-order seq {seq} for hive {hive_id}: last stored seq is {last}")]
    OutOfOrderSeq { hive_id: String, seq: u64, last: u64 },
    #[error("unknown hive {0}")]
    UnknownHive(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid range: t0 {t0} > t1 {t1}")]
    InvalidRange { t0: u64, t1: u64 },
    #[error("corrupt log {path} at line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("storage full: {0}")]
    StorageFull(String),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(String),
}

/// One persisted hub output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub hive_id: String,
    pub seq: u64,
    pub ts_ms: u64,
    pub cells_g: [f64; 4],
    pub total_g: f64,
    pub x_mm: f64,
    pub y_mm: f64,
}

impl Record {
    pub fn validate(&self) -> Result<(), StoreError> {
        let finite = self.cells_g.iter().chain([&self.total_g, &self.x_mm, &self.y_mm]).all(|v| v.is_finite());
        if !finite {
            return Err(StoreError::InvalidRecord(format!("seq {}: non-finite field", self.seq)));
        }
        if self.hive_id.is_empty() || self.hive_id.contains(['/', '\\', '\n']) || self.hive_id.starts_with('.') {
            return Err(StoreError::InvalidRecord(format!("bad hive id {:?}", self.hive_id)));
        }
        Ok(())
    }
}

/// Anything the hub can append records to.
pub trait RecordSink: Send {
    fn append(&mut self, record: &Record) -> Result<(), StoreError>;
}

/// Directory of per-hive logs.
#[derive(Debug, Clone)]
pub struct Store {
    dir: PathBuf,
}

impl Store {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self, hive_id: &str) -> PathBuf {
        self.dir.join(format!("{hive_id}.{LOG_EXTENSION}"))
    }

    /// Opens the single writer for a hive, repairing a torn tail.
    pub fn writer(&self, hive_id: &str) -> Result<HiveLog, StoreError> {
        HiveLog::open(self.log_path(hive_id), hive_id)
    }

    /// Hive ids with a log in this store, sorted.
    pub fn hives(&self) -> Result<Vec<String>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(LOG_EXTENSION) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.push(stem.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// All complete records of a hive, in seq order.
    pub fn read_all(&self, hive_id: &str) -> Result<Vec<Record>, StoreError> {
        let path = self.log_path(hive_id);
        if !path.exists() {
            return Err(StoreError::UnknownHive(hive_id.to_string()));
        }
        Ok(read_log(&path)?.records)
    }

    /// Records with `t0 <= ts_ms <= t1`, in seq order.
    pub fn query_range(&self, hive_id: &str, t0_ms: u64, t1_ms: u64) -> Result<Vec<Record>, StoreError> {
        if t0_ms > t1_ms {
            return Err(StoreError::InvalidRange { t0: t0_ms, t1: t1_ms });
        }
        Ok(self
            .read_all(hive_id)?
            .into_iter()
            .filter(|r| (t0_ms..=t1_ms).contains(&r.ts_ms))
            .collect())
    }
}

/// Parsed view of a log file.
#[derive(Debug, Clone, PartialEq)]
pub struct LogContents {
    pub records: Vec<Record>,
    /// Byte length of the complete-line prefix.
    pub valid_len: u64,
    /// Bytes after the last newline, if any.
    pub torn_tail: u64,
}

/// Reads a log without modifying it. An unterminated final line is ignored.
pub fn read_log(path: &Path) -> Result<LogContents, StoreError> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    parse_log(path, &buf)
}

fn parse_log(path: &Path, buf: &[u8]) -> Result<LogContents, StoreError> {
    let valid_len = buf.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut records: Vec<Record> = Vec::new();
    for (idx, line) in buf[..valid_len].split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let corrupt = |reason: String| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let rec: Record = serde_json::from_slice(line).map_err(|e| corrupt(e.to_string()))?;
        if let Some(prev) = records.last() {
            if rec.seq <= prev.seq {
                return Err(corrupt(format!("seq {} after {}", rec.seq, prev.seq)));
            }
        }
        records.push(rec);
    }
    Ok(LogContents {
        records,
        valid_len: valid_len as u64,
        torn_tail: (buf.len() - valid_len) as u64,
    })
}

/// Single writer for one hive's log.
#[derive(Debug)]
pub struct HiveLog {
    path: PathBuf,
    hive_id: String,
    file: File,
    last_seq: Option<u64>,
    len: usize,
    sync: bool,
}

impl HiveLog {
    pub fn open(path: impl Into<PathBuf>, hive_id: &str) -> Result<Self, StoreError> {
        let path = path.into();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let contents = parse_log(&path, &buf)?;
        if contents.torn_tail > 0 {
            log::warn!("{}: discarding {} bytes of torn final record", path.display(), contents.torn_tail);
            file.set_len(contents.valid_len)?;
            file.sync_all()?;
        }
        if let Some(other) = contents.records.iter().find(|r| r.hive_id != hive_id) {
            return Err(StoreError::Corrupt {
                path,
                line: 0,
                reason: format!("record for hive {} in log of {hive_id}", other.hive_id),
            });
        }
        Ok(Self {
            path,
            hive_id: hive_id.to_string(),
            file,
            last_seq: contents.records.last().map(|r| r.seq),
            len: contents.records.len(),
            sync: true,
        })
    }

    /// Skips `fsync` after each append. Writes are still flushed to the OS.
    pub fn without_sync(mut self) -> Self {
        self.sync = false;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> Option<u64> {
        self.last_seq
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn append(&mut self, record: &Record) -> Result<(), StoreError> {
        record.validate()?;
        if record.hive_id != self.hive_id {
            return Err(StoreError::InvalidRecord(format!(
                "record for hive {} appended to log of {}",
                record.hive_id, self.hive_id
            )));
        }
        if let Some(last) = self.last_seq {
            if record.seq <= last {
                return Err(StoreError::OutOfOrderSeq {
                    hive_id: self.hive_id.clone(),
                    seq: record.seq,
                    last,
                });
            }
        }
        let mut line = serde_json::to_vec(record).map_err(|e| StoreError::InvalidRecord(e.to_string()))?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(map_io)?;
        self.file.flush()?;
        if self.sync {
            self.file.sync_data().map_err(map_io)?;
        }
        self.last_seq = Some(record.seq);
        self.len += 1;
        Ok(())
    }
}

impl RecordSink for HiveLog {
    fn append(&mut self, record: &Record) -> Result<(), StoreError> {
        HiveLog::append(self, record)
    }
}

fn map_io(e: io::Error) -> StoreError {
    if e.kind() == io::ErrorKind::StorageFull {
        StoreError::StorageFull(e.to_string())
    } else {
        StoreError::Io(e)
    }
}

/// Formats a number with at most six decimals, trailing zeros trimmed.
pub fn format_decimal(v: f64) -> String {
    let mut s = format!("{v:.6}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

pub fn export_csv(records: &[Record]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{},{}", r.hive_id, r.seq, r.ts_ms);
        for v in r.cells_g.iter().chain([&r.total_g, &r.x_mm, &r.y_mm]) {
            out.push(',');
            out.push_str(&format_decimal(*v));
        }
        out.push('\n');
    }
    out
}

/// Parses text produced by [`export_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<Record>, StoreError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| StoreError::Csv(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(StoreError::Csv(format!("unexpected header {:?}", header)));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| StoreError::Csv(e.to_string()))?;
        let num = |i: usize| -> Result<f64, StoreError> {
            row[i].parse::<f64>().map_err(|e| StoreError::Csv(format!("column {i}: {e}")))
        };
        let int = |i: usize| -> Result<u64, StoreError> {
            row[i].parse::<u64>().map_err(|e| StoreError::Csv(format!("column {i}: {e}")))
        };
        out.push(Record {
            hive_id: row[0].to_string(),
            seq: int(1)?,
            ts_ms: int(2)?,
            cells_g: [num(3)?, num(4)?, num(5)?, num(6)?],
            total_g: num(7)?,
            x_mm: num(8)?,
            y_mm: num(9)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn rec(seq: u64, ts_ms: u64) -> Record {
        Record {
            hive_id: "h1".into(),
            seq,
            ts_ms,
            cells_g: [1.0, 2.5, 3.25, 4.125],
            total_g: 10.875,
            x_mm: 123.456789,
            y_mm: 0.0,
        }
    }

    #[test]
    fn append_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let mut w = store.writer("h1").unwrap();
        w.append(&rec(0, 0)).unwrap();
        w.append(&rec(1, 10)).unwrap();
        let err = w.append(&rec(1, 20)).unwrap_err();
        assert!(matches!(err, StoreError::OutOfOrderSeq { seq: 1, last: 1, .. }));
        assert_eq!(store.read_all("h1").unwrap().len(), 2);
    }

    #[test]
    fn rejects_foreign_and_invalid_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = Store::open(dir.path()).unwrap().writer("h1").unwrap();
        let mut r = rec(0, 0);
        r.hive_id = "h2".into();
        assert!(matches!(w.append(&r), Err(StoreError::InvalidRecord(_))));
        let mut r = rec(0, 0);
        r.x_mm = f64::NAN;
        assert!(matches!(w.append(&r), Err(StoreError::InvalidRecord(_))));
    }

    #[test]
    fn torn_tail_dropped_on_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        {
            let mut w = store.writer("h1").unwrap();
            for s in 0..5 {
                w.append(&rec(s, s * 100)).unwrap();
            }
        }
        // a crash halfway through writing seq 5
        let line = serde_json::to_string(&rec(5, 500)).unwrap();
        let mut f = OpenOptions::new().append(true).open(store.log_path("h1")).unwrap();
        f.write_all(&line.as_bytes()[..line.len() / 2]).unwrap();
        drop(f);

        let seen = store.read_all("h1").unwrap();
        assert_eq!(seen.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);

        let mut w = store.writer("h1").unwrap();
        assert_eq!(w.last_seq(), Some(4));
        assert_eq!(w.len(), 5);
        w.append(&rec(5, 500)).unwrap();
        let contents = read_log(&store.log_path("h1")).unwrap();
        assert_eq!(contents.torn_tail, 0);
        assert_eq!(contents.records.len(), 6);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        fs::write(store.log_path("h1"), "{\"garbage\":1}\n").unwrap();
        assert!(matches!(store.writer("h1"), Err(StoreError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn reopen_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        for round in 0..3u64 {
            let mut w = store.writer("h1").unwrap().without_sync();
            for s in 0..7 {
                w.append(&rec(round * 7 + s, 0)).unwrap();
            }
        }
        assert_eq!(store.read_all("h1").unwrap().len(), 21);
        assert_eq!(store.hives().unwrap(), vec!["h1".to_string()]);
    }

    #[test]
    fn query_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let mut w = store.writer("h1").unwrap().without_sync();
        for s in 0..10 {
            w.append(&rec(s, s * 100)).unwrap();
        }
        assert_eq!(store.query_range("h1", 0, u64::MAX).unwrap().len(), 10);
        assert!(store.query_range("h1", 1001, 2000).unwrap().is_empty());
        let seqs: Vec<u64> = store.query_range("h1", 200, 500).unwrap().iter().map(|r| r.seq).collect();
        assert_eq!(seqs, vec![2, 3, 4, 5]);
        assert!(matches!(store.query_range("nope", 0, 1), Err(StoreError::UnknownHive(_))));
        assert!(matches!(store.query_range("h1", 5, 1), Err(StoreError::InvalidRange { .. })));
    }

    #[test]
    fn csv_shapes() {
        assert_eq!(export_csv(&[]), format!("{CSV_HEADER}\n"));
        let one = export_csv(&[rec(3, 86_400_000)]);
        assert_eq!(one.lines().count(), 2);
        assert_eq!(one.lines().nth(1).unwrap(), "h1,3,86400000,1,2.5,3.25,4.125,10.875,123.456789,0");
    }

    #[test]
    fn decimal_formatting() {
        assert_eq!(format_decimal(250.0), "250");
        assert_eq!(format_decimal(26.5), "26.5");
        assert_eq!(format_decimal(0.1234567), "0.123457");
        assert_eq!(format_decimal(-0.0000001), "0");
        assert_eq!(format_decimal(-3.5), "-3.5");
    }

    proptest! {
        #[test]
        fn csv_round_trip(values in prop::collection::vec(prop::array::uniform7(-1e5f64..1e5), 0..20)) {
            let records: Vec<Record> = values
                .iter()
                .enumerate()
                .map(|(i, v)| Record {
                    hive_id: "hive-9".into(),
                    seq: i as u64,
                    ts_ms: i as u64 * 3,
                    cells_g: [v[0], v[1], v[2], v[3]],
                    total_g: v[4],
                    x_mm: v[5],
                    y_mm: v[6],
                })
                .collect();
            let back = parse_csv(&export_csv(&records)).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in back.iter().zip(&records) {
                prop_assert_eq!(a.seq, b.seq);
                prop_assert_eq!(a.ts_ms, b.ts_ms);
                let pairs = a.cells_g.iter().chain([&a.total_g, &a.x_mm, &a.y_mm])
                    .zip(b.cells_g.iter().chain([&b.total_g, &b.x_mm, &b.y_mm]));
                for (x, y) in pairs {
                    prop_assert!((x - y).abs() <= 1e-6);
                }
            }
        }
    }
}
