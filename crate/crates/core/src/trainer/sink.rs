use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::metrics::MetricSet;

/// Destination for hook rows.
pub trait MetricSink {
    fn record(&mut self, hook: &str, epoch: u64, step: Option<u64>, metrics: &MetricSet) -> Result<()>;

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub hook: String,
    pub epoch: u64,
    pub step: Option<u64>,
    pub metrics: MetricSet,
}

/// Keeps rows in memory; used by tests and the Python bindings.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub rows: Vec<Row>,
}

impl MemorySink {
    pub fn hook<'a>(&'a self, hook: &'a str) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows.iter().filter(move |r| r.hook == hook)
    }

    /// `(epoch, value)` for every row of `hook` carrying a numeric `key`.
    pub fn series(&self, hook: &str, key: &str) -> Vec<(u64, f64)> {
        self.hook(hook)
            .filter_map(|r| r.metrics.num(key).map(|v| (r.epoch, v)))
            .collect()
    }
}

impl MetricSink for MemorySink {
    fn record(&mut self, hook: &str, epoch: u64, step: Option<u64>, metrics: &MetricSet) -> Result<()> {
        self.rows.push(Row {
            hook: hook.to_string(),
            epoch,
            step,
            metrics: metrics.clone(),
        });
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricSink for NullSink {
    fn record(&mut self, _: &str, _: u64, _: Option<u64>, _: &MetricSet) -> Result<()> {
        Ok(())
    }
}

/// Serializes one row as a JSON object with `epoch` (and `step`) first.
pub fn row_json(epoch: u64, step: Option<u64>, metrics: &MetricSet) -> Value {
    let mut obj = Map::new();
    obj.insert("epoch".into(), Value::from(epoch));
    if let Some(s) = step {
        obj.insert("step".into(), Value::from(s));
    }
    for (k, v) in &metrics.0 {
        obj.insert(k.clone(), serde_json::to_value(v).expect("metric value serializes"));
    }
    Value::Object(obj)
}

/// `<dir>/<hook>.jsonl` streams plus `<hook>.csv` mirrors rebuilt on flush.
pub struct FileSink {
    dir: PathBuf,
    writers: BTreeMap<String, BufWriter<File>>,
}

impl FileSink {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(FileSink {
            dir: dir.to_path_buf(),
            writers: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn jsonl_files(&self) -> Result<Vec<(String, PathBuf)>> {
        let mut out = Vec::new();
        let entries = fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                out.push((stem, path));
            }
        }
        out.sort();
        Ok(out)
    }

    /// Byte length of every stream, for checkpoint bookkeeping.
    pub fn lengths(&mut self) -> Result<BTreeMap<String, u64>> {
        self.flush_streams()?;
        let mut out = BTreeMap::new();
        for (hook, path) in self.jsonl_files()? {
            let len = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
            out.insert(hook, len);
        }
        Ok(out)
    }

    /// Rolls every stream back to the recorded lengths; streams not listed
    /// are removed along with their CSV mirrors.
    pub fn truncate_to(&mut self, lengths: &BTreeMap<String, u64>) -> Result<()> {
        self.writers.clear();
        for (hook, path) in self.jsonl_files()? {
            match lengths.get(&hook) {
                Some(&len) => {
                    let f = OpenOptions::new()
                        .write(true)
                        .open(&path)
                        .map_err(|e| Error::io(&path, e))?;
                    let have = f.metadata().map_err(|e| Error::io(&path, e))?.len();
                    if have < len {
                        return Err(Error::format(
                            &path,
                            format!("stream is {have} bytes, checkpoint expects {len}"),
                        ));
                    }
                    f.set_len(len).map_err(|e| Error::io(&path, e))?;
                }
                None => {
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                    let csv = path.with_extension("csv");
                    if csv.exists() {
                        fs::remove_file(&csv).map_err(|e| Error::io(&csv, e))?;
                    }
                }
            }
        }
        self.rebuild_csv()
    }

    fn flush_streams(&mut self) -> Result<()> {
        for (hook, w) in &mut self.writers {
            w.flush()
                .map_err(|e| Error::io(self.dir.join(format!("{hook}.jsonl")), e))?;
        }
        Ok(())
    }

    fn rebuild_csv(&self) -> Result<()> {
        for (_, path) in self.jsonl_files()? {
            jsonl_to_csv(&path, &path.with_extension("csv"))?;
        }
        Ok(())
    }
}

impl MetricSink for FileSink {
    fn record(&mut self, hook: &str, epoch: u64, step: Option<u64>, metrics: &MetricSet) -> Result<()> {
        if !self.writers.contains_key(hook) {
            let path = self.dir.join(format!("{hook}.jsonl"));
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            self.writers.insert(hook.to_string(), BufWriter::new(f));
        }
        let w = self.writers.get_mut(hook).expect("writer just inserted");
        let line = serde_json::to_string(&row_json(epoch, step, metrics)).expect("row serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(self.dir.join(format!("{hook}.jsonl")), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.flush_streams()?;
        self.rebuild_csv()
    }
}

/// Reads a JSONL metric stream.
pub fn read_jsonl(path: &Path) -> Result<Vec<Map<String, Value>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(m)) => rows.push(m),
            Ok(_) => return Err(Error::format(path, format!("line {}: not a JSON object", i + 1))),
            Err(e) => return Err(Error::format(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(rows)
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        other => other.to_string(),
    }
}

/// Writes the CSV mirror: the header is the union of keys in first-seen
/// order; absent keys and nulls are empty cells.
pub fn jsonl_to_csv(jsonl: &Path, csv_path: &Path) -> Result<()> {
    let rows = read_jsonl(jsonl)?;
    let mut header: Vec<String> = Vec::new();
    for r in &rows {
        for k in r.keys() {
            if !header.contains(k) {
                header.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| Error::format(csv_path, e.to_string()))?;
    w.write_record(&header)
        .map_err(|e| Error::format(csv_path, e.to_string()))?;
    for r in &rows {
        let cells = header.iter().map(|k| r.get(k).map(csv_cell).unwrap_or_default());
        w.write_record(cells)
            .map_err(|e| Error::format(csv_path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))
}

/// Numeric value of `key` in a parsed row.
pub fn row_num(row: &Map<String, Value>, key: &str) -> Option<f64> {
    row.get(key).and_then(Value::as_f64)
}
