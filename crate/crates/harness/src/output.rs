//! Experiment artifacts: a long-format CSV trace and a run manifest.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    /// Seconds since the start of the run.
    pub t: f64,
    pub metric: String,
    pub series: String,
    pub value: f64,
}

/// Rows of `t,metric,series,value`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    rows: Vec<Row>,
}

impl Trace {
    pub const HEADER: [&'static str; 4] = ["t", "metric", "series", "value"];

    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: f64, metric: &str, series: impl Into<String>, value: f64) {
        self.rows.push(Row { t, metric: metric.to_string(), series: series.into(), value });
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn metric<'a>(&'a self, metric: &'a str) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows.iter().filter(move |r| r.metric == metric)
    }

    pub fn series<'a>(&'a self, metric: &'a str, series: &'a str) -> impl Iterator<Item = &'a Row> + 'a {
        self.metric(metric).filter(move |r| r.series == series)
    }

    pub fn to_writer<W: io::Write>(&self, w: W) -> Result<(), OutputError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::HEADER)?;
        for r in &self.rows {
            out.write_record([format!("{:.3}", r.t), r.metric.clone(), r.series.clone(), format!("{}", r.value)])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.to_writer(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8 csv")
    }

    pub fn read_csv(path: &Path) -> Result<Self, OutputError> {
        let mut rd = csv::Reader::from_path(path)?;
        let mut trace = Trace::new();
        for rec in rd.records() {
            let rec = rec?;
            let num = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
            trace.push(num(0), rec.get(1).unwrap_or_default(), rec.get(2).unwrap_or_default(), num(3));
        }
        Ok(trace)
    }
}

/// Seed, configuration and summary of a run, as `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Writes `<stem>.csv` and `<stem>.manifest` into `dir`.
pub fn write_run(
    dir: &Path,
    stem: &str,
    trace: &Trace,
    manifest: &Manifest,
) -> Result<(PathBuf, PathBuf), OutputError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| OutputError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let man_path = dir.join(format!("{stem}.manifest"));
    let f = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    trace.to_writer(io::BufWriter::new(f))?;
    fs::write(&man_path, manifest.render()).map_err(io_err(&man_path))?;
    Ok((csv_path, man_path))
}

/// Nearest-rank percentile of an unsorted sample, `q` in `[0, 1]`.
pub fn percentile<T: Copy + Ord>(sample: &mut [T], q: f64) -> Option<T> {
    if sample.is_empty() {
        return None;
    }
    sample.sort_unstable();
    let rank = ((q * sample.len() as f64).ceil() as usize).clamp(1, sample.len());
    Some(sample[rank - 1])
}
