//! File formats: dataset CSV with JSON sidecar, run manifests, training
//! traces, gradient-check tables.
//!
//! All numeric output is printed with 17 significant digits so files
//! round-trip losslessly and reruns diff byte-identically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgrpf_core::learn::TrainTrace;
use sgrpf_core::Dataset;

use crate::CliError;

/// Full-precision decimal form of an f64 (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Dataset CSV: header `t,y`, one row per observation, t starting at 1.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let mut out = String::from("t,y\n");
    for (i, &y) in data.y.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, fmt_f64(y)));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<Dataset, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "t,y" => {}
        other => {
            return Err(CliError::Usage(format!(
                "expected header 't,y' in {}, found {:?}",
                path.display(),
                other
            )))
        }
    }
    let mut y = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let _t = parts.next();
        let value = parts
            .next()
            .ok_or_else(|| CliError::Usage(format!("malformed row {} in csv", lineno + 2)))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|e| CliError::Usage(format!("bad value on row {}: {e}", lineno + 2)))?;
        y.push(v);
    }
    Dataset::new(y).map_err(|e| CliError::Usage(e.to_string()))
}

/// Sidecar describing how a synthetic dataset was generated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub model: String,
    pub theta: Vec<f64>,
    pub seed: u64,
    pub t: usize,
}

pub fn meta_path_for(data_path: &Path) -> PathBuf {
    let stem = data_path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    data_path.with_file_name(format!("{stem}_meta.json"))
}

pub fn write_meta(path: &Path, meta: &DatasetMeta) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Option<DatasetMeta> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// Written before any results so a crashed run still leaves its config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub artifacts: Vec<String>,
    pub version: String,
    pub timestamp_unix: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, artifacts: &[&str]) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

/// Training trace CSV with one row per epoch.
pub fn write_trace_csv(path: &Path, trace: &TrainTrace) -> Result<(), CliError> {
    let dim = trace.records.first().map(|r| r.theta.len()).unwrap_or(0);
    let mut file = fs::File::create(path)?;
    let theta_cols: Vec<String> = (1..=dim).map(|k| format!("theta{k}")).collect();
    writeln!(
        file,
        "epoch,{},train_logz,test_logz,grad_norm,l1_error,seconds",
        theta_cols.join(",")
    )?;
    for r in &trace.records {
        let theta: Vec<String> = r.theta.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(
            file,
            "{},{},{},{},{},{},{}",
            r.epoch,
            theta.join(","),
            fmt_f64(r.train_logz),
            fmt_f64(r.test_logz),
            fmt_f64(r.grad_norm),
            fmt_f64(r.l1_error),
            fmt_f64(r.seconds),
        )?;
    }
    Ok(())
}

/// One gradient-comparison row.
#[derive(Clone, Debug)]
pub struct GradCheckRow {
    pub seed: u64,
    pub estimator_a: String,
    pub estimator_b: String,
    pub max_rel_diff: f64,
    pub pass: bool,
}

pub fn write_gradcheck_csv(path: &Path, rows: &[GradCheckRow]) -> Result<(), CliError> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "seed,estimator_a,estimator_b,max_rel_diff,pass")?;
    for r in rows {
        writeln!(
            file,
            "{},{},{},{},{}",
            r.seed,
            r.estimator_a,
            r.estimator_b,
            fmt_f64(r.max_rel_diff),
            r.pass
        )?;
    }
    Ok(())
}

/// Timing rows for the benchmark command.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub label: String,
    pub n: usize,
    pub t: usize,
    pub reps: usize,
    pub mean_seconds: f64,
    pub sd_seconds: f64,
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<(), CliError> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "label,n,t,reps,mean_seconds,sd_seconds")?;
    for r in rows {
        writeln!(
            file,
            "{},{},{},{},{},{}",
            r.label,
            r.n,
            r.t,
            r.reps,
            fmt_f64(r.mean_seconds),
            fmt_f64(r.sd_seconds)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_formatting_round_trips() {
        for &x in &[0.1, -3.7e-123, 2.5e300, 1.0 / 3.0, 0.0] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn dataset_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let data = Dataset::new(vec![0.1, -2.5, 1.0 / 3.0]).unwrap();
        write_dataset_csv(&path, &data).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(back.y, data.y);
    }

    #[test]
    fn meta_sidecar_path() {
        assert_eq!(
            meta_path_for(Path::new("/tmp/run1/data.csv")),
            PathBuf::from("/tmp/run1/data_meta.json")
        );
    }
}
