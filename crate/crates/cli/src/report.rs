//! Report persistence: a JSON envelope around each runner's payload, plus a
//! standalone payload file and optional CSV time series, all written
//! atomically (temp file in the target directory, then rename) so a crashed
//! run never leaves a partial file at a target path.
//!
//! Reproducibility contract: the payload file holds exactly the bytes that
//! must repeat for identical (config, seed, tool version). The envelope adds
//! wall-clock metrics, which legitimately differ between runs.
//!
//! File formats, in field order:
//! - `<stem>.json`: `tool`, `version`, `kind`, `seed`, `config_hash`,
//!   `config_echo`, `payload`, `metrics{wall_ms, events}`.
//! - `<stem>.payload.json`: the payload alone, pretty-printed, keys sorted.
//! - `<stem>-<series>.csv`: one header line, then one row per record; column
//!   names are listed in each runner's documentation.
//!
//! `<stem>` is `<kind>-seed<seed>-<first 8 hash hex digits>`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// One CSV time series produced by a runner.
pub struct Series {
    /// File suffix, e.g. "q-curve".
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Serialize)]
pub struct Metrics {
    pub wall_ms: u64,
    pub events: u64,
}

/// Envelope persisted for every run, success or captured failure.
#[derive(Serialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub config_echo: String,
    pub payload: serde_json::Value,
    pub metrics: Metrics,
}

/// Content hash of the verbatim config text.
pub fn config_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    format!("sha256:{:x}", h.finalize())
}

/// File stem shared by one run's artifacts.
pub fn report_stem(kind: &str, seed: u64, hash: &str) -> String {
    let hex = hash.strip_prefix("sha256:").unwrap_or(hash);
    format!("{kind}-seed{seed}-{}", &hex[..8.min(hex.len())])
}

/// Writes bytes atomically: unique temp file in the same directory, fsync,
/// rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let tmp = dir.join(format!(
        ".{}.tmp-{}-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("report"),
        std::process::id(),
        nanos
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Writes one CSV series; `Display` for f64 round-trips, so the text is
/// deterministic.
pub fn write_csv(path: &Path, series: &Series) -> std::io::Result<()> {
    let mut out = String::new();
    out.push_str(&series.header.join(","));
    out.push('\n');
    for row in &series.rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

impl RunReport {
    /// Canonical bytes of the reproducibility unit.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(&self.payload).expect("payload serializes");
        bytes.push(b'\n');
        bytes
    }

    /// Writes the envelope, payload file, and series under `dir`; returns the
    /// envelope path.
    pub fn persist(&self, dir: &Path, series: &[Series]) -> std::io::Result<PathBuf> {
        let stem = report_stem(&self.kind, self.seed, &self.config_hash);
        let report_path = dir.join(format!("{stem}.json"));
        let mut envelope = serde_json::to_vec_pretty(self).expect("report serializes");
        envelope.push(b'\n');
        write_atomic(&report_path, &envelope)?;
        write_atomic(&dir.join(format!("{stem}.payload.json")), &self.payload_bytes())?;
        for s in series {
            write_csv(&dir.join(format!("{stem}-{}.csv", s.name)), s)?;
        }
        Ok(report_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_prefixed() {
        let h = config_hash("kind = simulate\n");
        assert!(h.starts_with("sha256:"));
        assert_eq!(h, config_hash("kind = simulate\n"));
        assert_ne!(h, config_hash("kind = q-audit\n"));
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("nested").join("report.json");
        write_atomic(&target, b"{}").unwrap();
        assert_eq!(fs::read(&target).unwrap(), b"{}");
        let names: Vec<_> = fs::read_dir(target.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1, "leftovers: {names:?}");
    }

    #[test]
    fn persist_writes_envelope_payload_and_series() {
        let dir = tempfile::tempdir().unwrap();
        let report = RunReport {
            tool: "hardball".into(),
            version: "0.0.0".into(),
            kind: "simulate".into(),
            seed: 7,
            config_hash: config_hash("x"),
            config_echo: "x".into(),
            payload: serde_json::json!({"b": 1, "a": 2}),
            metrics: Metrics { wall_ms: 1, events: 2 },
        };
        let series = Series {
            name: "curve".into(),
            header: vec!["t".into(), "v".into()],
            rows: vec![vec![0.0, 1.5], vec![1.0, 2.5]],
        };
        let path = report.persist(dir.path(), &[series]).unwrap();
        assert!(path.exists());
        let stem = report_stem("simulate", 7, &report.config_hash);
        let payload = fs::read_to_string(dir.path().join(format!("{stem}.payload.json"))).unwrap();
        // keys are emitted sorted, making payload bytes order-independent
        assert!(payload.find("\"a\"").unwrap() < payload.find("\"b\"").unwrap());
        let csv = fs::read_to_string(dir.path().join(format!("{stem}-curve.csv"))).unwrap();
        assert_eq!(csv, "t,v\n0,1.5\n1,2.5\n");
    }
}
