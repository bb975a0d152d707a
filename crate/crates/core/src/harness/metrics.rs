//! JSON-lines metric logs. Wall-clock time goes to a separate file so the
//! metric log itself is reproducible byte for byte.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{AlamError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub scalars: BTreeMap<String, f64>,
    pub tags: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct TimingRecord {
    step: u64,
    wall_time_s: f64,
}

pub struct MetricsLog {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    last_step: Option<u64>,
    start: Instant,
}

/// Drops lines whose step is beyond `step`, for resumed runs.
fn truncate_after(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .map_while(|l| l.ok())
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                .is_some_and(|s| s <= step)
        })
        .collect();
    let mut out = String::new();
    for l in keep {
        out.push_str(&l);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

impl MetricsLog {
    /// Creates fresh log files in `dir`.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            metrics: BufWriter::new(File::create(dir.join(METRICS_FILE))?),
            timing: BufWriter::new(File::create(dir.join(TIMING_FILE))?),
            last_step: None,
            start: Instant::now(),
        })
    }

    /// Re-opens logs of an interrupted run, discarding records after `step`.
    pub fn resume(dir: &Path, step: u64) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            truncate_after(&p, step)?;
            Ok(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?))
        };
        Ok(Self { metrics: open(METRICS_FILE)?, timing: open(TIMING_FILE)?, last_step: Some(step), start: Instant::now() })
    }

    pub fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            if rec.step < last {
                return Err(AlamError::invalid(format!("metric step {} precedes {last}", rec.step)));
            }
        }
        self.last_step = Some(rec.step);
        serde_json::to_writer(&mut self.metrics, rec)?;
        self.metrics.write_all(b"\n")?;
        let t = TimingRecord { step: rec.step, wall_time_s: self.start.elapsed().as_secs_f64() };
        serde_json::to_writer(&mut self.timing, &t)?;
        self.timing.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(dir.join(METRICS_FILE))?;
    BufReader::new(f).lines().map(|l| Ok(serde_json::from_str(&l?)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, v: f64) -> MetricRecord {
        MetricRecord { step, scalars: BTreeMap::from([("loss".to_string(), v)]), tags: BTreeMap::new() }
    }

    #[test]
    fn records_round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = MetricsLog::create(dir.path()).unwrap();
            log.record(&rec(1, 0.5)).unwrap();
            log.record(&rec(2, 0.25)).unwrap();
            assert!(log.record(&rec(1, 0.1)).is_err());
        }
        assert_eq!(read_metrics(dir.path()).unwrap(), vec![rec(1, 0.5), rec(2, 0.25)]);
    }

    #[test]
    fn resume_discards_later_records() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = MetricsLog::create(dir.path()).unwrap();
            for s in 1..=4 {
                log.record(&rec(s, s as f64)).unwrap();
            }
        }
        {
            let mut log = MetricsLog::resume(dir.path(), 2).unwrap();
            log.record(&rec(3, 9.0)).unwrap();
        }
        let steps: Vec<_> = read_metrics(dir.path()).unwrap().iter().map(|r| (r.step, r.scalars["loss"])).collect();
        assert_eq!(steps, vec![(1, 1.0), (2, 2.0), (3, 9.0)]);
    }
}
